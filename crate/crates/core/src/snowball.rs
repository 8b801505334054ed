//! Perturbation lab for error propagation along a sequence.
//!
//! A stub captioner scores a behavior library against every frame and
//! carries a bias toward behaviors it has already emitted. Perturbing early
//! frames can then push an unsupported behavior over the emission threshold,
//! after which the carryover keeps it alive for the rest of the sequence.
//! Perturbations act on patch embeddings: additive Gaussian noise stands in
//! for blur, patch zeroing for occlusion.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{detect_embedding, span_mean, BehaviorDetection, DetectionConfig};
use crate::error::{Result, SheError};
use crate::io::synth::{generate_bundles, SynthSpec};
use crate::model::{dot_unchecked, Annotation, CaptionRecord, Frame, Label, SequenceBundle, Span, Vec32, DEGENERATE_NORM};
use crate::seeding::{derive_seed, derive_seed_n};

pub const SEGMENTS: usize = 10;
pub const DEFAULT_SIGMA: f64 = 1.5;
pub const DEFAULT_OCCLUSION: f64 = 0.2;
pub const DEFAULT_CARRYOVER: f64 = 0.5;
pub const DEFAULT_EMISSION_THRESHOLD: f64 = 0.22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Perturbation {
    GaussianNoise { sigma: f64 },
    Occlusion { fraction: f64 },
}

impl Perturbation {
    pub fn gaussian() -> Self {
        Self::GaussianNoise { sigma: DEFAULT_SIGMA }
    }

    pub fn occlusion() -> Self {
        Self::Occlusion {
            fraction: DEFAULT_OCCLUSION,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianNoise { .. } => "gaussian-noise",
            Self::Occlusion { .. } => "occlusion",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::GaussianNoise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(SheError::InvalidConfig(format!("sigma must be positive, got {sigma}")))
            }
            Self::Occlusion { fraction } if !(fraction > 0.0 && fraction < 1.0) => Err(SheError::InvalidConfig(
                format!("occlusion fraction must lie in (0, 1), got {fraction}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: Perturbation,
    /// 1-based segment, at most [`SEGMENTS`].
    pub segment: usize,
    pub seed: u64,
}

/// Splits `frame_count` frames into `k` contiguous ranges whose sizes differ
/// by at most one; earlier ranges take the remainder.
pub fn segment_sequence(frame_count: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || frame_count < k {
        return Err(SheError::InvalidConfig(format!(
            "cannot split {frame_count} frames into {k} segments"
        )));
    }
    let (base, extra) = (frame_count / k, frame_count % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            start += len;
            start - len..start
        })
        .collect())
}

fn segment_range(frame_count: usize, segment: usize) -> Result<Range<usize>> {
    if !(1..=SEGMENTS).contains(&segment) {
        return Err(SheError::InvalidConfig(format!(
            "segment index {segment} outside 1..={SEGMENTS}"
        )));
    }
    Ok(segment_sequence(frame_count, SEGMENTS)?.swap_remove(segment - 1))
}

/// Perturbed copy of frame `t`. The draw depends only on `(seed, t)`, so a
/// frame gets the same perturbation whichever segment is being targeted.
fn perturb_frame(frame: &Frame, kind: Perturbation, seed: u64, t: usize) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(seed, t as u64));
    let mut out = frame.clone();
    match kind {
        Perturbation::GaussianNoise { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| SheError::InvalidConfig(e.to_string()))?;
            for layer in &mut out {
                for p in &mut layer.patch_embeddings {
                    let noisy: Vec<f32> = p
                        .as_slice()
                        .iter()
                        .map(|&x| (f64::from(x) + normal.sample(&mut rng)) as f32)
                        .collect();
                    *p = Vec32::new(noisy)?;
                }
            }
        }
        Perturbation::Occlusion { fraction } => {
            let patches = frame[0].patch_embeddings.len();
            let dim = frame[0].patch_embeddings[0].dim();
            let count = (fraction * patches as f64).round() as usize;
            for i in sample(&mut rng, patches, count.min(patches)) {
                for layer in &mut out {
                    layer.patch_embeddings[i] = Vec32::zeros(dim)?;
                }
            }
        }
    }
    Ok(out)
}

pub fn perturb(bundle: &SequenceBundle, spec: &PerturbSpec) -> Result<SequenceBundle> {
    spec.kind.validate()?;
    let range = segment_range(bundle.frame_count(), spec.segment)?;
    let frames = bundle
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| {
            if range.contains(&t) {
                perturb_frame(f, spec.kind, spec.seed, t)
            } else {
                Ok(f.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(bundle.with_frames(frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub surface: String,
    pub direction: Vec32,
    /// Whether the behavior is actually present in the sequence.
    pub grounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubModel {
    pub library: Vec<LibraryEntry>,
    /// Bias per previous emission of the same behavior.
    pub carryover: f64,
    pub emission_threshold: f64,
    /// Image layers the model looks at.
    pub layers: Vec<usize>,
}

impl StubModel {
    /// Normalizes the library directions and checks the parameters.
    pub fn new(library: Vec<LibraryEntry>, carryover: f64, emission_threshold: f64, layers: Vec<usize>) -> Result<Self> {
        let library = library
            .into_iter()
            .map(|e| {
                Ok(LibraryEntry {
                    direction: e.direction.normalized()?,
                    ..e
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            library,
            carryover,
            emission_threshold,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.carryover) {
            return Err(SheError::InvalidConfig(format!(
                "carryover must lie in [0, 1), got {}",
                self.carryover
            )));
        }
        if !self.emission_threshold.is_finite() {
            return Err(SheError::InvalidConfig("emission threshold must be finite".into()));
        }
        if self.layers.is_empty() {
            return Err(SheError::Empty("stub model layers"));
        }
        if let Some(e) = self.library.iter().find(|e| (e.direction.norm() - 1.0).abs() > 1e-4) {
            return Err(SheError::InvalidConfig(format!("direction of `{}` is not unit-norm", e.surface)));
        }
        Ok(())
    }

    /// Library built from the annotated behaviors of `bundle`: one entry per
    /// distinct surface, directed along its token mean at `text_layer`, and
    /// grounded iff labeled real. Unknown and degenerate behaviors are left
    /// out.
    pub fn from_bundle(
        bundle: &SequenceBundle,
        text_layer: usize,
        carryover: f64,
        emission_threshold: f64,
        layers: Vec<usize>,
    ) -> Result<Self> {
        let mut library: Vec<LibraryEntry> = Vec::new();
        for caption in bundle.captions() {
            for b in &caption.behaviors {
                let grounded = match b.label {
                    Label::Real => true,
                    Label::Hallucinated => false,
                    Label::Unknown => continue,
                };
                let surface = b.key();
                if library.iter().any(|e| e.surface == surface) {
                    continue;
                }
                let Ok(direction) = span_mean(bundle, &caption.caption_id, b.span, text_layer)?.normalized() else {
                    continue;
                };
                library.push(LibraryEntry {
                    surface,
                    direction,
                    grounded,
                });
            }
        }
        Self::new(library, carryover, emission_threshold, layers)
    }
}

impl StubModel {
    /// Library from `bundle` at the default text layer, looking at every
    /// image layer.
    pub fn for_bundle(bundle: &SequenceBundle, carryover: f64, emission_threshold: f64) -> Result<Self> {
        let text_layer = DetectionConfig::for_bundle(bundle).text_layer;
        Self::from_bundle(bundle, text_layer, carryover, emission_threshold, bundle.image_layers().to_vec())
    }
}

/// `scores[i][b]`: best cosine between library entry `b` and any patch of
/// frame `frames[i]` at any of the model's layers.
fn visual_scores<'a>(
    bundle: &SequenceBundle,
    model: &StubModel,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> Result<Vec<Vec<f64>>> {
    let positions = model
        .layers
        .iter()
        .map(|&l| bundle.layer_position(l).ok_or(SheError::MissingLayer(l)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(e) = model.library.iter().find(|e| e.direction.dim() != bundle.dim()) {
        return Err(SheError::DimensionMismatch {
            left: bundle.dim(),
            right: e.direction.dim(),
        });
    }
    Ok(frames
        .into_iter()
        .map(|frame| {
            let mut best = vec![f64::NEG_INFINITY; model.library.len()];
            for &pos in &positions {
                for p in &frame[pos].patch_embeddings {
                    let norm = p.norm();
                    for (slot, e) in best.iter_mut().zip(&model.library) {
                        let cos = if norm < DEGENERATE_NORM {
                            0.0
                        } else {
                            dot_unchecked(p.as_slice(), e.direction.as_slice()) / norm
                        };
                        *slot = slot.max(cos);
                    }
                }
            }
            best
        })
        .collect())
}

/// Library indices emitted at each frame.
fn emit(scores: &[Vec<f64>], model: &StubModel) -> Vec<Vec<usize>> {
    let mut counts = vec![0usize; model.library.len()];
    scores
        .iter()
        .map(|row| {
            let emitted: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|&(b, &s)| s + model.carryover * counts[b] as f64 > model.emission_threshold)
                .map(|(b, _)| b)
                .collect();
            for &b in &emitted {
                counts[b] += 1;
            }
            emitted
        })
        .collect()
}

fn caption_for(sequence_id: &str, t: usize, emitted: &[usize], model: &StubModel) -> CaptionRecord {
    let mut tokens: Vec<String> = Vec::new();
    let mut behaviors = Vec::with_capacity(emitted.len());
    for &b in emitted {
        let entry = &model.library[b];
        if !tokens.is_empty() {
            tokens.push("and".into());
        }
        let start = tokens.len();
        tokens.extend(entry.surface.split_whitespace().map(String::from));
        let end = tokens.len().max(start + 1) - 1;
        if tokens.len() == start {
            tokens.push(entry.surface.clone());
        }
        let label = if entry.grounded { Label::Real } else { Label::Hallucinated };
        behaviors.push(Annotation::new(format!("b{b}"), Span::new(start, end), label, entry.surface.clone()));
    }
    CaptionRecord {
        caption_id: format!("{sequence_id}/f{t}"),
        tokens,
        behaviors,
        objects: Vec::new(),
    }
}

/// One caption per frame, listing the behaviors whose visual score plus
/// carryover bias exceeds the emission threshold.
pub fn stub_generate(bundle: &SequenceBundle, model: &StubModel) -> Result<Vec<CaptionRecord>> {
    model.validate()?;
    let scores = visual_scores(bundle, model, bundle.frames())?;
    Ok(emit(&scores, model)
        .iter()
        .enumerate()
        .map(|(t, e)| caption_for(bundle.sequence_id(), t, e, model))
        .collect())
}

/// Fraction of captions that mention at least one hallucinated behavior.
pub fn bh_rate(captions: &[CaptionRecord]) -> f64 {
    if captions.is_empty() {
        return 0.0;
    }
    captions.iter().filter(|c| c.n_h() > 0).count() as f64 / captions.len() as f64
}

fn emitted_bh_rate(emissions: &[Vec<usize>], model: &StubModel) -> f64 {
    if emissions.is_empty() {
        return 0.0;
    }
    let hallucinated = emissions
        .iter()
        .filter(|e| e.iter().any(|&b| !model.library[b].grounded))
        .count();
    hallucinated as f64 / emissions.len() as f64
}

/// Scores every emitted behavior of stub captions against `bundle`, using
/// the library direction as the behavior embedding.
pub fn detect_emissions(
    bundle: &SequenceBundle,
    captions: &[CaptionRecord],
    model: &StubModel,
    cfg: &DetectionConfig,
) -> Result<Vec<BehaviorDetection>> {
    let mut out = Vec::new();
    for c in captions {
        for b in &c.behaviors {
            let entry = b
                .id
                .strip_prefix('b')
                .and_then(|i| i.parse::<usize>().ok())
                .and_then(|i| model.library.get(i))
                .ok_or_else(|| SheError::UnknownReference(format!("behavior `{}` of `{}`", b.id, c.caption_id)))?;
            out.push(detect_embedding(bundle, &c.caption_id, b, entry.direction.clone(), cfg)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageExperiment {
    pub kinds: Vec<Perturbation>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for StageExperiment {
    fn default() -> Self {
        Self {
            kinds: vec![Perturbation::gaussian(), Perturbation::occlusion()],
            trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStat {
    pub kind: Perturbation,
    /// 1-based.
    pub segment: usize,
    pub mean_delta_bh: f64,
    pub std_delta_bh: f64,
    /// Corpus-mean ΔBH of each trial.
    pub per_trial: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Perturbs each segment in turn and records the change in hallucination
/// rate relative to the clean sequence, averaged over the corpus per trial.
///
/// Every trial has its own seed, shared by all segments, so segments are
/// compared under the same random draws. Rows come out grouped by kind in
/// the given order, then by segment.
pub fn run_stage_experiment(cases: &[(SequenceBundle, StubModel)], exp: &StageExperiment) -> Result<Vec<SegmentStat>> {
    if cases.is_empty() {
        return Err(SheError::Empty("stage experiment corpus"));
    }
    if exp.trials == 0 {
        return Err(SheError::InvalidConfig("trials must be positive".into()));
    }
    for k in &exp.kinds {
        k.validate()?;
    }

    struct Prepared<'a> {
        bundle: &'a SequenceBundle,
        model: &'a StubModel,
        segments: Vec<Range<usize>>,
        clean: Vec<Vec<f64>>,
        clean_rate: f64,
    }
    let prepared = cases
        .iter()
        .map(|(bundle, model)| {
            model.validate()?;
            let clean = visual_scores(bundle, model, bundle.frames())?;
            let clean_rate = emitted_bh_rate(&emit(&clean, model), model);
            Ok(Prepared {
                bundle,
                model,
                segments: segment_sequence(bundle.frame_count(), SEGMENTS)?,
                clean,
                clean_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // deltas[kind][segment][trial]
    let mut deltas = vec![vec![vec![0.0; exp.trials]; SEGMENTS]; exp.kinds.len()];
    #[allow(clippy::needless_range_loop)]
    for trial in 0..exp.trials {
        let trial_seed = derive_seed_n(exp.seed, trial as u64);
        for p in &prepared {
            let seed = derive_seed(trial_seed, p.bundle.sequence_id().as_bytes());
            for (k, &kind) in exp.kinds.iter().enumerate() {
                let noisy_frames = p
                    .bundle
                    .frames()
                    .iter()
                    .enumerate()
                    .map(|(t, f)| perturb_frame(f, kind, seed, t))
                    .collect::<Result<Vec<_>>>()?;
                let noisy = visual_scores(p.bundle, p.model, &noisy_frames)?;
                for (s, range) in p.segments.iter().enumerate() {
                    let mut scores = p.clean.clone();
                    scores[range.clone()].clone_from_slice(&noisy[range.clone()]);
                    let rate = emitted_bh_rate(&emit(&scores, p.model), p.model);
                    deltas[k][s][trial] += (rate - p.clean_rate) / prepared.len() as f64;
                }
            }
        }
    }

    Ok(exp
        .kinds
        .iter()
        .zip(deltas)
        .flat_map(|(&kind, per_segment)| {
            per_segment.into_iter().enumerate().map(move |(s, per_trial)| {
                let (mean_delta_bh, std_delta_bh) = mean_std(&per_trial);
                SegmentStat {
                    kind,
                    segment: s + 1,
                    mean_delta_bh,
                    std_delta_bh,
                    per_trial,
                }
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthPoint {
    pub frames: usize,
    /// Fraction of (sequence, trial) responses with any hallucinated behavior.
    pub response_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSweep {
    pub lengths: Vec<usize>,
    /// Noise applied to every frame, modeling ordinary visual ambiguity.
    pub sigma: f64,
    pub carryover: f64,
    pub emission_threshold: f64,
    pub trials: usize,
}

/// Response-level hallucination rate against sequence length on synthetic
/// corpora built from `base`. Frames per segment scale with length, so the
/// same sweep covers both axes.
pub fn length_sweep(base: &SynthSpec, sweep: &LengthSweep) -> Result<Vec<LengthPoint>> {
    let kind = Perturbation::GaussianNoise { sigma: sweep.sigma };
    kind.validate()?;
    sweep
        .lengths
        .iter()
        .map(|&frames| {
            let spec = SynthSpec { frames, ..base.clone() };
            let bundles = generate_bundles(&spec)?;
            let mut hallucinated = 0usize;
            let mut total = 0usize;
            for bundle in &bundles {
                let model = StubModel::for_bundle(bundle, sweep.carryover, sweep.emission_threshold)?;
                for trial in 0..sweep.trials {
                    let seed = derive_seed(derive_seed_n(base.seed, trial as u64), bundle.sequence_id().as_bytes());
                    let noisy = bundle
                        .frames()
                        .iter()
                        .enumerate()
                        .map(|(t, f)| perturb_frame(f, kind, seed, t))
                        .collect::<Result<Vec<_>>>()?;
                    let emissions = emit(&visual_scores(bundle, &model, &noisy)?, &model);
                    total += 1;
                    if emissions.iter().flatten().any(|&b| !model.library[b].grounded) {
                        hallucinated += 1;
                    }
                }
            }
            Ok(LengthPoint {
                frames,
                response_rate: hallucinated as f64 / total.max(1) as f64,
            })
        })
        .collect()
}
