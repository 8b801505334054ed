//! Visual-textual alignment check.
//!
//! A behavior is represented by the mean of its token embeddings at the text
//! layer. Every patch is scored by its best cosine with that vector over the
//! configured image layers; the behavior's confidence is the best patch score
//! in the whole sequence. Low-confidence behaviors are flagged as
//! hallucinated. The entropy of the behavior vector sets the radius of the
//! temporal window used later for correction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SheError};
use crate::model::{cosine_unchecked, mean_vectors, BehaviorAnnotation, FeatureIndex, Label, SequenceBundle, Span, Vec32};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_THETA: f64 = 0.5;
pub const MAX_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub text_layer: usize,
    pub gamma: f64,
    pub theta: f64,
    pub layers: Vec<usize>,
}

/// Middle-to-late layers `[ceil(2D/3), D-1]` for a model of depth `D`.
pub fn default_layers(depth: usize) -> Vec<usize> {
    if depth == 0 {
        return Vec::new();
    }
    let start = (2 * depth).div_ceil(3).min(depth - 1);
    (start..depth).collect()
}

impl DetectionConfig {
    pub fn for_depth(depth: usize) -> Self {
        let layers = default_layers(depth);
        Self {
            text_layer: layers.first().copied().unwrap_or(0),
            gamma: DEFAULT_GAMMA,
            theta: DEFAULT_THETA,
            layers,
        }
    }

    pub fn for_bundle(bundle: &SequenceBundle) -> Self {
        Self::for_depth(bundle.depth())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= MAX_GAMMA) {
            return Err(SheError::InvalidConfig(format!("gamma {} outside (0, {MAX_GAMMA}]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(SheError::InvalidConfig(format!("theta {} outside [0, 1]", self.theta)));
        }
        if self.layers.is_empty() {
            return Err(SheError::InvalidConfig("empty layer set".into()));
        }
        Ok(())
    }

    /// Resolves the layer set against a bundle, failing on absent layers.
    fn check_layers(&self, bundle: &SequenceBundle) -> Result<()> {
        self.validate()?;
        for &l in &self.layers {
            bundle.layer_position(l).ok_or(SheError::MissingLayer(l))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Grounded,
    Hallucinated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLocation {
    pub frame: usize,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorDetection {
    pub sequence_id: String,
    pub caption_id: String,
    pub behavior_id: String,
    pub token_span: Span,
    pub label: Label,
    pub confidence: f64,
    pub entropy: f64,
    pub tau: usize,
    pub verdict: Verdict,
    /// Patch that attains the confidence.
    pub peak: PatchLocation,
    pub per_frame_scores: Vec<f64>,
    pub e_beh: Vec32,
}

/// Mean of the behavior's token embeddings at the configured text layer.
pub fn behavior_embedding(
    bundle: &SequenceBundle,
    caption_id: &str,
    b: &BehaviorAnnotation,
    cfg: &DetectionConfig,
) -> Result<Vec32> {
    span_mean(bundle, caption_id, b.span, cfg.text_layer)
}

pub(crate) fn span_mean(bundle: &SequenceBundle, caption_id: &str, span: Span, text_layer: usize) -> Result<Vec32> {
    if span.is_empty() {
        return Err(SheError::Empty("behavior span"));
    }
    let tokens = bundle.caption_tokens(caption_id, text_layer)?;
    let selected = tokens.get(span.start..=span.end).ok_or_else(|| SheError::SpanOutOfRange {
        owner: caption_id.to_string(),
        start: span.start,
        end: span.end,
        len: tokens.len(),
    })?;
    mean_vectors(selected)
}

/// Best cosine between `e_beh` and one patch seen through several layers.
pub fn patch_score<'a>(e_beh: &Vec32, across_layers: impl IntoIterator<Item = &'a Vec32>) -> Result<f64> {
    let mut best: Option<f64> = None;
    for feature in across_layers {
        if feature.dim() != e_beh.dim() {
            return Err(SheError::DimensionMismatch {
                left: e_beh.dim(),
                right: feature.dim(),
            });
        }
        let c = cosine_unchecked(e_beh.as_slice(), feature.as_slice());
        best = Some(best.map_or(c, |b| b.max(c)));
    }
    best.ok_or(SheError::Empty("layer set"))
}

fn check_query(bundle: &SequenceBundle, e_beh: &Vec32) -> Result<()> {
    if e_beh.dim() != bundle.dim() {
        return Err(SheError::DimensionMismatch {
            left: bundle.dim(),
            right: e_beh.dim(),
        });
    }
    Ok(())
}

/// Patch scores of one frame, in patch order.
fn frame_patch_scores(bundle: &SequenceBundle, frame: usize, e_beh: &Vec32, positions: &[usize]) -> Vec<f64> {
    let layers = &bundle.frames()[frame];
    (0..bundle.patch_count())
        .map(|j| {
            positions
                .iter()
                .map(|&p| cosine_unchecked(e_beh.as_slice(), layers[p].patch_embeddings[j].as_slice()))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn layer_positions(bundle: &SequenceBundle, cfg: &DetectionConfig) -> Result<Vec<usize>> {
    cfg.check_layers(bundle)?;
    Ok(cfg
        .layers
        .iter()
        .map(|&l| bundle.layer_position(l).expect("checked"))
        .collect())
}

/// First maximum of a non-empty slice, with its index.
fn arg_max(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Frame-level match: the best patch score in frame `frame`.
pub fn frame_score(bundle: &SequenceBundle, frame: usize, e_beh: &Vec32, cfg: &DetectionConfig) -> Result<f64> {
    check_query(bundle, e_beh)?;
    if frame >= bundle.frame_count() {
        return Err(SheError::UnknownReference(format!("frame {frame}")));
    }
    let positions = layer_positions(bundle, cfg)?;
    Ok(arg_max(&frame_patch_scores(bundle, frame, e_beh, &positions)).1)
}

/// Result of scanning a whole sequence with one query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScan {
    pub confidence: f64,
    pub peak: PatchLocation,
    pub per_frame_scores: Vec<f64>,
}

/// Scores every patch of every frame. Reductions run in fixed frame/patch
/// order and keep the first maximum.
pub fn scan_sequence(bundle: &SequenceBundle, e_beh: &Vec32, cfg: &DetectionConfig) -> Result<SequenceScan> {
    check_query(bundle, e_beh)?;
    let positions = layer_positions(bundle, cfg)?;
    let mut per_frame_scores = Vec::with_capacity(bundle.frame_count());
    let mut best = (f64::NEG_INFINITY, PatchLocation { frame: 0, patch: 0 });
    for t in 0..bundle.frame_count() {
        let (j, s) = arg_max(&frame_patch_scores(bundle, t, e_beh, &positions));
        if s > best.0 {
            best = (s, PatchLocation { frame: t, patch: j });
        }
        per_frame_scores.push(s);
    }
    Ok(SequenceScan {
        confidence: best.0,
        peak: best.1,
        per_frame_scores,
    })
}

/// Global confidence: best patch score over all frames.
pub fn confidence(bundle: &SequenceBundle, e_beh: &Vec32, cfg: &DetectionConfig) -> Result<f64> {
    Ok(scan_sequence(bundle, e_beh, cfg)?.confidence)
}

/// Shannon entropy (nats) of the normalized absolute component magnitudes.
pub fn embedding_entropy(e_beh: &Vec32) -> f64 {
    let total: f64 = e_beh.as_slice().iter().map(|x| (*x as f64).abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let h: f64 = e_beh
        .as_slice()
        .iter()
        .map(|x| (*x as f64).abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// `ceil(gamma * entropy(e_beh))`.
pub fn window_radius(e_beh: &Vec32, gamma: f64) -> usize {
    tau_from_entropy(embedding_entropy(e_beh), gamma)
}

pub fn tau_from_entropy(entropy: f64, gamma: f64) -> usize {
    (gamma * entropy).ceil().max(0.0) as usize
}

/// Frames covered by a window of size `tau` centered at `t`: `ceil(tau/2)` on
/// each side, clipped to the sequence.
pub fn window_frames(t: usize, tau: usize, frame_count: usize) -> std::ops::RangeInclusive<usize> {
    let half = tau.div_ceil(2);
    let lo = t.saturating_sub(half);
    let hi = (t + half).min(frame_count.saturating_sub(1));
    lo..=hi
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowMember {
    pub index: FeatureIndex,
    pub embedding: Vec32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedWindow {
    pub center: usize,
    pub patch: usize,
    pub radius: usize,
    pub members: Vec<WindowMember>,
}

/// Collects patch `patch` from every frame in the window at every configured
/// layer, frame-major.
pub fn aggregate_window(
    bundle: &SequenceBundle,
    t: usize,
    patch: usize,
    tau: usize,
    cfg: &DetectionConfig,
) -> Result<AggregatedWindow> {
    if t >= bundle.frame_count() || patch >= bundle.patch_count() {
        return Err(SheError::UnknownReference(format!("frame {t} patch {patch}")));
    }
    cfg.check_layers(bundle)?;
    let mut members = Vec::new();
    for frame in window_frames(t, tau, bundle.frame_count()) {
        for &layer in &cfg.layers {
            members.push(WindowMember {
                index: FeatureIndex { frame, patch, layer },
                embedding: bundle.patch(frame, layer, patch)?.clone(),
            });
        }
    }
    Ok(AggregatedWindow {
        center: t,
        patch,
        radius: tau.div_ceil(2),
        members,
    })
}

/// Scores an arbitrary query vector against the bundle and assembles a
/// detection record for it.
pub fn detect_embedding(
    bundle: &SequenceBundle,
    caption_id: &str,
    b: &BehaviorAnnotation,
    e_beh: Vec32,
    cfg: &DetectionConfig,
) -> Result<BehaviorDetection> {
    let scan = scan_sequence(bundle, &e_beh, cfg)?;
    let entropy = embedding_entropy(&e_beh);
    let verdict = if scan.confidence < cfg.theta {
        Verdict::Hallucinated
    } else {
        Verdict::Grounded
    };
    Ok(BehaviorDetection {
        sequence_id: bundle.sequence_id().to_string(),
        caption_id: caption_id.to_string(),
        behavior_id: b.id.clone(),
        token_span: b.span,
        label: b.label,
        confidence: scan.confidence,
        entropy,
        tau: tau_from_entropy(entropy, cfg.gamma),
        verdict,
        peak: scan.peak,
        per_frame_scores: scan.per_frame_scores,
        e_beh,
    })
}

/// One detection per annotated behavior, in caption then annotation order.
pub fn detect_behaviors(bundle: &SequenceBundle, cfg: &DetectionConfig) -> Result<Vec<BehaviorDetection>> {
    cfg.check_layers(bundle)?;
    let mut out = Vec::new();
    for caption in bundle.captions() {
        for b in &caption.behaviors {
            let e_beh = behavior_embedding(bundle, &caption.caption_id, b, cfg)?;
            out.push(detect_embedding(bundle, &caption.caption_id, b, e_beh, cfg)?);
        }
    }
    Ok(out)
}

/// Threshold at the given percentile (0..=100) of control-group confidences,
/// linearly interpolated between order statistics.
pub fn calibrate_threshold(control_scores: &[f64], percentile: f64) -> Result<f64> {
    if control_scores.is_empty() {
        return Err(SheError::Empty("control scores"));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(SheError::InvalidConfig(format!("percentile {percentile} outside [0, 100]")));
    }
    let mut sorted = control_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = percentile / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let w = rank - lo as f64;
    Ok((sorted[lo] * (1.0 - w) + sorted[hi] * w).clamp(0.0, 1.0))
}
