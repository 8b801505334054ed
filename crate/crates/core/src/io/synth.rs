//! Seeded synthetic corpora with planted ground truth.
//!
//! Every behavior in the vocabulary gets a direction from one shared
//! orthonormal set. Per sequence:
//!
//! * each grounded behavior has one planted patch (last layer) whose cosine
//!   with its direction is `(planted_grounded_cos + 1) / 2`;
//! * background patches carry a component along each of the sequence's
//!   behavior directions of at most half of `planted_hallucinated_cos`
//!   (relative to the patch norm);
//! * optionally each hallucinated behavior gets a near-miss patch at 99% of
//!   `planted_hallucinated_cos`, so it has weak spurious support that is
//!   still below the bound.
//!
//! Behavior tokens average exactly to the behavior direction at every text
//! layer.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SheError};
use crate::io::annotations::AnnotationFile;
use crate::io::archive::TensorArchive;
use crate::io::bundle::bundles_to_archive;
use crate::model::{
    Annotation, CaptionRecord, CaptionTokens, FeatureIndex, Label, LayerPatchEmbeddings, LayerTokenEmbeddings,
    SequenceBundle, Span, Vec32,
};
use crate::seeding::{derive_seed, derive_seed_n};

pub const BEHAVIOR_VOCABULARY: [&str; 24] = [
    "runs",
    "jumps",
    "sits down",
    "waves at",
    "picks up",
    "throws",
    "catches",
    "rides",
    "climbs",
    "dances",
    "eats",
    "drinks",
    "reads",
    "writes",
    "sings",
    "swims",
    "pushes",
    "pulls",
    "opens",
    "closes",
    "hugs",
    "points at",
    "kicks",
    "carries",
];

pub const OBJECT_VOCABULARY: [&str; 16] = [
    "ball", "dog", "bike", "cup", "book", "kite", "chair", "door", "guitar", "hat", "phone", "table", "box", "bottle",
    "umbrella", "microphone",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sequences: usize,
    pub frames: usize,
    pub patches: usize,
    pub layers: usize,
    pub dim: usize,
    pub grounded_behaviors: usize,
    pub hallucinated_behaviors: usize,
    pub real_objects: usize,
    pub hallucinated_objects: usize,
    pub planted_grounded_cos: f64,
    pub planted_hallucinated_cos: f64,
    /// Plant a weak (sub-threshold) supporting patch for each hallucinated
    /// behavior.
    pub near_miss: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 20,
            patches: 16,
            layers: 4,
            dim: 64,
            grounded_behaviors: 3,
            hallucinated_behaviors: 2,
            real_objects: 2,
            hallucinated_objects: 1,
            planted_grounded_cos: 0.8,
            planted_hallucinated_cos: 0.2,
            near_miss: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SheError::InvalidConfig(m));
        for (name, v) in [
            ("sequences", self.sequences),
            ("frames", self.frames),
            ("patches", self.patches),
            ("layers", self.layers),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let (g, h) = (self.planted_grounded_cos, self.planted_hallucinated_cos);
        if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&h) || h >= g {
            return bad(format!("need 0 <= hallucinated cos ({h}) < grounded cos ({g}) <= 1"));
        }
        let behaviors = self.grounded_behaviors + self.hallucinated_behaviors;
        if behaviors >= self.dim || behaviors > self.vocabulary_size() {
            return bad(format!(
                "{behaviors} behaviors per sequence need dim > {behaviors} and a vocabulary of {}",
                self.vocabulary_size()
            ));
        }
        if self.real_objects + self.hallucinated_objects > OBJECT_VOCABULARY.len() {
            return bad(format!("at most {} objects per caption", OBJECT_VOCABULARY.len()));
        }
        if self.planted_count() > self.frames * self.patches {
            return bad(format!("{} planted patches do not fit", self.planted_count()));
        }
        Ok(())
    }

    fn vocabulary_size(&self) -> usize {
        BEHAVIOR_VOCABULARY.len().min(self.dim)
    }

    fn planted_count(&self) -> usize {
        self.grounded_behaviors + if self.near_miss { self.hallucinated_behaviors } else { 0 }
    }
}

/// Where a behavior's support was planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPatch {
    pub sequence_id: String,
    pub caption_id: String,
    pub behavior_id: String,
    pub label: Label,
    pub at: FeatureIndex,
    pub cosine: f64,
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components of `v` along each of the orthonormal `basis`.
fn reject(v: &mut [f64], basis: &[&Vec<f64>]) {
    for u in basis {
        let c = dot(v, u);
        for (x, y) in v.iter_mut().zip(u.iter()) {
            *x -= c * y;
        }
    }
}

/// Orthonormal vectors via Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, dim);
        // two passes for numerical orthogonality
        for _ in 0..2 {
            let basis: Vec<&Vec<f64>> = out.iter().collect();
            reject(&mut v, &basis);
        }
        let n = norm(&v);
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Unit vector orthogonal to every vector in `basis`.
fn unit_outside(rng: &mut impl Rng, basis: &[&Vec<f64>], dim: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, dim);
        reject(&mut v, basis);
        reject(&mut v, basis);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn to_vec32(v: &[f64]) -> Result<Vec32> {
    Vec32::from_f64(v)
}

struct Vocabulary {
    directions: Vec<Vec<f64>>,
}

fn vocabulary(spec: &SynthSpec) -> Vocabulary {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, b"vocabulary"));
    Vocabulary {
        directions: orthonormal(&mut rng, spec.vocabulary_size(), spec.dim),
    }
}

struct PlannedBehavior {
    word: usize,
    label: Label,
}

fn generate_sequence(
    spec: &SynthSpec,
    vocab: &Vocabulary,
    index: usize,
    truth: &mut Vec<PlantedPatch>,
) -> Result<SequenceBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(spec.seed, index as u64));
    let sequence_id = format!("seq{index:03}");
    let caption_id = format!("{sequence_id}/c0");
    let dim = spec.dim;
    let top_layer = spec.layers - 1;

    let n_behaviors = spec.grounded_behaviors + spec.hallucinated_behaviors;
    let words = sample(&mut rng, vocab.directions.len(), n_behaviors).into_vec();
    let mut behaviors: Vec<PlannedBehavior> = words
        .iter()
        .enumerate()
        .map(|(k, &word)| PlannedBehavior {
            word,
            label: if k < spec.grounded_behaviors {
                Label::Real
            } else {
                Label::Hallucinated
            },
        })
        .collect();
    behaviors.shuffle(&mut rng);

    let dir = |b: &PlannedBehavior| &vocab.directions[b.word];
    let all_dirs: Vec<&Vec<f64>> = behaviors.iter().map(dir).collect();

    // background patches
    let bound = spec.planted_hallucinated_cos;
    let mut grid: Vec<Vec<Vec<Vec<f64>>>> = (0..spec.frames)
        .map(|_| {
            (0..spec.layers)
                .map(|_| {
                    (0..spec.patches)
                        .map(|_| {
                            let mut r = gaussian(&mut rng, dim);
                            reject(&mut r, &all_dirs);
                            reject(&mut r, &all_dirs);
                            let rn = norm(&r);
                            for h in &all_dirs {
                                let a = rng.random_range(-0.5..=0.5) * bound * rn;
                                for (x, y) in r.iter_mut().zip(h.iter()) {
                                    *x += a * y;
                                }
                            }
                            r
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    // planted support, at distinct (frame, patch) slots of the top layer
    let planted: Vec<(usize, f64)> = behaviors
        .iter()
        .enumerate()
        .filter_map(|(k, b)| match b.label {
            Label::Real => Some((k, (spec.planted_grounded_cos + 1.0) / 2.0)),
            Label::Hallucinated if spec.near_miss => Some((k, 0.99 * bound)),
            _ => None,
        })
        .collect();
    let slots = sample(&mut rng, spec.frames * spec.patches, planted.len()).into_vec();
    for ((k, c), slot) in planted.into_iter().zip(slots) {
        let (frame, patch) = (slot / spec.patches, slot % spec.patches);
        let d = dir(&behaviors[k]);
        let r = unit_outside(&mut rng, &all_dirs, dim);
        let s = (1.0 - c * c).sqrt();
        grid[frame][top_layer][patch] = d.iter().zip(&r).map(|(x, y)| c * x + s * y).collect();
        truth.push(PlantedPatch {
            sequence_id: sequence_id.clone(),
            caption_id: caption_id.clone(),
            behavior_id: format!("b{k}"),
            label: behaviors[k].label,
            at: FeatureIndex {
                frame,
                patch,
                layer: top_layer,
            },
            cosine: c,
        });
    }

    let frames = grid
        .into_iter()
        .enumerate()
        .map(|(t, layers)| {
            layers
                .into_iter()
                .enumerate()
                .map(|(l, patches)| {
                    Ok(LayerPatchEmbeddings {
                        layer_index: l,
                        frame_index: t,
                        patch_embeddings: patches.iter().map(|p| to_vec32(p)).collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    // caption text
    let mut tokens: Vec<String> = vec!["someone".into()];
    let mut behavior_annotations = Vec::new();
    for (k, b) in behaviors.iter().enumerate() {
        if k > 0 {
            tokens.push("and".into());
        }
        let start = tokens.len();
        tokens.extend(BEHAVIOR_VOCABULARY[b.word].split(' ').map(String::from));
        behavior_annotations.push(Annotation::new(
            format!("b{k}"),
            Span::new(start, tokens.len() - 1),
            b.label,
            BEHAVIOR_VOCABULARY[b.word],
        ));
    }
    let n_objects = spec.real_objects + spec.hallucinated_objects;
    let object_words = sample(&mut rng, OBJECT_VOCABULARY.len(), n_objects).into_vec();
    let mut object_annotations = Vec::new();
    for (k, &w) in object_words.iter().enumerate() {
        tokens.push(if k == 0 { "with" } else { "and" }.into());
        tokens.push(OBJECT_VOCABULARY[w].into());
        let at = tokens.len() - 1;
        let label = if k < spec.real_objects {
            Label::Real
        } else {
            Label::Hallucinated
        };
        object_annotations.push(Annotation::new(format!("o{k}"), Span::new(at, at), label, OBJECT_VOCABULARY[w]));
    }

    let mut text_layers = Vec::with_capacity(spec.layers);
    for layer_index in 0..spec.layers {
        let mut embeddings: Vec<Vec<f64>> = (0..tokens.len()).map(|_| gaussian(&mut rng, dim)).collect();
        for (b, ann) in behaviors.iter().zip(&behavior_annotations) {
            let n = ann.span.len();
            let mut noise: Vec<Vec<f64>> = (0..n)
                .map(|_| gaussian(&mut rng, dim).into_iter().map(|x| 0.5 * x).collect())
                .collect();
            if n == 1 {
                noise[0].iter_mut().for_each(|x| *x = 0.0);
            }
            let mean: Vec<f64> = (0..dim)
                .map(|i| noise.iter().map(|e| e[i]).sum::<f64>() / n as f64)
                .collect();
            for (slot, e) in ann.span.indices().zip(noise) {
                embeddings[slot] = dir(b)
                    .iter()
                    .zip(e.iter().zip(&mean))
                    .map(|(d, (x, m))| d + x - m)
                    .collect();
            }
        }
        text_layers.push(LayerTokenEmbeddings {
            layer_index,
            token_embeddings: embeddings.iter().map(|e| to_vec32(e)).collect::<Result<_>>()?,
        });
    }

    let caption = CaptionRecord {
        caption_id,
        tokens,
        behaviors: behavior_annotations,
        objects: object_annotations,
    };
    SequenceBundle::new(
        sequence_id,
        frames,
        vec![CaptionTokens { layers: text_layers }],
        vec![caption],
    )
}

/// Bundles plus the location of every planted patch.
pub fn generate_with_truth(spec: &SynthSpec) -> Result<(Vec<SequenceBundle>, Vec<PlantedPatch>)> {
    spec.validate()?;
    let vocab = vocabulary(spec);
    let mut truth = Vec::new();
    let bundles = (0..spec.sequences)
        .map(|i| generate_sequence(spec, &vocab, i, &mut truth))
        .collect::<Result<Vec<_>>>()?;
    Ok((bundles, truth))
}

pub fn generate_bundles(spec: &SynthSpec) -> Result<Vec<SequenceBundle>> {
    Ok(generate_with_truth(spec)?.0)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<(TensorArchive, AnnotationFile)> {
    bundles_to_archive(&generate_bundles(spec)?)
}
