//! Prior-bias diagnostics: co-occurrence of hallucinated behaviors with real
//! behaviors (CoS-BH) and with hallucinated objects (CoS-BO) across a corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SheError};
use crate::model::{normalize_surface, Annotation, CaptionRecord, Label};
use crate::seeding::derive_seed;

/// Decides which captions "mention" a surface by mapping it to a match key.
pub trait SurfaceMatcher {
    fn key(&self, surface: &str) -> String;
}

/// Exact match on the normalized surface.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactNormalized;

impl SurfaceMatcher for ExactNormalized {
    fn key(&self, surface: &str) -> String {
        normalize_surface(surface)
    }
}

/// Caption sets per mention key, kept separately for behaviors and objects.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionIndex {
    behaviors: BTreeMap<String, BTreeSet<String>>,
    objects: BTreeMap<String, BTreeSet<String>>,
}

impl CaptionIndex {
    pub fn behavior_captions(&self, key: &str) -> Option<&BTreeSet<String>> {
        self.behaviors.get(key)
    }

    pub fn object_captions(&self, key: &str) -> Option<&BTreeSet<String>> {
        self.objects.get(key)
    }

    pub fn behaviors(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.behaviors
    }

    pub fn objects(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.objects
    }
}

pub fn build_index(corpus: &[CaptionRecord]) -> Result<CaptionIndex> {
    build_index_with(corpus, &ExactNormalized)
}

pub fn build_index_with(corpus: &[CaptionRecord], matcher: &impl SurfaceMatcher) -> Result<CaptionIndex> {
    let mut ids = HashSet::new();
    let mut index = CaptionIndex::default();
    for caption in corpus {
        if !ids.insert(caption.caption_id.as_str()) {
            return Err(SheError::DuplicateId(caption.caption_id.clone()));
        }
        for b in &caption.behaviors {
            index
                .behaviors
                .entry(matcher.key(&b.surface))
                .or_default()
                .insert(caption.caption_id.clone());
        }
        for o in &caption.objects {
            index
                .objects
                .entry(matcher.key(&o.surface))
                .or_default()
                .insert(caption.caption_id.clone());
        }
    }
    Ok(index)
}

fn lookup<'a>(map: &'a BTreeMap<String, BTreeSet<String>>, a: &Annotation) -> Result<&'a BTreeSet<String>> {
    let key = a.key();
    map.get(&key).ok_or(SheError::Unindexed(key))
}

fn pair_sum<'a>(left: impl Iterator<Item = &'a BTreeSet<String>>, right: &[&BTreeSet<String>]) -> f64 {
    let mut total = 0.0;
    for a in left {
        for b in right {
            let shared = a.intersection(b).count();
            total += shared as f64 / (a.len() + b.len()) as f64;
        }
    }
    total
}

fn hallucinated_sets<'a>(c: &CaptionRecord, idx: &'a CaptionIndex) -> Result<Vec<&'a BTreeSet<String>>> {
    c.behaviors
        .iter()
        .filter(|b| b.label == Label::Hallucinated)
        .map(|b| lookup(&idx.behaviors, b))
        .collect()
}

/// Co-occurrence between the caption's hallucinated and real behaviors.
///
/// Each pair contributes `|A ∩ B| / (|A| + |B|)`; the denominator is a sum,
/// so a single term never exceeds 0.5.
pub fn cos_bh(c: &CaptionRecord, idx: &CaptionIndex) -> Result<f64> {
    let hallucinated = hallucinated_sets(c, idx)?;
    let real: Vec<_> = c
        .behaviors
        .iter()
        .filter(|b| b.label == Label::Real)
        .map(|b| lookup(&idx.behaviors, b))
        .collect::<Result<_>>()?;
    Ok(pair_sum(hallucinated.into_iter(), &real))
}

/// Co-occurrence between the caption's hallucinated behaviors and its
/// hallucinated objects.
pub fn cos_bo(c: &CaptionRecord, idx: &CaptionIndex) -> Result<f64> {
    let hallucinated = hallucinated_sets(c, idx)?;
    let objects: Vec<_> = c
        .objects
        .iter()
        .filter(|o| o.label == Label::Hallucinated)
        .map(|o| lookup(&idx.objects, o))
        .collect::<Result<_>>()?;
    Ok(pair_sum(hallucinated.into_iter(), &objects))
}

/// Replaces the caption's hallucinated behaviors with `n_h` real behaviors
/// drawn uniformly without replacement from the rest of the corpus.
///
/// Candidates are the distinct normalized surfaces labeled `Real` anywhere in
/// the corpus that do not already appear in `c`. The drawn surfaces are
/// assigned to the hallucinated slots in sorted order, so a forced draw is
/// seed-independent.
pub fn sample_control(c: &CaptionRecord, corpus: &[CaptionRecord], seed: u64) -> Result<CaptionRecord> {
    let n_h = c.n_h();
    if n_h == 0 {
        return Ok(c.clone());
    }
    let own: HashSet<String> = c.behaviors.iter().map(Annotation::key).collect();
    let candidates: Vec<String> = corpus
        .iter()
        .flat_map(|r| r.behaviors.iter())
        .filter(|b| b.label == Label::Real)
        .map(Annotation::key)
        .filter(|k| !own.contains(k))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if candidates.len() < n_h {
        return Err(SheError::InsufficientControl {
            needed: n_h,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<&String> = sample(&mut rng, candidates.len(), n_h)
        .into_iter()
        .map(|i| &candidates[i])
        .collect();
    picked.sort();

    let mut control = c.clone();
    let mut picks = picked.into_iter();
    for b in control.behaviors.iter_mut().filter(|b| b.label == Label::Hallucinated) {
        b.surface = picks.next().expect("one pick per hallucinated slot").clone();
    }
    Ok(control)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoSReport {
    pub caption_id: String,
    pub cos_bh: f64,
    pub cos_bo: f64,
    pub control_cos_bh: Option<f64>,
    pub control_cos_bo: Option<f64>,
    pub n_h: usize,
    pub n_r: usize,
    pub m: usize,
}

/// Scores every caption in the corpus, drawing a control sample for each
/// caption with at least one hallucinated behavior.
///
/// The control seed depends only on `seed` and the caption id, so reports do
/// not depend on corpus order. When too few real behaviors exist the control
/// fields are left empty.
pub fn score_corpus(corpus: &[CaptionRecord], seed: u64) -> Result<Vec<CoSReport>> {
    let idx = build_index(corpus)?;
    corpus
        .iter()
        .map(|c| {
            let (control_cos_bh, control_cos_bo) = if c.n_h() > 0 {
                match sample_control(c, corpus, derive_seed(seed, c.caption_id.as_bytes())) {
                    Ok(control) => (Some(cos_bh(&control, &idx)?), Some(cos_bo(&control, &idx)?)),
                    Err(SheError::InsufficientControl { .. }) => (None, None),
                    Err(e) => return Err(e),
                }
            } else {
                (None, None)
            };
            Ok(CoSReport {
                caption_id: c.caption_id.clone(),
                cos_bh: cos_bh(c, &idx)?,
                cos_bo: cos_bo(c, &idx)?,
                control_cos_bh,
                control_cos_bo,
                n_h: c.n_h(),
                n_r: c.n_r(),
                m: c.m(),
            })
        })
        .collect()
}

/// Histogram bin bounds are `[lower, lower + width)`, with the last bin
/// closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;

/// Fixed-width histogram over `[0, max(values)]`.
pub fn histogram(values: &[f64], width: f64) -> Result<Vec<HistogramBin>> {
    if !(width.is_finite() && width > 0.0) {
        return Err(SheError::InvalidConfig(format!("bin width {width} must be positive")));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SheError::InvalidConfig("histogram values must be finite and >= 0".into()));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let bins = ((max / width).floor() as usize + 1).max(1);
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower: i as f64 * width,
            upper: (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = ((v / width).floor() as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}
