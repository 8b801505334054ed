//! Corpus-level hallucination metrics: BEACH, CHAIR, ranking mAP and
//! response-level hallucination rates. All counts are computed in `f64`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::{BehaviorDetection, Verdict};
use crate::error::{Result, SheError};
use crate::model::{CaptionRecord, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub beach_s: f64,
    pub beach_i: f64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub map: f64,
    pub bh_rate: f64,
    pub oh_rate: f64,
}

impl MetricSummary {
    pub const CSV_HEADER: [&'static str; 7] = ["beach_s", "beach_i", "chair_s", "chair_i", "map", "bh_rate", "oh_rate"];

    /// Values in `CSV_HEADER` order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.beach_s,
            self.beach_i,
            self.chair_s,
            self.chair_i,
            self.map,
            self.bh_rate,
            self.oh_rate,
        ]
    }

    /// Computes every metric. BEACH, CHAIR and rates come from the caption
    /// labels; mAP ranks the detections' confidences against those labels.
    pub fn compute(captions: &[CaptionRecord], detections: &[BehaviorDetection]) -> Result<Self> {
        let responses: Vec<(bool, bool)> = captions
            .iter()
            .map(|c| (c.n_h() > 0, c.m() > 0))
            .collect();
        let (bh_rate, oh_rate) = hallucination_rates(&responses)?;
        Ok(Self {
            beach_s: beach_s(captions, 1.0)?,
            beach_i: beach_i(captions)?,
            chair_s: chair_s(captions)?,
            chair_i: chair_i(captions)?,
            map: mean_average_precision(detections)?,
            bh_rate,
            oh_rate,
        })
    }
}

fn ratio(num: usize, den: usize, what: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(SheError::UndefinedMetric(what));
    }
    Ok(num as f64 / den as f64)
}

/// Hallucinated behaviors over all annotated behaviors.
pub fn beach_i(corpus: &[CaptionRecord]) -> Result<f64> {
    let total: usize = corpus.iter().map(|c| c.behaviors.len()).sum();
    let hallucinated: usize = corpus.iter().map(CaptionRecord::n_h).sum();
    ratio(hallucinated, total, "BEACH_I over zero annotated behaviors")
}

/// Captions with at least one hallucinated behavior over all captions,
/// times `multiplier` (1 for the plain metric).
pub fn beach_s(corpus: &[CaptionRecord], multiplier: f64) -> Result<f64> {
    let flagged = corpus.iter().filter(|c| c.n_h() > 0).count();
    Ok(multiplier * ratio(flagged, corpus.len(), "BEACH_S over zero captions")?)
}

/// Hallucinated object mentions over all object mentions.
pub fn chair_i(corpus: &[CaptionRecord]) -> Result<f64> {
    let total: usize = corpus.iter().map(|c| c.objects.len()).sum();
    let hallucinated: usize = corpus.iter().map(CaptionRecord::m).sum();
    ratio(hallucinated, total, "CHAIR_I over zero object mentions")
}

/// Captions with at least one hallucinated object over all captions.
pub fn chair_s(corpus: &[CaptionRecord]) -> Result<f64> {
    let flagged = corpus.iter().filter(|c| c.m() > 0).count();
    ratio(flagged, corpus.len(), "CHAIR_S over zero captions")
}

/// Fraction of detections whose verdict is `Hallucinated`.
pub fn beach_i_from_verdicts(detections: &[BehaviorDetection]) -> Result<f64> {
    let flagged = detections.iter().filter(|d| d.verdict == Verdict::Hallucinated).count();
    ratio(flagged, detections.len(), "BEACH_I over zero detections")
}

/// Average precision of a ranked list of relevance flags (best first).
/// `None` when the list holds no positives.
pub fn average_precision(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &positive) in ranked.iter().enumerate() {
        if positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranking AP with hallucination as the positive class, averaged over
/// sequences.
///
/// Within each sequence behaviors are ranked by ascending confidence (most
/// suspicious first); ties keep input order. Behaviors labeled `Unknown` are
/// left out. Sequences without any hallucinated behavior are skipped.
pub fn mean_average_precision(detections: &[BehaviorDetection]) -> Result<f64> {
    let mut groups: BTreeMap<&str, Vec<(f64, bool)>> = BTreeMap::new();
    for d in detections.iter().filter(|d| d.label != Label::Unknown) {
        groups
            .entry(d.sequence_id.as_str())
            .or_default()
            .push((d.confidence, d.label == Label::Hallucinated));
    }
    let aps: Vec<f64> = groups
        .into_values()
        .filter_map(|mut rows| {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let ranked: Vec<bool> = rows.into_iter().map(|(_, p)| p).collect();
            average_precision(&ranked)
        })
        .collect();
    if aps.is_empty() {
        return Err(SheError::UndefinedMetric("mAP without any hallucinated behavior"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `(bh_rate, oh_rate)`: fraction of responses flagged for behavior and for
/// object hallucination.
pub fn hallucination_rates(responses: &[(bool, bool)]) -> Result<(f64, f64)> {
    let n = responses.len();
    let bh = responses.iter().filter(|r| r.0).count();
    let oh = responses.iter().filter(|r| r.1).count();
    Ok((
        ratio(bh, n, "hallucination rate over zero responses")?,
        ratio(oh, n, "hallucination rate over zero responses")?,
    ))
}
