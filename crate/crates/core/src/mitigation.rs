//! Orthogonal-projection correction of patch features that support a
//! hallucinated behavior.
//!
//! For every behavior flagged as hallucinated, the features in the temporal
//! window around its peak patch lose `alpha` times their component along the
//! behavior direction, and the corrected values replace the originals in a
//! copy of the bundle.

use serde::{Deserialize, Serialize};

use crate::detection::{patch_score, span_mean, window_frames, BehaviorDetection, DetectionConfig, Verdict};
use crate::error::{Result, SheError};
use crate::model::{cosine_unchecked, dot_unchecked, FeatureIndex, SequenceBundle, Span, Vec32, DEGENERATE_NORM};

pub const DEFAULT_ALPHA_BASE: f64 = 4.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AlphaMode {
    /// `alpha_base * (1 - confidence)` per corrected patch.
    Dynamic,
    /// The same strength everywhere, independent of confidence.
    Fixed { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionMode {
    /// Mean of the span's token embeddings.
    SpanMean,
    /// Embedding of the span's first token only.
    FirstToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationConfig {
    pub alpha_base: f64,
    pub text_layer: usize,
    pub alpha_mode: AlphaMode,
    pub direction_mode: DirectionMode,
}

impl MitigationConfig {
    pub fn new(alpha_base: f64, text_layer: usize) -> Self {
        Self {
            alpha_base,
            text_layer,
            alpha_mode: AlphaMode::Dynamic,
            direction_mode: DirectionMode::SpanMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_base >= 0.0 && self.alpha_base.is_finite()) {
            return Err(SheError::InvalidConfig(format!("alpha_base {} must be >= 0", self.alpha_base)));
        }
        if let AlphaMode::Fixed { alpha } = self.alpha_mode {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(SheError::InvalidConfig(format!("fixed alpha {alpha} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub sequence_id: String,
    pub caption_id: String,
    pub behavior_id: String,
    /// Position in the serial correction order.
    pub order: usize,
    pub affected: Vec<FeatureIndex>,
    pub alpha_used: f64,
    /// Largest `|cos(corrected, direction)|` over the affected features.
    pub residual_alignment: f64,
    /// Reason the behavior was left uncorrected, if any.
    pub skipped: Option<String>,
}

/// Direction to remove for a hallucinated behavior.
pub fn behavior_direction(bundle: &SequenceBundle, caption_id: &str, span: Span, cfg: &MitigationConfig) -> Result<Vec32> {
    let span = match cfg.direction_mode {
        DirectionMode::SpanMean => span,
        DirectionMode::FirstToken => Span::new(span.start, span.start),
    };
    let dir = span_mean(bundle, caption_id, span, cfg.text_layer)?;
    if dir.norm() <= DEGENERATE_NORM {
        return Err(SheError::ZeroNorm(format!("direction of {caption_id} span {span}")));
    }
    Ok(dir)
}

/// `e - alpha * (e·d / ‖d‖²) * d`, computed in `f64`.
pub fn project_out(e: &Vec32, dir: &Vec32, alpha: f64) -> Result<Vec32> {
    if e.dim() != dir.dim() {
        return Err(SheError::DimensionMismatch {
            left: e.dim(),
            right: dir.dim(),
        });
    }
    let dd = dot_unchecked(dir.as_slice(), dir.as_slice());
    if dd.sqrt() <= DEGENERATE_NORM {
        return Err(SheError::ZeroNorm("projection direction".into()));
    }
    if alpha == 0.0 {
        return Ok(e.clone());
    }
    let coeff = alpha * dot_unchecked(e.as_slice(), dir.as_slice()) / dd;
    Vec32::new(
        e.as_slice()
            .iter()
            .zip(dir.as_slice())
            .map(|(&x, &d)| (x as f64 - coeff * d as f64) as f32)
            .collect(),
    )
}

/// Correction strength for a patch whose best alignment is
/// `confidence_max`; negative alignments count as zero.
pub fn correction_alpha(cfg: &MitigationConfig, confidence_max: f64) -> f64 {
    match cfg.alpha_mode {
        AlphaMode::Fixed { alpha } => alpha,
        AlphaMode::Dynamic => cfg.alpha_base * (1.0 - confidence_max.clamp(0.0, 1.0)),
    }
}

struct Plan<'a> {
    detection: &'a BehaviorDetection,
    direction: Result<Vec32>,
    alpha: f64,
}

/// Corrects every hallucinated behavior of `bundle` in detection order and
/// returns the corrected copy with one record per corrected behavior.
///
/// Strengths are computed from the input bundle before any correction is
/// applied, so corrections along orthogonal directions commute.
pub fn mitigate(
    bundle: &SequenceBundle,
    detections: &[BehaviorDetection],
    cfg: &MitigationConfig,
    det_cfg: &DetectionConfig,
) -> Result<(SequenceBundle, Vec<CorrectionRecord>)> {
    cfg.validate()?;
    det_cfg.validate()?;
    for &l in &det_cfg.layers {
        bundle.layer_position(l).ok_or(SheError::MissingLayer(l))?;
    }

    let mut plans = Vec::new();
    for d in detections {
        if d.sequence_id != bundle.sequence_id() {
            return Err(SheError::UnknownReference(format!(
                "detection for sequence `{}` applied to `{}`",
                d.sequence_id,
                bundle.sequence_id()
            )));
        }
        if d.verdict != Verdict::Hallucinated {
            continue;
        }
        if d.peak.frame >= bundle.frame_count() || d.peak.patch >= bundle.patch_count() {
            return Err(SheError::UnknownReference(format!(
                "peak {:?} of `{}/{}`",
                d.peak, d.caption_id, d.behavior_id
            )));
        }
        let caption = bundle
            .captions()
            .iter()
            .find(|c| c.caption_id == d.caption_id)
            .ok_or_else(|| SheError::UnknownReference(format!("caption `{}`", d.caption_id)))?;
        let span = caption
            .behavior(&d.behavior_id)
            .map(|b| b.span)
            .ok_or_else(|| SheError::UnknownReference(format!("behavior `{}/{}`", d.caption_id, d.behavior_id)))?;

        let anchor = det_cfg
            .layers
            .iter()
            .map(|&l| bundle.patch(d.peak.frame, l, d.peak.patch))
            .collect::<Result<Vec<_>>>()?;
        let confidence_max = patch_score(&d.e_beh, anchor)?;
        plans.push(Plan {
            detection: d,
            direction: behavior_direction(bundle, &d.caption_id, span, cfg),
            alpha: correction_alpha(cfg, confidence_max),
        });
    }

    let mut out = bundle.clone();
    let mut records = Vec::with_capacity(plans.len());
    for (order, plan) in plans.into_iter().enumerate() {
        let d = plan.detection;
        let mut record = CorrectionRecord {
            sequence_id: d.sequence_id.clone(),
            caption_id: d.caption_id.clone(),
            behavior_id: d.behavior_id.clone(),
            order,
            affected: Vec::new(),
            alpha_used: plan.alpha,
            residual_alignment: 0.0,
            skipped: None,
        };
        let dir = match plan.direction {
            Ok(dir) => dir,
            Err(SheError::ZeroNorm(reason)) => {
                record.skipped = Some(reason);
                records.push(record);
                continue;
            }
            Err(e) => return Err(e),
        };
        for frame in window_frames(d.peak.frame, d.tau, bundle.frame_count()) {
            for &layer in &det_cfg.layers {
                let at = FeatureIndex {
                    frame,
                    patch: d.peak.patch,
                    layer,
                };
                let corrected = project_out(out.patch(frame, layer, d.peak.patch)?, &dir, plan.alpha)?;
                let residual = cosine_unchecked(corrected.as_slice(), dir.as_slice()).abs();
                record.residual_alignment = record.residual_alignment.max(residual);
                out.replace_patch(at, corrected)?;
                record.affected.push(at);
            }
        }
        records.push(record);
    }
    Ok((out, records))
}
