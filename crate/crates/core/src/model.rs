//! Shared domain types and elementary vector operations.
//!
//! Everything here is immutable once constructed. Embeddings are stored as
//! `f32`; reductions accumulate in `f64`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SheError};

/// Norm below which a vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A dense, finite, non-empty `f32` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vec32(Vec<f32>);

impl Vec32 {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(SheError::Empty("vector"));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(SheError::NonFinite { index });
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    /// Builds from `f64` components, rounding each to `f32`.
    pub fn from_f64(data: &[f64]) -> Result<Self> {
        Self::new(data.iter().map(|&x| x as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &Vec32) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot_unchecked(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot_unchecked(&self.0, &self.0).sqrt()
    }

    /// Returns `self / ‖self‖`, failing on a degenerate vector.
    pub fn normalized(&self) -> Result<Vec32> {
        let n = self.norm();
        if n < DEGENERATE_NORM {
            return Err(SheError::ZeroNorm("cannot normalize".into()));
        }
        Vec32::new(self.0.iter().map(|&x| (x as f64 / n) as f32).collect())
    }

    pub fn scaled(&self, factor: f32) -> Result<Vec32> {
        Vec32::new(self.0.iter().map(|&x| x * factor).collect())
    }
}

impl TryFrom<Vec<f32>> for Vec32 {
    type Error = SheError;

    fn try_from(data: Vec<f32>) -> Result<Self> {
        Vec32::new(data)
    }
}

impl From<Vec32> for Vec<f32> {
    fn from(v: Vec32) -> Self {
        v.0
    }
}

fn check_dims(a: &Vec32, b: &Vec32) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SheError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity in `[-1, 1]`; zero when either vector is degenerate.
pub fn cosine(v: &Vec32, w: &Vec32) -> Result<f64> {
    check_dims(v, w)?;
    Ok(cosine_unchecked(v.as_slice(), w.as_slice()))
}

pub(crate) fn cosine_unchecked(v: &[f32], w: &[f32]) -> f64 {
    let (mut vw, mut vv, mut ww) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in v.iter().zip(w) {
        let (a, b) = (a as f64, b as f64);
        vw += a * b;
        vv += a * a;
        ww += b * b;
    }
    let (nv, nw) = (vv.sqrt(), ww.sqrt());
    if nv < DEGENERATE_NORM || nw < DEGENERATE_NORM {
        return 0.0;
    }
    (vw / (nv * nw)).clamp(-1.0, 1.0)
}

/// Componentwise arithmetic mean of a non-empty list of vectors.
pub fn mean_vectors<'a, I>(vs: I) -> Result<Vec32>
where
    I: IntoIterator<Item = &'a Vec32>,
{
    let mut iter = vs.into_iter();
    let first = iter.next().ok_or(SheError::Empty("mean of zero vectors"))?;
    let mut acc: Vec<f64> = first.as_slice().iter().map(|&x| x as f64).collect();
    let mut count = 1usize;
    for v in iter {
        check_dims(first, v)?;
        for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
            *a += x as f64;
        }
        count += 1;
    }
    let n = count as f64;
    Vec32::new(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Lowercase, drop punctuation and symbols, collapse whitespace.
pub fn normalize_surface(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Hallucinated,
    Unknown,
}

/// Inclusive token range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) + 1
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// A labeled behavior or object mention inside a caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub span: Span,
    pub label: Label,
    pub surface: String,
}

pub type BehaviorAnnotation = Annotation;
pub type ObjectAnnotation = Annotation;

impl Annotation {
    pub fn new(id: impl Into<String>, span: Span, label: Label, surface: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            span,
            label,
            surface: surface.into(),
        }
    }

    /// Normalized surface used for cross-caption matching.
    pub fn key(&self) -> String {
        normalize_surface(&self.surface)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub behaviors: Vec<BehaviorAnnotation>,
    #[serde(default)]
    pub objects: Vec<ObjectAnnotation>,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        let mut seen = HashSet::new();
        for b in &self.behaviors {
            check_annotation(&self.caption_id, b, len)?;
            if !seen.insert(b.id.as_str()) {
                return Err(SheError::DuplicateId(format!("{}/{}", self.caption_id, b.id)));
            }
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            check_annotation(&self.caption_id, o, len)?;
            if !seen.insert(o.id.as_str()) {
                return Err(SheError::DuplicateId(format!("{}/{}", self.caption_id, o.id)));
            }
        }
        Ok(())
    }

    pub fn behavior(&self, id: &str) -> Option<&BehaviorAnnotation> {
        self.behaviors.iter().find(|b| b.id == id)
    }

    /// Number of hallucinated behaviors.
    pub fn n_h(&self) -> usize {
        count_label(&self.behaviors, Label::Hallucinated)
    }

    /// Number of real behaviors.
    pub fn n_r(&self) -> usize {
        count_label(&self.behaviors, Label::Real)
    }

    /// Number of hallucinated objects.
    pub fn m(&self) -> usize {
        count_label(&self.objects, Label::Hallucinated)
    }
}

fn count_label(annotations: &[Annotation], label: Label) -> usize {
    annotations.iter().filter(|a| a.label == label).count()
}

fn check_annotation(caption_id: &str, a: &Annotation, len: usize) -> Result<()> {
    if a.span.start > a.span.end || a.span.end >= len {
        return Err(SheError::SpanOutOfRange {
            owner: format!("{caption_id}/{}", a.id),
            start: a.span.start,
            end: a.span.end,
            len,
        });
    }
    if a.key().is_empty() {
        return Err(SheError::EmptySurface(format!("{caption_id}/{}", a.id)));
    }
    Ok(())
}

/// Token embeddings of one caption at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokenEmbeddings {
    pub layer_index: usize,
    pub token_embeddings: Vec<Vec32>,
}

/// Patch embeddings of one frame at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPatchEmbeddings {
    pub layer_index: usize,
    pub frame_index: usize,
    pub patch_embeddings: Vec<Vec32>,
}

/// All layers of a single frame, in ascending layer order.
pub type Frame = Vec<LayerPatchEmbeddings>;

/// Text-side embeddings of one caption, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTokens {
    pub layers: Vec<LayerTokenEmbeddings>,
}

/// Addresses one patch feature inside a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub frame: usize,
    pub patch: usize,
    pub layer: usize,
}

/// One image sequence: patch embeddings for every frame and layer, plus the
/// captions generated for it and their token embeddings.
///
/// `text[i]` holds the token embeddings of `captions[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    sequence_id: String,
    frames: Vec<Frame>,
    text: Vec<CaptionTokens>,
    captions: Vec<CaptionRecord>,
    image_layers: Vec<usize>,
    patch_count: usize,
    dim: usize,
}

impl SequenceBundle {
    pub fn new(
        sequence_id: impl Into<String>,
        frames: Vec<Frame>,
        text: Vec<CaptionTokens>,
        captions: Vec<CaptionRecord>,
    ) -> Result<Self> {
        let sequence_id = sequence_id.into();
        let bad = |msg: String| SheError::InvalidBundle(format!("{sequence_id}: {msg}"));

        let first = frames.first().ok_or_else(|| bad("no frames".into()))?;
        if first.is_empty() {
            return Err(bad("no layers".into()));
        }
        if captions.is_empty() {
            return Err(bad("no captions".into()));
        }
        if text.len() != captions.len() {
            return Err(bad(format!(
                "{} captions but {} token embedding sets",
                captions.len(),
                text.len()
            )));
        }
        let image_layers: Vec<usize> = first.iter().map(|l| l.layer_index).collect();
        if image_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("layer indices must be strictly increasing".into()));
        }
        let patch_count = first[0].patch_embeddings.len();
        if patch_count == 0 {
            return Err(bad("no patches".into()));
        }
        let dim = first[0].patch_embeddings[0].dim();

        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != image_layers.len() {
                return Err(bad(format!("frame {t} has a different layer set")));
            }
            for (layer, &expected) in frame.iter().zip(&image_layers) {
                if layer.layer_index != expected {
                    return Err(bad(format!("frame {t} has a different layer set")));
                }
                if layer.frame_index != t {
                    return Err(bad(format!("frame {t} labeled as {}", layer.frame_index)));
                }
                if layer.patch_embeddings.len() != patch_count {
                    return Err(bad(format!("frame {t} has a different patch count")));
                }
                if let Some(v) = layer.patch_embeddings.iter().find(|v| v.dim() != dim) {
                    return Err(SheError::DimensionMismatch {
                        left: dim,
                        right: v.dim(),
                    });
                }
            }
        }

        let mut ids = HashSet::new();
        for (caption, tokens) in captions.iter().zip(&text) {
            caption.validate()?;
            if !ids.insert(caption.caption_id.as_str()) {
                return Err(SheError::DuplicateId(caption.caption_id.clone()));
            }
            if tokens.layers.is_empty() {
                return Err(bad(format!("caption {} has no text layers", caption.caption_id)));
            }
            for layer in &tokens.layers {
                if layer.token_embeddings.len() != caption.tokens.len() {
                    return Err(bad(format!(
                        "caption {} layer {} has {} token embeddings for {} tokens",
                        caption.caption_id,
                        layer.layer_index,
                        layer.token_embeddings.len(),
                        caption.tokens.len()
                    )));
                }
                if let Some(v) = layer.token_embeddings.iter().find(|v| v.dim() != dim) {
                    return Err(SheError::DimensionMismatch {
                        left: dim,
                        right: v.dim(),
                    });
                }
            }
        }

        Ok(Self {
            sequence_id,
            frames,
            text,
            captions,
            image_layers,
            patch_count,
            dim,
        })
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn captions(&self) -> &[CaptionRecord] {
        &self.captions
    }

    pub fn text(&self) -> &[CaptionTokens] {
        &self.text
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Image-side layer indices, ascending.
    pub fn image_layers(&self) -> &[usize] {
        &self.image_layers
    }

    /// Model depth as seen by this bundle: one past the deepest layer.
    pub fn depth(&self) -> usize {
        self.image_layers.last().map_or(0, |l| l + 1)
    }

    pub fn layer_position(&self, layer_index: usize) -> Option<usize> {
        self.image_layers.binary_search(&layer_index).ok()
    }

    /// Patch embedding addressed by layer *index* (not position).
    pub fn patch(&self, frame: usize, layer_index: usize, patch: usize) -> Result<&Vec32> {
        let pos = self
            .layer_position(layer_index)
            .ok_or(SheError::MissingLayer(layer_index))?;
        self.frames
            .get(frame)
            .and_then(|f| f[pos].patch_embeddings.get(patch))
            .ok_or_else(|| {
                SheError::UnknownReference(format!(
                    "{}: frame {frame} patch {patch}",
                    self.sequence_id
                ))
            })
    }

    pub(crate) fn replace_patch(&mut self, at: FeatureIndex, value: Vec32) -> Result<()> {
        if value.dim() != self.dim {
            return Err(SheError::DimensionMismatch {
                left: self.dim,
                right: value.dim(),
            });
        }
        let pos = self
            .layer_position(at.layer)
            .ok_or(SheError::MissingLayer(at.layer))?;
        let slot = self
            .frames
            .get_mut(at.frame)
            .and_then(|f| f[pos].patch_embeddings.get_mut(at.patch))
            .ok_or_else(|| SheError::UnknownReference(format!("{at:?}")))?;
        *slot = value;
        Ok(())
    }

    pub fn caption_position(&self, caption_id: &str) -> Option<usize> {
        self.captions.iter().position(|c| c.caption_id == caption_id)
    }

    /// Token embeddings of a caption at the given text layer.
    pub fn caption_tokens(&self, caption_id: &str, layer_index: usize) -> Result<&[Vec32]> {
        let pos = self
            .caption_position(caption_id)
            .ok_or_else(|| SheError::UnknownReference(format!("caption `{caption_id}`")))?;
        self.text[pos]
            .layers
            .iter()
            .find(|l| l.layer_index == layer_index)
            .map(|l| l.token_embeddings.as_slice())
            .ok_or(SheError::MissingLayer(layer_index))
    }

    /// Text-side depth of a caption: one past its deepest token layer.
    pub fn text_depth(&self) -> usize {
        self.text
            .iter()
            .flat_map(|t| t.layers.iter().map(|l| l.layer_index + 1))
            .max()
            .unwrap_or(0)
    }

    pub(crate) fn with_frames(&self, frames: Vec<Frame>) -> Self {
        Self {
            frames,
            ..self.clone()
        }
    }
}
