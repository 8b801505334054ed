//! Conversion between tensor archives plus annotations and in-memory
//! sequence bundles.
//!
//! Entry naming: `patches/<sequence_id>` holds `[frames, layers, patches, dim]`
//! and `tokens/<sequence_id>/<caption_id>` holds `[layers, tokens, dim]`. The
//! layer axis position is the layer index.

use std::collections::BTreeMap;

use crate::detection::BehaviorDetection;
use crate::error::{Result, SheError};
use crate::io::annotations::{AnnotationFile, SequenceAnnotations};
use crate::io::archive::{ArchiveError, TensorArchive, TensorEntry};
use crate::model::{
    Annotation, CaptionRecord, CaptionTokens, Frame, LayerPatchEmbeddings, LayerTokenEmbeddings, SequenceBundle, Vec32,
};

pub fn patch_entry_name(sequence_id: &str) -> String {
    format!("patches/{sequence_id}")
}

pub fn token_entry_name(sequence_id: &str, caption_id: &str) -> String {
    format!("tokens/{sequence_id}/{caption_id}")
}

fn expect_rank(entry: &TensorEntry, rank: usize) -> Result<&[usize]> {
    if entry.shape.len() != rank || entry.shape.contains(&0) {
        return Err(ArchiveError::ShapeMismatch {
            name: entry.name.clone(),
            detail: format!("expected {rank} non-zero dims, found {:?}", entry.shape),
        }
        .into());
    }
    Ok(&entry.shape)
}

fn rows(data: &[f32], dim: usize) -> impl Iterator<Item = Result<Vec32>> + '_ {
    data.chunks_exact(dim).map(|c| Vec32::new(c.to_vec()))
}

fn frames_from(entry: &TensorEntry) -> Result<Vec<Frame>> {
    let s = expect_rank(entry, 4)?;
    let (frames, layers, patches, dim) = (s[0], s[1], s[2], s[3]);
    let mut it = rows(&entry.data, dim);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut frame = Vec::with_capacity(layers);
        for l in 0..layers {
            let patch_embeddings = it.by_ref().take(patches).collect::<Result<Vec<_>>>()?;
            frame.push(LayerPatchEmbeddings {
                layer_index: l,
                frame_index: t,
                patch_embeddings,
            });
        }
        out.push(frame);
    }
    Ok(out)
}

fn tokens_from(entry: &TensorEntry) -> Result<CaptionTokens> {
    let s = expect_rank(entry, 3)?;
    let (layers, tokens, dim) = (s[0], s[1], s[2]);
    let mut it = rows(&entry.data, dim);
    let layers = (0..layers)
        .map(|l| {
            Ok(LayerTokenEmbeddings {
                layer_index: l,
                token_embeddings: it.by_ref().take(tokens).collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionTokens { layers })
}

/// Assembles one bundle per annotated sequence, in annotation order.
pub fn bundles_from(archive: &TensorArchive, annotations: &AnnotationFile) -> Result<Vec<SequenceBundle>> {
    annotations
        .sequences
        .iter()
        .map(|seq| {
            let frames = frames_from(archive.require(&patch_entry_name(&seq.sequence_id))?)?;
            let text = seq
                .captions
                .iter()
                .map(|c| tokens_from(archive.require(&token_entry_name(&seq.sequence_id, &c.caption_id))?))
                .collect::<Result<Vec<_>>>()?;
            SequenceBundle::new(seq.sequence_id.clone(), frames, text, seq.captions.clone())
        })
        .collect()
}

fn check_contiguous(what: &str, layers: impl Iterator<Item = usize>) -> Result<()> {
    if layers.enumerate().any(|(i, l)| i != l) {
        return Err(SheError::InvalidBundle(format!(
            "{what}: archived layers must be numbered 0..L"
        )));
    }
    Ok(())
}

pub fn patch_entry(bundle: &SequenceBundle) -> Result<TensorEntry> {
    check_contiguous(bundle.sequence_id(), bundle.image_layers().iter().copied())?;
    let frames = bundle.frames();
    let shape = vec![bundle.frame_count(), frames[0].len(), bundle.patch_count(), bundle.dim()];
    let data: Vec<f32> = frames
        .iter()
        .flatten()
        .flat_map(|l| l.patch_embeddings.iter())
        .flat_map(|v| v.as_slice().iter().copied())
        .collect();
    Ok(TensorEntry::new(patch_entry_name(bundle.sequence_id()), shape, data)?)
}

pub fn token_entry(bundle: &SequenceBundle, caption: &CaptionRecord, tokens: &CaptionTokens) -> Result<TensorEntry> {
    check_contiguous(&caption.caption_id, tokens.layers.iter().map(|l| l.layer_index))?;
    let shape = vec![tokens.layers.len(), caption.tokens.len(), bundle.dim()];
    let data: Vec<f32> = tokens
        .layers
        .iter()
        .flat_map(|l| l.token_embeddings.iter())
        .flat_map(|v| v.as_slice().iter().copied())
        .collect();
    Ok(TensorEntry::new(
        token_entry_name(bundle.sequence_id(), &caption.caption_id),
        shape,
        data,
    )?)
}

/// Serializes bundles: for each bundle its patch tensor, then one token
/// tensor per caption.
pub fn bundles_to_archive(bundles: &[SequenceBundle]) -> Result<(TensorArchive, AnnotationFile)> {
    let mut archive = TensorArchive::new();
    let mut sequences = Vec::with_capacity(bundles.len());
    for b in bundles {
        archive.push(patch_entry(b)?)?;
        for (caption, tokens) in b.captions().iter().zip(b.text()) {
            archive.push(token_entry(b, caption, tokens)?)?;
        }
        sequences.push(SequenceAnnotations {
            sequence_id: b.sequence_id().to_string(),
            captions: b.captions().to_vec(),
        });
    }
    Ok((archive, AnnotationFile::new(sequences)))
}

/// Surface placed on behaviors reconstructed from detection records.
const SKELETON_SURFACE: &str = "behavior";

/// Rebuilds bundles from an archive using detection records in place of an
/// annotation file. Captions carry placeholder tokens and only the detected
/// behaviors; patch and token embeddings are exact.
pub fn skeleton_bundles(archive: &TensorArchive, detections: &[BehaviorDetection]) -> Result<Vec<SequenceBundle>> {
    let mut by_sequence: BTreeMap<&str, BTreeMap<&str, Vec<&BehaviorDetection>>> = BTreeMap::new();
    for d in detections {
        by_sequence
            .entry(&d.sequence_id)
            .or_default()
            .entry(&d.caption_id)
            .or_default()
            .push(d);
    }
    by_sequence
        .into_iter()
        .map(|(seq, captions)| {
            let frames = frames_from(archive.require(&patch_entry_name(seq))?)?;
            let mut text = Vec::new();
            let mut records = Vec::new();
            for (caption_id, dets) in captions {
                let tokens = tokens_from(archive.require(&token_entry_name(seq, caption_id))?)?;
                let n = tokens.layers[0].token_embeddings.len();
                records.push(CaptionRecord {
                    caption_id: caption_id.to_string(),
                    tokens: vec![String::new(); n],
                    behaviors: dets
                        .iter()
                        .map(|d| Annotation::new(d.behavior_id.clone(), d.token_span, d.label, SKELETON_SURFACE))
                        .collect(),
                    objects: Vec::new(),
                });
                text.push(tokens);
            }
            SequenceBundle::new(seq, frames, text, records)
        })
        .collect()
}

/// Copy of `archive` whose patch tensors are replaced by those of `bundles`.
pub fn with_patches(archive: &TensorArchive, bundles: &[SequenceBundle]) -> Result<TensorArchive> {
    let mut out = archive.clone();
    for b in bundles {
        out.replace(patch_entry(b)?)?;
    }
    Ok(out)
}
