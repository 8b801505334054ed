use std::fs;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use she_core::cooccurrence::{histogram, score_corpus, HISTOGRAM_BIN_WIDTH};
use she_core::detection::{detect_behaviors, DEFAULT_GAMMA, DEFAULT_THETA};
use she_core::io::annotations::{read_annotations, write_annotations, AnnotationError, AnnotationFile, Strictness};
use she_core::io::archive::{ArchiveError, TensorArchive};
use she_core::io::bundle::{bundles_from, skeleton_bundles, with_patches};
use she_core::io::detections::{read_detections, write_detections};
use she_core::io::synth::{generate_synthetic, SynthSpec};
use she_core::mitigation::{mitigate as mitigate_bundle, DEFAULT_ALPHA_BASE};
use she_core::snowball::{
    run_stage_experiment, StageExperiment, StubModel, DEFAULT_CARRYOVER, DEFAULT_EMISSION_THRESHOLD,
};
use she_core::{
    AlphaMode, BehaviorDetection, DetectionConfig, DirectionMode, MetricSummary, MitigationConfig, SequenceBundle,
    SheError,
};

use crate::config::FileConfig;
use crate::{CooccurArgs, DetectArgs, EvalArgs, LayerArgs, MitigateArgs, SnowballArgs, SynthArgs};

/// 3 for failures to read or write files, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        let io = if let Some(s) = cause.downcast_ref::<SheError>() {
            Some(s.is_io())
        } else if let Some(a) = cause.downcast_ref::<ArchiveError>() {
            Some(matches!(a, ArchiveError::Io(_)))
        } else if let Some(a) = cause.downcast_ref::<AnnotationError>() {
            Some(a.is_io())
        } else if let Some(c) = cause.downcast_ref::<csv::Error>() {
            Some(matches!(c.kind(), csv::ErrorKind::Io(_)))
        } else {
            cause.downcast_ref::<io::Error>().map(|_| true)
        };
        if let Some(io) = io {
            return if io { 3 } else { 2 };
        }
    }
    2
}

fn strictness(lenient: bool) -> Strictness {
    if lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    }
}

/// Annotation file with sequences in id order.
fn load_annotations(path: &Path, lenient: bool) -> Result<AnnotationFile> {
    let (mut file, warnings) =
        read_annotations(path, strictness(lenient)).with_context(|| format!("reading {}", path.display()))?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    file.sequences.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
    Ok(file)
}

fn load_archive(path: &Path) -> Result<TensorArchive> {
    TensorArchive::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_detections(path: &Path) -> Result<Vec<BehaviorDetection>> {
    read_detections(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn detection_config(bundle: &SequenceBundle, cfg: &FileConfig, layers: &LayerArgs) -> DetectionConfig {
    let mut c = DetectionConfig::for_bundle(bundle);
    if let Some(l) = layers.layers.clone().or_else(|| cfg.detect.layers.clone()) {
        c.layers = l;
    }
    c.text_layer = layers
        .text_layer
        .or(cfg.detect.text_layer)
        .or_else(|| c.layers.first().copied())
        .unwrap_or(c.text_layer);
    c.gamma = cfg.detect.gamma.unwrap_or(DEFAULT_GAMMA);
    c.theta = cfg.detect.theta.unwrap_or(DEFAULT_THETA);
    c
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<SynthSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (archive, annotations) = generate_synthetic(&spec)?;
    archive
        .write(&args.out_archive)
        .with_context(|| format!("writing {}", args.out_archive.display()))?;
    write_annotations(&args.out_annotations, &annotations)
        .with_context(|| format!("writing {}", args.out_annotations.display()))?;
    Ok(())
}

pub fn detect(args: DetectArgs, cfg: &FileConfig) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    let annotations = load_annotations(&args.annotations, args.lenient)?;
    let mut out = Vec::new();
    for bundle in bundles_from(&archive, &annotations)? {
        let mut c = detection_config(&bundle, cfg, &args.layers);
        c.gamma = args.gamma.unwrap_or(c.gamma);
        c.theta = args.theta.unwrap_or(c.theta);
        out.extend(detect_behaviors(&bundle, &c).with_context(|| format!("sequence `{}`", bundle.sequence_id()))?);
    }
    write_detections(&args.out, &out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct CorrectionRow<'a> {
    sequence_id: &'a str,
    caption_id: &'a str,
    behavior_id: &'a str,
    order: usize,
    alpha_used: f64,
    residual_alignment: f64,
    affected: usize,
    skipped: &'a str,
}

pub fn mitigate(args: MitigateArgs, cfg: &FileConfig) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    let detections = load_detections(&args.detections)?;
    let alpha_base = args
        .alpha_base
        .or(cfg.mitigate.alpha_base)
        .unwrap_or(DEFAULT_ALPHA_BASE);
    let alpha_mode = match args.fixed_alpha.or(cfg.mitigate.fixed_alpha) {
        Some(alpha) => AlphaMode::Fixed { alpha },
        None => AlphaMode::Dynamic,
    };
    let direction_mode = args
        .direction
        .or(cfg.mitigate.direction)
        .unwrap_or(DirectionMode::SpanMean);

    let mut fixed = Vec::new();
    let mut records = Vec::new();
    for bundle in skeleton_bundles(&archive, &detections)? {
        let det_cfg = detection_config(&bundle, cfg, &args.layers);
        let text_layer = args
            .layers
            .text_layer
            .or(cfg.mitigate.text_layer)
            .unwrap_or(det_cfg.text_layer);
        let m_cfg = MitigationConfig {
            alpha_base,
            text_layer,
            alpha_mode,
            direction_mode,
        };
        let mine: Vec<BehaviorDetection> = detections
            .iter()
            .filter(|d| d.sequence_id == bundle.sequence_id())
            .cloned()
            .collect();
        let (corrected, log) = mitigate_bundle(&bundle, &mine, &m_cfg, &det_cfg)
            .with_context(|| format!("sequence `{}`", bundle.sequence_id()))?;
        fixed.push(corrected);
        records.extend(log);
    }

    with_patches(&archive, &fixed)?
        .write(&args.out_archive)
        .with_context(|| format!("writing {}", args.out_archive.display()))?;
    let rows: Vec<CorrectionRow> = records
        .iter()
        .map(|r| CorrectionRow {
            sequence_id: &r.sequence_id,
            caption_id: &r.caption_id,
            behavior_id: &r.behavior_id,
            order: r.order,
            alpha_used: r.alpha_used,
            residual_alignment: r.residual_alignment,
            affected: r.affected.len(),
            skipped: r.skipped.as_deref().unwrap_or(""),
        })
        .collect();
    write_csv(&args.out_log, &rows)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let annotations = load_annotations(&args.annotations, args.lenient)?;
    let detections = load_detections(&args.detections)?;
    let captions: Vec<_> = annotations.captions().cloned().collect();
    let summary = MetricSummary::compute(&captions, &detections)?;

    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_text(&args.out, &json)?;

    let mut csv = MetricSummary::CSV_HEADER.join(",");
    csv.push('\n');
    let percents: Vec<String> = summary.values().iter().map(|v| format!("{:.2}", v * 100.0)).collect();
    csv.push_str(&percents.join(","));
    csv.push('\n');
    match &args.out_csv {
        Some(path) => write_text(path, &csv),
        None => io::stdout().write_all(csv.as_bytes()).context("writing stdout"),
    }
}

#[derive(Serialize)]
struct HistogramRow {
    series: &'static str,
    lower: f64,
    upper: f64,
    count: usize,
}

pub fn cooccur(args: CooccurArgs) -> Result<()> {
    let annotations = load_annotations(&args.annotations, args.lenient)?;
    let captions: Vec<_> = annotations.captions().cloned().collect();
    let reports = score_corpus(&captions, args.seed)?;
    write_csv(&args.out, &reports)?;

    if let Some(path) = &args.histogram {
        let observed: Vec<f64> = reports.iter().filter(|r| r.n_h > 0).map(|r| r.cos_bh).collect();
        let control: Vec<f64> = reports.iter().filter_map(|r| r.control_cos_bh).collect();
        let mut rows = Vec::new();
        for (series, values) in [("observed", observed), ("control", control)] {
            for bin in histogram(&values, HISTOGRAM_BIN_WIDTH)? {
                rows.push(HistogramRow {
                    series,
                    lower: bin.lower,
                    upper: bin.upper,
                    count: bin.count,
                });
            }
        }
        write_csv(path, &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SegmentRow {
    segment: usize,
    mean_delta_bh: f64,
    std_delta_bh: f64,
    kind: &'static str,
}

pub fn snowball(args: SnowballArgs, cfg: &FileConfig) -> Result<()> {
    let archive = load_archive(&args.archive)?;
    let annotations = load_annotations(&args.annotations, args.lenient)?;
    let s = &cfg.snowball;
    let carryover = args.carryover.or(s.carryover).unwrap_or(DEFAULT_CARRYOVER);
    let threshold = args
        .emission_threshold
        .or(s.emission_threshold)
        .unwrap_or(DEFAULT_EMISSION_THRESHOLD);
    let defaults = StageExperiment::default();
    let exp = StageExperiment {
        kinds: s.kinds.clone().unwrap_or(defaults.kinds),
        trials: args.trials.or(s.trials).unwrap_or(defaults.trials),
        seed: args.seed.or(s.seed).unwrap_or(defaults.seed),
    };

    let cases = bundles_from(&archive, &annotations)?
        .into_iter()
        .map(|b| {
            let text_layer = s.text_layer.unwrap_or_else(|| DetectionConfig::for_bundle(&b).text_layer);
            let layers = s.layers.clone().unwrap_or_else(|| b.image_layers().to_vec());
            let model = StubModel::from_bundle(&b, text_layer, carryover, threshold, layers)?;
            Ok((b, model))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SegmentRow> = run_stage_experiment(&cases, &exp)?
        .iter()
        .map(|r| SegmentRow {
            segment: r.segment,
            mean_delta_bh: r.mean_delta_bh,
            std_delta_bh: r.std_delta_bh,
            kind: r.kind.name(),
        })
        .collect();
    write_csv(&args.out, &rows)
}
