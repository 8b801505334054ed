//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the summary is always printed; exits non-zero on any failure.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use she_core::cooccurrence::{build_index, cos_bh, cos_bo};
use she_core::detection::{confidence, detect_behaviors, tau_from_entropy, window_radius, PatchLocation};
use she_core::io::annotations::{parse_annotations, to_json, AnnotationFile, SequenceAnnotations, Strictness};
use she_core::io::archive::{TensorArchive, TensorEntry, ERROR_CODES, MAGIC};
use she_core::io::synth::{generate_bundles, SynthSpec};
use she_core::metrics::{beach_i_from_verdicts, mean_average_precision};
use she_core::mitigation::{mitigate, project_out, DEFAULT_ALPHA_BASE};
use she_core::snowball::{
    detect_emissions, run_stage_experiment, stub_generate, Perturbation, SegmentStat, StageExperiment, StubModel,
    DEFAULT_CARRYOVER, DEFAULT_EMISSION_THRESHOLD,
};
use she_core::{
    cosine, AlphaMode, Annotation, BehaviorDetection, CaptionRecord, CaptionTokens, DetectionConfig, Label,
    LayerPatchEmbeddings, LayerTokenEmbeddings, MitigationConfig, SequenceBundle, Span, Vec32, Verdict,
};

const PROJECTION_TOL: f64 = 1e-5;
const PROJECTION_BUDGET: Duration = Duration::from_secs(1);
const IDEMPOTENCE_REL_TOL: f64 = 1e-5;
const FLOAT_ORACLE_TOL: f64 = 1e-9;
const PLANTED_SEEDS: u64 = 50;
const BEACH_DROP_MIN: f64 = 0.10;
/// Emission threshold for regenerating captions in the mitigation check:
/// between the background bound and the near-miss support.
const REGEN_THRESHOLD: f64 = 0.15;
const SNOWBALL_TRIALS: usize = 100;
const SNOWBALL_WIN_RATE: f64 = 0.90;
const UNIFORM_SE: f64 = 2.0;
const FORMAT_FILES: usize = 1000;
const PIPELINE_BUDGET: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec32 {
    Vec32::new((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

// 1 ------------------------------------------------------------------------

fn projection_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<(Vec32, Vec32)> = (0..1000)
        .map(|_| {
            let dim = rng.random_range(2..=512);
            (random_vec(&mut rng, dim), random_vec(&mut rng, dim))
        })
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (e, d) in &cases {
        let corrected = project_out(e, d, 1.0).unwrap();
        worst = worst.max(cosine(&corrected, d).unwrap().abs());
        let same = project_out(e, d, 0.0).unwrap();
        let bits = |v: &Vec32| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&same) == bits(e), || "alpha = 0 changed the input".into())?;
    }
    let elapsed = start.elapsed();
    ensure(worst <= PROJECTION_TOL, || format!("max |cos| {worst:e}"))?;
    ensure(elapsed < PROJECTION_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("max |cos| {worst:.1e}, alpha=0 bitwise identical, {elapsed:.1?}"))
}

// 2 ------------------------------------------------------------------------

fn idempotence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let spec = SynthSpec {
            sequences: 1,
            frames: rng.random_range(1..=8),
            patches: rng.random_range(5..=8),
            layers: rng.random_range(1..=4),
            dim: rng.random_range(8..=32),
            grounded_behaviors: rng.random_range(1..=3),
            hallucinated_behaviors: rng.random_range(1..=2),
            seed: rng.random(),
            ..SynthSpec::default()
        };
        let bundle = &generate_bundles(&spec).unwrap()[0];
        let cfg = DetectionConfig::for_bundle(bundle);
        let detections = detect_behaviors(bundle, &cfg).unwrap();
        let m = MitigationConfig {
            alpha_mode: AlphaMode::Fixed { alpha: 1.0 },
            ..MitigationConfig::new(DEFAULT_ALPHA_BASE, cfg.text_layer)
        };
        let (once, _) = mitigate(bundle, &detections, &m, &cfg).unwrap();
        let (twice, _) = mitigate(&once, &detections, &m, &cfg).unwrap();
        for (f1, f2) in once.frames().iter().zip(twice.frames()) {
            for (l1, l2) in f1.iter().zip(f2) {
                for (a, b) in l1.patch_embeddings.iter().zip(&l2.patch_embeddings) {
                    let diff: f64 = a
                        .as_slice()
                        .iter()
                        .zip(b.as_slice())
                        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    worst = worst.max(diff / a.norm().max(1e-12));
                }
            }
        }
    }
    ensure(worst <= IDEMPOTENCE_REL_TOL, || format!("max relative change {worst:e}"))?;
    Ok(format!("max relative change {worst:.1e} over 100 bundles"))
}

// 3 ------------------------------------------------------------------------

const VOCAB: [&str; 8] = ["runs", "jumps", "sits down", "waves", "eats", "rides", "throws", "climbs"];
const OBJECTS: [&str; 5] = ["ball", "dog", "bike", "cup", "kite"];

fn random_label(rng: &mut impl Rng) -> Label {
    [Label::Real, Label::Real, Label::Hallucinated, Label::Hallucinated, Label::Unknown][rng.random_range(0..5)]
}

fn random_corpus(rng: &mut impl Rng) -> Vec<CaptionRecord> {
    (0..rng.random_range(1..=20))
        .map(|i| {
            let nb = rng.random_range(0..5);
            let no = rng.random_range(0..4);
            let mut ann = |k: usize, vocab: &[&str], prefix: &str| {
                Annotation::new(
                    format!("{prefix}{k}"),
                    Span::new(k, k),
                    random_label(rng),
                    vocab[rng.random_range(0..vocab.len())],
                )
            };
            CaptionRecord {
                caption_id: format!("c{i}"),
                tokens: vec!["w".into(); nb.max(no)],
                behaviors: (0..nb).map(|k| ann(k, &VOCAB, "b")).collect(),
                objects: (0..no).map(|k| ann(k, &OBJECTS, "o")).collect(),
            }
        })
        .collect()
}

fn cos_brute(corpus: &[CaptionRecord], c: &CaptionRecord, objects: bool) -> f64 {
    let mentions = |surface: &str, objects: bool| -> BTreeSet<usize> {
        (0..corpus.len())
            .filter(|&i| {
                let items = if objects { &corpus[i].objects } else { &corpus[i].behaviors };
                items.iter().any(|a| a.surface == surface)
            })
            .collect()
    };
    let partners: Vec<&Annotation> = if objects {
        c.objects.iter().filter(|o| o.label == Label::Hallucinated).collect()
    } else {
        c.behaviors.iter().filter(|b| b.label == Label::Real).collect()
    };
    let mut total = 0.0;
    for h in c.behaviors.iter().filter(|b| b.label == Label::Hallucinated) {
        let a = mentions(&h.surface, false);
        for p in &partners {
            let b = mentions(&p.surface, objects);
            total += a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64;
        }
    }
    total
}

fn random_bundle(rng: &mut impl Rng) -> SequenceBundle {
    let (frames, patches, layers, dim) = (
        rng.random_range(1..=5),
        rng.random_range(1..=16),
        rng.random_range(1..=4),
        rng.random_range(2..=16),
    );
    let frames = (0..frames)
        .map(|t| {
            (0..layers)
                .map(|l| LayerPatchEmbeddings {
                    layer_index: l,
                    frame_index: t,
                    patch_embeddings: (0..patches).map(|_| random_vec(rng, dim)).collect(),
                })
                .collect()
        })
        .collect();
    let caption = CaptionRecord {
        caption_id: "c".into(),
        tokens: vec!["x".into()],
        behaviors: vec![],
        objects: vec![],
    };
    let text = CaptionTokens {
        layers: vec![LayerTokenEmbeddings {
            layer_index: 0,
            token_embeddings: vec![random_vec(rng, dim)],
        }],
    };
    SequenceBundle::new("s", frames, vec![text], vec![caption]).unwrap()
}

fn brute_confidence(bundle: &SequenceBundle, q: &Vec32, layers: &[usize]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for t in 0..bundle.frame_count() {
        for j in 0..bundle.patch_count() {
            for &l in layers {
                let p = bundle.patch(t, l, j).unwrap().as_slice();
                let dot: f64 = p.iter().zip(q.as_slice()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                let n = |v: &[f32]| v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                let (np, nq) = (n(p), n(q.as_slice()));
                let c = if np < 1e-12 || nq < 1e-12 { 0.0 } else { dot / (np * nq) };
                best = best.max(c);
            }
        }
    }
    best
}

fn detection_with(seq: &str, confidence: f64, label: Label) -> BehaviorDetection {
    BehaviorDetection {
        sequence_id: seq.into(),
        caption_id: "c".into(),
        behavior_id: "b".into(),
        token_span: Span::new(0, 0),
        label,
        confidence,
        entropy: 0.0,
        tau: 0,
        verdict: Verdict::Grounded,
        peak: PatchLocation { frame: 0, patch: 0 },
        per_frame_scores: vec![],
        e_beh: Vec32::new(vec![1.0]).unwrap(),
    }
}

/// Mean over sequences of AP, with ranks found by counting predecessors.
fn brute_map(ds: &[BehaviorDetection]) -> Option<f64> {
    let seqs: BTreeSet<&str> = ds.iter().map(|d| d.sequence_id.as_str()).collect();
    let mut aps = Vec::new();
    for s in seqs {
        let rows: Vec<&BehaviorDetection> =
            ds.iter().filter(|d| d.sequence_id == s && d.label != Label::Unknown).collect();
        let rank = |i: usize| {
            1 + (0..rows.len())
                .filter(|&j| rows[j].confidence < rows[i].confidence || (rows[j].confidence == rows[i].confidence && j < i))
                .count()
        };
        let pos: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].label == Label::Hallucinated).collect();
        if pos.is_empty() {
            continue;
        }
        let ap = pos
            .iter()
            .map(|&i| pos.iter().filter(|&&k| rank(k) <= rank(i)).count() as f64 / rank(i) as f64)
            .sum::<f64>()
            / pos.len() as f64;
        aps.push(ap);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut captions = 0;
    for _ in 0..200 {
        let corpus = random_corpus(&mut rng);
        let idx = build_index(&corpus).unwrap();
        for c in &corpus {
            captions += 1;
            ensure(cos_bh(c, &idx).unwrap() == cos_brute(&corpus, c, false), || format!("CoS-BH of {}", c.caption_id))?;
            ensure(cos_bo(c, &idx).unwrap() == cos_brute(&corpus, c, true), || format!("CoS-BO of {}", c.caption_id))?;
        }
    }

    let mut worst_conf = 0.0f64;
    for _ in 0..200 {
        let bundle = random_bundle(&mut rng);
        let q = random_vec(&mut rng, bundle.dim());
        let layers: Vec<usize> = (0..bundle.depth()).collect();
        let cfg = DetectionConfig {
            layers: layers.clone(),
            ..DetectionConfig::for_depth(bundle.depth())
        };
        worst_conf = worst_conf.max((confidence(&bundle, &q, &cfg).unwrap() - brute_confidence(&bundle, &q, &layers)).abs());
    }
    ensure(worst_conf <= FLOAT_ORACLE_TOL, || format!("confidence off by {worst_conf:e}"))?;

    let mut worst_map = 0.0f64;
    for _ in 0..200 {
        let ds: Vec<BehaviorDetection> = (0..rng.random_range(0..20))
            .map(|_| {
                let seq = format!("s{}", rng.random_range(0..3));
                let conf = rng.random_range(0..5) as f64 / 4.0;
                detection_with(&seq, conf, random_label(&mut rng))
            })
            .collect();
        match (mean_average_precision(&ds), brute_map(&ds)) {
            (Ok(a), Some(b)) => worst_map = worst_map.max((a - b).abs()),
            (Err(_), None) => {}
            (a, b) => return Err(format!("mAP defined-ness differs: {a:?} vs {b:?}")),
        }
    }
    ensure(worst_map <= FLOAT_ORACLE_TOL, || format!("mAP off by {worst_map:e}"))?;
    Ok(format!(
        "CoS exact on {captions} captions; confidence within {worst_conf:.1e}; mAP within {worst_map:.1e}"
    ))
}

// 4 ------------------------------------------------------------------------

fn entropy_window() -> Outcome {
    let one_hot = Vec32::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let tau = window_radius(&one_hot, 0.5);
    ensure(tau == 0, || format!("one-hot tau {tau}"))?;
    let uniform = Vec32::new(vec![0.5; 4]).unwrap();
    let tau = window_radius(&uniform, 0.5);
    ensure(tau == 1, || format!("uniform tau {tau}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let dim = rng.random_range(1..64);
        let e = random_vec(&mut rng, dim);
        let taus: Vec<usize> = (1..=10).map(|i| window_radius(&e, 0.2 * i as f64)).collect();
        ensure(taus.windows(2).all(|w| w[0] <= w[1]), || format!("tau not monotone: {taus:?}"))?;
    }
    ensure(tau_from_entropy(0.0, 2.0) == 0, || "zero entropy".into())?;
    Ok("one-hot tau 0, uniform dim-4 tau 1, monotone over 200 gamma sweeps".into())
}

// 5 ------------------------------------------------------------------------

fn planted_detection() -> Outcome {
    let (mut right, mut total) = (0usize, 0usize);
    let mut worst_map = 1.0f64;
    for seed in 0..PLANTED_SEEDS {
        let bundles = generate_bundles(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut all = Vec::new();
        for b in &bundles {
            all.extend(detect_behaviors(b, &DetectionConfig::for_bundle(b)).unwrap());
        }
        for d in &all {
            total += 1;
            let flagged = d.verdict == Verdict::Hallucinated;
            if flagged == (d.label == Label::Hallucinated) {
                right += 1;
            }
        }
        worst_map = worst_map.min(mean_average_precision(&all).unwrap());
    }
    ensure(right == total, || format!("accuracy {right}/{total}"))?;
    ensure(worst_map == 1.0, || format!("min mAP {worst_map}"))?;
    Ok(format!("accuracy {right}/{total}, mAP 1.0 on all {PLANTED_SEEDS} corpora"))
}

// 6 ------------------------------------------------------------------------

fn mitigation_efficacy() -> Outcome {
    let (mut before, mut after) = (Vec::new(), Vec::new());
    let (mut conf_before, mut conf_after) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        for b in generate_bundles(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
        {
            let cfg = DetectionConfig::for_bundle(&b);
            let stub = StubModel::for_bundle(&b, DEFAULT_CARRYOVER, REGEN_THRESHOLD).unwrap();
            let detections = detect_behaviors(&b, &cfg).unwrap();
            let m = MitigationConfig::new(DEFAULT_ALPHA_BASE, cfg.text_layer);
            let (fixed, _) = mitigate(&b, &detections, &m, &cfg).unwrap();

            before.extend(detect_emissions(&b, &stub_generate(&b, &stub).unwrap(), &stub, &cfg).unwrap());
            after.extend(detect_emissions(&fixed, &stub_generate(&fixed, &stub).unwrap(), &stub, &cfg).unwrap());

            let hallucinated = |ds: Vec<BehaviorDetection>| {
                ds.into_iter()
                    .filter(|d| d.label == Label::Hallucinated)
                    .map(|d| d.confidence)
                    .collect::<Vec<_>>()
            };
            conf_before.extend(hallucinated(detections));
            conf_after.extend(hallucinated(detect_behaviors(&fixed, &cfg).unwrap()));
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (c0, c1) = (mean(&conf_before), mean(&conf_after));
    ensure(c1 < c0, || format!("hallucinated confidence {c0:.4} -> {c1:.4}"))?;
    let (b0, b1) = (beach_i_from_verdicts(&before).unwrap(), beach_i_from_verdicts(&after).unwrap_or(0.0));
    ensure(b0 - b1 >= BEACH_DROP_MIN, || format!("BEACH_I {:.2}% -> {:.2}%", b0 * 100.0, b1 * 100.0))?;
    Ok(format!(
        "hallucinated confidence {c0:.3} -> {c1:.3}; BEACH_I {:.2}% -> {:.2}%",
        b0 * 100.0,
        b1 * 100.0
    ))
}

// 7 ------------------------------------------------------------------------

fn stage_rows(bundles: &[SequenceBundle], carryover: f64) -> Vec<SegmentStat> {
    let cases: Vec<_> = bundles
        .iter()
        .map(|b| (b.clone(), StubModel::for_bundle(b, carryover, DEFAULT_EMISSION_THRESHOLD).unwrap()))
        .collect();
    let exp = StageExperiment {
        kinds: vec![Perturbation::gaussian()],
        trials: SNOWBALL_TRIALS,
        seed: 7,
    };
    run_stage_experiment(&cases, &exp).unwrap()
}

fn snowball_ordering() -> Outcome {
    let bundles = generate_bundles(&SynthSpec::default()).unwrap();
    let mut notes = Vec::new();
    for carryover in [0.5, 0.75] {
        let rows = stage_rows(&bundles, carryover);
        let wins = (0..SNOWBALL_TRIALS)
            .filter(|&t| (1..10).all(|s| rows[s].per_trial[t] < rows[0].per_trial[t]))
            .count();
        let rate = wins as f64 / SNOWBALL_TRIALS as f64;
        ensure(rate >= SNOWBALL_WIN_RATE, || format!("lambda {carryover}: segment 1 max in {wins} trials"))?;
        let band = |r: std::ops::Range<usize>| rows[r.clone()].iter().map(|x| x.mean_delta_bh).sum::<f64>() / r.len() as f64;
        let (early, middle, late) = (band(0..3), band(3..7), band(7..10));
        ensure(early > middle && middle > late, || {
            format!("lambda {carryover}: early {early:.3} middle {middle:.3} late {late:.3}")
        })?;
        notes.push(format!("lambda {carryover}: seg-1 max {wins}/100, bands {early:.2}>{middle:.2}>{late:.2}"));
    }

    let rows = stage_rows(&bundles, 0.0);
    let all: Vec<f64> = rows.iter().flat_map(|r| r.per_trial.iter().copied()).collect();
    let grand = all.iter().sum::<f64>() / all.len() as f64;
    let se = (all.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (all.len() - 1) as f64 / SNOWBALL_TRIALS as f64).sqrt();
    let worst = rows.iter().map(|r| (r.mean_delta_bh - grand).abs() / se).fold(0.0, f64::max);
    ensure(worst <= UNIFORM_SE, || format!("lambda 0: a segment mean is {worst:.2} SE from uniform"))?;
    notes.push(format!("lambda 0: max deviation {worst:.2} SE"));
    Ok(notes.join("; "))
}

// 8 ------------------------------------------------------------------------

fn random_archive(rng: &mut impl Rng) -> TensorArchive {
    let mut a = TensorArchive::new();
    for i in 0..rng.random_range(1..5) {
        let shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        a.push(TensorEntry::new(format!("e{i}"), shape, data).unwrap()).unwrap();
    }
    a
}

fn random_annotation_file(rng: &mut impl Rng) -> AnnotationFile {
    let sequences = (0..rng.random_range(0..4))
        .map(|s| SequenceAnnotations {
            sequence_id: format!("s{s}"),
            captions: random_corpus(rng)
                .into_iter()
                .map(|mut c| {
                    c.caption_id = format!("s{s}/{}", c.caption_id);
                    c
                })
                .collect(),
        })
        .collect();
    AnnotationFile::new(sequences)
}

fn format_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..FORMAT_FILES {
        let a = random_archive(&mut rng);
        let path = dir.path().join(format!("{}.she", i % 8));
        a.write(&path).unwrap();
        let back = TensorArchive::read(&path).unwrap();
        ensure(back.encode() == a.encode(), || format!("archive {i} changed"))?;

        let f = random_annotation_file(&mut rng);
        let (parsed, _) = parse_annotations(&to_json(&f), Strictness::Strict).map_err(|e| e.to_string())?;
        ensure(parsed == f, || format!("annotation file {i} changed"))?;
    }

    let mut seen = BTreeSet::new();
    for i in 0..FORMAT_FILES {
        let bytes = random_archive(&mut rng).encode();
        let mut bad = bytes.clone();
        let expect: &[&str] = match i % 3 {
            0 => {
                bad.truncate(rng.random_range(0..bytes.len()));
                &["truncated", "bad-magic"]
            }
            1 => {
                bad[..4].copy_from_slice(b"SHE2");
                &["bad-magic"]
            }
            _ => {
                // first dim of the first entry: magic, count, name_len, "e0", rank
                let at = 4 + 4 + 2 + 2 + 1;
                let lie = match rng.random_range(0..3) {
                    0 => u64::MAX,
                    1 => rng.random_range(5..1000),
                    _ => 0,
                };
                bad[at..at + 8].copy_from_slice(&lie.to_le_bytes());
                &["truncated", "shape-mismatch", "trailing-data", "invalid-name", "duplicate-name"]
            }
        };
        let outcome = catch_unwind(|| TensorArchive::decode(&bad));
        let code = match outcome {
            Err(_) => return Err(format!("decoder panicked on case {i}")),
            Ok(Ok(_)) => {
                // zeroing a dim can still describe a valid (shorter) file
                if bad[..4] == MAGIC && i % 3 == 2 {
                    continue;
                }
                return Err(format!("corrupt case {i} decoded"));
            }
            Ok(Err(e)) => e.code(),
        };
        ensure(ERROR_CODES.contains(&code) && expect.contains(&code), || format!("case {i}: {code}"))?;
        seen.insert(code);
    }

    for i in 0..FORMAT_FILES {
        let mut bytes = to_json(&random_annotation_file(&mut rng)).into_bytes();
        let cut = rng.random_range(0..bytes.len());
        if i % 2 == 0 {
            bytes.truncate(cut);
        } else {
            bytes[cut] = b"{}[],:\"x"[rng.random_range(0..8)];
        }
        let text = String::from_utf8_lossy(&bytes).into_owned();
        match catch_unwind(AssertUnwindSafe(|| parse_annotations(&text, Strictness::Strict))) {
            Err(_) => return Err(format!("annotation parser panicked on case {i}")),
            Ok(Err(e)) => {
                seen.insert(e.code());
            }
            Ok(Ok(_)) => {}
        }
    }
    Ok(format!(
        "{FORMAT_FILES} archive + {FORMAT_FILES} annotation round trips lossless; codes seen: {}",
        seen.into_iter().collect::<Vec<_>>().join(" ")
    ))
}

// 9 ------------------------------------------------------------------------

fn run_pipeline(dir: &Path) -> Result<Duration, String> {
    let she = env!("CARGO_BIN_EXE_she");
    let steps: [&[&str]; 6] = [
        &["synth", "--out-archive", "a.she", "--out-annotations", "a.json"],
        &["detect", "--archive", "a.she", "--annotations", "a.json", "--out", "d.jsonl"],
        &["mitigate", "--archive", "a.she", "--detections", "d.jsonl", "--out-archive", "m.she", "--out-log", "m.csv"],
        &["eval", "--annotations", "a.json", "--detections", "d.jsonl", "--out", "e.json", "--out-csv", "e.csv"],
        &["cooccur", "--annotations", "a.json", "--out", "c.csv"],
        &["snowball", "--archive", "a.she", "--annotations", "a.json", "--out", "s.csv"],
    ];
    let start = Instant::now();
    for args in steps {
        let out = Command::new(she)
            .current_dir(dir)
            .args(args)
            .env_remove("SHE_CONFIG")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(start.elapsed())
}

fn end_to_end() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run_pipeline(a.path())?;
    let tb = run_pipeline(b.path())?;
    let slowest = ta.max(tb);
    ensure(slowest < PIPELINE_BUDGET, || format!("pipeline took {slowest:?}"))?;
    let files = ["a.she", "a.json", "d.jsonl", "m.she", "m.csv", "e.json", "e.csv", "c.csv", "s.csv"];
    for f in files {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} outputs byte-identical, slowest run {slowest:.1?}", files.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("projection law", projection_law),
        ("idempotence", idempotence),
        ("oracle equivalence", oracle_equivalence),
        ("entropy/window laws", entropy_window),
        ("planted detection quality", planted_detection),
        ("mitigation efficacy proxy", mitigation_efficacy),
        ("snowball ordering", snowball_ordering),
        ("format fidelity", format_fidelity),
        ("end-to-end determinism and speed", end_to_end),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
