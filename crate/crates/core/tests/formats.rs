//! Randomized round trips and corruption of archives and annotation files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use she_core::io::annotations::{parse_annotations, to_json, AnnotationFile, SequenceAnnotations, Strictness};
use she_core::io::archive::{ArchiveError, TensorArchive, TensorEntry, ERROR_CODES};
use she_core::{Annotation, CaptionRecord, Label, Span};

fn random_archive(rng: &mut impl Rng) -> TensorArchive {
    let mut a = TensorArchive::new();
    for i in 0..rng.random_range(0..5) {
        let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..4)).collect();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff))
            .collect();
        a.push(TensorEntry::new(format!("t/{i}/é"), shape, data).unwrap()).unwrap();
    }
    a
}

#[test]
fn archives_round_trip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let a = random_archive(&mut rng);
        let bytes = a.encode();
        let back = TensorArchive::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
    }
}

#[test]
fn corrupt_archives_fail_with_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..300 {
        let bytes = random_archive(&mut rng).encode();
        let mut bad = bytes.clone();
        match rng.random_range(0..3) {
            0 => bad.truncate(rng.random_range(0..bytes.len())),
            1 => bad[rng.random_range(0..4)] ^= 0x20,
            _ => {
                let i = rng.random_range(0..bad.len());
                bad[i] = rng.random();
            }
        }
        if let Err(e) = TensorArchive::decode(&bad) {
            assert!(ERROR_CODES.contains(&e.code()));
            assert!(!matches!(e, ArchiveError::Io(_)));
        }
    }
}

fn random_annotations(rng: &mut impl Rng) -> AnnotationFile {
    let labels = [Label::Real, Label::Hallucinated, Label::Unknown];
    let sequences = (0..rng.random_range(0..4))
        .map(|s| SequenceAnnotations {
            sequence_id: format!("s{s}"),
            captions: (0..rng.random_range(0..3))
                .map(|c| {
                    let n = rng.random_range(1..8);
                    let ann = |k: usize, rng: &mut dyn rand::RngCore| {
                        let start = rng.random_range(0..n);
                        Annotation::new(
                            format!("a{k}"),
                            Span::new(start, rng.random_range(start..n)),
                            labels[rng.random_range(0..3)],
                            format!("Surf \"{k}\" ü"),
                        )
                    };
                    CaptionRecord {
                        caption_id: format!("s{s}/c{c}"),
                        tokens: (0..n).map(|i| format!("tok{i}")).collect(),
                        behaviors: (0..rng.random_range(0..3)).map(|k| ann(k, rng)).collect(),
                        objects: (0..rng.random_range(0..3)).map(|k| ann(k, rng)).collect(),
                    }
                })
                .collect(),
        })
        .collect();
    AnnotationFile::new(sequences)
}

#[test]
fn annotations_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        let file = random_annotations(&mut rng);
        let text = to_json(&file);
        let (back, warnings) = parse_annotations(&text, Strictness::Strict).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back, file);
    }
}

#[test]
fn mangled_annotations_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..300 {
        let text = to_json(&random_annotations(&mut rng));
        let mut bytes = text.into_bytes();
        let cut = rng.random_range(0..bytes.len());
        if rng.random_bool(0.5) {
            bytes.truncate(cut);
        } else {
            bytes[cut] = b"{}[],:\"0a"[rng.random_range(0..9)];
        }
        let text = String::from_utf8_lossy(&bytes);
        if let Err(e) = parse_annotations(&text, Strictness::Strict) {
            assert!(!e.code().is_empty());
        }
    }
}
