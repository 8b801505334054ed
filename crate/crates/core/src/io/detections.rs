//! Detection reports as JSON lines, one `BehaviorDetection` per line.

use std::fs;
use std::path::Path;

use crate::detection::BehaviorDetection;
use crate::error::{Result, SheError};

pub fn to_jsonl(detections: &[BehaviorDetection]) -> String {
    let mut out = String::new();
    for d in detections {
        out.push_str(&serde_json::to_string(d).expect("detections serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<BehaviorDetection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SheError::DetectionFormat {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_detections(path: impl AsRef<Path>, detections: &[BehaviorDetection]) -> Result<()> {
    fs::write(path, to_jsonl(detections))?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<BehaviorDetection>> {
    parse_jsonl(&fs::read_to_string(path)?)
}
