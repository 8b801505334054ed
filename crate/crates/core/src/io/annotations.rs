//! JSON annotation files.
//!
//! ```json
//! {
//!   "version": 1,
//!   "sequences": [
//!     { "sequence_id": "s0",
//!       "captions": [
//!         { "caption_id": "s0/c0",
//!           "tokens": ["a", "man", "rides", "a", "bike"],
//!           "behaviors": [{"id": "b0", "span": [2, 2], "label": "real", "surface": "rides"}],
//!           "objects":   [{"id": "o0", "span": [4, 4], "label": "hallucinated", "surface": "bike"}] } ] } ]
//! }
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::SheError;
use crate::model::CaptionRecord;

pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub version: u32,
    pub sequences: Vec<SequenceAnnotations>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceAnnotations {
    pub sequence_id: String,
    pub captions: Vec<CaptionRecord>,
}

impl AnnotationFile {
    pub fn new(sequences: Vec<SequenceAnnotations>) -> Self {
        Self {
            version: ANNOTATION_VERSION,
            sequences,
        }
    }

    pub fn sequence(&self, id: &str) -> Option<&SequenceAnnotations> {
        self.sequences.iter().find(|s| s.sequence_id == id)
    }

    /// Every caption of every sequence, in file order.
    pub fn captions(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.sequences.iter().flat_map(|s| s.captions.iter())
    }
}

/// Policy for fields the schema does not know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    #[default]
    Strict,
    /// Unknown fields are reported as warnings and otherwise ignored.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationErrorKind {
    Syntax,
    Schema,
    UnknownField,
    UnknownLabel,
    SpanOutOfRange,
    DuplicateId,
    EmptySurface,
    Version,
    Io,
}

impl AnnotationErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            Self::Syntax => "syntax",
            Self::Schema => "schema",
            Self::UnknownField => "unknown-field",
            Self::UnknownLabel => "unknown-label",
            Self::SpanOutOfRange => "span-out-of-range",
            Self::DuplicateId => "duplicate-id",
            Self::EmptySurface => "empty-surface",
            Self::Version => "version",
            Self::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct AnnotationError {
    pub kind: AnnotationErrorKind,
    /// 1-based line of the offending text, when it can be located.
    pub line: Option<usize>,
    pub message: String,
    source: Option<std::io::Error>,
}

impl AnnotationError {
    fn new(kind: AnnotationErrorKind, line: Option<usize>, message: impl Into<String>) -> Self {
        Self {
            kind,
            line,
            message: message.into(),
            source: None,
        }
    }

    pub fn code(&self) -> &'static str {
        self.kind.code()
    }

    pub fn is_io(&self) -> bool {
        self.kind == AnnotationErrorKind::Io
    }
}

impl fmt::Display for AnnotationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] ", self.code())?;
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for AnnotationError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        self.source.as_ref().map(|e| e as _)
    }
}

impl From<std::io::Error> for AnnotationError {
    fn from(e: std::io::Error) -> Self {
        Self {
            kind: AnnotationErrorKind::Io,
            line: None,
            message: "file access failed".into(),
            source: Some(e),
        }
    }
}

fn from_json(e: serde_json::Error) -> AnnotationError {
    use serde_json::error::Category;
    let kind = match e.classify() {
        Category::Syntax | Category::Eof => AnnotationErrorKind::Syntax,
        Category::Io => AnnotationErrorKind::Io,
        Category::Data if e.to_string().contains("unknown variant") => AnnotationErrorKind::UnknownLabel,
        Category::Data => AnnotationErrorKind::Schema,
    };
    let line = (e.line() > 0).then_some(e.line());
    AnnotationError::new(kind, line, e.to_string())
}

/// Line of the first quoted occurrence of `needle` at or after byte `from`.
fn line_of(text: &str, needle: &str, from: usize) -> Option<(usize, usize)> {
    let quoted = format!("\"{needle}\"");
    let at = from + text.get(from..)?.find(&quoted)?;
    Some((text[..at].matches('\n').count() + 1, at))
}

/// Parses and validates an annotation document. Returns the warnings
/// collected in lenient mode.
pub fn parse_annotations(text: &str, strictness: Strictness) -> Result<(AnnotationFile, Vec<String>), AnnotationError> {
    let mut ignored = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let file: AnnotationFile =
        serde_ignored::deserialize(&mut de, |path| ignored.push(path.to_string())).map_err(from_json)?;
    de.end().map_err(from_json)?;

    let mut warnings = Vec::new();
    if let Some(first) = ignored.first() {
        match strictness {
            Strictness::Strict => {
                let field = first.rsplit('.').next().unwrap_or(first);
                let line = line_of(text, field, 0).map(|(l, _)| l);
                return Err(AnnotationError::new(
                    AnnotationErrorKind::UnknownField,
                    line,
                    format!("unknown field `{first}`"),
                ));
            }
            Strictness::Lenient => warnings.extend(ignored.iter().map(|p| format!("ignored unknown field `{p}`"))),
        }
    }
    validate(text, &file)?;
    Ok((file, warnings))
}

fn validate(text: &str, file: &AnnotationFile) -> Result<(), AnnotationError> {
    if file.version != ANNOTATION_VERSION {
        return Err(AnnotationError::new(
            AnnotationErrorKind::Version,
            None,
            format!("unsupported version {} (expected {ANNOTATION_VERSION})", file.version),
        ));
    }
    let mut sequences = HashSet::new();
    let mut captions = HashSet::new();
    for seq in &file.sequences {
        let seq_at = line_of(text, &seq.sequence_id, 0);
        if !sequences.insert(seq.sequence_id.as_str()) {
            return Err(AnnotationError::new(
                AnnotationErrorKind::DuplicateId,
                seq_at.map(|l| l.0),
                format!("duplicate sequence id `{}`", seq.sequence_id),
            ));
        }
        for caption in &seq.captions {
            let cap_at = line_of(text, &caption.caption_id, seq_at.map_or(0, |l| l.1));
            if !captions.insert(caption.caption_id.as_str()) {
                return Err(AnnotationError::new(
                    AnnotationErrorKind::DuplicateId,
                    cap_at.map(|l| l.0),
                    format!("duplicate caption id `{}`", caption.caption_id),
                ));
            }
            caption.validate().map_err(|e| {
                let (kind, item) = match &e {
                    SheError::SpanOutOfRange { owner, .. } => (AnnotationErrorKind::SpanOutOfRange, owner.clone()),
                    SheError::DuplicateId(item) => (AnnotationErrorKind::DuplicateId, item.clone()),
                    SheError::EmptySurface(item) => (AnnotationErrorKind::EmptySurface, item.clone()),
                    _ => (AnnotationErrorKind::Schema, String::new()),
                };
                let id = item.rsplit('/').next().unwrap_or_default();
                let line = line_of(text, id, cap_at.map_or(0, |l| l.1)).or(cap_at).map(|l| l.0);
                AnnotationError::new(kind, line, format!("sequence `{}`: {e}", seq.sequence_id))
            })?;
        }
    }
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>, strictness: Strictness) -> Result<(AnnotationFile, Vec<String>), AnnotationError> {
    let text = fs::read_to_string(path)?;
    parse_annotations(&text, strictness)
}

pub fn to_json(file: &AnnotationFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("annotation types serialize");
    s.push('\n');
    s
}

pub fn write_annotations(path: impl AsRef<Path>, file: &AnnotationFile) -> Result<(), AnnotationError> {
    fs::write(path, to_json(file))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Label;

    const MINIMAL: &str = r#"{
  "version": 1,
  "sequences": [
    {
      "sequence_id": "s0",
      "captions": [
        {
          "caption_id": "c0",
          "tokens": ["a", "man", "rides", "a", "bike"],
          "behaviors": [
            {"id": "b0", "span": [2, 2], "label": "hallucinated", "surface": "Rides"}
          ],
          "objects": [
            {"id": "o0", "span": [4, 4], "label": "real", "surface": "bike"}
          ]
        }
      ]
    }
  ]
}"#;

    #[test]
    fn minimal_file_parses() {
        let (file, warnings) = parse_annotations(MINIMAL, Strictness::Strict).unwrap();
        assert!(warnings.is_empty());
        let c = &file.sequences[0].captions[0];
        assert_eq!(c.behaviors[0].label, Label::Hallucinated);
        assert_eq!(c.behaviors[0].key(), "rides");
        let (again, _) = parse_annotations(&to_json(&file), Strictness::Strict).unwrap();
        assert_eq!(again, file);
    }

    #[test]
    fn span_out_of_range_reports_line() {
        let bad = MINIMAL.replace("[2, 2]", "[2, 5]");
        let err = parse_annotations(&bad, Strictness::Strict).unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::SpanOutOfRange);
        assert_eq!(err.line, Some(11));
    }

    #[test]
    fn unknown_label_and_field() {
        let bad = MINIMAL.replace("\"hallucinated\"", "\"maybe\"");
        let err = parse_annotations(&bad, Strictness::Strict).unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::UnknownLabel);
        assert_eq!(err.line, Some(11));

        let extra = MINIMAL.replace("\"tokens\"", "\"speaker\": \"x\", \"tokens\"");
        let err = parse_annotations(&extra, Strictness::Strict).unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::UnknownField);
        assert!(err.message.contains("speaker"));
        let (_, warnings) = parse_annotations(&extra, Strictness::Lenient).unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn duplicate_ids_and_version() {
        let dup = MINIMAL.replace("\"o0\"", "\"o1\"").replace(
            r#"{"id": "o1", "span": [4, 4], "label": "real", "surface": "bike"}"#,
            r#"{"id": "o1", "span": [4, 4], "label": "real", "surface": "bike"}, {"id": "o1", "span": [1, 1], "label": "real", "surface": "man"}"#,
        );
        let err = parse_annotations(&dup, Strictness::Strict).unwrap_err();
        assert_eq!(err.kind, AnnotationErrorKind::DuplicateId);

        let v2 = MINIMAL.replace("\"version\": 1", "\"version\": 2");
        assert_eq!(parse_annotations(&v2, Strictness::Strict).unwrap_err().kind, AnnotationErrorKind::Version);

        let syntax = &MINIMAL[..40];
        assert_eq!(parse_annotations(syntax, Strictness::Strict).unwrap_err().kind, AnnotationErrorKind::Syntax);
    }

    #[test]
    fn missing_file_is_io() {
        let err = read_annotations("/nonexistent/annotations.json", Strictness::Strict).unwrap_err();
        assert!(err.is_io());
    }
}
