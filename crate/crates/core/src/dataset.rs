//! Line-delimited JSON sample records.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolbox::BBox;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("sample {id}: {reason}")]
    Invalid { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    #[serde(alias = "VisualSearch")]
    VisualSearch,
    #[serde(alias = "Chart")]
    Chart,
    #[serde(alias = "Reasoning")]
    Reasoning,
}

impl SourceTag {
    pub const ALL: [SourceTag; 3] = [SourceTag::VisualSearch, SourceTag::Chart, SourceTag::Reasoning];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::VisualSearch => "visual_search",
            SourceTag::Chart => "chart",
            SourceTag::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bboxes: Option<Vec<BBox>>,
    pub source: SourceTag,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: &str| DataError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(invalid("empty question"));
        }
        if self.answer.trim().is_empty() {
            return Err(invalid("empty answer"));
        }
        if let Some(boxes) = &self.gt_bboxes {
            if boxes.iter().any(|b| !b.is_finite() || b.x2 <= b.x1 || b.y2 <= b.y1) {
                return Err(invalid("gt box must be finite with x1 < x2 and y1 < y2"));
            }
        }
        Ok(())
    }

    /// Image path resolved against `base` when relative.
    pub fn resolved_image_path(&self, base: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            base.join(&self.image_path)
        }
    }
}

/// Reads and validates every record; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(records: &[SampleRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
