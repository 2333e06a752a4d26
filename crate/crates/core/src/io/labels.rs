//! Per-scan label sidecar (`<scan_id>.labels.json`).
//!
//! One JSON document per volume: the scan id, an optional split tag, and
//! one six-element 0/1 array per slice in class order. The `any` column
//! must equal the OR of the five subtype columns.

use crate::metrics::LabelVec;
use crate::{Error, Result, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub scan_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub labels: Vec<[u8; NUM_CLASSES]>,
}

impl LabelSidecar {
    pub fn new(scan_id: &str, split: Option<&str>, labels: Vec<[u8; NUM_CLASSES]>) -> Result<Self> {
        let sidecar = LabelSidecar {
            scan_id: scan_id.to_string(),
            split: split.map(str::to_string),
            labels,
        };
        sidecar.validate()?;
        Ok(sidecar)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scan_id.is_empty() {
            return Err(Error::Invalid("sidecar scan_id is empty".into()));
        }
        if self.labels.is_empty() {
            return Err(Error::Invalid(format!("sidecar {}: no slices", self.scan_id)));
        }
        for (i, row) in self.labels.iter().enumerate() {
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Invalid(format!(
                    "sidecar {} slice {i}: labels must be 0 or 1, got {row:?}",
                    self.scan_id
                )));
            }
            let any = row[1..].iter().any(|&v| v == 1);
            if (row[0] == 1) != any {
                return Err(Error::Invalid(format!(
                    "sidecar {} slice {i}: 'any' must be the OR of the subtypes, got {row:?}",
                    self.scan_id
                )));
            }
        }
        Ok(())
    }

    pub fn n_slices(&self) -> usize {
        self.labels.len()
    }

    /// Slice labels as floats for the loss/metric functions.
    pub fn label_vec(&self, slice: usize) -> LabelVec {
        std::array::from_fn(|t| f64::from(self.labels[slice][t]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("sidecar encode: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sidecar: LabelSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display(), format!("invalid sidecar JSON: {e}")))?;
        sidecar
            .validate()
            .map_err(|e| Error::format(path.display(), e.to_string()))?;
        Ok(sidecar)
    }
}

/// `<dir>/<scan_id>.labels.json` convention next to `<scan_id>.ctv`.
pub fn sidecar_path(ctv_path: &Path) -> PathBuf {
    let stem = ctv_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    ctv_path.with_file_name(format!("{stem}.labels.json"))
}
