//! Prediction tables: `ID,Label` CSV with one row per slice and class.
//!
//! Row ids are `<scan>_<slice>_<class>`. Scan ids may themselves contain
//! underscores, so ids are split from the right: the last segment is the
//! class name, the one before it the slice index, and everything left of
//! that is the scan id. Probabilities are written with six decimals and
//! rows are ordered by scan id, slice index, then class order.

use crate::metrics::PredVec;
use crate::{Error, Result, CLASS_NAMES, NUM_CLASSES};
use std::fmt::Write as _;
use std::path::Path;

const HEADER: &str = "ID,Label";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    rows: Vec<(String, usize, PredVec)>,
}

impl PredictionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, scan_id: &str, slice: usize, probs: PredVec) -> Result<()> {
        if scan_id.is_empty() {
            return Err(Error::Invalid("prediction scan_id is empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid(format!(
                "prediction for {scan_id} slice {slice} outside [0, 1]: {probs:?}"
            )));
        }
        self.rows.push((scan_id.to_string(), slice, probs));
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Rows as (scan_id, slice_index, probabilities), in insertion order.
    pub fn rows(&self) -> &[(String, usize, PredVec)] {
        &self.rows
    }

    pub fn get(&self, scan_id: &str, slice: usize) -> Option<&PredVec> {
        self.rows
            .iter()
            .find(|(s, i, _)| s == scan_id && *i == slice)
            .map(|(_, _, p)| p)
    }

    /// Slice predictions for one scan, ordered by slice index.
    pub fn scan_rows(&self, scan_id: &str) -> Vec<(usize, PredVec)> {
        let mut rows: Vec<(usize, PredVec)> = self
            .rows
            .iter()
            .filter(|(s, _, _)| s == scan_id)
            .map(|(_, i, p)| (*i, *p))
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        rows
    }

    /// Scan ids present in the table, sorted and deduplicated.
    pub fn scan_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|(s, _, _)| s.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut sorted: Vec<&(String, usize, PredVec)> = self.rows.iter().collect();
        sorted.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
        let mut out = String::from(HEADER);
        out.push('\n');
        for (scan_id, slice, probs) in sorted {
            for (t, name) in CLASS_NAMES.iter().enumerate() {
                let _ = writeln!(out, "{scan_id}_{slice}_{name},{:.6}", probs[t]);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, line)) if line.trim_end_matches('\r') == HEADER => {}
            Some((_, line)) => {
                return Err(Error::format(
                    origin,
                    format!("line 1: expected header {HEADER:?}, got {line:?}"),
                ))
            }
            None => return Err(Error::format(origin, "empty prediction file")),
        }

        // (scan, slice) -> six slots, filled as class rows arrive.
        let mut partial: Vec<(String, usize, [Option<f64>; NUM_CLASSES])> = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (id, prob_text) = line.rsplit_once(',').ok_or_else(|| {
                Error::format(origin, format!("line {line_no}: expected ID,Label"))
            })?;
            let (rest, class_name) = id.rsplit_once('_').ok_or_else(|| {
                Error::format(origin, format!("line {line_no}: id {id:?} has no class suffix"))
            })?;
            let class = CLASS_NAMES.iter().position(|n| *n == class_name).ok_or_else(|| {
                Error::format(origin, format!("line {line_no}: unknown class {class_name:?}"))
            })?;
            let (scan_id, slice_text) = rest.rsplit_once('_').ok_or_else(|| {
                Error::format(origin, format!("line {line_no}: id {id:?} has no slice index"))
            })?;
            let slice: usize = slice_text.parse().map_err(|_| {
                Error::format(origin, format!("line {line_no}: bad slice index {slice_text:?}"))
            })?;
            if scan_id.is_empty() {
                return Err(Error::format(origin, format!("line {line_no}: empty scan id")));
            }
            let prob: f64 = prob_text.parse().map_err(|_| {
                Error::format(origin, format!("line {line_no}: bad probability {prob_text:?}"))
            })?;
            if !prob.is_finite() || !(0.0..=1.0).contains(&prob) {
                return Err(Error::format(
                    origin,
                    format!("line {line_no}: probability {prob} outside [0, 1]"),
                ));
            }

            let entry = match partial.iter_mut().find(|(s, i, _)| s == scan_id && *i == slice) {
                Some(entry) => entry,
                None => {
                    partial.push((scan_id.to_string(), slice, [None; NUM_CLASSES]));
                    partial.last_mut().unwrap()
                }
            };
            if entry.2[class].is_some() {
                return Err(Error::format(
                    origin,
                    format!("line {line_no}: duplicate row for {id:?}"),
                ));
            }
            entry.2[class] = Some(prob);
        }

        let mut table = PredictionTable::new();
        for (scan_id, slice, slots) in partial {
            for (t, slot) in slots.iter().enumerate() {
                if slot.is_none() {
                    return Err(Error::format(
                        origin,
                        format!(
                            "scan {scan_id} slice {slice}: missing class {:?}",
                            CLASS_NAMES[t]
                        ),
                    ));
                }
            }
            table.push(&scan_id, slice, std::array::from_fn(|t| slots[t].unwrap()))?;
        }
        if table.is_empty() {
            return Err(Error::format(origin, "no prediction rows"));
        }
        Ok(table)
    }
}
