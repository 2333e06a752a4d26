//! Extracted slice features (`.features.ckpt`).
//!
//! Stage one emits, per scan, one embedding row and one probability row
//! per slice. They ride in the checkpoint container as two entries per
//! scan — `<scan>.embeddings` with shape `[T, D]` and `<scan>.probs` with
//! shape `[T, 6]` — written in scan-id order.

use crate::io::checkpoint::Checkpoint;
use crate::metrics::PredVec;
use crate::{Error, Result, NUM_CLASSES};
use std::path::Path;

const EMB_SUFFIX: &str = ".embeddings";
const PROB_SUFFIX: &str = ".probs";

#[derive(Debug, Clone, PartialEq)]
pub struct ScanFeatures {
    pub scan_id: String,
    /// `[T][D]` slice embeddings.
    pub embeddings: Vec<Vec<f64>>,
    /// `[T]` per-slice class probabilities.
    pub probs: Vec<PredVec>,
}

impl ScanFeatures {
    pub fn n_slices(&self) -> usize {
        self.embeddings.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    scans: Vec<ScanFeatures>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        FeatureSet { dim, scans: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn scans(&self) -> &[ScanFeatures] {
        &self.scans
    }

    pub fn get(&self, scan_id: &str) -> Option<&ScanFeatures> {
        self.scans.iter().find(|s| s.scan_id == scan_id)
    }

    pub fn n_slices_total(&self) -> usize {
        self.scans.iter().map(ScanFeatures::n_slices).sum()
    }

    pub fn add(&mut self, scan: ScanFeatures) -> Result<()> {
        if scan.scan_id.is_empty() {
            return Err(Error::Invalid("features scan_id is empty".into()));
        }
        if self.get(&scan.scan_id).is_some() {
            return Err(Error::Invalid(format!("duplicate features for scan {:?}", scan.scan_id)));
        }
        if scan.embeddings.is_empty() {
            return Err(Error::Invalid(format!("scan {:?}: no slices", scan.scan_id)));
        }
        if scan.probs.len() != scan.embeddings.len() {
            return Err(Error::Invalid(format!(
                "scan {:?}: {} embedding rows vs {} probability rows",
                scan.scan_id,
                scan.embeddings.len(),
                scan.probs.len()
            )));
        }
        for (t, row) in scan.embeddings.iter().enumerate() {
            if row.len() != self.dim {
                return Err(Error::Invalid(format!(
                    "scan {:?} slice {t}: embedding dim {} vs set dim {}",
                    scan.scan_id,
                    row.len(),
                    self.dim
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "scan {:?} slice {t}: non-finite embedding",
                    scan.scan_id
                )));
            }
        }
        for (t, p) in scan.probs.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!(
                    "scan {:?} slice {t}: probabilities outside [0, 1]",
                    scan.scan_id
                )));
            }
        }
        self.scans.push(scan);
        Ok(())
    }

    /// All embeddings stacked row-major as `[N, dim]`, scans in id order,
    /// slices in index order within each scan. Returns `(data, n_rows)`.
    pub fn stack_embeddings(&self) -> (Vec<f64>, usize) {
        let order = self.sorted_indices();
        let n = self.n_slices_total();
        let mut out = Vec::with_capacity(n * self.dim);
        for &i in &order {
            for row in &self.scans[i].embeddings {
                out.extend_from_slice(row);
            }
        }
        (out, n)
    }

    fn sorted_indices(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scans.len()).collect();
        order.sort_by(|&a, &b| self.scans[a].scan_id.cmp(&self.scans[b].scan_id));
        order
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        for &i in &self.sorted_indices() {
            let scan = &self.scans[i];
            let t = scan.n_slices();
            let emb: Vec<f32> = scan.embeddings.iter().flatten().map(|&v| v as f32).collect();
            ckpt.add(&format!("{}{EMB_SUFFIX}", scan.scan_id), &[t, self.dim], emb)?;
            let probs: Vec<f32> = scan.probs.iter().flatten().map(|&v| v as f32).collect();
            ckpt.add(&format!("{}{PROB_SUFFIX}", scan.scan_id), &[t, NUM_CLASSES], probs)?;
        }
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let origin = path.display().to_string();
        let mut set: Option<FeatureSet> = None;
        for name in ckpt.names() {
            let scan_id = match name.strip_suffix(EMB_SUFFIX) {
                Some(id) => id,
                None => {
                    if name.strip_suffix(PROB_SUFFIX).is_some() {
                        continue;
                    }
                    return Err(Error::format(&origin, format!("unexpected entry {name:?}")));
                }
            };
            let (emb_dims, emb) = ckpt.get(name).unwrap();
            if emb_dims.len() != 2 || emb_dims[0] == 0 {
                return Err(Error::format(
                    &origin,
                    format!("entry {name:?}: want shape [T, D], got {emb_dims:?}"),
                ));
            }
            let (t, d) = (emb_dims[0], emb_dims[1]);
            let prob_name = format!("{scan_id}{PROB_SUFFIX}");
            let (prob_dims, probs) = ckpt
                .get(&prob_name)
                .ok_or_else(|| Error::format(&origin, format!("entry {prob_name:?} missing")))?;
            if prob_dims != [t, NUM_CLASSES].as_slice() {
                return Err(Error::format(
                    &origin,
                    format!("entry {prob_name:?}: want shape [{t}, {NUM_CLASSES}], got {prob_dims:?}"),
                ));
            }
            let set = set.get_or_insert_with(|| FeatureSet::new(d));
            let scan = ScanFeatures {
                scan_id: scan_id.to_string(),
                embeddings: (0..t)
                    .map(|i| emb[i * d..(i + 1) * d].iter().map(|&v| f64::from(v)).collect())
                    .collect(),
                probs: (0..t)
                    .map(|i| {
                        std::array::from_fn(|c| f64::from(probs[i * NUM_CLASSES + c]))
                    })
                    .collect(),
            };
            set.add(scan).map_err(|e| Error::format(&origin, e.to_string()))?;
        }
        let set = set.ok_or_else(|| Error::format(&origin, "no feature entries"))?;
        for scan in ckpt.names().filter_map(|n| n.strip_suffix(PROB_SUFFIX)) {
            if set.get(scan).is_none() {
                return Err(Error::format(
                    &origin,
                    format!("entry \"{scan}{PROB_SUFFIX}\" has no matching embeddings"),
                ));
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> FeatureSet {
        let mut fs = FeatureSet::new(3);
        fs.add(ScanFeatures {
            scan_id: "scan_b".into(),
            embeddings: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]],
            probs: vec![[0.5; 6], [0.25, 0.5, 0.75, 1.0, 0.0, 0.125]],
        })
        .unwrap();
        fs.add(ScanFeatures {
            scan_id: "scan_a".into(),
            embeddings: vec![vec![0.0, 0.0, 4.0]],
            probs: vec![[0.0; 6]],
        })
        .unwrap();
        fs
    }

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.features.ckpt");
        let fs = sample();
        fs.save(&path).unwrap();
        let back = FeatureSet::load(&path).unwrap();
        assert_eq!(back.dim(), 3);
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("scan_b").unwrap(), fs.get("scan_b").unwrap());
        assert_eq!(back.get("scan_a").unwrap(), fs.get("scan_a").unwrap());
    }

    #[test]
    fn file_entries_are_scan_sorted() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.features.ckpt");
        sample().save(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        let names: Vec<_> = ckpt.names().collect();
        assert_eq!(
            names,
            vec!["scan_a.embeddings", "scan_a.probs", "scan_b.embeddings", "scan_b.probs"]
        );
    }

    #[test]
    fn stack_orders_by_scan_id() {
        let (data, n) = sample().stack_embeddings();
        assert_eq!(n, 3);
        assert_eq!(data[..3], [0.0, 0.0, 4.0]);
        assert_eq!(data[3..6], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut fs = FeatureSet::new(3);
        let bad = ScanFeatures {
            scan_id: "s".into(),
            embeddings: vec![vec![1.0, 2.0]],
            probs: vec![[0.0; 6]],
        };
        assert!(fs.add(bad).is_err());
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let mut fs = FeatureSet::new(2);
        let bad = ScanFeatures {
            scan_id: "s".into(),
            embeddings: vec![vec![1.0, 2.0]],
            probs: vec![[0.0; 6], [0.0; 6]],
        };
        assert!(fs.add(bad).is_err());
    }

    #[test]
    fn orphan_probs_entry_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("o.features.ckpt");
        let mut ckpt = Checkpoint::new();
        ckpt.add("s.probs", &[1, 6], vec![0.5; 6]).unwrap();
        ckpt.save(&path).unwrap();
        assert!(FeatureSet::load(&path).is_err());
    }

    #[test]
    fn foreign_entry_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.features.ckpt");
        let mut ckpt = Checkpoint::new();
        ckpt.add("model.weight", &[2], vec![1.0, 2.0]).unwrap();
        ckpt.save(&path).unwrap();
        assert!(FeatureSet::load(&path).is_err());
    }
}
