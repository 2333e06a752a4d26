//! Synthetic CT phantoms with planted hyperdense lesions.
//!
//! Each scan is a circular skull ring around noisy brain tissue; positive
//! scans carry one or two blood-density lesions whose shape encodes the
//! subtype. The geometry is a proxy vocabulary, not clinical realism: a
//! lens against the inner skull stands in for epidural, a deep blob for
//! intraparenchymal, a central blob for intraventricular, a thin rim arc
//! for subarachnoid, and a boundary crescent for subdural. Its only job is
//! to make the six-way multi-label task learnable and the class-activation
//! maps testable. Ground-truth masks are kept for oracles and never fed to
//! training.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution as _, WeightedIndex};
use rand::{Rng as _, SeedableRng as _};
use rand_distr::Normal;
use rayon::prelude::*;

use crate::io::{sidecar_path, write_ctv, HuVolume, LabelSidecar};
use crate::metrics::LabelVec;
use crate::{derive_seed, Error, Result, Rng, NUM_CLASSES};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub side: usize,
    /// Inclusive slices-per-scan range.
    pub slice_range: (usize, usize),
    pub air_hu: f64,
    pub skull_hu: f64,
    /// Uniform brain-tissue HU range.
    pub tissue_hu: (f64, f64),
    /// Uniform lesion-blood HU range; must sit strictly above tissue.
    pub lesion_hu: (f64, f64),
    /// Gaussian HU noise added to every voxel.
    pub noise_sigma: f64,
    /// Probability that a scan carries lesions at all.
    pub positive_prob: f64,
    /// How many times rarer epidural lesions are than each other subtype.
    pub epidural_rarity: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            side: 64,
            slice_range: (16, 24),
            air_hu: -1000.0,
            skull_hu: 900.0,
            tissue_hu: (20.0, 45.0),
            lesion_hu: (55.0, 95.0),
            noise_sigma: 4.0,
            positive_prob: 0.5,
            epidural_rarity: 5.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 {
            return Err(Error::Config(format!("phantom side {} below 16", self.side)));
        }
        let (lo, hi) = self.slice_range;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!(
                "slice range {lo}..={hi} must be ordered and start at 2 or more"
            )));
        }
        if self.tissue_hu.0 > self.tissue_hu.1 || self.lesion_hu.0 > self.lesion_hu.1 {
            return Err(Error::Config("HU ranges must be ordered".into()));
        }
        if self.lesion_hu.0 <= self.tissue_hu.1 {
            return Err(Error::Config(format!(
                "lesion HU range starts at {} but tissue reaches {}; lesions must be strictly denser",
                self.lesion_hu.0, self.tissue_hu.1
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma {} negative", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.positive_prob) {
            return Err(Error::Config(format!(
                "positive probability {} outside [0, 1]",
                self.positive_prob
            )));
        }
        if self.epidural_rarity < 1.0 {
            return Err(Error::Config(format!(
                "epidural rarity {} below 1",
                self.epidural_rarity
            )));
        }
        Ok(())
    }

    /// Radii of the head model, in pixels.
    pub fn geometry(&self) -> PhantomGeometry {
        let side = self.side as f64;
        PhantomGeometry {
            center: (side - 1.0) / 2.0,
            lesion_radius: 0.41 * side,
            skull_inner: 0.43 * side,
            skull_outer: 0.47 * side,
        }
    }
}

/// Derived layout: tissue fills `r < skull_inner`, the skull ring spans
/// `[skull_inner, skull_outer)`, air lies beyond; lesions stay inside
/// `lesion_radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomGeometry {
    pub center: f64,
    pub lesion_radius: f64,
    pub skull_inner: f64,
    pub skull_outer: f64,
}

// ── Generated scans ─────────────────────────────────────────────────────

/// Per-slice, per-subtype lesion pixels as `(row, col)` lists; subtype `t`
/// (class index `1..=5`) lives at position `t - 1`.
pub type SliceMasks = [Vec<(usize, usize)>; NUM_CLASSES - 1];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScan {
    pub volume: HuVolume,
    pub labels: Vec<LabelVec>,
    pub masks: Vec<SliceMasks>,
}

impl GeneratedScan {
    pub fn n_slices(&self) -> usize {
        self.labels.len()
    }

    /// Union of all subtype masks on one slice.
    pub fn any_mask(&self, slice: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.masks[slice].iter().flatten().copied().collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Tight `(row_min, col_min, row_max, col_max)` around a pixel list.
pub fn mask_bbox(pixels: &[(usize, usize)]) -> Result<(usize, usize, usize, usize)> {
    if pixels.is_empty() {
        return Err(Error::Invalid("bounding box of an empty mask".into()));
    }
    let mut bbox = (usize::MAX, usize::MAX, 0, 0);
    for &(r, c) in pixels {
        bbox.0 = bbox.0.min(r);
        bbox.1 = bbox.1.min(c);
        bbox.2 = bbox.2.max(r);
        bbox.3 = bbox.3.max(c);
    }
    Ok(bbox)
}

// ── Lesion geometry ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct LesionSpec {
    /// Class index, `1..=5`.
    class: usize,
    start: usize,
    len: usize,
    /// Placement angle around the head center.
    theta: f64,
    aux: [f64; 2],
}

fn wrapped_angle_diff(a: f64, b: f64) -> f64 {
    (a - b + PI).rem_euclid(TAU) - PI
}

/// Smooth area profile over a lesion's span: small at the ends, widest in
/// the middle.
fn span_scale(i: usize, len: usize) -> f64 {
    0.6 + 0.4 * (PI * (i as f64 + 0.5) / len as f64).sin()
}

fn lesion_pixels(spec: &LesionSpec, config: &PhantomConfig, scale: f64) -> Vec<(usize, usize)> {
    let geo = config.geometry();
    let side = config.side as f64;
    let (cx, rb) = (geo.center, geo.lesion_radius);
    let (ux, uy) = (spec.theta.cos(), spec.theta.sin());

    let keep = |dx: f64, dy: f64| -> bool {
        let r = dx.hypot(dy);
        match spec.class {
            // Epidural: lens between the inner skull and a disk centered
            // on the boundary.
            1 => {
                let rho = spec.aux[0] * scale;
                r < rb && (dx - rb * ux).hypot(dy - rb * uy) < rho
            }
            // Intraparenchymal: rotated ellipse deep in the parenchyma.
            2 => {
                let (a, b) = (0.12 * side * scale, 0.084 * side * scale);
                let phi = spec.aux[0];
                let (qx, qy) = (spec.aux[1] * ux, spec.aux[1] * uy);
                let (ex, ey) = (dx - qx, dy - qy);
                let long = (ex * phi.cos() + ey * phi.sin()) / a;
                let short = (-ex * phi.sin() + ey * phi.cos()) / b;
                r < rb - 1.0 && long * long + short * short <= 1.0
            }
            // Intraventricular: blob at the center, lightly jittered.
            3 => {
                let rho = 0.10 * side * scale;
                (dx - spec.aux[0]).hypot(dy - spec.aux[1]) < rho
            }
            // Subarachnoid: thin rim arc hugging the boundary.
            4 => {
                let half_angle = spec.aux[0] * scale;
                r < rb
                    && r >= rb - 2.5
                    && wrapped_angle_diff(dy.atan2(dx), spec.theta).abs() < half_angle
            }
            // Subdural: crescent between the boundary and an offset circle.
            5 => {
                let t = spec.aux[0] * scale;
                r < rb && (dx + t * ux).hypot(dy + t * uy) > rb
            }
            _ => unreachable!("subtype class out of range"),
        }
    };

    let mut out = Vec::new();
    for row in 0..config.side {
        for col in 0..config.side {
            if keep(col as f64 - cx, row as f64 - cx) {
                out.push((row, col));
            }
        }
    }
    if out.is_empty() {
        // Degenerate parameter corner: fall back to the anchor pixel so
        // every labeled slice keeps a nonempty mask.
        let anchor_r = match spec.class {
            3 => 0.0,
            2 => spec.aux[1],
            _ => rb - 2.0,
        };
        let row = (cx + anchor_r * uy).round() as usize;
        let col = (cx + anchor_r * ux).round() as usize;
        out.push((row.min(config.side - 1), col.min(config.side - 1)));
    }
    out
}

fn draw_lesion_specs(rng: &mut Rng, config: &PhantomConfig, n_slices: usize) -> Vec<LesionSpec> {
    let side = config.side as f64;
    let geo = config.geometry();
    let mut weights = [1.0; NUM_CLASSES - 1];
    weights[0] = 1.0 / config.epidural_rarity;
    let subtype = WeightedIndex::new(weights).expect("static weights are valid");

    let n_lesions = if rng.gen_bool(0.5) { 2 } else { 1 };
    (0..n_lesions)
        .map(|_| {
            let class = subtype.sample(rng) + 1;
            let len = rng.gen_range(2..=5.min(n_slices));
            let start = rng.gen_range(0..=n_slices - len);
            let theta = rng.gen_range(0.0..TAU);
            let aux = match class {
                1 => [side * rng.gen_range(0.14..0.20), 0.0],
                2 => [rng.gen_range(0.0..PI), geo.lesion_radius * rng.gen_range(0.35..0.55)],
                3 => [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                4 => [rng.gen_range(0.5..0.9), 0.0],
                _ => [side * rng.gen_range(0.06..0.10), 0.0],
            };
            LesionSpec { class, start, len, theta, aux }
        })
        .collect()
}

// ── Scan generation ─────────────────────────────────────────────────────

pub fn generate_scan(rng: &mut Rng, config: &PhantomConfig) -> Result<GeneratedScan> {
    config.validate()?;
    let side = config.side;
    let geo = config.geometry();
    let n_slices = rng.gen_range(config.slice_range.0..=config.slice_range.1);
    let specs = if rng.gen_bool(config.positive_prob) {
        draw_lesion_specs(rng, config, n_slices)
    } else {
        Vec::new()
    };

    // Base head model, slice by slice, row-major.
    let mut hu = vec![0.0f64; n_slices * side * side];
    for s in 0..n_slices {
        for row in 0..side {
            for col in 0..side {
                let r = (col as f64 - geo.center).hypot(row as f64 - geo.center);
                hu[(s * side + row) * side + col] = if r < geo.skull_inner {
                    rng.gen_range(config.tissue_hu.0..=config.tissue_hu.1)
                } else if r < geo.skull_outer {
                    config.skull_hu
                } else {
                    config.air_hu
                };
            }
        }
    }

    // Plant lesions and record their masks.
    let mut masks: Vec<SliceMasks> =
        (0..n_slices).map(|_| std::array::from_fn(|_| Vec::new())).collect();
    for spec in &specs {
        for i in 0..spec.len {
            let s = spec.start + i;
            let pixels = lesion_pixels(spec, config, span_scale(i, spec.len));
            masks[s][spec.class - 1].extend(&pixels);
        }
    }
    for slice_masks in &mut masks {
        for mask in slice_masks.iter_mut() {
            mask.sort_unstable();
            mask.dedup();
        }
    }
    for (s, slice_masks) in masks.iter().enumerate() {
        let mut painted: Vec<(usize, usize)> = slice_masks.iter().flatten().copied().collect();
        painted.sort_unstable();
        painted.dedup();
        for (row, col) in painted {
            hu[(s * side + row) * side + col] =
                rng.gen_range(config.lesion_hu.0..=config.lesion_hu.1);
        }
    }

    // Acquisition noise over every voxel.
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        for v in &mut hu {
            *v += noise.sample(rng);
        }
    }

    let data: Vec<i16> = hu.iter().map(|&v| v.round().clamp(-1024.0, 3000.0) as i16).collect();
    let labels: Vec<LabelVec> = masks
        .iter()
        .map(|slice_masks| {
            let mut label = [0.0; NUM_CLASSES];
            for (t, mask) in slice_masks.iter().enumerate() {
                label[t + 1] = f64::from(u8::from(!mask.is_empty()));
            }
            label[0] = f64::from(u8::from(label[1..].contains(&1.0)));
            label
        })
        .collect();

    Ok(GeneratedScan {
        volume: HuVolume::new(n_slices, side, side, data)?,
        labels,
        masks,
    })
}

// ── Dataset generation ──────────────────────────────────────────────────

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub scan_id: String,
    pub split: String,
    /// Seed that regenerates this scan exactly.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scan_id.as_str())
            .collect()
    }

    pub fn entry(&self, scan_id: &str) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.scan_id == scan_id)
    }
}

pub fn volume_path(dir: &Path, scan_id: &str) -> PathBuf {
    dir.join(format!("{scan_id}.ctv"))
}

/// Split sizes by rounding the first two fractions; the remainder is the
/// test set.
fn split_counts(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (ft, fv, fe) = fractions;
    if [ft, fv, fe].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("split fractions {fractions:?} outside [0, 1]")));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} sum to {}, not 1",
            ft + fv + fe
        )));
    }
    let n_train = ((n as f64 * ft).round() as usize).min(n);
    let n_val = ((n as f64 * fv).round() as usize).min(n - n_train);
    Ok((n_train, n_val, n - n_train - n_val))
}

/// Writes `n_scans` phantoms to `dir` as CTV volumes plus label sidecars,
/// scan-disjointly split into train/val/test. Every scan derives its own
/// seed from `seed` and its index, so any scan can be regenerated alone.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_scans: usize,
    fractions: (f64, f64, f64),
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if n_scans == 0 {
        return Err(Error::Config("dataset needs at least one scan".into()));
    }
    let (n_train, n_val, _) = split_counts(n_scans, fractions)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let entries: Vec<DatasetEntry> = (0..n_scans)
        .map(|i| DatasetEntry {
            scan_id: format!("scan{i:04}"),
            split: if i < n_train {
                SPLITS[0].into()
            } else if i < n_train + n_val {
                SPLITS[1].into()
            } else {
                SPLITS[2].into()
            },
            seed: derive_seed(seed, i as u64),
        })
        .collect();

    entries.par_iter().try_for_each(|entry| -> Result<()> {
        let mut rng = Rng::seed_from_u64(entry.seed);
        let scan = generate_scan(&mut rng, config)?;
        let volume_file = volume_path(dir, &entry.scan_id);
        write_ctv(&volume_file, &scan.volume)?;
        let rows: Vec<[u8; NUM_CLASSES]> = scan
            .labels
            .iter()
            .map(|l| std::array::from_fn(|t| l[t] as u8))
            .collect();
        let sidecar = LabelSidecar::new(&entry.scan_id, Some(&entry.split), rows)?;
        sidecar.save(&sidecar_path(&volume_file))?;
        Ok(())
    })?;

    Ok(DatasetManifest { entries })
}
