//! Stage two: shrink D-dim slice embeddings to k dims.
//!
//! Three fitting methods — columns with the largest standard deviation,
//! columns ranked by classifier-head weight magnitude (largest or
//! smallest), and PCA. The first two produce an index gather; PCA stores
//! a mean and an orthonormal basis. Fits are deterministic, and a fitted
//! selector is immutable.

use crate::io::Checkpoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Largest,
    Smallest,
}

/// What to fit: the method and the target dimension `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorSpec {
    StdTopK { k: usize },
    HeadWeight { k: usize, mode: WeightMode },
    Pca { k: usize },
}

impl SelectorSpec {
    pub fn k(&self) -> usize {
        match *self {
            SelectorSpec::StdTopK { k }
            | SelectorSpec::HeadWeight { k, .. }
            | SelectorSpec::Pca { k } => k,
        }
    }
}

/// A fitted, immutable dimension reducer.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedSelector {
    /// Gather of a strictly increasing index list.
    Indices { input_dim: usize, indices: Vec<usize> },
    /// Affine map `basis · (x − mean)`; basis rows are orthonormal
    /// eigenvectors, eigenvalues sorted non-increasing.
    Pca { mean: Vec<f64>, basis: Vec<Vec<f64>>, eigenvalues: Vec<f64> },
}

impl FittedSelector {
    pub fn input_dim(&self) -> usize {
        match self {
            FittedSelector::Indices { input_dim, .. } => *input_dim,
            FittedSelector::Pca { mean, .. } => mean.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FittedSelector::Indices { indices, .. } => indices.len(),
            FittedSelector::Pca { basis, .. } => basis.len(),
        }
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                op: "selector_transform",
                msg: format!("input length {} vs fitted dim {}", x.len(), self.input_dim()),
            });
        }
        Ok(match self {
            FittedSelector::Indices { indices, .. } => indices.iter().map(|&j| x[j]).collect(),
            FittedSelector::Pca { mean, basis, .. } => basis
                .iter()
                .map(|row| row.iter().zip(x).zip(mean).map(|((&b, &xi), &mu)| b * (xi - mu)).sum())
                .collect(),
        })
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        match self {
            FittedSelector::Indices { input_dim, indices } => {
                ckpt.add_scalars("selector.input_dim", &[*input_dim as f64])?;
                let idx: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
                ckpt.add_scalars("selector.indices", &idx)
            }
            FittedSelector::Pca { mean, basis, eigenvalues } => {
                let d = mean.len();
                let k = basis.len();
                ckpt.add("selector.mean", &[d], mean.iter().map(|&v| v as f32).collect())?;
                let flat: Vec<f32> =
                    basis.iter().flat_map(|row| row.iter().map(|&v| v as f32)).collect();
                ckpt.add("selector.basis", &[k, d], flat)?;
                ckpt.add_scalars("selector.eigenvalues", eigenvalues)
            }
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.get("selector.indices").is_some() {
            let input_dim = ckpt.scalars("selector.input_dim")?;
            if input_dim.len() != 1 || input_dim[0] < 1.0 {
                return Err(Error::Invalid("selector.input_dim must be one positive value".into()));
            }
            let input_dim = input_dim[0] as usize;
            let indices: Vec<usize> =
                ckpt.scalars("selector.indices")?.iter().map(|&v| v as usize).collect();
            if indices.is_empty() {
                return Err(Error::Invalid("selector.indices is empty".into()));
            }
            if indices.windows(2).any(|w| w[0] >= w[1]) || *indices.last().unwrap() >= input_dim {
                return Err(Error::Invalid(format!(
                    "selector.indices must be strictly increasing and < {input_dim}"
                )));
            }
            return Ok(FittedSelector::Indices { input_dim, indices });
        }
        let (bdims, bdata) = ckpt
            .get("selector.basis")
            .ok_or_else(|| Error::Invalid("checkpoint holds no selector".into()))?;
        if bdims.len() != 2 || bdims[0] == 0 || bdims[1] == 0 {
            return Err(Error::Invalid(format!("selector.basis shape {bdims:?}, want [k, D]")));
        }
        let (k, d) = (bdims[0], bdims[1]);
        let mean = ckpt.scalars("selector.mean")?;
        if mean.len() != d {
            return Err(Error::Invalid(format!("selector.mean length {} vs D={d}", mean.len())));
        }
        let eigenvalues = ckpt.scalars("selector.eigenvalues")?;
        if eigenvalues.len() != k {
            return Err(Error::Invalid(format!(
                "selector.eigenvalues length {} vs k={k}",
                eigenvalues.len()
            )));
        }
        // f32 storage: ordering is checked with float slack.
        for w in eigenvalues.windows(2) {
            if w[1] > w[0] + 1e-5 * w[0].abs().max(1.0) {
                return Err(Error::Invalid("selector.eigenvalues must be non-increasing".into()));
            }
        }
        let basis: Vec<Vec<f64>> = (0..k)
            .map(|i| bdata[i * d..(i + 1) * d].iter().map(|&v| f64::from(v)).collect())
            .collect();
        Ok(FittedSelector::Pca { mean, basis, eigenvalues })
    }
}

fn check_matrix(features: &[f64], n: usize, d: usize) -> Result<()> {
    if n * d != features.len() {
        return Err(Error::Shape {
            op: "selector_fit",
            msg: format!("{n}x{d} matrix needs {} values, got {}", n * d, features.len()),
        });
    }
    if d == 0 {
        return Err(Error::Invalid("selector fit: zero feature dim".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("selector fit: non-finite feature value".into()));
    }
    Ok(())
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::Invalid(format!("selector k={k} out of range 1..={d}")));
    }
    Ok(())
}

/// Indices of the `k` top scores (or bottom, for `Smallest`); ties go to
/// the lower index; output sorted ascending.
fn rank_indices(scores: &[f64], k: usize, mode: WeightMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match mode {
            WeightMode::Largest => scores[b].partial_cmp(&scores[a]).unwrap(),
            WeightMode::Smallest => scores[a].partial_cmp(&scores[b]).unwrap(),
        };
        by_score.then(a.cmp(&b))
    });
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Keep the `k` columns with the largest sample standard deviation
/// (unbiased, N−1 denominator).
pub fn fit_std(features: &[f64], n: usize, d: usize, k: usize) -> Result<FittedSelector> {
    check_matrix(features, n, d)?;
    check_k(k, d)?;
    if n < 2 {
        return Err(Error::Invalid(format!("std selector needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in features.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in features.chunks_exact(d) {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in &mut var {
        *v /= (n - 1) as f64;
    }
    Ok(FittedSelector::Indices {
        input_dim: d,
        indices: rank_indices(&var, k, WeightMode::Largest),
    })
}

/// Keep `k` columns ranked by head-weight magnitude. Each feature is
/// scored by the largest `|weight|` it has toward any of the six classes;
/// `mode` picks the top or bottom of that ranking.
pub fn fit_head_weight(
    head: &[f64],
    classes: usize,
    d: usize,
    k: usize,
    mode: WeightMode,
) -> Result<FittedSelector> {
    check_matrix(head, classes, d)?;
    check_k(k, d)?;
    if classes == 0 {
        return Err(Error::Invalid("head weight matrix has no rows".into()));
    }
    let mut score = vec![0.0f64; d];
    for row in head.chunks_exact(d) {
        for (s, &w) in score.iter_mut().zip(row) {
            *s = s.max(w.abs());
        }
    }
    Ok(FittedSelector::Indices { input_dim: d, indices: rank_indices(&score, k, mode) })
}

/// PCA onto the top `k` principal components.
///
/// Mean-centers the rows, builds the sample covariance, and runs a full
/// cyclic Jacobi eigendecomposition. Eigenvalues come back non-increasing;
/// each basis row has unit norm with its largest-magnitude entry positive.
pub fn fit_pca(features: &[f64], n: usize, d: usize, k: usize) -> Result<FittedSelector> {
    check_matrix(features, n, d)?;
    check_k(k, d)?;
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k > n - 1 {
        return Err(Error::Invalid(format!("PCA k={k} exceeds row budget N-1={}", n - 1)));
    }

    let mut mean = vec![0.0; d];
    for row in features.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = vec![0.0; d * d];
    for row in features.chunks_exact(d) {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let (eigenvalues, vectors) = jacobi_eigen(cov, d)?;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap().then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(k);
    let mut top = Vec::with_capacity(k);
    for &col in order.iter().take(k) {
        let lambda = eigenvalues[col];
        if lambda < -1e-10 {
            return Err(Error::Invalid(format!("covariance eigenvalue {lambda} is negative")));
        }
        let mut row: Vec<f64> = (0..d).map(|i| vectors[i * d + col]).collect();
        let lead = (0..d).fold(0, |best, i| if row[i].abs() > row[best].abs() { i } else { best });
        if row[lead] < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        basis.push(row);
        top.push(lambda);
    }
    Ok(FittedSelector::Pca { mean, basis, eigenvalues: top })
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Returns `(diagonal, V)` with eigenvectors in the columns of
/// the row-major `V`.
pub fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    const MAX_SWEEPS: usize = 100;
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                s += a[p * d + q] * a[p * d + q];
            }
        }
        s.sqrt()
    };

    for _ in 0..MAX_SWEEPS {
        if off(&a) <= 1e-13 * scale {
            let evals = (0..d).map(|i| a[i * d + i]).collect();
            return Ok((evals, v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 * scale {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = a[p * d + p];
                let aqq = a[q * d + q];
                a[p * d + p] = app - t * apq;
                a[q * d + q] = aqq + t * apq;
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for i in 0..d {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[p * d + i] = a[i * d + p];
                    a[i * d + q] = s * aip + c * aiq;
                    a[q * d + i] = a[i * d + q];
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    Err(Error::Invalid(format!(
        "Jacobi eigendecomposition did not converge in {MAX_SWEEPS} sweeps, residual {:.3e}",
        off(&a)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> crate::Rng {
        crate::Rng::seed_from_u64(seed)
    }

    /// Eigenvalues of a symmetric matrix straight from the characteristic
    /// polynomial: closed form at 2x2, trigonometric solve at 3x3. The
    /// independent oracle for `jacobi_eigen`.
    fn charpoly_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
        let mut evals = match d {
            2 => {
                let (a11, a12, a22) = (a[0], a[1], a[3]);
                let tr = a11 + a22;
                let det = a11 * a22 - a12 * a12;
                let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
                vec![(tr + disc) / 2.0, (tr - disc) / 2.0]
            }
            3 => {
                let p1 = a[1] * a[1] + a[2] * a[2] + a[5] * a[5];
                if p1 == 0.0 {
                    vec![a[0], a[4], a[8]]
                } else {
                    let q = (a[0] + a[4] + a[8]) / 3.0;
                    let p2 = (a[0] - q).powi(2) + (a[4] - q).powi(2) + (a[8] - q).powi(2)
                        + 2.0 * p1;
                    let p = (p2 / 6.0).sqrt();
                    let b: Vec<f64> = (0..9)
                        .map(|i| (a[i] - if i % 4 == 0 { q } else { 0.0 }) / p)
                        .collect();
                    let detb = b[0] * (b[4] * b[8] - b[5] * b[7])
                        - b[1] * (b[3] * b[8] - b[5] * b[6])
                        + b[2] * (b[3] * b[7] - b[4] * b[6]);
                    let r = (detb / 2.0).clamp(-1.0, 1.0);
                    let phi = r.acos() / 3.0;
                    let e1 = q + 2.0 * p * phi.cos();
                    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
                    vec![e1, 3.0 * q - e1 - e3, e3]
                }
            }
            _ => panic!("oracle handles d=2,3"),
        };
        evals.sort_by(|x, y| y.partial_cmp(x).unwrap());
        evals
    }

    fn random_covariance(d: usize, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut mean = vec![0.0; d];
        for row in data.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for row in data.chunks_exact(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        (data, cov)
    }

    #[test]
    fn std_picks_high_variance_columns() {
        // Column stds are (0, 1, 2).
        let m = vec![
            5.0, 0.0, 0.0, //
            5.0, 1.0, 2.0, //
            5.0, 2.0, 4.0,
        ];
        let sel = fit_std(&m, 3, 3, 2).unwrap();
        assert_eq!(sel, FittedSelector::Indices { input_dim: 3, indices: vec![1, 2] });
        let all = fit_std(&m, 3, 3, 3).unwrap();
        assert_eq!(all, FittedSelector::Indices { input_dim: 3, indices: vec![0, 1, 2] });
    }

    #[test]
    fn std_ties_break_to_lower_index() {
        let m = vec![1.0; 12]; // constant 4x3: all stds zero
        let sel = fit_std(&m, 4, 3, 2).unwrap();
        assert_eq!(sel, FittedSelector::Indices { input_dim: 3, indices: vec![0, 1] });
    }

    #[test]
    fn std_rejects_bad_k_and_small_n() {
        let m = vec![0.0; 6];
        assert!(fit_std(&m, 2, 3, 4).is_err());
        assert!(fit_std(&m, 2, 3, 0).is_err());
        assert!(fit_std(&m[..3], 1, 3, 1).is_err());
    }

    #[test]
    fn std_is_row_order_invariant() {
        let mut r = rng(11);
        let d = 6;
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| (0..d).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
        let flat = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().flatten().copied().collect() };
        let a = fit_std(&flat(&rows), 20, d, 3).unwrap();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(2, 9);
        let b = fit_std(&flat(&shuffled), 20, d, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_weight_modes() {
        // Score per column is max |w| over rows: (1, 2, 3).
        let h: Vec<f64> = (0..6).flat_map(|_| [1.0, -2.0, 3.0]).collect();
        let largest = fit_head_weight(&h, 6, 3, 1, WeightMode::Largest).unwrap();
        assert_eq!(largest, FittedSelector::Indices { input_dim: 3, indices: vec![2] });

        let mut h2 = h.clone();
        for t in 0..6 {
            h2[t * 3 + 1] = 0.0; // column 1 all zeros
        }
        let smallest = fit_head_weight(&h2, 6, 3, 1, WeightMode::Smallest).unwrap();
        assert_eq!(smallest, FittedSelector::Indices { input_dim: 3, indices: vec![1] });
    }

    #[test]
    fn head_weight_modes_partition_distinct_scores() {
        let mut r = rng(7);
        let d = 10;
        // Distinct scores by construction.
        let mut h = vec![0.0; 6 * d];
        for j in 0..d {
            h[j] = (j as f64 + 1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let lo = fit_head_weight(&h, 6, d, d / 2, WeightMode::Smallest).unwrap();
        let hi = fit_head_weight(&h, 6, d, d / 2, WeightMode::Largest).unwrap();
        let (FittedSelector::Indices { indices: a, .. }, FittedSelector::Indices { indices: b, .. }) =
            (lo, hi)
        else {
            panic!("index selectors expected");
        };
        let mut union: Vec<usize> = a.into_iter().chain(b).collect();
        union.sort_unstable();
        assert_eq!(union, (0..d).collect::<Vec<_>>());
    }

    #[test]
    fn pca_line_fit() {
        // Points on y=x: single component along (1,1)/sqrt(2).
        let m = vec![-1.0, -1.0, 0.0, 0.0, 1.0, 1.0];
        let sel = fit_pca(&m, 3, 2, 1).unwrap();
        let FittedSelector::Pca { basis, eigenvalues, .. } = &sel else { panic!() };
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((basis[0][0] - r).abs() < 1e-6 && (basis[0][1] - r).abs() < 1e-6);
        assert!((eigenvalues[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn pca_trace_conservation() {
        let d = 5;
        let (data, cov) = random_covariance(d, 40, 3);
        let sel = fit_pca(&data, 40, d, d - 1).unwrap();
        // k=D needs N-1>=D, satisfied here; refit with full k.
        let sel_full = fit_pca(&data, 40, d, d).unwrap();
        let FittedSelector::Pca { eigenvalues, .. } = &sel_full else { panic!() };
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        assert!((eigenvalues.iter().sum::<f64>() - trace).abs() < 1e-8);
        let FittedSelector::Pca { eigenvalues: top, .. } = &sel else { panic!() };
        assert!(top.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_matches_charpoly_oracle_on_small_covariances() {
        for seed in 0..20u64 {
            for &d in &[2usize, 3] {
                let (data, cov) = random_covariance(d, 12, 1000 + seed * 10 + d as u64);
                let sel = fit_pca(&data, 12, d, d).unwrap();
                let FittedSelector::Pca { basis, eigenvalues, .. } = &sel else { panic!() };
                let want = charpoly_eigenvalues(&cov, d);
                for (got, want) in eigenvalues.iter().zip(&want) {
                    assert!((got - want).abs() < 1e-8, "d={d} seed={seed}: {got} vs {want}");
                }
                // Eigen equation: C v = lambda v for every basis row.
                for (row, &lambda) in basis.iter().zip(eigenvalues) {
                    for i in 0..d {
                        let cv: f64 = (0..d).map(|j| cov[i * d + j] * row[j]).sum();
                        assert!((cv - lambda * row[i]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn pca_isotropic_eigenvalues_near_one() {
        let mut r = rng(42);
        let (n, d) = (5000, 4);
        let data: Vec<f64> =
            (0..n * d).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let sel = fit_pca(&data, n, d, d).unwrap();
        let FittedSelector::Pca { eigenvalues, .. } = &sel else { panic!() };
        for &e in eigenvalues {
            assert!((e - 1.0).abs() < 0.15, "eigenvalue {e}");
        }
    }

    #[test]
    fn pca_basis_is_orthonormal() {
        let d = 8;
        let (data, _) = random_covariance(d, 50, 9);
        let sel = fit_pca(&data, 50, d, d).unwrap();
        let FittedSelector::Pca { basis, .. } = &sel else { panic!() };
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "rows {i},{j}: {dot}");
            }
        }
        // Sign convention: largest-magnitude entry positive.
        for row in basis {
            let lead = (0..d).fold(0, |b, i| if row[i].abs() > row[b].abs() { i } else { b });
            assert!(row[lead] > 0.0);
        }
    }

    #[test]
    fn pca_reconstruction_error_non_increasing_in_k() {
        let d = 6;
        let (data, _) = random_covariance(d, 30, 21);
        let x: Vec<f64> = data[..d].to_vec();
        let mut last = f64::INFINITY;
        for k in 1..=d {
            let sel = fit_pca(&data, 30, d, k).unwrap();
            let FittedSelector::Pca { mean, basis, .. } = &sel else { panic!() };
            let z = sel.transform(&x).unwrap();
            let mut err = 0.0;
            for i in 0..d {
                let recon: f64 = basis.iter().zip(&z).map(|(row, &c)| row[i] * c).sum();
                err += (x[i] - mean[i] - recon).powi(2);
            }
            assert!(err.sqrt() <= last + 1e-9, "k={k}: {} > {last}", err.sqrt());
            last = err.sqrt();
        }
        assert!(last < 1e-8); // k=D reconstructs exactly
    }

    #[test]
    fn transform_gather_and_centering() {
        let sel = FittedSelector::Indices { input_dim: 3, indices: vec![0, 2] };
        assert_eq!(sel.transform(&[5.0, 6.0, 7.0]).unwrap(), vec![5.0, 7.0]);
        assert!(sel.transform(&[1.0, 2.0]).is_err());

        let d = 4;
        let (data, _) = random_covariance(d, 25, 33);
        let sel = fit_pca(&data, 25, d, d).unwrap();
        let FittedSelector::Pca { mean, .. } = &sel else { panic!() };
        let at_mean = sel.transform(&mean.clone()).unwrap();
        assert!(at_mean.iter().all(|v| v.abs() < 1e-10));
        // Full-rank orthonormal basis preserves the centered norm.
        let x: Vec<f64> = data[d..2 * d].to_vec();
        let z = sel.transform(&x).unwrap();
        let nx: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>().sqrt();
        let nz: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - nz).abs() < 1e-8);
    }

    #[test]
    fn transform_is_linear_in_the_centered_argument() {
        let d = 5;
        let (data, _) = random_covariance(d, 30, 55);
        let sel = fit_pca(&data, 30, d, 3).unwrap();
        let FittedSelector::Pca { mean, .. } = &sel else { panic!() };
        let x: Vec<f64> = data[..d].to_vec();
        let y: Vec<f64> = data[d..2 * d].to_vec();
        let alpha = 0.3;
        let blend: Vec<f64> = (0..d)
            .map(|i| mean[i] + alpha * (x[i] - mean[i]) + (1.0 - alpha) * (y[i] - mean[i]))
            .collect();
        let tx = sel.transform(&x).unwrap();
        let ty = sel.transform(&y).unwrap();
        let tb = sel.transform(&blend).unwrap();
        for i in 0..3 {
            assert!((tb[i] - (alpha * tx[i] + (1.0 - alpha) * ty[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_k_must_fit_rank_budget() {
        let d = 4;
        let (data, _) = random_covariance(d, 3, 70);
        assert!(fit_pca(&data, 3, d, 3).is_err()); // k > N-1
        assert!(fit_pca(&data, 3, d, 2).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_both_variants() {
        let idx = FittedSelector::Indices { input_dim: 7, indices: vec![1, 4, 6] };
        let mut ckpt = Checkpoint::new();
        idx.to_checkpoint(&mut ckpt).unwrap();
        assert_eq!(FittedSelector::from_checkpoint(&ckpt).unwrap(), idx);

        let d = 4;
        let (data, _) = random_covariance(d, 20, 81);
        let pca = fit_pca(&data, 20, d, 2).unwrap();
        let mut ckpt = Checkpoint::new();
        pca.to_checkpoint(&mut ckpt).unwrap();
        let back = FittedSelector::from_checkpoint(&ckpt).unwrap();
        let (FittedSelector::Pca { mean, basis, eigenvalues },
             FittedSelector::Pca { mean: m2, basis: b2, eigenvalues: e2 }) = (&pca, &back)
        else {
            panic!()
        };
        for (a, b) in mean.iter().zip(m2) {
            assert!((a - b).abs() < 1e-6);
        }
        for (ra, rb) in basis.iter().zip(b2) {
            for (a, b) in ra.iter().zip(rb) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        for (a, b) in eigenvalues.iter().zip(e2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn corrupt_selector_entries_rejected() {
        let mut ckpt = Checkpoint::new();
        ckpt.add_scalars("selector.input_dim", &[5.0]).unwrap();
        ckpt.add_scalars("selector.indices", &[3.0, 1.0]).unwrap(); // not increasing
        assert!(FittedSelector::from_checkpoint(&ckpt).is_err());

        let mut ckpt = Checkpoint::new();
        ckpt.add_scalars("selector.input_dim", &[3.0]).unwrap();
        ckpt.add_scalars("selector.indices", &[1.0, 5.0]).unwrap(); // out of range
        assert!(FittedSelector::from_checkpoint(&ckpt).is_err());

        assert!(FittedSelector::from_checkpoint(&Checkpoint::new()).is_err());
    }
}
