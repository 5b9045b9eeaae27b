//! Pixel-statistics Fréchet distance (pfd).
//!
//! Each patch maps to 12 numbers, four per channel:
//!
//! * mean,
//! * population standard deviation,
//! * gradient energy: forward differences `gx`, `gy` (zero past the last
//!   row/column), magnitude `sqrt(gx² + gy²)`, averaged within 2×2 blocks,
//!   then averaged over blocks,
//! * high-frequency energy: `mean (x - up2(avgpool2(x)))²` with
//!   nearest-neighbour `up2`.
//!
//! A set of patches is summarized by the mean and covariance of its
//! features; two summaries are compared with the Fréchet distance between
//! Gaussians.

use crate::error::{invalid, Result};

pub const FEATURE_DIM: usize = 12;

/// Features of one planar RGB patch `[3, side, side]` (side even).
pub fn features(patch: &[f32], side: usize) -> Result<[f64; FEATURE_DIM]> {
    if side < 2 || !side.is_multiple_of(2) || patch.len() != 3 * side * side {
        return invalid(format!("features need an even-sided RGB patch, got side {side}"));
    }
    let n = side * side;
    let mut out = [0.0; FEATURE_DIM];
    for c in 0..3 {
        let x: Vec<f64> = patch[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;

        let at = |i: usize, j: usize| x[i * side + j];
        let mag = |i: usize, j: usize| {
            let gx = if j + 1 < side { at(i, j + 1) - at(i, j) } else { 0.0 };
            let gy = if i + 1 < side { at(i + 1, j) - at(i, j) } else { 0.0 };
            (gx * gx + gy * gy).sqrt()
        };
        let half = side / 2;
        let mut grad = 0.0;
        let mut hf = 0.0;
        for bi in 0..half {
            for bj in 0..half {
                let cells = [
                    (2 * bi, 2 * bj),
                    (2 * bi, 2 * bj + 1),
                    (2 * bi + 1, 2 * bj),
                    (2 * bi + 1, 2 * bj + 1),
                ];
                grad += cells.iter().map(|&(i, j)| mag(i, j)).sum::<f64>() / 4.0;
                let pooled = cells.iter().map(|&(i, j)| at(i, j)).sum::<f64>() / 4.0;
                hf += cells.iter().map(|&(i, j)| (at(i, j) - pooled).powi(2)).sum::<f64>();
            }
        }
        out[c] = mean;
        out[3 + c] = var.sqrt();
        out[6 + c] = grad / (half * half) as f64;
        out[9 + c] = hf / n as f64;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub dim: usize,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance; needs at least two rows.
    pub fn from_features(rows: &[[f64; FEATURE_DIM]]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return invalid("feature statistics need at least two samples");
        }
        let d = FEATURE_DIM;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        Ok(Self { mean, cov, dim: d })
    }

    /// Statistics over planar patches of one side.
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a [f32]>, side: usize) -> Result<Self> {
        let rows = patches
            .into_iter()
            .map(|p| features(p, side))
            .collect::<Result<Vec<_>>>()?;
        Self::from_features(&rows)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and row-major eigenvectors (column `k` pairs with
/// eigenvalue `k`).
pub fn jacobi_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return invalid(format!("matrix has {} entries, expected {}", a.len(), n * n));
    }
    check_symmetric(a, n)?;
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[i * n + i]).collect(), v))
}

fn check_symmetric(a: &[f64], n: usize) -> Result<()> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-9 * scale {
                return invalid(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(a, n)?;
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vecs[i * n + k] * roots[k] * vecs[j * n + k]).sum();
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// `|μa - μb|² + Tr(Ca + Cb - 2 (Ca^½ Cb Ca^½)^½)`, never negative.
pub fn pfd(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return invalid("feature statistics of different dimension");
    }
    let n = a.dim;
    check_symmetric(&a.cov, n)?;
    check_symmetric(&b.cov, n)?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sqrtm_psd(&a.cov, n)?;
    let mut inner = matmul(&matmul(&sa, &b.cov, n), &sa, n);
    // symmetrize away rounding before the second decomposition
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = avg;
            inner[j * n + i] = avg;
        }
    }
    let (vals, _) = jacobi_eigen(&inner, n)?;
    let tr_sqrt: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr = |c: &[f64]| (0..n).map(|i| c[i * n + i]).sum::<f64>();
    Ok((mean_term + tr(&a.cov) + tr(&b.cov) - 2.0 * tr_sqrt).max(0.0))
}

/// Median of a non-empty sample.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
