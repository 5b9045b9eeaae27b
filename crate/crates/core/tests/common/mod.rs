#![allow(dead_code)]

pub mod models;
pub mod opcases;
pub mod props;
pub mod reference;

use inrpatch_core::tensor::{Rng, Tensor};

/// Denominator floor for elementwise relative error, so entries whose true
/// derivative is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn rand_tensor(shape: &[usize], rng: &mut Rng, scale: f32) -> Tensor {
    let mut t = Tensor::randn_with(shape, rng).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v *= scale);
    t
}

/// Central differences of `f` around `x` (f64 throughout).
/// Entries for which `valid(x+, x-)` is false (e.g. a kink was crossed) are `None`.
pub fn central_diff(
    x: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
    mut valid: impl FnMut(&[f64], &[f64]) -> bool,
) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        xm[i] = x[i] - eps;
        out.push(if valid(&xp, &xm) {
            Some((f(&xp) - f(&xm)) / (2.0 * eps))
        } else {
            None
        });
        xp[i] = x[i];
        xm[i] = x[i];
    }
    out
}

/// Largest relative error between analytic gradient `a` and numeric `n`,
/// ignoring skipped entries; also returns how many entries were skipped.
pub fn max_rel_err(a: &Tensor, n: &[Option<f64>]) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for (&av, nv) in a.data().iter().zip(n) {
        match nv {
            Some(nv) => worst = worst.max(rel_err(av as f64, *nv)),
            None => skipped += 1,
        }
    }
    (worst, skipped)
}
