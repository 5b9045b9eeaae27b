//! Adversarial losses, the directional gradient penalty for D, and the
//! multiscale patch regularizer tying a stage to its frozen predecessor.

use serde::{Deserialize, Serialize};

use crate::coords::CoordGrid;
use crate::error::{invalid, Result};
use crate::generator::{GenScopes, GeneratorParams};
use crate::tensor::{Rng, Scope, Tape, Tensor, Var};

/// Non-saturating generator loss `mean softplus(-fake)`.
pub fn adv_loss_g(tape: &mut Tape, fake_logits: Var) -> Result<Var> {
    let neg = tape.scale(fake_logits, -1.0)?;
    let sp = tape.softplus(neg)?;
    tape.mean(sp)
}

/// Logistic discriminator loss `mean softplus(-real) + mean softplus(fake)`.
pub fn adv_loss_d(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let neg = tape.scale(real_logits, -1.0)?;
    let r = tape.softplus(neg)?;
    let r = tape.mean(r)?;
    let f = tape.softplus(fake_logits)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// One random unit direction per sample, flattened like `x`.
pub fn unit_directions(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let batch = shape[0];
    let dim: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        let v = rng.normal_vec(dim);
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        out.extend(v.iter().map(|&x| (x as f64 / norm) as f32));
    }
    Tensor::from_vec(shape, out)
}

/// Finite-difference surrogate of the R1 penalty:
/// `mean_b (D(x_b + eps·u_b) - D(x_b))² / eps²` with `u_b` a random unit
/// direction. `disc` maps a batch var to `[B, 1]` logits.
pub fn d_reg<F>(tape: &mut Tape, real: Var, eps: f32, rng: &mut Rng, mut disc: F) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return invalid(format!("d_reg eps must be positive, got {eps}"));
    }
    let x = tape.value(real).clone();
    let mut shifted = unit_directions(x.shape(), rng)?;
    for (s, &v) in shifted.data_mut().iter_mut().zip(x.data()) {
        *s = v + eps * *s;
    }
    let shifted = tape.constant(shifted);
    let base = disc(tape, real)?;
    let moved = disc(tape, shifted)?;
    let sq = tape.sq_diff_mean(moved, base)?;
    tape.scale(sq, 1.0 / (eps * eps))
}

/// Norm used by the patch regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchNorm {
    #[default]
    L2,
    SquaredL2,
}

/// Pixel cell `(row, col, extent)` covered by each 2×2 pooled block of
/// `window`, in pooled row-major order.
pub fn pooled_footprints(window: &CoordGrid) -> Vec<(usize, usize, usize)> {
    let (r0, c0) = window.origin_px();
    let s = window.stride();
    let half = window.side() / 2;
    let mut out = Vec::with_capacity(half * half);
    for i in 0..half {
        for j in 0..half {
            out.push((r0 + 2 * i * s, c0 + 2 * j * s, 2 * s));
        }
    }
    out
}

/// Pixel cell `(row, col, extent)` owned by each lattice point of `grid`.
pub fn lattice_footprints(grid: &CoordGrid) -> Vec<(usize, usize, usize)> {
    let s = grid.stride();
    grid.pixels().into_iter().map(|(r, c)| (r, c, s)).collect()
}

/// Norm of the difference between the 2×2-average-pooled current patch and
/// a target, averaged over the batch.
///
/// `fake` holds generator rows `[B·side², 3]`; `target` is `[B, 3, side/2, side/2]`.
pub fn patch_reg_against(
    tape: &mut Tape,
    fake: Var,
    batch: usize,
    side: usize,
    target: Var,
    norm: PatchNorm,
) -> Result<Var> {
    let img = tape.rows_to_nchw(fake, batch, side)?;
    let pooled = tape.avg_pool2(img)?;
    let diff = tape.sub(pooled, target)?;
    let sq = tape.mul(diff, diff)?;
    let per = 3 * (side / 2) * (side / 2);
    let sq = tape.reshape(sq, &[batch, per])?;
    let per_sample = tape.row_sum(sq)?;
    let per_sample = match norm {
        PatchNorm::L2 => tape.sqrt(per_sample)?,
        PatchNorm::SquaredL2 => per_sample,
    };
    tape.mean(per_sample)
}

/// Patch regularizer: `fake` is the current generator's output at `window`
/// for latents `z`; the target is the frozen previous-stage generator
/// evaluated with the same `z` at the parent window.
pub fn patch_reg(
    tape: &mut Tape,
    fake: Var,
    frozen_prev: &GeneratorParams,
    z: &Tensor,
    window: &CoordGrid,
    norm: PatchNorm,
) -> Result<Var> {
    let parent = window.parent_window()?;
    if pooled_footprints(window) != lattice_footprints(&parent) {
        return invalid("pooled patch and parent window footprints disagree");
    }
    let batch = z.shape()[0];
    let outer = tape.set_scope(Scope::Regularizer);
    let vars = frozen_prev.bind(tape, false)?;
    let zv = tape.constant(z.clone());
    let prev = frozen_prev.generate(tape, &vars, zv, &parent.points(), GenScopes::all(Scope::Regularizer))?;
    let target = tape.rows_to_nchw(prev, batch, parent.side())?;
    let out = patch_reg_against(tape, fake, batch, window.side(), target, norm);
    tape.set_scope(outer);
    out
}
