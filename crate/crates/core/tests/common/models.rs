//! f64 reference forwards of the generator, discriminator and patch
//! regularizer, and finite-difference checks of the library's gradients.
//!
//! The references read parameter values only; all arithmetic is written out
//! here with plain loops.

use std::collections::HashMap;

use super::{central_diff, max_rel_err, rand_tensor, reference as r, to_f64, FD_EPS};
use inrpatch_core::coords::{make_grid, StageId};
use inrpatch_core::discriminator::{DiscConfig, DiscParams};
use inrpatch_core::generator::{GenScopes, GeneratorConfig, GeneratorParams, InitStrategy};
use inrpatch_core::losses::{adv_loss_g, patch_reg, PatchNorm};
use inrpatch_core::tensor::{Rng, Tape, Tensor, Var};

const SLOPE: f64 = 0.2;

/// Result of one gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Parameter vectors keyed by name, as f64.
pub struct Flat {
    names: Vec<String>,
    shapes: Vec<usize>,
}

impl Flat {
    fn new(named: &[(String, &Tensor)]) -> Self {
        Self {
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            shapes: named.iter().map(|(_, t)| t.len()).collect(),
        }
    }

    fn pack(named: &[(String, &Tensor)]) -> Vec<f64> {
        named.iter().flat_map(|(_, t)| to_f64(t)).collect()
    }

    fn unpack<'a>(&self, x: &'a [f64]) -> HashMap<&str, &'a [f64]> {
        let mut out = HashMap::new();
        let mut at = 0;
        for (n, &len) in self.names.iter().zip(&self.shapes) {
            out.insert(n.as_str(), &x[at..at + len]);
            at += len;
        }
        out
    }
}

fn leaky_rec(v: f64, signs: &mut Vec<bool>) -> f64 {
    signs.push(v > 0.0);
    r::leaky(v, SLOPE)
}

/// Generator output rows `[B·n, 3]` and the sign of every leaky-ReLU input.
pub fn gen_forward(
    g: &GeneratorParams,
    p: &HashMap<&str, &[f64]>,
    z: &[f64],
    batch: usize,
    points: &[[f64; 2]],
    signs: &mut Vec<bool>,
) -> Vec<f64> {
    let c = &g.config;
    let (zd, wd, e, width) = (c.z_dim, c.w_dim, c.embed_pairs, c.width);
    let basis = to_f64(&g.fourier_basis);
    let res = g.resolution as f64;
    let n = g.density();
    let stride = (g.resolution / n) as f64;
    let cdim = if g.const_grid.is_some() { c.const_dim } else { 0 };
    let mut out = Vec::with_capacity(batch * points.len() * 3);
    for b in 0..batch {
        let zb = &z[b * zd..(b + 1) * zd];
        let h: Vec<f64> = r::matmul(zb, p["mapping.0.weight"], 1, zd, wd)
            .iter()
            .zip(p["mapping.0.bias"])
            .map(|(v, bias)| leaky_rec(v + bias, signs))
            .collect();
        let w: Vec<f64> = r::matmul(&h, p["mapping.1.weight"], 1, wd, wd)
            .iter()
            .zip(p["mapping.1.bias"])
            .map(|(v, bias)| v + bias)
            .collect();
        let scales: Vec<Vec<f64>> = (0..c.layers)
            .map(|l| {
                r::matmul(&w, p[format!("synth.{l}.mod_weight").as_str()], 1, wd, width)
                    .iter()
                    .zip(p[format!("synth.{l}.mod_bias").as_str()])
                    .map(|(v, bias)| v + bias)
                    .collect()
            })
            .collect();
        for pt in points {
            let x = 2.0 * pt[1] / (res - 1.0) - 1.0;
            let y = 2.0 * pt[0] / (res - 1.0) - 1.0;
            let mut feat = Vec::with_capacity(2 * e + cdim);
            let proj: Vec<f64> = (0..e).map(|k| x * basis[2 * k] + y * basis[2 * k + 1]).collect();
            feat.extend(proj.iter().map(|v| v.sin()));
            feat.extend(proj.iter().map(|v| v.cos()));
            if cdim > 0 {
                let grid = p["const_grid"];
                let u = (pt[0] / stride).clamp(0.0, (n - 1) as f64);
                let v = (pt[1] / stride).clamp(0.0, (n - 1) as f64);
                let (i0, j0) = (u.floor() as usize, v.floor() as usize);
                let (i1, j1) = ((i0 + 1).min(n - 1), (j0 + 1).min(n - 1));
                let (fu, fv) = (u - i0 as f64, v - j0 as f64);
                for d in 0..cdim {
                    let at = |i: usize, j: usize| grid[(i * n + j) * cdim + d];
                    feat.push(
                        (1.0 - fu) * (1.0 - fv) * at(i0, j0)
                            + (1.0 - fu) * fv * at(i0, j1)
                            + fu * (1.0 - fv) * at(i1, j0)
                            + fu * fv * at(i1, j1),
                    );
                }
            }
            let mut hcur = feat;
            for (l, s) in scales.iter().enumerate() {
                let fan_in = hcur.len();
                let pre = r::matmul(&hcur, p[format!("synth.{l}.weight").as_str()], 1, fan_in, width);
                hcur = pre
                    .iter()
                    .zip(p[format!("synth.{l}.bias").as_str()])
                    .zip(s)
                    .map(|((v, bias), sc)| leaky_rec((v + bias) * sc, signs))
                    .collect();
            }
            let rgb = r::matmul(&hcur, p["to_rgb.weight"], 1, width, 3);
            out.extend(rgb.iter().zip(p["to_rgb.bias"]).map(|(v, bias)| r::sigmoid(v + bias)));
        }
    }
    out
}

/// Discriminator logits and leaky-ReLU input signs for `x: [B, 3, s, s]`.
pub fn disc_forward(
    d: &DiscParams,
    p: &HashMap<&str, &[f64]>,
    x: &[f64],
    batch: usize,
    signs: &mut Vec<bool>,
) -> Vec<f64> {
    let k = d.config.kernel;
    let mut h = x.to_vec();
    let (mut c, mut s) = (3, d.side);
    for (l, &f) in d.config.channels.iter().enumerate() {
        let (o, oh, _) = r::conv2d(
            &h,
            p[format!("conv.{l}.weight").as_str()],
            batch,
            c,
            s,
            s,
            f,
            k,
            2,
            k / 2,
        );
        h = o.iter().map(|&v| leaky_rec(v, signs)).collect();
        c = f;
        s = oh;
    }
    let flat = c * s * s;
    r::matmul(&h, p["head.weight"], batch, flat, 1)
        .iter()
        .map(|v| v + p["head.bias"][0])
        .collect()
}

fn rows_to_nchw(rows: &[f64], batch: usize, side: usize) -> Vec<f64> {
    let n = side * side;
    let mut out = vec![0.0; rows.len()];
    for b in 0..batch {
        for q in 0..n {
            for c in 0..3 {
                out[(b * 3 + c) * n + q] = rows[(b * n + q) * 3 + c];
            }
        }
    }
    out
}

fn small_gen_config() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 4,
        w_dim: 3,
        width: 5,
        layers: 2,
        embed_pairs: 3,
        fourier_sigma: 2.0,
        const_dim: 2,
    }
}

/// Generator with non-trivial biases so every parameter matters.
fn small_gen(stage: StageId, seed: u64) -> GeneratorParams {
    let mut rng = Rng::new(seed);
    let mut g = GeneratorParams::init(small_gen_config(), 16, stage, InitStrategy::Nearest, &mut rng).unwrap();
    for (name, t) in g.named_mut() {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    g
}

fn report(grads: &[(Tensor, Vec<Option<f64>>)]) -> GradReport {
    let mut out = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (a, n) in grads {
        let (e, s) = max_rel_err(a, n);
        out.max_rel_err = out.max_rel_err.max(e);
        out.skipped += s;
        out.checked += n.len() - s;
    }
    out
}

/// Splits a flat numeric gradient into per-parameter pieces matching `vars`.
fn split(flat: &Flat, numeric: Vec<Option<f64>>) -> Vec<Vec<Option<f64>>> {
    let mut it = numeric.into_iter();
    flat.shapes.iter().map(|&len| it.by_ref().take(len).collect()).collect()
}

fn analytic(tape: &mut Tape, loss: Var, vars: &[(String, Var)]) -> Vec<Tensor> {
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|(_, v)| grads.get(*v).unwrap().clone()).collect()
}

/// `Σ out ⊙ proj` over generator rows on a mix of lattice, half-lattice
/// and outside points; checked against every generator parameter.
pub fn generator_check(seed: u64) -> GradReport {
    let g = small_gen(StageId::One, seed);
    let mut rng = Rng::new(seed ^ 0x9e37);
    let batch = 2;
    let mut points = make_grid(16, 16, 4).unwrap().points();
    points.extend([[2.0, 6.0], [5.0, 13.0], [-3.0, 17.0]]);
    let z = rand_tensor(&[batch, 4], &mut rng, 1.0);
    let proj = rand_tensor(&[batch * points.len(), 3], &mut rng, 1.0);

    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, true).unwrap();
    let zv = tape.constant(z.clone());
    let out = g.generate(&mut tape, &vars, zv, &points, GenScopes::TRAINING).unwrap();
    let pv = tape.constant(proj.clone());
    let prod = tape.mul(out, pv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let a = analytic(&mut tape, loss, vars.named());

    let named = g.named();
    let flat = Flat::new(&named);
    let x0 = Flat::pack(&named);
    let (z64, p64) = (to_f64(&z), to_f64(&proj));
    let eval = |x: &[f64], signs: &mut Vec<bool>| {
        let out = gen_forward(&g, &flat.unpack(x), &z64, batch, &points, signs);
        out.iter().zip(&p64).map(|(o, q)| o * q).sum::<f64>()
    };
    let numeric = fd(&x0, &eval);
    report(&a.into_iter().zip(split(&flat, numeric)).collect::<Vec<_>>())
}

/// `Σ w²` for the mapping output, against the mapping parameters.
pub fn mapping_check(seed: u64) -> GradReport {
    let g = small_gen(StageId::One, seed);
    let mut rng = Rng::new(seed ^ 0x51);
    let z = rand_tensor(&[3, 4], &mut rng, 1.0);
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, true).unwrap();
    let zv = tape.constant(z.clone());
    let w = g.mapping_forward(&mut tape, &vars, zv).unwrap();
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let mapping_vars: Vec<(String, Var)> = vars
        .named()
        .iter()
        .filter(|(n, _)| n.starts_with("mapping"))
        .cloned()
        .collect();
    let a = analytic(&mut tape, loss, &mapping_vars);

    let named: Vec<(String, &Tensor)> = g
        .named()
        .into_iter()
        .filter(|(n, _)| n.starts_with("mapping"))
        .collect();
    let flat = Flat::new(&named);
    let x0 = Flat::pack(&named);
    let z64 = to_f64(&z);
    let eval = |x: &[f64], signs: &mut Vec<bool>| {
        let p = flat.unpack(x);
        let mut total = 0.0;
        for b in 0..3 {
            let h: Vec<f64> = r::matmul(&z64[b * 4..(b + 1) * 4], p["mapping.0.weight"], 1, 4, 3)
                .iter()
                .zip(p["mapping.0.bias"])
                .map(|(v, bias)| leaky_rec(v + bias, signs))
                .collect();
            let w = r::matmul(&h, p["mapping.1.weight"], 1, 3, 3);
            total += w
                .iter()
                .zip(p["mapping.1.bias"])
                .map(|(v, bias)| (v + bias).powi(2))
                .sum::<f64>();
        }
        total
    };
    let numeric = fd(&x0, &eval);
    report(&a.into_iter().zip(split(&flat, numeric)).collect::<Vec<_>>())
}

fn small_disc(seed: u64, side: usize, channels: Vec<usize>) -> DiscParams {
    let mut d = DiscParams::reset(DiscConfig { channels, kernel: 3 }, side, seed).unwrap();
    d.head.bias.data_mut()[0] = 0.1;
    d
}

/// `Σ logits ⊙ proj` on a two-sample batch, against every D parameter.
pub fn discriminator_check(seed: u64) -> GradReport {
    let d = small_disc(seed, 8, vec![3, 4]);
    let mut rng = Rng::new(seed ^ 0xd1);
    let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|_| rng.uniform_f32()).collect()).unwrap();
    let proj = rand_tensor(&[2, 1], &mut rng, 1.0);

    let mut tape = Tape::new();
    let vars = d.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let logits = d.forward(&mut tape, &vars, xv).unwrap();
    let pv = tape.constant(proj.clone());
    let prod = tape.mul(logits, pv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let a = analytic(&mut tape, loss, vars.named());

    let named = d.named();
    let flat = Flat::new(&named);
    let x0 = Flat::pack(&named);
    let (x64, p64) = (to_f64(&x), to_f64(&proj));
    let eval = |x: &[f64], signs: &mut Vec<bool>| {
        let l = disc_forward(&d, &flat.unpack(x), &x64, 2, signs);
        l.iter().zip(&p64).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = fd(&x0, &eval);
    report(&a.into_iter().zip(split(&flat, numeric)).collect::<Vec<_>>())
}

/// Patch regularizer on a 4×4 stage-2 window whose parent falls between
/// stage-1 lattice points; gradients w.r.t. the current generator.
pub fn patch_reg_check(seed: u64) -> GradReport {
    let cur = small_gen(StageId::Two, seed);
    let prev = small_gen(StageId::One, seed.wrapping_add(1));
    let mut rng = Rng::new(seed ^ 0x77);
    let batch = 2;
    let window = make_grid(16, 16, 8).unwrap().window((1, 3), 4).unwrap();
    let parent = window.parent_window().unwrap();
    let points = window.points();
    let z = rand_tensor(&[batch, 4], &mut rng, 1.0);

    let mut tape = Tape::new();
    let vars = cur.bind(&mut tape, true).unwrap();
    let zv = tape.constant(z.clone());
    let fake = cur
        .generate(&mut tape, &vars, zv, &points, GenScopes::TRAINING)
        .unwrap();
    let loss = patch_reg(&mut tape, fake, &prev, &z, &window, PatchNorm::L2).unwrap();
    let a = analytic(&mut tape, loss, vars.named());

    let z64 = to_f64(&z);
    let prev_named = prev.named();
    let prev_flat = Flat::new(&prev_named);
    let prev_x = Flat::pack(&prev_named);
    let target = gen_forward(
        &prev,
        &prev_flat.unpack(&prev_x),
        &z64,
        batch,
        &parent.points(),
        &mut Vec::new(),
    );
    let named = cur.named();
    let flat = Flat::new(&named);
    let x0 = Flat::pack(&named);
    let eval = |x: &[f64], signs: &mut Vec<bool>| {
        let rows = gen_forward(&cur, &flat.unpack(x), &z64, batch, &points, signs);
        let mut total = 0.0;
        for b in 0..batch {
            let mut sq = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    for c in 0..3 {
                        let px = |di: usize, dj: usize| rows[(b * 16 + (2 * i + di) * 4 + 2 * j + dj) * 3 + c];
                        let pooled = (px(0, 0) + px(0, 1) + px(1, 0) + px(1, 1)) / 4.0;
                        let t = target[(b * 4 + i * 2 + j) * 3 + c];
                        sq += (pooled - t).powi(2);
                    }
                }
            }
            total += sq.sqrt();
        }
        total / batch as f64
    };
    let numeric = fd(&x0, &eval);
    report(&a.into_iter().zip(split(&flat, numeric)).collect::<Vec<_>>())
}

/// Non-saturating G loss through a small D, against every G parameter.
pub fn generator_through_disc_check(seed: u64) -> GradReport {
    let g = small_gen(StageId::One, seed);
    let d = small_disc(seed ^ 3, 4, vec![3]);
    let mut rng = Rng::new(seed ^ 0x3c);
    let batch = 3;
    let points = make_grid(16, 16, 4).unwrap().points();
    let z = rand_tensor(&[batch, 4], &mut rng, 1.0);

    let mut tape = Tape::new();
    let gv = g.bind(&mut tape, true).unwrap();
    let zv = tape.constant(z.clone());
    let fake = g.generate(&mut tape, &gv, zv, &points, GenScopes::TRAINING).unwrap();
    let img = tape.rows_to_nchw(fake, batch, 4).unwrap();
    let dv = d.bind(&mut tape, false);
    let logits = d.forward(&mut tape, &dv, img).unwrap();
    let loss = adv_loss_g(&mut tape, logits).unwrap();
    let a = analytic(&mut tape, loss, gv.named());

    let d_named = d.named();
    let d_flat = Flat::new(&d_named);
    let d_x = Flat::pack(&d_named);
    let named = g.named();
    let flat = Flat::new(&named);
    let x0 = Flat::pack(&named);
    let z64 = to_f64(&z);
    let eval = |x: &[f64], signs: &mut Vec<bool>| {
        let rows = gen_forward(&g, &flat.unpack(x), &z64, batch, &points, signs);
        let logits = disc_forward(&d, &d_flat.unpack(&d_x), &rows_to_nchw(&rows, batch, 4), batch, signs);
        logits.iter().map(|&l| r::softplus(-l)).sum::<f64>() / batch as f64
    };
    let numeric = fd(&x0, &eval);
    report(&a.into_iter().zip(split(&flat, numeric)).collect::<Vec<_>>())
}

/// Central differences of `eval`, skipping entries whose ±ε evaluations
/// sit on different sides of a leaky-ReLU kink.
fn fd(x0: &[f64], eval: &dyn Fn(&[f64], &mut Vec<bool>) -> f64) -> Vec<Option<f64>> {
    let signs_at = |x: &[f64]| {
        let mut s = Vec::new();
        eval(x, &mut s);
        s
    };
    central_diff(
        x0,
        FD_EPS,
        |x| eval(x, &mut Vec::new()),
        |xp, xm| signs_at(xp) == signs_at(xm),
    )
}
