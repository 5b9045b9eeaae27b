//! Coordinate-based generator `G(x, y; z)`.
//!
//! `z` goes through a two-layer mapping network to a style vector `w`. Each
//! pixel coordinate is normalized to `[-1, 1]`, embedded with fixed random
//! Fourier features `[sin(Bp), cos(Bp)]`, optionally concatenated with a
//! learned constant looked up on the stage lattice, and pushed through
//! dense layers whose pre-activations are scaled per sample by an affine
//! map of `w`. A sigmoid head gives RGB in `(0, 1)`.
//!
//! Every pixel is computed independently of every other pixel in the batch.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::coords::{normalize, StageId};
use crate::error::{invalid, Result};
use crate::tensor::{Rng, Scope, Tape, Taps, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub embed_pairs: usize,
    pub fourier_sigma: f32,
    pub const_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 128,
            w_dim: 64,
            width: 128,
            layers: 6,
            embed_pairs: 64,
            fourier_sigma: 10.0,
            const_dim: 32,
        }
    }
}

impl GeneratorConfig {
    /// Floats the synthesis path creates per pixel in one forward pass.
    pub fn per_pixel_activations(&self, with_const: bool) -> u64 {
        let e = self.embed_pairs as u64;
        let c = if with_const { self.const_dim as u64 } else { 0 };
        // projection, sin, cos, const gather, concat
        let input = 3 * e + c + (2 * e + c);
        // matmul, bias, modulation, activation
        let hidden = 4 * (self.width * self.layers) as u64;
        input + hidden + 9
    }

    fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.w_dim == 0 || self.width == 0 || self.layers == 0 || self.embed_pairs == 0 {
            return invalid("generator dims must all be positive");
        }
        if !(self.fourier_sigma.is_finite() && self.fourier_sigma > 0.0) {
            return invalid("fourier_sigma must be positive");
        }
        Ok(())
    }
}

/// How the learned constant is carried into the next stage's lattice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Fresh Gaussian grid at every stage.
    Random,
    /// Each parent vector fills its 2×2 child block.
    #[default]
    Nearest,
    /// Parent grid bilinearly interpolated at the child lattice positions.
    Bilinear,
    /// No learned constant at all.
    Remove,
}

impl InitStrategy {
    pub fn code(self) -> u32 {
        match self {
            InitStrategy::Random => 0,
            InitStrategy::Nearest => 1,
            InitStrategy::Bilinear => 2,
            InitStrategy::Remove => 3,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            0 => InitStrategy::Random,
            1 => InitStrategy::Nearest,
            2 => InitStrategy::Bilinear,
            3 => InitStrategy::Remove,
            _ => return invalid(format!("unknown init strategy code {c}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub(crate) fn init(fan_in: usize, fan_out: usize, gain: f32, rng: &mut Rng) -> Result<Self> {
        let mut weight = Tensor::randn_with(&[fan_in, fan_out], rng)?;
        let std = gain / (fan_in as f32).sqrt();
        weight.data_mut().iter_mut().for_each(|v| *v *= std);
        Ok(Self {
            weight,
            bias: Tensor::zeros(&[1, fan_out])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayer {
    pub dense: Dense,
    /// `w → per-channel scale`, bias initialized to 1.
    pub modulation: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    /// Training resolution (pixels per side).
    pub resolution: usize,
    pub stage: StageId,
    pub strategy: InitStrategy,
    pub mapping: [Dense; 2],
    /// `[embed_pairs, 2]`; never trained, copied verbatim across stages.
    pub fourier_basis: Tensor,
    pub synth: Vec<SynthLayer>,
    pub to_rgb: Dense,
    /// `[N·N, const_dim]` for the stage density `N`, row-major over the lattice.
    pub const_grid: Option<Tensor>,
}

/// Tape handles for one generator's parameters.
pub struct GenVars {
    mapping: [(Var, Var); 2],
    basis_t: Var,
    synth: Vec<[Var; 4]>,
    to_rgb: (Var, Var),
    const_grid: Option<Var>,
    names: Vec<(String, Var)>,
}

impl GenVars {
    /// `(parameter name, tape var)` for every trainable tensor.
    pub fn named(&self) -> &[(String, Var)] {
        &self.names
    }
}

/// Activation attribution used by [`GeneratorParams::generate`].
#[derive(Clone, Copy, Debug)]
pub struct GenScopes {
    pub per_sample: Scope,
    pub per_pixel: Scope,
}

impl GenScopes {
    pub const TRAINING: GenScopes = GenScopes {
        per_sample: Scope::GenMapping,
        per_pixel: Scope::GenSynthesis,
    };

    pub fn all(s: Scope) -> Self {
        Self {
            per_sample: s,
            per_pixel: s,
        }
    }
}

fn const_grid_init(n: usize, dim: usize, rng: &mut Rng) -> Result<Tensor> {
    Tensor::randn_with(&[n * n, dim], rng)
}

impl GeneratorParams {
    pub fn init(
        config: GeneratorConfig,
        resolution: usize,
        stage: StageId,
        strategy: InitStrategy,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if resolution < 4 || !resolution.is_multiple_of(4) {
            return invalid(format!("resolution {resolution} must be a positive multiple of 4"));
        }
        let relu_gain = 2f32.sqrt();
        let mapping = [
            Dense::init(config.z_dim, config.w_dim, relu_gain, rng)?,
            Dense::init(config.w_dim, config.w_dim, 1.0, rng)?,
        ];
        let mut fourier_basis = Tensor::randn_with(&[config.embed_pairs, 2], rng)?;
        fourier_basis
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= config.fourier_sigma);
        let with_const = strategy != InitStrategy::Remove && config.const_dim > 0;
        let mut fan_in = 2 * config.embed_pairs + if with_const { config.const_dim } else { 0 };
        let mut synth = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let dense = Dense::init(fan_in, config.width, relu_gain, rng)?;
            let mut modulation = Dense::init(config.w_dim, config.width, 0.1, rng)?;
            modulation.bias.data_mut().iter_mut().for_each(|v| *v = 1.0);
            synth.push(SynthLayer { dense, modulation });
            fan_in = config.width;
        }
        let to_rgb = Dense::init(config.width, 3, 1.0, rng)?;
        let const_grid = if with_const {
            Some(const_grid_init(stage.density(resolution), config.const_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            resolution,
            stage,
            strategy,
            mapping,
            fourier_basis,
            synth,
            to_rgb,
            const_grid,
        })
    }

    /// Lattice points per axis of this stage (and of `const_grid`).
    pub fn density(&self) -> usize {
        self.stage.density(self.resolution)
    }

    fn collect<'a, T>(&'a self, mut f: impl FnMut(String, &'a Tensor) -> T) -> Vec<T> {
        let mut out = Vec::new();
        for (i, d) in self.mapping.iter().enumerate() {
            out.push(f(format!("mapping.{i}.weight"), &d.weight));
            out.push(f(format!("mapping.{i}.bias"), &d.bias));
        }
        for (i, l) in self.synth.iter().enumerate() {
            out.push(f(format!("synth.{i}.weight"), &l.dense.weight));
            out.push(f(format!("synth.{i}.bias"), &l.dense.bias));
            out.push(f(format!("synth.{i}.mod_weight"), &l.modulation.weight));
            out.push(f(format!("synth.{i}.mod_bias"), &l.modulation.bias));
        }
        out.push(f("to_rgb.weight".into(), &self.to_rgb.weight));
        out.push(f("to_rgb.bias".into(), &self.to_rgb.bias));
        if let Some(c) = &self.const_grid {
            out.push(f("const_grid".into(), c));
        }
        out
    }

    /// Trainable tensors by name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.collect(|n, t| (n, t))
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, d) in self.mapping.iter_mut().enumerate() {
            out.push((format!("mapping.{i}.weight"), &mut d.weight));
            out.push((format!("mapping.{i}.bias"), &mut d.bias));
        }
        for (i, l) in self.synth.iter_mut().enumerate() {
            out.push((format!("synth.{i}.weight"), &mut l.dense.weight));
            out.push((format!("synth.{i}.bias"), &mut l.dense.bias));
            out.push((format!("synth.{i}.mod_weight"), &mut l.modulation.weight));
            out.push((format!("synth.{i}.mod_bias"), &mut l.modulation.bias));
        }
        out.push(("to_rgb.weight".into(), &mut self.to_rgb.weight));
        out.push(("to_rgb.bias".into(), &mut self.to_rgb.bias));
        if let Some(c) = &mut self.const_grid {
            out.push(("const_grid".into(), c));
        }
        out
    }

    /// Places all parameters on `tape`; they receive gradients iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<GenVars> {
        let mut names = Vec::new();
        let mut put = |tape: &mut Tape, name: String, t: &Tensor| {
            let v = tape.leaf(t.clone(), trainable);
            names.push((name, v));
            v
        };
        let mut mapping = Vec::with_capacity(2);
        for (i, d) in self.mapping.iter().enumerate() {
            let w = put(tape, format!("mapping.{i}.weight"), &d.weight);
            let b = put(tape, format!("mapping.{i}.bias"), &d.bias);
            mapping.push((w, b));
        }
        let mut synth = Vec::with_capacity(self.synth.len());
        for (i, l) in self.synth.iter().enumerate() {
            synth.push([
                put(tape, format!("synth.{i}.weight"), &l.dense.weight),
                put(tape, format!("synth.{i}.bias"), &l.dense.bias),
                put(tape, format!("synth.{i}.mod_weight"), &l.modulation.weight),
                put(tape, format!("synth.{i}.mod_bias"), &l.modulation.bias),
            ]);
        }
        let to_rgb = (
            put(tape, "to_rgb.weight".into(), &self.to_rgb.weight),
            put(tape, "to_rgb.bias".into(), &self.to_rgb.bias),
        );
        let const_grid = self.const_grid.as_ref().map(|c| put(tape, "const_grid".into(), c));
        let e = self.config.embed_pairs;
        let b = self.fourier_basis.data();
        let mut bt = vec![0.0; 2 * e];
        for r in 0..e {
            bt[r] = b[2 * r];
            bt[e + r] = b[2 * r + 1];
        }
        let basis_t = tape.constant(Tensor::from_vec(&[2, e], bt)?);
        if !trainable {
            names.clear();
        }
        Ok(GenVars {
            mapping: [mapping[0], mapping[1]],
            basis_t,
            synth,
            to_rgb,
            const_grid,
            names,
        })
    }

    /// Style vectors `w = F(z)`, `[B, w_dim]` for `z: [B, z_dim]`.
    pub fn mapping_forward(&self, tape: &mut Tape, vars: &GenVars, z: Var) -> Result<Var> {
        let [(w0, b0), (w1, b1)] = vars.mapping;
        let h = tape.matmul(z, w0)?;
        let h = tape.add(h, b0)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.matmul(h, w1)?;
        tape.add(h, b1)
    }

    /// `[sin(Bp), cos(Bp)]` for normalized coordinates `p: [n, 2]` (x, y).
    pub fn fourier_embed(&self, tape: &mut Tape, vars: &GenVars, coords: Var) -> Result<Var> {
        let proj = tape.matmul(coords, vars.basis_t)?;
        let s = tape.sin(proj)?;
        let c = tape.cos(proj)?;
        tape.concat_cols(&[s, c])
    }

    /// Interpolation taps into `const_grid` for pixel points `[row, col]`.
    /// Lattice points read their own vector, off-lattice points are bilinear
    /// in their neighbours, and points outside the lattice are clamped to
    /// its border.
    pub fn const_taps(&self, points: &[[f64; 2]]) -> Taps {
        let n = self.density();
        let stride = (self.resolution / n) as f64;
        let last = (n - 1) as f64;
        let mut taps = Taps::new();
        let mut buf = Vec::with_capacity(4);
        for p in points {
            buf.clear();
            let u = (p[0] / stride).clamp(0.0, last);
            let v = (p[1] / stride).clamp(0.0, last);
            let (i0, j0) = (u.floor(), v.floor());
            let (fu, fv) = (u - i0, v - j0);
            let (i0, j0) = (i0 as usize, j0 as usize);
            for (di, wu) in [(0, 1.0 - fu), (1, fu)] {
                for (dj, wv) in [(0, 1.0 - fv), (1, fv)] {
                    let w = wu * wv;
                    if w != 0.0 {
                        buf.push(((i0 + di) * n + j0 + dj, w as f32));
                    }
                }
            }
            taps.push_row(&buf);
        }
        taps
    }

    /// `const_lookup`: learned-constant features for `points`, `[n, const_dim]`,
    /// or `None` when the generator has no constant.
    pub fn const_lookup(&self, tape: &mut Tape, vars: &GenVars, points: &[[f64; 2]]) -> Result<Option<Var>> {
        match vars.const_grid {
            Some(c) => Ok(Some(tape.gather(c, Rc::new(self.const_taps(points)))?)),
            None => Ok(None),
        }
    }

    /// Generates `z.rows` images at `points` (pixel units on the training
    /// resolution). Output is `[B·n, 3]`, sample-major then point order.
    pub fn generate(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        z: Var,
        points: &[[f64; 2]],
        scopes: GenScopes,
    ) -> Result<Var> {
        let zshape = tape.value(z).shape().to_vec();
        if zshape.len() != 2 || zshape[1] != self.config.z_dim {
            return invalid(format!(
                "latent batch must be [B, {}], got {zshape:?}",
                self.config.z_dim
            ));
        }
        if points.is_empty() {
            return invalid("generate needs at least one point");
        }
        let batch = zshape[0];
        let outer = tape.set_scope(scopes.per_sample);
        let w = self.mapping_forward(tape, vars, z)?;
        let mut scales = Vec::with_capacity(self.synth.len());
        for &[_, _, mw, mb] in &vars.synth {
            let s = tape.matmul(w, mw)?;
            scales.push(tape.add(s, mb)?);
        }

        tape.set_scope(scopes.per_pixel);
        let res = self.resolution;
        let mut coords = Vec::with_capacity(batch * points.len() * 2);
        for _ in 0..batch {
            for p in points {
                let (x, y) = normalize(res, res, p[0], p[1]);
                coords.push(x as f32);
                coords.push(y as f32);
            }
        }
        let rows = batch * points.len();
        let coords = tape.constant(Tensor::from_vec(&[rows, 2], coords)?);
        let proj = tape.matmul(coords, vars.basis_t)?;
        let s = tape.sin(proj)?;
        let c = tape.cos(proj)?;
        let mut parts = vec![s, c];
        if let Some(grid) = vars.const_grid {
            let one = self.const_taps(points);
            let mut taps = Taps::new();
            for _ in 0..batch {
                for r in 0..one.rows() {
                    let row: Vec<(usize, f32)> = one.row(r).iter().map(|&(i, w)| (i as usize, w)).collect();
                    taps.push_row(&row);
                }
            }
            parts.push(tape.gather(grid, Rc::new(taps))?);
        }
        let mut h = tape.concat_cols(&parts)?;
        for (&[wt, b, _, _], &s) in vars.synth.iter().zip(&scales) {
            h = tape.matmul(h, wt)?;
            h = tape.add(h, b)?;
            h = tape.mul(h, s)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let (rw, rb) = vars.to_rgb;
        let out = tape.matmul(h, rw)?;
        let out = tape.add(out, rb)?;
        let out = tape.sigmoid(out)?;
        tape.set_scope(outer);
        Ok(out)
    }

    /// Gradient-free generation: `[B·n, 3]` values for latents `z: [B, z_dim]`.
    pub fn render(&self, z: &Tensor, points: &[[f64; 2]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let zv = tape.constant(z.clone());
        let out = self.generate(&mut tape, &vars, zv, points, GenScopes::TRAINING)?;
        Ok(tape.value(out).clone())
    }

    /// Initializes the next stage's generator from this one: every MLP and
    /// mapping tensor and the Fourier basis are copied verbatim; the learned
    /// constant is rebuilt on the denser lattice according to `strategy`.
    pub fn transfer_weights(&self, strategy: InitStrategy, next: StageId, rng: &mut Rng) -> Result<Self> {
        if self.stage.next() != Some(next) {
            return invalid(format!(
                "cannot transfer from stage {} to stage {}",
                self.stage.index(),
                next.index()
            ));
        }
        if (strategy == InitStrategy::Remove) != self.const_grid.is_none() {
            return invalid(format!(
                "strategy {strategy:?} does not match a generator {} a learned constant",
                if self.const_grid.is_some() { "with" } else { "without" }
            ));
        }
        let n_old = self.density();
        let n_new = next.density(self.resolution);
        let dim = self.config.const_dim;
        let const_grid = match (&self.const_grid, strategy) {
            (None, _) | (_, InitStrategy::Remove) => None,
            (Some(_), InitStrategy::Random) => Some(const_grid_init(n_new, dim, rng)?),
            (Some(old), InitStrategy::Nearest) => Some(upsample_nearest(old, n_old, dim)?),
            (Some(old), InitStrategy::Bilinear) => Some(upsample_bilinear(old, n_old, dim)?),
        };
        Ok(Self {
            stage: next,
            strategy,
            const_grid,
            ..self.clone()
        })
    }
}

/// Doubles lattice density; child `(i, j)` copies parent `(i/2, j/2)`.
pub fn upsample_nearest(grid: &Tensor, n: usize, dim: usize) -> Result<Tensor> {
    let src = grid.data();
    let m = 2 * n;
    let mut out = Vec::with_capacity(m * m * dim);
    for i in 0..m {
        for j in 0..m {
            let p = (i / 2) * n + j / 2;
            out.extend_from_slice(&src[p * dim..(p + 1) * dim]);
        }
    }
    Tensor::from_vec(&[m * m, dim], out)
}

/// Doubles lattice density; child `(i, j)` sits at parent position
/// `(i/2, j/2)` and is bilinear in the parent grid, clamped at the far edge.
pub fn upsample_bilinear(grid: &Tensor, n: usize, dim: usize) -> Result<Tensor> {
    let src = grid.data();
    let m = 2 * n;
    // per axis: (lower index, upper index, upper weight)
    let axis = |c: usize| -> (usize, usize, f32) {
        let lo = c / 2;
        if c.is_multiple_of(2) || lo + 1 >= n {
            (lo, lo, 0.0)
        } else {
            (lo, lo + 1, 0.5)
        }
    };
    let mut out = vec![0.0; m * m * dim];
    for i in 0..m {
        let (i0, i1, fi) = axis(i);
        for j in 0..m {
            let (j0, j1, fj) = axis(j);
            let dst = &mut out[(i * m + j) * dim..(i * m + j + 1) * dim];
            for (p, w) in [
                (i0 * n + j0, (1.0 - fi) * (1.0 - fj)),
                (i0 * n + j1, (1.0 - fi) * fj),
                (i1 * n + j0, fi * (1.0 - fj)),
                (i1 * n + j1, fi * fj),
            ] {
                if w == 0.0 {
                    continue;
                }
                for (d, &s) in dst.iter_mut().zip(&src[p * dim..(p + 1) * dim]) {
                    *d += w * s;
                }
            }
        }
    }
    Tensor::from_vec(&[m * m, dim], out)
}
