//! Convolutional patch discriminator with a fixed input side.
//!
//! Every stage feeds it arrays of the same side (H/4), so one set of
//! weights serves the whole schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::generator::{Dense, LEAKY_SLOPE};
use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            kernel: 3,
        }
    }
}

pub const DISC_STRIDE: usize = 2;

impl DiscConfig {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Spatial side after the conv stack for an input of side `side`.
    pub fn output_side(&self, side: usize) -> Result<usize> {
        let (k, p) = (self.kernel, self.pad());
        let mut s = side;
        for _ in &self.channels {
            if s + 2 * p < k {
                return invalid(format!("input side {side} too small for the conv stack"));
            }
            s = (s + 2 * p - k) / DISC_STRIDE + 1;
        }
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.kernel == 0 {
            return invalid("discriminator needs at least one conv layer with positive widths");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscParams {
    pub config: DiscConfig,
    /// Input side every batch must have.
    pub side: usize,
    /// `[out, in, k, k]` per layer.
    pub convs: Vec<Tensor>,
    pub head: Dense,
}

pub struct DiscVars {
    convs: Vec<Var>,
    head: (Var, Var),
    names: Vec<(String, Var)>,
}

impl DiscVars {
    pub fn named(&self) -> &[(String, Var)] {
        &self.names
    }
}

impl DiscParams {
    pub fn init(config: DiscConfig, side: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let out = config.output_side(side)?;
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut c_in = 3;
        for &c_out in &config.channels {
            let fan_in = c_in * config.kernel * config.kernel;
            let mut w = Tensor::randn_with(&[c_out, c_in, config.kernel, config.kernel], rng)?;
            let std = (2.0 / fan_in as f32).sqrt();
            w.data_mut().iter_mut().for_each(|v| *v *= std);
            convs.push(w);
            c_in = c_out;
        }
        let head = Dense::init(c_in * out * out, 1, 1.0, rng)?;
        Ok(Self {
            config,
            side,
            convs,
            head,
        })
    }

    /// Fresh seeded parameters.
    pub fn reset(config: DiscConfig, side: usize, seed: u64) -> Result<Self> {
        Self::init(config, side, &mut Rng::new(seed))
    }

    /// Carries the parameters into the next stage unchanged.
    pub fn carry_over(&self) -> Self {
        self.clone()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("conv.{i}.weight"), w))
            .collect();
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .convs
            .iter_mut()
            .enumerate()
            .map(|(i, w)| (format!("conv.{i}.weight"), w))
            .collect();
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscVars {
        let mut names = Vec::new();
        let mut convs = Vec::with_capacity(self.convs.len());
        for (name, t) in self.named() {
            let v = tape.leaf(t.clone(), trainable);
            if trainable {
                names.push((name, v));
            }
            convs.push(v);
        }
        let bias = convs.pop().expect("head bias");
        let weight = convs.pop().expect("head weight");
        DiscVars {
            convs,
            head: (weight, bias),
            names,
        }
    }

    /// Logits `[B, 1]` for `x: [B, 3, side, side]`.
    pub fn forward(&self, tape: &mut Tape, vars: &DiscVars, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.side || shape[3] != self.side {
            return Err(Error::Shape {
                op: "discriminator",
                lhs: shape,
                rhs: vec![0, 3, self.side, self.side],
            });
        }
        let batch = shape[0];
        let mut h = x;
        for &w in &vars.convs {
            h = tape.conv2d(h, w, DISC_STRIDE, self.config.pad())?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let flat = tape.value(h).len() / batch;
        let h = tape.reshape(h, &[batch, flat])?;
        let (hw, hb) = vars.head;
        let h = tape.matmul(h, hw)?;
        tape.add(h, hb)
    }

    /// Gradient-free logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }
}
