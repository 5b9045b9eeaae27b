//! Training loop shared by the multistage schedule and both baselines.
//!
//! Each iteration draws one coordinate window, takes a discriminator step
//! on fakes generated at that window, then a generator step on fresh
//! latents at the same window.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::{DiscPolicy, Mode, RunConfig, StageConfig};
use crate::coords::{make_grid, CoordGrid, StageId};
use crate::data::{Dataset, RealSampler};
use crate::discriminator::DiscParams;
use crate::error::{invalid, Error, Result};
use crate::generator::{GenScopes, GeneratorParams};
use crate::losses::{adv_loss_d, adv_loss_g, d_reg, patch_reg, PatchNorm};
use crate::tensor::{adam_step, AdamState, Gradients, Rng, Scope, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMetrics {
    /// Global iteration index across all stages.
    pub iter: usize,
    pub stage: StageId,
    pub g_loss: f32,
    pub d_loss: f32,
    pub patch_loss: f32,
    /// Per-pixel generator activations of one generator forward.
    pub fwd_count: u64,
    /// All forward activations of the iteration (both steps, every scope).
    pub total_activations: u64,
    pub peak_floats: u64,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "iter,stage,g_loss,d_loss,patch_loss,fwd_count,peak_floats,wall_ms";

impl TrainingMetrics {
    /// One CSV line (no newline). `wall_ms` is written as 0 unless `with_wall`.
    pub fn csv_row(&self, with_wall: bool) -> String {
        let wall = if with_wall { self.wall_ms } else { 0.0 };
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.iter,
            self.stage.index(),
            self.g_loss,
            self.d_loss,
            self.patch_loss,
            self.fwd_count,
            self.peak_floats,
            wall
        )
    }
}

/// Hooks for the caller to persist progress.
pub trait TrainObserver {
    fn on_iteration(&mut self, _metrics: &TrainingMetrics, _gen: &GeneratorParams) -> Result<()> {
        Ok(())
    }

    fn on_stage_end(&mut self, _stage: StageId, _gen: &GeneratorParams, _disc: &DiscParams) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Trainer for one stage (or one baseline run).
pub struct StageTrainer {
    pub config: StageConfig,
    pub gen: GeneratorParams,
    pub frozen: Option<GeneratorParams>,
    pub disc: DiscParams,
    pub d_opt: AdamState,
    g_opt: AdamState,
    sampler: RealSampler,
    grid: CoordGrid,
    crop: Option<usize>,
    lambda: f32,
    norm: PatchNorm,
    d_reg_eps: f32,
    rng: Rng,
    local_iter: usize,
    /// Global index of the next iteration.
    pub iter: usize,
    pub rcrop_calls: usize,
}

pub struct TrainerParts {
    pub gen: GeneratorParams,
    pub frozen: Option<GeneratorParams>,
    pub disc: DiscParams,
    pub d_opt: AdamState,
    pub rng: Rng,
    pub first_iter: usize,
}

impl StageTrainer {
    pub fn new(run: &RunConfig, config: &StageConfig, data: &Dataset, parts: TrainerParts) -> Result<Self> {
        let h = run.resolution;
        let TrainerParts {
            gen,
            frozen,
            disc,
            d_opt,
            rng,
            first_iter,
        } = parts;
        let density = gen.density();
        let (crop, real_density, real_side) = match run.mode {
            Mode::ImageBased => (None, h, h),
            Mode::PatchBased => (Some(config.crop(h)), h, config.crop(h)),
            Mode::Multistage if config.stage == StageId::One => (None, density, density),
            Mode::Multistage => (Some(config.crop(h)), density, config.crop(h)),
        };
        let needs_frozen = run.mode == Mode::Multistage && config.stage != StageId::One;
        if needs_frozen != frozen.is_some() {
            return invalid(format!(
                "stage {} of mode {} {} a frozen previous generator",
                config.stage.index(),
                run.mode.name(),
                if needs_frozen { "needs" } else { "must not have" }
            ));
        }
        if let Some(f) = &frozen {
            if f.stage.next() != Some(gen.stage) {
                return invalid("frozen generator is not from the preceding stage");
            }
        }
        if disc.side != real_side {
            return Err(Error::Shape {
                op: "discriminator input",
                lhs: vec![disc.side],
                rhs: vec![real_side],
            });
        }
        Ok(Self {
            config: config.clone(),
            g_opt: AdamState::new(run.adam_g),
            sampler: RealSampler::new(data, real_density, real_side)?,
            grid: make_grid(h, h, density)?,
            crop,
            lambda: config.lambda(),
            norm: run.patch_norm,
            d_reg_eps: run.d_reg_eps,
            gen,
            frozen,
            disc,
            d_opt,
            rng,
            local_iter: 0,
            iter: first_iter,
            rcrop_calls: 0,
        })
    }

    /// One D step and one G step.
    pub fn step(&mut self) -> Result<TrainingMetrics> {
        let start = Instant::now();
        let batch = self.config.batch;
        let z_dim = self.gen.config.z_dim;
        let window = match self.crop {
            Some(c) => {
                self.rcrop_calls += 1;
                self.grid.rcrop(c, &mut self.rng)?
            }
            None => self.grid,
        };
        let points = window.points();
        let side = window.side();

        // discriminator step
        let z = Tensor::randn_with(&[batch, z_dim], &mut self.rng)?;
        let real = self.sampler.batch(batch, &mut self.rng)?;
        let mut tape = Tape::new();
        let gv = self.gen.bind(&mut tape, false)?;
        let zv = tape.constant(z);
        let fake = self.gen.generate(&mut tape, &gv, zv, &points, GenScopes::TRAINING)?;
        tape.set_scope(Scope::Discriminator);
        let fake = tape.rows_to_nchw(fake, batch, side)?;
        let dv = self.disc.bind(&mut tape, true);
        let real = tape.constant(real);
        let real_logits = self.disc.forward(&mut tape, &dv, real)?;
        let fake_logits = self.disc.forward(&mut tape, &dv, fake)?;
        tape.set_scope(Scope::Loss);
        let adv_d = adv_loss_d(&mut tape, real_logits, fake_logits)?;
        let d_loss = tape.value(adv_d).item();
        let every = self.config.d_reg_every;
        let mut total_d = adv_d;
        if every > 0 && self.config.d_reg_weight > 0.0 && self.local_iter.is_multiple_of(every) {
            tape.set_scope(Scope::Regularizer);
            let disc = &self.disc;
            let reg = d_reg(&mut tape, real, self.d_reg_eps, &mut self.rng, |t, x| {
                disc.forward(t, &dv, x)
            })?;
            let reg = tape.scale(reg, self.config.d_reg_weight * every as f32)?;
            total_d = tape.add(total_d, reg)?;
        }
        let mut grads = tape.backward(total_d)?;
        apply(dv.named(), &mut grads, self.disc.named_mut(), &mut self.d_opt)?;
        let peak_d = tape.peak_live_floats();
        let acts_d = tape.total_activations();
        drop(tape);

        // generator step
        let z = Tensor::randn_with(&[batch, z_dim], &mut self.rng)?;
        let mut tape = Tape::new();
        let gv = self.gen.bind(&mut tape, true)?;
        let zv = tape.constant(z.clone());
        let fake = self.gen.generate(&mut tape, &gv, zv, &points, GenScopes::TRAINING)?;
        let fwd_count = tape.activations(Scope::GenSynthesis);
        tape.set_scope(Scope::Discriminator);
        let img = tape.rows_to_nchw(fake, batch, side)?;
        let dv = self.disc.bind(&mut tape, false);
        let logits = self.disc.forward(&mut tape, &dv, img)?;
        tape.set_scope(Scope::Loss);
        let adv_g = adv_loss_g(&mut tape, logits)?;
        let g_loss = tape.value(adv_g).item();
        let (total_g, patch_loss) = match &self.frozen {
            Some(prev) => {
                let p = patch_reg(&mut tape, fake, prev, &z, &window, self.norm)?;
                let value = tape.value(p).item();
                tape.set_scope(Scope::Loss);
                let weighted = tape.scale(p, self.lambda)?;
                (tape.add(adv_g, weighted)?, value)
            }
            None => (adv_g, 0.0),
        };
        let mut grads = tape.backward(total_g)?;
        apply(gv.named(), &mut grads, self.gen.named_mut(), &mut self.g_opt)?;
        let metrics = TrainingMetrics {
            iter: self.iter,
            stage: self.config.stage,
            g_loss,
            d_loss,
            patch_loss,
            fwd_count,
            total_activations: acts_d + tape.total_activations(),
            peak_floats: peak_d.max(tape.peak_live_floats()),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.iter += 1;
        self.local_iter += 1;
        Ok(metrics)
    }

    pub fn into_parts(self) -> (GeneratorParams, DiscParams, AdamState, Rng) {
        (self.gen, self.disc, self.d_opt, self.rng)
    }
}

fn apply(
    vars: &[(String, Var)],
    grads: &mut Gradients,
    mut params: Vec<(String, &mut Tensor)>,
    opt: &mut AdamState,
) -> Result<()> {
    let mut map = BTreeMap::new();
    for (name, v) in vars {
        let g = grads
            .take(*v)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
        map.insert(name.clone(), g);
    }
    let refs: Vec<(&str, &mut Tensor)> = params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    adam_step(refs, &map, opt)
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Final generator of every stage that ran, in order.
    pub generators: Vec<GeneratorParams>,
    pub disc: DiscParams,
    pub metrics: Vec<TrainingMetrics>,
    /// Number of random crops drawn in each stage.
    pub rcrop_calls: Vec<usize>,
}

/// Initial generator and discriminator for a run.
pub fn init_models(cfg: &RunConfig, rng: &mut Rng) -> Result<(GeneratorParams, DiscParams)> {
    let stage = match cfg.mode {
        Mode::Multistage => StageId::One,
        _ => StageId::Three,
    };
    let gen = GeneratorParams::init(cfg.generator, cfg.resolution, stage, cfg.init_strategy, rng)?;
    let disc = DiscParams::init(cfg.discriminator.clone(), cfg.disc_side(), rng)?;
    Ok((gen, disc))
}

/// Runs every stage of `cfg` on `data`.
pub fn run(cfg: &RunConfig, data: &Dataset, observer: &mut dyn TrainObserver) -> Result<RunOutput> {
    cfg.validate()?;
    let mut root = Rng::new(cfg.seed);
    let mut init_rng = root.fork(0);
    let (mut gen, mut disc) = init_models(cfg, &mut init_rng)?;
    let mut d_opt = AdamState::new(cfg.adam_d);
    let mut prev: Option<GeneratorParams> = None;
    let mut out = RunOutput {
        generators: Vec::new(),
        disc: disc.clone(),
        metrics: Vec::new(),
        rcrop_calls: Vec::new(),
    };
    for (k, stage_cfg) in cfg.stages.iter().enumerate() {
        if let Some(p) = prev.take() {
            gen = p.transfer_weights(cfg.init_strategy, stage_cfg.stage, &mut init_rng)?;
            match cfg.disc_policy {
                DiscPolicy::CarryOver => disc = disc.carry_over(),
                DiscPolicy::Reset => {
                    disc = DiscParams::init(cfg.discriminator.clone(), cfg.disc_side(), &mut init_rng)?;
                    d_opt = AdamState::new(cfg.adam_d);
                }
            }
            prev = Some(p);
        }
        let parts = TrainerParts {
            gen,
            frozen: prev.clone(),
            disc,
            d_opt,
            rng: root.fork(k as u64 + 1),
            first_iter: out.metrics.len(),
        };
        let mut trainer = StageTrainer::new(cfg, stage_cfg, data, parts)?;
        for _ in 0..stage_cfg.iters {
            let m = trainer.step()?;
            observer.on_iteration(&m, &trainer.gen)?;
            out.metrics.push(m);
        }
        if let (Some(before), Some(after)) = (&prev, &trainer.frozen) {
            debug_assert_eq!(before, after);
        }
        out.rcrop_calls.push(trainer.rcrop_calls);
        let (g, d, opt, _) = trainer.into_parts();
        observer.on_stage_end(stage_cfg.stage, &g, &d)?;
        out.generators.push(g.clone());
        gen = g.clone();
        disc = d;
        d_opt = opt;
        prev = Some(g);
    }
    out.disc = disc;
    Ok(out)
}
