//! Side-by-side cost measurement of the three training modes.
//!
//! Trainers for every row are built up front and stepped round-robin, so
//! slow drift of the machine (thermal, background load) hits all rows alike.

use std::fmt::Write as _;

use crate::config::{Mode, RunConfig};
use crate::coords::StageId;
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::metrics::median;
use crate::tensor::{AdamState, Rng};
use crate::train::{init_models, StageTrainer, TrainerParts};

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub label: String,
    pub mode: Mode,
    pub stage: StageId,
    /// Per-pixel generator activations of one generator forward.
    pub fwd_count: u64,
    /// Every forward activation of one iteration (G and D steps).
    pub total_activations: u64,
    pub peak_floats: u64,
    pub median_wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct ProfileReport {
    pub iters: usize,
    pub resolution: usize,
    pub batch: usize,
    pub rows: Vec<ProfileRow>,
}

impl ProfileReport {
    pub fn row(&self, label: &str) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn baseline(&self) -> &ProfileRow {
        self.row("image_based").expect("image_based row")
    }

    /// Stage 1 of the multistage schedule: the row compared against the baselines.
    pub fn ours(&self) -> &ProfileRow {
        self.row("ours_stage1").expect("ours_stage1 row")
    }

    pub fn fwd_ratio(&self, row: &ProfileRow) -> f64 {
        row.fwd_count as f64 / self.baseline().fwd_count as f64
    }

    pub fn peak_ratio(&self, row: &ProfileRow) -> f64 {
        row.peak_floats as f64 / self.baseline().peak_floats as f64
    }

    pub fn wall_ratio(&self, row: &ProfileRow) -> f64 {
        row.median_wall_ms / self.baseline().median_wall_ms
    }

    /// Fixed-width text table with ratios against `image_based`.
    pub fn table(&self) -> String {
        let mut s = format!(
            "H={} batch={} iters={} (memory in floats, x4 for bytes)\n",
            self.resolution, self.batch, self.iters
        );
        let _ = writeln!(
            s,
            "{:<12} {:>14} {:>14} {:>14} {:>12} {:>9} {:>9} {:>9}",
            "row", "fwd_count", "total_acts", "peak_floats", "wall_ms", "fwd/img", "peak/img", "wall/img"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>14} {:>14} {:>14} {:>12.2} {:>9.4} {:>9.4} {:>9.4}",
                r.label,
                r.fwd_count,
                r.total_activations,
                r.peak_floats,
                r.median_wall_ms,
                self.fwd_ratio(r),
                self.peak_ratio(r),
                self.wall_ratio(r)
            );
        }
        s
    }
}

/// Runs `iters` instrumented iterations (after one unrecorded warm-up) of
/// each multistage stage, `patch_based` and `image_based`, all at the first
/// stage's batch size.
pub fn profile(cfg: &RunConfig, data: &Dataset, iters: usize) -> Result<ProfileReport> {
    if iters == 0 {
        return invalid("profile needs at least one iteration");
    }
    let base = match cfg.mode {
        Mode::Multistage => cfg.clone(),
        _ => cfg.with_mode(Mode::Multistage),
    };
    base.validate()?;
    let batch = base.stages[0].batch;
    let mut root = Rng::new(cfg.seed);
    let mut trainers: Vec<(String, Mode, StageTrainer)> = Vec::new();

    // multistage: each stage from a fresh (untrained) chain of transfers
    let mut init_rng = root.fork(0);
    let (g1, disc) = init_models(&base, &mut init_rng)?;
    let mut chain = vec![g1];
    for st in [StageId::Two, StageId::Three] {
        let next = chain
            .last()
            .unwrap()
            .transfer_weights(base.init_strategy, st, &mut init_rng)?;
        chain.push(next);
    }
    for (k, stage_cfg) in base.stages.iter().enumerate() {
        let mut sc = stage_cfg.clone();
        sc.batch = batch;
        let parts = TrainerParts {
            gen: chain[k].clone(),
            frozen: k.checked_sub(1).map(|p| chain[p].clone()),
            disc: disc.carry_over(),
            d_opt: AdamState::new(base.adam_d),
            rng: root.fork(k as u64 + 1),
            first_iter: 0,
        };
        let t = StageTrainer::new(&base, &sc, data, parts)?;
        trainers.push((format!("ours_stage{}", k + 1), Mode::Multistage, t));
    }
    for (k, mode) in [Mode::PatchBased, Mode::ImageBased].into_iter().enumerate() {
        let mut c = cfg.with_mode(mode);
        c.stages[0].batch = batch;
        let mut rng = root.fork(10 + k as u64);
        let (gen, disc) = init_models(&c, &mut rng)?;
        let parts = TrainerParts {
            gen,
            frozen: None,
            disc,
            d_opt: AdamState::new(c.adam_d),
            rng,
            first_iter: 0,
        };
        let t = StageTrainer::new(&c, &c.stages[0], data, parts)?;
        trainers.push((mode.name().to_string(), mode, t));
    }

    for (_, _, t) in &mut trainers {
        t.step()?;
    }
    let mut walls = vec![Vec::with_capacity(iters); trainers.len()];
    let mut last = Vec::new();
    for i in 0..iters {
        for (k, (_, _, t)) in trainers.iter_mut().enumerate() {
            let m = t.step()?;
            walls[k].push(m.wall_ms);
            if i + 1 == iters {
                last.push(m);
            }
        }
    }
    let rows = trainers
        .iter()
        .zip(walls)
        .zip(last)
        .map(|(((label, mode, t), w), m)| ProfileRow {
            label: label.clone(),
            mode: *mode,
            stage: t.config.stage,
            fwd_count: m.fwd_count,
            total_activations: m.total_activations,
            peak_floats: m.peak_floats,
            median_wall_ms: median(&w),
        })
        .collect();
    Ok(ProfileReport {
        iters,
        resolution: cfg.resolution,
        batch,
        rows,
    })
}
