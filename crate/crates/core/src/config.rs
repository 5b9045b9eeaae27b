//! JSON run configuration.
//!
//! Unknown keys are rejected at every level. Optional fields fall back to
//! the defaults documented on each field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coords::StageId;
use crate::data::DatasetSource;
use crate::discriminator::DiscConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, InitStrategy};
use crate::losses::PatchNorm;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sparse-to-dense stages with patch regularization.
    #[default]
    Multistage,
    /// Full `H × H` grid every iteration, one stage.
    ImageBased,
    /// Random `H/4` crops of the full grid from the start, no regularizer.
    PatchBased,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Multistage, Mode::ImageBased, Mode::PatchBased];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Multistage => "multistage",
            Mode::ImageBased => "image_based",
            Mode::PatchBased => "patch_based",
        }
    }
}

/// What happens to the discriminator between stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscPolicy {
    #[default]
    CarryOver,
    Reset,
}

fn default_d_reg_weight() -> f32 {
    1.0
}

fn default_d_reg_every() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageId,
    pub iters: usize,
    pub batch: usize,
    /// Patch-regularizer weight; defaults to 0 in stage 1 and 1.0 after.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_patch: Option<f32>,
    /// Lattice points per crop side; defaults to `H/4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_side: Option<usize>,
    #[serde(default = "default_d_reg_weight")]
    pub d_reg_weight: f32,
    /// Apply the D penalty every this many iterations (0 disables it).
    #[serde(default = "default_d_reg_every")]
    pub d_reg_every: usize,
}

impl StageConfig {
    pub fn new(stage: StageId, iters: usize, batch: usize) -> Self {
        Self {
            stage,
            iters,
            batch,
            lambda_patch: None,
            crop_side: None,
            d_reg_weight: default_d_reg_weight(),
            d_reg_every: default_d_reg_every(),
        }
    }

    pub fn lambda(&self) -> f32 {
        self.lambda_patch
            .unwrap_or(if self.stage == StageId::One { 0.0 } else { 1.0 })
    }

    pub fn crop(&self, resolution: usize) -> usize {
        self.crop_side.unwrap_or(resolution / 4)
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_d_reg_eps() -> f32 {
    0.01
}

fn default_true() -> bool {
    true
}

fn default_profile_iters() -> usize {
    50
}

fn default_sample_count() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Image side `H`.
    pub resolution: usize,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscConfig,
    #[serde(default)]
    pub init_strategy: InitStrategy,
    #[serde(default)]
    pub disc_policy: DiscPolicy,
    /// Three entries (stages 1, 2, 3) for multistage; one stage-3 entry otherwise.
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub adam_g: AdamConfig,
    #[serde(default)]
    pub adam_d: AdamConfig,
    #[serde(default)]
    pub patch_norm: PatchNorm,
    /// Step size of the D penalty's finite difference.
    #[serde(default = "default_d_reg_eps")]
    pub d_reg_eps: f32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Write a sample sheet every this many iterations (0: never).
    #[serde(default)]
    pub sample_every: usize,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    /// When false the metrics CSV records `wall_ms` as 0, so reruns are
    /// byte-identical.
    #[serde(default = "default_true")]
    pub record_wall_ms: bool,
    /// Instrumented iterations per mode for `profile`.
    #[serde(default = "default_profile_iters")]
    pub profile_iters: usize,
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.resolution;
        if h < 8 || !h.is_multiple_of(8) {
            return Err(field("resolution", format!("{h} must be a positive multiple of 8")));
        }
        if let DatasetSource::Procedural { count, .. } = self.dataset {
            if count == 0 {
                return Err(field("dataset.procedural.count", "must be positive"));
            }
        }
        if !(self.d_reg_eps > 0.0 && self.d_reg_eps.is_finite()) {
            return Err(field("d_reg_eps", "must be positive"));
        }
        let expected: &[StageId] = match self.mode {
            Mode::Multistage => &StageId::ALL,
            Mode::ImageBased | Mode::PatchBased => &[StageId::Three],
        };
        if self.stages.len() != expected.len() {
            return Err(field(
                "stages",
                format!(
                    "mode {} needs {} stage entries, got {}",
                    self.mode.name(),
                    expected.len(),
                    self.stages.len()
                ),
            ));
        }
        for (k, (s, &want)) in self.stages.iter().zip(expected).enumerate() {
            let at = |f: &str| format!("stages[{k}].{f}");
            if s.stage != want {
                return Err(field(&at("stage"), format!("expected \"{}\"", want.index())));
            }
            if s.batch == 0 {
                return Err(field(&at("batch"), "must be positive"));
            }
            let lambda = s.lambda();
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(field(&at("lambda_patch"), "must be finite and non-negative"));
            }
            if !(s.d_reg_weight >= 0.0 && s.d_reg_weight.is_finite()) {
                return Err(field(&at("d_reg_weight"), "must be finite and non-negative"));
            }
            let crop = s.crop(h);
            match self.mode {
                Mode::Multistage => {
                    if s.stage == StageId::One && lambda != 0.0 {
                        return Err(field(&at("lambda_patch"), "must be 0 in stage 1"));
                    }
                    if crop != h / 4 {
                        return Err(field(
                            &at("crop_side"),
                            format!("must be {} so every stage feeds D one size", h / 4),
                        ));
                    }
                }
                Mode::PatchBased => {
                    if crop == 0 || crop > h {
                        return Err(field(&at("crop_side"), format!("must be in 1..={h}")));
                    }
                    if lambda != 0.0 && s.lambda_patch.is_some() {
                        return Err(field(&at("lambda_patch"), "baselines have no patch regularizer"));
                    }
                }
                Mode::ImageBased => {
                    if s.crop_side.is_some() {
                        return Err(field(&at("crop_side"), "image_based trains on the full grid"));
                    }
                    if lambda != 0.0 && s.lambda_patch.is_some() {
                        return Err(field(&at("lambda_patch"), "baselines have no patch regularizer"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Side of every discriminator input.
    pub fn disc_side(&self) -> usize {
        match self.mode {
            Mode::ImageBased => self.resolution,
            _ => self.stages[0].crop(self.resolution),
        }
    }

    /// Same settings with another mode; stage list rebuilt to fit it.
    pub fn with_mode(&self, mode: Mode) -> RunConfig {
        let mut out = self.clone();
        out.mode = mode;
        let template = self
            .stages
            .last()
            .cloned()
            .unwrap_or_else(|| StageConfig::new(StageId::Three, 0, 1));
        let mut base = template.clone();
        base.lambda_patch = None;
        base.crop_side = None;
        out.stages = match mode {
            Mode::Multistage => StageId::ALL
                .iter()
                .map(|&stage| StageConfig { stage, ..base.clone() })
                .collect(),
            Mode::ImageBased | Mode::PatchBased => vec![StageConfig {
                stage: StageId::Three,
                lambda_patch: None,
                ..base
            }],
        };
        out
    }
}
