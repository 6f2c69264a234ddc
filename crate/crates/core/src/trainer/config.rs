use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{cells_for_fraction, GridSpec};
use crate::tensor::{AdamConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Patchgd,
    Gd,
    GdExtended,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Patchgd => "patchgd",
            Mode::Gd => "gd",
            Mode::GdExtended => "gd_extended",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patchgd" => Ok(Mode::Patchgd),
            "gd" => Ok(Mode::Gd),
            "gd_extended" => Ok(Mode::GdExtended),
            _ => Err(Error::Config(format!("unknown mode `{s}` (patchgd, gd, gd_extended)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Patch side `p` in pixels.
    pub patch_size: usize,
    /// Patches per inner iteration `k`; overrides `sampling_fraction`.
    pub patches_per_step: Option<usize>,
    /// `k = ⌈fraction·m·n⌉` when `patches_per_step` is unset.
    pub sampling_fraction: f64,
    /// `μ`: fraction of the grid that may be refreshed per outer iteration.
    pub max_coverage: f64,
    /// `ζ`; defaults to the number of steps needed to spend the coverage budget.
    pub inner_iterations: Option<usize>,
    /// `ε`: inner iterations averaged into one optimizer step.
    pub grad_accum: usize,
    /// Apply leftover accumulated gradients at the end of an outer iteration.
    pub flush_remainder: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_epochs: f64,
    /// Epoch at which the decay reaches half the peak.
    pub schedule_epochs: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Patches per forward call while filling the latent grid.
    pub fill_chunk: usize,
    pub pad_value: f32,
    pub eval_batch: usize,
    /// Write real elapsed seconds to the run log (otherwise 0, keeping logs
    /// byte-reproducible).
    pub record_wall_clock: bool,
    /// Checkpoint whose `backbone.*` parameters initialize the run.
    pub init_backbone: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Patchgd,
            patch_size: 32,
            patches_per_step: None,
            sampling_fraction: 0.1,
            max_coverage: 1.0,
            inner_iterations: None,
            grad_accum: 1,
            flush_remainder: false,
            batch_size: 8,
            epochs: 30,
            lr: 1e-3,
            warmup_epochs: 2.0,
            schedule_epochs: 100.0,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            seed: 0,
            fill_chunk: 64,
            pad_value: 0.0,
            eval_batch: 32,
            record_wall_clock: false,
            init_backbone: None,
        }
    }
}

/// Iteration sizes for a concrete image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolved {
    pub grid: GridSpec,
    /// `k`
    pub patches_per_step: usize,
    /// `ζ`
    pub inner_iterations: usize,
    /// `⌈μ·m·n⌉`
    pub coverage_budget: usize,
    /// Inner iterations that find patches left to sample.
    pub effective_inner: usize,
    /// Optimizer steps per outer iteration.
    pub updates_per_outer: usize,
}

impl TrainConfig {
    /// Checks every setting that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size < 8 || !self.patch_size.is_power_of_two() {
            return fail(format!(
                "train.patch_size must be a power of two >= 8, got {}",
                self.patch_size
            ));
        }
        if self.grad_accum == 0 {
            return fail("train.grad_accum (epsilon) must be >= 1".into());
        }
        if self.inner_iterations == Some(0) {
            return fail("train.inner_iterations (zeta) must be >= 1".into());
        }
        if let Some(z) = self.inner_iterations {
            if self.grad_accum > z {
                return fail(format!(
                    "train.grad_accum (epsilon = {}) exceeds train.inner_iterations (zeta = {z})",
                    self.grad_accum
                ));
            }
        }
        if self.patches_per_step == Some(0) {
            return fail("train.patches_per_step (k) must be >= 1".into());
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return fail(format!(
                "train.sampling_fraction must lie in (0, 1], got {}",
                self.sampling_fraction
            ));
        }
        if !(self.max_coverage > 0.0 && self.max_coverage <= 1.0) {
            return fail(format!(
                "train.max_coverage (mu) must lie in (0, 1], got {}",
                self.max_coverage
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.fill_chunk == 0 || self.eval_batch == 0 {
            return fail("train.batch_size, epochs, fill_chunk and eval_batch must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("train.lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.warmup_epochs >= 0.0 && self.schedule_epochs > self.warmup_epochs) {
            return fail(format!(
                "schedule needs 0 <= warmup_epochs ({}) < schedule_epochs ({})",
                self.warmup_epochs, self.schedule_epochs
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail(format!("adam betas must lie in [0, 1) and eps > 0, got {a:?}"));
        }
        Ok(())
    }

    /// Resolves `k`, `ζ` and the update cadence for `height × width`
    /// images (padded to the grid).
    pub fn resolve(&self, height: usize, width: usize) -> Result<Resolved> {
        self.validate()?;
        let grid = GridSpec::padded(height, width, self.patch_size)?;
        let cells = grid.cells();
        let k = match self.patches_per_step {
            Some(k) if k > cells => {
                return Err(Error::Config(format!(
                    "train.patches_per_step (k = {k}) exceeds the {cells} cells of a {}x{} grid",
                    grid.rows, grid.cols
                )))
            }
            Some(k) => k,
            None => cells_for_fraction(self.sampling_fraction, cells),
        };
        let budget = cells_for_fraction(self.max_coverage, cells);
        let steps_to_exhaust = budget.div_ceil(k);
        let zeta = self.inner_iterations.unwrap_or(steps_to_exhaust);
        if self.grad_accum > zeta {
            return Err(Error::Config(format!(
                "train.grad_accum (epsilon = {}) exceeds zeta = {zeta}",
                self.grad_accum
            )));
        }
        let effective = zeta.min(steps_to_exhaust);
        let mut updates = effective / self.grad_accum;
        if self.flush_remainder && effective % self.grad_accum != 0 {
            updates += 1;
        }
        if self.mode == Mode::Patchgd && updates == 0 {
            return Err(Error::Config(format!(
                "the sampler is exhausted after {effective} inner iterations (k = {k}, budget {budget}), before the first update at epsilon = {}",
                self.grad_accum
            )));
        }
        if self.mode == Mode::Patchgd && k * zeta > budget {
            log::warn!("k*zeta = {} exceeds the coverage budget {budget}; the last inner iterations sample fewer patches or none", k * zeta);
        }
        Ok(Resolved {
            grid,
            patches_per_step: k,
            inner_iterations: zeta,
            coverage_budget: budget,
            effective_inner: effective,
            updates_per_outer: updates,
        })
    }
}
