//! Training schedule: learning-rate curve, freeze window and objective stages.

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// PrefixLM, distilled from teacher sidecars when they are present.
    PrefixLm,
    Ul2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub total_steps: u64,
    pub lr_peak: f64,
    /// Linear warmup length; `None` means 1% of `total_steps`, at least one.
    pub lr_warmup_steps: Option<u64>,
    /// Cosine decay ends at `lr_floor_ratio · lr_peak`.
    pub lr_floor_ratio: f64,
    /// Cross-attention-only steps; `None` defers to the checkpoint metadata.
    pub freeze_xattn_steps: Option<u64>,
    /// Fraction of steps run on `objectives[0]`; 1.0 disables the switch.
    pub stage_switch_fraction: f64,
    pub objectives: [Objective; 2],
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub max_in: usize,
    pub max_out: usize,
    /// Decoder-only runs: also train on the input half.
    pub loss_on_input: bool,
    /// Weight of the distillation term when sidecars exist.
    pub kd_lambda: f64,
    pub eval_every: u64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            lr_peak: 1e-3,
            lr_warmup_steps: None,
            lr_floor_ratio: 0.1,
            freeze_xattn_steps: None,
            stage_switch_fraction: 1.0,
            objectives: [Objective::PrefixLm, Objective::PrefixLm],
            grad_clip_norm: 1.0,
            batch_size: 8,
            max_in: 256,
            max_out: 256,
            loss_on_input: true,
            kd_lambda: 1.0,
            eval_every: 50,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak {} must be a non-negative number", self.lr_peak));
        }
        if !(0.0..=1.0).contains(&self.lr_floor_ratio) {
            return bad("lr_floor_ratio must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.stage_switch_fraction) {
            return bad("stage_switch_fraction must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.kd_lambda) {
            return bad("kd_lambda must be in [0, 1]".into());
        }
        if self.freeze_xattn_steps.is_some_and(|k| k > self.total_steps) {
            return bad("freeze_xattn_steps exceeds total_steps".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_in == 0 || self.max_out == 0 {
            return bad("batch_size, eval_every and length limits must be positive".into());
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.lr_warmup_steps
            .unwrap_or_else(|| (self.total_steps as f64 * 0.01).ceil() as u64)
            .max(1)
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup();
        if step < w {
            return self.lr_peak * (step + 1) as f64 / w as f64;
        }
        let floor = self.lr_peak * self.lr_floor_ratio;
        let span = self.total_steps.saturating_sub(w).max(1);
        let progress = ((step - w) as f64 / span as f64).min(1.0);
        floor + (self.lr_peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// First step of the second stage.
    pub fn switch_step(&self) -> u64 {
        (self.stage_switch_fraction * self.total_steps as f64).round() as u64
    }

    pub fn stage_at(&self, step: u64) -> usize {
        usize::from(step >= self.switch_step())
    }

    pub fn objective_at(&self, step: u64) -> Objective {
        self.objectives[self.stage_at(step)]
    }
}
