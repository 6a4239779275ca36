//! Video latent optimization: how a guidance gradient changes the latent at
//! each step, and which rule applies when.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::{ddim_step, forward_noise, NoiseSchedule, ScheduleKind};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepeatSchedule {
    Constant,
    /// Repeat count falls linearly from `M` to 1 over the first `span` steps.
    LinearDecay { span: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub eta: f64,
    /// Repetitions per guided step.
    pub repeats: usize,
    /// Steps with `t > t_layout` use the deterministic update.
    pub t_layout: usize,
    /// Steps with `t_layout ≥ t > t_detail` use time travel; below that the
    /// sampler runs unguided.
    pub t_detail: usize,
    pub normalize_grad: bool,
    pub repeat_schedule: RepeatSchedule,
    pub backend: ScheduleKind,
}

impl GuidanceConfig {
    /// Diffusion defaults: η = 3, M = 10 decaying over 15 steps, layout stage
    /// for the first 5 steps and detail stage through step 20.
    pub fn diffusion_default(steps: usize) -> Self {
        Self {
            eta: 3.0,
            repeats: 10,
            t_layout: steps.saturating_sub(5),
            t_detail: steps.saturating_sub(20),
            normalize_grad: true,
            repeat_schedule: RepeatSchedule::LinearDecay { span: 15 },
            backend: ScheduleKind::Diffusion,
        }
    }

    /// Flow defaults: layout stage for the first 2 steps, then 10 time-travel
    /// steps, with the repeat count decaying over 10 steps.
    pub fn flow_default(steps: usize) -> Self {
        Self {
            eta: 3.0,
            repeats: 10,
            t_layout: steps.saturating_sub(2),
            t_detail: steps.saturating_sub(12),
            normalize_grad: true,
            repeat_schedule: RepeatSchedule::LinearDecay { span: 10 },
            backend: ScheduleKind::Flow,
        }
    }

    pub fn default_for(kind: ScheduleKind, steps: usize) -> Self {
        match kind {
            ScheduleKind::Diffusion => Self::diffusion_default(steps),
            ScheduleKind::Flow => Self::flow_default(steps),
        }
    }

    /// The same configuration with guidance switched off (`t_detail = t_layout = T`).
    pub fn disabled(mut self, steps: usize) -> Self {
        self.t_layout = steps;
        self.t_detail = steps;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let t = sched.steps();
        if sched.kind() != self.backend {
            return Err(Error::InvalidArgument(format!(
                "guidance configured for {} but schedule is {}",
                self.backend,
                sched.kind()
            )));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("step size η = {} must be finite and ≥ 0", self.eta)));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeat count M must be at least 1".into()));
        }
        if !(t >= self.t_layout && self.t_layout >= self.t_detail) {
            return Err(Error::InvalidArgument(format!(
                "need T ≥ t_layout ≥ t_detail, got {t} ≥ {} ≥ {}",
                self.t_layout, self.t_detail
            )));
        }
        if let RepeatSchedule::LinearDecay { span: 0 } = self.repeat_schedule {
            return Err(Error::InvalidArgument("repeat decay span must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Layout,
    Detail,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub t: usize,
    pub stage: Stage,
    /// Repetitions at this step; 0 for free steps.
    pub repeats: usize,
}

/// Per-step stage assignment, ordered from `t = T` down to `t = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub entries: Vec<StageEntry>,
}

impl StagePlan {
    pub fn entry(&self, t: usize) -> Option<&StageEntry> {
        self.entries.iter().find(|e| e.t == t)
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }
}

pub fn plan_stages(cfg: &GuidanceConfig, sched: &NoiseSchedule) -> Result<StagePlan> {
    cfg.validate(sched)?;
    let steps = sched.steps();
    let entries = (1..=steps)
        .rev()
        .map(|t| {
            let stage = if t > cfg.t_layout {
                Stage::Layout
            } else if t > cfg.t_detail {
                Stage::Detail
            } else {
                Stage::Free
            };
            // 1-based inference step
            let k = steps - t + 1;
            let repeats = match (stage, cfg.repeat_schedule) {
                (Stage::Free, _) => 0,
                (_, RepeatSchedule::Constant) => cfg.repeats,
                (_, RepeatSchedule::LinearDecay { span }) => decayed_repeats(cfg.repeats, span, k),
            };
            StageEntry { t, stage, repeats }
        })
        .collect();
    Ok(StagePlan { entries })
}

fn decayed_repeats(m: usize, span: usize, k: usize) -> usize {
    if k >= span || span == 1 {
        return 1;
    }
    let frac = (k - 1) as f64 / (span - 1) as f64;
    (m as f64 - frac * (m - 1) as f64).round().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStatus {
    Applied,
    /// Normalisation was requested for an all-zero gradient.
    SkippedZeroGradient,
}

/// `ĝ = g / ‖g‖` (when normalising) scaled by η.
fn scaled_direction(grad: &LatentTensor, cfg: &GuidanceConfig) -> Option<ndarray::Array4<f64>> {
    if cfg.normalize_grad {
        let n = grad.norm();
        if n == 0.0 {
            return None;
        }
        Some(grad.data() * (cfg.eta / n))
    } else {
        Some(grad.data() * cfg.eta)
    }
}

fn subtract(z: &LatentTensor, step: Option<ndarray::Array4<f64>>) -> Result<(LatentTensor, UpdateStatus)> {
    match step {
        None => Ok((z.clone(), UpdateStatus::SkippedZeroGradient)),
        Some(s) => {
            let data = Zip::from(z.data()).and(&s).map_collect(|&a, &b| a - b);
            Ok((LatentTensor::new(data)?, UpdateStatus::Applied))
        }
    }
}

/// `z_t − η·ĝ`.
pub fn deterministic_update(
    z_t: &LatentTensor,
    grad: &LatentTensor,
    cfg: &GuidanceConfig,
) -> Result<(LatentTensor, UpdateStatus)> {
    z_t.check_same_shape(grad, "deterministic_update")?;
    subtract(z_t, scaled_direction(grad, cfg))
}

/// Diffusion time travel: DDIM to t−1, apply the gradient step there, then
/// renoise the updated latent back to level t with `√β_t·z + √(1−β_t)·ε`.
pub fn time_travel(
    z_t: &LatentTensor,
    z0_pred: &LatentTensor,
    grad: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    eps: &LatentTensor,
) -> Result<(LatentTensor, UpdateStatus)> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    z_t.check_same_shape(grad, "time_travel")?;
    z_t.check_same_shape(eps, "time_travel")?;
    let prev = ddim_step(z_t, z0_pred, t, sched)?;
    let (moved, status) = subtract(&prev, scaled_direction(grad, cfg))?;
    let beta = sched.beta(t)?;
    if beta == 0.0 {
        return Ok((eps.clone(), status));
    }
    let (a, b) = (beta.sqrt(), (1.0 - beta).sqrt());
    if b == 0.0 {
        return Ok((moved, status));
    }
    let data = Zip::from(moved.data()).and(eps.data()).map_collect(|&z, &e| a * z + b * e);
    Ok((LatentTensor::new(data)?, status))
}

/// Flow time travel: step the clean estimate against the gradient, then
/// re-noise it straight to level t.
pub fn time_travel_flow(
    z0_pred: &LatentTensor,
    grad: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    eps: &LatentTensor,
) -> Result<(LatentTensor, UpdateStatus)> {
    if sched.kind() != ScheduleKind::Flow {
        return Err(Error::WrongBackend { expected: "flow" });
    }
    z0_pred.check_same_shape(grad, "time_travel_flow")?;
    let (moved, status) = subtract(z0_pred, scaled_direction(grad, cfg))?;
    Ok((forward_noise(&moved, t, eps, sched)?, status))
}
