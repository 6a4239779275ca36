//! Noise schedules and the per-step sampler arithmetic shared by every backend.
//!
//! Time runs from `t = T` (pure noise) down to `t = 0` (clean data) for both
//! backends; the flow-matching time axis is reversed to follow the diffusion
//! convention.
//!
//! Diffusion: `z_t = √ᾱ_t z_0 + √(1−ᾱ_t) ε`, velocity `v = √ᾱ_t ε − √(1−ᾱ_t) z_0`.
//! Flow:      `z_t = (1−σ_t) z_0 + σ_t ε`,  velocity `v = ε − z_0`.

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

pub const DEFAULT_STEPS: usize = 50;

/// Offset of the cosine schedule; keeps ᾱ from collapsing too quickly near t = 0.
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Diffusion,
    Flow,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Diffusion => "diffusion",
            ScheduleKind::Flow => "flow",
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    /// ᾱ_t for diffusion, σ_t for flow; length `steps + 1`.
    levels: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine ᾱ schedule with ᾱ_0 = 1 and ᾱ_T clamped to exactly 0.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::MalformedSchedule("step count must be positive".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut levels: Vec<f64> = (0..=steps).map(|t| (f(t) / f0).clamp(0.0, 1.0)).collect();
        levels[0] = 1.0;
        levels[steps] = 0.0;
        Self::diffusion_from_alpha_bar(levels)
    }

    /// Uniform σ_t = t / T.
    pub fn uniform_flow(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::MalformedSchedule("step count must be positive".into()));
        }
        let levels = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        Self::flow_from_sigma(levels)
    }

    pub fn for_kind(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Diffusion => Self::cosine(steps),
            ScheduleKind::Flow => Self::uniform_flow(steps),
        }
    }

    pub fn diffusion_from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::MalformedSchedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 || *alpha_bar.last().unwrap() != 0.0 {
            return Err(Error::MalformedSchedule("require ᾱ_0 = 1 and ᾱ_T = 0".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::MalformedSchedule("ᾱ must be strictly decreasing".into()));
        }
        Ok(Self {
            kind: ScheduleKind::Diffusion,
            steps: alpha_bar.len() - 1,
            levels: alpha_bar,
        })
    }

    pub fn flow_from_sigma(sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() < 2 {
            return Err(Error::MalformedSchedule("need at least one step".into()));
        }
        if sigma[0] != 0.0 || *sigma.last().unwrap() != 1.0 {
            return Err(Error::MalformedSchedule("require σ_0 = 0 and σ_T = 1".into()));
        }
        if sigma.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::MalformedSchedule("σ must be strictly increasing".into()));
        }
        Ok(Self {
            kind: ScheduleKind::Flow,
            steps: sigma.len() - 1,
            levels: sigma,
        })
    }

    /// Schedule without monotonicity checks, for exercising the error paths of
    /// the step functions (e.g. plateaus in ᾱ).
    pub fn diffusion_unchecked(alpha_bar: Vec<f64>) -> Self {
        Self {
            kind: ScheduleKind::Diffusion,
            steps: alpha_bar.len() - 1,
            levels: alpha_bar,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::StepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    fn expect(&self, kind: ScheduleKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongBackend {
                expected: kind.name(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.expect(ScheduleKind::Diffusion)?;
        self.check_t(t)?;
        Ok(self.levels[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.expect(ScheduleKind::Flow)?;
        self.check_t(t)?;
        Ok(self.levels[t])
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// β_t = ᾱ_t / ᾱ_{t−1}.
    pub fn beta(&self, t: usize) -> Result<f64> {
        beta_from_alpha_bar(t, self)
    }

    /// Coefficients `(a, b)` with `z_t = a·z_0 + b·ε`.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let l = self.levels[t];
        Ok(match self.kind {
            ScheduleKind::Diffusion => (l.sqrt(), (1.0 - l).sqrt()),
            ScheduleKind::Flow => (1.0 - l, l),
        })
    }

    /// Coefficients `(a, b)` of the clean estimate `z_{0|t} = a·z_t − b·v`.
    pub fn clean_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let l = self.levels[t];
        Ok(match self.kind {
            ScheduleKind::Diffusion => (l.sqrt(), (1.0 - l).sqrt()),
            ScheduleKind::Flow => (1.0, l),
        })
    }

    /// The regression target for a denoiser at level t.
    pub fn velocity_target(&self, z0: &Array4<f64>, eps: &Array4<f64>, t: usize) -> Result<Array4<f64>> {
        self.check_t(t)?;
        let l = self.levels[t];
        Ok(match self.kind {
            ScheduleKind::Diffusion => {
                let (a, b) = (l.sqrt(), (1.0 - l).sqrt());
                Zip::from(eps).and(z0).map_collect(|&e, &z| a * e - b * z)
            }
            ScheduleKind::Flow => eps - z0,
        })
    }
}

/// State of a sampling trajectory: the current latent, its step, and the seed
/// all stochastic draws at this state derive from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: LatentTensor,
    pub t: usize,
    pub rng_seed: u64,
}

fn lincomb(a: f64, x: &LatentTensor, b: f64, y: &LatentTensor) -> Result<LatentTensor> {
    let data = Zip::from(x.data())
        .and(y.data())
        .map_collect(|&p, &q| a * p + b * q);
    LatentTensor::new(data)
}

/// Clean-latent estimate `√ᾱ_t·z_t − √(1−ᾱ_t)·v`.
pub fn tweedie_clean(
    z_t: &LatentTensor,
    v: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    z_t.check_same_shape(v, "tweedie_clean")?;
    lincomb(ab.sqrt(), z_t, -(1.0 - ab).sqrt(), v)
}

/// Flow-matching clean estimate `z_t − σ_t·v`.
pub fn tweedie_clean_flow(
    z_t: &LatentTensor,
    v: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let s = sched.sigma(t)?;
    z_t.check_same_shape(v, "tweedie_clean_flow")?;
    lincomb(1.0, z_t, -s, v)
}

/// Dispatches to the backend's clean estimate.
pub fn predict_clean(
    z_t: &LatentTensor,
    v: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    match sched.kind() {
        ScheduleKind::Diffusion => tweedie_clean(z_t, v, t, sched),
        ScheduleKind::Flow => tweedie_clean_flow(z_t, v, t, sched),
    }
}

/// Noises `z_0` to level t with the given ε.
pub fn forward_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    z0.check_same_shape(eps, "forward_noise")?;
    let (a, b) = sched.marginal_coeffs(t)?;
    // exact endpoints regardless of rounding in the coefficients
    if b == 0.0 {
        return Ok(z0.clone());
    }
    if a == 0.0 {
        return Ok(eps.clone());
    }
    lincomb(a, z0, b, eps)
}

/// Deterministic DDIM step from t to t−1.
pub fn ddim_step(
    z_t: &LatentTensor,
    z0_pred: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    z_t.check_same_shape(z0_pred, "ddim_step")?;
    if ab >= 1.0 {
        return Err(Error::MalformedSchedule(format!(
            "ᾱ_{t} = 1 at t > 0 (division by zero in the noise estimate)"
        )));
    }
    let ab_prev = sched.alpha_bar(t - 1)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = Zip::from(z_t.data())
        .and(z0_pred.data())
        .map_collect(|&z, &x0| {
            let eps = (z - sa * x0) / sb;
            if pb == 0.0 {
                x0
            } else {
                pa * x0 + pb * eps
            }
        });
    LatentTensor::new(data)
}

/// Euler step along the flow field from t to t−1.
pub fn euler_flow_step(
    z_t: &LatentTensor,
    v: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let s = sched.sigma(t)?;
    if t == 0 {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    z_t.check_same_shape(v, "euler_flow_step")?;
    let ds = sched.sigma(t - 1)? - s;
    lincomb(1.0, z_t, ds, v)
}

/// β_t = ᾱ_t / ᾱ_{t−1}, the one-step forward-process retention.
pub fn beta_from_alpha_bar(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument("β is defined for t ≥ 1".into()));
    }
    let prev = sched.alpha_bar(t - 1)?;
    if prev == 0.0 {
        return Err(Error::MalformedSchedule(format!("ᾱ_{} = 0 before the last step", t - 1)));
    }
    Ok((ab / prev).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn scalar(v: f64) -> LatentTensor {
        LatentTensor::new(Array4::from_elem((1, 1, 1, 1), v)).unwrap()
    }

    fn val(z: &LatentTensor) -> f64 {
        z.data()[[0, 0, 0, 0]]
    }

    #[test]
    fn cosine_invariants() {
        let s = NoiseSchedule::cosine(50).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert_eq!(s.alpha_bar(50).unwrap(), 0.0);
        for t in 1..=50 {
            let b = s.beta(t).unwrap();
            assert!((0.0..=1.0).contains(&b));
        }
        assert_eq!(s.beta(50).unwrap().sqrt(), 0.0);
    }

    #[test]
    fn flow_invariants() {
        let s = NoiseSchedule::uniform_flow(50).unwrap();
        assert_eq!(s.sigma(0).unwrap(), 0.0);
        assert_eq!(s.sigma(50).unwrap(), 1.0);
        assert!(s.alpha_bar(3).is_err());
    }

    #[test]
    fn malformed_schedules_are_rejected() {
        assert!(NoiseSchedule::diffusion_from_alpha_bar(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::diffusion_from_alpha_bar(vec![0.9, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::flow_from_sigma(vec![0.0, 0.7, 0.5, 1.0]).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn tweedie_trivial_cases() {
        // ᾱ_1 = 0.25 → 0.5·z_t when v = 0
        let s = NoiseSchedule::diffusion_from_alpha_bar(vec![1.0, 0.25, 0.0]).unwrap();
        let z = scalar(3.0);
        assert_eq!(val(&tweedie_clean(&z, &scalar(0.0), 1, &s).unwrap()), 1.5);
        assert_eq!(val(&tweedie_clean(&z, &scalar(7.0), 0, &s).unwrap()), 3.0);
        assert!(tweedie_clean(&z, &scalar(0.0), 3, &s).is_err());
        let bad = LatentTensor::zeros((2, 1, 1, 1));
        assert!(matches!(
            tweedie_clean(&z, &bad, 1, &s),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tweedie_flow_trivial_cases() {
        let s = NoiseSchedule::uniform_flow(4).unwrap();
        let z = scalar(2.5);
        assert_eq!(val(&tweedie_clean_flow(&z, &z, 4, &s).unwrap()), 0.0);
        assert_eq!(val(&tweedie_clean_flow(&z, &scalar(0.0), 2, &s).unwrap()), 2.5);
        assert!(tweedie_clean_flow(&z, &z, 2, &NoiseSchedule::cosine(4).unwrap()).is_err());
    }

    #[test]
    fn forward_noise_endpoints() {
        let z0 = LatentTensor::randn((2, 3, 3, 2), 1);
        let eps = LatentTensor::randn((2, 3, 3, 2), 2);
        for s in [NoiseSchedule::cosine(50).unwrap(), NoiseSchedule::uniform_flow(50).unwrap()] {
            assert_eq!(forward_noise(&z0, 0, &eps, &s).unwrap(), z0);
            assert_eq!(forward_noise(&z0, 50, &eps, &s).unwrap(), eps);
        }
    }

    #[test]
    fn ddim_trivial_cases() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x0 = LatentTensor::randn((1, 2, 2, 1), 3);
        // consistent with zero noise
        let ab = s.alpha_bar(6).unwrap();
        let zt = LatentTensor::new(x0.data() * ab.sqrt()).unwrap();
        let out = ddim_step(&zt, &x0, 6, &s).unwrap();
        let expect = x0.data() * s.alpha_bar(5).unwrap().sqrt();
        assert!((out.data() - &expect).iter().all(|d| d.abs() < 1e-12));
        // t = 1 → returns the prediction exactly
        let zt = LatentTensor::randn((1, 2, 2, 1), 4);
        assert_eq!(ddim_step(&zt, &x0, 1, &s).unwrap(), x0);
        assert!(ddim_step(&zt, &x0, 0, &s).is_err());
        // ᾱ_t = 1 at t > 0
        let flat = NoiseSchedule::diffusion_unchecked(vec![1.0, 1.0, 0.0]);
        assert!(matches!(
            ddim_step(&zt, &x0, 1, &flat),
            Err(Error::MalformedSchedule(_))
        ));
    }

    #[test]
    fn euler_trivial_cases() {
        let s = NoiseSchedule::uniform_flow(5).unwrap();
        let z = LatentTensor::randn((1, 2, 2, 1), 5);
        assert_eq!(euler_flow_step(&z, &LatentTensor::zeros(z.dim()), 3, &s).unwrap(), z);
        assert!(euler_flow_step(&z, &z, 0, &s).is_err());
        let plateau = NoiseSchedule {
            kind: ScheduleKind::Flow,
            steps: 3,
            levels: vec![0.0, 0.5, 0.5, 1.0],
        };
        assert_eq!(euler_flow_step(&z, &z, 2, &plateau).unwrap(), z);
    }

    #[test]
    fn beta_cases() {
        let s = NoiseSchedule::cosine(50).unwrap();
        assert_eq!(s.beta(50).unwrap().sqrt(), 0.0);
        assert_eq!((1.0 - s.beta(50).unwrap()).sqrt(), 1.0);
        let plateau = NoiseSchedule::diffusion_unchecked(vec![1.0, 0.5, 0.5, 0.0]);
        assert_eq!(beta_from_alpha_bar(2, &plateau).unwrap(), 1.0);
        let dead = NoiseSchedule::diffusion_unchecked(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            beta_from_alpha_bar(2, &dead),
            Err(Error::MalformedSchedule(_))
        ));
        assert!(beta_from_alpha_bar(0, &s).is_err());
    }
}
