//! The guided sampler: at each guided step, predict the clean latent, decode
//! only the guided frames, and push the latent along the loss gradient.

use std::ops::Range;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{condition_distance, temporal_coherence};
use crate::error::{Error, Result};
use crate::losses::FrameCondition;
use crate::schedules::{ddim_step, euler_flow_step, forward_noise, predict_clean, NoiseSchedule, ScheduleKind};
use crate::slicing::{frame_to_latent, merge_windows, slice_decode};
use crate::tensor::{derive_seed, LatentTensor, VideoTensor};
use crate::toyvdm::ModelBundle;
use crate::vlo::{deterministic_update, plan_stages, time_travel, time_travel_flow, GuidanceConfig, Stage, UpdateStatus};

/// How the guidance gradient reaches `z_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Through the decoder and the velocity predictor.
    #[default]
    Full,
    /// Through the decoder only; the predictor is treated as constant.
    Shortcut,
}

/// Everything one guided sampling run needs.
#[derive(Debug, Clone)]
pub struct GuidanceRun<'a> {
    pub models: &'a ModelBundle,
    pub sched: NoiseSchedule,
    pub cfg: GuidanceConfig,
    /// `None` samples without guidance.
    pub condition: Option<FrameCondition>,
    /// Output frame count; at most what the latent length decodes to.
    pub frames: usize,
    pub window: usize,
    pub downsample: usize,
    pub seed: u64,
    pub mode: GradientMode,
    /// Keep every step's clean-latent prediction in the output.
    pub record_snapshots: bool,
}

impl<'a> GuidanceRun<'a> {
    /// A run with backend defaults, a 3-latent window and no downsampling.
    pub fn new(models: &'a ModelBundle, condition: Option<FrameCondition>, seed: u64) -> Result<Self> {
        let kind = models.denoiser.backend();
        let steps = models.denoiser.config.steps;
        let sched = NoiseSchedule::for_kind(kind, steps)?;
        Ok(Self {
            models,
            cfg: GuidanceConfig::default_for(kind, steps),
            sched,
            condition,
            frames: models.vae.frames_for_latents(models.denoiser.config.latents),
            window: 3,
            downsample: 1,
            seed,
            mode: GradientMode::Full,
            record_snapshots: false,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize, usize) {
        let d = &self.models.denoiser.config;
        let sf = self.models.vae.config.spatial_factor;
        let (h, w) = self.frame_hw();
        (d.latents, h / sf, w / sf, d.latent_channels)
    }

    fn frame_hw(&self) -> (usize, usize) {
        let hw = self.models.denoiser.config.grid * self.models.vae.config.spatial_factor;
        (hw, hw)
    }

    /// Latent indices whose frames the condition reads.
    pub fn guided_latents(&self) -> Vec<usize> {
        let r = self.models.vae.temporal_rate();
        let mut js: Vec<usize> = self
            .condition
            .iter()
            .flat_map(|c| c.guided_frames())
            .map(|i| frame_to_latent(i, r))
            .collect();
        js.sort_unstable();
        js.dedup();
        js
    }

    /// Merged slice windows of the guided latents.
    pub fn guided_windows(&self) -> Result<Vec<Range<usize>>> {
        merge_windows(&self.guided_latents(), self.window, self.latent_shape().0)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate(&self.sched)?;
        if self.models.denoiser.backend() != self.sched.kind() {
            return Err(Error::InvalidArgument("denoiser backend differs from the schedule".into()));
        }
        if self.models.denoiser.config.steps != self.sched.steps() {
            return Err(Error::InvalidArgument("denoiser step count differs from the schedule".into()));
        }
        let max_frames = self.models.vae.frames_for_latents(self.latent_shape().0);
        if self.frames == 0 || self.frames > max_frames {
            return Err(Error::InvalidArgument(format!(
                "{} frames requested, latents decode to {max_frames}",
                self.frames
            )));
        }
        if self.window == 0 || self.downsample == 0 {
            return Err(Error::InvalidArgument("window and downsample factor must be ≥ 1".into()));
        }
        if let Some(c) = &self.condition {
            let (h, w) = self.frame_hw();
            c.validate(self.frames, (h, w, self.models.vae.config.channels))?;
        }
        Ok(())
    }

    fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, 0, 0)
    }

    fn travel_seed(&self, t: usize, m: usize) -> u64 {
        derive_seed(self.seed, t as u64, m as u64 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: usize,
    pub m: usize,
    pub stage: Stage,
    pub loss: f64,
    pub grad_norm: f64,
    pub status: UpdateStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub t: usize,
    pub sha256: String,
}

/// Per-step record of a guided run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    /// Hash of each step's clean-latent prediction, in step order.
    pub snapshots: Vec<SnapshotRecord>,
}

pub fn latent_hash(z: &LatentTensor) -> String {
    let mut h = Sha256::new();
    for v in z.data().iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct GuidanceOutput {
    pub video: VideoTensor,
    pub latent: LatentTensor,
    pub trace: Trace,
    /// `(t, z_{0|t})` for t = T..1 when snapshots were requested.
    pub snapshots: Vec<(usize, LatentTensor)>,
}

/// Loss value and gradient with respect to `z_t` at one guided evaluation.
#[derive(Debug, Clone)]
pub struct GuidanceGradient {
    pub loss: f64,
    pub grad: LatentTensor,
    pub z0: LatentTensor,
}

/// Evaluates the (already downsampled) condition at `z_t` and backpropagates
/// to `z_t` through the sliced decoder and, in full mode, the predictor.
pub fn guidance_gradient(
    run: &GuidanceRun,
    cond: &FrameCondition,
    z: &LatentTensor,
    t: usize,
) -> Result<GuidanceGradient> {
    let ModelBundle { vae, denoiser } = run.models;
    let (v, tape) = denoiser.velocity_with_tape(z, t)?;
    let z0 = predict_clean(z, &v, t, &run.sched)?;
    let sd = slice_decode(vae, &z0, &run.guided_latents(), run.window, run.downsample)?;
    let lg = cond.evaluate(&|i| sd.frame(i))?;
    let g0 = sd.vjp(vae, &lg.grads)?;
    let (a, b) = run.sched.clean_coeffs(t)?;
    let mut g = &g0 * a;
    if run.mode == GradientMode::Full && b != 0.0 {
        let through_v = denoiser.vjp(&tape, &(&g0 * -b), None);
        g += &through_v;
    }
    if !lg.value.is_finite() {
        return Err(Error::NonFinite(format!("guidance loss at t = {t}")));
    }
    let grad = LatentTensor::new(g).map_err(|_| Error::NonFinite(format!("guidance gradient at t = {t}")))?;
    Ok(GuidanceGradient {
        loss: lg.value,
        grad,
        z0,
    })
}

/// One unguided sampler step from t to t−1. Returns the new latent and the
/// clean prediction it used.
fn denoise_step(run: &GuidanceRun, z: &LatentTensor, t: usize) -> Result<(LatentTensor, LatentTensor)> {
    let v = run.models.denoiser.velocity(z, t)?;
    let z0 = predict_clean(z, &v, t, &run.sched)?;
    let next = match run.sched.kind() {
        ScheduleKind::Diffusion => ddim_step(z, &z0, t, &run.sched)?,
        ScheduleKind::Flow => euler_flow_step(z, &v, t, &run.sched)?,
    };
    Ok((next, z0))
}

fn finish(run: &GuidanceRun, z: LatentTensor, trace: Trace, snapshots: Vec<(usize, LatentTensor)>) -> Result<GuidanceOutput> {
    let video = run.models.vae.decode_frames(&z, run.frames)?;
    Ok(GuidanceOutput {
        video,
        latent: z,
        trace,
        snapshots,
    })
}

/// Runs the sampler from `z` at step `t_init` down to 0, guiding wherever the
/// stage plan says so.
fn sample_from(run: &GuidanceRun, mut z: LatentTensor, t_init: usize) -> Result<GuidanceOutput> {
    run.validate()?;
    let plan = plan_stages(&run.cfg, &run.sched)?;
    let cond = run.condition.as_ref().map(|c| c.downsampled(run.downsample)).transpose()?;
    let mut trace = Trace::default();
    let mut snapshots = Vec::new();
    for t in (1..=t_init).rev() {
        let entry = *plan.entry(t).expect("plan covers every step");
        if let (Some(cond), true) = (&cond, entry.stage != Stage::Free) {
            for m in 0..entry.repeats {
                let gg = match guidance_gradient(run, cond, &z, t) {
                    Ok(gg) => gg,
                    Err(e) if e.is_numerical() => {
                        return Err(Error::Aborted {
                            t,
                            reason: e.to_string(),
                            trace: Box::new(trace),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let (next, status) = match (entry.stage, run.sched.kind()) {
                    (Stage::Layout, _) => deterministic_update(&z, &gg.grad, &run.cfg)?,
                    (_, ScheduleKind::Diffusion) => {
                        let eps = LatentTensor::randn(z.dim(), run.travel_seed(t, m));
                        time_travel(&z, &gg.z0, &gg.grad, t, &run.sched, &run.cfg, &eps)?
                    }
                    (_, ScheduleKind::Flow) => {
                        let eps = LatentTensor::randn(z.dim(), run.travel_seed(t, m));
                        time_travel_flow(&gg.z0, &gg.grad, t, &run.sched, &run.cfg, &eps)?
                    }
                };
                trace.entries.push(TraceEntry {
                    t,
                    m,
                    stage: entry.stage,
                    loss: gg.loss,
                    grad_norm: gg.grad.norm(),
                    status,
                });
                z = next;
            }
        }
        let (next, z0) = denoise_step(run, &z, t)?;
        trace.snapshots.push(SnapshotRecord {
            t,
            sha256: latent_hash(&z0),
        });
        if run.record_snapshots {
            snapshots.push((t, z0));
        }
        z = next;
    }
    finish(run, z, trace, snapshots)
}

/// Guided generation from pure noise.
pub fn run_frame_guidance(run: &GuidanceRun) -> Result<GuidanceOutput> {
    let z = LatentTensor::randn(run.latent_shape(), run.noise_seed());
    sample_from(run, z, run.sched.steps())
}

/// The plain sampler: same noise draw, no guidance code path at all.
pub fn sample_unguided(run: &GuidanceRun) -> Result<GuidanceOutput> {
    let mut z = LatentTensor::randn(run.latent_shape(), run.noise_seed());
    for t in (1..=run.sched.steps()).rev() {
        z = denoise_step(run, &z, t)?.0;
    }
    finish(run, z, Trace::default(), Vec::new())
}

/// Edits `source` by noising its latent to `t_start` and re-running the guided
/// sampler from there.
pub fn run_sdedit_v2v(run: &GuidanceRun, source: &VideoTensor, t_start: usize) -> Result<GuidanceOutput> {
    if t_start > run.sched.steps() {
        return Err(Error::StepOutOfRange {
            t: t_start,
            max: run.sched.steps(),
        });
    }
    if t_start > run.cfg.t_layout {
        log::warn!("SDEdit starts at t = {t_start}, above the detail stage (t_layout = {})", run.cfg.t_layout);
    }
    let z0 = run.models.vae.encode(source)?;
    if z0.dim() != run.latent_shape() {
        return Err(Error::ShapeMismatch(format!(
            "source encodes to {:?}, sampler expects {:?}",
            z0.dim(),
            run.latent_shape()
        )));
    }
    let eps = LatentTensor::randn(z0.dim(), run.noise_seed());
    let z = forward_noise(&z0, t_start, &eps, &run.sched)?;
    sample_from(run, z, t_start)
}

/// Per-latent gradient norms of the guidance loss at a set of probe steps,
/// taken along the unguided trajectory of `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPropagationMap {
    pub mode: GradientMode,
    pub guided_latents: Vec<usize>,
    pub windows: Vec<Range<usize>>,
    pub steps: Vec<usize>,
    /// `norms[k][j]` = ‖∂L/∂(z_t)_j‖ at `steps[k]`.
    pub norms: Vec<Vec<f64>>,
}

pub fn grad_propagation_map(run: &GuidanceRun, probes: &[usize]) -> Result<GradPropagationMap> {
    run.validate()?;
    let cond = run
        .condition
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("gradient propagation needs a condition".into()))?
        .downsampled(run.downsample)?;
    let mut z = LatentTensor::randn(run.latent_shape(), run.noise_seed());
    let mut steps = Vec::new();
    let mut norms = Vec::new();
    for t in (1..=run.sched.steps()).rev() {
        if probes.contains(&t) {
            let gg = guidance_gradient(run, &cond, &z, t)?;
            steps.push(t);
            norms.push(
                gg.grad
                    .data()
                    .outer_iter()
                    .map(|gj| gj.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect(),
            );
        }
        z = denoise_step(run, &z, t)?.0;
    }
    Ok(GradPropagationMap {
        mode: run.mode,
        guided_latents: run.guided_latents(),
        windows: run.guided_windows()?,
        steps,
        norms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    /// Condition loss on the final full-resolution video.
    pub condition_loss: f64,
    /// Squared error to the target for each guided keyframe.
    pub per_frame_distance: Vec<f64>,
    /// Mean adjacent-frame L2 divided by the unguided baseline's.
    pub coherence: f64,
    /// The same ratio restricted to frame pairs touching the guided frames' latent blocks.
    pub local_coherence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutReport {
    pub seed: u64,
    pub guided_frames: Vec<usize>,
    pub unguided_condition_loss: f64,
    pub full: ModeResult,
    pub shortcut: ModeResult,
}

/// Frame pairs `(i, i+1)` with either frame inside a guided latent block.
fn local_pairs(frames: &[usize], r: usize, total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &i in frames {
        let block = crate::toyvdm::latent_frames(frame_to_latent(i, r), r);
        let lo = block.start.saturating_sub(1);
        let hi = (block.end).min(total - 1);
        out.extend(lo..hi);
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn mode_result(run: &GuidanceRun, video: &VideoTensor, base: &VideoTensor) -> Result<ModeResult> {
    let cond = run.condition.as_ref().expect("checked by caller");
    let r = run.models.vae.temporal_rate();
    let frames = cond.guided_frames();
    let per_frame_distance = match cond {
        FrameCondition::Keyframe { frames, targets } => frames
            .iter()
            .zip(targets)
            .map(|(&i, t)| (&video.frame(i) - t).iter().map(|d| d * d).sum())
            .collect(),
        _ => Vec::new(),
    };
    let pairs = local_pairs(&frames, r, video.frames());
    let all: Vec<usize> = (0..video.frames() - 1).collect();
    Ok(ModeResult {
        condition_loss: condition_distance(cond, video)?,
        per_frame_distance,
        coherence: temporal_coherence(video, &all) / temporal_coherence(base, &all).max(1e-12),
        local_coherence: temporal_coherence(video, &pairs) / temporal_coherence(base, &pairs).max(1e-12),
    })
}

/// Full-gradient vs shortcut-gradient guidance on the same seed.
pub fn run_shortcut_ablation(run: &GuidanceRun) -> Result<ShortcutReport> {
    let cond = run
        .condition
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("shortcut ablation needs a condition".into()))?;
    let base = sample_unguided(run)?.video;
    let mut full = run.clone();
    full.mode = GradientMode::Full;
    let mut short = run.clone();
    short.mode = GradientMode::Shortcut;
    let vf = run_frame_guidance(&full)?.video;
    let vs = run_frame_guidance(&short)?.video;
    Ok(ShortcutReport {
        seed: run.seed,
        guided_frames: cond.guided_frames(),
        unguided_condition_loss: condition_distance(cond, &base)?,
        full: mode_result(run, &vf, &base)?,
        shortcut: mode_result(run, &vs, &base)?,
    })
}

/// Stacks frames of a video into a `(F, H, W, C)` array restricted to `idx`.
pub fn select_frames(video: &VideoTensor, idx: &[usize]) -> Array4<f64> {
    let views: Vec<_> = idx.iter().map(|&i| video.frame(i)).collect();
    ndarray::stack(Axis(0), &views).expect("frames share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyvdm::{CausalVae, Denoiser, DenoiserConfig, VaeConfig};
    use ndarray::Array3;

    const T: usize = 12;

    fn bundle(kind: ScheduleKind) -> ModelBundle {
        let vae = CausalVae::new(
            VaeConfig {
                hidden: 8,
                ..Default::default()
            },
            1,
        );
        let denoiser = Denoiser::new(
            DenoiserConfig {
                hidden: 8,
                grid: 2,
                steps: T,
                backend: kind,
                ..Default::default()
            },
            2,
        );
        ModelBundle { vae, denoiser }
    }

    fn keyframe(frames: &[usize]) -> FrameCondition {
        FrameCondition::Keyframe {
            frames: frames.to_vec(),
            targets: frames.iter().map(|&i| Array3::from_elem((8, 8, 3), 0.1 + 0.05 * i as f64)).collect(),
        }
    }

    fn per_latent_norms(g: &LatentTensor) -> Vec<f64> {
        g.data().outer_iter().map(|gj| gj.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    #[test]
    fn guidance_off_is_bit_identical_to_plain_sampling() {
        for kind in [ScheduleKind::Diffusion, ScheduleKind::Flow] {
            let m = bundle(kind);
            let mut run = GuidanceRun::new(&m, Some(keyframe(&[0, 8])), 5).unwrap();
            run.cfg = run.cfg.clone().disabled(T);
            let off = run_frame_guidance(&run).unwrap();
            let plain = sample_unguided(&run).unwrap();
            assert_eq!(off.latent, plain.latent, "{kind:?}");
            assert_eq!(off.video, plain.video);
            assert!(off.trace.entries.is_empty());

            let none = GuidanceRun::new(&m, None, 5).unwrap();
            assert_eq!(run_frame_guidance(&none).unwrap().latent, plain.latent);
        }
    }

    #[test]
    fn guided_runs_are_deterministic_and_follow_the_plan() {
        let m = bundle(ScheduleKind::Diffusion);
        let run = GuidanceRun::new(&m, Some(keyframe(&[4])), 9).unwrap();
        let a = run_frame_guidance(&run).unwrap();
        let b = run_frame_guidance(&run).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.trace, b.trace);
        let plan = plan_stages(&run.cfg, &run.sched).unwrap();
        let expected: usize = plan.entries.iter().filter(|e| e.stage != Stage::Free).map(|e| e.repeats).sum();
        assert_eq!(a.trace.entries.len(), expected);
        assert_eq!(a.trace.snapshots.len(), T);
        assert_ne!(a.latent, sample_unguided(&run).unwrap().latent);

        let mut other = run.clone();
        other.seed = 10;
        assert_ne!(run_frame_guidance(&other).unwrap().latent, a.latent);
    }

    #[test]
    fn shortcut_gradient_stays_inside_the_windows() {
        let m = bundle(ScheduleKind::Diffusion);
        let mut run = GuidanceRun::new(&m, Some(keyframe(&[5])), 3).unwrap();
        assert_eq!(run.guided_windows().unwrap(), vec![0..3]);
        let z = LatentTensor::randn(run.latent_shape(), 4);
        let cond = run.condition.clone().unwrap();

        run.mode = GradientMode::Shortcut;
        let short = per_latent_norms(&guidance_gradient(&run, &cond, &z, T - 1).unwrap().grad);
        assert!(short[..3].iter().all(|&n| n > 0.0), "{short:?}");
        assert!(short[3..].iter().all(|&n| n == 0.0), "{short:?}");

        run.mode = GradientMode::Full;
        let full = per_latent_norms(&guidance_gradient(&run, &cond, &z, T - 1).unwrap().grad);
        assert!(full.iter().all(|&n| n > 0.0), "{full:?}");
    }

    #[test]
    fn propagation_map_has_one_row_per_probe() {
        let m = bundle(ScheduleKind::Flow);
        let mut run = GuidanceRun::new(&m, Some(keyframe(&[16])), 3).unwrap();
        run.mode = GradientMode::Shortcut;
        let map = grad_propagation_map(&run, &[T, T / 2, 1]).unwrap();
        assert_eq!(map.steps, vec![T, T / 2, 1]);
        assert_eq!(map.windows, vec![2..5]);
        for row in &map.norms {
            assert_eq!(row.len(), 5);
            assert!(row[..2].iter().all(|&n| n == 0.0));
        }
    }

    #[test]
    fn sdedit_endpoints() {
        for kind in [ScheduleKind::Diffusion, ScheduleKind::Flow] {
            let m = bundle(kind);
            let run = GuidanceRun::new(&m, Some(keyframe(&[0])), 21).unwrap();
            let source = sample_unguided(&run).unwrap().video;

            let from_top = run_sdedit_v2v(&run, &source, T).unwrap();
            assert_eq!(from_top.latent, run_frame_guidance(&run).unwrap().latent, "{kind:?}");

            let untouched = run_sdedit_v2v(&run, &source, 0).unwrap();
            let recon = m.vae.decode_frames(&m.vae.encode(&source).unwrap(), run.frames).unwrap();
            let diff = (untouched.video.data() - recon.data()).iter().fold(0.0_f64, |a, d| a.max(d.abs()));
            assert!(diff < 1e-12, "{diff}");
            assert!(matches!(run_sdedit_v2v(&run, &source, T + 1), Err(Error::StepOutOfRange { .. })));
        }
    }

    #[test]
    fn invalid_runs_are_rejected() {
        let m = bundle(ScheduleKind::Diffusion);
        let mut run = GuidanceRun::new(&m, Some(keyframe(&[17])), 0).unwrap();
        assert!(run_frame_guidance(&run).is_err());
        run.condition = Some(keyframe(&[1]));
        run.window = 0;
        assert!(run_frame_guidance(&run).is_err());
        run.window = 3;
        run.frames = 18;
        assert!(run_frame_guidance(&run).is_err());
    }

    #[test]
    fn local_pairs_cover_the_block_borders() {
        // frame 5 lives in latent 2 = frames 5..9
        assert_eq!(local_pairs(&[5], 4, 17), vec![4, 5, 6, 7, 8]);
        assert_eq!(local_pairs(&[0], 4, 17), vec![0]);
        assert_eq!(local_pairs(&[16], 4, 17), vec![12, 13, 14, 15]);
    }
}
