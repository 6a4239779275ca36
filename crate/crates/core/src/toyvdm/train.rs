//! Training loops for the toy autoencoder and denoiser.
//!
//! Mini-batch gradients are computed in parallel per clip and reduced in a
//! fixed order, so training is bit-reproducible for a given seed.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig};
use super::vae::{CausalVae, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, Params};
use crate::schedules::{NoiseSchedule, ScheduleKind};
use crate::tensor::{derive_seed, randn4, LatentTensor, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn vae_default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }

    pub fn denoiser_default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch index of the first entry in `epoch_losses`.
    pub start_epoch: usize,
    pub epoch_losses: Vec<f64>,
}

/// Penalty on raw latent magnitude; keeps the code space compact before the
/// latent scale is calibrated.
const LATENT_PENALTY: f64 = 1e-4;

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    // cosine decay to 10 % of the base rate
    let p = step as f64 / total.max(1) as f64;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

fn sum_flat(parts: Vec<(f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    let mut it = parts.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, acc)
}

fn vae_clip_loss(vae: &CausalVae, clip: &VideoTensor) -> (f64, CausalVae) {
    let (raw, cache) = vae.encode_forward(clip.data().view());
    let (l, h, w, c) = (
        vae.num_latents(clip.frames()),
        clip.height() / vae.config.spatial_factor,
        clip.width() / vae.config.spatial_factor,
        vae.config.latent_channels,
    );
    let z = raw.clone().into_shape_with_order((l, h, w, c)).unwrap();
    let (frames, tape) = vae.decode_window(z.view(), 0).expect("consistent shapes");
    let nf = clip.frames();
    let recon = frames.slice(ndarray::s![..nf, .., .., ..]);
    let n = clip.data().len() as f64;
    let diff = &recon - clip.data();
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let mut dframes = Array4::zeros(frames.raw_dim());
    dframes
        .slice_mut(ndarray::s![..nf, .., .., ..])
        .assign(&(diff * (2.0 / n)));
    let mut grads = vae.zeros_like();
    let dz = vae.decode_vjp(&tape, dframes.view(), Some(&mut grads));
    let nz = raw.len() as f64;
    let penalty = LATENT_PENALTY * raw.iter().map(|v| v * v).sum::<f64>() / nz;
    let dz: Array2<f64> = dz.into_shape_with_order(raw.raw_dim()).unwrap() + &raw * (2.0 * LATENT_PENALTY / nz);
    vae.encode_backward(&cache, &dz, &mut grads);
    (mse + penalty, grads)
}

pub fn train_vae(dataset: &[VideoTensor], config: VaeConfig, train: &TrainConfig) -> Result<(CausalVae, TrainReport)> {
    let vae = CausalVae::new(config, train.seed);
    continue_vae(vae, dataset, train, 0)
}

/// Runs `train.epochs` further epochs starting from `vae`, numbering them from
/// `start_epoch`. Recalibrates the latent scale afterwards.
pub fn continue_vae(
    mut vae: CausalVae,
    dataset: &[VideoTensor],
    train: &TrainConfig,
    start_epoch: usize,
) -> Result<(CausalVae, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut adam = Adam::new(vae.num_params(), train.lr);
    let batches = dataset.len().div_ceil(train.batch_size);
    let total = batches * train.epochs;
    let mut report = TrainReport {
        start_epoch,
        epoch_losses: Vec::new(),
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for e in 0..train.epochs {
        let epoch = start_epoch + e;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, epoch as u64, 1));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(train.batch_size).enumerate() {
            let parts: Vec<(f64, Vec<f64>)> = idx
                .par_iter()
                .map(|&i| {
                    let (l, g) = vae_clip_loss(&vae, &dataset[i]);
                    (l, g.flat())
                })
                .collect();
            let (loss, mut grad) = sum_flat(parts);
            let k = idx.len() as f64;
            grad.iter_mut().for_each(|g| *g /= k);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.lr = lr_at(train, e * batches + b, total);
            adam.step(&mut vae, &grad);
            epoch_loss += loss;
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::debug!("vae epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    calibrate_latent_scale(&mut vae, dataset)?;
    Ok((vae, report))
}

/// Rescales the latent space to unit standard deviation over `dataset`.
pub fn calibrate_latent_scale(vae: &mut CausalVae, dataset: &[VideoTensor]) -> Result<()> {
    let latents: Vec<LatentTensor> = dataset.par_iter().map(|x| vae.encode(x)).collect::<Result<_>>()?;
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
    for z in &latents {
        for &v in z.data() {
            s += v;
            s2 += v * v;
            n += 1.0;
        }
    }
    let var = s2 / n - (s / n).powi(2);
    if !(var > 0.0) {
        return Err(Error::Degenerate("latents have zero variance".into()));
    }
    vae.set_latent_scale(vae.latent_scale() / var.sqrt());
    Ok(())
}

/// Mean squared reconstruction error over `clips`.
pub fn reconstruction_mse(vae: &CausalVae, clips: &[VideoTensor]) -> Result<f64> {
    let per: Vec<f64> = clips
        .par_iter()
        .map(|x| {
            let z = vae.encode(x)?;
            let y = vae.decode_frames(&z, x.frames())?;
            Ok((y.data() - x.data()).mapv(|d| d * d).mean().unwrap())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn encode_all(vae: &CausalVae, clips: &[VideoTensor]) -> Result<Vec<LatentTensor>> {
    clips.par_iter().map(|x| vae.encode(x)).collect()
}

fn denoiser_sample_loss(
    net: &Denoiser,
    sched: &NoiseSchedule,
    z0: &LatentTensor,
    t: usize,
    eps_seed: u64,
    grads: Option<&mut Denoiser>,
) -> f64 {
    let eps = randn4(z0.dim(), eps_seed);
    let (a, b) = sched.marginal_coeffs(t).unwrap();
    let zt = z0.data() * a + &eps * b;
    let target = sched.velocity_target(z0.data(), &eps, t).unwrap();
    let (pred, tape) = net.forward(&zt, t);
    let diff = pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if let Some(g) = grads {
        net.vjp(&tape, &(diff * (2.0 / n)), Some(g));
    }
    loss
}

pub fn train_denoiser(
    latents: &[LatentTensor],
    backend: ScheduleKind,
    steps: usize,
    train: &TrainConfig,
) -> Result<(Denoiser, TrainReport)> {
    let first = latents
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    let (l, h, w, c) = first.dim();
    if h != w {
        return Err(Error::ShapeMismatch(format!("latent grid {h}x{w} must be square")));
    }
    let config = DenoiserConfig {
        latent_channels: c,
        latents: l,
        grid: h,
        steps,
        backend,
        ..DenoiserConfig::default()
    };
    continue_denoiser(Denoiser::new(config, train.seed), latents, train, 0)
}

pub fn continue_denoiser(
    mut net: Denoiser,
    latents: &[LatentTensor],
    train: &TrainConfig,
    start_epoch: usize,
) -> Result<(Denoiser, TrainReport)> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let sched = NoiseSchedule::for_kind(net.backend(), net.config.steps)?;
    let steps = net.config.steps;
    let mut adam = Adam::new(net.num_params(), train.lr);
    let batches = latents.len().div_ceil(train.batch_size);
    let total = batches * train.epochs;
    let mut report = TrainReport {
        start_epoch,
        epoch_losses: Vec::new(),
    };
    let mut order: Vec<usize> = (0..latents.len()).collect();
    for e in 0..train.epochs {
        let epoch = start_epoch + e;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, epoch as u64, 2));
        order.shuffle(&mut rng);
        let draws: Vec<(usize, u64)> = order
            .iter()
            .map(|_| (rng.random_range(1..=steps), rng.random()))
            .collect();
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(train.batch_size).enumerate() {
            let parts: Vec<(f64, Vec<f64>)> = idx
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let (t, s) = draws[b * train.batch_size + k];
                    let mut g = net.zeros_like();
                    let l = denoiser_sample_loss(&net, &sched, &latents[i], t, s, Some(&mut g));
                    (l, g.flat())
                })
                .collect();
            let (loss, mut grad) = sum_flat(parts);
            let k = idx.len() as f64;
            grad.iter_mut().for_each(|g| *g /= k);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.lr = lr_at(train, e * batches + b, total);
            adam.step(&mut net, &grad);
            epoch_loss += loss;
        }
        let mean = epoch_loss / latents.len() as f64;
        log::debug!("denoiser epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok((net, report))
}

/// Velocity-regression loss on `latents` with fixed (t, ε) draws per sample.
pub fn denoiser_validation_loss(net: &Denoiser, latents: &[LatentTensor], draws_per_latent: usize, seed: u64) -> Result<f64> {
    let sched = NoiseSchedule::for_kind(net.backend(), net.config.steps)?;
    let steps = net.config.steps;
    let per: Vec<f64> = latents
        .par_iter()
        .enumerate()
        .map(|(i, z0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 3));
            (0..draws_per_latent)
                .map(|_| {
                    let t = rng.random_range(1..=steps);
                    denoiser_sample_loss(net, &sched, z0, t, rng.random(), None)
                })
                .sum::<f64>()
                / draws_per_latent as f64
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Sample mean latent; used as a reference when sanity-checking samples.
pub fn mean_latent(latents: &[LatentTensor]) -> Array4<f64> {
    let mut acc = Array4::zeros(latents[0].dim());
    for z in latents {
        acc += z.data();
    }
    acc / latents.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyvdm::dataset::{generate_dataset, DatasetSpec};

    #[test]
    fn diffusion_target_endpoints() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let z0 = randn4((2, 2, 2, 2), 1);
        let eps = randn4((2, 2, 2, 2), 2);
        assert_eq!(s.velocity_target(&z0, &eps, 0).unwrap(), eps);
        assert_eq!(s.velocity_target(&z0, &eps, 50).unwrap(), -&z0);
    }

    #[test]
    fn flow_target_is_constant_along_the_path() {
        let s = NoiseSchedule::uniform_flow(50).unwrap();
        let z0 = randn4((2, 2, 2, 2), 3);
        let eps = randn4((2, 2, 2, 2), 4);
        let first = s.velocity_target(&z0, &eps, 1).unwrap();
        for t in 0..=50 {
            assert_eq!(s.velocity_target(&z0, &eps, t).unwrap(), first);
        }
    }

    #[test]
    fn short_vae_training_reduces_loss_and_is_reproducible() {
        let data = generate_dataset(&DatasetSpec {
            count: 16,
            frames: 9,
            height: 16,
            width: 16,
            channels: 3,
            seed: 5,
        })
        .unwrap();
        let cfg = VaeConfig {
            hidden: 16,
            ..VaeConfig::default()
        };
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr: 3e-3,
            seed: 1,
        };
        let (a, ra) = train_vae(&data, cfg, &tc).unwrap();
        let (b, rb) = train_vae(&data, cfg, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epoch_losses.len(), 4);
        assert!(ra.epoch_losses[3] < ra.epoch_losses[0]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_vae(&[], VaeConfig::default(), &TrainConfig::vae_default()).is_err());
        assert!(train_denoiser(&[], ScheduleKind::Flow, 50, &TrainConfig::denoiser_default()).is_err());
    }
}
