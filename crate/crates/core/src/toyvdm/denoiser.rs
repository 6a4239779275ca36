//! Velocity-prediction network over latent sequences.
//!
//! Per-latent 3×3 spatial convolutions interleaved with dense temporal mixing
//! across all latent indices, plus a sinusoidal step embedding. The mixing
//! matrices make every output latent depend on every input latent.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv, Grid, Linear, Params};
use crate::schedules::ScheduleKind;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    /// Sequence length the temporal mixing is built for.
    pub latents: usize,
    /// Spatial size of the (square) latent grid it was trained on.
    pub grid: usize,
    pub time_dim: usize,
    /// Number of sampler steps T; step embeddings are taken at `t / T`.
    pub steps: usize,
    pub backend: ScheduleKind,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            hidden: 48,
            latents: 5,
            grid: 8,
            time_dim: 16,
            steps: crate::schedules::DEFAULT_STEPS,
            backend: ScheduleKind::Diffusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    t_lin1: Linear,
    t_lin2: Linear,
    conv_in: Conv,
    mix1: Array2<f64>,
    conv1: Conv,
    mix2: Array2<f64>,
    conv2: Conv,
    conv_out: Conv,
}

/// Intermediate values of one forward pass, for vector-Jacobian products.
#[derive(Debug, Clone)]
pub struct DenoiserTape {
    grid: Grid,
    temb_in: Array2<f64>,
    e1: Array2<f64>,
    cols_in: Array2<f64>,
    h0: Array2<f64>,
    a0: Array2<f64>,
    cols1: Array2<f64>,
    h1: Array2<f64>,
    a1: Array2<f64>,
    cols2: Array2<f64>,
    h2: Array2<f64>,
    cols_out: Array2<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let DenoiserConfig {
            latent_channels: c,
            hidden: d,
            latents: l,
            time_dim,
            ..
        } = config;
        let mix_init = Normal::new(0.0, 0.5 / (l as f64).sqrt()).unwrap();
        let mix = |rng: &mut ChaCha8Rng| Array2::from_shape_simple_fn((l, l), || mix_init.sample(rng));
        let mut conv_out = Conv::new(1, 3, d, c, &mut rng);
        conv_out.lin.weight *= 0.5;
        Self {
            config,
            t_lin1: Linear::new(time_dim, d, &mut rng),
            t_lin2: Linear::new(d, d, &mut rng),
            conv_in: Conv::new(1, 3, c, d, &mut rng),
            mix1: mix(&mut rng),
            conv1: Conv::new(1, 3, d, d, &mut rng),
            mix2: mix(&mut rng),
            conv2: Conv::new(1, 3, d, d, &mut rng),
            conv_out,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            t_lin1: self.t_lin1.zeros_like(),
            t_lin2: self.t_lin2.zeros_like(),
            conv_in: self.conv_in.zeros_like(),
            mix1: Array2::zeros(self.mix1.raw_dim()),
            conv1: self.conv1.zeros_like(),
            mix2: Array2::zeros(self.mix2.raw_dim()),
            conv2: self.conv2.zeros_like(),
            conv_out: self.conv_out.zeros_like(),
        }
    }

    pub fn backend(&self) -> ScheduleKind {
        self.config.backend
    }

    fn check(&self, z: &Array4<f64>, t: usize) -> Result<()> {
        let (l, _, _, c) = z.dim();
        if l != self.config.latents || c != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects {} latents × {} channels, got {l} × {c}",
                self.config.latents, self.config.latent_channels
            )));
        }
        if t > self.config.steps {
            return Err(Error::StepOutOfRange {
                t,
                max: self.config.steps,
            });
        }
        Ok(())
    }

    pub fn velocity(&self, z: &LatentTensor, t: usize) -> Result<LatentTensor> {
        let (v, _) = self.velocity_with_tape(z, t)?;
        Ok(v)
    }

    pub fn velocity_with_tape(&self, z: &LatentTensor, t: usize) -> Result<(LatentTensor, DenoiserTape)> {
        self.check(z.data(), t)?;
        let (out, tape) = self.forward(z.data(), t);
        Ok((LatentTensor::new(out)?, tape))
    }

    pub(crate) fn forward(&self, z: &Array4<f64>, t: usize) -> (Array4<f64>, DenoiserTape) {
        let (l, h, w, c) = z.dim();
        let grid = Grid { n: l, h, w };
        let pos = 1000.0 * t as f64 / self.config.steps as f64;
        let temb_in = nn::sinusoidal(pos, self.config.time_dim).insert_axis(Axis(0));
        let e1 = self.t_lin1.forward(temb_in.view());
        let temb = self.t_lin2.forward(nn::silu(&e1).view());
        let x = z
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((grid.rows(), c))
            .unwrap();
        let (mut h0, cols_in) = self.conv_in.forward(x.view(), grid);
        h0 += &temb.row(0);
        let a0 = nn::silu(&h0);
        let u1 = &a0 + &nn::temporal_mix(&self.mix1, &a0, grid);
        let (h1, cols1) = self.conv1.forward(u1.view(), grid);
        let a1 = nn::silu(&h1) + &a0;
        let u2 = &a1 + &nn::temporal_mix(&self.mix2, &a1, grid);
        let (h2, cols2) = self.conv2.forward(u2.view(), grid);
        let a2 = nn::silu(&h2) + &a1;
        let (out, cols_out) = self.conv_out.forward(a2.view(), grid);
        (
            out.into_shape_with_order((l, h, w, c)).unwrap(),
            DenoiserTape {
                grid,
                temb_in,
                e1,
                cols_in,
                h0,
                a0,
                cols1,
                h1,
                a1,
                cols2,
                h2,
                cols_out,
            },
        )
    }

    /// Vector-Jacobian product: dL/dv ↦ dL/dz. Accumulates parameter gradients
    /// into `grads` when given.
    pub fn vjp(&self, tape: &DenoiserTape, dv: &Array4<f64>, grads: Option<&mut Denoiser>) -> Array4<f64> {
        let grid = tape.grid;
        let c = self.config.latent_channels;
        let mut grads = grads;
        let dout = dv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((grid.rows(), c))
            .unwrap();
        let da2 = self.conv_out.backward(
            tape.cols_out.view(),
            dout.view(),
            grid,
            grads.as_deref_mut().map(|g| &mut g.conv_out),
        );
        // a2 = silu(h2) + a1
        let dh2 = nn::silu_backward(&tape.h2, &da2);
        let du2 = self
            .conv2
            .backward(tape.cols2.view(), dh2.view(), grid, grads.as_deref_mut().map(|g| &mut g.conv2));
        // u2 = a1 + mix2·a1
        let (dmix_x, dmix2) = nn::temporal_mix_backward(&self.mix2, &tape.a1, &du2, grid);
        let da1 = da2 + &du2 + &dmix_x;
        // a1 = silu(h1) + a0
        let dh1 = nn::silu_backward(&tape.h1, &da1);
        let du1 = self
            .conv1
            .backward(tape.cols1.view(), dh1.view(), grid, grads.as_deref_mut().map(|g| &mut g.conv1));
        let (dmix_x, dmix1) = nn::temporal_mix_backward(&self.mix1, &tape.a0, &du1, grid);
        let da0 = da1 + &du1 + &dmix_x;
        let dh0 = nn::silu_backward(&tape.h0, &da0);
        let dx = self
            .conv_in
            .backward(tape.cols_in.view(), dh0.view(), grid, grads.as_deref_mut().map(|g| &mut g.conv_in));
        if let Some(g) = grads {
            g.mix1 += &dmix1;
            g.mix2 += &dmix2;
            let dtemb: Array1<f64> = dh0.sum_axis(Axis(0));
            let dtemb = dtemb.insert_axis(Axis(0));
            let se1 = nn::silu(&tape.e1);
            let dse1 = self.t_lin2.backward(se1.view(), dtemb.view(), Some(&mut g.t_lin2));
            let de1 = nn::silu_backward(&tape.e1, &dse1);
            self.t_lin1.backward(tape.temb_in.view(), de1.view(), Some(&mut g.t_lin1));
        }
        dx.into_shape_with_order((grid.n, grid.h, grid.w, c)).unwrap()
    }

    pub fn vjp_latent(&self, tape: &DenoiserTape, dv: &LatentTensor) -> Result<LatentTensor> {
        LatentTensor::new(self.vjp(tape, dv.data(), None))
    }
}

impl Params for Denoiser {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.t_lin1.visit("t_lin1", f);
        self.t_lin2.visit("t_lin2", f);
        self.conv_in.lin.visit("conv_in", f);
        f("mix1", self.mix1.shape(), self.mix1.as_slice().unwrap());
        self.conv1.lin.visit("conv1", f);
        f("mix2", self.mix2.shape(), self.mix2.as_slice().unwrap());
        self.conv2.lin.visit("conv2", f);
        self.conv_out.lin.visit("conv_out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.t_lin1.visit_mut("t_lin1", f);
        self.t_lin2.visit_mut("t_lin2", f);
        self.conv_in.lin.visit_mut("conv_in", f);
        f("mix1", self.mix1.as_slice_mut().unwrap());
        self.conv1.lin.visit_mut("conv1", f);
        f("mix2", self.mix2.as_slice_mut().unwrap());
        self.conv2.lin.visit_mut("conv2", f);
        self.conv_out.lin.visit_mut("conv_out", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                hidden: 8,
                ..DenoiserConfig::default()
            },
            1,
        )
    }

    #[test]
    fn vjp_matches_central_differences() {
        let net = small();
        let z = LatentTensor::randn((5, 4, 4, 4), 2);
        let w = crate::tensor::randn4((5, 4, 4, 4), 3);
        let (_, tape) = net.forward(z.data(), 17);
        let dz = net.vjp(&tape, &w, None);
        let loss = |z: &Array4<f64>| (net.forward(z, 17).0 * &w).sum();
        let h = 1e-5;
        for idx in [[0, 0, 0, 0], [4, 3, 3, 3], [2, 1, 2, 0], [1, 0, 3, 2]] {
            let (mut zp, mut zm) = (z.data().clone(), z.data().clone());
            zp[idx] += h;
            zm[idx] -= h;
            let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
            assert!((fd - dz[idx]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", dz[idx]);
        }
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let net = small();
        let z = LatentTensor::randn((5, 4, 4, 4), 4);
        let w = crate::tensor::randn4((5, 4, 4, 4), 5);
        let (_, tape) = net.forward(z.data(), 30);
        let mut g = net.zeros_like();
        net.vjp(&tape, &w, Some(&mut g));
        let flat = net.flat();
        let gflat = g.flat();
        let h = 1e-5;
        // sample indices spread across every tensor
        for i in (0..flat.len()).step_by(flat.len() / 40) {
            let mut p = net.clone();
            let mut f = flat.clone();
            f[i] += h;
            p.set_flat(&f);
            let lp = (p.forward(z.data(), 30).0 * &w).sum();
            f[i] -= 2.0 * h;
            p.set_flat(&f);
            let lm = (p.forward(z.data(), 30).0 * &w).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gflat[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", gflat[i]);
        }
    }

    #[test]
    fn every_output_latent_depends_on_every_input_latent() {
        let net = small();
        let z = LatentTensor::randn((5, 4, 4, 4), 6);
        let (_, tape) = net.forward(z.data(), 40);
        for j in 0..5 {
            let mut probe = crate::tensor::randn4((5, 4, 4, 4), 7 + j as u64);
            for k in 0..5 {
                if k != j {
                    probe.index_axis_mut(Axis(0), k).fill(0.0);
                }
            }
            let dz = net.vjp(&tape, &probe, None);
            for k in 0..5 {
                let n = dz.index_axis(Axis(0), k).iter().map(|v| v * v).sum::<f64>();
                assert!(n > 1e-20, "∂v_{j}/∂z_{k} vanished");
            }
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let net = small();
        assert!(net.velocity(&LatentTensor::zeros((4, 4, 4, 4)), 1).is_err());
        assert!(net.velocity(&LatentTensor::zeros((5, 4, 4, 4)), 51).is_err());
    }
}
