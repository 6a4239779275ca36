//! Causal spatio-temporal autoencoder.
//!
//! Frame 0 is encoded alone; every later latent encodes a group of `r`
//! consecutive frames, so `L = 1 + ⌈(F − 1) / r⌉`. Each `s × s` pixel patch maps
//! to one latent position.
//!
//! The encoder sees only the frames of its own group (no temporal lookback or
//! lookahead). The decoder's first layer is a causal convolution spanning
//! `R` latents, and every later layer is per-latent, so decoded block `j`
//! depends on latents `j − R + 1 ..= j` and nothing else. This is a minimal
//! stand-in for a real CausalVAE: it has the same indexing and causality, but
//! none of the upsampling stages.

use ndarray::{s, Array2, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv, Grid, Linear, Params};
use crate::tensor::{LatentTensor, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub channels: usize,
    /// Frames per latent after the first (r).
    pub temporal_rate: usize,
    /// Pixels per latent position along each spatial axis (s).
    pub spatial_factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Decoder temporal receptive field in latents (R).
    pub receptive_field: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            temporal_rate: 4,
            spatial_factor: 4,
            latent_channels: 4,
            hidden: 48,
            receptive_field: 3,
        }
    }
}

/// Latent index holding frame `i`: frame 0 alone, then groups of `r`.
pub fn frame_to_latent(i: usize, r: usize) -> usize {
    if i == 0 {
        0
    } else {
        1 + (i - 1) / r
    }
}

pub fn num_latents(frames: usize, r: usize) -> usize {
    1 + (frames.saturating_sub(1)).div_ceil(r)
}

/// Frames produced by decoding latent `j`.
pub fn latent_frames(j: usize, r: usize) -> std::ops::Range<usize> {
    if j == 0 {
        0..1
    } else {
        1 + r * (j - 1)..1 + r * j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalVae {
    pub config: VaeConfig,
    enc_first: Linear,
    enc_group: Linear,
    enc_conv: Conv,
    enc_out: Linear,
    dec_in: Conv,
    dec_mid: Conv,
    dec_first: Linear,
    dec_group: Linear,
    /// Multiplies encoder outputs so that latents have roughly unit variance;
    /// the decoder divides it back out.
    latent_scale: f64,
}

pub(crate) struct EncoderCache {
    grid: Grid,
    x_first: Array2<f64>,
    x_group: Array2<f64>,
    pre: Array2<f64>,
    cols2: Array2<f64>,
    y2: Array2<f64>,
    a2: Array2<f64>,
}

/// Intermediate values of a decoder pass over a latent window.
#[derive(Debug, Clone)]
pub struct DecoderTape {
    grid: Grid,
    start: usize,
    cols1: Array2<f64>,
    y1: Array2<f64>,
    cols2: Array2<f64>,
    y2: Array2<f64>,
    a2: Array2<f64>,
    out_first: Option<Array2<f64>>,
    out_group: Array2<f64>,
}

impl DecoderTape {
    pub fn window_len(&self) -> usize {
        self.grid.n
    }

    pub fn start(&self) -> usize {
        self.start
    }
}

impl CausalVae {
    pub fn new(config: VaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let VaeConfig {
            channels: ch,
            temporal_rate: r,
            spatial_factor: sf,
            latent_channels: c,
            hidden: d,
            receptive_field: rf,
        } = config;
        let patch = sf * sf * ch;
        Self {
            config,
            enc_first: Linear::new(patch, d, &mut rng),
            enc_group: Linear::new(r * patch, d, &mut rng),
            enc_conv: Conv::new(1, 3, d, d, &mut rng),
            enc_out: Linear::new(d, c, &mut rng),
            dec_in: Conv::new(rf, 3, c, d, &mut rng),
            dec_mid: Conv::new(1, 3, d, d, &mut rng),
            dec_first: Linear::new(d, patch, &mut rng),
            dec_group: Linear::new(d, r * patch, &mut rng),
            latent_scale: 1.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            enc_first: self.enc_first.zeros_like(),
            enc_group: self.enc_group.zeros_like(),
            enc_conv: self.enc_conv.zeros_like(),
            enc_out: self.enc_out.zeros_like(),
            dec_in: self.dec_in.zeros_like(),
            dec_mid: self.dec_mid.zeros_like(),
            dec_first: self.dec_first.zeros_like(),
            dec_group: self.dec_group.zeros_like(),
            latent_scale: self.latent_scale,
        }
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.latent_scale = scale;
    }

    pub fn temporal_rate(&self) -> usize {
        self.config.temporal_rate
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field
    }

    /// Encoder temporal receptive field in latents.
    pub fn encoder_receptive_field(&self) -> usize {
        1
    }

    pub fn num_latents(&self, frames: usize) -> usize {
        num_latents(frames, self.config.temporal_rate)
    }

    pub fn frames_for_latents(&self, latents: usize) -> usize {
        1 + self.config.temporal_rate * latents.saturating_sub(1)
    }

    /// Multiply-accumulates per decoded latent position (for cost accounting).
    pub fn decoder_macs_per_position(&self, first: bool) -> usize {
        let head = if first { &self.dec_first } else { &self.dec_group };
        self.dec_in.lin.weight.len() + self.dec_mid.lin.weight.len() + head.weight.len()
    }

    fn check_video(&self, x: &VideoTensor) -> Result<()> {
        let sf = self.config.spatial_factor;
        if x.channels() != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "video has {} channels, model expects {}",
                x.channels(),
                self.config.channels
            )));
        }
        if x.height() % sf != 0 || x.width() % sf != 0 {
            return Err(Error::ShapeMismatch(format!(
                "frame size {}x{} not divisible by spatial factor {sf}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &VideoTensor) -> Result<LatentTensor> {
        self.check_video(x)?;
        let (raw, cache) = self.encode_forward(x.data().view());
        LatentTensor::new(self.rows_to_latent(&raw, cache.grid))
    }

    pub(crate) fn encode_forward(&self, x: ArrayView4<f64>) -> (Array2<f64>, EncoderCache) {
        let (f, h, w, _) = x.dim();
        let VaeConfig {
            temporal_rate: r,
            spatial_factor: sf,
            ..
        } = self.config;
        let grid = Grid {
            n: num_latents(f, r),
            h: h / sf,
            w: w / sf,
        };
        let hw = grid.slot_rows();
        let x_first = patchify(x.index_axis(Axis(0), 0), sf);
        let patch = x_first.ncols();
        let mut x_group = Array2::zeros(((grid.n - 1) * hw, r * patch));
        for j in 1..grid.n {
            for (k, fi) in latent_frames(j, r).enumerate() {
                if fi >= f {
                    break; // zero padding for a partial last group
                }
                let p = patchify(x.index_axis(Axis(0), fi), sf);
                x_group
                    .slice_mut(s![(j - 1) * hw..j * hw, k * patch..(k + 1) * patch])
                    .assign(&p);
            }
        }
        let mut pre = Array2::zeros((grid.rows(), self.config.hidden));
        pre.slice_mut(s![..hw, ..])
            .assign(&self.enc_first.forward(x_first.view()));
        if grid.n > 1 {
            pre.slice_mut(s![hw.., ..])
                .assign(&self.enc_group.forward(x_group.view()));
        }
        let a1 = nn::silu(&pre);
        let (y2, cols2) = self.enc_conv.forward(a1.view(), grid);
        let a2 = nn::silu(&y2);
        let raw = self.enc_out.forward(a2.view()) * self.latent_scale;
        (
            raw,
            EncoderCache {
                grid,
                x_first,
                x_group,
                pre,
                cols2,
                y2,
                a2,
            },
        )
    }

    /// Parameter gradients of the encoder given dL/d(latent rows).
    pub(crate) fn encode_backward(&self, cache: &EncoderCache, dz: &Array2<f64>, grads: &mut CausalVae) {
        let hw = cache.grid.slot_rows();
        let dz = dz * self.latent_scale;
        let da2 = self.enc_out.backward(cache.a2.view(), dz.view(), Some(&mut grads.enc_out));
        let dy2 = nn::silu_backward(&cache.y2, &da2);
        let da1 = self
            .enc_conv
            .backward(cache.cols2.view(), dy2.view(), cache.grid, Some(&mut grads.enc_conv));
        let dpre = nn::silu_backward(&cache.pre, &da1);
        self.enc_first.backward(
            cache.x_first.view(),
            dpre.slice(s![..hw, ..]),
            Some(&mut grads.enc_first),
        );
        if cache.grid.n > 1 {
            self.enc_group.backward(
                cache.x_group.view(),
                dpre.slice(s![hw.., ..]),
                Some(&mut grads.enc_group),
            );
        }
    }

    fn rows_to_latent(&self, rows: &Array2<f64>, grid: Grid) -> Array4<f64> {
        rows.clone()
            .into_shape_with_order((grid.n, grid.h, grid.w, rows.ncols()))
            .unwrap()
    }

    /// Decodes a full latent sequence into `1 + r(L − 1)` frames.
    pub fn decode(&self, z: &LatentTensor) -> Result<VideoTensor> {
        let (frames, _) = self.decode_window(z.data().view(), 0)?;
        VideoTensor::new(frames)
    }

    /// Decodes and drops trailing frames beyond `frames` (partial last group).
    pub fn decode_frames(&self, z: &LatentTensor, frames: usize) -> Result<VideoTensor> {
        let full = self.decode(z)?;
        if frames > full.frames() {
            return Err(Error::ShapeMismatch(format!(
                "{} latents decode to {} frames, asked for {frames}",
                z.len(),
                full.frames()
            )));
        }
        VideoTensor::new(full.into_inner().slice_move(s![..frames, .., .., ..]))
    }

    /// Decodes a contiguous window of latents whose first element has absolute
    /// index `start`. Returns the frames of every latent in the window: the
    /// first `1 + r(n−1)` frames when `start = 0`, otherwise `r·n` frames.
    ///
    /// Outputs for latents with fewer than `R − 1` predecessors inside the
    /// window (and `start > 0`) see zero padding in place of the missing
    /// latents and therefore differ from a full decode.
    pub fn decode_window(&self, z: ArrayView4<f64>, start: usize) -> Result<(Array4<f64>, DecoderTape)> {
        let (n, h, w, c) = z.dim();
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        if n == 0 {
            return Err(Error::ShapeMismatch("empty latent window".into()));
        }
        let grid = Grid { n, h, w };
        let x = z
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((grid.rows(), c))
            .unwrap()
            / self.latent_scale;
        let (y1, cols1) = self.dec_in.forward(x.view(), grid);
        let a1 = nn::silu(&y1);
        let (y2, cols2) = self.dec_mid.forward(a1.view(), grid);
        let a2 = nn::silu(&y2) + &a1;
        let hw = grid.slot_rows();
        let group_from = if start == 0 { 1 } else { 0 };
        let out_first = (start == 0)
            .then(|| self.dec_first.forward(a2.slice(s![..hw, ..])).mapv(nn::sigmoid));
        let out_group = self
            .dec_group
            .forward(a2.slice(s![group_from * hw.., ..]))
            .mapv(nn::sigmoid);
        let frames = self.assemble(out_first.as_ref(), &out_group, grid, start);
        Ok((
            frames,
            DecoderTape {
                grid,
                start,
                cols1,
                y1,
                cols2,
                y2,
                a2,
                out_first,
                out_group,
            },
        ))
    }

    fn assemble(&self, first: Option<&Array2<f64>>, group: &Array2<f64>, grid: Grid, start: usize) -> Array4<f64> {
        let VaeConfig {
            temporal_rate: r,
            spatial_factor: sf,
            channels: ch,
            ..
        } = self.config;
        let hw = grid.slot_rows();
        let patch = sf * sf * ch;
        let n_group = grid.n - usize::from(start == 0);
        let nf = usize::from(start == 0) + r * n_group;
        let mut frames = Array4::zeros((nf, grid.h * sf, grid.w * sf, ch));
        let mut fi = 0;
        if let Some(first) = first {
            unpatchify_into(first.view(), grid, sf, ch, frames.index_axis_mut(Axis(0), 0));
            fi = 1;
        }
        for g in 0..n_group {
            let rows = group.slice(s![g * hw..(g + 1) * hw, ..]);
            for k in 0..r {
                unpatchify_into(
                    rows.slice(s![.., k * patch..(k + 1) * patch]),
                    grid,
                    sf,
                    ch,
                    frames.index_axis_mut(Axis(0), fi),
                );
                fi += 1;
            }
        }
        frames
    }

    /// Vector-Jacobian product of [`decode_window`](Self::decode_window):
    /// maps dL/d(frames) to dL/d(latent window). Accumulates parameter
    /// gradients into `grads` when given.
    pub fn decode_vjp(
        &self,
        tape: &DecoderTape,
        dframes: ArrayView4<f64>,
        grads: Option<&mut CausalVae>,
    ) -> Array4<f64> {
        let VaeConfig {
            temporal_rate: r,
            spatial_factor: sf,
            channels: ch,
            latent_channels: c,
            ..
        } = self.config;
        let grid = tape.grid;
        let hw = grid.slot_rows();
        let patch = sf * sf * ch;
        let mut grads = grads;
        let mut da2 = Array2::zeros(tape.a2.raw_dim());
        let mut fi = 0;
        if let Some(out) = &tape.out_first {
            let dout = patchify(dframes.index_axis(Axis(0), 0), sf);
            let dlogit = sigmoid_backward(out, &dout);
            let d = self.dec_first.backward(
                tape.a2.slice(s![..hw, ..]),
                dlogit.view(),
                grads.as_deref_mut().map(|g| &mut g.dec_first),
            );
            da2.slice_mut(s![..hw, ..]).assign(&d);
            fi = 1;
        }
        let group_from = usize::from(tape.start == 0);
        let n_group = grid.n - group_from;
        if n_group > 0 {
            let mut dout = Array2::zeros((n_group * hw, r * patch));
            for g in 0..n_group {
                for k in 0..r {
                    let p = patchify(dframes.index_axis(Axis(0), fi), sf);
                    dout.slice_mut(s![g * hw..(g + 1) * hw, k * patch..(k + 1) * patch])
                        .assign(&p);
                    fi += 1;
                }
            }
            let dlogit = sigmoid_backward(&tape.out_group, &dout);
            let d = self.dec_group.backward(
                tape.a2.slice(s![group_from * hw.., ..]),
                dlogit.view(),
                grads.as_deref_mut().map(|g| &mut g.dec_group),
            );
            da2.slice_mut(s![group_from * hw.., ..]).assign(&d);
        }
        let dy2 = nn::silu_backward(&tape.y2, &da2);
        let da1 = da2
            + self.dec_mid.backward(
                tape.cols2.view(),
                dy2.view(),
                grid,
                grads.as_deref_mut().map(|g| &mut g.dec_mid),
            );
        let dy1 = nn::silu_backward(&tape.y1, &da1);
        let dx = self.dec_in.backward(
            tape.cols1.view(),
            dy1.view(),
            grid,
            grads.as_deref_mut().map(|g| &mut g.dec_in),
        ) / self.latent_scale;
        dx.into_shape_with_order((grid.n, grid.h, grid.w, c)).unwrap()
    }
}

fn sigmoid_backward(out: &Array2<f64>, dout: &Array2<f64>) -> Array2<f64> {
    let mut d = dout.clone();
    ndarray::Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
    d
}

/// (H, W, C) frame → (h·w, s·s·C) patch rows, element order (py, px, c).
pub(crate) fn patchify(frame: ndarray::ArrayView3<f64>, sf: usize) -> Array2<f64> {
    let (h, w, ch) = frame.dim();
    let (gh, gw) = (h / sf, w / sf);
    let mut out = Array2::zeros((gh * gw, sf * sf * ch));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut col = 0;
            for py in 0..sf {
                for px in 0..sf {
                    for c in 0..ch {
                        out[[row, col]] = frame[[gy * sf + py, gx * sf + px, c]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

fn unpatchify_into(
    rows: ndarray::ArrayView2<f64>,
    grid: Grid,
    sf: usize,
    ch: usize,
    mut frame: ndarray::ArrayViewMut3<f64>,
) {
    for gy in 0..grid.h {
        for gx in 0..grid.w {
            let row = gy * grid.w + gx;
            let mut col = 0;
            for py in 0..sf {
                for px in 0..sf {
                    for c in 0..ch {
                        frame[[gy * sf + py, gx * sf + px, c]] = rows[[row, col]];
                        col += 1;
                    }
                }
            }
        }
    }
}

impl Params for CausalVae {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.enc_first.visit("enc_first", f);
        self.enc_group.visit("enc_group", f);
        self.enc_conv.lin.visit("enc_conv", f);
        self.enc_out.visit("enc_out", f);
        self.dec_in.lin.visit("dec_in", f);
        self.dec_mid.lin.visit("dec_mid", f);
        self.dec_first.visit("dec_first", f);
        self.dec_group.visit("dec_group", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.enc_first.visit_mut("enc_first", f);
        self.enc_group.visit_mut("enc_group", f);
        self.enc_conv.lin.visit_mut("enc_conv", f);
        self.enc_out.visit_mut("enc_out", f);
        self.dec_in.lin.visit_mut("dec_in", f);
        self.dec_mid.lin.visit_mut("dec_mid", f);
        self.dec_first.visit_mut("dec_first", f);
        self.dec_group.visit_mut("dec_group", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyvdm::dataset::{generate_dataset, DatasetSpec};

    fn clip(seed: u64) -> VideoTensor {
        generate_dataset(&DatasetSpec {
            count: 1,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn index_formulas() {
        assert_eq!(frame_to_latent(0, 4), 0);
        assert_eq!(frame_to_latent(1, 4), 1);
        assert_eq!(frame_to_latent(4, 4), 1);
        assert_eq!(frame_to_latent(5, 4), 2);
        assert_eq!(frame_to_latent(48, 4), 12);
        assert_eq!(num_latents(1, 4), 1);
        assert_eq!(num_latents(49, 4), 13);
        assert_eq!(num_latents(17, 4), 5);
        assert_eq!(num_latents(18, 4), 6);
        for i in 0..49 {
            assert!(latent_frames(frame_to_latent(i, 4), 4).contains(&i));
        }
    }

    #[test]
    fn encode_decode_shapes() {
        let vae = CausalVae::new(VaeConfig::default(), 0);
        let x = clip(1);
        let z = vae.encode(&x).unwrap();
        assert_eq!(z.dim(), (5, 8, 8, 4));
        let y = vae.decode(&z).unwrap();
        assert_eq!(y.data().dim(), x.data().dim());
        let one = VideoTensor::new(x.data().slice(s![..1, .., .., ..]).to_owned()).unwrap();
        assert_eq!(vae.encode(&one).unwrap().len(), 1);
        let partial = VideoTensor::new(x.data().slice(s![..11, .., .., ..]).to_owned()).unwrap();
        let zp = vae.encode(&partial).unwrap();
        assert_eq!(zp.len(), 4);
        assert_eq!(vae.decode_frames(&zp, 11).unwrap().frames(), 11);
    }

    #[test]
    fn shape_errors() {
        let vae = CausalVae::new(VaeConfig::default(), 0);
        let bad = VideoTensor::new(Array4::zeros((5, 30, 32, 3))).unwrap();
        assert!(vae.encode(&bad).is_err());
        let gray = VideoTensor::new(Array4::zeros((5, 32, 32, 1))).unwrap();
        assert!(vae.encode(&gray).is_err());
        let z = LatentTensor::zeros((2, 8, 8, 3));
        assert!(vae.decode(&z).is_err());
    }

    #[test]
    fn untrained_decoder_is_exactly_causal() {
        let vae = CausalVae::new(VaeConfig::default(), 3);
        let z = LatentTensor::randn((5, 8, 8, 4), 4);
        let base = vae.decode(&z).unwrap();
        let r = 4;
        for j in 0..5 {
            let frames = latent_frames(j, r);
            // future latents
            for k in j + 1..5 {
                let mut d = z.data().clone();
                d.index_axis_mut(Axis(0), k).fill(0.0);
                let out = vae.decode(&LatentTensor::new(d).unwrap()).unwrap();
                assert_eq!(
                    out.data().slice(s![frames.clone(), .., .., ..]),
                    base.data().slice(s![frames.clone(), .., .., ..])
                );
            }
            // latents at least R behind
            for k in 0..j.saturating_sub(2) {
                let mut d = z.data().clone();
                d.index_axis_mut(Axis(0), k).mapv_inplace(|v| v + 1.0);
                let out = vae.decode(&LatentTensor::new(d).unwrap()).unwrap();
                assert_eq!(
                    out.data().slice(s![frames.clone(), .., .., ..]),
                    base.data().slice(s![frames.clone(), .., .., ..])
                );
            }
        }
    }

    #[test]
    fn encoder_sees_only_its_group() {
        let vae = CausalVae::new(VaeConfig::default(), 5);
        let x = clip(2);
        let z = vae.encode(&x).unwrap();
        let mut black = x.data().clone();
        black.index_axis_mut(Axis(0), 6).fill(0.0);
        let z2 = vae.encode(&VideoTensor::new(black).unwrap()).unwrap();
        for j in 0..5 {
            let same = z.data().index_axis(Axis(0), j) == z2.data().index_axis(Axis(0), j);
            assert_eq!(same, j != frame_to_latent(6, 4), "latent {j}");
        }
    }

    #[test]
    fn decode_vjp_matches_central_differences() {
        let vae = CausalVae::new(VaeConfig::default(), 6);
        let z = LatentTensor::randn((5, 4, 4, 4), 7);
        let (frames, tape) = vae.decode_window(z.data().view(), 0).unwrap();
        let w = crate::tensor::randn4(frames.dim(), 8);
        let dz = vae.decode_vjp(&tape, w.view(), None);
        let loss = |z: &Array4<f64>| {
            let (f, _) = vae.decode_window(z.view(), 0).unwrap();
            (f * &w).sum()
        };
        let h = 1e-5;
        for idx in [[0, 0, 0, 0], [1, 2, 3, 1], [2, 1, 1, 3], [4, 3, 0, 2], [3, 0, 2, 0]] {
            let mut zp = z.data().clone();
            let mut zm = z.data().clone();
            zp[idx] += h;
            zm[idx] -= h;
            let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
            let g = dz[idx];
            assert!((fd - g).abs() <= 1e-6 * fd.abs().max(1e-3), "{idx:?}: {fd} vs {g}");
        }
    }
}
