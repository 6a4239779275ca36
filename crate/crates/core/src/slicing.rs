//! Latent slicing: decode only the short causal window of latents that a guided
//! frame depends on, optionally after spatially pooling the latents.

use std::ops::Range;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, VideoTensor};
use crate::toyvdm::vae::{latent_frames, DecoderTape};
use crate::toyvdm::CausalVae;

pub use crate::toyvdm::vae::frame_to_latent;

/// Floor on the denominator of relative deviations.
pub const LOCALITY_EPS: f64 = 1e-12;

/// Causal window of `len` latents ending at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceWindow {
    pub target: usize,
    pub len: usize,
}

impl SliceWindow {
    pub fn new(target: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("slice window length must be at least 1".into()));
        }
        Ok(Self { target, len })
    }

    pub fn start(&self) -> usize {
        (self.target + 1).saturating_sub(self.len)
    }

    pub fn latents(&self) -> Range<usize> {
        self.start()..self.target + 1
    }

    /// Frames produced by decoding the target latent.
    pub fn frames(&self, r: usize) -> Range<usize> {
        latent_frames(self.target, r)
    }
}

/// Sorted, deduplicated union of the windows for `targets`, with overlapping
/// or touching ranges merged.
pub fn merge_windows(targets: &[usize], len: usize, num_latents: usize) -> Result<Vec<Range<usize>>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no target latents to slice".into()));
    }
    let mut ts = targets.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if let Some(&j) = ts.iter().find(|&&j| j >= num_latents) {
        return Err(Error::InvalidArgument(format!(
            "latent index {j} out of range for {num_latents} latents"
        )));
    }
    let mut out: Vec<Range<usize>> = Vec::new();
    for j in ts {
        let w = SliceWindow::new(j, len)?.latents();
        match out.last_mut() {
            Some(last) if w.start <= last.end => last.end = last.end.max(w.end),
            _ => out.push(w),
        }
    }
    Ok(out)
}

/// Average-pools axes 1 and 2 (height, width) of a latent or frame stack.
pub fn avg_pool(x: ArrayView4<f64>, factor: usize) -> Result<Array4<f64>> {
    let (n, h, w, c) = x.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} is not divisible by pooling factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(x.to_owned());
    }
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array4::zeros((n, ho, wo, c));
    for ni in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let block = x.slice(s![ni, y * factor..(y + 1) * factor, xx * factor..(xx + 1) * factor, ..]);
                let mut o = out.slice_mut(s![ni, y, xx, ..]);
                for row in block.outer_iter() {
                    for px in row.outer_iter() {
                        o += &px;
                    }
                }
                o *= inv;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool`]: spreads each gradient uniformly over its block.
pub fn avg_pool_vjp(dy: ArrayView4<f64>, factor: usize) -> Array4<f64> {
    let (n, ho, wo, c) = dy.dim();
    if factor == 1 {
        return dy.to_owned();
    }
    let inv = 1.0 / (factor * factor) as f64;
    let mut dx = Array4::zeros((n, ho * factor, wo * factor, c));
    for ni in 0..n {
        for y in 0..ho * factor {
            for xx in 0..wo * factor {
                let g = dy.slice(s![ni, y / factor, xx / factor, ..]);
                dx.slice_mut(s![ni, y, xx, ..]).assign(&(&g * inv));
            }
        }
    }
    dx
}

pub fn spatial_downsample(z: &LatentTensor, factor: usize) -> Result<LatentTensor> {
    LatentTensor::new(avg_pool(z.data().view(), factor)?)
}

/// One decoded window of a sliced decode.
#[derive(Debug, Clone)]
pub struct WindowDecode {
    pub latents: Range<usize>,
    /// Absolute index of the first decoded frame.
    pub first_frame: usize,
    pub frames: Array4<f64>,
    tape: DecoderTape,
}

/// Frames decoded from merged slice windows, with enough state for the
/// vector-Jacobian product back to the full latent.
#[derive(Debug, Clone)]
pub struct SlicedDecode {
    pub windows: Vec<WindowDecode>,
    pub factor: usize,
    latent_dim: (usize, usize, usize, usize),
}

impl SlicedDecode {
    /// Decoded frame `i` (absolute index), if some window produced it.
    pub fn frame(&self, i: usize) -> Option<ArrayView3<'_, f64>> {
        self.locate(i).map(|(w, k)| self.windows[w].frames.index_axis(Axis(0), k))
    }

    fn locate(&self, i: usize) -> Option<(usize, usize)> {
        self.windows.iter().enumerate().find_map(|(wi, w)| {
            let k = i.checked_sub(w.first_frame)?;
            (k < w.frames.dim().0).then_some((wi, k))
        })
    }

    /// Total latent elements passed through the decoder.
    pub fn elements_decoded(&self) -> usize {
        self.windows.iter().map(|w| w.tape.window_len()).sum::<usize>()
            * (self.latent_dim.1 / self.factor)
            * (self.latent_dim.2 / self.factor)
            * self.latent_dim.3
    }

    /// Maps per-frame gradients (absolute frame index → dL/dframe) to dL/dz on
    /// the full-resolution latent. Entries outside every window are zero.
    pub fn vjp(&self, vae: &CausalVae, dframes: &[(usize, Array3<f64>)]) -> Result<Array4<f64>> {
        let mut per_window: Vec<Option<Array4<f64>>> = vec![None; self.windows.len()];
        for (i, g) in dframes {
            let (wi, k) = self.locate(*i).ok_or_else(|| {
                Error::InvalidArgument(format!("frame {i} was not decoded by any slice window"))
            })?;
            let w = &self.windows[wi];
            if g.dim() != w.frames.index_axis(Axis(0), k).dim() {
                return Err(Error::ShapeMismatch(format!("gradient for frame {i} has shape {:?}", g.dim())));
            }
            let buf = per_window[wi].get_or_insert_with(|| Array4::zeros(w.frames.raw_dim()));
            let mut slot = buf.index_axis_mut(Axis(0), k);
            slot += g;
        }
        let mut dz = Array4::zeros(self.latent_dim);
        for (w, g) in self.windows.iter().zip(per_window) {
            let Some(g) = g else { continue };
            let dzp = vae.decode_vjp(&w.tape, g.view(), None);
            let dzw = avg_pool_vjp(dzp.view(), self.factor);
            let mut dst = dz.slice_mut(s![w.latents.clone(), .., .., ..]);
            dst += &dzw;
        }
        Ok(dz)
    }
}

/// Decodes the frames of every latent in `targets`, each from its causal
/// window of length `len` (overlapping windows are merged), after average
/// pooling the latents by `factor`.
pub fn slice_decode(
    vae: &CausalVae,
    z: &LatentTensor,
    targets: &[usize],
    len: usize,
    factor: usize,
) -> Result<SlicedDecode> {
    let r = vae.temporal_rate();
    let ranges = merge_windows(targets, len, z.len())?;
    let mut windows = Vec::with_capacity(ranges.len());
    for range in ranges {
        let zw = z.data().slice(s![range.clone(), .., .., ..]);
        let pooled = avg_pool(zw, factor)?;
        let (frames, tape) = vae.decode_window(pooled.view(), range.start)?;
        windows.push(WindowDecode {
            first_frame: latent_frames(range.start, r).start,
            latents: range,
            frames,
            tape,
        });
    }
    Ok(SlicedDecode {
        windows,
        factor,
        latent_dim: z.dim(),
    })
}

/// `F × L` matrix of relative latent deviations when frame `i` is replaced by
/// a black frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityMap {
    pub matrix: Vec<Vec<f64>>,
}

impl LocalityMap {
    pub fn frames(&self) -> usize {
        self.matrix.len()
    }

    pub fn latents(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    /// Latent indices whose deviation exceeds `threshold`, as `(first, last)`.
    pub fn support(&self, i: usize, threshold: f64) -> Option<(usize, usize)> {
        let row = &self.matrix[i];
        let first = row.iter().position(|&v| v > threshold)?;
        let last = row.iter().rposition(|&v| v > threshold)?;
        Some((first, last))
    }

    pub fn is_contiguous(&self, i: usize, threshold: f64) -> bool {
        match self.support(i, threshold) {
            None => true,
            Some((a, b)) => self.matrix[i][a..=b].iter().all(|&v| v > threshold),
        }
    }

    pub fn argmax(&self, i: usize) -> usize {
        let row = &self.matrix[i];
        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    }

    pub fn to_array(&self) -> Array2<f64> {
        let (f, l) = (self.frames(), self.latents());
        Array2::from_shape_fn((f, l), |(i, j)| self.matrix[i][j])
    }
}

pub fn locality_map(vae: &CausalVae, x: &VideoTensor) -> Result<LocalityMap> {
    let base = vae.encode(x)?;
    let norms: Vec<f64> = base
        .data()
        .outer_iter()
        .map(|zj| zj.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut matrix = Vec::with_capacity(x.frames());
    for i in 0..x.frames() {
        let mut data = x.data().clone();
        data.index_axis_mut(Axis(0), i).fill(0.0);
        let zi = vae.encode(&VideoTensor::new(data)?)?;
        let row = zi
            .data()
            .outer_iter()
            .zip(base.data().outer_iter())
            .zip(&norms)
            .map(|((a, b), n)| {
                let d = Zip::from(&a).and(&b).fold(0.0, |acc, p, q| acc + (p - q) * (p - q));
                d.sqrt() / (n + LOCALITY_EPS)
            })
            .collect();
        matrix.push(row);
    }
    Ok(LocalityMap { matrix })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Full,
    Sliced,
    SlicedDownsampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: CostMode,
    pub elements_decoded: usize,
    pub ratio_vs_full: f64,
    pub downsample_factor: usize,
    /// Decoder multiply-accumulates.
    pub flops: usize,
}

/// Exact decoder work for one guidance evaluation.
///
/// `targets` are latent indices; `latent_hw` is the latent spatial size.
pub fn decode_cost(
    vae: &CausalVae,
    mode: CostMode,
    frames: usize,
    targets: &[usize],
    len: usize,
    factor: usize,
    latent_hw: (usize, usize),
) -> Result<CostReport> {
    let l = vae.num_latents(frames);
    let (h, w) = latent_hw;
    let c = vae.config.latent_channels;
    let (ranges, factor) = match mode {
        CostMode::Full => (vec![0..l], 1),
        CostMode::Sliced => (merge_windows(targets, len, l)?, 1),
        CostMode::SlicedDownsampled => (merge_windows(targets, len, l)?, factor),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "latent {h}x{w} is not divisible by factor {factor}"
        )));
    }
    let positions = (h / factor) * (w / factor);
    let mut latents = 0;
    let mut flops = 0;
    for range in &ranges {
        latents += range.len();
        for j in range.clone() {
            flops += positions * vae.decoder_macs_per_position(j == 0);
        }
    }
    let elements = latents * positions * c;
    let full = l * h * w * c;
    Ok(CostReport {
        mode,
        elements_decoded: elements,
        ratio_vs_full: full as f64 / elements as f64,
        downsample_factor: factor,
        flops,
    })
}
