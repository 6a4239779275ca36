//! Pixel-space clips and latent sequences.
//!
//! Both are thin wrappers over a rank-4 `ndarray` with a fixed axis order:
//! videos are `(frames, height, width, channels)` and latents are
//! `(latents, h, w, c)`. Constructors validate the invariants once so that the
//! numerical code can work on the raw arrays.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f64>,
}

impl VideoTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (f, h, w, c) = data.dim();
        if f == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "video must be non-empty, got {:?}",
                data.dim()
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "video channels must be 1 or 3, got {c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "video values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Builds a video from a list of equally shaped frames.
    pub fn from_frames(frames: &[Array3<f64>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::ShapeMismatch("no frames".into()))?;
        let (h, w, c) = first.dim();
        let mut data = Array4::zeros((frames.len(), h, w, c));
        for (i, fr) in frames.iter().enumerate() {
            if fr.dim() != (h, w, c) {
                return Err(Error::ShapeMismatch(format!(
                    "frame {i} has shape {:?}, expected {:?}",
                    fr.dim(),
                    (h, w, c)
                )));
            }
            data.index_axis_mut(Axis(0), i).assign(fr);
        }
        Self::new(data)
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array4<f64>,
}

impl LatentTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ShapeMismatch("latent must be non-empty".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        Self {
            data: Array4::zeros(shape),
        }
    }

    /// Standard normal draw, fully determined by `seed`.
    pub fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Self {
        Self {
            data: randn4(shape, seed),
        }
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

pub fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Derives an independent child seed; used for per-step and per-repetition noise.
pub fn derive_seed(parent: u64, a: u64, b: u64) -> u64 {
    let mut x = parent ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_rejects_out_of_range_and_bad_channels() {
        assert!(VideoTensor::new(Array4::from_elem((2, 4, 4, 3), 1.5)).is_err());
        assert!(VideoTensor::new(Array4::zeros((2, 4, 4, 2))).is_err());
        assert!(VideoTensor::new(Array4::zeros((0, 4, 4, 3))).is_err());
        assert!(VideoTensor::new(Array4::zeros((1, 4, 4, 1))).is_ok());
    }

    #[test]
    fn latent_rejects_nan() {
        let mut a = Array4::zeros((1, 2, 2, 1));
        a[[0, 1, 1, 0]] = f64::NAN;
        assert!(matches!(LatentTensor::new(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn randn_is_seeded() {
        let a = LatentTensor::randn((2, 3, 3, 2), 7);
        let b = LatentTensor::randn((2, 3, 3, 2), 7);
        let c = LatentTensor::randn((2, 3, 3, 2), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..50)
            .flat_map(|t| (0..10).map(move |m| derive_seed(1, t, m)))
            .collect();
        assert_eq!(s.len(), 500);
    }
}
