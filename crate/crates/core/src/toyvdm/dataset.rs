//! Seeded moving-shape clips: one square or disc bouncing linearly inside the
//! frame over a flat background.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClipSpec {
    pub shape: ShapeKind,
    /// Half side length (square) or radius (circle), pixels.
    pub size: f64,
    pub color: [f64; 3],
    pub background: [f64; 3],
    /// Centre at frame 0, pixels (x, y).
    pub start: [f64; 2],
    /// Pixels per frame (x, y).
    pub velocity: [f64; 2],
    pub seed: u64,
}

impl SyntheticClipSpec {
    /// Draws a random spec for a `height × width` canvas.
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = if rng.random_bool(0.5) {
            ShapeKind::Square
        } else {
            ShapeKind::Circle
        };
        let extent = height.min(width) as f64;
        let size = rng.random_range(0.14 * extent..0.24 * extent);
        let color = [
            rng.random_range(0.45..0.95),
            rng.random_range(0.45..0.95),
            rng.random_range(0.45..0.95),
        ];
        let background = [
            rng.random_range(0.05..0.3),
            rng.random_range(0.05..0.3),
            rng.random_range(0.05..0.3),
        ];
        let start = [
            rng.random_range(size..width as f64 - size),
            rng.random_range(size..height as f64 - size),
        ];
        let speed = rng.random_range(0.6..2.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            shape,
            size,
            color,
            background,
            start,
            velocity: [speed * angle.cos(), speed * angle.sin()],
            seed,
        }
    }

    /// Centre position at `frame`, reflecting off the walls so the shape stays
    /// fully inside the canvas.
    pub fn centre(&self, frame: usize, height: usize, width: usize) -> [f64; 2] {
        let bounce = |p0: f64, v: f64, extent: f64| {
            let lo = self.size;
            let span = extent - 2.0 * self.size;
            if span <= 0.0 {
                return extent / 2.0;
            }
            let u = (p0 - lo + v * frame as f64).rem_euclid(2.0 * span);
            lo + if u > span { 2.0 * span - u } else { u }
        };
        [
            bounce(self.start[0], self.velocity[0], width as f64),
            bounce(self.start[1], self.velocity[1], height as f64),
        ]
    }

    pub fn covers(&self, centre: [f64; 2], px: usize, py: usize) -> bool {
        let dx = px as f64 + 0.5 - centre[0];
        let dy = py as f64 + 0.5 - centre[1];
        match self.shape {
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
        }
    }

    pub fn render(&self, frames: usize, height: usize, width: usize, channels: usize) -> Result<VideoTensor> {
        let mut data = Array4::zeros((frames, height, width, channels));
        let gray = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        for f in 0..frames {
            let centre = self.centre(f, height, width);
            for y in 0..height {
                for x in 0..width {
                    let col = if self.covers(centre, x, y) {
                        &self.color
                    } else {
                        &self.background
                    };
                    if channels == 1 {
                        data[[f, y, x, 0]] = gray(col);
                    } else {
                        for c in 0..3 {
                            data[[f, y, x, c]] = col[c];
                        }
                    }
                }
            }
        }
        VideoTensor::new(data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 128,
            frames: 17,
            height: 32,
            width: 32,
            channels: 3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one clip".into()));
        }
        if self.frames < 9 {
            return Err(Error::InvalidArgument(format!(
                "need at least 9 frames, got {}",
                self.frames
            )));
        }
        if self.height != self.width || self.height < 16 {
            return Err(Error::InvalidArgument(format!(
                "frames must be square and at least 16 px, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument("channels must be 1 or 3".into()));
        }
        Ok(())
    }

    pub fn clip_specs(&self) -> Vec<SyntheticClipSpec> {
        (0..self.count as u64)
            .map(|i| SyntheticClipSpec::random(self.height, self.width, derive_seed(self.seed, i, 0)))
            .collect()
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<VideoTensor>> {
    spec.validate()?;
    spec.clip_specs()
        .iter()
        .map(|c| c.render(spec.frames, spec.height, spec.width, spec.channels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            count: 6,
            frames: 9,
            height: 16,
            width: 16,
            channels: 3,
            seed: 11,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
        let mut other = small();
        other.seed = 12;
        assert_ne!(generate_dataset(&small()).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn zero_velocity_is_static() {
        let mut s = SyntheticClipSpec::random(32, 32, 3);
        s.velocity = [0.0, 0.0];
        let v = s.render(9, 32, 32, 3).unwrap();
        for f in 1..9 {
            assert_eq!(v.frame(f), v.frame(0));
        }
    }

    #[test]
    fn degenerate_sizes_rejected() {
        for (f, h, w) in [(8, 16, 16), (9, 15, 15), (9, 16, 20)] {
            let spec = DatasetSpec {
                frames: f,
                height: h,
                width: w,
                ..small()
            };
            assert!(generate_dataset(&spec).is_err());
        }
        assert!(generate_dataset(&DatasetSpec { count: 0, ..small() }).is_err());
    }

    #[test]
    fn grayscale_clips() {
        let v = generate_dataset(&DatasetSpec { channels: 1, ..small() }).unwrap();
        assert_eq!(v[0].channels(), 1);
    }

    #[test]
    fn centroid_follows_step_by_step_bounce() {
        // Oracle: integrate the motion one frame at a time, flipping velocity on
        // wall contact, independently of the closed-form triangle wave.
        for seed in 0..20 {
            let spec = SyntheticClipSpec::random(32, 32, seed);
            let clip = spec.render(17, 32, 32, 3).unwrap();
            let (lo, hi) = (spec.size, 32.0 - spec.size);
            let mut p = spec.start;
            let mut v = spec.velocity;
            for f in 0..17 {
                if f > 0 {
                    for a in 0..2 {
                        p[a] += v[a];
                        while p[a] < lo || p[a] > hi {
                            if p[a] > hi {
                                p[a] = 2.0 * hi - p[a];
                            } else {
                                p[a] = 2.0 * lo - p[a];
                            }
                            v[a] = -v[a];
                        }
                    }
                }
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in 0..32 {
                    for x in 0..32 {
                        let px = clip.data()[[f, y, x, 0]];
                        if (px - spec.color[0]).abs() < 1e-12 && spec.color[0] != spec.background[0] {
                            sx += x as f64 + 0.5;
                            sy += y as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                }
                assert!(n > 0.0);
                let (cx, cy) = (sx / n, sy / n);
                assert!(
                    (cx - p[0]).abs() <= 1.0 && (cy - p[1]).abs() <= 1.0,
                    "seed {seed} frame {f}: centroid ({cx:.2},{cy:.2}) vs ({:.2},{:.2})",
                    p[0],
                    p[1]
                );
            }
        }
    }
}
