//! Small differentiable feature extractors standing in for pretrained style,
//! line-art and depth networks.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STYLE_DIM: usize = 64;
const STYLE_FEATURES: usize = 22;
const STD_EPS: f64 = 1e-6;
const EDGE_EPS: f64 = 1e-3;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    StyleProxy,
    EdgeProxy,
    DepthProxy,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style_proxy" => Ok(Self::StyleProxy),
            "edge_proxy" => Ok(Self::EdgeProxy),
            "depth_proxy" => Ok(Self::DepthProxy),
            other => Err(Error::InvalidArgument(format!("unknown encoder kind `{other}`"))),
        }
    }
}

/// A fixed, seeded, differentiable image encoder Ψ.
///
/// - `StyleProxy` maps channel statistics and directional gradient energies
///   through a random projection and `tanh` to a 64-d descriptor. It is
///   sensitive to colour, contrast and stroke orientation, and blind to layout.
/// - `EdgeProxy` is the smoothed gradient magnitude of luminance, one value per
///   pixel. It sees edges of every orientation with equal weight.
/// - `DepthProxy` averages a luminance blur pyramid, a crude "brighter is
///   nearer" surrogate with no geometric understanding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    kind: EncoderKind,
    seed: u64,
    proj: Array2<f64>,
}

pub fn make_encoder(kind: EncoderKind, seed: u64) -> FeatureEncoder {
    let proj = match kind {
        EncoderKind::StyleProxy => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 1.5 / (STYLE_FEATURES as f64).sqrt()).unwrap();
            Array2::from_shape_simple_fn((STYLE_DIM, STYLE_FEATURES), || n.sample(&mut rng))
        }
        _ => Array2::zeros((0, 0)),
    };
    FeatureEncoder { kind, seed, proj }
}

impl FeatureEncoder {
    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Encodes one `(H, W, C)` image into a flat descriptor.
    pub fn encode(&self, img: ArrayView3<f64>) -> Result<Array1<f64>> {
        check_image(img)?;
        Ok(match self.kind {
            EncoderKind::StyleProxy => {
                let f = style_features(&to_rgb(img)).0;
                self.proj.dot(&f).mapv(f64::tanh)
            }
            EncoderKind::EdgeProxy => edge_map(&luma(img)).0.into_shape_with_order(img.dim().0 * img.dim().1).unwrap(),
            EncoderKind::DepthProxy => {
                let y = luma(img);
                let (h, w) = y.dim();
                depth_map(&y).into_shape_with_order(h * w).unwrap()
            }
        })
    }

    /// Vector-Jacobian product of [`encode`](Self::encode) at `img`.
    pub fn vjp(&self, img: ArrayView3<f64>, dout: ArrayView1<f64>) -> Result<Array3<f64>> {
        check_image(img)?;
        let (h, w, c) = img.dim();
        match self.kind {
            EncoderKind::StyleProxy => {
                let rgb = to_rgb(img);
                let (f, cache) = style_features(&rgb);
                let d = self.proj.dot(&f).mapv(f64::tanh);
                let dpre = &dout * &d.mapv(|t| 1.0 - t * t);
                let df = self.proj.t().dot(&dpre);
                let drgb = style_features_vjp(&rgb, &cache, df.view());
                Ok(from_rgb(drgb, c))
            }
            EncoderKind::EdgeProxy => {
                let y = luma(img);
                let (_, cache) = edge_map(&y);
                let dmap = dout.to_owned().into_shape_with_order((h, w)).unwrap();
                Ok(luma_vjp(&edge_map_vjp(&cache, dmap.view()), c))
            }
            EncoderKind::DepthProxy => {
                let dmap = dout.to_owned().into_shape_with_order((h, w)).unwrap();
                Ok(luma_vjp(&depth_map_vjp(dmap.view()), c))
            }
        }
    }
}

fn check_image(img: ArrayView3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if h < 2 || w < 2 || (c != 1 && c != 3) {
        return Err(Error::ShapeMismatch(format!("encoder input {h}x{w}x{c}")));
    }
    Ok(())
}

fn to_rgb(img: ArrayView3<f64>) -> Array3<f64> {
    if img.dim().2 == 3 {
        img.to_owned()
    } else {
        let (h, w, _) = img.dim();
        Array3::from_shape_fn((h, w, 3), |(y, x, _)| img[[y, x, 0]])
    }
}

fn from_rgb(d: Array3<f64>, c: usize) -> Array3<f64> {
    if c == 3 {
        d
    } else {
        d.sum_axis(Axis(2)).insert_axis(Axis(2))
    }
}

fn luma(img: ArrayView3<f64>) -> Array2<f64> {
    let (h, w, c) = img.dim();
    if c == 1 {
        return img.index_axis(Axis(2), 0).to_owned();
    }
    Array2::from_shape_fn((h, w), |(y, x)| (0..3).map(|k| LUMA[k] * img[[y, x, k]]).sum())
}

fn luma_vjp(dy: &Array2<f64>, c: usize) -> Array3<f64> {
    let (h, w) = dy.dim();
    if c == 1 {
        return dy.clone().insert_axis(Axis(2));
    }
    Array3::from_shape_fn((h, w, 3), |(y, x, k)| LUMA[k] * dy[[y, x]])
}

/// Pixel offsets `(dy, dx)` of the four directional differences.
const DIRS: [((usize, usize), (usize, usize)); 4] = [
    ((0, 1), (0, 0)), // horizontal: x[y, x+1] − x[y, x]
    ((1, 0), (0, 0)), // vertical
    ((1, 1), (0, 0)), // main diagonal
    ((1, 0), (0, 1)), // anti-diagonal: x[y+1, x] − x[y, x+1]
];

struct StyleCache {
    mean: [f64; 3],
    std: [f64; 3],
    rms: [[f64; 3]; 4],
}

/// 22 features: per-channel mean, std and RMS of four directional differences,
/// each shifted and scaled to be O(1) around a flat mid-grey image.
fn style_features(x: &Array3<f64>) -> (Array1<f64>, StyleCache) {
    let (h, w, _) = x.dim();
    let n = (h * w) as f64;
    let nd = ((h - 1) * (w - 1)) as f64;
    let mut cache = StyleCache {
        mean: [0.0; 3],
        std: [0.0; 3],
        rms: [[0.0; 3]; 4],
    };
    let mut f = Array1::zeros(STYLE_FEATURES);
    for c in 0..3 {
        let ch = x.index_axis(Axis(2), c);
        let m = ch.sum() / n;
        let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = (var + STD_EPS).sqrt();
        cache.mean[c] = m;
        cache.std[c] = s;
        f[c] = 2.0 * (m - 0.5);
        f[3 + c] = 4.0 * s;
        for (d, &((ay, ax), (by, bx))) in DIRS.iter().enumerate() {
            let mut e = 0.0;
            for y in 0..h - 1 {
                for xx in 0..w - 1 {
                    let g = ch[[y + ay, xx + ax]] - ch[[y + by, xx + bx]];
                    e += g * g;
                }
            }
            let r = (e / nd + STD_EPS).sqrt();
            cache.rms[d][c] = r;
            f[6 + 4 * c + d] = 4.0 * r;
        }
    }
    (f, cache)
}

fn style_features_vjp(x: &Array3<f64>, cache: &StyleCache, df: ArrayView1<f64>) -> Array3<f64> {
    let (h, w, _) = x.dim();
    let n = (h * w) as f64;
    let nd = ((h - 1) * (w - 1)) as f64;
    let mut dx = Array3::zeros(x.raw_dim());
    for c in 0..3 {
        let ch = x.index_axis(Axis(2), c);
        let mut dch = dx.index_axis_mut(Axis(2), c);
        let (m, s) = (cache.mean[c], cache.std[c]);
        let dm = 2.0 * df[c] / n;
        // s = sqrt(Σ(x−m)²/n + eps): ds/dx_k = (x_k − m)/(n s)
        let ds = 4.0 * df[3 + c] / (n * s);
        dch.zip_mut_with(&ch, |d, &v| *d += dm + ds * (v - m));
        for (d, &((ay, ax), (by, bx))) in DIRS.iter().enumerate() {
            // r = sqrt(Σg²/nd + eps): dr/dg = g/(nd r)
            let k = 4.0 * df[6 + 4 * c + d] / (nd * cache.rms[d][c]);
            if k == 0.0 {
                continue;
            }
            for y in 0..h - 1 {
                for xx in 0..w - 1 {
                    let g = ch[[y + ay, xx + ax]] - ch[[y + by, xx + bx]];
                    dch[[y + ay, xx + ax]] += k * g;
                    dch[[y + by, xx + bx]] -= k * g;
                }
            }
        }
    }
    dx
}

struct EdgeCache {
    gx: Array2<f64>,
    gy: Array2<f64>,
    mag: Array2<f64>,
}

/// `sqrt(gx² + gy² + ε²) − ε` with central differences and replicate padding.
fn edge_map(y: &Array2<f64>) -> (Array2<f64>, EdgeCache) {
    let (h, w) = y.dim();
    let gx = Array2::from_shape_fn((h, w), |(r, c)| 0.5 * (y[[r, (c + 1).min(w - 1)]] - y[[r, c.saturating_sub(1)]]));
    let gy = Array2::from_shape_fn((h, w), |(r, c)| 0.5 * (y[[(r + 1).min(h - 1), c]] - y[[r.saturating_sub(1), c]]));
    let mag = Array2::from_shape_fn((h, w), |p| (gx[p] * gx[p] + gy[p] * gy[p] + EDGE_EPS * EDGE_EPS).sqrt());
    let out = mag.mapv(|m| m - EDGE_EPS);
    (out, EdgeCache { gx, gy, mag })
}

fn edge_map_vjp(cache: &EdgeCache, dout: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = dout.dim();
    let mut dy = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let k = dout[[r, c]] / cache.mag[[r, c]];
            let (dgx, dgy) = (0.5 * k * cache.gx[[r, c]], 0.5 * k * cache.gy[[r, c]]);
            dy[[r, (c + 1).min(w - 1)]] += dgx;
            dy[[r, c.saturating_sub(1)]] -= dgx;
            dy[[(r + 1).min(h - 1), c]] += dgy;
            dy[[r.saturating_sub(1), c]] -= dgy;
        }
    }
    dy
}

fn pyramid_levels(h: usize, w: usize) -> Vec<usize> {
    [1, 2, 4].into_iter().filter(|k| h % k == 0 && w % k == 0).collect()
}

/// Mean over pyramid levels of the block-averaged luminance, upsampled back
/// by replication.
fn depth_map(y: &Array2<f64>) -> Array2<f64> {
    let (h, w) = y.dim();
    let levels = pyramid_levels(h, w);
    let mut out = Array2::zeros((h, w));
    for &k in &levels {
        let inv = 1.0 / (k * k) as f64;
        for by in 0..h / k {
            for bx in 0..w / k {
                let m = y.slice(ndarray::s![by * k..(by + 1) * k, bx * k..(bx + 1) * k]).sum() * inv;
                out.slice_mut(ndarray::s![by * k..(by + 1) * k, bx * k..(bx + 1) * k])
                    .mapv_inplace(|v| v + m);
            }
        }
    }
    out / levels.len() as f64
}

fn depth_map_vjp(dout: ArrayView2<f64>) -> Array2<f64> {
    // The map is linear and self-adjoint (block averages are symmetric).
    depth_map(&dout.to_owned())
}
