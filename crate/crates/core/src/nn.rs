//! Minimal layers with hand-written backward passes.
//!
//! Activations are row-major matrices: one row per (latent or frame, y, x)
//! position, one column per channel. The matmul kernels accumulate each output
//! row independently and in a fixed order, so evaluating a subset of rows (as
//! latent slicing does) yields bit-identical results.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// out (n×m) = a (n×k) · b (k×m)
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "matmul inner dimension");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; n * m];
    for (i, orow) in out.chunks_exact_mut(m).enumerate() {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// aᵀ (k×n) · b (n×m)
pub fn matmul_tn(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (n2, m) = b.dim();
    assert_eq!(n, n2, "matmul_tn outer dimension");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array2::from_shape_vec((k, m), out).unwrap()
}

/// a (n×m) · bᵀ (m×k)
pub fn matmul_nt(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = a.dim();
    let (k, m2) = b.dim();
    assert_eq!(m, m2, "matmul_nt inner dimension");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; n * k];
    for (i, orow) in out.chunks_exact_mut(k).enumerate() {
        let arow = &a[i * m..(i + 1) * m];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Array2::from_shape_vec((n, k), out).unwrap()
}

/// Ordered, named parameter tensors. Checkpoints and the optimizer rely on the
/// visiting order being stable.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        assert_eq!(off, flat.len(), "parameter count mismatch");
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (in, out)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = matmul(x, self.weight.view());
        y += &self.bias;
        y
    }

    /// Returns dL/dx and, when `grads` is given, accumulates parameter gradients.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grads: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grads {
            g.weight += &matmul_tn(x, dy);
            g.bias += &dy.sum_axis(ndarray::Axis(0));
        }
        matmul_nt(dy, self.weight.view())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}.weight"),
            self.weight.shape(),
            self.weight.as_slice().unwrap(),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.shape(),
            self.bias.as_slice().unwrap(),
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice_mut().unwrap());
        f(&format!("{prefix}.bias"), self.bias.as_slice_mut().unwrap());
    }
}

/// Position grid backing a row-major activation matrix: `n` temporal slots of
/// `h × w` spatial positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn slot_rows(&self) -> usize {
        self.h * self.w
    }
}

/// Gathers a causal spatio-temporal neighbourhood for every position.
///
/// Column layout is `(dt, ky, kx, channel)` where `dt = 0` is the current slot
/// and `dt = lookback - 1` the oldest one. Slots before 0 and positions outside
/// the spatial grid read as zero.
pub fn im2col(x: ArrayView2<f64>, grid: Grid, lookback: usize, kernel: usize) -> Array2<f64> {
    let c = x.ncols();
    let half = (kernel / 2) as isize;
    let cols = lookback * kernel * kernel * c;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; grid.rows() * cols];
    for n in 0..grid.n {
        for y in 0..grid.h {
            for xx in 0..grid.w {
                let row = (n * grid.h + y) * grid.w + xx;
                let orow = &mut out[row * cols..(row + 1) * cols];
                let mut col = 0;
                for dt in 0..lookback {
                    for ky in -half..=half {
                        for kx in -half..=half {
                            let (sy, sx) = (y as isize + ky, xx as isize + kx);
                            if dt <= n
                                && sy >= 0
                                && sx >= 0
                                && (sy as usize) < grid.h
                                && (sx as usize) < grid.w
                            {
                                let src = ((n - dt) * grid.h + sy as usize) * grid.w + sx as usize;
                                orow[col..col + c].copy_from_slice(&xs[src * c..(src + 1) * c]);
                            }
                            col += c;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((grid.rows(), cols), out).unwrap()
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto positions.
pub fn col2im(
    dcol: ArrayView2<f64>,
    grid: Grid,
    lookback: usize,
    kernel: usize,
    c: usize,
) -> Array2<f64> {
    let half = (kernel / 2) as isize;
    let cols = lookback * kernel * kernel * c;
    assert_eq!(dcol.ncols(), cols);
    let dcol = dcol.as_standard_layout();
    let ds = dcol.as_slice().unwrap();
    let mut out = vec![0.0; grid.rows() * c];
    for n in 0..grid.n {
        for y in 0..grid.h {
            for xx in 0..grid.w {
                let row = (n * grid.h + y) * grid.w + xx;
                let drow = &ds[row * cols..(row + 1) * cols];
                let mut col = 0;
                for dt in 0..lookback {
                    for ky in -half..=half {
                        for kx in -half..=half {
                            let (sy, sx) = (y as isize + ky, xx as isize + kx);
                            if dt <= n
                                && sy >= 0
                                && sx >= 0
                                && (sy as usize) < grid.h
                                && (sx as usize) < grid.w
                            {
                                let dst = ((n - dt) * grid.h + sy as usize) * grid.w + sx as usize;
                                for (o, d) in out[dst * c..(dst + 1) * c]
                                    .iter_mut()
                                    .zip(&drow[col..col + c])
                                {
                                    *o += d;
                                }
                            }
                            col += c;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((grid.rows(), c), out).unwrap()
}

/// Convolution with a `kernel × kernel` spatial footprint and a causal
/// temporal footprint of `lookback` slots (1 = purely spatial).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub lookback: usize,
    pub kernel: usize,
    pub lin: Linear,
}

impl Conv {
    pub fn new(lookback: usize, kernel: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            lookback,
            kernel,
            lin: Linear::new(lookback * kernel * kernel * cin, cout, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            lookback: self.lookback,
            kernel: self.kernel,
            lin: self.lin.zeros_like(),
        }
    }

    pub fn cin(&self) -> usize {
        self.lin.fan_in() / (self.lookback * self.kernel * self.kernel)
    }

    pub fn cout(&self) -> usize {
        self.lin.fan_out()
    }

    /// Returns the output and the gathered columns needed by `backward`.
    pub fn forward(&self, x: ArrayView2<f64>, grid: Grid) -> (Array2<f64>, Array2<f64>) {
        let cols = im2col(x, grid, self.lookback, self.kernel);
        let y = self.lin.forward(cols.view());
        (y, cols)
    }

    pub fn backward(
        &self,
        cols: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grid: Grid,
        grads: Option<&mut Conv>,
    ) -> Array2<f64> {
        let dcols = self.lin.backward(cols, dy, grads.map(|g| &mut g.lin));
        col2im(dcols.view(), grid, self.lookback, self.kernel, self.cin())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d *= s + v * s * (1.0 - s);
    });
    out
}

/// Mixes rows across temporal slots: `y[j] = Σ_k m[j, k] · x[k]`, applied to
/// every spatial position and channel.
pub fn temporal_mix(m: &Array2<f64>, x: &Array2<f64>, grid: Grid) -> Array2<f64> {
    let c = x.ncols();
    let xs = x
        .view()
        .into_shape_with_order((grid.n, grid.slot_rows() * c))
        .unwrap();
    matmul(m.view(), xs)
        .into_shape_with_order((grid.rows(), c))
        .unwrap()
}

/// Returns (dx, dm).
pub fn temporal_mix_backward(
    m: &Array2<f64>,
    x: &Array2<f64>,
    dy: &Array2<f64>,
    grid: Grid,
) -> (Array2<f64>, Array2<f64>) {
    let c = x.ncols();
    let xs = x
        .view()
        .into_shape_with_order((grid.n, grid.slot_rows() * c))
        .unwrap();
    let dys = dy
        .view()
        .into_shape_with_order((grid.n, grid.slot_rows() * c))
        .unwrap();
    let dx = matmul_tn(m.view(), dys)
        .into_shape_with_order((grid.rows(), c))
        .unwrap();
    let dm = matmul_nt(dys, xs);
    (dx, dm)
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal(pos: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Adam over a flattened parameter vector, with global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut impl Params, grad: &[f64]) {
        let mut flat = params.flat();
        assert_eq!(flat.len(), grad.len());
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..flat.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            flat[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        params.set_flat(&flat);
    }
}
