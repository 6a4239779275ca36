//! Frame-level guidance losses. Every loss consumes decoded frames and returns
//! its value together with dL/dframe for each frame it touched.

pub mod encoders;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};

pub use encoders::{make_encoder, EncoderKind, FeatureEncoder};

use crate::error::{Error, Result};
use crate::slicing::avg_pool;

/// A loss value and its gradient with respect to each guided frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// Sorted by frame index; one entry per frame.
    pub grads: Vec<(usize, Array3<f64>)>,
}

fn check_pair(a: ArrayView3<f64>, b: ArrayView3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn sq_diff(x: ArrayView3<f64>, t: ArrayView3<f64>) -> (f64, Array3<f64>) {
    let mut g = Array3::zeros(x.raw_dim());
    let mut v = 0.0;
    Zip::from(&mut g).and(x).and(t).for_each(|g, &x, &t| {
        let d = x - t;
        v += d * d;
        *g = 2.0 * d;
    });
    (v, g)
}

/// `Σ_i ‖x_i − target_i‖²`.
pub fn keyframe_l2(preds: &[ArrayView3<f64>], targets: &[ArrayView3<f64>]) -> Result<(f64, Vec<Array3<f64>>)> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} frames vs {} targets", preds.len(), targets.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (x, t) in preds.iter().zip(targets) {
        check_pair(*x, *t, "keyframe_l2")?;
        let (v, g) = sq_diff(*x, *t);
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}

/// `Σ_i ‖mask ⊙ (x_i − target_i)‖²` with a binary `(H, W)` mask shared by
/// all channels.
pub fn masked_l2(
    preds: &[ArrayView3<f64>],
    targets: &[ArrayView3<f64>],
    mask: ArrayView2<f64>,
) -> Result<(f64, Vec<Array3<f64>>)> {
    check_mask(mask)?;
    let (_, mut grads) = keyframe_l2(preds, targets)?;
    let mut total = 0.0;
    for ((x, t), g) in preds.iter().zip(targets).zip(grads.iter_mut()) {
        if (x.dim().0, x.dim().1) != mask.dim() {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs frame {:?}", mask.dim(), x.dim())));
        }
        for ((y, xx, c), gv) in g.indexed_iter_mut() {
            let m = mask[[y, xx]];
            let d = x[[y, xx, c]] - t[[y, xx, c]];
            total += m * d * d;
            *gv *= m;
        }
    }
    Ok((total, grads))
}

fn check_mask(mask: ArrayView2<f64>) -> Result<()> {
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArgument("mask must be 0/1 valued".into()));
    }
    if mask.iter().all(|&m| m == 0.0) {
        log::warn!("masked loss has an all-zero mask; guidance is a no-op");
    }
    Ok(())
}

/// `‖sg(x_first) − x_last‖²`. Returns the value, dL/dx_first (always zero)
/// and dL/dx_last.
pub fn loop_loss(first: ArrayView3<f64>, last: ArrayView3<f64>) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    check_pair(first, last, "loop_loss")?;
    let (v, g) = sq_diff(last, first);
    Ok((v, Array3::zeros(first.raw_dim()), g))
}

fn cosine_with_grad(a: &Array1<f64>, b: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    let (ab, aa, bb) = (a.dot(b), a.dot(a), b.dot(b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("zero-norm style descriptor".into()));
    }
    let denom = (aa * bb).sqrt();
    let cos = ab / denom;
    // d cos / d b = a/denom − cos·b/bb
    let g = a / denom - &(b * (cos / bb));
    Ok((cos, g))
}

/// `−Σ_i cos(Ψ(style), Ψ(x_i))`.
pub fn style_loss(
    preds: &[ArrayView3<f64>],
    style: ArrayView3<f64>,
    encoder: &FeatureEncoder,
) -> Result<(f64, Vec<Array3<f64>>)> {
    if encoder.kind() != EncoderKind::StyleProxy {
        return Err(Error::InvalidArgument("style loss needs a style_proxy encoder".into()));
    }
    let ds = encoder.encode(style)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for x in preds {
        let dx = encoder.encode(*x)?;
        let (cos, g) = cosine_with_grad(&ds, &dx)?;
        total -= cos;
        grads.push(encoder.vjp(*x, (-g).view())?);
    }
    Ok((total, grads))
}

/// `Σ_i ‖Ψ(x_*^i) − Ψ(x_i)‖²` against pre-encoded targets.
pub fn encoded_l2(
    preds: &[ArrayView3<f64>],
    encoded_targets: &[Array1<f64>],
    encoder: &FeatureEncoder,
) -> Result<(f64, Vec<Array3<f64>>)> {
    if encoder.kind() == EncoderKind::StyleProxy {
        return Err(Error::InvalidArgument("encoded loss needs an edge or depth proxy".into()));
    }
    if preds.len() != encoded_targets.len() {
        return Err(Error::ShapeMismatch("encoded_l2: frame/target count mismatch".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (x, t) in preds.iter().zip(encoded_targets) {
        let e = encoder.encode(*x)?;
        if e.len() != t.len() {
            return Err(Error::ShapeMismatch(format!("encoded target has {} values, expected {}", t.len(), e.len())));
        }
        let d = &e - t;
        total += d.dot(&d);
        grads.push(encoder.vjp(*x, (&d * 2.0).view())?);
    }
    Ok((total, grads))
}

/// A guidance objective over decoded frames.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameCondition {
    Keyframe {
        frames: Vec<usize>,
        targets: Vec<Array3<f64>>,
    },
    Style {
        frames: Vec<usize>,
        style: Array3<f64>,
        encoder: FeatureEncoder,
    },
    Loop {
        first: usize,
        last: usize,
    },
    Encoded {
        frames: Vec<usize>,
        images: Vec<Array3<f64>>,
        encoded: Vec<Array1<f64>>,
        encoder: FeatureEncoder,
    },
    Masked {
        frames: Vec<usize>,
        targets: Vec<Array3<f64>>,
        mask: Array2<f64>,
    },
    Composite(Vec<(FrameCondition, f64)>),
}

impl FrameCondition {
    /// Builds an encoder-aligned condition, encoding the target images once.
    pub fn encoded(frames: Vec<usize>, images: Vec<Array3<f64>>, encoder: FeatureEncoder) -> Result<Self> {
        let encoded = images.iter().map(|i| encoder.encode(i.view())).collect::<Result<_>>()?;
        Ok(Self::Encoded {
            frames,
            images,
            encoded,
            encoder,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Keyframe { .. } => "keyframe",
            Self::Style { .. } => "style",
            Self::Loop { .. } => "loop",
            Self::Encoded { .. } => "encoded",
            Self::Masked { .. } => "masked",
            Self::Composite(_) => "composite",
        }
    }

    /// Sorted, deduplicated frame indices this condition reads.
    pub fn guided_frames(&self) -> Vec<usize> {
        let mut out = match self {
            Self::Keyframe { frames, .. }
            | Self::Style { frames, .. }
            | Self::Encoded { frames, .. }
            | Self::Masked { frames, .. } => frames.clone(),
            Self::Loop { first, last } => vec![*first, *last],
            Self::Composite(children) => children.iter().flat_map(|(c, _)| c.guided_frames()).collect(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Checks indices, payload counts, weights and shapes against a clip of
    /// `frames` frames of size `(h, w, c)`.
    pub fn validate(&self, frames: usize, (h, w, c): (usize, usize, usize)) -> Result<()> {
        let check_idx = |idx: &[usize]| -> Result<()> {
            if idx.is_empty() {
                return Err(Error::InvalidArgument("condition guides no frames".into()));
            }
            match idx.iter().find(|&&i| i >= frames) {
                Some(i) => Err(Error::InvalidArgument(format!("guided frame {i} out of range for {frames} frames"))),
                None => Ok(()),
            }
        };
        let check_imgs = |imgs: &[Array3<f64>], n: usize| -> Result<()> {
            if imgs.len() != n {
                return Err(Error::InvalidArgument(format!("{} target images for {n} frames", imgs.len())));
            }
            match imgs.iter().find(|i| i.dim() != (h, w, c)) {
                Some(i) => Err(Error::ShapeMismatch(format!("target {:?} vs frame {:?}", i.dim(), (h, w, c)))),
                None => Ok(()),
            }
        };
        match self {
            Self::Keyframe { frames: f, targets } => {
                check_idx(f)?;
                check_imgs(targets, f.len())
            }
            Self::Style { frames: f, style, encoder } => {
                check_idx(f)?;
                if encoder.kind() != EncoderKind::StyleProxy {
                    return Err(Error::InvalidArgument("style condition needs a style_proxy encoder".into()));
                }
                if style.dim().2 != c {
                    return Err(Error::ShapeMismatch("style image channel count differs from the video".into()));
                }
                Ok(())
            }
            Self::Loop { first, last } => {
                check_idx(&[*first, *last])?;
                if first == last {
                    return Err(Error::InvalidArgument("loop condition needs two distinct frames".into()));
                }
                Ok(())
            }
            Self::Encoded {
                frames: f,
                images,
                encoder,
                ..
            } => {
                check_idx(f)?;
                if encoder.kind() == EncoderKind::StyleProxy {
                    return Err(Error::InvalidArgument("encoded condition needs an edge or depth proxy".into()));
                }
                check_imgs(images, f.len())
            }
            Self::Masked {
                frames: f,
                targets,
                mask,
            } => {
                check_idx(f)?;
                check_imgs(targets, f.len())?;
                if mask.dim() != (h, w) {
                    return Err(Error::ShapeMismatch(format!("mask {:?} vs frame {h}x{w}", mask.dim())));
                }
                check_mask(mask.view())
            }
            Self::Composite(children) => {
                if children.is_empty() {
                    return Err(Error::InvalidArgument("composite condition has no children".into()));
                }
                for (child, wgt) in children {
                    if !(wgt.is_finite() && *wgt >= 0.0) {
                        return Err(Error::InvalidArgument(format!("condition weight {wgt} must be finite and ≥ 0")));
                    }
                    child.validate(frames, (h, w, c))?;
                }
                Ok(())
            }
        }
    }

    /// The same condition with every pixel-space payload average-pooled by
    /// `factor`, for comparison against frames decoded from pooled latents.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let pool = |img: &Array3<f64>| -> Result<Array3<f64>> {
            Ok(avg_pool(img.view().insert_axis(Axis(0)), factor)?.index_axis_move(Axis(0), 0))
        };
        let pool_all = |imgs: &[Array3<f64>]| imgs.iter().map(pool).collect::<Result<Vec<_>>>();
        Ok(match self {
            Self::Keyframe { frames, targets } => Self::Keyframe {
                frames: frames.clone(),
                targets: pool_all(targets)?,
            },
            Self::Style { frames, style, encoder } => Self::Style {
                frames: frames.clone(),
                style: pool(style)?,
                encoder: encoder.clone(),
            },
            Self::Loop { .. } => self.clone(),
            Self::Encoded {
                frames,
                images,
                encoder,
                ..
            } => Self::encoded(frames.clone(), pool_all(images)?, encoder.clone())?,
            Self::Masked { frames, targets, mask } => {
                let m3 = mask.view().insert_axis(Axis(2)).insert_axis(Axis(0));
                let pooled = avg_pool(m3, factor)?.index_axis_move(Axis(0), 0).index_axis_move(Axis(2), 0);
                Self::Masked {
                    frames: frames.clone(),
                    targets: pool_all(targets)?,
                    mask: pooled.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
                }
            }
            Self::Composite(children) => Self::Composite(
                children
                    .iter()
                    .map(|(c, w)| Ok((c.downsampled(factor)?, *w)))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Evaluates the loss on frames supplied by `frame(i)`.
    pub fn evaluate<'a>(&self, frame: &dyn Fn(usize) -> Option<ArrayView3<'a, f64>>) -> Result<LossGrad> {
        let fetch = |idx: &[usize]| -> Result<Vec<ArrayView3<'a, f64>>> {
            idx.iter()
                .map(|&i| frame(i).ok_or_else(|| Error::InvalidArgument(format!("frame {i} is not available"))))
                .collect()
        };
        let (value, idx, grads) = match self {
            Self::Keyframe { frames, targets } => {
                let (v, g) = keyframe_l2(&fetch(frames)?, &views(targets))?;
                (v, frames.clone(), g)
            }
            Self::Style { frames, style, encoder } => {
                let (v, g) = style_loss(&fetch(frames)?, style.view(), encoder)?;
                (v, frames.clone(), g)
            }
            Self::Loop { first, last } => {
                let xs = fetch(&[*first, *last])?;
                let (v, gf, gl) = loop_loss(xs[0], xs[1])?;
                (v, vec![*first, *last], vec![gf, gl])
            }
            Self::Encoded {
                frames,
                encoded,
                encoder,
                ..
            } => {
                let (v, g) = encoded_l2(&fetch(frames)?, encoded, encoder)?;
                (v, frames.clone(), g)
            }
            Self::Masked { frames, targets, mask } => {
                let (v, g) = masked_l2(&fetch(frames)?, &views(targets), mask.view())?;
                (v, frames.clone(), g)
            }
            Self::Composite(children) => return composite_loss(children, frame),
        };
        let mut acc = BTreeMap::new();
        for (i, g) in idx.into_iter().zip(grads) {
            accumulate(&mut acc, i, g, 1.0);
        }
        Ok(LossGrad {
            value,
            grads: acc.into_iter().collect(),
        })
    }
}

fn views(imgs: &[Array3<f64>]) -> Vec<ArrayView3<'_, f64>> {
    imgs.iter().map(|i| i.view()).collect()
}

fn accumulate(acc: &mut BTreeMap<usize, Array3<f64>>, i: usize, g: Array3<f64>, w: f64) {
    match acc.get_mut(&i) {
        Some(a) => a.scaled_add(w, &g),
        None => {
            acc.insert(i, if w == 1.0 { g } else { g * w });
        }
    }
}

/// Weighted sum of child losses and their gradients. Zero-weight children are
/// skipped.
pub fn composite_loss<'a>(
    children: &[(FrameCondition, f64)],
    frame: &dyn Fn(usize) -> Option<ArrayView3<'a, f64>>,
) -> Result<LossGrad> {
    if children.is_empty() {
        return Err(Error::InvalidArgument("composite condition has no children".into()));
    }
    let mut value = 0.0;
    let mut acc = BTreeMap::new();
    for (child, w) in children {
        if *w == 0.0 {
            continue;
        }
        let lg = child.evaluate(frame)?;
        value += w * lg.value;
        for (i, g) in lg.grads {
            accumulate(&mut acc, i, g, *w);
        }
    }
    Ok(LossGrad {
        value,
        grads: acc.into_iter().collect(),
    })
}

/// Convenience for callers holding a whole clip as `(F, H, W, C)`.
pub fn evaluate_on_clip(cond: &FrameCondition, clip: &Array4<f64>) -> Result<LossGrad> {
    let n = clip.dim().0;
    cond.evaluate(&|i| (i < n).then(|| clip.index_axis(Axis(0), i)))
}
