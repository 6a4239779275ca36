//! Diagnostic studies over guided runs, plus their export as JSON reports and
//! PNG figures.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    latent_hash, run_frame_guidance, sample_unguided, GradPropagationMap, GuidanceOutput, GuidanceRun, ShortcutReport, Trace,
};
use crate::losses::{evaluate_on_clip, FrameCondition};
use crate::slicing::{avg_pool, CostReport, LocalityMap};
use crate::tensor::VideoTensor;

/// Pixels within this distance of 0 or 1 count as saturated.
pub const SATURATION_BAND: f64 = 1.0 / 255.0;

/// Condition loss evaluated on a finished full-resolution video.
pub fn condition_distance(cond: &FrameCondition, video: &VideoTensor) -> Result<f64> {
    Ok(evaluate_on_clip(cond, video.data())?.value)
}

/// Mean L2 distance between frames `i` and `i+1` over the given `i`.
pub fn temporal_coherence(video: &VideoTensor, pairs: &[usize]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&i| {
            (&video.frame(i + 1) - &video.frame(i))
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / pairs.len() as f64
}

/// Fraction of values within [`SATURATION_BAND`] of 0 or 1.
pub fn saturation(video: &VideoTensor) -> f64 {
    let n = video.data().len() as f64;
    video
        .data()
        .iter()
        .filter(|&&v| v <= SATURATION_BAND || v >= 1.0 - SATURATION_BAND)
        .count() as f64
        / n
}

/// Low-frequency distance between each step's clean prediction and the final
/// video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutCurve {
    /// Steps from T down to 0.
    pub steps: Vec<usize>,
    pub distance: Vec<f64>,
    pub pool: usize,
    pub t_layout: usize,
    pub t_detail: usize,
    /// First 1-based inference step at which the distance falls to 20% of its
    /// value at t = T.
    pub knee_step: Option<usize>,
}

impl LayoutCurve {
    pub fn at(&self, t: usize) -> Option<f64> {
        self.steps.iter().position(|&s| s == t).map(|k| self.distance[k])
    }
}

fn pooled(video: &VideoTensor, pool: usize) -> Result<ndarray::Array4<f64>> {
    avg_pool(video.data().view(), pool)
}

/// Builds the curve from the snapshots a run recorded. Fails if snapshots are
/// missing or do not hash to what the trace recorded.
pub fn layout_formation_curve(run: &GuidanceRun, out: &GuidanceOutput, pool: usize) -> Result<LayoutCurve> {
    let steps = run.sched.steps();
    if out.snapshots.len() != steps || out.trace.snapshots.len() != steps {
        return Err(Error::InvalidArgument(format!(
            "layout curve needs {steps} snapshots, run recorded {}",
            out.snapshots.len()
        )));
    }
    let fin = pooled(&out.video, pool)?;
    let mut ts = Vec::with_capacity(steps + 1);
    let mut distance = Vec::with_capacity(steps + 1);
    for ((t, z0), rec) in out.snapshots.iter().zip(&out.trace.snapshots) {
        if rec.t != *t || rec.sha256 != latent_hash(z0) {
            return Err(Error::InvalidArgument(format!("snapshot at t = {t} does not match the trace")));
        }
        let v = run.models.vae.decode_frames(z0, run.frames)?;
        let d = (&pooled(&v, pool)? - &fin).iter().map(|x| x * x).sum::<f64>().sqrt();
        ts.push(*t);
        distance.push(d);
    }
    ts.push(0);
    distance.push(0.0);
    let d0 = distance[0];
    let knee_step = distance.iter().position(|&d| d <= 0.2 * d0).map(|k| k + 1);
    Ok(LayoutCurve {
        steps: ts,
        distance,
        pool,
        t_layout: run.cfg.t_layout,
        t_detail: run.cfg.t_detail,
        knee_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    TimeTravelOnly,
    DeterministicOnly,
    Vlo,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [Self::TimeTravelOnly, Self::DeterministicOnly, Self::Vlo];

    /// Rewrites the stage boundaries of `run` for this variant; the guided
    /// step range `t > t_detail` is unchanged.
    pub fn apply(self, run: &mut GuidanceRun) {
        match self {
            Self::TimeTravelOnly => run.cfg.t_layout = run.sched.steps(),
            Self::DeterministicOnly => run.cfg.t_layout = run.cfg.t_detail,
            Self::Vlo => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub guided_l2: f64,
    /// Mean adjacent-frame distance divided by the unguided baseline's.
    pub coherence: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: AblationVariant,
    pub mean_guided_l2: f64,
    pub mean_coherence: f64,
    pub mean_saturation: f64,
    pub per_seed: Vec<SeedMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub unguided_mean_guided_l2: f64,
    pub unguided_mean_saturation: f64,
    /// Hash of each seed's unguided final latent; every variant is compared
    /// against the same baseline.
    pub baseline_hashes: Vec<String>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, v: AblationVariant) -> &VariantSummary {
        self.variants.iter().find(|s| s.variant == v).expect("all variants present")
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs the three latent-optimisation variants on paired seeds.
pub fn run_vlo_ablation(base: &GuidanceRun, seeds: &[u64]) -> Result<AblationReport> {
    let cond = base
        .condition
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("ablation needs a condition".into()))?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let all_pairs: Vec<usize> = (0..base.frames - 1).collect();
    let per_seed: Vec<(String, f64, f64, Vec<SeedMetrics>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut run = base.clone();
            run.seed = seed;
            run.record_snapshots = false;
            let unguided = sample_unguided(&run)?;
            let base_coh = temporal_coherence(&unguided.video, &all_pairs).max(1e-12);
            let metrics = AblationVariant::ALL
                .iter()
                .map(|&v| {
                    let mut r = run.clone();
                    v.apply(&mut r);
                    let video = run_frame_guidance(&r)?.video;
                    Ok(SeedMetrics {
                        seed,
                        guided_l2: condition_distance(cond, &video)?,
                        coherence: temporal_coherence(&video, &all_pairs) / base_coh,
                        saturation: saturation(&video),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((
                latent_hash(&unguided.latent),
                condition_distance(cond, &unguided.video)?,
                saturation(&unguided.video),
                metrics,
            ))
        })
        .collect::<Result<_>>()?;
    let variants = AblationVariant::ALL
        .iter()
        .enumerate()
        .map(|(k, &variant)| {
            let rows: Vec<SeedMetrics> = per_seed.iter().map(|p| p.3[k].clone()).collect();
            VariantSummary {
                variant,
                mean_guided_l2: mean(rows.iter().map(|r| r.guided_l2)),
                mean_coherence: mean(rows.iter().map(|r| r.coherence)),
                mean_saturation: mean(rows.iter().map(|r| r.saturation)),
                per_seed: rows,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        unguided_mean_guided_l2: mean(per_seed.iter().map(|p| p.1)),
        unguided_mean_saturation: mean(per_seed.iter().map(|p| p.2)),
        baseline_hashes: per_seed.into_iter().map(|p| p.0).collect(),
        variants,
    })
}

/// Reports to export; absent sections are skipped.
#[derive(Debug, Clone, Default)]
pub struct FigureBundle {
    pub locality: Option<LocalityMap>,
    pub gradprop: Option<GradPropagationMap>,
    pub layout: Option<LayoutCurve>,
    pub trace: Option<Trace>,
    pub cost: Option<Vec<CostReport>>,
    pub ablation: Option<AblationReport>,
    pub shortcut: Option<Vec<ShortcutReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureEntry {
    pub name: String,
    pub json: String,
    pub image: String,
    pub kind: String,
    /// Heat-maps only: each matrix cell is `scale × scale` pixels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scale: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub entries: Vec<FigureEntry>,
}

pub const HEATMAP_SCALE: u32 = 16;
const PLOT_W: u32 = 320;
const PLOT_H: u32 = 160;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Grayscale heat-map, brightest at the matrix maximum.
pub fn heatmap(m: &Array2<f64>, scale: u32) -> GrayImage {
    let max = m.iter().cloned().fold(0.0_f64, f64::max);
    let (rows, cols) = m.dim();
    GrayImage::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let v = m[[(y / scale) as usize, (x / scale) as usize]];
        let g = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
        Luma([g.clamp(0.0, 255.0) as u8])
    })
}

fn draw_line(img: &mut GrayImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for k in 0..=steps {
        let x = x0 + (x1 - x0) * k / steps;
        let y = y0 + (y1 - y0) * k / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Luma([255]));
        }
    }
}

/// Polyline of `ys` against their index, white on black.
pub fn line_plot(ys: &[f64]) -> GrayImage {
    let mut img = GrayImage::new(PLOT_W, PLOT_H);
    let (lo, hi) = ys.iter().fold((f64::MAX, f64::MIN), |(a, b), &y| (a.min(y), b.max(y)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = ys.len().max(2) - 1;
    let pt = |k: usize, y: f64| {
        let x = (k as f64 / n as f64 * (PLOT_W - 1) as f64).round() as i64;
        let yy = ((1.0 - (y - lo) / span) * (PLOT_H - 1) as f64).round() as i64;
        (x, yy)
    };
    for k in 1..ys.len() {
        draw_line(&mut img, pt(k - 1, ys[k - 1]), pt(k, ys[k]));
    }
    if ys.len() == 1 {
        let p = pt(0, ys[0]);
        draw_line(&mut img, p, p);
    }
    img
}

/// One bar per value, heights relative to the largest.
pub fn bar_chart(values: &[f64]) -> GrayImage {
    let bar = 24u32;
    let w = (values.len() as u32).max(1) * bar;
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    GrayImage::from_fn(w, PLOT_H, |x, y| {
        let k = (x / bar) as usize;
        let v = values.get(k).copied().unwrap_or(0.0);
        let h = if max > 0.0 { v / max * PLOT_H as f64 } else { 0.0 };
        let inside = x % bar >= 2 && x % bar < bar - 2 && (PLOT_H - y) as f64 <= h;
        Luma([if inside { 255 } else { 0 }])
    })
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Writes each present report as `<name>.json` + `<name>.png` under `dir`,
/// plus a `manifest.json` listing them.
pub fn emit_figure_bundle(dir: &Path, bundle: &FigureBundle) -> Result<BundleManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut emit = |name: &str, kind: &str, json: &dyn Fn(&Path) -> Result<()>, img: GrayImage, scale: Option<u32>| -> Result<()> {
        let jp: PathBuf = dir.join(format!("{name}.json"));
        let ip: PathBuf = dir.join(format!("{name}.png"));
        json(&jp)?;
        save_png(&img, &ip)?;
        entries.push(FigureEntry {
            name: name.into(),
            json: format!("{name}.json"),
            image: format!("{name}.png"),
            kind: kind.into(),
            scale,
        });
        Ok(())
    };
    if let Some(m) = &bundle.locality {
        emit("locality", "heatmap", &|p| write_json(p, m), heatmap(&m.to_array(), HEATMAP_SCALE), Some(HEATMAP_SCALE))?;
    }
    if let Some(g) = &bundle.gradprop {
        let rows = g.norms.len();
        let cols = g.norms.first().map_or(0, Vec::len);
        let arr = Array2::from_shape_fn((rows, cols), |(i, j)| g.norms[i][j]);
        emit("gradprop", "heatmap", &|p| write_json(p, g), heatmap(&arr, HEATMAP_SCALE), Some(HEATMAP_SCALE))?;
    }
    if let Some(c) = &bundle.layout {
        emit("layout", "line", &|p| write_json(p, c), line_plot(&c.distance), None)?;
    }
    if let Some(t) = &bundle.trace {
        let losses: Vec<f64> = t.entries.iter().map(|e| e.loss).collect();
        emit("trace", "line", &|p| write_json(p, t), line_plot(&losses), None)?;
    }
    if let Some(c) = &bundle.cost {
        let ratios: Vec<f64> = c.iter().map(|r| r.ratio_vs_full).collect();
        emit("cost", "bar", &|p| write_json(p, c), bar_chart(&ratios), None)?;
    }
    if let Some(a) = &bundle.ablation {
        let l2: Vec<f64> = a.variants.iter().map(|v| v.mean_guided_l2).collect();
        emit("ablation", "bar", &|p| write_json(p, a), bar_chart(&l2), None)?;
    }
    if let Some(s) = &bundle.shortcut {
        let vals: Vec<f64> = s
            .iter()
            .flat_map(|r| [r.full.local_coherence, r.shortcut.local_coherence])
            .collect();
        emit("shortcut", "bar", &|p| write_json(p, s), bar_chart(&vals), None)?;
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument("figure bundle has no reports".into()));
    }
    let manifest = BundleManifest { entries };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Mean of the per-row maxima position; a helper for sanity checks on maps.
pub fn row_argmax(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn metrics_on_simple_videos() {
        let mut d = Array4::from_elem((3, 2, 2, 1), 0.5);
        d.index_axis_mut(Axis(0), 1).fill(1.0);
        let v = VideoTensor::new(d).unwrap();
        assert!((saturation(&v) - 1.0 / 3.0).abs() < 1e-15);
        assert!((temporal_coherence(&v, &[0, 1]) - 1.0).abs() < 1e-15);
        assert_eq!(temporal_coherence(&v, &[]), 0.0);
    }

    #[test]
    fn bundle_round_trip_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let loc = LocalityMap {
            matrix: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.0]],
        };
        let bundle = FigureBundle {
            locality: Some(loc.clone()),
            ..Default::default()
        };
        let m = emit_figure_bundle(dir.path(), &bundle).unwrap();
        assert_eq!(m.entries.len(), 1);
        let back: LocalityMap = read_json(&dir.path().join("locality.json")).unwrap();
        assert_eq!(back, loc);
        let img = image::open(dir.path().join("locality.png")).unwrap();
        assert_eq!((img.width(), img.height()), (3 * HEATMAP_SCALE, 2 * HEATMAP_SCALE));
        let man: BundleManifest = read_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(man, m);
        assert!(emit_figure_bundle(dir.path(), &FigureBundle::default()).is_err());
    }

    #[test]
    fn plots_have_declared_sizes() {
        assert_eq!(line_plot(&[3.0, 1.0, 0.0]).dimensions(), (PLOT_W, PLOT_H));
        assert_eq!(bar_chart(&[1.0, 2.0]).dimensions(), (48, PLOT_H));
        assert_eq!(row_argmax(&Array2::from_shape_vec((1, 3), vec![0.0, 2.0, 1.0]).unwrap()), vec![1]);
    }
}
