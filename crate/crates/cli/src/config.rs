//! Run configuration: a JSON file with one optional section per verb plus the
//! shared model, guidance and condition settings.
//!
//! Every struct rejects unknown keys. Relative paths are resolved against the
//! directory holding the config file, or the working directory when no file
//! is given.

use std::path::{Path, PathBuf};

use frameguide::guidance::GradientMode;
use frameguide::vlo::{GuidanceConfig, RepeatSchedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_FPS: u32 = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<ModelPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceOverrides>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze: Option<AnalyzeSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub vae: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<PathBuf>,
}

/// Partial override of the backend's default guidance settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceOverrides {
    pub eta: Option<f64>,
    pub repeats: Option<usize>,
    pub t_layout: Option<usize>,
    pub t_detail: Option<usize>,
    pub normalize_grad: Option<bool>,
    pub repeat_schedule: Option<RepeatSchedule>,
}

impl GuidanceOverrides {
    pub fn apply(&self, mut cfg: GuidanceConfig) -> GuidanceConfig {
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.t_layout {
            cfg.t_layout = v;
        }
        if let Some(v) = self.t_detail {
            cfg.t_detail = v;
        }
        if let Some(v) = self.normalize_grad {
            cfg.normalize_grad = v;
        }
        if let Some(v) = self.repeat_schedule {
            cfg.repeat_schedule = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Keyframe,
    Style,
    Loop,
    Encoded,
    Masked,
}

/// An image asset: a PPM file, or one frame of a video container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    File(PathBuf),
    VideoFrame { video: PathBuf, frame: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    /// Guided frame indices; for `loop`, exactly `[first, last]`.
    pub frames: Vec<usize>,
    /// One per guided frame (keyframe, encoded, masked) or exactly one (style).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
    /// Binary PPM mask, `masked` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// `style_proxy`, `edge_proxy` or `depth_proxy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default)]
    pub encoder_seed: u64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub window: Option<usize>,
    pub downsample: Option<usize>,
    pub mode: Option<GradientMode>,
    /// Output frame count; defaults to what the latent length decodes to.
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub count: Option<usize>,
    pub held_out: Option<usize>,
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub fps: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Output directory of the `dataset` verb.
    pub dataset: Option<PathBuf>,
    pub backend: Option<frameguide::ScheduleKind>,
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    /// Checkpoint to continue from; epochs are numbered after its count.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeditSection {
    pub source: PathBuf,
    pub t_start: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub sdedit: Option<SdeditSection>,
    /// Also write the decoded clean prediction of every step.
    #[serde(default)]
    pub previews: bool,
    pub fps: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub frames: usize,
    /// Latent indices.
    pub targets: Vec<usize>,
    pub window: usize,
    pub factor: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Video container probed by `locality`.
    pub clip: Option<PathBuf>,
    /// Number of consecutive seeds starting at the run seed.
    pub seeds: Option<u64>,
    /// Steps at which `gradprop` records gradient norms.
    pub probes: Option<Vec<usize>>,
    /// Spatial pooling factor of the layout curve.
    pub pool: Option<usize>,
    pub cost: Option<CostSection>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_image(base: &Path, r: &mut ImageRef) {
    match r {
        ImageRef::File(p) => resolve(base, p),
        ImageRef::VideoFrame { video, .. } => resolve(base, video),
    }
}

impl RunConfig {
    /// Parses `text`, rejecting unknown keys, and resolves relative paths
    /// against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Self::parse(&text, &base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(o) = &mut self.out {
            resolve(base, o);
        }
        if let Some(m) = &mut self.models {
            resolve(base, &mut m.vae);
            if let Some(d) = &mut m.denoiser {
                resolve(base, d);
            }
        }
        for c in &mut self.conditions {
            c.images.iter_mut().for_each(|r| resolve_image(base, r));
            if let Some(m) = &mut c.mask {
                resolve(base, m);
            }
        }
        if let Some(t) = &mut self.train {
            if let Some(d) = &mut t.dataset {
                resolve(base, d);
            }
            if let Some(r) = &mut t.resume {
                resolve(base, r);
            }
        }
        if let Some(s) = self.generate.as_mut().and_then(|g| g.sdedit.as_mut()) {
            resolve(base, &mut s.source);
        }
        if let Some(c) = self.analyze.as_mut().and_then(|a| a.clip.as_mut()) {
            resolve(base, c);
        }
    }

    /// Applies flag values over file values, then defaults.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>, default_out: &Path) -> Self {
        self.seed = Some(seed.or(self.seed).unwrap_or(DEFAULT_SEED));
        self.out = Some(out.or(self.out).unwrap_or_else(|| default_out.to_path_buf()));
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn out(&self) -> &Path {
        self.out.as_deref().expect("out is filled by with_overrides")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let base = Path::new("/cfg");
        assert!(RunConfig::parse(r#"{"sede": 1}"#, base).is_err());
        assert!(RunConfig::parse(r#"{"guidance": {"eta": 1, "mu": 2}}"#, base).is_err());
        assert!(RunConfig::parse(r#"{"conditions": [{"kind": "loop", "frames": [0, 4], "extra": 1}]}"#, base).is_err());
        assert!(RunConfig::parse(r#"{"conditions": [{"kind": "sketch", "frames": [0]}]}"#, base).is_err());
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let text = r#"{
            "out": "run",
            "models": {"vae": "ckpt/vae", "denoiser": "/abs/den"},
            "conditions": [{"kind": "keyframe", "frames": [0, 1],
                            "images": ["a.ppm", {"video": "clip", "frame": 3}]}]
        }"#;
        let cfg = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.out.as_deref(), Some(Path::new("/cfg/run")));
        let m = cfg.models.as_ref().unwrap();
        assert_eq!(m.vae, Path::new("/cfg/ckpt/vae"));
        assert_eq!(m.denoiser.as_deref(), Some(Path::new("/abs/den")));
        assert_eq!(cfg.conditions[0].images[0], ImageRef::File("/cfg/a.ppm".into()));
        assert_eq!(
            cfg.conditions[0].images[1],
            ImageRef::VideoFrame {
                video: "/cfg/clip".into(),
                frame: 3
            }
        );
        assert_eq!(cfg.conditions[0].weight, 1.0);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let base = Path::new("/cfg");
        let def = Path::new("/default");
        let file = RunConfig::parse(r#"{"seed": 5, "out": "o"}"#, base).unwrap();
        let r = file.clone().with_overrides(Some(9), Some("/flag".into()), def);
        assert_eq!((r.seed(), r.out()), (9, Path::new("/flag")));
        let r = file.with_overrides(None, None, def);
        assert_eq!((r.seed(), r.out()), (5, Path::new("/cfg/o")));
        let r = RunConfig::default().with_overrides(None, None, def);
        assert_eq!((r.seed(), r.out()), (DEFAULT_SEED, def));
    }

    #[test]
    fn overrides_touch_only_given_fields() {
        let base = GuidanceConfig::diffusion_default(50);
        let o = GuidanceOverrides {
            eta: Some(1.5),
            ..Default::default()
        };
        let c = o.apply(base.clone());
        assert_eq!(c.eta, 1.5);
        assert_eq!(c.repeats, base.repeats);
        assert_eq!(c.t_layout, base.t_layout);
    }
}
