//! The four verbs. Each one validates its whole configuration (including
//! loading every asset) before doing any real work or touching the run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use frameguide::analysis::{emit_figure_bundle, layout_formation_curve, run_vlo_ablation, FigureBundle};
use frameguide::container::{read_frame, read_video, write_frame, write_video};
use frameguide::guidance::{
    grad_propagation_map, run_frame_guidance, run_sdedit_v2v, run_shortcut_ablation, sample_unguided, GuidanceOutput,
    GuidanceRun,
};
use frameguide::losses::{make_encoder, EncoderKind, FrameCondition};
use frameguide::slicing::{decode_cost, locality_map, CostMode};
use frameguide::toyvdm::checkpoint::{load_denoiser, load_vae, save_denoiser, save_vae, TrainingMeta};
use frameguide::toyvdm::train::{
    continue_denoiser, continue_vae, denoiser_validation_loss, encode_all, reconstruction_mse, TrainConfig,
};
use frameguide::toyvdm::{CausalVae, DatasetSpec, Denoiser, ModelBundle, VaeConfig};
use frameguide::vlo::GuidanceConfig;
use frameguide::{Error, ScheduleKind, VideoTensor};
use ndarray::{Array3, Axis};
use serde::Serialize;
use serde_json::json;

use crate::config::{ConditionKind, ConditionSpec, ImageRef, RunConfig, DEFAULT_FPS};
use crate::error::{io_err, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Global flags shared by every verb.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub baseline: bool,
    pub guidance_off: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainTarget {
    Vae,
    Denoiser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Keyframe,
    Style,
    Loop,
    Encoded,
    Masked,
    Composite,
    Sdedit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Locality,
    Cost,
    Layout,
    Gradprop,
    Shortcut,
    VloAblation,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const DEFAULT_HELD_OUT: usize = 64;

fn load_config(g: &Globals, verb: &str) -> Result<RunConfig> {
    let cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_overrides(g.seed, g.out.clone(), &Path::new("runs").join(verb)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates the run directory and stores the resolved configuration in it.
fn open_run_dir(cfg: &RunConfig, extra: serde_json::Value) -> Result<PathBuf> {
    let out = cfg.out().to_path_buf();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_json(&out.join(RESOLVED_CONFIG), &json!({ "config": cfg, "resolved": extra }))?;
    Ok(out)
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

// ---------------------------------------------------------------- dataset

pub fn cmd_dataset(g: &Globals) -> Result<()> {
    let cfg = load_config(g, "dataset")?;
    let d = cfg.dataset.clone().unwrap_or_default();
    let def = DatasetSpec::default();
    let spec = DatasetSpec {
        count: d.count.unwrap_or(def.count),
        frames: d.frames.unwrap_or(def.frames),
        height: d.height.unwrap_or(def.height),
        width: d.width.unwrap_or(def.width),
        channels: d.channels.unwrap_or(def.channels),
        seed: cfg.seed(),
    };
    let held = DatasetSpec {
        count: d.held_out.unwrap_or(DEFAULT_HELD_OUT),
        seed: cfg.seed() + 1,
        ..spec
    };
    spec.validate()?;
    if held.count > 0 {
        held.validate()?;
    }
    let fps = d.fps.unwrap_or(DEFAULT_FPS);
    let out = open_run_dir(&cfg, json!({ "train": spec, "held_out": held, "fps": fps }))?;
    for (sub, s) in [("clips", spec), ("held_out", held)] {
        for (k, clip) in s.clip_specs().iter().enumerate() {
            let video = clip.render(s.frames, s.height, s.width, s.channels)?;
            let dir = out.join(sub).join(format!("clip_{k:04}"));
            let note = format!("synthetic {:?} clip {k} of dataset seed {}", clip.shape, s.seed);
            write_video(&dir, &video, fps, clip.seed, &note)?;
        }
    }
    write_json(&out.join("dataset.json"), &json!({ "train": spec, "held_out": held, "fps": fps }))?;
    log::info!("wrote {} + {} clips to {}", spec.count, held.count, out.display());
    Ok(())
}

fn read_clip_set(dir: &Path) -> Result<Vec<VideoTensor>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    entries.iter().map(|p| Ok(read_video(p)?.0)).collect()
}

/// Training and held-out clips plus the data seed recorded by `dataset`.
fn read_dataset(dir: &Path) -> Result<(Vec<VideoTensor>, Vec<VideoTensor>, u64)> {
    let train = read_clip_set(&dir.join("clips"))?;
    if train.is_empty() {
        return Err(config_err(format!("no clips under {}", dir.join("clips").display())));
    }
    let held = read_clip_set(&dir.join("held_out"))?;
    let seed = fs::read_to_string(dir.join("dataset.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["train"]["seed"].as_u64())
        .unwrap_or(0);
    Ok((train, held, seed))
}

// ------------------------------------------------------------------ train

#[derive(Debug, Serialize)]
struct TrainMetrics {
    target: &'static str,
    status: &'static str,
    start_epoch: usize,
    epochs_completed: usize,
    epoch_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    held_out: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn cmd_train(g: &Globals, target: TrainTarget) -> Result<()> {
    let cfg = load_config(g, "train")?;
    let t = cfg.train.clone().unwrap_or_default();
    let dataset = t
        .dataset
        .clone()
        .ok_or_else(|| config_err("train needs train.dataset (the output directory of `dataset`)"))?;
    let base = match target {
        TrainTarget::Vae => TrainConfig::vae_default(),
        TrainTarget::Denoiser => TrainConfig::denoiser_default(),
    };
    let tc = TrainConfig {
        epochs: t.epochs.unwrap_or(base.epochs),
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        lr: t.lr.unwrap_or(base.lr),
        seed: cfg.seed(),
    };
    if tc.batch_size == 0 || !(tc.lr > 0.0 && tc.lr.is_finite()) {
        return Err(config_err("batch_size must be positive and lr a positive number"));
    }
    let vae_for_denoiser = match target {
        TrainTarget::Vae => None,
        TrainTarget::Denoiser => {
            let m = cfg
                .models
                .as_ref()
                .ok_or_else(|| config_err("training the denoiser needs models.vae"))?;
            Some(load_vae(&m.vae)?.0)
        }
    };
    // Checkpoints to resume from are loaded up front so a bad path fails
    // before the run directory exists.
    let (resumed_vae, resumed_den) = match (target, t.resume.as_deref()) {
        (TrainTarget::Vae, Some(p)) => (Some(load_vae(p)?), None),
        (TrainTarget::Denoiser, Some(p)) => (None, Some(load_denoiser(p)?)),
        (_, None) => (None, None),
    };
    let (train, held, data_seed) = read_dataset(&dataset)?;
    let out = open_run_dir(&cfg, json!({ "target": format!("{target:?}").to_lowercase(), "train": tc }))?;
    let ckpt = out.join("checkpoint");
    let meta = |done: usize| TrainingMeta {
        epochs_completed: done,
        batch_size: tc.batch_size,
        lr: tc.lr,
        init_seed: tc.seed,
        data_seed,
    };
    let mut metrics = TrainMetrics {
        target: "",
        status: "ok",
        start_epoch: 0,
        epochs_completed: 0,
        epoch_losses: Vec::new(),
        held_out: None,
        error: None,
    };
    let result: std::result::Result<(), Error> = (|| {
        match target {
            TrainTarget::Vae => {
                metrics.target = "vae";
                let (vae, start) = match resumed_vae {
                    Some((v, m)) => (v, m.training.epochs_completed),
                    None => (CausalVae::new(VaeConfig::default(), tc.seed), 0),
                };
                metrics.start_epoch = start;
                let (vae, rep) = continue_vae(vae, &train, &tc, start)?;
                metrics.epoch_losses = rep.epoch_losses;
                metrics.epochs_completed = start + tc.epochs;
                save_vae(&ckpt, &vae, meta(start + tc.epochs))?;
                if !held.is_empty() {
                    metrics.held_out = Some(reconstruction_mse(&load_vae(&ckpt)?.0, &held)?);
                }
            }
            TrainTarget::Denoiser => {
                metrics.target = "denoiser";
                let vae = vae_for_denoiser.as_ref().expect("loaded above");
                let latents = encode_all(vae, &train)?;
                let (net, start) = match resumed_den {
                    Some((n, m)) => (n, m.training.epochs_completed),
                    None => {
                        let (l, h, w, c) = latents[0].dim();
                        if h != w {
                            return Err(Error::ShapeMismatch(format!("latent grid {h}x{w} must be square")));
                        }
                        let config = frameguide::toyvdm::DenoiserConfig {
                            latent_channels: c,
                            latents: l,
                            grid: h,
                            steps: t.steps.unwrap_or(frameguide::schedules::DEFAULT_STEPS),
                            backend: t.backend.unwrap_or(ScheduleKind::Diffusion),
                            ..Default::default()
                        };
                        (Denoiser::new(config, tc.seed), 0)
                    }
                };
                metrics.start_epoch = start;
                let (net, rep) = continue_denoiser(net, &latents, &tc, start)?;
                metrics.epoch_losses = rep.epoch_losses;
                metrics.epochs_completed = start + tc.epochs;
                save_denoiser(&ckpt, &net, meta(start + tc.epochs))?;
                if !held.is_empty() {
                    let net = load_denoiser(&ckpt)?.0;
                    metrics.held_out = Some(denoiser_validation_loss(&net, &encode_all(vae, &held)?, 4, 9)?);
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = &result {
        metrics.status = if e.is_numerical() { "diverged" } else { "failed" };
        metrics.error = Some(e.to_string());
    }
    write_json(&out.join("metrics.json"), &metrics)?;
    result.map_err(CliError::from)
}

// --------------------------------------------------------------- guidance

fn load_models(cfg: &RunConfig) -> Result<ModelBundle> {
    let m = cfg
        .models
        .as_ref()
        .ok_or_else(|| config_err("this command needs models.vae and models.denoiser"))?;
    let dpath = m
        .denoiser
        .as_ref()
        .ok_or_else(|| config_err("this command needs models.denoiser"))?;
    Ok(ModelBundle {
        vae: load_vae(&m.vae)?.0,
        denoiser: load_denoiser(dpath)?.0,
    })
}

fn load_image(r: &ImageRef, channels: usize) -> Result<Array3<f64>> {
    Ok(match r {
        ImageRef::File(p) => read_frame(p, channels)?,
        ImageRef::VideoFrame { video, frame } => {
            let (v, _) = read_video(video)?;
            if *frame >= v.frames() {
                return Err(config_err(format!("{} has {} frames, asked for {frame}", video.display(), v.frames())));
            }
            let f = v.frame(*frame);
            if f.dim().2 != channels {
                return Err(config_err(format!("{} has {} channels, models use {channels}", video.display(), f.dim().2)));
            }
            f.to_owned()
        }
    })
}

fn build_condition(spec: &ConditionSpec, channels: usize) -> Result<FrameCondition> {
    let images = || spec.images.iter().map(|r| load_image(r, channels)).collect::<Result<Vec<_>>>();
    let need_images = |n: usize| {
        if spec.images.len() != n {
            Err(config_err(format!(
                "{:?} condition needs {n} image(s), got {}",
                spec.kind,
                spec.images.len()
            )))
        } else {
            Ok(())
        }
    };
    let encoder = |default: Option<EncoderKind>| -> Result<_> {
        let kind = match (&spec.encoder, default) {
            (Some(name), _) => name.parse::<EncoderKind>()?,
            (None, Some(k)) => k,
            (None, None) => return Err(config_err("encoded condition needs an encoder name")),
        };
        Ok(make_encoder(kind, spec.encoder_seed))
    };
    if spec.mask.is_some() && spec.kind != ConditionKind::Masked {
        return Err(config_err("mask is only used by masked conditions"));
    }
    Ok(match spec.kind {
        ConditionKind::Keyframe => {
            need_images(spec.frames.len())?;
            FrameCondition::Keyframe {
                frames: spec.frames.clone(),
                targets: images()?,
            }
        }
        ConditionKind::Style => {
            need_images(1)?;
            FrameCondition::Style {
                frames: spec.frames.clone(),
                style: images()?.remove(0),
                encoder: encoder(Some(EncoderKind::StyleProxy))?,
            }
        }
        ConditionKind::Loop => {
            need_images(0)?;
            match spec.frames[..] {
                [first, last] => FrameCondition::Loop { first, last },
                _ => return Err(config_err("loop condition needs frames [first, last]")),
            }
        }
        ConditionKind::Encoded => {
            need_images(spec.frames.len())?;
            FrameCondition::encoded(spec.frames.clone(), images()?, encoder(None)?)?
        }
        ConditionKind::Masked => {
            need_images(spec.frames.len())?;
            let path = spec.mask.as_ref().ok_or_else(|| config_err("masked condition needs a mask"))?;
            FrameCondition::Masked {
                frames: spec.frames.clone(),
                targets: images()?,
                mask: read_frame(path, 1)?.index_axis_move(Axis(2), 0),
            }
        }
    })
}

/// Combines the configured conditions; a single unit-weight condition is
/// used as is.
fn build_conditions(specs: &[ConditionSpec], channels: usize) -> Result<Option<FrameCondition>> {
    let built = specs
        .iter()
        .map(|s| Ok((build_condition(s, channels)?, s.weight)))
        .collect::<Result<Vec<_>>>()?;
    Ok(match built.len() {
        0 => None,
        1 if built[0].1 == 1.0 => Some(built.into_iter().next().unwrap().0),
        _ => Some(FrameCondition::Composite(built)),
    })
}

fn check_task(task: Task, cfg: &RunConfig) -> Result<()> {
    let kinds: Vec<ConditionKind> = cfg.conditions.iter().map(|c| c.kind).collect();
    let single = |k: ConditionKind| {
        if kinds == [k] {
            Ok(())
        } else {
            Err(config_err(format!("task {task:?} needs exactly one {k:?} condition, config has {kinds:?}")))
        }
    };
    let sdedit = cfg.generate.as_ref().and_then(|g| g.sdedit.as_ref()).is_some();
    if sdedit != (task == Task::Sdedit) {
        return Err(config_err("generate.sdedit must be given for, and only for, the sdedit task"));
    }
    match task {
        Task::Keyframe => single(ConditionKind::Keyframe),
        Task::Style => single(ConditionKind::Style),
        Task::Loop => single(ConditionKind::Loop),
        Task::Encoded => single(ConditionKind::Encoded),
        Task::Masked => single(ConditionKind::Masked),
        Task::Composite if kinds.len() >= 2 => Ok(()),
        Task::Composite => Err(config_err("composite task needs at least two conditions")),
        Task::Sdedit if !kinds.is_empty() => Ok(()),
        Task::Sdedit => Err(config_err("sdedit task needs at least one condition")),
    }
}

/// Guidance settings: backend defaults, then config overrides, then the
/// `--guidance-off` flag.
fn guidance_config(cfg: &RunConfig, models: &ModelBundle, off: bool) -> GuidanceConfig {
    let steps = models.denoiser.config.steps;
    let base = GuidanceConfig::default_for(models.denoiser.backend(), steps);
    let c = cfg.guidance.as_ref().map_or(base.clone(), |o| o.apply(base));
    if off {
        c.disabled(steps)
    } else {
        c
    }
}

fn build_run<'a>(cfg: &RunConfig, models: &'a ModelBundle, g: &Globals) -> Result<GuidanceRun<'a>> {
    let cond = build_conditions(&cfg.conditions, models.vae.config.channels)?;
    let mut run = GuidanceRun::new(models, cond, cfg.seed())?;
    run.cfg = guidance_config(cfg, models, g.guidance_off);
    if let Some(s) = &cfg.sampling {
        run.window = s.window.unwrap_or(run.window);
        run.downsample = s.downsample.unwrap_or(run.downsample);
        run.mode = s.mode.unwrap_or(run.mode);
        run.frames = s.frames.unwrap_or(run.frames);
    }
    run.validate()?;
    Ok(run)
}

fn resolved_run(run: &GuidanceRun) -> serde_json::Value {
    json!({
        "guidance": run.cfg,
        "frames": run.frames,
        "window": run.window,
        "downsample": run.downsample,
        "mode": run.mode,
        "seed": run.seed,
        "backend": run.sched.kind(),
        "steps": run.sched.steps(),
        "condition": run.condition.as_ref().map(FrameCondition::name),
        "guided_frames": run.condition.as_ref().map(FrameCondition::guided_frames),
    })
}

fn write_trace(path: &Path, task: Task, run: &GuidanceRun, out: Option<&GuidanceOutput>, trace: &frameguide::guidance::Trace, err: Option<&str>) -> Result<()> {
    let final_loss = match (out, &run.condition) {
        (Some(o), Some(c)) => Some(frameguide::analysis::condition_distance(c, &o.video)?),
        _ => None,
    };
    write_json(
        path,
        &json!({
            "task": task,
            "seed": run.seed,
            "guidance": run.cfg,
            "final_condition_loss": final_loss,
            "error": err,
            "trace": trace,
        }),
    )
}

pub fn cmd_generate(g: &Globals, task: Task) -> Result<()> {
    let cfg = load_config(g, "generate")?;
    check_task(task, &cfg)?;
    let models = load_models(&cfg)?;
    let mut run = build_run(&cfg, &models, g)?;
    let gen = cfg.generate.clone().unwrap_or_default();
    run.record_snapshots = gen.previews;
    let source = match &gen.sdedit {
        Some(s) => {
            if s.t_start > run.sched.steps() {
                return Err(config_err(format!("sdedit.t_start {} exceeds {} steps", s.t_start, run.sched.steps())));
            }
            let (v, _) = read_video(&s.source)?;
            if models.vae.encode(&v)?.dim() != run.latent_shape() {
                return Err(config_err(format!("{} does not match the models' clip shape", s.source.display())));
            }
            Some((v, s.t_start))
        }
        None => None,
    };
    let fps = gen.fps.unwrap_or(DEFAULT_FPS);
    let out = open_run_dir(&cfg, json!({ "task": task, "run": resolved_run(&run), "baseline": g.baseline }))?;
    let result = match &source {
        Some((v, t)) => run_sdedit_v2v(&run, v, *t),
        None => run_frame_guidance(&run),
    };
    let output = match result {
        Ok(o) => o,
        Err(Error::Aborted { t, reason, trace }) => {
            let msg = format!("guidance aborted at step {t}: {reason}");
            write_trace(&out.join("trace.json"), task, &run, None, &trace, Some(&msg))?;
            return Err(CliError::Numerical(msg));
        }
        Err(e) => return Err(e.into()),
    };
    let note = format!("frameguide generate {task:?}, seed {}", run.seed).to_lowercase();
    write_video(&out.join("video"), &output.video, fps, run.seed, &note)?;
    write_trace(&out.join("trace.json"), task, &run, Some(&output), &output.trace, None)?;
    if gen.previews {
        let dir = out.join("previews");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mid = run.frames / 2;
        for (t, z0) in &output.snapshots {
            let v = models.vae.decode_frames(z0, run.frames)?;
            write_frame(&dir.join(format!("step_{t:03}.ppm")), v.frame(mid))?;
        }
    }
    if g.baseline {
        let mut plain = run.clone();
        plain.cfg = plain.cfg.clone().disabled(plain.sched.steps());
        plain.record_snapshots = false;
        let base = match &source {
            Some((v, t)) => run_sdedit_v2v(&plain, v, *t)?,
            None => sample_unguided(&plain)?,
        };
        let note = format!("unguided baseline, seed {}", run.seed);
        write_video(&out.join("baseline"), &base.video, fps, run.seed, &note)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- analyze

pub fn cmd_analyze(g: &Globals, which: Analysis) -> Result<()> {
    let cfg = load_config(g, "analyze")?;
    let a = cfg.analyze.clone().unwrap_or_default();
    let mut bundle = FigureBundle::default();
    let name = which.to_possible_value().expect("no skipped variants").get_name().to_string();
    let need_cond = |run: &GuidanceRun| {
        if run.condition.is_none() {
            Err(config_err(format!("analyze {name} needs at least one entry in conditions")))
        } else {
            Ok(())
        }
    };
    match which {
        Analysis::Locality => {
            let m = cfg.models.as_ref().ok_or_else(|| config_err("analyze locality needs models.vae"))?;
            let clip = a.clip.as_ref().ok_or_else(|| config_err("analyze locality needs analyze.clip"))?;
            let vae = load_vae(&m.vae)?.0;
            let (video, _) = read_video(clip)?;
            open_run_dir(&cfg, json!({ "analysis": name }))?;
            bundle.locality = Some(locality_map(&vae, &video)?);
        }
        Analysis::Cost => {
            let m = cfg.models.as_ref().ok_or_else(|| config_err("analyze cost needs models.vae"))?;
            let c = a.cost.clone().ok_or_else(|| config_err("analyze cost needs analyze.cost"))?;
            let vae = load_vae(&m.vae)?.0;
            let hw = match &m.denoiser {
                Some(d) => {
                    let g = load_denoiser(d)?.0.config.grid;
                    (g, g)
                }
                None => (8, 8),
            };
            let reports = [(CostMode::Full, 1), (CostMode::Sliced, 1), (CostMode::SlicedDownsampled, c.factor)]
                .into_iter()
                .map(|(mode, f)| decode_cost(&vae, mode, c.frames, &c.targets, c.window, f, hw))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            open_run_dir(&cfg, json!({ "analysis": name, "latent_hw": hw }))?;
            bundle.cost = Some(reports);
        }
        Analysis::Layout => {
            let models = load_models(&cfg)?;
            let mut run = build_run(&cfg, &models, g)?;
            run.record_snapshots = true;
            let pool = a.pool.unwrap_or(4);
            if pool == 0 {
                return Err(config_err("analyze.pool must be positive"));
            }
            open_run_dir(&cfg, json!({ "analysis": name, "run": resolved_run(&run), "pool": pool }))?;
            let out = run_frame_guidance(&run)?;
            bundle.layout = Some(layout_formation_curve(&run, &out, pool)?);
            bundle.trace = Some(out.trace);
        }
        Analysis::Gradprop => {
            let models = load_models(&cfg)?;
            let run = build_run(&cfg, &models, g)?;
            need_cond(&run)?;
            let t = run.sched.steps();
            let probes = a.probes.clone().unwrap_or_else(|| {
                [0, 5, 10, 20, 30].iter().filter(|&&d| d < t).map(|d| t - d).collect()
            });
            if let Some(p) = probes.iter().find(|&&p| p == 0 || p > t) {
                return Err(config_err(format!("probe step {p} outside 1..={t}")));
            }
            open_run_dir(&cfg, json!({ "analysis": name, "run": resolved_run(&run), "probes": probes }))?;
            bundle.gradprop = Some(grad_propagation_map(&run, &probes)?);
        }
        Analysis::Shortcut => {
            let models = load_models(&cfg)?;
            let run = build_run(&cfg, &models, g)?;
            need_cond(&run)?;
            let seeds = a.seeds.unwrap_or(1);
            open_run_dir(&cfg, json!({ "analysis": name, "run": resolved_run(&run), "seeds": seeds }))?;
            let reports = (0..seeds)
                .map(|k| {
                    let mut r = run.clone();
                    r.seed = run.seed + k;
                    run_shortcut_ablation(&r)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            bundle.shortcut = Some(reports);
        }
        Analysis::VloAblation => {
            let models = load_models(&cfg)?;
            let run = build_run(&cfg, &models, g)?;
            need_cond(&run)?;
            let seeds: Vec<u64> = (0..a.seeds.unwrap_or(20)).map(|k| run.seed + k).collect();
            open_run_dir(&cfg, json!({ "analysis": name, "run": resolved_run(&run), "seeds": seeds }))?;
            bundle.ablation = Some(run_vlo_ablation(&run, &seeds)?);
        }
    }
    emit_figure_bundle(cfg.out(), &bundle)?;
    Ok(())
}
