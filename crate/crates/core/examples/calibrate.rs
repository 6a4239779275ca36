//! Trains (or reloads) toy models at a given budget and measures the
//! statistics the acceptance suite pins: held-out errors, guidance efficacy,
//! the latent-optimisation ablation and the layout-formation knee.
//!
//! usage: calibrate VAE_EPOCHS DEN_EPOCHS diffusion|flow CLIPS SEEDS

use std::path::PathBuf;
use std::time::Instant;

use frameguide::analysis::{condition_distance, layout_formation_curve, run_vlo_ablation};
use frameguide::guidance::{run_frame_guidance, sample_unguided, GuidanceRun};
use frameguide::losses::FrameCondition;
use frameguide::toyvdm::checkpoint::{load_denoiser, load_vae, save_denoiser, save_vae, TrainingMeta};
use frameguide::toyvdm::train::{denoiser_validation_loss, encode_all, reconstruction_mse, train_denoiser, train_vae, TrainConfig};
use frameguide::toyvdm::{generate_dataset, DatasetSpec, ModelBundle, VaeConfig};
use frameguide::ScheduleKind;

fn meta(t: &TrainConfig) -> TrainingMeta {
    TrainingMeta {
        epochs_completed: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        init_seed: t.seed,
        data_seed: 0,
    }
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: usize| args.get(i).map_or(d, |s| s.parse().unwrap());
    let (vae_epochs, den_epochs) = (arg(1, 30), arg(2, 150));
    let kind = if args.get(3).map(String::as_str) == Some("flow") { ScheduleKind::Flow } else { ScheduleKind::Diffusion };
    let (count, seeds) = (arg(4, 512), arg(5, 4) as u64);
    let data = generate_dataset(&DatasetSpec { count, ..Default::default() })?;
    let held = generate_dataset(&DatasetSpec { count: 64, seed: 1, ..Default::default() })?;
    let root = PathBuf::from(format!("/tmp/fg/{count}-{vae_epochs}"));
    let vt = TrainConfig { epochs: vae_epochs, ..TrainConfig::vae_default() };
    let vae = if root.join("vae").exists() {
        load_vae(&root.join("vae"))?.0
    } else {
        let t0 = Instant::now();
        let (vae, rep) = train_vae(&data, VaeConfig::default(), &vt)?;
        println!("vae {:.1}s losses {:?}", t0.elapsed().as_secs_f64(), rep.epoch_losses);
        save_vae(&root.join("vae"), &vae, meta(&vt))?;
        load_vae(&root.join("vae"))?.0
    };
    println!("held-out mse {:.5}", reconstruction_mse(&vae, &held)?);
    let dt = TrainConfig { epochs: den_epochs, ..TrainConfig::denoiser_default() };
    let dpath = root.join(format!("den-{}-{den_epochs}", kind.name()));
    let den = if dpath.exists() {
        load_denoiser(&dpath)?.0
    } else {
        let lat = encode_all(&vae, &data)?;
        let t0 = Instant::now();
        let (den, rep) = train_denoiser(&lat, kind, 50, &dt)?;
        println!("denoiser {:.1}s losses {:?}", t0.elapsed().as_secs_f64(), rep.epoch_losses.iter().step_by(5).collect::<Vec<_>>());
        save_denoiser(&dpath, &den, meta(&dt))?;
        load_denoiser(&dpath)?.0
    };
    println!("denoiser val {:.5}", denoiser_validation_loss(&den, &encode_all(&vae, &held)?, 4, 9)?);
    let models = ModelBundle { vae, denoiser: den };

    let t0 = Instant::now();
    let mut ratios = Vec::new();
    let mut knees = Vec::new();
    let mut mean_curve: Vec<f64> = Vec::new();
    for seed in 0..seeds {
        let target = &held[seed as usize];
        let cond = FrameCondition::Keyframe { frames: vec![0, 16], targets: vec![target.frame(0).to_owned(), target.frame(16).to_owned()] };
        let mut run = GuidanceRun::new(&models, Some(cond.clone()), seed)?;
        run.record_snapshots = true;
        let g = run_frame_guidance(&run)?;
        let u = sample_unguided(&run)?;
        let (gl, ul) = (condition_distance(&cond, &g.video)?, condition_distance(&cond, &u.video)?);
        ratios.push(gl / ul);
        let mut off = run.clone();
        off.cfg = off.cfg.clone().disabled(50);
        let go = run_frame_guidance(&off)?;
        let curve = layout_formation_curve(&off, &go, 4)?;
        let argmax = curve.distance.iter().enumerate().fold(0, |b, (k, &d)| if d > curve.distance[b] { k } else { b });
        println!("seed {seed}: guided {gl:.3} unguided {ul:.3} knee {:?} argmax {argmax} curve {:?}", curve.knee_step,
            curve.distance.iter().step_by(5).map(|d| format!("{d:.2}")).collect::<Vec<_>>());
        knees.push(curve.knee_step);
        if mean_curve.is_empty() { mean_curve = vec![0.0; curve.distance.len()]; }
        for (m, d) in mean_curve.iter_mut().zip(&curve.distance) { *m += d / seeds as f64; }
    }
    let n = mean_curve.len();
    let (mut conc, mut pairs) = (0.0, 0.0);
    for i in 0..n { for j in i + 1..n { pairs += 1.0; if mean_curve[i] > mean_curve[j] { conc += 1.0 } else if mean_curve[i] < mean_curve[j] { conc -= 1.0 } } }
    let down = mean_curve.windows(2).filter(|w| w[1] <= w[0]).count();
    println!("mean curve {:?}", mean_curve.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>());
    println!("kendall {:.4} non-increasing steps {down}/{} knees {:?}", conc / pairs, n - 1, knees);
    println!("guidance {:.1}s mean ratio {:.3}", t0.elapsed().as_secs_f64(), ratios.iter().sum::<f64>() / ratios.len() as f64);

    let target = &held[0];
    let cond = FrameCondition::Keyframe { frames: vec![0, 16], targets: vec![target.frame(0).to_owned(), target.frame(16).to_owned()] };
    let run = GuidanceRun::new(&models, Some(cond), 0)?;
    let t0 = Instant::now();
    let rep = run_vlo_ablation(&run, &(0..seeds).collect::<Vec<_>>())?;
    println!("ablation {:.1}s unguided l2 {:.3} sat {:.4}", t0.elapsed().as_secs_f64(), rep.unguided_mean_guided_l2, rep.unguided_mean_saturation);
    for v in &rep.variants {
        println!("  {:?}: l2 {:.3} coh {:.3} sat {:.4}", v.variant, v.mean_guided_l2, v.mean_coherence, v.mean_saturation);
    }
    Ok(())
}
