//! Timing for the two hot paths: decoding (full versus sliced) and one
//! guidance gradient (full versus shortcut). Weights are freshly
//! initialised; only shapes matter for cost.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use frameguide::guidance::{guidance_gradient, GradientMode, GuidanceRun};
use frameguide::losses::FrameCondition;
use frameguide::slicing::slice_decode;
use frameguide::tensor::LatentTensor;
use frameguide::toyvdm::{CausalVae, Denoiser, DenoiserConfig, ModelBundle, VaeConfig};
use ndarray::Array3;
use std::hint::black_box;

const LATENTS: usize = 13;

fn models() -> ModelBundle {
    let vae = CausalVae::new(VaeConfig::default(), 1);
    let denoiser = Denoiser::new(
        DenoiserConfig {
            latents: LATENTS,
            latent_channels: vae.config.latent_channels,
            ..Default::default()
        },
        2,
    );
    ModelBundle { vae, denoiser }
}

fn decoding(c: &mut Criterion) {
    let m = models();
    let grid = m.denoiser.config.grid;
    let z = LatentTensor::randn((LATENTS, grid, grid, m.vae.config.latent_channels), 3);
    let mut g = c.benchmark_group("decode");
    g.bench_function("full", |b| b.iter(|| m.vae.decode(black_box(&z)).unwrap()));
    for factor in [1, 2] {
        g.bench_with_input(BenchmarkId::new("sliced_w3", factor), &factor, |b, &f| {
            b.iter(|| slice_decode(&m.vae, black_box(&z), &[6], 3, f).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let m = models();
    let (h, w, ch) = {
        let s = m.vae.config.spatial_factor * m.denoiser.config.grid;
        (s, s, m.vae.config.channels)
    };
    let cond = FrameCondition::Keyframe {
        frames: vec![24],
        targets: vec![Array3::from_elem((h, w, ch), 0.5)],
    };
    let mut run = GuidanceRun::new(&m, Some(cond.clone()), 0).unwrap();
    let z = LatentTensor::randn(run.latent_shape(), 4);
    let mut g = c.benchmark_group("guidance_gradient");
    for (name, mode) in [("full", GradientMode::Full), ("shortcut", GradientMode::Shortcut)] {
        run.mode = mode;
        let r = run.clone();
        g.bench_function(name, |b| b.iter(|| guidance_gradient(&r, &cond, black_box(&z), 40).unwrap()));
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = decoding, gradients
}
criterion_main!(benches);
