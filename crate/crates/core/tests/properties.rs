//! Randomised invariants over the indexing, pooling, planning and storage
//! helpers.

use frameguide::container::{read_video, write_video};
use frameguide::slicing::{avg_pool, avg_pool_vjp, merge_windows};
use frameguide::tensor::{derive_seed, randn4, LatentTensor, VideoTensor};
use frameguide::toyvdm::{frame_to_latent, latent_frames, num_latents};
use frameguide::vlo::{deterministic_update, plan_stages, GuidanceConfig, RepeatSchedule, Stage};
use frameguide::NoiseSchedule;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merged_windows_cover_exactly_the_union(
        targets in prop::collection::vec(0usize..20, 1..8),
        len in 1usize..5,
    ) {
        let merged = merge_windows(&targets, len, 20).unwrap();
        // Sorted with a gap of at least one latent between neighbours.
        for pair in merged.windows(2) {
            prop_assert!(pair[0].end < pair[1].start);
        }
        for l in 0..20 {
            let want = targets.iter().any(|&j| l <= j && l + len > j);
            let got = merged.iter().any(|r| r.contains(&l));
            prop_assert_eq!(want, got, "latent {}", l);
        }
    }

    #[test]
    fn out_of_range_targets_are_rejected(j in 20usize..40) {
        prop_assert!(merge_windows(&[0, j], 3, 20).is_err());
    }

    #[test]
    fn every_frame_belongs_to_its_latent(frames in 1usize..80, r in 1usize..6) {
        let l = num_latents(frames, r);
        prop_assert_eq!(frame_to_latent(frames - 1, r) + 1, l);
        let mut prev = 0;
        for i in 0..frames {
            let j = frame_to_latent(i, r);
            prop_assert!(j >= prev);
            prop_assert!(latent_frames(j, r).contains(&i));
            prev = j;
        }
    }

    #[test]
    fn pooling_vjp_is_the_adjoint(seed in any::<u64>(), factor in 1usize..4, hb in 1usize..4, wb in 1usize..4) {
        let shape = (2, hb * factor, wb * factor, 3);
        let x = randn4(shape, seed);
        let y = randn4((2, hb, wb, 3), derive_seed(seed, 1, 0));
        let lhs = (&avg_pool(x.view(), factor).unwrap() * &y).sum();
        let rhs = (&x * &avg_pool_vjp(y.view(), factor)).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        let mean_in = x.mean().unwrap();
        let mean_out = avg_pool(x.view(), factor).unwrap().mean().unwrap();
        prop_assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn stage_plan_partitions_the_steps(
        steps in 5usize..80,
        layout_len in 0usize..10,
        detail_len in 0usize..30,
        repeats in 1usize..12,
        span in 1usize..20,
    ) {
        let t_layout = steps.saturating_sub(layout_len);
        let t_detail = t_layout.saturating_sub(detail_len);
        let cfg = GuidanceConfig {
            t_layout,
            t_detail,
            repeats,
            repeat_schedule: RepeatSchedule::LinearDecay { span },
            ..GuidanceConfig::diffusion_default(steps)
        };
        let plan = plan_stages(&cfg, &NoiseSchedule::cosine(steps).unwrap()).unwrap();
        prop_assert_eq!(plan.count(Stage::Layout), steps - t_layout);
        prop_assert_eq!(plan.count(Stage::Detail), t_layout - t_detail);
        prop_assert_eq!(plan.entries.len(), steps);
        let mut last = usize::MAX;
        for e in &plan.entries {
            if e.stage == Stage::Free {
                prop_assert_eq!(e.repeats, 0);
            } else {
                prop_assert!(e.repeats >= 1 && e.repeats <= repeats);
                prop_assert!(e.repeats <= last);
                last = e.repeats;
            }
        }
    }

    #[test]
    fn normalised_update_moves_by_eta(seed in any::<u64>(), eta in 0.01f64..10.0) {
        let z = LatentTensor::new(randn4((3, 2, 2, 2), seed)).unwrap();
        let g = LatentTensor::new(randn4((3, 2, 2, 2), derive_seed(seed, 2, 0))).unwrap();
        let cfg = GuidanceConfig { eta, ..GuidanceConfig::diffusion_default(50) };
        let (next, _) = deterministic_update(&z, &g, &cfg).unwrap();
        let step = (next.data() - z.data()).mapv(|v| v * v).sum().sqrt();
        prop_assert!((step - eta).abs() < 1e-9 * eta.max(1.0));
    }

    #[test]
    fn derived_seeds_are_stable_and_spread(parent in any::<u64>(), a in 0u64..100, b in 0u64..100) {
        prop_assert_eq!(derive_seed(parent, a, b), derive_seed(parent, a, b));
        prop_assert_ne!(derive_seed(parent, a, b), derive_seed(parent, a, b + 1));
        prop_assert_ne!(derive_seed(parent, a, b), derive_seed(parent.wrapping_add(1), a, b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn container_round_trip_is_within_quantisation(
        seed in any::<u64>(),
        frames in 1usize..5,
        h in 1usize..9,
        w in 1usize..9,
        gray in any::<bool>(),
        fps in 1u32..60,
    ) {
        let c = if gray { 1 } else { 3 };
        let data = randn4((frames, h, w, c), seed).mapv(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0));
        let video = VideoTensor::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_video(dir.path(), &video, fps, seed, "prop").unwrap();
        let (back, m) = read_video(dir.path()).unwrap();
        prop_assert_eq!((m.frames, m.height, m.width, m.channels, m.fps, m.seed), (frames, h, w, c, fps, seed));
        let err = (back.data() - video.data()).iter().fold(0.0_f64, |a, d| a.max(d.abs()));
        prop_assert!(err <= 0.5 / 255.0 + 1e-12);
        // Writing what was read reproduces the same bytes.
        let again = tempfile::tempdir().unwrap();
        write_video(again.path(), &back, fps, seed, "prop").unwrap();
        for i in 0..frames {
            let name = frameguide::container::frame_name(i);
            prop_assert_eq!(
                std::fs::read(dir.path().join(&name)).unwrap(),
                std::fs::read(again.path().join(&name)).unwrap()
            );
        }
    }
}
