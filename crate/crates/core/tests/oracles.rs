//! Closed-form checks of the samplers against a Gaussian data distribution.
//!
//! With data N(μ, s²) the posterior mean is affine in z_t, so every DDIM step
//! is affine too. Pushing the points z = 0 and z = 1 through the real sampler
//! gives the exact output moments without Monte Carlo noise.

use frameguide::schedules::{ddim_step, euler_flow_step};
use frameguide::tensor::LatentTensor;
use frameguide::NoiseSchedule;

const MU: f64 = 1.0;
const S: f64 = 0.5;

fn scalar(x: f64) -> LatentTensor {
    LatentTensor::new(ndarray::Array4::from_elem((1, 1, 1, 1), x)).unwrap()
}

/// Exact (mean, variance) after deterministic DDIM from z_T ~ N(0, 1).
fn ddim_moments(steps: usize) -> (f64, f64) {
    let sched = NoiseSchedule::cosine(steps).unwrap();
    let (mut m, mut v) = (0.0, 1.0);
    for t in (1..=steps).rev() {
        let ab = sched.alpha_bar(t).unwrap();
        let sa = ab.sqrt();
        let step = |z: f64| {
            let post = MU + sa * S * S / (ab * S * S + 1.0 - ab) * (z - sa * MU);
            ddim_step(&scalar(z), &scalar(post), t, &sched).unwrap().data()[[0, 0, 0, 0]]
        };
        let c0 = step(0.0);
        let c1 = step(1.0) - c0;
        m = c1 * m + c0;
        v *= c1 * c1;
    }
    (m, v)
}

#[test]
fn ddim_mean_is_exact_and_variance_bias_shrinks_like_one_over_t() {
    let mut prev_gap = f64::INFINITY;
    for steps in [50, 100, 200, 1000] {
        let (m, v) = ddim_moments(steps);
        assert!((m - MU).abs() < 1e-9, "T={steps}: mean {m}");
        let gap = 1.0 - v / (S * S);
        assert!(gap > 0.0 && gap < prev_gap, "T={steps}: variance ratio {}", v / (S * S));
        // The shortfall is about 3/T on this schedule.
        assert!((2.8..3.4).contains(&(gap * steps as f64)), "T={steps}: gap {gap}");
        prev_gap = gap;
    }
    let (_, v50) = ddim_moments(50);
    assert!((v50 / (S * S) - 0.93877).abs() < 1e-4);
}

#[test]
fn euler_flow_transports_exactly_along_straight_paths() {
    let sched = NoiseSchedule::uniform_flow(50).unwrap();
    for (x0, eps) in [(MU, 0.3), (-2.0, 1.7), (0.25, -0.9)] {
        let field = scalar(eps - x0);
        let mut z = scalar(eps);
        for t in (1..=50).rev() {
            z = euler_flow_step(&z, &field, t, &sched).unwrap();
        }
        assert!((z.data()[[0, 0, 0, 0]] - x0).abs() < 1e-12);
    }
}
