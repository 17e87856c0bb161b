use anchorsync::denoiser::{AnalyticDenoiser, Condition, GaussianMixture};
use anchorsync::schedule::{ddim_step, invert, predict_x0, sample, sample_step, NoiseSchedule};
use anchorsync::LatentGrid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(values: &[f64]) -> LatentGrid {
    LatentGrid::from_vec(1, 1, values.len(), values.to_vec()).unwrap()
}

#[test]
fn alpha_bars_match_scalar_recursion() {
    for (n, b0, b1) in [
        (50, 1e-4, 0.02),
        (7, 1e-3, 0.3),
        (200, 1e-4, 0.02),
        (2, 0.01, 0.02),
    ] {
        let s = NoiseSchedule::linear(n, b0, b1).unwrap();
        let mut prod = 1.0;
        for t in 0..n {
            let beta = b0 + (b1 - b0) * t as f64 / (n - 1) as f64;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-14, "n={n} t={t}");
            assert!((s.betas()[t] - beta).abs() <= 1e-15);
        }
        assert_eq!(s.alpha_bar(0), 1.0 - b0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }
}

#[test]
fn sample_step_matches_separate_steps_bit_for_bit() {
    let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in 0..20 {
        let x = LatentGrid::from_fn(2, 3, 4, |_, _, _| rand::Rng::gen_range(&mut rng, -3.0..3.0));
        let e = LatentGrid::from_fn(2, 3, 4, |_, _, _| rand::Rng::gen_range(&mut rng, -3.0..3.0));
        let want = if t == 0 {
            predict_x0(&x, &e, 0, &s)
        } else {
            ddim_step(&x, &e, t, &s)
        }
        .unwrap();
        assert_eq!(sample_step(&x, e, t, &s).unwrap(), want);
    }
    assert!(sample_step(&grid(&[0.0]), grid(&[0.0]), 20, &s).is_err());
    assert!(sample_step(&grid(&[0.0]), grid(&[0.0, 1.0]), 3, &s).is_err());
}

#[test]
fn in_distribution_roundtrip_at_200_steps() {
    let means = vec![grid(&[0.4, -0.2, 0.1]), grid(&[-0.3, 0.5, -0.1])];
    let den = AnalyticDenoiser::new(GaussianMixture::uniform(means, 1.0).unwrap(), 3);
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cond = Condition::null();
    for _ in 0..10 {
        let x0 = den.mixture().sample(&mut rng);
        let eps = |x: &LatentGrid, t: usize| den.analytic_eps(x, t, &s, &cond);
        let xt = invert(&x0, &s, 6, eps).unwrap();
        let back = sample(&xt, &s, eps).unwrap();
        assert!(back.max_abs_diff(&x0) <= 1e-4, "{}", back.max_abs_diff(&x0));
    }
}

proptest! {
    #[test]
    fn ddim_step_is_jointly_linear(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        x2 in prop::collection::vec(-5.0f64..5.0, 6),
        e in prop::collection::vec(-5.0f64..5.0, 6),
        e2 in prop::collection::vec(-5.0f64..5.0, 6),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        t in 1usize..50,
    ) {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let (x, x2, e, e2) = (grid(&x), grid(&x2), grid(&e), grid(&e2));
        let lhs = ddim_step(&x.scale(a).add(&x2.scale(b)), &e.scale(a).add(&e2.scale(b)), t, &s).unwrap();
        let rhs = ddim_step(&x, &e, t, &s).unwrap().scale(a).add(&ddim_step(&x2, &e2, t, &s).unwrap().scale(b));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn steps_are_deterministic(v in prop::collection::vec(-10.0f64..10.0, 4), t in 1usize..50) {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let x = grid(&v);
        let e = x.scale(0.3);
        prop_assert_eq!(ddim_step(&x, &e, t, &s).unwrap(), ddim_step(&x, &e, t, &s).unwrap());
    }
}
