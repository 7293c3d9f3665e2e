use particle_heads::powerlaw::{detect_segments, detect_window, loglog_fit, WindowRule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Checkpoints every 128 steps up to 64000.
fn steps() -> Vec<f64> {
    (1..=500).map(|k| 128.0 * k as f64).collect()
}

/// Two-pass OLS slope and intercept, written independently of the library.
fn oracle_ols(pts: &[(f64, f64)]) -> (f64, f64) {
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.abs().ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (num / den, my - num / den * mx)
}

fn double_power_law() -> Vec<(f64, f64)> {
    let brk: f64 = 14976.0;
    let a2 = 0.5f64;
    // Continuous at the break.
    let a1 = a2 * brk.powf(-0.082) / brk.powf(-0.321);
    steps()
        .into_iter()
        .map(|t| (t, if t <= brk { a1 * t.powf(-0.321) } else { a2 * t.powf(-0.082) }))
        .collect()
}

#[test]
fn double_power_law_splits_at_break() {
    let s = double_power_law();
    let last = detect_window(&s, &WindowRule::default()).unwrap();
    assert_eq!(last.start, 14976.0);
    assert!((last.exponent + 0.082).abs() < 1e-9);
    let segs = detect_segments(&s, &WindowRule::default());
    assert_eq!(segs.len(), 2);
    assert!((segs[0].exponent + 0.321).abs() < 0.05);
    assert!((segs[1].exponent + 0.082).abs() < 0.05);
    assert_eq!(segs[0].end, 14976.0);
}

#[test]
fn confidence_interval_coverage() {
    let noise = Normal::<f64>::new(0.0, 0.01).unwrap();
    let mut covered = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<(f64, f64)> = steps()
            .into_iter()
            .filter(|t| *t >= 16000.0)
            .map(|t| (t, 1.3 * t.powf(-0.3) * noise.sample(&mut rng).exp()))
            .collect();
        let f = loglog_fit(&s, 0.0, f64::INFINITY).unwrap();
        let (slope, intercept) = oracle_ols(&s);
        assert!((f.exponent - slope).abs() < 1e-10 && (f.log_a - intercept).abs() < 1e-9);
        if (f.exponent + 0.3).abs() <= f.ci_half_width {
            covered += 1;
        }
    }
    assert!(covered >= 90, "coverage {covered}/100");
}

#[test]
fn ci_magnitude_matches_table_scale() {
    // Residual scatter of a few percent in log space gives an interval of
    // order 1e-3 over a 16000-64000 window of 128-step checkpoints.
    let noise = Normal::<f64>::new(0.0, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let s: Vec<(f64, f64)> = steps()
        .into_iter()
        .filter(|t| *t >= 16000.0)
        .map(|t| (t, 0.263f64.exp() * t.powf(-0.179) * noise.sample(&mut rng).exp()))
        .collect();
    let f = loglog_fit(&s, 0.0, f64::INFINITY).unwrap();
    assert!(f.ci_half_width > 3e-4 && f.ci_half_width < 3e-2, "{}", f.ci_half_width);
}

proptest! {
    #[test]
    fn scale_changes_only_the_constant(k in 0.01f64..100.0, alpha in -1.0f64..1.0) {
        let s: Vec<(f64, f64)> = steps().into_iter().map(|t| (t, t.powf(alpha) * (1.0 + 0.1 * (t / 1000.0).sin()))).collect();
        let scaled: Vec<(f64, f64)> = s.iter().map(|&(t, c)| (t, k * c)).collect();
        let (a, b) = (loglog_fit(&s, 0.0, 1e9).unwrap(), loglog_fit(&scaled, 0.0, 1e9).unwrap());
        prop_assert!((a.exponent - b.exponent).abs() < 1e-12);
        prop_assert!((a.r_squared - b.r_squared).abs() < 1e-12);
        prop_assert!((b.log_a - a.log_a - k.ln()).abs() < 1e-9);
    }

    #[test]
    fn time_rescaling_changes_only_the_constant(k in 0.1f64..10.0) {
        let s: Vec<(f64, f64)> = steps().into_iter().map(|t| (t, t.powf(-0.4) * (1.0 + 0.1 * (t / 700.0).cos()))).collect();
        let shifted: Vec<(f64, f64)> = s.iter().map(|&(t, c)| (k * t, c)).collect();
        let (a, b) = (loglog_fit(&s, 0.0, 1e9).unwrap(), loglog_fit(&shifted, 0.0, 1e9).unwrap());
        prop_assert!((a.exponent - b.exponent).abs() < 1e-12);
        prop_assert!((a.r_squared - b.r_squared).abs() < 1e-12);
    }

    #[test]
    fn noiseless_fits_have_zero_width(alpha in -2.0f64..2.0, log_a in -3.0f64..3.0) {
        let s: Vec<(f64, f64)> = steps().into_iter().map(|t| (t, log_a.exp() * t.powf(alpha))).collect();
        let f = loglog_fit(&s, 0.0, 1e9).unwrap();
        prop_assert!((f.r_squared - 1.0).abs() < 1e-9);
        prop_assert!(f.ci_half_width < 1e-9);
    }
}
