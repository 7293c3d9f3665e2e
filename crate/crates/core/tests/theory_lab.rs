use particle_heads::theory::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quartic_flow(x0: f64, step: f64) -> FlowResult {
    gradient_flow(
        Potential::Quartic,
        &FlowOptions {
            x0,
            t_min: 10.0,
            horizon: 1e4,
            samples: 64,
            step,
        },
    )
    .unwrap()
}

#[test]
fn quartic_matches_closed_form() {
    let f = gradient_flow(
        Potential::Quartic,
        &FlowOptions {
            x0: 1.0,
            t_min: 1e-3,
            horizon: 1e4,
            samples: 200,
            step: 1e-3,
        },
    )
    .unwrap();
    for (t, x) in f.times.iter().zip(&f.x) {
        let exact = (1.0 + 2.0 * t).powf(-0.5);
        assert!((x / exact - 1.0).abs() < 1e-6, "t={t}: {x} vs {exact}");
    }
    assert!(f.energy.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn quartic_is_power_law_with_theta_three_quarters() {
    let f = quartic_flow(1.0, 1e-3);
    let c = classify_convergence(&f.times, &f.distance).unwrap();
    match c.kind {
        Convergence::PowerLaw { alpha, theta } => {
            assert!((alpha - 0.5).abs() < 0.02, "{alpha}");
            assert!((theta - 0.75).abs() < 0.02, "{theta}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn quadratic_is_exponential_with_unit_rate() {
    let f = gradient_flow(
        Potential::Quadratic { r: 1.0 },
        &FlowOptions {
            x0: 1.0,
            t_min: 0.1,
            horizon: 30.0,
            samples: 64,
            step: 1e-3,
        },
    )
    .unwrap();
    match classify_convergence(&f.times, &f.distance).unwrap().kind {
        Convergence::Exponential { rate } => assert!((rate - 1.0).abs() < 0.02, "{rate}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn pitchfork_tail_is_exponential() {
    let f = gradient_flow(
        Potential::Pitchfork { r: -0.01 },
        &FlowOptions {
            x0: 0.12,
            t_min: 5.0,
            horizon: 1000.0,
            samples: 64,
            step: 1e-2,
        },
    )
    .unwrap();
    match classify_convergence(&f.times, &f.distance).unwrap().kind {
        // Linearisation at the minimum gives rate 2|r|.
        Convergence::Exponential { rate } => assert!((rate - 0.02).abs() < 0.002, "{rate}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn classification_over_random_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let x0: f64 = rng.random_range(0.05..=1.0);
        let q = quartic_flow(x0, 1e-2);
        assert!(matches!(classify_convergence(&q.times, &q.distance).unwrap().kind, Convergence::PowerLaw { .. }), "quartic x0={x0}");
        let e = gradient_flow(
            Potential::Quadratic { r: 1.0 },
            &FlowOptions {
                x0,
                t_min: 0.1,
                horizon: 30.0,
                samples: 32,
                step: 1e-2,
            },
        )
        .unwrap();
        assert!(matches!(classify_convergence(&e.times, &e.distance).unwrap().kind, Convergence::Exponential { .. }), "quadratic x0={x0}");
    }
}

#[test]
fn holder_observables_decay_at_composite_rate() {
    let f = quartic_flow(1.0, 1e-3);
    for (beta, expected) in [(1.0, 0.5), (0.5, 0.25)] {
        let h = holder_observable_check(&f, Observable::Power(beta)).unwrap();
        assert!(h.passed, "{h:?}");
        assert!((h.exponent - expected).abs() < 0.05, "{h:?}");
        assert!((h.exponent - h.bound).abs() < 0.05, "{h:?}");
    }
}

#[test]
fn ising_scan_near_and_far() {
    let near = ising_critical_scan(&log_spaced_r(0.001, 0.05, 20)).unwrap();
    assert!((near.slope - 0.5).abs() < 0.05, "{}", near.slope);
    for (_, s) in &near.points {
        assert!(s.residual < 1e-12 && (0.0..=1.0).contains(&s.m));
    }
    let far = ising_critical_scan(&log_spaced_r(0.5, 0.9, 20)).unwrap();
    assert!((far.slope - 0.5).abs() > 0.05, "{}", far.slope);
}

#[test]
fn magnetization_residual_is_tiny_everywhere() {
    for k in 1..=400 {
        let beta = 0.01 * k as f64;
        let s = ising_magnetization(beta).unwrap();
        assert!(s.residual < 1e-12, "beta {beta}: {}", s.residual);
    }
}
