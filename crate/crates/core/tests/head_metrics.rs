use particle_heads::metrics::*;
use particle_heads::model::AttentionRecord;
use particle_heads::sim::{init_random_state, ParticleState, SimConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_states(n: usize, count: usize, seed: u64) -> Vec<ParticleState> {
    let cfg = SimConfig {
        particle_count: n,
        box_width: 6.0,
        box_height: 6.0,
        ..SimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| init_random_state(&cfg, &mut rng).unwrap()).collect()
}

fn dist(s: &ParticleState, i: usize, j: usize) -> f64 {
    let (a, b) = (s.position(i), s.position(j));
    (((a[0] - b[0]) as f64).powi(2) + ((a[1] - b[1]) as f64).powi(2)).sqrt()
}

fn record(states: &[ParticleState], f: impl Fn(usize, usize, usize) -> f32) -> AttentionRecord {
    let n = states[0].len();
    let mut weights = Vec::new();
    for s in 0..states.len() {
        for i in 0..n {
            for j in 0..n {
                weights.push(if i == j { 0.0 } else { f(s, i, j) });
            }
        }
    }
    AttentionRecord {
        block: 0,
        head: 0,
        samples: states.len(),
        particles: n,
        weights,
    }
}

/// Two-pass Pearson correlation, averaged over ordered pairs.
fn oracle_correlation(states: &[ParticleState], rec: &AttentionRecord) -> f64 {
    let n = rec.particles;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: Vec<f64> = states.iter().map(|s| dist(s, i, j)).collect();
            let a: Vec<f64> = (0..states.len()).map(|s| rec.alpha(s, i, j) as f64).collect();
            let md = d.iter().sum::<f64>() / d.len() as f64;
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let cov: f64 = d.iter().zip(&a).map(|(x, y)| (x - md) * (y - ma)).sum();
            let vd: f64 = d.iter().map(|x| (x - md).powi(2)).sum();
            let va: f64 = a.iter().map(|y| (y - ma).powi(2)).sum();
            if vd > 0.0 && va > 0.0 {
                total += cov / (vd.sqrt() * va.sqrt());
            }
        }
    }
    total / (n * n - n) as f64
}

#[test]
fn uniform_attention_scores_the_near_fraction() {
    let states = random_states(8, 40, 1);
    let n = 8;
    let rec = record(&states, |_, _, _| 1.0 / (n - 1) as f32);
    let mut near = 0.0;
    for s in &states {
        for i in 0..n {
            for j in 0..n {
                if i != j && dist(s, i, j) < DEFAULT_SCORE_RADIUS {
                    near += 1.0 / (n - 1) as f64;
                }
            }
        }
    }
    let expected = near / (states.len() * n) as f64;
    let got = collision_detection_score(&states, &rec, DEFAULT_SCORE_RADIUS).unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn exponential_attention_correlates_negatively() {
    let states = random_states(6, 30, 2);
    let rec = record(&states, |s, i, j| (-dist(&states[s], i, j)).exp() as f32);
    let c = attention_distance_correlation(&states, &rec).unwrap();
    assert!(c < 0.0);
    assert!((c - oracle_correlation(&states, &rec)).abs() < 1e-10);
}

#[test]
fn affine_maps_of_attention() {
    let states = random_states(5, 20, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base: Vec<f32> = (0..20 * 25).map(|_| rng.random_range(0.0..0.2)).collect();
    let at = |s: usize, i: usize, j: usize| base[(s * 5 + i) * 5 + j];
    let c = attention_distance_correlation(&states, &record(&states, at)).unwrap();
    let up = attention_distance_correlation(&states, &record(&states, |s, i, j| 2.0 * at(s, i, j) + 0.1)).unwrap();
    let flipped = attention_distance_correlation(&states, &record(&states, |s, i, j| 0.5 - 2.0 * at(s, i, j))).unwrap();
    assert!((c - up).abs() < 1e-5, "{c} {up}");
    assert!((c + flipped).abs() < 1e-5, "{c} {flipped}");
}

#[test]
fn histogram_clip_level_matches_sorted_percentile() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let series: Vec<HeadSeries> = (0..40)
        .map(|h| HeadSeries {
            id: HeadId { run: 0, block: h / 8, head: h % 8 },
            points: (0..12).map(|k| (k * 10, rng.random_range(0.0..1.0), 0.0)).collect(),
        })
        .collect();
    let hist = score_histogram(&series);
    let mut cells: Vec<u32> = hist.counts.iter().flat_map(|c| c.iter().copied()).filter(|&c| c > 0).collect();
    cells.sort();
    let idx = ((cells.len() as f64) * 0.95).ceil() as usize - 1;
    assert_eq!(hist.clip_level, cells[idx]);
    let clipped = hist.counts.iter().flatten().filter(|&&c| hist.is_clipped(c)).count();
    assert_eq!(clipped, cells.iter().filter(|&&c| c > cells[idx]).count());
}

proptest! {
    #[test]
    fn score_is_a_probability(seed in 0u64..1000) {
        let states = random_states(5, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Rows with total mass below one, as zero-augmented softmax produces.
        let w: Vec<f32> = (0..75).map(|_| rng.random_range(0.0..0.25)).collect();
        let rec = record(&states, |s, i, j| w[(s * 5 + i) * 5 + j]);
        let s = collision_detection_score(&states, &rec, DEFAULT_SCORE_RADIUS).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let c = attention_distance_correlation(&states, &rec).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn classification_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let rank = |c: HeadClass| match c { HeadClass::None => 0, HeadClass::Partial => 1, HeadClass::True => 2 };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(rank(classify_head(lo, ClassBands::default())) <= rank(classify_head(hi, ClassBands::default())));
    }
}
