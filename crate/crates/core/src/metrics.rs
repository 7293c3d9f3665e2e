//! Head-level measurements: collision detection score, attention–distance
//! correlation, classification, score histograms and attention renderings.

use std::fmt::Write as _;
use std::io::Write;

use thiserror::Error;

use crate::model::{predict, AttentionRecord, BoundaryLayout, ModelConfig, ModelError, ModelParams};
use crate::seeds;
use crate::sim::{simulate_trajectory, ParticleState, SimConfig, SimError};

/// Default score radius: just above contact distance for unit discs.
pub const DEFAULT_SCORE_RADIUS: f64 = 1.05;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("attention-distance correlation needs at least 2 states, got {0}")]
    TooFewStates(usize),
    #[error("attention record covers {record} samples of {rn} particles but {states} states of {sn} were given")]
    Mismatch {
        record: usize,
        rn: usize,
        states: usize,
        sn: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub run: u32,
    pub block: usize,
    pub head: usize,
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run{}-head{}-{}", self.run, self.block, self.head)
    }
}

/// Evaluation states: `trajectories` held-out trajectories, `per_trajectory`
/// states spaced evenly along each.
pub fn eval_states(
    cfg: &SimConfig,
    master: u64,
    trajectories: usize,
    per_trajectory: usize,
) -> Result<Vec<ParticleState>, MetricsError> {
    let mut out = Vec::with_capacity(trajectories * per_trajectory);
    for k in 0..trajectories {
        let seed = seeds::substream_seed(master, &format!("eval-sampling-{k}"));
        let traj = simulate_trajectory(cfg, seed)?;
        let last = traj.len() - 1;
        for s in 0..per_trajectory {
            let idx = if per_trajectory == 1 {
                0
            } else {
                (s * last + (per_trajectory - 1) / 2) / (per_trajectory - 1)
            };
            out.push(traj[idx].clone());
        }
    }
    Ok(out)
}

fn check(states: &[ParticleState], rec: &AttentionRecord) -> Result<(), MetricsError> {
    if states.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let sn = states[0].len();
    if rec.samples != states.len() || rec.particles != sn || states.iter().any(|s| s.len() != sn) {
        return Err(MetricsError::Mismatch {
            record: rec.samples,
            rn: rec.particles,
            states: states.len(),
            sn,
        });
    }
    Ok(())
}

fn distance(s: &ParticleState, i: usize, j: usize) -> f64 {
    let (p, q) = (s.position(i), s.position(j));
    p.iter()
        .zip(q)
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over states and query particles of the attention mass within `radius`.
pub fn collision_detection_score(
    states: &[ParticleState],
    rec: &AttentionRecord,
    radius: f64,
) -> Result<f64, MetricsError> {
    check(states, rec)?;
    let n = rec.particles;
    let mut total = 0.0;
    for (s, state) in states.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if i != j && distance(state, i, j) < radius {
                    total += f64::from(rec.alpha(s, i, j));
                }
            }
        }
    }
    Ok((total / (states.len() * n) as f64).clamp(0.0, 1.0))
}

/// Mean over ordered pairs `i ≠ j` of the Pearson correlation, across
/// states, between `d_ij` and `α_ij`. Pairs with zero variance in either
/// variable count as 0.
pub fn attention_distance_correlation(states: &[ParticleState], rec: &AttentionRecord) -> Result<f64, MetricsError> {
    check(states, rec)?;
    if states.len() < 2 {
        return Err(MetricsError::TooFewStates(states.len()));
    }
    let n = rec.particles;
    let m = states.len() as f64;
    let mut total = 0.0;
    let mut d = vec![0.0; states.len()];
    let mut a = vec![0.0; states.len()];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (s, state) in states.iter().enumerate() {
                d[s] = distance(state, i, j);
                a[s] = f64::from(rec.alpha(s, i, j));
            }
            let (md, ma) = (d.iter().sum::<f64>() / m, a.iter().sum::<f64>() / m);
            let (mut sdd, mut saa, mut sda) = (0.0, 0.0, 0.0);
            for (x, y) in d.iter().zip(&a) {
                sdd += (x - md) * (x - md);
                saa += (y - ma) * (y - ma);
                sda += (x - md) * (y - ma);
            }
            if sdd > 0.0 && saa > 0.0 {
                total += (sda / (sdd * saa).sqrt()).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(total / (n * n - n) as f64)
}

/// Score and correlation of one head at one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadMeasurement {
    pub block: usize,
    pub head: usize,
    pub score: f64,
    pub correlation: f64,
}

/// Measure every head of `params` on the evaluation states.
pub fn measure_heads(
    cfg: &ModelConfig,
    params: &ModelParams,
    states: &[ParticleState],
    radius: f64,
) -> Result<Vec<HeadMeasurement>, MetricsError> {
    if states.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let layout = BoundaryLayout::from_config(cfg);
    let x: Vec<f32> = states.iter().flat_map(ParticleState::to_input_rows).collect();
    let out = predict(cfg, &layout, params, &x, states[0].len(), true)?;
    out.attention
        .expect("capture requested")
        .iter()
        .map(|rec| {
            Ok(HeadMeasurement {
                block: rec.block,
                head: rec.head,
                score: collision_detection_score(states, rec, radius)?,
                correlation: attention_distance_correlation(states, rec)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadClass {
    True,
    Partial,
    None,
}

impl std::fmt::Display for HeadClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadClass::True => "true",
            HeadClass::Partial => "partial",
            HeadClass::None => "none",
        })
    }
}

/// Score thresholds separating true, partial and non-detecting heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassBands {
    pub true_min: f64,
    pub partial_min: f64,
}

impl Default for ClassBands {
    fn default() -> Self {
        Self {
            true_min: 0.85,
            partial_min: 0.25,
        }
    }
}

pub fn classify_head(score: f64, bands: ClassBands) -> HeadClass {
    if score >= bands.true_min {
        HeadClass::True
    } else if score >= bands.partial_min {
        HeadClass::Partial
    } else {
        HeadClass::None
    }
}

/// Per-head series over checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSeries {
    pub id: HeadId,
    /// `(step, score, correlation)`.
    pub points: Vec<(usize, f64, f64)>,
}

pub fn write_head_csv(mut out: impl Write, series: &HeadSeries) -> std::io::Result<()> {
    writeln!(out, "step,score,c")?;
    for (step, s, c) in &series.points {
        writeln!(out, "{step},{s},{c}")?;
    }
    Ok(())
}

pub const HISTOGRAM_BINS: usize = 50;

/// Counts of heads per (checkpoint, score bin).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHistogram {
    pub steps: Vec<usize>,
    /// `counts[column][bin]`.
    pub counts: Vec<[u32; HISTOGRAM_BINS]>,
    /// Count at or above which a cell is drawn at full intensity.
    pub clip_level: u32,
}

/// Bin each checkpoint's head scores into 50 bins over `[0, 1]`.
///
/// All series must share the same checkpoint steps.
pub fn score_histogram(series: &[HeadSeries]) -> ScoreHistogram {
    let steps: Vec<usize> = series.first().map(|s| s.points.iter().map(|p| p.0).collect()).unwrap_or_default();
    let mut counts = vec![[0u32; HISTOGRAM_BINS]; steps.len()];
    for s in series {
        for (col, &(_, score, _)) in s.points.iter().enumerate() {
            let bin = ((score * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            counts[col][bin] += 1;
        }
    }
    let mut nonzero: Vec<u32> = counts.iter().flatten().copied().filter(|&c| c > 0).collect();
    nonzero.sort_unstable();
    let clip_level = if nonzero.is_empty() {
        0
    } else {
        // Nearest-rank 95th percentile.
        let rank = ((0.95 * nonzero.len() as f64).ceil() as usize).max(1);
        nonzero[rank - 1]
    };
    ScoreHistogram {
        steps,
        counts,
        clip_level,
    }
}

impl ScoreHistogram {
    pub fn is_clipped(&self, count: u32) -> bool {
        count > 0 && count > self.clip_level
    }

    /// `step,bin_low,bin_high,count,clipped` for every non-empty cell.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,bin_low,bin_high,count,clipped")?;
        for (step, col) in self.steps.iter().zip(&self.counts) {
            for (b, &c) in col.iter().enumerate() {
                if c > 0 {
                    let w = 1.0 / HISTOGRAM_BINS as f64;
                    writeln!(
                        out,
                        "{step},{:.2},{:.2},{c},{}",
                        b as f64 * w,
                        (b + 1) as f64 * w,
                        u8::from(self.is_clipped(c))
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// SVG of the particles with a line per pair, opacity equal to `α_ij`.
///
/// `alpha` is `N × N` row-major. Lines with zero weight are omitted.
pub fn render_attention_svg(state: &ParticleState, alpha: &[f32], box_width: f64, box_height: f64) -> String {
    const SCALE: f64 = 20.0;
    let n = state.len();
    let (w, h) = (box_width * SCALE, box_height * SCALE);
    let px = |i: usize| {
        let p = state.position(i);
        (f64::from(p[0]) * SCALE, h - f64::from(p[1]) * SCALE)
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w:.0}" height="{h:.0}" fill="#ffffff" stroke="#000000"/>"##);
    for i in 0..n {
        for j in 0..n {
            let a = alpha[i * n + j].clamp(0.0, 1.0);
            if i == j || a <= 0.0 {
                continue;
            }
            let ((x1, y1), (x2, y2)) = (px(i), px(j));
            let _ = writeln!(
                s,
                r##"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#d62728" stroke-width="2" stroke-opacity="{a:.4}"/>"##
            );
        }
    }
    for i in 0..n {
        let (x, y) = px(i);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="none" stroke="#1f77b4"/>"##,
            0.5 * SCALE
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(samples: usize, n: usize, f: impl Fn(usize, usize, usize) -> f32) -> AttentionRecord {
        let mut weights = Vec::with_capacity(samples * n * n);
        for s in 0..samples {
            for i in 0..n {
                for j in 0..n {
                    weights.push(if i == j { 0.0 } else { f(s, i, j) });
                }
            }
        }
        AttentionRecord {
            block: 0,
            head: 0,
            samples,
            particles: n,
            weights,
        }
    }

    fn line_state(xs: &[f32]) -> ParticleState {
        ParticleState::new(2, xs.iter().flat_map(|&x| [x, 1.0]).collect(), vec![0.0; 2 * xs.len()]).unwrap()
    }

    #[test]
    fn score_extremes() {
        // 0 and 1 touch; 2 is far from both.
        let states = vec![line_state(&[0.0, 1.0, 5.0])];
        let near = rec(1, 3, |_, i, j| if (i.min(j), i.max(j)) == (0, 1) { 1.0 } else { 0.0 });
        let s = collision_detection_score(&states, &near, DEFAULT_SCORE_RADIUS).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        let far = rec(1, 3, |_, i, j| if i == 2 || j == 2 { 0.5 } else { 0.0 });
        assert_eq!(collision_detection_score(&states, &far, DEFAULT_SCORE_RADIUS).unwrap(), 0.0);
        assert!(matches!(
            collision_detection_score(&[], &far, 1.0),
            Err(MetricsError::EmptyEvalSet)
        ));
    }

    #[test]
    fn correlation_conventions() {
        let states = vec![line_state(&[0.0, 1.0, 3.0]), line_state(&[0.0, 2.0, 2.5]), line_state(&[0.5, 1.0, 4.0])];
        let flat = rec(3, 3, |_, _, _| 0.2);
        assert_eq!(attention_distance_correlation(&states, &flat).unwrap(), 0.0);
        let linear = rec(3, 3, |s, i, j| (0.1 * distance(&states[s], i, j) + 0.01) as f32);
        let c = attention_distance_correlation(&states, &linear).unwrap();
        assert!((c - 1.0).abs() < 1e-5, "{c}");
        assert!(matches!(
            attention_distance_correlation(&states[..1], &rec(1, 3, |_, _, _| 0.1)),
            Err(MetricsError::TooFewStates(1))
        ));
    }

    #[test]
    fn classification_bands() {
        let b = ClassBands::default();
        assert_eq!(classify_head(0.95, b), HeadClass::True);
        assert_eq!(classify_head(0.78, b), HeadClass::Partial);
        assert_eq!(classify_head(0.02, b), HeadClass::None);
    }

    #[test]
    fn histogram_conserves_heads() {
        let series: Vec<HeadSeries> = (0..5)
            .map(|h| HeadSeries {
                id: HeadId { run: 0, block: 0, head: h },
                points: vec![(0, 0.1 * h as f64, 0.0), (10, 0.5, 0.0)],
            })
            .collect();
        let hist = score_histogram(&series);
        for col in &hist.counts {
            assert_eq!(col.iter().sum::<u32>(), 5);
        }
        let single = score_histogram(&series[..1]);
        assert_eq!(single.counts[1].iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(single.counts[1][25], 1);
    }

    #[test]
    fn svg_lines_follow_attention() {
        let s = line_state(&[1.0, 3.0]);
        let svg = render_attention_svg(&s, &[0.0, 1.0, 0.0, 0.0], 7.0, 14.0);
        assert_eq!(svg.matches("<line").count(), 1);
        assert!(svg.contains(r#"stroke-opacity="1.0000""#));
        assert_eq!(render_attention_svg(&s, &[0.0; 4], 7.0, 14.0).matches("<line").count(), 0);
        assert_eq!(svg, render_attention_svg(&s, &[0.0, 1.0, 0.0, 0.0], 7.0, 14.0));
    }
}
