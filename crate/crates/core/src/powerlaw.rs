//! Log-log least-squares power-law fits and window detection.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::metrics::HeadId;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("window [{start}, {end}] holds {count} points; at least 3 are needed")]
    TooFewPoints { start: f64, end: f64, count: usize },
    #[error("log undefined at t = {t}, |c| = {c}")]
    NonPositive { t: f64, c: f64 },
}

/// `|c| ≈ A t^exponent` over `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    pub start: f64,
    pub end: f64,
    /// Signed OLS slope in log-log space.
    pub exponent: f64,
    pub log_a: f64,
    pub r_squared: f64,
    /// Half-width of the 95% confidence interval on the exponent.
    pub ci_half_width: f64,
    pub count: usize,
    /// Sign of `c` in the window: 1, -1, or 0 when mixed.
    pub sign: i8,
}

impl PowerLawFit {
    /// Decay rate `α = −exponent`.
    pub fn alpha(&self) -> f64 {
        -self.exponent
    }
}

/// OLS of `ln|c|` on `ln t` over the points with `start ≤ t ≤ end`.
pub fn loglog_fit(series: &[(f64, f64)], start: f64, end: f64) -> Result<PowerLawFit, FitError> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|&(t, _)| t >= start && t <= end).collect();
    if pts.len() < 3 {
        return Err(FitError::TooFewPoints {
            start,
            end,
            count: pts.len(),
        });
    }
    if let Some(&(t, c)) = pts.iter().find(|&&(t, c)| !(t > 0.0) || !(c.abs() > 0.0) || !c.is_finite()) {
        return Err(FitError::NonPositive { t, c });
    }
    let sign = if pts.iter().all(|p| p.1 > 0.0) {
        1
    } else if pts.iter().all(|p| p.1 < 0.0) {
        -1
    } else {
        0
    };
    let (u, y): (Vec<f64>, Vec<f64>) = pts.iter().map(|&(t, c)| (t.ln(), c.abs().ln())).unzip();
    let (slope, intercept, r_squared, se) = ols(&u, &y);
    let n = u.len();
    let tq = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Ok(PowerLawFit {
        start: pts[0].0,
        end: pts[n - 1].0,
        exponent: slope,
        log_a: intercept,
        r_squared,
        ci_half_width: tq * se,
        count: n,
        sign,
    })
}

/// Slope, intercept, R² and slope standard error.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    // A constant series is fitted perfectly by a flat line.
    if y.iter().all(|&v| v == y[0]) {
        return (0.0, y[0], 1.0, 0.0);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    let se = if n > 2.0 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, intercept, r2, se)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowRule {
    pub min_points: usize,
    pub min_r_squared: f64,
    /// Largest allowed `|d² ln|c| / d(ln t)²|` at any interior point.
    pub max_curvature: f64,
}

impl Default for WindowRule {
    fn default() -> Self {
        Self {
            min_points: 8,
            min_r_squared: 0.8,
            max_curvature: 2.0,
        }
    }
}

/// Discrete log-log second derivative at each interior point.
pub fn loglog_curvature(series: &[(f64, f64)]) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = series.iter().map(|&(t, c)| (t.ln(), c.abs().ln())).collect();
    pts.windows(3)
        .map(|w| {
            let s0 = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            let s1 = (w[2].1 - w[1].1) / (w[2].0 - w[1].0);
            (s1 - s0) / (0.5 * (w[2].0 - w[0].0))
        })
        .collect()
}

/// Longest window ending at the last point that passes `rule`.
pub fn detect_window(series: &[(f64, f64)], rule: &WindowRule) -> Option<PowerLawFit> {
    let n = series.len();
    if n < rule.min_points.max(3) {
        return None;
    }
    let usable = series.iter().rposition(|&(t, c)| !(t > 0.0 && c.abs() > 0.0 && c.is_finite())).map_or(0, |i| i + 1);
    let curv = loglog_curvature(&series[usable..]);
    // A window starting at `s` is smooth when every interior point is; scan
    // back from the end to find the earliest admissible start.
    let mut earliest = n - 1;
    for s in (usable..n - 1).rev() {
        if s + 1 < n - 1 && curv[s - usable].abs() > rule.max_curvature {
            break;
        }
        earliest = s;
    }
    (earliest..=n.saturating_sub(rule.min_points)).find_map(|s| {
        let fit = loglog_fit(series, series[s].0, series[n - 1].0).ok()?;
        (fit.r_squared >= rule.min_r_squared).then_some(fit)
    })
}

/// Successive windows from the end backwards, each ending where the next
/// one starts. Returned in time order.
pub fn detect_segments(series: &[(f64, f64)], rule: &WindowRule) -> Vec<PowerLawFit> {
    let mut out = Vec::new();
    let mut end = series.len();
    while let Some(fit) = detect_window(&series[..end], rule) {
        out.push(fit);
        let start = series[..end].iter().position(|p| p.0 == fit.start).expect("window start in series");
        if start == 0 {
            break;
        }
        end = start + 1;
    }
    out.reverse();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitRow {
    pub head: HeadId,
    pub fit: PowerLawFit,
}

/// Rows sorted by head, then window start. Heads without any fit are
/// listed in the sidecar.
pub fn write_fit_report(mut out: impl Write, mut sidecar: impl Write, rows: &[FitRow], unfitted: &[HeadId]) -> std::io::Result<()> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.head.cmp(&b.head).then(a.fit.start.total_cmp(&b.fit.start)));
    writeln!(out, "run,block,head,exponent,ci_half_width,log_a,r2,start,end,points,sign")?;
    for r in &rows {
        let f = &r.fit;
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            r.head.run, r.head.block, r.head.head, f.exponent, f.ci_half_width, f.log_a, f.r_squared, f.start, f.end, f.count, f.sign
        )?;
    }
    let mut none = unfitted.to_vec();
    none.sort();
    writeln!(sidecar, "run,block,head")?;
    for h in none {
        writeln!(sidecar, "{},{},{}", h.run, h.block, h.head)?;
    }
    Ok(())
}
