//! Gradient-flow convergence rates on one-dimensional potentials, Hölder
//! observables, and the mean-field Ising critical exponent.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("flow grew at t = {t}; retry with step {suggested_step}")]
    Unstable { t: f64, suggested_step: f64 },
    #[error("invalid flow options: {0}")]
    Options(String),
    #[error("classification needs at least 16 samples spanning 2 decades of t (got {samples} over {decades:.2})")]
    TooFewSamples { samples: usize, decades: f64 },
    #[error("r = {0} is outside the ordered phase; scan values must lie in (-1, 0)")]
    NotOrdered(f64),
    #[error("inverse temperature must be positive, got {0}")]
    Beta(f64),
}

/// `f(x) = r x²/2 + q x⁴/4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Potential {
    /// `r x²/2` with `r > 0`.
    Quadratic { r: f64 },
    /// `r x²/2 + x⁴/4`.
    Pitchfork { r: f64 },
    /// `x⁴/4`.
    Quartic,
}

impl Potential {
    fn coefficients(self) -> (f64, f64) {
        match self {
            Potential::Quadratic { r } => (r, 0.0),
            Potential::Pitchfork { r } => (r, 1.0),
            Potential::Quartic => (0.0, 1.0),
        }
    }

    pub fn value(self, x: f64) -> f64 {
        let (r, q) = self.coefficients();
        0.5 * r * x * x + 0.25 * q * x.powi(4)
    }

    pub fn gradient(self, x: f64) -> f64 {
        let (r, q) = self.coefficients();
        r * x + q * x.powi(3)
    }

    /// The minimiser the flow from `x0` converges to.
    pub fn limit(self, x0: f64) -> f64 {
        match self {
            Potential::Pitchfork { r } if r < 0.0 && x0 != 0.0 => (-r).sqrt().copysign(x0),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    pub x0: f64,
    /// First and last sample times; samples are log-spaced between them.
    pub t_min: f64,
    pub horizon: f64,
    pub samples: usize,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub potential: Potential,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    /// Distance to the limit point.
    pub distance: Vec<f64>,
    pub energy: Vec<f64>,
}

fn rk4(p: Potential, x: f64, h: f64) -> f64 {
    let f = |x: f64| -p.gradient(x);
    let k1 = f(x);
    let k2 = f(x + 0.5 * h * k1);
    let k3 = f(x + 0.5 * h * k2);
    let k4 = f(x + h * k3);
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrate `x' = −f'(x)` with fixed-step RK4, recording log-spaced samples.
///
/// Steps are shortened to land exactly on sample times. Any increase of `f`
/// along the way is reported as instability.
pub fn gradient_flow(potential: Potential, opts: &FlowOptions) -> Result<FlowResult, TheoryError> {
    if !(opts.step > 0.0 && opts.t_min > 0.0 && opts.horizon > opts.t_min && opts.samples >= 2) {
        return Err(TheoryError::Options(format!("{opts:?}")));
    }
    let ratio = (opts.horizon / opts.t_min).ln() / (opts.samples - 1) as f64;
    let times: Vec<f64> = (0..opts.samples).map(|k| opts.t_min * (ratio * k as f64).exp()).collect();
    let limit = potential.limit(opts.x0);
    let (mut t, mut x) = (0.0f64, opts.x0);
    let mut energy = potential.value(x);
    let mut out = FlowResult {
        potential,
        times: times.clone(),
        x: Vec::with_capacity(times.len()),
        distance: Vec::with_capacity(times.len()),
        energy: Vec::with_capacity(times.len()),
    };
    for &target in &times {
        while t < target {
            let h = opts.step.min(target - t);
            let next = rk4(potential, x, h);
            let e = potential.value(next);
            if !next.is_finite() || e > energy + 1e-15 * energy.abs().max(1e-300) {
                return Err(TheoryError::Unstable {
                    t,
                    suggested_step: opts.step / 2.0,
                });
            }
            x = next;
            energy = e;
            // Guard against `t + h` rounding short of `target`.
            t = if h == target - t { target } else { t + h };
        }
        out.x.push(x);
        out.distance.push((x - limit).abs());
        out.energy.push(energy);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Convergence {
    Exponential { rate: f64 },
    /// `d ~ t^{−alpha}`, with the Łojasiewicz exponent implied by `alpha`.
    PowerLaw { alpha: f64, theta: f64 },
    Ambiguous,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub kind: Convergence,
    pub r2_exponential: f64,
    pub r2_power: f64,
    /// Slope of `ln d` against `t`.
    pub exp_slope: f64,
    /// Slope of `ln d` against `ln t`.
    pub power_slope: f64,
}

/// `θ = (1 + α) / (1 + 2α)`, the inverse of `α = (1 − θ) / (2θ − 1)`.
pub fn theta_from_alpha(alpha: f64) -> f64 {
    (1.0 + alpha) / (1.0 + 2.0 * alpha)
}

/// Slope and R² of an OLS line.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
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
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    (slope, r2)
}

/// Fit `ln d` against `t` and against `ln t`; the better fit wins unless
/// the two R² values are within 0.01.
pub fn classify_convergence(times: &[f64], distance: &[f64]) -> Result<Classification, TheoryError> {
    let pts: Vec<(f64, f64)> = times.iter().zip(distance).filter(|(t, d)| **t > 0.0 && **d > 0.0).map(|(t, d)| (*t, *d)).collect();
    let decades = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) => (b.0 / a.0).log10(),
        _ => 0.0,
    };
    if pts.len() < 16 || decades < 2.0 {
        return Err(TheoryError::TooFewSamples {
            samples: pts.len(),
            decades,
        });
    }
    let t: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let lt: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ld: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (exp_slope, r2_exponential) = line_fit(&t, &ld);
    let (power_slope, r2_power) = line_fit(&lt, &ld);
    let kind = if (r2_exponential - r2_power).abs() < 0.01 {
        Convergence::Ambiguous
    } else if r2_exponential > r2_power {
        Convergence::Exponential { rate: -exp_slope }
    } else {
        let alpha = -power_slope;
        Convergence::PowerLaw {
            alpha,
            theta: theta_from_alpha(alpha),
        }
    };
    Ok(Classification {
        kind,
        r2_exponential,
        r2_power,
        exp_slope,
        power_slope,
    })
}

/// Test observable with a known Hölder exponent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observable {
    /// `|x − x*|^β`.
    Power(f64),
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderCheck {
    /// Fitted decay exponent of `|Q(x(t)) − Q*|`; infinite when identically 0.
    pub exponent: f64,
    /// `αβ` from the flow's own power-law fit.
    pub bound: f64,
    pub passed: bool,
}

/// Check that `|Q(x(t)) − Q*|` decays at least as fast as `t^{−αβ}`, within 0.05.
pub fn holder_observable_check(flow: &FlowResult, q: Observable) -> Result<HolderCheck, TheoryError> {
    let class = classify_convergence(&flow.times, &flow.distance)?;
    let alpha = -class.power_slope;
    match q {
        Observable::Constant(_) => Ok(HolderCheck {
            exponent: f64::INFINITY,
            bound: 0.0,
            passed: true,
        }),
        Observable::Power(beta) => {
            let diff: Vec<f64> = flow.distance.iter().map(|d| d.powf(beta)).collect();
            let lt: Vec<f64> = flow.times.iter().map(|t| t.ln()).collect();
            let ld: Vec<f64> = diff.iter().map(|d| d.ln()).collect();
            let (slope, _) = line_fit(&lt, &ld);
            let bound = alpha * beta;
            Ok(HolderCheck {
                exponent: -slope,
                bound,
                passed: -slope >= bound - 0.05,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsingSolve {
    pub beta: f64,
    /// Non-negative branch of `m = tanh(βm)`.
    pub m: f64,
    pub residual: f64,
}

/// Positive root of `tanh(βm) = m` by bisection, or 0 when it is the only root.
pub fn ising_magnetization(beta: f64) -> Result<IsingSolve, TheoryError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(TheoryError::Beta(beta));
    }
    let g = |m: f64| (beta * m).tanh() - m;
    if beta <= 1.0 {
        return Ok(IsingSolve {
            beta,
            m: 0.0,
            residual: 0.0,
        });
    }
    // g > 0 on (0, m*) and g < 0 on (m*, 1].
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = if g(lo).abs() <= g(hi).abs() { lo } else { hi };
    Ok(IsingSolve {
        beta,
        m,
        residual: g(m).abs(),
    })
}

/// Inverse temperature at reduced temperature `r = T − T_c` with `T_c = 1`.
pub fn beta_at(r: f64) -> f64 {
    1.0 / (1.0 + r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticalScan {
    pub points: Vec<(f64, IsingSolve)>,
    /// Slope of `ln m*` against `ln |r|`.
    pub slope: f64,
    pub r_squared: f64,
}

pub fn ising_critical_scan(rs: &[f64]) -> Result<CriticalScan, TheoryError> {
    if let Some(&bad) = rs.iter().find(|&&r| !(r < 0.0 && r > -1.0)) {
        return Err(TheoryError::NotOrdered(bad));
    }
    let points = rs
        .iter()
        .map(|&r| Ok((r, ising_magnetization(beta_at(r))?)))
        .collect::<Result<Vec<_>, TheoryError>>()?;
    let lr: Vec<f64> = points.iter().map(|(r, _)| r.abs().ln()).collect();
    let lm: Vec<f64> = points.iter().map(|(_, s)| s.m.ln()).collect();
    let (slope, r_squared) = line_fit(&lr, &lm);
    Ok(CriticalScan {
        points,
        slope,
        r_squared,
    })
}

/// Log-spaced negative reduced temperatures from `-far` to `-near`.
pub fn log_spaced_r(near: f64, far: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| -(near.ln() + (far.ln() - near.ln()) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

pub fn write_flow_csv(mut out: impl Write, flow: &FlowResult) -> std::io::Result<()> {
    writeln!(out, "t,abs_x,distance,f")?;
    for k in 0..flow.times.len() {
        writeln!(out, "{},{},{},{}", flow.times[k], flow.x[k].abs(), flow.distance[k], flow.energy[k])?;
    }
    Ok(())
}

pub fn write_scan_csv(mut out: impl Write, scan: &CriticalScan) -> std::io::Result<()> {
    writeln!(out, "r,beta,m")?;
    for (r, s) in &scan.points {
        writeln!(out, "{r},{},{}", s.beta, s.m)?;
    }
    Ok(())
}
