//! Browser bindings: a live particle box, gradient flows on the pitchfork
//! potential, and the mean-field Ising curve.

use particle_heads::seeds;
use particle_heads::sim::{init_random_state, step_state, total_energy, ParticleState, SimConfig};
use particle_heads::theory::{
    beta_at, classify_convergence, gradient_flow, ising_critical_scan, ising_magnetization, log_spaced_r, Convergence,
    FlowOptions, Potential,
};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Simulation {
    cfg: SimConfig,
    state: ParticleState,
    steps: usize,
}

#[wasm_bindgen]
impl Simulation {
    /// Random non-overlapping start in a `width × height` box.
    #[wasm_bindgen(constructor)]
    pub fn new(particles: usize, width: f64, height: f64, damping: f64, seed: u32) -> Result<Simulation, JsError> {
        let cfg = SimConfig {
            particle_count: particles,
            box_width: width,
            box_height: height,
            damping_c: damping,
            ..SimConfig::default()
        };
        let state = init_random_state(&cfg, &mut seeds::substream(u64::from(seed), "web")).map_err(js_err)?;
        Ok(Self { cfg, state, steps: 0 })
    }

    /// Advance `n` steps and return the total energy afterwards.
    pub fn advance(&mut self, n: usize) -> Result<f64, JsError> {
        for _ in 0..n {
            self.state = step_state(&self.state, &self.cfg).map_err(js_err)?;
        }
        self.steps += n;
        Ok(self.energy())
    }

    pub fn energy(&self) -> f64 {
        total_energy(&self.state, &self.cfg)
    }

    /// Interleaved `x, y` centres.
    pub fn positions(&self) -> Vec<f32> {
        self.state.pos.clone()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn diameter(&self) -> f64 {
        self.cfg.diameter
    }
}

#[wasm_bindgen]
pub struct Flow {
    times: Vec<f64>,
    distance: Vec<f64>,
    label: String,
}

#[wasm_bindgen]
impl Flow {
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    /// Distance to the limit point at each sample time.
    pub fn distance(&self) -> Vec<f64> {
        self.distance.clone()
    }

    /// Convergence class and fitted rate or exponent.
    pub fn label(&self) -> String {
        self.label.clone()
    }
}

/// Gradient flow of `r x²/2 + x⁴/4` from `x0`, sampled log-uniformly on `[1, horizon]`.
#[wasm_bindgen]
pub fn pitchfork_flow(r: f64, x0: f64, horizon: f64) -> Result<Flow, JsError> {
    let opts = FlowOptions {
        x0,
        t_min: 1.0,
        horizon,
        samples: 80,
        step: 1e-2,
    };
    let f = gradient_flow(Potential::Pitchfork { r }, &opts).map_err(js_err)?;
    let c = classify_convergence(&f.times, &f.distance).map_err(js_err)?;
    let label = match c.kind {
        Convergence::Exponential { rate } => format!("exponential, rate {rate:.4}"),
        Convergence::PowerLaw { alpha, theta } => format!("power law, exponent {alpha:.4}, theta {theta:.4}"),
        Convergence::Ambiguous => "ambiguous".to_owned(),
    };
    Ok(Flow {
        times: f.times,
        distance: f.distance,
        label,
    })
}

/// Magnetisation `m(r)` for `r` in `[r_min, r_max]` with `β = 1/(1+r)` (so `r > -1`),
/// returned as interleaved `r, m` pairs.
#[wasm_bindgen]
pub fn ising_curve(r_min: f64, r_max: f64, count: usize) -> Result<Vec<f64>, JsError> {
    if r_min.partial_cmp(&r_max) != Some(std::cmp::Ordering::Less) || count < 2 {
        return Err(JsError::new("need r_min < r_max and at least two points"));
    }
    let mut out = Vec::with_capacity(2 * count);
    for k in 0..count {
        let r = r_min + (r_max - r_min) * k as f64 / (count - 1) as f64;
        let m = ising_magnetization(beta_at(r)).map_err(js_err)?.m;
        out.extend([r, m]);
    }
    Ok(out)
}

/// Slope of `ln m` against `ln |r|` over `|r|` in `[near, far]`.
#[wasm_bindgen]
pub fn ising_scan_slope(near: f64, far: f64) -> Result<f64, JsError> {
    Ok(ising_critical_scan(&log_spaced_r(near, far, 20)).map_err(js_err)?.slope)
}
