//! Ground-truth discrete-element simulator.
//!
//! Monodisperse discs in a rectangular box under gravity. Contacts between
//! discs and with the four walls are linear springs with a linear dashpot on
//! the normal approach speed (no tangential friction). Integration is
//! semi-implicit Euler, the same scheme the model uses for its own update.
//!
//! States are stored in `f32` (the precision of the training data); forces
//! and the update are evaluated in `f64` and rounded once per step, so
//! re-stepping a stored state reproduces the stored successor bit for bit.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("particles {i} and {j} have coincident centres; contact normal undefined")]
    CoincidentCentres { i: usize, j: usize },
    #[error("could not place particle {placed} of {wanted} without overlap after {attempts} attempts; box too full")]
    Placement {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("state shape mismatch: expected {expected} particles in {dim}D")]
    Shape { expected: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub spatial_dim: usize,
    pub particle_count: usize,
    pub diameter: f64,
    pub mass: f64,
    pub dt: f64,
    pub spring_k: f64,
    pub damping_c: f64,
    /// Magnitude of gravity, acting along −y.
    pub gravity: f64,
    pub box_height: f64,
    pub box_width: f64,
    pub steps_per_trajectory: usize,
    /// Wall contacts on/off (off only for isolated-collision checks).
    pub walls: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            spatial_dim: 2,
            particle_count: 64,
            diameter: 1.0,
            mass: 1.0,
            dt: 0.005,
            spring_k: 1000.0,
            damping_c: 10.0,
            gravity: 9.8,
            box_height: 14.0,
            box_width: 28.0,
            steps_per_trajectory: 1024,
            walls: true,
        }
    }
}

impl SimConfig {
    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_owned()));
        if self.spatial_dim != 2 {
            return bad("only 2D boxes are supported");
        }
        if self.particle_count == 0 {
            return bad("particle_count must be positive");
        }
        for (name, v) in [
            ("diameter", self.diameter),
            ("mass", self.mass),
            ("dt", self.dt),
            ("spring_k", self.spring_k),
            ("box_height", self.box_height),
            ("box_width", self.box_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive and finite"));
            }
        }
        for (name, v) in [("damping_c", self.damping_c), ("gravity", self.gravity)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be non-negative and finite"));
            }
        }
        if self.box_width <= self.diameter || self.box_height <= self.diameter {
            return bad("box must be wider and taller than one particle");
        }
        Ok(())
    }

    /// Spacing of the grid positions are kept on: the `f32` resolution at the
    /// scale of the box, so every stored coordinate and its mirror image about
    /// the box midline are exactly representable.
    pub fn position_quantum(&self) -> f64 {
        let extent = self.box_width.max(self.box_height) + self.diameter;
        2f64.powi(extent.log2().ceil() as i32 - 24)
    }

    fn snap(&self, x: f64) -> f32 {
        let q = self.position_quantum();
        ((x / q).round_ties_even() * q) as f32
    }

    /// Gravity as a vector (pointing along −y).
    pub fn gravity_vector(&self) -> [f64; 2] {
        [0.0, -self.gravity]
    }
}

/// Positions and velocities of `n` particles, row-major `n × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub dim: usize,
    pub pos: Vec<f32>,
    pub vel: Vec<f32>,
}

impl ParticleState {
    pub fn new(dim: usize, pos: Vec<f32>, vel: Vec<f32>) -> Result<Self, SimError> {
        if dim == 0 || pos.len() != vel.len() || !pos.len().is_multiple_of(dim) {
            return Err(SimError::Shape {
                expected: pos.len() / dim.max(1),
                dim,
            });
        }
        Ok(Self { dim, pos, vel })
    }

    pub fn len(&self) -> usize {
        self.pos.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f32] {
        &self.pos[i * self.dim..(i + 1) * self.dim]
    }

    pub fn velocity(&self, i: usize) -> &[f32] {
        &self.vel[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(&self.vel).all(|v| v.is_finite())
    }

    /// The `n × 2D` model input `[p v]`, row-major.
    pub fn to_input_rows(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.pos.len());
        for i in 0..self.len() {
            out.extend_from_slice(self.position(i));
            out.extend_from_slice(self.velocity(i));
        }
        out
    }

    pub fn from_input_rows(dim: usize, rows: &[f32]) -> Result<Self, SimError> {
        if dim == 0 || !rows.len().is_multiple_of(2 * dim) {
            return Err(SimError::Shape {
                expected: rows.len() / (2 * dim.max(1)),
                dim,
            });
        }
        let n = rows.len() / (2 * dim);
        let mut pos = Vec::with_capacity(n * dim);
        let mut vel = Vec::with_capacity(n * dim);
        for row in rows.chunks(2 * dim) {
            pos.extend_from_slice(&row[..dim]);
            vel.extend_from_slice(&row[dim..]);
        }
        Ok(Self { dim, pos, vel })
    }

    /// Reflect about the vertical line `x = width / 2`.
    pub fn mirrored(&self, width: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            let k = i * self.dim;
            out.pos[k] = (width - f64::from(self.pos[k])) as f32;
            out.vel[k] = -self.vel[k];
        }
        out
    }

    /// Apply a permutation: particle `perm[i]` of `self` becomes particle `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim;
        let mut pos = Vec::with_capacity(self.pos.len());
        let mut vel = Vec::with_capacity(self.vel.len());
        for &src in perm {
            pos.extend_from_slice(&self.pos[src * d..(src + 1) * d]);
            vel.extend_from_slice(&self.vel[src * d..(src + 1) * d]);
        }
        Self { dim: d, pos, vel }
    }

    pub fn mean_speed(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        (0..n)
            .map(|i| self.velocity(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    }
}

// Forces are accumulated on a 2^-30 grid: every per-pair contribution and every
// partial sum is then exactly representable, so action and reaction cancel
// exactly in any summation order.
const FORCE_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;

fn quantize(f: f64) -> f64 {
    (f / FORCE_QUANTUM).round() * FORCE_QUANTUM
}

fn check_shape(state: &ParticleState, cfg: &SimConfig) -> Result<(), SimError> {
    if state.dim != cfg.spatial_dim || state.len() != cfg.particle_count {
        return Err(SimError::Shape {
            expected: cfg.particle_count,
            dim: cfg.spatial_dim,
        });
    }
    Ok(())
}

/// One particle–particle contact: the force on `i` is `force`, on `j` it is `-force`.
#[derive(Clone, Debug, PartialEq)]
pub struct Contact {
    pub i: usize,
    pub j: usize,
    pub overlap: f64,
    pub force: [f64; 2],
}

/// All overlapping pairs (i < j) with their contact forces.
pub fn contacts(state: &ParticleState, cfg: &SimConfig) -> Result<Vec<Contact>, SimError> {
    let n = state.len();
    let mut out = Vec::new();
    for i in 0..n {
        let pi = state.position(i);
        let vi = state.velocity(i);
        for j in i + 1..n {
            let pj = state.position(j);
            let dx = f64::from(pi[0]) - f64::from(pj[0]);
            let dy = f64::from(pi[1]) - f64::from(pj[1]);
            let dist2 = dx * dx + dy * dy;
            if dist2 >= cfg.diameter * cfg.diameter {
                continue;
            }
            let dist = dist2.sqrt();
            if dist == 0.0 {
                return Err(SimError::CoincidentCentres { i, j });
            }
            let overlap = cfg.diameter - dist;
            let normal = [dx / dist, dy / dist];
            let vj = state.velocity(j);
            // Approach speed: relative velocity of i along the direction towards j.
            let approach = -((f64::from(vi[0]) - f64::from(vj[0])) * normal[0]
                + (f64::from(vi[1]) - f64::from(vj[1])) * normal[1]);
            let magnitude = cfg.spring_k * overlap + cfg.damping_c * approach;
            out.push(Contact {
                i,
                j,
                overlap,
                force: [quantize(magnitude * normal[0]), quantize(magnitude * normal[1])],
            });
        }
    }
    Ok(out)
}

/// Net particle–particle contact force on each particle, row-major `n × 2`.
pub fn pairwise_contact_force(state: &ParticleState, cfg: &SimConfig) -> Result<Vec<f64>, SimError> {
    check_shape(state, cfg)?;
    let mut f = vec![0.0; state.pos.len()];
    for c in contacts(state, cfg)? {
        for d in 0..2 {
            f[2 * c.i + d] += c.force[d];
            f[2 * c.j + d] -= c.force[d];
        }
    }
    Ok(f)
}

/// Overlap of particle `i` with each wall as `(overlap, inward normal)`.
fn wall_overlaps(p: &[f32], cfg: &SimConfig) -> [(f64, [f64; 2]); 4] {
    let r = cfg.radius();
    let (x, y) = (f64::from(p[0]), f64::from(p[1]));
    [
        (r - y, [0.0, 1.0]),
        (r - (cfg.box_height - y), [0.0, -1.0]),
        (r - x, [1.0, 0.0]),
        (r - (cfg.box_width - x), [-1.0, 0.0]),
    ]
}

/// Wall contact force on each particle, row-major `n × 2`.
pub fn wall_force(state: &ParticleState, cfg: &SimConfig) -> Vec<f64> {
    let mut f = vec![0.0; state.pos.len()];
    if !cfg.walls {
        return f;
    }
    for i in 0..state.len() {
        let v = state.velocity(i);
        for (overlap, normal) in wall_overlaps(state.position(i), cfg) {
            if overlap <= 0.0 {
                continue;
            }
            let approach = -(f64::from(v[0]) * normal[0] + f64::from(v[1]) * normal[1]);
            let magnitude = cfg.spring_k * overlap + cfg.damping_c * approach;
            f[2 * i] += quantize(magnitude * normal[0]);
            f[2 * i + 1] += quantize(magnitude * normal[1]);
        }
    }
    f
}

/// Advance one step of semi-implicit Euler.
pub fn step_state(state: &ParticleState, cfg: &SimConfig) -> Result<ParticleState, SimError> {
    let contact = pairwise_contact_force(state, cfg)?;
    let wall = wall_force(state, cfg);
    let g = cfg.gravity_vector();
    let mut next = state.clone();
    for k in 0..state.pos.len() {
        let d = k % 2;
        let accel = (contact[k] + wall[k]) / cfg.mass;
        let v = f64::from(state.vel[k]) + cfg.dt * (accel + g[d]);
        let v = f64::from(v as f32);
        next.vel[k] = v as f32;
        next.pos[k] = cfg.snap(f64::from(state.pos[k]) + f64::from(cfg.snap(cfg.dt * v)));
    }
    Ok(next)
}

/// Uniform non-overlapping placement by rejection sampling, standard-normal velocities.
pub fn init_random_state(cfg: &SimConfig, rng: &mut impl Rng) -> Result<ParticleState, SimError> {
    cfg.validate()?;
    const MAX_ATTEMPTS: usize = 100_000;
    let r = cfg.radius();
    let n = cfg.particle_count;
    let mut placed: Vec<[f32; 2]> = Vec::with_capacity(n);
    let mut attempts = 0;
    let min_sep2 = cfg.diameter * cfg.diameter;
    while placed.len() < n {
        if attempts >= MAX_ATTEMPTS {
            return Err(SimError::Placement {
                placed: placed.len(),
                wanted: n,
                attempts,
            });
        }
        attempts += 1;
        let x = cfg.snap(rng.random_range(r..cfg.box_width - r));
        let y = cfg.snap(rng.random_range(r..cfg.box_height - r));
        let clear = placed.iter().all(|q| {
            let dx = f64::from(x) - f64::from(q[0]);
            let dy = f64::from(y) - f64::from(q[1]);
            dx * dx + dy * dy >= min_sep2
        });
        if clear {
            placed.push([x, y]);
        }
    }
    let pos = placed.into_iter().flatten().collect();
    let vel = (0..2 * n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        })
        .collect();
    ParticleState::new(2, pos, vel)
}

/// States `x_0 ..= x_steps` from a seeded random start.
pub fn simulate_trajectory(cfg: &SimConfig, seed: u64) -> Result<Vec<ParticleState>, SimError> {
    let mut rng = seeds::substream(seed, "trajectory");
    let mut state = init_random_state(cfg, &mut rng)?;
    let mut out = Vec::with_capacity(cfg.steps_per_trajectory + 1);
    for _ in 0..cfg.steps_per_trajectory {
        let next = step_state(&state, cfg)?;
        out.push(std::mem::replace(&mut state, next));
    }
    out.push(state);
    Ok(out)
}

/// Kinetic + gravitational + stored spring energy (reduced units).
pub fn total_energy(state: &ParticleState, cfg: &SimConfig) -> f64 {
    let mut e = 0.0;
    for i in 0..state.len() {
        let v = state.velocity(i);
        let p = state.position(i);
        e += 0.5 * cfg.mass * (f64::from(v[0]).powi(2) + f64::from(v[1]).powi(2));
        e += cfg.mass * cfg.gravity * f64::from(p[1]);
        if cfg.walls {
            for (overlap, _) in wall_overlaps(p, cfg) {
                if overlap > 0.0 {
                    e += 0.5 * cfg.spring_k * overlap * overlap;
                }
            }
        }
        for j in i + 1..state.len() {
            let q = state.position(j);
            let d = ((f64::from(p[0]) - f64::from(q[0])).powi(2) + (f64::from(p[1]) - f64::from(q[1])).powi(2)).sqrt();
            if d < cfg.diameter {
                e += 0.5 * cfg.spring_k * (cfg.diameter - d).powi(2);
            }
        }
    }
    e
}

/// Write a trajectory as CSV: `step,particle,px,py,vx,vy`.
pub fn write_trajectory_csv(mut out: impl Write, states: &[ParticleState]) -> std::io::Result<()> {
    writeln!(out, "step,particle,px,py,vx,vy")?;
    for (step, s) in states.iter().enumerate() {
        for i in 0..s.len() {
            let p = s.position(i);
            let v = s.velocity(i);
            writeln!(out, "{step},{i},{},{},{},{}", p[0], p[1], v[0], v[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg_for(n: usize) -> SimConfig {
        SimConfig {
            particle_count: n,
            ..SimConfig::default()
        }
    }

    fn state(pos: &[f32], vel: &[f32]) -> ParticleState {
        ParticleState::new(2, pos.to_vec(), vel.to_vec()).unwrap()
    }

    #[test]
    fn resting_overlap_pushes_apart() {
        let s = state(&[5.0, 5.0, 5.9, 5.0], &[0.0; 4]);
        let f = pairwise_contact_force(&s, &cfg_for(2)).unwrap();
        assert_abs_diff_eq!(f[0], -100.0, epsilon = 1e-3);
        assert_abs_diff_eq!(f[1], 0.0);
        assert_eq!(f[2], -f[0]);
    }

    #[test]
    fn approaching_pair_adds_dashpot_force() {
        let s = state(&[0.0, 0.0, 0.9, 0.0], &[1.0, 0.0, -1.0, 0.0]);
        let f = pairwise_contact_force(&s, &cfg_for(2)).unwrap();
        assert_abs_diff_eq!(f[0], -120.0, epsilon = 1e-3);
    }

    #[test]
    fn separated_pair_has_no_force() {
        let s = state(&[5.0, 5.0, 6.5, 5.0], &[0.0; 4]);
        assert!(pairwise_contact_force(&s, &cfg_for(2)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coincident_centres_are_rejected() {
        let s = state(&[5.0, 5.0, 5.0, 5.0], &[0.0; 4]);
        assert_eq!(
            pairwise_contact_force(&s, &cfg_for(2)),
            Err(SimError::CoincidentCentres { i: 0, j: 1 })
        );
    }

    #[test]
    fn floor_pushes_up_on_overlap() {
        let s = state(&[14.0, 0.4], &[0.0, 0.0]);
        let f = wall_force(&s, &cfg_for(1));
        assert_abs_diff_eq!(f[1], 100.0, epsilon = 1e-3);
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn no_wall_force_away_from_or_touching_walls() {
        let inside = state(&[14.0, 7.0], &[0.0, 0.0]);
        assert!(wall_force(&inside, &cfg_for(1)).iter().all(|&v| v == 0.0));
        let touching = state(&[14.0, 0.5], &[0.0, 0.0]);
        assert!(wall_force(&touching, &cfg_for(1)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn free_fall_step() {
        let cfg = SimConfig {
            walls: false,
            ..cfg_for(1)
        };
        let next = step_state(&state(&[0.0, 10.0], &[0.0, 0.0]), &cfg).unwrap();
        assert_abs_diff_eq!(f64::from(next.vel[1]), -0.049, epsilon = 1e-7);
        assert_abs_diff_eq!(f64::from(next.pos[1]), 9.999755, epsilon = 1e-6);
    }

    #[test]
    fn linear_motion_without_forces() {
        let cfg = SimConfig {
            walls: false,
            gravity: 0.0,
            ..cfg_for(1)
        };
        let next = step_state(&state(&[3.0, 3.0], &[1.0, 0.0]), &cfg).unwrap();
        assert_abs_diff_eq!(f64::from(next.pos[0]), 3.005, epsilon = 1e-6);
        assert_eq!(next.pos[1], 3.0);
    }

    #[test]
    fn head_on_collision_conserves_momentum() {
        let cfg = SimConfig {
            walls: false,
            gravity: 0.0,
            ..cfg_for(2)
        };
        let mut s = state(&[10.0, 5.0, 11.2, 5.0], &[1.0, 0.0, -1.0, 0.0]);
        let momentum = |s: &ParticleState| f64::from(s.vel[0]) + f64::from(s.vel[2]);
        let before = momentum(&s);
        for _ in 0..200 {
            s = step_state(&s, &cfg).unwrap();
        }
        assert_abs_diff_eq!(momentum(&s), before, epsilon = 1e-6);
        assert!(s.vel[0] < 0.0, "particles should have bounced");
    }

    #[test]
    fn random_init_is_seeded_and_non_overlapping() {
        let cfg = SimConfig::default();
        let a = init_random_state(&cfg, &mut seeds::substream(3, "t")).unwrap();
        let b = init_random_state(&cfg, &mut seeds::substream(3, "t")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let (p, q) = (a.position(i), a.position(j));
                let d = (f64::from(p[0] - q[0]).powi(2) + f64::from(p[1] - q[1]).powi(2)).sqrt();
                assert!(d >= 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn overfull_box_is_rejected() {
        let cfg = SimConfig {
            particle_count: 500,
            box_width: 5.0,
            box_height: 5.0,
            ..SimConfig::default()
        };
        assert!(matches!(
            init_random_state(&cfg, &mut seeds::substream(0, "t")),
            Err(SimError::Placement { .. })
        ));
    }

    #[test]
    fn energy_terms() {
        let cfg = cfg_for(1);
        let rest = state(&[14.0, 0.5], &[0.0, 0.0]);
        assert_abs_diff_eq!(total_energy(&rest, &cfg), 4.9, epsilon = 1e-9);
        let moving = state(&[14.0, 0.5], &[3.0, 4.0]);
        assert_abs_diff_eq!(total_energy(&moving, &cfg) - total_energy(&rest, &cfg), 12.5, epsilon = 1e-9);

        let flat = SimConfig {
            gravity: 0.0,
            ..cfg_for(2)
        };
        let pair = state(&[5.0, 5.0, 5.9, 5.0], &[0.0; 4]);
        assert_abs_diff_eq!(total_energy(&pair, &flat), 5.0, epsilon = 1e-4);
    }

    #[test]
    fn trajectory_length_and_csv() {
        let cfg = SimConfig {
            particle_count: 4,
            steps_per_trajectory: 10,
            ..SimConfig::default()
        };
        let traj = simulate_trajectory(&cfg, 1).unwrap();
        assert_eq!(traj.len(), 11);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 11 * 4);
        assert!(text.starts_with("step,particle,px,py,vx,vy\n0,0,"));
    }

    #[test]
    fn input_rows_round_trip() {
        let s = state(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(s.to_input_rows(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        assert_eq!(ParticleState::from_input_rows(2, &s.to_input_rows()).unwrap(), s);
    }
}
