//! Run configuration: flat `section.key = value` text with typed values,
//! presets, validation and a canonical echo.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llc::SgldConfig;
use crate::metrics::{ClassBands, DEFAULT_SCORE_RADIUS};
use crate::model::ModelConfig;
use crate::powerlaw::WindowRule;
use crate::sim::SimConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
#[error("{}", .0.join("; "))]
pub struct ConfigError(pub Vec<String>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub score_radius: f64,
    pub bands: ClassBands,
    pub eval_trajectories: usize,
    pub eval_states: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlcRunConfig {
    pub sgld: SgldConfig,
    pub include_output: bool,
    /// Analyse every n-th checkpoint.
    pub checkpoint_stride: usize,
    /// `all`, or a comma-separated list of `block-head` pairs.
    pub heads: String,
    pub smoothing_window: usize,
    pub reference_multiple: usize,
    pub pool_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output: PathBuf,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub llc: LlcRunConfig,
    pub analysis: AnalysisConfig,
    pub powerlaw: WindowRule,
    pub rollout_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

enum Slot<'a> {
    F(&'a mut f64),
    U(&'a mut usize),
    S(&'a mut u64),
    B(&'a mut bool),
    T(&'a mut String),
}

/// Every key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "output",
    "sim.spatial_dim",
    "sim.particle_count",
    "sim.diameter",
    "sim.mass",
    "sim.dt",
    "sim.spring_k",
    "sim.damping_c",
    "sim.gravity",
    "sim.box_width",
    "sim.box_height",
    "sim.steps_per_trajectory",
    "sim.walls",
    "model.blocks",
    "model.heads",
    "model.embed_dim",
    "model.boundary_radius",
    "model.boundary_spacing",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.weight_decay",
    "train.batch_size",
    "train.total_steps",
    "train.checkpoints",
    "sgld.epsilon",
    "sgld.gamma",
    "sgld.beta_tilde",
    "sgld.batch_size",
    "sgld.total_steps",
    "sgld.burn_in",
    "sgld.chains",
    "sgld.include_output",
    "sgld.checkpoint_stride",
    "sgld.heads",
    "sgld.smoothing_window",
    "sgld.reference_multiple",
    "sgld.pool_trajectories",
    "analysis.score_radius",
    "analysis.true_band",
    "analysis.partial_band",
    "analysis.eval_trajectories",
    "analysis.eval_states",
    "powerlaw.min_points",
    "powerlaw.min_r_squared",
    "powerlaw.max_curvature",
    "rollout.steps",
];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self {
            preset,
            seed: 0,
            output: PathBuf::from("run"),
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            llc: LlcRunConfig {
                sgld: SgldConfig::default(),
                include_output: true,
                checkpoint_stride: 1,
                heads: "all".into(),
                smoothing_window: 5,
                reference_multiple: 16,
                pool_trajectories: 4,
            },
            analysis: AnalysisConfig {
                score_radius: DEFAULT_SCORE_RADIUS,
                bands: ClassBands::default(),
                eval_trajectories: 8,
                eval_states: 32,
            },
            powerlaw: WindowRule::default(),
            rollout_steps: 1000,
        };
        if preset == Preset::Desk {
            cfg.sim.particle_count = 16;
            cfg.sim.box_width = DESK_BOX_WIDTH;
            cfg.model.blocks = 2;
            cfg.model.heads = 4;
            cfg.model.embed_dim = 32;
            cfg.train.total_steps = 5000;
            cfg.train.lr = DESK_LR;
            cfg.train.batch_size = DESK_BATCH;
            cfg.llc.sgld.batch_size = 64;
            cfg.llc.sgld.total_steps = 500;
            cfg.llc.sgld.burn_in = 400;
            cfg.llc.sgld.chains = 2;
            cfg.llc.checkpoint_stride = 10;
            cfg.llc.reference_multiple = 4;
        }
        cfg.sync_model();
        cfg
    }

    /// The model shares geometry and integrator constants with the simulator.
    fn sync_model(&mut self) {
        self.model.spatial_dim = self.sim.spatial_dim;
        self.model.dt = self.sim.dt;
        self.model.gravity = self.sim.gravity;
        self.model.box_width = self.sim.box_width;
        self.model.box_height = self.sim.box_height;
    }

    fn slot(&mut self, key: &str) -> Option<Slot<'_>> {
        use Slot::*;
        Some(match key {
            "seed" => S(&mut self.seed),
            "sim.spatial_dim" => U(&mut self.sim.spatial_dim),
            "sim.particle_count" => U(&mut self.sim.particle_count),
            "sim.diameter" => F(&mut self.sim.diameter),
            "sim.mass" => F(&mut self.sim.mass),
            "sim.dt" => F(&mut self.sim.dt),
            "sim.spring_k" => F(&mut self.sim.spring_k),
            "sim.damping_c" => F(&mut self.sim.damping_c),
            "sim.gravity" => F(&mut self.sim.gravity),
            "sim.box_width" => F(&mut self.sim.box_width),
            "sim.box_height" => F(&mut self.sim.box_height),
            "sim.steps_per_trajectory" => U(&mut self.sim.steps_per_trajectory),
            "sim.walls" => B(&mut self.sim.walls),
            "model.blocks" => U(&mut self.model.blocks),
            "model.heads" => U(&mut self.model.heads),
            "model.embed_dim" => U(&mut self.model.embed_dim),
            "model.boundary_radius" => F(&mut self.model.boundary_radius),
            "model.boundary_spacing" => F(&mut self.model.boundary_spacing),
            "train.lr" => F(&mut self.train.lr),
            "train.beta1" => F(&mut self.train.beta1),
            "train.beta2" => F(&mut self.train.beta2),
            "train.eps" => F(&mut self.train.eps),
            "train.weight_decay" => F(&mut self.train.weight_decay),
            "train.batch_size" => U(&mut self.train.batch_size),
            "train.total_steps" => U(&mut self.train.total_steps),
            "train.checkpoints" => U(&mut self.train.checkpoints),
            "sgld.epsilon" => F(&mut self.llc.sgld.epsilon),
            "sgld.gamma" => F(&mut self.llc.sgld.gamma),
            "sgld.beta_tilde" => F(&mut self.llc.sgld.beta_tilde),
            "sgld.batch_size" => U(&mut self.llc.sgld.batch_size),
            "sgld.total_steps" => U(&mut self.llc.sgld.total_steps),
            "sgld.burn_in" => U(&mut self.llc.sgld.burn_in),
            "sgld.chains" => U(&mut self.llc.sgld.chains),
            "sgld.include_output" => B(&mut self.llc.include_output),
            "sgld.checkpoint_stride" => U(&mut self.llc.checkpoint_stride),
            "sgld.heads" => T(&mut self.llc.heads),
            "sgld.smoothing_window" => U(&mut self.llc.smoothing_window),
            "sgld.reference_multiple" => U(&mut self.llc.reference_multiple),
            "sgld.pool_trajectories" => U(&mut self.llc.pool_trajectories),
            "analysis.score_radius" => F(&mut self.analysis.score_radius),
            "analysis.true_band" => F(&mut self.analysis.bands.true_min),
            "analysis.partial_band" => F(&mut self.analysis.bands.partial_min),
            "analysis.eval_trajectories" => U(&mut self.analysis.eval_trajectories),
            "analysis.eval_states" => U(&mut self.analysis.eval_states),
            "powerlaw.min_points" => U(&mut self.powerlaw.min_points),
            "powerlaw.min_r_squared" => F(&mut self.powerlaw.min_r_squared),
            "powerlaw.max_curvature" => F(&mut self.powerlaw.max_curvature),
            "rollout.steps" => U(&mut self.rollout_steps),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, value: &toml::Value) -> Result<(), String> {
        if key == "output" {
            return match value {
                toml::Value::String(s) => {
                    self.output = PathBuf::from(s);
                    Ok(())
                }
                other => Err(format!("{key}: expected a string, found {}", other.type_str())),
            };
        }
        let slot = self.slot(key).ok_or_else(|| format!("{key}: unknown key"))?;
        let mismatch = |want: &str| format!("{key}: expected {want}, found {}", value.type_str());
        match (slot, value) {
            (Slot::F(f), toml::Value::Float(v)) => *f = *v,
            (Slot::F(f), toml::Value::Integer(v)) => *f = *v as f64,
            (Slot::U(u), toml::Value::Integer(v)) => *u = usize::try_from(*v).map_err(|_| format!("{key}: must be non-negative"))?,
            (Slot::S(s), toml::Value::Integer(v)) => *s = u64::try_from(*v).map_err(|_| format!("{key}: must be non-negative"))?,
            (Slot::B(b), toml::Value::Boolean(v)) => *b = *v,
            (Slot::T(t), toml::Value::String(v)) => *t = v.clone(),
            (Slot::F(_), _) => return Err(mismatch("a number")),
            (Slot::U(_), _) | (Slot::S(_), _) => return Err(mismatch("an integer")),
            (Slot::B(_), _) => return Err(mismatch("a boolean")),
            (Slot::T(_), _) => return Err(mismatch("a string")),
        }
        Ok(())
    }

    /// Parse config text, then apply `overrides` (each `key=value`).
    ///
    /// A top-level `preset = "desk"` selects the starting point. Every
    /// problem found is reported, not only the first.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut errors = Vec::new();
        let mut entries: Vec<(String, toml::Value)> = Vec::new();
        match text.parse::<toml::Table>() {
            Ok(table) => flatten("", &toml::Value::Table(table), &mut entries),
            Err(e) => errors.push(format!("syntax: {}", e.message())),
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => match format!("x = {v}").parse::<toml::Table>() {
                    Ok(mut t) => entries.push((k.trim().to_owned(), t.remove("x").expect("parsed key"))),
                    // Bare words are taken as strings.
                    Err(_) => entries.push((k.trim().to_owned(), toml::Value::String(v.trim().to_owned()))),
                },
                None => errors.push(format!("override {o:?}: expected key=value")),
            }
        }
        let preset = match entries.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v) {
            None => Preset::Full,
            Some(toml::Value::String(s)) if s == "full" => Preset::Full,
            Some(toml::Value::String(s)) if s == "desk" => Preset::Desk,
            Some(other) => {
                errors.push(format!("preset: expected \"full\" or \"desk\", found {other}"));
                Preset::Full
            }
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            if let Err(e) = cfg.set(k, v) {
                errors.push(e);
            }
        }
        cfg.sync_model();
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError(errors))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.sim.validate() {
            out.push(format!("sim: {e}"));
        }
        if let Err(e) = self.model.validate() {
            out.push(format!("model: {e}"));
        }
        if let Err(e) = self.train.validate() {
            out.push(format!("train: {e}"));
        }
        if let Err(e) = self.llc.sgld.validate() {
            out.push(format!("sgld: {e}"));
        }
        if self.llc.smoothing_window.is_multiple_of(2) {
            out.push("sgld.smoothing_window: must be odd".into());
        }
        if self.llc.checkpoint_stride == 0 {
            out.push("sgld.checkpoint_stride: must be positive".into());
        }
        if let Err(e) = self.llc_heads() {
            out.push(e);
        }
        let b = self.analysis.bands;
        if !(0.0 <= b.partial_min && b.partial_min <= b.true_min && b.true_min <= 1.0) {
            out.push("analysis: bands must satisfy 0 <= partial_band <= true_band <= 1".into());
        }
        if !(self.analysis.score_radius > 0.0) {
            out.push("analysis.score_radius: must be positive".into());
        }
        if self.analysis.eval_trajectories == 0 || self.analysis.eval_states < 2 {
            out.push("analysis: need at least one eval trajectory and two states".into());
        }
        if self.powerlaw.min_points < 3 {
            out.push("powerlaw.min_points: must be at least 3".into());
        }
        out
    }

    /// Heads selected for LLC estimation as `(block, head)`.
    pub fn llc_heads(&self) -> Result<Vec<(usize, usize)>, String> {
        let all = || (0..self.model.blocks).flat_map(|b| (0..self.model.heads).map(move |h| (b, h))).collect();
        if self.llc.heads.trim() == "all" {
            return Ok(all());
        }
        self.llc
            .heads
            .split(',')
            .map(|item| {
                let parsed = item.trim().split_once('-').and_then(|(b, h)| Some((b.parse().ok()?, h.parse().ok()?)));
                match parsed {
                    Some((b, h)) if b < self.model.blocks && h < self.model.heads => Ok((b, h)),
                    _ => Err(format!("sgld.heads: {item:?} is not a block-head pair within the model")),
                }
            })
            .collect()
    }

    /// Every resolved key, one per line, in a fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let preset = match self.preset {
            Preset::Full => "full",
            Preset::Desk => "desk",
        };
        let _ = writeln!(out, "preset = \"{preset}\"");
        let mut scratch = self.clone();
        for &key in KEYS {
            let v = if key == "output" {
                toml::Value::String(self.output.display().to_string()).to_string()
            } else {
                match scratch.slot(key).expect("listed key") {
                    Slot::F(f) => toml::Value::Float(*f).to_string(),
                    Slot::U(u) => u.to_string(),
                    Slot::S(s) => s.to_string(),
                    Slot::B(b) => b.to_string(),
                    Slot::T(t) => toml::Value::String(t.clone()).to_string(),
                }
            };
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`], leaving out
    /// the output directory so that a rerun elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let text: String = self.canonical().lines().filter(|l| !l.starts_with("output = ")).map(|l| format!("{l}\n")).collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Desk box width; narrower than the full box so 16 particles still collide often.
pub const DESK_BOX_WIDTH: f64 = 7.0;
/// Desk learning rate and batch; with 5000 steps the collision heads only form
/// in time with the larger batch and step size.
pub const DESK_LR: f64 = 0.003;
pub const DESK_BATCH: usize = 128;

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_owned(), other.clone())),
    }
}
