//! Batch front end: each subcommand reads and writes artifacts under one run
//! directory, so stages can be rerun independently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_dataset, read_dataset, trajectories_needed, write_dataset, Cursor, DataError};
use crate::llc::{estimate_llc, smooth_series, trace_report, write_llc_csv, write_trace_csv, LlcError, ModelSampler, Restriction, SgldConfig};
use crate::metrics::{
    classify_head, eval_states, measure_heads, render_attention_svg, score_histogram, write_head_csv, HeadId, HeadMeasurement, HeadSeries,
};
use crate::model::{checkpoint_bytes, predict, read_checkpoint, BoundaryLayout, ModelError, ModelParams};
use crate::powerlaw::{detect_segments, write_fit_report, FitRow, PowerLawFit};
use crate::seeds;
use crate::sim::{init_random_state, ParticleState};
use crate::theory::{
    classify_convergence, gradient_flow, holder_observable_check, ising_critical_scan, log_spaced_r, write_flow_csv, write_scan_csv, Convergence,
    FlowOptions, Observable, Potential,
};
use crate::train::{checkpoint_schedule, rollout, train, write_energy_csv, write_loss_csv, DatasetSource, TrainError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// Resolve and print the configuration without running anything.
    Config,
    GenData,
    Train,
    AnalyzeHeads,
    EstimateLlc,
    FitPowerlaws,
    Rollout,
    TheoryLab,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Config => "config",
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::AnalyzeHeads => "analyze-heads",
            Command::EstimateLlc => "estimate-llc",
            Command::FitPowerlaws => "fit-powerlaws",
            Command::Rollout => "rollout",
            Command::TheoryLab => "theory-lab",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Overrides the configured output directory.
    pub output: Option<PathBuf>,
    /// Allow replacing artifacts whose bytes differ.
    pub force: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {path}; run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error("{path} exists with different contents; use another output directory or --force")]
    Conflict { path: PathBuf },
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Divergence(_) => 3,
            _ => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor {
                source: crate::autodiff::TensorError::NonFinite { .. },
                ..
            } => CliError::Divergence(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad { .. } | TrainError::RolloutDiverged { .. } => {
                CliError::Divergence(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::metrics::MetricsError> for CliError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::theory::TheoryError> for CliError {
    fn from(e: crate::theory::TheoryError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Artifact writer bound to one run directory and config hash.
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
    force: bool,
    written: Vec<(PathBuf, String)>,
}

impl RunDir {
    fn new(root: PathBuf, hash: String, force: bool) -> Self {
        Self {
            root,
            hash,
            force,
            written: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, rel: &str, hint: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { path: p, hint })
        }
    }

    /// Write `bytes` unless a file with different contents is already there.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        match fs::read(&path) {
            Ok(old) if old == bytes => {}
            Ok(_) if !self.force => return Err(CliError::Conflict { path }),
            _ => fs::write(&path, bytes)?,
        }
        self.written.push((PathBuf::from(rel), hex(&Sha256::digest(bytes))));
        Ok(())
    }

    fn write_with(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }

    /// Merge this command's artifacts into `manifest.csv` (path, sha256, config hash).
    fn flush_manifest(&mut self) -> Result<(), CliError> {
        let path = self.path("manifest.csv");
        let mut rows: BTreeMap<String, (String, String)> = BTreeMap::new();
        if let Ok(text) = fs::read_to_string(&path) {
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() == 3 {
                    rows.insert(f[0].to_owned(), (f[1].to_owned(), f[2].to_owned()));
                }
            }
        }
        for (p, digest) in self.written.drain(..) {
            rows.insert(p.display().to_string(), (digest, self.hash.clone()));
        }
        let mut out = String::from("path,sha256,config_hash\n");
        for (p, (d, h)) in rows {
            let _ = writeln!(out, "{p},{d},{h}");
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Timestamped progress lines go to `run.log`, never into artifacts.
struct Log {
    file: Option<fs::File>,
    command: &'static str,
    echo: bool,
}

impl Log {
    fn line(&mut self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{ts} {} {msg}", self.command);
        }
        if self.echo {
            eprintln!("[{}] {msg}", self.command);
        }
    }
}

/// Resolve the configuration for an invocation.
pub fn resolve(inv: &Invocation) -> Result<(RunConfig, String), CliError> {
    let text = match &inv.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text, &inv.overrides)?;
    if let Some(o) = &inv.output {
        cfg.output = o.clone();
    }
    Ok((cfg, text))
}

/// Run one subcommand. `echo` mirrors progress lines to stderr.
pub fn execute(command: Command, inv: &Invocation, echo: bool) -> Result<(), CliError> {
    let (cfg, text) = resolve(inv)?;
    if command == Command::Config {
        print!("{}", cfg.canonical());
        println!("# hash {}", cfg.hash());
        return Ok(());
    }
    fs::create_dir_all(&cfg.output)?;
    let mut run = RunDir::new(cfg.output.clone(), cfg.hash(), inv.force);
    let mut log = Log {
        file: fs::OpenOptions::new().create(true).append(true).open(cfg.output.join("run.log")).ok(),
        command: command.name(),
        echo,
    };
    log.line(&format!("start; config hash {}", run.hash));
    let result = write_config(&cfg, &text, inv, &mut run).and_then(|()| match command {
        Command::Config => Ok(()),
        Command::GenData => gen_data(&cfg, &mut run, &mut log),
        Command::Train => train_cmd(&cfg, &mut run, &mut log),
        Command::AnalyzeHeads => analyze_heads(&cfg, &mut run, &mut log),
        Command::EstimateLlc => estimate_llc_cmd(&cfg, &mut run, &mut log),
        Command::FitPowerlaws => fit_powerlaws(&cfg, &mut run, &mut log),
        Command::Rollout => rollout_cmd(&cfg, &mut run, &mut log),
        Command::TheoryLab => theory_lab(&mut run, &mut log),
        Command::Report => report(&cfg, &mut run, &mut log),
    });
    run.flush_manifest()?;
    match &result {
        Ok(()) => log.line("done"),
        Err(e) => log.line(&format!("failed: {e}")),
    }
    result
}

fn write_config(cfg: &RunConfig, text: &str, inv: &Invocation, run: &mut RunDir) -> Result<(), CliError> {
    run.write("config.resolved.toml", cfg.canonical().as_bytes())?;
    run.write("config.hash", format!("{}\nparticle-heads {VERSION}\n", run.hash).as_bytes())?;
    if inv.config.is_some() {
        run.write("config.input.toml", text.as_bytes())?;
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let pairs = (cfg.train.total_steps * cfg.train.batch_size) as u64;
    let count = trajectories_needed(pairs, cfg.sim.steps_per_trajectory);
    let seeds: Vec<u64> = (0..count).map(|k| seeds::substream_seed(cfg.seed, &format!("data-{k}"))).collect();
    log.line(&format!("simulating {count} trajectories"));
    let ds = generate_dataset(&cfg.sim, &seeds, seeds::substream_seed(cfg.seed, "train-shuffle"))?;
    let tmp = run.path("data/train.pds.partial");
    fs::create_dir_all(tmp.parent().expect("has parent"))?;
    write_dataset(&tmp, &ds)?;
    let bytes = fs::read(&tmp)?;
    fs::remove_file(&tmp)?;
    run.write("data/train.pds", &bytes)?;
    log.line(&format!("{} pairs written", ds.len()));
    Ok(())
}

const CHECKPOINT_INDEX: &str = "checkpoints/index.csv";

fn checkpoint_file(step: usize) -> String {
    format!("checkpoints/step_{step:06}.ptc")
}

fn train_cmd(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let data = run.require("data/train.pds", "gen-data")?;
    let ds = read_dataset(&data)?;
    let params = ModelParams::init(&cfg.model, &mut seeds::substream(cfg.seed, "init"));
    let schedule = checkpoint_schedule(cfg.train.total_steps, cfg.train.checkpoints);
    let mut source = DatasetSource {
        dataset: &ds,
        cursor: Cursor(0),
    };
    let mut acc = 0.0;
    let every = (cfg.train.total_steps / 20).max(1);
    let outcome = train(&cfg.model, &cfg.train, params, &mut source, &schedule, |step, loss| {
        acc += loss;
        if step % every == 0 {
            log.line(&format!("step {step} mean loss {:.6}", acc / every as f64));
            acc = 0.0;
        }
    })?;
    let mut index = String::from("step,file,running_loss\n");
    for ck in &outcome.checkpoints {
        let rel = checkpoint_file(ck.step);
        run.write(&rel, &checkpoint_bytes(&cfg.model, &ck.params))?;
        let loss = ck.running_loss.map_or(String::new(), |l| l.to_string());
        let _ = writeln!(index, "{},{},{loss}", ck.step, rel.trim_start_matches("checkpoints/"));
    }
    run.write(CHECKPOINT_INDEX, index.as_bytes())?;
    run.write_with("loss.csv", |b| write_loss_csv(b, &outcome.losses))?;
    Ok(())
}

/// `(step, file)` rows of the checkpoint index.
fn checkpoint_index(run: &RunDir) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let path = run.require(CHECKPOINT_INDEX, "train")?;
    let text = fs::read_to_string(&path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let mut f = line.split(',');
            let step = f.next().and_then(|s| s.parse().ok());
            let file = f.next();
            match (step, file) {
                (Some(step), Some(file)) => Ok((step, run.path("checkpoints").join(file))),
                _ => Err(CliError::Runtime(format!("{}: malformed row {line:?}", path.display()))),
            }
        })
        .collect()
}

fn load_params(cfg: &RunConfig, path: &Path) -> Result<ModelParams, CliError> {
    let (stored, params) = read_checkpoint(path)?;
    if stored != cfg.model {
        return Err(CliError::Runtime(format!("{} was trained with a different model config", path.display())));
    }
    Ok(params)
}

fn head_csv(block: usize, head: usize) -> String {
    format!("heads/head_{block}_{head}.csv")
}

fn run_head(cfg: &RunConfig, block: usize, head: usize) -> HeadId {
    HeadId {
        run: cfg.seed as u32,
        block,
        head,
    }
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn contact_count(s: &ParticleState, radius: f64) -> usize {
    let n = s.len();
    let mut c = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (s.position(i), s.position(j));
            let d = ((f64::from(a[0]) - f64::from(b[0])).powi(2) + (f64::from(a[1]) - f64::from(b[1])).powi(2)).sqrt();
            if d < radius {
                c += 1;
            }
        }
    }
    c
}

fn analyze_heads(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let index = checkpoint_index(run)?;
    let eval = eval_states(
        &cfg.sim,
        seeds::substream_seed(cfg.seed, "eval-sampling"),
        cfg.analysis.eval_trajectories,
        cfg.analysis.eval_states,
    )?;
    log.line(&format!("{} checkpoints, {} eval states", index.len(), eval.len()));
    let measured: Vec<Result<Vec<HeadMeasurement>, CliError>> = par_map(&index, |(_, path)| {
        let params = load_params(cfg, path)?;
        Ok(measure_heads(&cfg.model, &params, &eval, cfg.analysis.score_radius)?)
    });
    let mut series: Vec<HeadSeries> = Vec::new();
    for b in 0..cfg.model.blocks {
        for h in 0..cfg.model.heads {
            series.push(HeadSeries {
                id: run_head(cfg, b, h),
                points: Vec::with_capacity(index.len()),
            });
        }
    }
    for ((step, _), m) in index.iter().zip(measured) {
        for hm in m? {
            series[hm.block * cfg.model.heads + hm.head].points.push((*step, hm.score, hm.correlation));
        }
    }
    for s in &series {
        run.write_with(&head_csv(s.id.block, s.id.head), |b| write_head_csv(b, s))?;
    }
    let hist = score_histogram(&series);
    run.write_with("heads/histogram.csv", |b| hist.write_csv(b))?;

    let mut classes = String::from("block,head,final_score,final_c,class\n");
    for s in &series {
        let &(_, score, c) = s.points.last().expect("at least one checkpoint");
        let _ = writeln!(classes, "{},{},{score},{c},{}", s.id.block, s.id.head, classify_head(score, cfg.analysis.bands));
    }
    run.write("heads/classification.csv", classes.as_bytes())?;
    let meta = format!(
        "score_radius = {}\ntrue_band = {}\npartial_band = {}\neval_trajectories = {}\neval_states_per_trajectory = {}\n",
        cfg.analysis.score_radius,
        cfg.analysis.bands.true_min,
        cfg.analysis.bands.partial_min,
        cfg.analysis.eval_trajectories,
        cfg.analysis.eval_states
    );
    run.write("heads/metadata.txt", meta.as_bytes())?;

    // Render the final checkpoint on the most crowded evaluation state.
    let (_, last) = index.last().expect("non-empty index");
    let params = load_params(cfg, last)?;
    let state = eval
        .iter()
        .enumerate()
        .max_by_key(|(k, s)| (contact_count(s, cfg.analysis.score_radius), std::cmp::Reverse(*k)))
        .map(|(_, s)| s)
        .expect("non-empty eval set");
    let layout = BoundaryLayout::from_config(&cfg.model);
    let pred = predict(&cfg.model, &layout, &params, &state.to_input_rows(), state.len(), true)?;
    for rec in pred.attention.expect("captured") {
        let svg = render_attention_svg(state, rec.sample(0), cfg.sim.box_width, cfg.sim.box_height);
        run.write(&format!("heads/render_{}_{}.svg", rec.block, rec.head), svg.as_bytes())?;
    }
    Ok(())
}

fn llc_csv(block: usize, head: usize) -> String {
    format!("llc/head_{block}_{head}.csv")
}

fn estimate_llc_cmd(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let index = checkpoint_index(run)?;
    let heads = cfg.llc_heads().map_err(CliError::Config)?;
    let stride = cfg.llc.checkpoint_stride;
    let picked: Vec<&(usize, PathBuf)> = index
        .iter()
        .enumerate()
        .filter(|(k, _)| k % stride == 0 || *k + 1 == index.len())
        .map(|(_, c)| c)
        .collect();
    let mut diagnostics = String::from("block,head,step,chain,converged,slope,spikes,suggested_burn_in\n");
    for &(b, h) in &heads {
        let mut rows: Vec<(usize, Option<f64>, String)> = Vec::new();
        for (step, path) in &picked {
            let params = load_params(cfg, path)?;
            let head = run_head(cfg, b, h);
            let restriction = Restriction::for_head(&cfg.model, &params, head, cfg.llc.include_output).map_err(|e| CliError::Runtime(e.to_string()))?;
            let w0 = restriction.restrict(&params);
            let sampler = ModelSampler {
                model: cfg.model.clone(),
                layout: BoundaryLayout::from_config(&cfg.model),
                base: params,
                restriction,
                sim: cfg.sim.clone(),
                batch_size: cfg.llc.sgld.batch_size,
                pool_trajectories: cfg.llc.pool_trajectories,
                reference_multiple: cfg.llc.reference_multiple,
            };
            let sgld = SgldConfig {
                seed: seeds::substream_seed(cfg.seed, &format!("sgld-{b}-{h}-{step}")),
                ..cfg.llc.sgld.clone()
            };
            match estimate_llc(&w0, &sampler, &sgld) {
                Ok(mut est) => {
                    est.head = Some(head);
                    est.step = *step;
                    let status = if est.partial { "partial" } else { "ok" };
                    log.line(&format!("head {b}-{h} step {step}: lambda {:.4} ({status})", est.mean));
                    run.write_with(&format!("llc/head_{b}_{h}/step_{step:06}.csv"), |w| write_llc_csv(w, &est))?;
                    run.write_with(&format!("llc/head_{b}_{h}/trace_{step:06}.csv"), |w| write_trace_csv(w, &est))?;
                    for c in &est.chains {
                        if c.trace.is_empty() {
                            continue;
                        }
                        let r = trace_report(&c.trace, sgld.burn_in.min(c.trace.len() - 1), 1.0);
                        let _ = writeln!(
                            diagnostics,
                            "{b},{h},{step},{},{},{},{},{}",
                            c.chain, r.converged, r.slope, r.spikes, r.suggested_burn_in
                        );
                    }
                    rows.push((*step, Some(est.mean), status.to_owned()));
                }
                Err(LlcError::AllChainsAborted { first_step, .. }) => {
                    log.line(&format!("head {b}-{h} step {step}: every chain diverged (first at SGLD step {first_step})"));
                    rows.push((*step, None, format!("aborted@{first_step}")));
                }
                Err(e) => return Err(CliError::Runtime(e.to_string())),
            }
        }
        let means: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
        let smooth = smooth_series(&means, cfg.llc.smoothing_window);
        let mut out = String::from("step,lambda,lambda_smoothed,status\n");
        let mut k = 0;
        for (step, mean, status) in &rows {
            match mean {
                Some(m) => {
                    let _ = writeln!(out, "{step},{m},{},{status}", smooth[k]);
                    k += 1;
                }
                None => {
                    let _ = writeln!(out, "{step},,,{status}");
                }
            }
        }
        run.write(&llc_csv(b, h), out.as_bytes())?;
    }
    run.write("llc/diagnostics.csv", diagnostics.as_bytes())?;
    Ok(())
}

/// `(step, score, c)` rows of a per-head CSV.
fn read_head_csv(run: &RunDir, block: usize, head: usize) -> Result<Vec<(usize, f64, f64)>, CliError> {
    let path = run.require(&head_csv(block, head), "analyze-heads")?;
    let text = fs::read_to_string(&path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let parsed = (f.len() == 3).then(|| (f[0].parse().ok(), f[1].parse().ok(), f[2].parse().ok()));
            match parsed {
                Some((Some(s), Some(a), Some(c))) => Ok((s, a, c)),
                _ => Err(CliError::Runtime(format!("{}: malformed row {line:?}", path.display()))),
            }
        })
        .collect()
}

fn head_fits(cfg: &RunConfig, rows: &[(usize, f64, f64)]) -> Vec<PowerLawFit> {
    let series: Vec<(f64, f64)> = rows.iter().map(|&(s, _, c)| (s as f64, c)).collect();
    detect_segments(&series, &cfg.powerlaw)
}

fn fit_powerlaws(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let mut fits = Vec::new();
    let mut unfitted = Vec::new();
    for b in 0..cfg.model.blocks {
        for h in 0..cfg.model.heads {
            let rows = read_head_csv(run, b, h)?;
            let found = head_fits(cfg, &rows);
            let id = run_head(cfg, b, h);
            if found.is_empty() {
                unfitted.push(id);
            }
            fits.extend(found.into_iter().map(|fit| FitRow { head: id, fit }));
        }
    }
    log.line(&format!("{} windows fitted, {} heads without a power law", fits.len(), unfitted.len()));
    let (mut table, mut side) = (Vec::new(), Vec::new());
    write_fit_report(&mut table, &mut side, &fits, &unfitted)?;
    run.write("powerlaw/fits.csv", &table)?;
    run.write("powerlaw/unfitted.csv", &side)?;
    Ok(())
}

fn rollout_cmd(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let index = checkpoint_index(run)?;
    let (step, path) = index.last().expect("non-empty index");
    let params = load_params(cfg, path)?;
    let initial = init_random_state(&cfg.sim, &mut seeds::substream(cfg.seed, "rollout")).map_err(|e| CliError::Runtime(e.to_string()))?;
    log.line(&format!("rolling out checkpoint {step} for {} steps", cfg.rollout_steps));
    match rollout(&cfg.model, &params, &cfg.sim, initial, cfg.rollout_steps) {
        Ok(r) => run.write_with("rollout/energy.csv", |b| write_energy_csv(b, &r.energies)),
        Err(TrainError::RolloutDiverged { step, energies }) => {
            run.write_with("rollout/energy.csv", |b| write_energy_csv(b, &energies))?;
            Err(CliError::Divergence(format!("rollout state became non-finite at step {step}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn theory_lab(run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let flows = [
        ("quartic", Potential::Quartic, FlowOptions { x0: 1.0, t_min: 10.0, horizon: 1e4, samples: 64, step: 1e-3 }),
        ("quadratic", Potential::Quadratic { r: 1.0 }, FlowOptions { x0: 1.0, t_min: 0.1, horizon: 30.0, samples: 64, step: 1e-3 }),
        ("pitchfork", Potential::Pitchfork { r: -0.01 }, FlowOptions { x0: 0.12, t_min: 5.0, horizon: 1000.0, samples: 64, step: 1e-2 }),
    ];
    let mut summary = String::from("quantity,value\n");
    for (name, p, opts) in flows {
        let flow = gradient_flow(p, &opts)?;
        run.write_with(&format!("theory/{name}.csv"), |b| write_flow_csv(b, &flow))?;
        let class = classify_convergence(&flow.times, &flow.distance)?;
        match class.kind {
            Convergence::Exponential { rate } => {
                let _ = writeln!(summary, "{name}.class,exponential\n{name}.rate,{rate}");
            }
            Convergence::PowerLaw { alpha, theta } => {
                let _ = writeln!(summary, "{name}.class,power-law\n{name}.alpha,{alpha}\n{name}.theta,{theta}");
            }
            Convergence::Ambiguous => {
                let _ = writeln!(summary, "{name}.class,ambiguous");
            }
        }
        if p == Potential::Quartic {
            for beta in [1.0, 0.5] {
                let h = holder_observable_check(&flow, Observable::Power(beta))?;
                let _ = writeln!(summary, "holder.beta_{beta}.exponent,{}\nholder.beta_{beta}.bound,{}", h.exponent, h.bound);
            }
        }
    }
    let scan = ising_critical_scan(&log_spaced_r(0.001, 0.05, 20))?;
    run.write_with("theory/ising_scan.csv", |b| write_scan_csv(b, &scan))?;
    let _ = writeln!(summary, "ising.slope,{}", scan.slope);
    run.write("theory/summary.csv", summary.as_bytes())?;
    log.line("theory lab written");
    Ok(())
}

/// Smoothed LLC by step, if estimates exist for the head.
fn read_llc(run: &RunDir, block: usize, head: usize) -> Result<BTreeMap<usize, (String, String)>, CliError> {
    let path = run.path(&llc_csv(block, head));
    let mut out = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(&path) {
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if let (Some(step), Some(l), Some(s)) = (f.first().and_then(|s| s.parse().ok()), f.get(1), f.get(2)) {
                out.insert(step, ((*l).to_owned(), (*s).to_owned()));
            }
        }
    }
    Ok(out)
}

fn report(cfg: &RunConfig, run: &mut RunDir, log: &mut Log) -> Result<(), CliError> {
    let mut summary = String::from("block,head,final_score,class,final_c,exponent,ci_half_width,window_start,window_end,final_lambda\n");
    for b in 0..cfg.model.blocks {
        for h in 0..cfg.model.heads {
            let rows = read_head_csv(run, b, h)?;
            let fits = head_fits(cfg, &rows);
            let llc = read_llc(run, b, h)?;
            let mut out = String::from("step,score,c,abs_c,fit_abs_c,lambda,lambda_smoothed\n");
            for &(step, score, c) in &rows {
                let t = step as f64;
                let fitted = fits
                    .iter()
                    .rev()
                    .find(|f| t >= f.start && t <= f.end)
                    .map_or(String::new(), |f| (f.log_a + f.exponent * t.ln()).exp().to_string());
                let (l, s) = llc.get(&step).cloned().unwrap_or_default();
                let _ = writeln!(out, "{step},{score},{c},{},{fitted},{l},{s}", c.abs());
            }
            run.write(&format!("report/head_{b}_{h}.csv"), out.as_bytes())?;
            let &(_, score, c) = rows.last().ok_or_else(|| CliError::Runtime(format!("{} is empty", head_csv(b, h))))?;
            let last_fit = fits.last();
            let fit_cols = last_fit.map_or(",,,".to_owned(), |f| format!("{},{},{},{}", f.exponent, f.ci_half_width, f.start, f.end));
            let last_lambda = llc.values().next_back().map_or(String::new(), |(l, _)| l.clone());
            let _ = writeln!(
                summary,
                "{b},{h},{score},{},{c},{fit_cols},{last_lambda}",
                classify_head(score, cfg.analysis.bands)
            );
        }
    }
    run.write("report/summary.csv", summary.as_bytes())?;
    log.line("report assembled");
    Ok(())
}
