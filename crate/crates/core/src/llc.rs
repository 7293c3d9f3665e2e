//! Weight-restricted local learning coefficient estimation with SGLD.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::data::{DataError, PairStream};
use crate::metrics::HeadId;
use crate::model::{build_forward, head_param_names, loss_node, BoundaryLayout, ModelConfig, ModelError, ModelParams};
use crate::seeds;
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum LlcError {
    #[error("invalid SGLD configuration: {0}")]
    Config(String),
    #[error("head {block}-{head} does not exist in a model with {blocks} blocks of {heads} heads")]
    NoSuchHead {
        block: usize,
        head: usize,
        blocks: usize,
        heads: usize,
    },
    #[error("non-finite loss at SGLD step {step}")]
    NonFinite { step: usize },
    #[error("all {chains} chains aborted; first at step {first_step}")]
    AllChainsAborted { chains: usize, first_step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldConfig {
    pub epsilon: f64,
    pub gamma: f64,
    /// The gradient factor `nβ`, used as one number.
    pub beta_tilde: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.00075,
            gamma: 1.0,
            beta_tilde: 1385.0,
            batch_size: 256,
            total_steps: 10_000,
            burn_in: 9_000,
            chains: 8,
            seed: 0,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<(), LlcError> {
        let bad = |m: &str| Err(LlcError::Config(m.to_owned()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.beta_tilde > 0.0 && self.beta_tilde.is_finite()) {
            return bad("beta_tilde must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0 < self.burn_in && self.burn_in < self.total_steps) {
            return bad("burn_in must satisfy 0 < burn_in < total_steps");
        }
        if self.chains == 0 {
            return bad("chains must be positive");
        }
        Ok(())
    }
}

/// A stochastic loss with gradient.
///
/// Each chain opens its own stream of minibatches, so no batch is shared
/// between chains or reused within one.
pub trait LossSampler: Sync {
    type Stream: Send;

    fn dim(&self) -> usize;
    fn open(&self, seed: u64) -> Self::Stream;
    /// Minibatch loss at `w` with its gradient written into `grad`.
    fn loss_and_grad(&self, stream: &mut Self::Stream, w: &[f64], grad: &mut [f64]) -> Result<f64, LlcError>;
    /// Loss at `w` on a large fixed reference batch.
    fn reference_loss(&self, w: &[f64], seed: u64) -> Result<f64, LlcError>;
}

/// Outcome of one SGLD chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainResult {
    pub chain: usize,
    /// `L_m(w_t)` for `t = 0..=T`, or up to the abort.
    pub trace: Vec<f64>,
    pub lambda: Option<f64>,
    pub aborted_at: Option<usize>,
    pub max_displacement: f64,
}

/// `β̃ · (mean of trace[burn_in..] − reference)`.
pub fn llc_from_trace(trace: &[f64], burn_in: usize, beta_tilde: f64, reference: f64) -> f64 {
    let tail = &trace[burn_in..];
    beta_tilde * (tail.iter().sum::<f64>() / tail.len() as f64 - reference)
}

/// Run one chain, calling `observe(t, w_t, noise_t)` after every update.
pub fn sgld_chain_observed<S: LossSampler>(
    w0: &[f64],
    sampler: &S,
    cfg: &SgldConfig,
    chain: usize,
    reference: f64,
    mut observe: impl FnMut(usize, &[f64], &[f64]),
) -> ChainResult {
    let d = w0.len();
    let mut rng: ChaCha8Rng = seeds::substream(cfg.seed, &format!("sgld-noise-{chain}"));
    let mut stream = sampler.open(seeds::substream_seed(cfg.seed, &format!("sgld-data-{chain}")));
    let mut w = w0.to_vec();
    let mut grad = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut trace = Vec::with_capacity(cfg.total_steps + 1);
    let mut max_displacement = 0.0f64;
    let sd = cfg.epsilon.sqrt();
    let half = 0.5 * cfg.epsilon;
    for t in 0..=cfg.total_steps {
        let loss = match sampler.loss_and_grad(&mut stream, &w, &mut grad) {
            Ok(l) if l.is_finite() && grad.iter().all(|g| g.is_finite()) => l,
            _ => {
                return ChainResult {
                    chain,
                    trace,
                    lambda: None,
                    aborted_at: Some(t),
                    max_displacement,
                }
            }
        };
        trace.push(loss);
        if t == cfg.total_steps {
            break;
        }
        for k in 0..d {
            noise[k] = sd * rng.sample::<f64, _>(StandardNormal);
            w[k] += -half * (cfg.gamma * (w[k] - w0[k]) + cfg.beta_tilde * grad[k]) + noise[k];
        }
        let disp = w.iter().zip(w0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        max_displacement = max_displacement.max(disp);
        observe(t + 1, &w, &noise);
    }
    ChainResult {
        chain,
        lambda: Some(llc_from_trace(&trace, cfg.burn_in, cfg.beta_tilde, reference)),
        trace,
        aborted_at: None,
        max_displacement,
    }
}

pub fn sgld_chain<S: LossSampler>(w0: &[f64], sampler: &S, cfg: &SgldConfig, chain: usize, reference: f64) -> ChainResult {
    sgld_chain_observed(w0, sampler, cfg, chain, reference, |_, _, _| {})
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlcEstimate {
    pub head: Option<HeadId>,
    pub step: usize,
    pub reference_loss: f64,
    pub chains: Vec<ChainResult>,
    /// Mean over surviving chains.
    pub mean: f64,
    /// At least one chain aborted.
    pub partial: bool,
}

/// Run `cfg.chains` independent chains from `w0`.
pub fn estimate_llc<S: LossSampler>(w0: &[f64], sampler: &S, cfg: &SgldConfig) -> Result<LlcEstimate, LlcError> {
    cfg.validate()?;
    let reference = sampler.reference_loss(w0, seeds::substream_seed(cfg.seed, "sgld-reference"))?;
    if !reference.is_finite() {
        return Err(LlcError::NonFinite { step: 0 });
    }
    let run = |c: usize| sgld_chain(w0, sampler, cfg, c, reference);
    #[cfg(feature = "parallel")]
    let chains: Vec<ChainResult> = {
        use rayon::prelude::*;
        (0..cfg.chains).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let chains: Vec<ChainResult> = (0..cfg.chains).map(run).collect();
    let lambdas: Vec<f64> = chains.iter().filter_map(|c| c.lambda).collect();
    if lambdas.is_empty() {
        let first_step = chains.iter().filter_map(|c| c.aborted_at).min().unwrap_or(0);
        return Err(LlcError::AllChainsAborted {
            chains: cfg.chains,
            first_step,
        });
    }
    Ok(LlcEstimate {
        head: None,
        step: 0,
        reference_loss: reference,
        mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
        partial: lambdas.len() < chains.len(),
        chains,
    })
}

/// Which parameter tensors of a model SGLD may move.
#[derive(Clone, Debug, PartialEq)]
pub struct Restriction {
    names: Vec<String>,
    sizes: Vec<usize>,
}

impl Restriction {
    /// The head's query, key and value projections, plus its output
    /// projection slice when `include_output` is set.
    pub fn for_head(cfg: &ModelConfig, params: &ModelParams, head: HeadId, include_output: bool) -> Result<Self, LlcError> {
        if head.block >= cfg.blocks || head.head >= cfg.heads {
            return Err(LlcError::NoSuchHead {
                block: head.block,
                head: head.head,
                blocks: cfg.blocks,
                heads: cfg.heads,
            });
        }
        let names = head_param_names(head.block, head.head, include_output);
        let sizes = names
            .iter()
            .map(|n| params.get(n).map(Tensor::numel).ok_or_else(|| ModelError::MissingParam(n.clone())))
            .collect::<Result<_, _>>()?;
        Ok(Self { names, sizes })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn restrict(&self, params: &ModelParams) -> Vec<f64> {
        self.gather(|n| params.get(n).expect("restricted tensor present"))
    }

    /// Concatenate the restricted tensors looked up by name. Nothing else is
    /// ever requested from `lookup`.
    pub fn gather<'a>(&self, lookup: impl Fn(&str) -> &'a Tensor<f32>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for n in &self.names {
            out.extend(lookup(n).data().iter().map(|&v| f64::from(v)));
        }
        out
    }

    /// Copy of `base` with the restricted tensors replaced by `w`.
    pub fn reassemble(&self, base: &ModelParams, w: &[f64]) -> ModelParams {
        assert_eq!(w.len(), self.dim(), "free vector length");
        let mut out = base.clone();
        let mut at = 0;
        for (n, &size) in self.names.iter().zip(&self.sizes) {
            let t = out.get_mut(n).expect("restricted tensor present");
            for (dst, &src) in t.data_mut().iter_mut().zip(&w[at..at + size]) {
                *dst = src as f32;
            }
            at += size;
        }
        out
    }
}

/// Training loss of a model as a function of one head's weights, on fresh
/// simulator data.
pub struct ModelSampler {
    pub model: ModelConfig,
    pub layout: BoundaryLayout,
    pub base: ModelParams,
    pub restriction: Restriction,
    pub sim: SimConfig,
    pub batch_size: usize,
    /// Trajectories simulated per refill of a chain's data stream.
    pub pool_trajectories: usize,
    /// Multiple of `batch_size` used for the anchor loss.
    pub reference_multiple: usize,
}

impl ModelSampler {
    fn loss(&self, params: &ModelParams, batch: &crate::data::Batch, grad: Option<&mut [f64]>) -> Result<f64, LlcError> {
        let mut g = Graph::<f32>::new();
        let r = &self.restriction;
        let want_grad = grad.is_some();
        let nodes = build_forward(&mut g, &self.model, &self.layout, params, &batch.x, batch.particle_count, &|n| {
            want_grad && r.contains(n)
        })?;
        let loss = loss_node(&mut g, nodes.pred, &batch.y, batch.samples).map_err(|source| ModelError::Tensor {
            location: "loss".into(),
            source,
        })?;
        let value = f64::from(g.value(loss).data()[0]);
        if let Some(grad) = grad {
            let grads = g.backward(loss).map_err(|source| ModelError::Tensor {
                location: "backward".into(),
                source,
            })?;
            let by_name: std::collections::HashMap<&str, Tensor<f32>> = params
                .names()
                .iter()
                .zip(&nodes.params)
                .filter(|(n, _)| r.contains(n))
                .map(|(n, &id)| (n.as_str(), grads.wrt(id)))
                .collect();
            let flat = r.gather(|n| &by_name[n]);
            grad.copy_from_slice(&flat);
        }
        Ok(value)
    }
}

impl LossSampler for ModelSampler {
    type Stream = PairStream;

    fn dim(&self) -> usize {
        self.restriction.dim()
    }

    fn open(&self, seed: u64) -> PairStream {
        PairStream::new(self.sim.clone(), seed, self.pool_trajectories)
    }

    fn loss_and_grad(&self, stream: &mut PairStream, w: &[f64], grad: &mut [f64]) -> Result<f64, LlcError> {
        let batch = stream.next_batch(self.batch_size)?;
        let params = self.restriction.reassemble(&self.base, w);
        self.loss(&params, &batch, Some(grad))
    }

    fn reference_loss(&self, w: &[f64], seed: u64) -> Result<f64, LlcError> {
        let params = self.restriction.reassemble(&self.base, w);
        let mut stream = self.open(seed);
        let parts = self.reference_multiple.max(1);
        let mut total = 0.0;
        for _ in 0..parts {
            let batch = stream.next_batch(self.batch_size)?;
            total += self.loss(&params, &batch, None)?;
        }
        Ok(total / parts as f64)
    }
}

/// Centered moving average; windows shrink at the edges.
pub fn smooth_series(xs: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "window must be odd");
    let r = window / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(r);
            let s = &xs[lo..(i + r + 1).min(xs.len())];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceReport {
    pub converged: bool,
    /// Slope of a least-squares line through the post-burn-in trace.
    pub slope: f64,
    pub spikes: usize,
    pub suggested_burn_in: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Spikes are points more than 5 MADs above a rolling median of width 25.
pub fn count_spikes(trace: &[f64]) -> usize {
    const W: usize = 12;
    let resid: Vec<f64> = (0..trace.len())
        .map(|i| {
            let mut win = trace[i.saturating_sub(W)..(i + W + 1).min(trace.len())].to_vec();
            trace[i] - median(&mut win)
        })
        .collect();
    let mut r = resid.clone();
    let centre = median(&mut r);
    let mut dev: Vec<f64> = resid.iter().map(|x| (x - centre).abs()).collect();
    let mad = median(&mut dev);
    resid.iter().filter(|&&x| x > 0.0 && x - centre > 5.0 * mad).count()
}

/// Convergence, spike and burn-in diagnostics for one trace.
///
/// The trace counts as converged when the fitted linear drift across the
/// post-burn-in segment is smaller than `tolerance` standard deviations of
/// that segment.
pub fn trace_report(trace: &[f64], burn_in: usize, tolerance: f64) -> TraceReport {
    assert!(!trace.is_empty(), "empty trace");
    let tail = &trace[burn_in.min(trace.len() - 1)..];
    let n = tail.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = tail.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
        syy += (y - my) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sd = (syy / n).sqrt();
    let drift = (slope * n).abs();
    let converged = drift <= tolerance * sd || drift == 0.0;

    let second = &trace[trace.len() / 2..];
    let m2 = second.iter().sum::<f64>() / second.len() as f64;
    let sd2 = (second.iter().map(|x| (x - m2) * (x - m2)).sum::<f64>() / second.len() as f64).sqrt();
    let w = (trace.len() / 20).max(1) | 1;
    let smooth = smooth_series(trace, w);
    let band = 2.0 * sd2;
    let suggested_burn_in = smooth.iter().rposition(|x| (x - m2).abs() > band).map_or(0, |i| i + 1);
    TraceReport {
        converged,
        slope,
        spikes: count_spikes(trace),
        suggested_burn_in,
    }
}

/// `chain,lambda,trace_mean,trace_min,trace_max,aborted_at`.
pub fn write_llc_csv(mut out: impl Write, est: &LlcEstimate) -> std::io::Result<()> {
    writeln!(out, "chain,lambda,trace_mean,trace_min,trace_max,aborted_at")?;
    for c in &est.chains {
        let n = c.trace.len().max(1) as f64;
        let mean = c.trace.iter().sum::<f64>() / n;
        let min = c.trace.iter().copied().fold(f64::INFINITY, f64::min);
        let max = c.trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lambda = c.lambda.map_or(String::new(), |l| l.to_string());
        let aborted = c.aborted_at.map_or(String::new(), |s| s.to_string());
        writeln!(out, "{},{lambda},{mean},{min},{max},{aborted}", c.chain)?;
    }
    Ok(())
}

/// `step,chain,loss` for every recorded point.
pub fn write_trace_csv(mut out: impl Write, est: &LlcEstimate) -> std::io::Result<()> {
    writeln!(out, "step,chain,loss")?;
    for c in &est.chains {
        for (t, l) in c.trace.iter().enumerate() {
            writeln!(out, "{t},{},{l}", c.chain)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic(usize);

    impl LossSampler for Quadratic {
        type Stream = ();
        fn dim(&self) -> usize {
            self.0
        }
        fn open(&self, _: u64) {}
        fn loss_and_grad(&self, _: &mut (), w: &[f64], grad: &mut [f64]) -> Result<f64, LlcError> {
            grad.copy_from_slice(w);
            Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
        }
        fn reference_loss(&self, w: &[f64], _: u64) -> Result<f64, LlcError> {
            Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
        }
    }

    fn small() -> SgldConfig {
        SgldConfig {
            epsilon: 1e-3,
            gamma: 1.0,
            beta_tilde: 100.0,
            batch_size: 1,
            total_steps: 400,
            burn_in: 200,
            chains: 4,
            seed: 9,
        }
    }

    #[test]
    fn frozen_chain_has_zero_lambda() {
        let cfg = SgldConfig { epsilon: 1e-12, ..small() };
        let est = estimate_llc(&[0.0, 0.0], &Quadratic(2), &cfg).unwrap();
        assert!(est.mean.abs() < 1e-6, "{}", est.mean);
        assert_eq!(est.chains.len(), 4);
    }

    #[test]
    fn recompute_and_linearity() {
        let cfg = small();
        let est = estimate_llc(&[0.0; 3], &Quadratic(3), &cfg).unwrap();
        for c in &est.chains {
            let l = llc_from_trace(&c.trace, cfg.burn_in, cfg.beta_tilde, est.reference_loss);
            assert_eq!(Some(l), c.lambda);
            let doubled = llc_from_trace(&c.trace, cfg.burn_in, 2.0 * cfg.beta_tilde, est.reference_loss);
            assert_eq!(doubled, 2.0 * l);
        }
        assert_eq!(est, estimate_llc(&[0.0; 3], &Quadratic(3), &cfg).unwrap());
    }

    #[test]
    fn config_rules() {
        assert!(SgldConfig::default().validate().is_ok());
        assert!(SgldConfig { burn_in: 0, ..small() }.validate().is_err());
        assert!(SgldConfig { burn_in: 400, ..small() }.validate().is_err());
        assert!(SgldConfig { epsilon: 0.0, ..small() }.validate().is_err());
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth_series(&[0.0, 3.0, 0.0], 3), vec![1.5, 1.0, 1.5]);
        assert_eq!(smooth_series(&[1.0, 5.0, 2.0], 1), vec![1.0, 5.0, 2.0]);
        assert_eq!(smooth_series(&[2.0; 6], 5), vec![2.0; 6]);
    }

    #[test]
    fn abort_is_reported() {
        struct Blowup;
        impl LossSampler for Blowup {
            type Stream = usize;
            fn dim(&self) -> usize {
                1
            }
            fn open(&self, _: u64) -> usize {
                0
            }
            fn loss_and_grad(&self, calls: &mut usize, _: &[f64], g: &mut [f64]) -> Result<f64, LlcError> {
                *calls += 1;
                g[0] = 0.0;
                Ok(if *calls > 5 { f64::NAN } else { 1.0 })
            }
            fn reference_loss(&self, _: &[f64], _: u64) -> Result<f64, LlcError> {
                Ok(1.0)
            }
        }
        match estimate_llc(&[0.0], &Blowup, &small()) {
            Err(LlcError::AllChainsAborted { chains: 4, first_step: 5 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
