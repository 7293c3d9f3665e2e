//! MSE training with Adam, checkpoint schedules and model rollouts.

use std::io::Write;

use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::data::{Batch, DataError, Dataset, DatasetReader, Cursor, PairStream};
use crate::model::{build_forward, loss_node, step, BoundaryLayout, ModelConfig, ModelError, ModelParams};
use crate::sim::{total_energy, ParticleState, SimConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    Data {
        step: usize,
        #[source]
        source: DataError,
    },
    #[error("step {step}: {source}")]
    Model {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("step {step}: loss is not finite ({loss})")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("gradient of {name:?} is not finite")]
    NonFiniteGrad { name: String },
    #[error("rollout diverged at step {step}: state is no longer finite")]
    RolloutDiverged { step: usize, energies: Vec<f64> },
    #[error("rollout failed at step {step}: {source}")]
    RolloutModel {
        step: usize,
        #[source]
        source: ModelError,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Approximate number of log-spaced checkpoints after step 0.
    pub checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 64,
            total_steps: 64000,
            checkpoints: 60,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.checkpoints == 0 {
            return bad("batch_size, total_steps and checkpoints must be positive");
        }
        Ok(())
    }
}

/// Step 0, then roughly `count` log-spaced steps up to and including `total`.
pub fn checkpoint_schedule(total: usize, count: usize) -> Vec<usize> {
    let mut steps = vec![0];
    let count = count.max(1);
    for k in 0..=count {
        let s = (total as f64).powf(k as f64 / count as f64).round() as usize;
        if s > *steps.last().expect("non-empty") {
            steps.push(s.min(total));
        }
    }
    if *steps.last().expect("non-empty") != total {
        steps.push(total);
    }
    steps
}

/// Mean over samples of `‖pred − target‖²` for flat `samples × N × 2D` arrays.
pub fn mse_loss(pred: &[f32], target: &[f32], samples: usize) -> f64 {
    let total: f64 = pred.iter().zip(target).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
    total / samples as f64
}

/// First and second moments for every tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows the parameter order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for ((name, _), g) in params.iter().zip(grads) {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGrad { name: name.to_owned() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (_, w)) in params.tensors_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (wi, &gi)) in w.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            let g = f64::from(gi) + cfg.weight_decay * f64::from(*wi);
            let mi = cfg.beta1 * f64::from(m[i]) + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * f64::from(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *wi = (f64::from(*wi) - update) as f32;
        }
    }
    Ok(())
}

/// Anything that hands out fresh minibatches.
pub trait BatchSource {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError>;
}

/// Sequential reads from an in-memory dataset.
pub struct DatasetSource<'a> {
    pub dataset: &'a Dataset,
    pub cursor: Cursor,
}

impl BatchSource for DatasetSource<'_> {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError> {
        let (b, c) = self.dataset.sample_batch(batch_size, self.cursor)?;
        self.cursor = c;
        Ok(b)
    }
}

impl BatchSource for DatasetReader {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError> {
        DatasetReader::next_batch(self, batch_size)
    }
}

impl BatchSource for PairStream {
    fn next_batch(&mut self, batch_size: usize) -> Result<Batch, DataError> {
        PairStream::next_batch(self, batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ModelParams,
    /// Mean minibatch loss over the (up to) 100 steps before this one.
    pub running_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Minibatch loss of every step, indexed from step 1.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Loss and gradients (in parameter order) on one batch.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    layout: &BoundaryLayout,
    params: &ModelParams,
    batch: &Batch,
) -> Result<(f64, Vec<Tensor<f32>>), ModelError> {
    let mut g = Graph::<f32>::new();
    let nodes = build_forward(&mut g, cfg, layout, params, &batch.x, batch.particle_count, &|_| true)?;
    let loss = loss_node(&mut g, nodes.pred, &batch.y, batch.samples).map_err(|source| ModelError::Tensor {
        location: "loss".into(),
        source,
    })?;
    let value = f64::from(g.value(loss).data()[0]);
    let grads = g.backward(loss).map_err(|source| ModelError::Tensor {
        location: "backward".into(),
        source,
    })?;
    Ok((value, nodes.params.iter().map(|&id| grads.wrt(id)).collect()))
}

/// Train from `params`, emitting checkpoints at every step in `schedule`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut params: ModelParams,
    source: &mut dyn BatchSource,
    schedule: &[usize],
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate().map_err(|source| TrainError::Model { step: 0, source })?;
    let layout = BoundaryLayout::from_config(model_cfg);
    let mut adam = AdamState::new(&params);
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::with_capacity(schedule.len());
    let mut next_ckpt = schedule.iter().peekable();
    let emit = |step: usize, params: &ModelParams, losses: &[f64], checkpoints: &mut Vec<Checkpoint>| {
        let window = &losses[losses.len().saturating_sub(100)..];
        checkpoints.push(Checkpoint {
            step,
            params: params.clone(),
            running_loss: (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64),
        });
    };
    if next_ckpt.next_if_eq(&&0).is_some() {
        emit(0, &params, &losses, &mut checkpoints);
    }
    for step in 1..=cfg.total_steps {
        let batch = source
            .next_batch(cfg.batch_size)
            .map_err(|source| TrainError::Data { step, source })?;
        let (loss, grads) =
            loss_and_grads(model_cfg, &layout, &params, &batch).map_err(|source| TrainError::Model { step, source })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        adam_step(&mut params, &grads, &mut adam, cfg)?;
        losses.push(loss);
        progress(step, loss);
        if next_ckpt.next_if_eq(&&step).is_some() {
            emit(step, &params, &losses, &mut checkpoints);
        }
    }
    Ok(TrainOutcome {
        params,
        losses,
        checkpoints,
    })
}

/// States `x_0 ..= x_steps` produced by feeding the model its own output, and
/// the total energy of each.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub states: Vec<ParticleState>,
    pub energies: Vec<f64>,
}

pub fn rollout(
    model_cfg: &ModelConfig,
    params: &ModelParams,
    sim_cfg: &SimConfig,
    initial: ParticleState,
    steps: usize,
) -> Result<Rollout, TrainError> {
    let layout = BoundaryLayout::from_config(model_cfg);
    let mut energies = vec![total_energy(&initial, sim_cfg)];
    let mut states = vec![initial];
    for k in 1..=steps {
        let next = match step(model_cfg, &layout, params, states.last().expect("non-empty")) {
            Ok(s) => s,
            Err(ModelError::Tensor {
                source: crate::autodiff::TensorError::NonFinite { .. },
                ..
            }) => return Err(TrainError::RolloutDiverged { step: k, energies }),
            Err(source) => return Err(TrainError::RolloutModel { step: k, source }),
        };
        if !next.is_finite() {
            return Err(TrainError::RolloutDiverged { step: k, energies });
        }
        energies.push(total_energy(&next, sim_cfg));
        states.push(next);
    }
    Ok(Rollout { states, energies })
}

pub fn write_energy_csv(mut out: impl Write, energies: &[f64]) -> std::io::Result<()> {
    writeln!(out, "step,energy")?;
    for (k, e) in energies.iter().enumerate() {
        writeln!(out, "{k},{e}")?;
    }
    Ok(())
}

pub fn write_loss_csv(mut out: impl Write, losses: &[f64]) -> std::io::Result<()> {
    writeln!(out, "step,loss")?;
    for (k, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l}", k + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0], 1), 0.0);
        assert!((mse_loss(&[0.1, 0.0, 0.0, 0.0], &[0.0; 4], 1) - 0.01).abs() < 1e-9);
        let pred = [0.0, 0.0, 0.1, 0.1];
        let target = [0.0; 4];
        assert!((mse_loss(&pred, &target, 2) - 0.01).abs() < 1e-9);
    }

    fn scalar_params(v: f32) -> ModelParams {
        ModelParams::from_tensors(vec![("w".into(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig::default();
        for g in [1.0f32, 1000.0] {
            let mut p = scalar_params(0.5);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::vector(vec![g])], &mut st, &cfg).unwrap();
            let dw = f64::from(p.get("w").unwrap().data()[0]) - 0.5;
            assert!((dw + 0.001).abs() < 1e-7, "g={g}: {dw}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::vector(vec![0.0])], &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.5);

        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::vector(vec![1.0])], &mut st, &cfg).unwrap();
        let m_before = st.m[0][0];
        adam_step(&mut p, &[Tensor::vector(vec![0.0])], &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.9 * m_before).abs() < 1e-7);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = scalar_params(0.5);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::vector(vec![f32::NAN])], &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("\"w\""));
    }

    #[test]
    fn schedule_is_strictly_increasing_and_complete() {
        let s = checkpoint_schedule(5000, 60);
        assert_eq!(s[0], 0);
        assert_eq!(*s.last().unwrap(), 5000);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.len() > 40 && s.len() <= 62, "{}", s.len());
        assert_eq!(checkpoint_schedule(1, 60), vec![0, 1]);
    }

    #[test]
    fn untrained_rollout_completes_or_reports_step() {
        let model_cfg = ModelConfig {
            blocks: 1,
            heads: 2,
            embed_dim: 8,
            box_width: 7.0,
            box_height: 14.0,
            ..ModelConfig::default()
        };
        let sim_cfg = SimConfig {
            particle_count: 4,
            box_width: 7.0,
            box_height: 14.0,
            ..SimConfig::default()
        };
        let params = ModelParams::init(&model_cfg, &mut seeds::substream(0, "init"));
        let init = crate::sim::init_random_state(&sim_cfg, &mut seeds::substream(0, "x")).unwrap();
        match rollout(&model_cfg, &params, &sim_cfg, init, 50) {
            Ok(r) => {
                assert_eq!(r.energies.len(), 51);
                assert!(r.energies.iter().all(|e| e.is_finite()));
            }
            Err(TrainError::RolloutDiverged { step, energies }) => assert_eq!(energies.len(), step),
            Err(e) => panic!("{e}"),
        }
    }
}
