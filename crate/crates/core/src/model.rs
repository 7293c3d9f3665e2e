//! The particle transformer.
//!
//! Per particle `x_i = [p_i v_i]`:
//!
//! ```text
//! x⁰_i = W_e2 σ(W_e1 x_i + c_e1) + c_e2 + Σ_j 1(‖p_i − b_j‖ < r)(W_b2 σ(W_b1 b_j + c_b1) + c_b2)
//! xˡ⁺¹ = xˡ + MHA(LN₁(xˡ));  xˡ⁺¹ ← xˡ⁺¹ + MLP(LN₂(xˡ⁺¹))
//! a_i  = W_u LN(x^L_i) + c_u;  v'_i = v_i + Δt(a_i + g);  p'_i = p_i + Δt v'_i
//! ```
//!
//! Attention excludes the query particle itself and has an extra all-zero
//! key/value slot, so a head may assign total attention below one.
//!
//! The forward pass is recorded on an autodiff [`Graph`]; the same code path
//! serves training (`f32`), sampling with a subset of weights free, and
//! gradient checks (`f64`).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, Scalar, Tensor, TensorError};
use crate::sim::ParticleState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{location}: {source}")]
    Tensor {
        location: String,
        #[source]
        source: TensorError,
    },
    #[error("missing parameter tensor {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input has {got} values, expected a multiple of {row} (N × 2D)")]
    InputShape { got: usize, row: usize },
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub spatial_dim: usize,
    pub boundary_radius: f64,
    pub boundary_spacing: f64,
    pub dt: f64,
    /// Magnitude of gravity along −y.
    pub gravity: f64,
    pub box_width: f64,
    pub box_height: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            heads: 8,
            embed_dim: 128,
            spatial_dim: 2,
            boundary_radius: 2.0,
            boundary_spacing: 0.5,
            dt: 0.005,
            gravity: 9.8,
            box_width: 28.0,
            box_height: 14.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.blocks == 0 || self.heads == 0 || self.embed_dim == 0 {
            return bad("blocks, heads and embed_dim must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.spatial_dim != 2 {
            return bad("only spatial_dim = 2 is supported".into());
        }
        for (name, v) in [
            ("boundary_radius", self.boundary_radius),
            ("boundary_spacing", self.boundary_spacing),
            ("dt", self.dt),
            ("box_width", self.box_width),
            ("box_height", self.box_height),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return bad("gravity must be non-negative and finite".into());
        }
        Ok(())
    }

    pub fn gravity_vector(&self) -> [f64; 2] {
        [0.0, -self.gravity]
    }
}

/// Fixed virtual particles along the box walls.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryLayout {
    pub spacing: f64,
    /// Row-major `B × 2`.
    pub points: Vec<[f64; 2]>,
}

impl BoundaryLayout {
    /// Points on all four walls, corners included once, no further apart than `spacing`.
    pub fn for_box(width: f64, height: f64, spacing: f64) -> Self {
        let along = |len: f64| -> Vec<f64> {
            let count = (len / spacing - 1e-9).ceil().max(1.0) as usize;
            (0..=count).map(|i| len * i as f64 / count as f64).collect()
        };
        let xs = along(width);
        let ys = along(height);
        let mut points = Vec::new();
        for &x in &xs {
            points.push([x, 0.0]);
            points.push([x, height]);
        }
        for &y in &ys[1..ys.len() - 1] {
            points.push([0.0, y]);
            points.push([width, y]);
        }
        Self { spacing, points }
    }

    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::for_box(cfg.box_width, cfg.box_height, cfg.boundary_spacing)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Named `f32` weight tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

/// Names and shapes of every tensor for `cfg`, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, d, dh) = (cfg.embed_dim, cfg.spatial_dim, cfg.head_dim());
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("embed.w1".into(), vec![e, 2 * d]),
        ("embed.b1".into(), vec![e]),
        ("embed.w2".into(), vec![e, e]),
        ("embed.b2".into(), vec![e]),
        ("boundary.w1".into(), vec![e, d]),
        ("boundary.b1".into(), vec![e]),
        ("boundary.w2".into(), vec![e, e]),
        ("boundary.b2".into(), vec![e]),
    ];
    for l in 0..cfg.blocks {
        out.push((format!("block{l}.ln1.gain"), vec![e]));
        out.push((format!("block{l}.ln1.bias"), vec![e]));
        for h in 0..cfg.heads {
            for p in ["q", "k", "v"] {
                out.push((format!("block{l}.head{h}.w{p}"), vec![dh, e]));
                out.push((format!("block{l}.head{h}.b{p}"), vec![dh]));
            }
            out.push((format!("block{l}.head{h}.wo"), vec![e, dh]));
        }
        out.push((format!("block{l}.attn.bo"), vec![e]));
        out.push((format!("block{l}.ln2.gain"), vec![e]));
        out.push((format!("block{l}.ln2.bias"), vec![e]));
        out.push((format!("block{l}.mlp.w1"), vec![e, e]));
        out.push((format!("block{l}.mlp.b1"), vec![e]));
        out.push((format!("block{l}.mlp.w2"), vec![e, e]));
        out.push((format!("block{l}.mlp.b2"), vec![e]));
    }
    out.push(("final_ln.gain".into(), vec![e]));
    out.push(("final_ln.bias".into(), vec![e]));
    out.push(("unembed.w".into(), vec![d, e]));
    out.push(("unembed.b".into(), vec![d]));
    out
}

/// Tensors belonging to one attention head: its query/key/value projections
/// and, optionally, its slice of the output projection.
pub fn head_param_names(block: usize, head: usize, include_output: bool) -> Vec<String> {
    let mut names: Vec<String> = ["wq", "bq", "wk", "bk", "wv", "bv"]
        .iter()
        .map(|p| format!("block{block}.head{head}.{p}"))
        .collect();
    if include_output {
        names.push(format!("block{block}.head{head}.wo"));
    }
    names
}

impl ModelParams {
    pub fn from_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Self {
        let index = tensors.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors) = tensors.into_iter().unzip();
        Self { names, tensors, index }
    }

    /// Fan-in scaled uniform weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let tensors = param_layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::full(&shape, 1.0)
                } else if shape.len() == 2 {
                    let bound = (1.0 / shape[1] as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound) as f32)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Self::from_tensors(tensors)
    }

    /// Check that names and shapes match `cfg` exactly.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for (name, shape) in param_layout(cfg) {
            let t = self.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: shape,
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<(), ModelError> {
        let slot = self.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.to_owned()))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_owned(),
                expected: slot.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Attention weights of one head over a batch: `samples × N × N`, real slots only.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub head: usize,
    pub samples: usize,
    pub particles: usize,
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    /// `α_ij` for sample `s`.
    pub fn alpha(&self, s: usize, i: usize, j: usize) -> f32 {
        let n = self.particles;
        self.weights[(s * n + i) * n + j]
    }

    pub fn sample(&self, s: usize) -> &[f32] {
        let nn = self.particles * self.particles;
        &self.weights[s * nn..(s + 1) * nn]
    }
}

/// Node handles for one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// Predicted `[S·N, 2D]` next state.
    pub pred: NodeId,
    /// Predicted `[S·N, D]` acceleration before gravity.
    pub accel: NodeId,
    /// Leaf node of each parameter, in [`ModelParams`] order.
    pub params: Vec<NodeId>,
    /// `(block, head, α)` with α of shape `[S, N, N]`.
    pub attention: Vec<(usize, usize, NodeId)>,
    pub samples: usize,
    pub particles: usize,
}

fn at<'a>(location: impl Fn() -> String + 'a) -> impl Fn(TensorError) -> ModelError + 'a {
    move |source| ModelError::Tensor {
        location: location(),
        source,
    }
}

fn diagonal_mask(n: usize) -> Arc<[bool]> {
    (0..n * n).map(|k| k / n == k % n).collect::<Vec<_>>().into()
}

/// Parameter leaves of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    /// In [`ModelParams`] order.
    pub order: Vec<NodeId>,
    by_name: HashMap<String, NodeId>,
}

impl ParamNodes {
    /// Add every tensor as a leaf. Those for which `trainable` returns true
    /// are differentiable; the rest are constants that backward never visits.
    pub fn add<T: Scalar>(g: &mut Graph<T>, params: &ModelParams, trainable: &dyn Fn(&str) -> bool) -> Self {
        let mut order = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = t.cast::<T>();
            let id = if trainable(name) {
                g.param_named(name, v)
            } else {
                g.constant(v)
            };
            by_name.insert(name.to_owned(), id);
            order.push(id);
        }
        Self { order, by_name }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.by_name[name]
    }
}

/// `x'_i = W_e2 σ(W_e1 x_i + c_e1) + c_e2` for input rows `[rows, 2D]`.
pub fn embed<T: Scalar>(g: &mut Graph<T>, p: &ParamNodes, input: NodeId) -> Result<NodeId, ModelError> {
    let err = at(|| "embedding".to_owned());
    let h = g.matmul_nt(input, p.get("embed.w1")).map_err(&err)?;
    let h = g.add(h, p.get("embed.b1")).map_err(&err)?;
    let h = g.relu(h).map_err(&err)?;
    let h = g.matmul_nt(h, p.get("embed.w2")).map_err(&err)?;
    g.add(h, p.get("embed.b2")).map_err(&err)
}

/// `b'_i = Σ_j 1(‖p_i − b_j‖ < r)(W_b2 σ(W_b1 b_j + c_b1) + c_b2)` for the
/// positions in `x` (rows of `[p v]`). `None` when the layout is empty.
pub fn boundary_embed<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    layout: &BoundaryLayout,
    x: &[f32],
) -> Result<Option<NodeId>, ModelError> {
    let err = at(|| "boundary embedding".to_owned());
    let d = cfg.spatial_dim;
    let rows = x.len() / (2 * d);
    let bcount = layout.len();
    if bcount == 0 {
        return Ok(None);
    }
    let bpos = g.constant(Tensor::from_fn(&[bcount, d], |k| T::lit(layout.points[k / d][k % d])));
    let r2 = cfg.boundary_radius * cfg.boundary_radius;
    let mask = Tensor::from_fn(&[rows, bcount], |k| {
        let (i, j) = (k / bcount, k % bcount);
        let dx = f64::from(x[i * 2 * d]) - layout.points[j][0];
        let dy = f64::from(x[i * 2 * d + 1]) - layout.points[j][1];
        if dx * dx + dy * dy < r2 {
            T::one()
        } else {
            T::zero()
        }
    });
    let mask = g.constant(mask);
    let hb = g.matmul_nt(bpos, p.get("boundary.w1")).map_err(&err)?;
    let hb = g.add(hb, p.get("boundary.b1")).map_err(&err)?;
    let hb = g.relu(hb).map_err(&err)?;
    let hb = g.matmul_nt(hb, p.get("boundary.w2")).map_err(&err)?;
    let hb = g.add(hb, p.get("boundary.b2")).map_err(&err)?;
    g.matmul(mask, hb).map(Some).map_err(&err)
}

/// Self-excluding multihead attention with a zero key/value slot on
/// `x: [samples·N, E]`. Returns the output and each head's `[S, N, N]` weights.
pub fn multihead_attention_zero<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    block: usize,
    x: NodeId,
    samples: usize,
    particles: usize,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    let (n, dh) = (particles, cfg.head_dim());
    let rows = samples * n;
    let diag = diagonal_mask(n);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut out: Option<NodeId> = None;
    let mut alphas = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let err = at(|| format!("block {block} head {hd}"));
        let pre = format!("block{block}.head{hd}");
        let mut project = |w: &str, b: &str| -> Result<NodeId, TensorError> {
            let t = g.matmul_nt(x, p.get(&format!("{pre}.{w}")))?;
            let t = g.add(t, p.get(&format!("{pre}.{b}")))?;
            g.reshape(t, &[samples, n, dh])
        };
        let q = project("wq", "bq").map_err(&err)?;
        let k = project("wk", "bk").map_err(&err)?;
        let v = project("wv", "bv").map_err(&err)?;
        let logits = g.matmul_nt(q, k).map_err(&err)?;
        let logits = g.scale(logits, scale).map_err(&err)?;
        let logits = g.mask_fill(logits, diag.clone(), T::neg_infinity()).map_err(&err)?;
        let alpha = g.softmax(logits, true).map_err(&err)?;
        alphas.push(alpha);
        let o = g.matmul(alpha, v).map_err(&err)?;
        let o = g.reshape(o, &[rows, dh]).map_err(&err)?;
        let o = g.matmul_nt(o, p.get(&format!("{pre}.wo"))).map_err(&err)?;
        out = Some(match out {
            None => o,
            Some(acc) => g.add(acc, o).map_err(&err)?,
        });
    }
    let err = at(|| format!("block {block} attention output"));
    let out = g.add(out.expect("at least one head"), p.get(&format!("block{block}.attn.bo"))).map_err(&err)?;
    Ok((out, alphas))
}

/// Pre-norm residual block: `x + MHA(LN₁ x)`, then `+ MLP(LN₂ ·)`.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    block: usize,
    x: NodeId,
    samples: usize,
    particles: usize,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    let l = block;
    let err = at(|| format!("block {l}"));
    let u = affine_ln(g, x, p.get(&format!("block{l}.ln1.gain")), p.get(&format!("block{l}.ln1.bias"))).map_err(&err)?;
    let (mha, alphas) = multihead_attention_zero(g, p, cfg, l, u, samples, particles)?;
    let x = g.add(x, mha).map_err(&err)?;
    let err = at(|| format!("block {l} mlp"));
    let u = affine_ln(g, x, p.get(&format!("block{l}.ln2.gain")), p.get(&format!("block{l}.ln2.bias"))).map_err(&err)?;
    let m = g.matmul_nt(u, p.get(&format!("block{l}.mlp.w1"))).map_err(&err)?;
    let m = g.add(m, p.get(&format!("block{l}.mlp.b1"))).map_err(&err)?;
    let m = g.relu(m).map_err(&err)?;
    let m = g.matmul_nt(m, p.get(&format!("block{l}.mlp.w2"))).map_err(&err)?;
    let m = g.add(m, p.get(&format!("block{l}.mlp.b2"))).map_err(&err)?;
    Ok((g.add(x, m).map_err(&err)?, alphas))
}

/// `a = W_u LN(x) + c_u`, then one semi-implicit Euler step from `pos`, `vel`
/// (each `[rows, D]`). Returns `([p' v'], a)`.
pub fn unembed_and_integrate<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamNodes,
    cfg: &ModelConfig,
    x: NodeId,
    pos: NodeId,
    vel: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let err = at(|| "unembedding".to_owned());
    let f = affine_ln(g, x, p.get("final_ln.gain"), p.get("final_ln.bias")).map_err(&err)?;
    let a = g.matmul_nt(f, p.get("unembed.w")).map_err(&err)?;
    let accel = g.add(a, p.get("unembed.b")).map_err(&err)?;

    let err = at(|| "integration".to_owned());
    let grav = g.constant(Tensor::vector(cfg.gravity_vector().iter().map(|&v| T::lit(v)).collect()));
    let total = g.add(accel, grav).map_err(&err)?;
    let dv = g.scale(total, T::lit(cfg.dt)).map_err(&err)?;
    let new_vel = g.add(vel, dv).map_err(&err)?;
    let dp = g.scale(new_vel, T::lit(cfg.dt)).map_err(&err)?;
    let new_pos = g.add(pos, dp).map_err(&err)?;
    let pred = g.concat(&[new_pos, new_vel]).map_err(&err)?;
    Ok((pred, accel))
}

/// Record the full forward pass for a batch `x` of `samples × N × 2D` values.
///
/// Parameters for which `trainable` returns true become differentiable
/// leaves; the rest are constants, so backward never visits them.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    layout: &BoundaryLayout,
    params: &ModelParams,
    x: &[f32],
    particles: usize,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<ForwardNodes, ModelError> {
    cfg.validate()?;
    params.check(cfg)?;
    let d = cfg.spatial_dim;
    let row = 2 * d * particles;
    if particles == 0 || x.is_empty() || !x.len().is_multiple_of(row) {
        return Err(ModelError::InputShape { got: x.len(), row });
    }
    let n = particles;
    let rows = x.len() / (2 * d);
    let samples = rows / n;

    let p = ParamNodes::add(g, params, trainable);
    let lit = |v: f32| T::lit(f64::from(v));
    let input = g.constant(Tensor::new(vec![rows, 2 * d], x.iter().map(|&v| lit(v)).collect()).expect("rows"));
    let pos = g.constant(Tensor::from_fn(&[rows, d], |k| lit(x[(k / d) * 2 * d + k % d])));
    let vel = g.constant(Tensor::from_fn(&[rows, d], |k| lit(x[(k / d) * 2 * d + d + k % d])));

    let mut xs = embed(g, &p, input)?;
    if let Some(b) = boundary_embed(g, &p, cfg, layout, x)? {
        xs = g.add(xs, b).map_err(at(|| "boundary embedding".to_owned()))?;
    }
    let mut attention = Vec::with_capacity(cfg.blocks * cfg.heads);
    for l in 0..cfg.blocks {
        let (out, alphas) = transformer_block(g, &p, cfg, l, xs, samples, n)?;
        xs = out;
        attention.extend(alphas.into_iter().enumerate().map(|(h, a)| (l, h, a)));
    }
    let (pred, accel) = unembed_and_integrate(g, &p, cfg, xs, pos, vel)?;
    Ok(ForwardNodes {
        pred,
        accel,
        params: p.order,
        attention,
        samples,
        particles: n,
    })
}

fn affine_ln<T: Scalar>(g: &mut Graph<T>, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
    let y = g.layer_norm(x)?;
    let y = g.mul(y, gain)?;
    g.add(y, bias)
}

/// Mean over samples of the squared Frobenius norm of `pred − target`.
pub fn loss_node<T: Scalar>(g: &mut Graph<T>, pred: NodeId, target: &[f32], samples: usize) -> Result<NodeId, TensorError> {
    let shape = g.value(pred).shape().to_vec();
    let y = g.constant(Tensor::new(shape, target.iter().map(|&v| T::lit(f64::from(v))).collect())?);
    let se = g.squared_error(pred, y)?;
    let total = g.sum(se)?;
    g.scale(total, T::lit(1.0 / samples as f64))
}

/// Output of [`predict`].
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `samples × N × 2D`.
    pub states: Vec<f32>,
    pub attention: Option<Vec<AttentionRecord>>,
}

/// Evaluate the model in `f32` on a batch of `samples × N × 2D` inputs.
pub fn predict(
    cfg: &ModelConfig,
    layout: &BoundaryLayout,
    params: &ModelParams,
    x: &[f32],
    particles: usize,
    capture: bool,
) -> Result<Prediction, ModelError> {
    let mut g = Graph::<f32>::new();
    let nodes = build_forward(&mut g, cfg, layout, params, x, particles, &|_| false)?;
    let states = g.value(nodes.pred).data().to_vec();
    let attention = capture.then(|| {
        nodes
            .attention
            .iter()
            .map(|&(block, head, id)| AttentionRecord {
                block,
                head,
                samples: nodes.samples,
                particles,
                weights: g.value(id).data().to_vec(),
            })
            .collect()
    });
    Ok(Prediction { states, attention })
}

/// One model step on a single state.
pub fn step(
    cfg: &ModelConfig,
    layout: &BoundaryLayout,
    params: &ModelParams,
    state: &ParticleState,
) -> Result<ParticleState, ModelError> {
    let out = predict(cfg, layout, params, &state.to_input_rows(), state.len(), false)?;
    Ok(ParticleState::from_input_rows(state.dim, &out.states).expect("model output shape"))
}

pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&checkpoint_bytes(cfg, params))?;
    w.flush()?;
    Ok(())
}

/// Serialized checkpoint.
pub fn checkpoint_bytes(cfg: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 4 * params.num_weights());
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.blocks, cfg.heads, cfg.embed_dim, cfg.spatial_dim] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [
        cfg.boundary_radius,
        cfg.boundary_spacing,
        cfg.dt,
        cfg.gravity,
        cfg.box_width,
        cfg.box_height,
    ] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &dim in t.shape() {
            b.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize, what: &str) -> Result<&[u8], ModelError> {
        if self.bytes.len() - self.offset < len {
            return Err(ModelError::Format {
                offset: self.offset as u64,
                message: format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams), ModelError> {
    let mut c = Cursor { bytes, offset: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Format {
            offset: 0,
            message: "bad magic, expected \"PTC1\"".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let cfg = ModelConfig {
        blocks: c.u32("blocks")? as usize,
        heads: c.u32("heads")? as usize,
        embed_dim: c.u32("embed_dim")? as usize,
        spatial_dim: c.u32("spatial_dim")? as usize,
        boundary_radius: c.f64("boundary_radius")?,
        boundary_spacing: c.f64("boundary_spacing")?,
        dt: c.f64("dt")?,
        gravity: c.f64("gravity")?,
        box_width: c.f64("box_width")?,
        box_height: c.f64("box_height")?,
    };
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let start = c.offset as u64;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| ModelError::Format {
                offset: start + 4,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank).map(|_| c.u32("dims").map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let data = c
            .take(4 * numel, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data).expect("shape matches data")));
    }
    if c.offset != bytes.len() {
        return Err(ModelError::Format {
            offset: c.offset as u64,
            message: format!("{} trailing bytes", bytes.len() - c.offset),
        });
    }
    let params = ModelParams::from_tensors(tensors);
    cfg.validate()?;
    params.check(&cfg)?;
    Ok((cfg, params))
}
