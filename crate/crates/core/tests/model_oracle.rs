//! The graph-built forward pass checked against a plain-loop re-implementation
//! and against the structural properties the architecture guarantees.

use particle_heads::autodiff::{grad_check, GradCheckOptions, Graph, Tensor};
use particle_heads::model::{
    boundary_embed, build_forward, embed, loss_node, predict, transformer_block, BoundaryLayout, ModelConfig, ModelParams,
    ParamNodes,
};
use particle_heads::seeds;
use particle_heads::sim::{init_random_state, SimConfig};
use proptest::prelude::*;
use rand::Rng;

fn cfg(blocks: usize, heads: usize, e: usize) -> ModelConfig {
    ModelConfig {
        blocks,
        heads,
        embed_dim: e,
        box_width: 7.0,
        box_height: 14.0,
        ..ModelConfig::default()
    }
}

/// Random params with non-trivial layer-norm affines and biases.
fn random_params(c: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = seeds::substream(seed, "oracle-params");
    let mut p = ModelParams::init(c, &mut rng);
    for (_, t) in p.tensors_mut() {
        let shape = t.shape().to_vec();
        let base = t.data().to_vec();
        *t = Tensor::from_fn(&shape, |k| base[k] + rng.random_range(-0.3f32..0.3));
    }
    p
}

fn states(n: usize, samples: usize, seed: u64) -> Vec<f32> {
    let sim = SimConfig {
        particle_count: n,
        box_width: 7.0,
        box_height: 14.0,
        ..SimConfig::default()
    };
    let mut rng = seeds::substream(seed, "oracle-states");
    (0..samples)
        .flat_map(|_| init_random_state(&sim, &mut rng).unwrap().to_input_rows())
        .collect()
}

fn w(p: &ModelParams, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = p.get(name).unwrap();
    (t.shape().to_vec(), t.data().iter().map(|&v| f64::from(v)).collect())
}

/// y = W x + b for W stored `[out, in]`.
fn affine(p: &ModelParams, wn: &str, bn: Option<&str>, x: &[f64]) -> Vec<f64> {
    let (shape, wd) = w(p, wn);
    let b = bn.map(|b| w(p, b).1);
    (0..shape[0])
        .map(|o| {
            let s: f64 = (0..shape[1]).map(|i| wd[o * shape[1] + i] * x[i]).sum();
            s + b.as_ref().map_or(0.0, |b| b[o])
        })
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn ln(p: &ModelParams, prefix: &str, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let g = w(p, &format!("{prefix}.gain")).1;
    let b = w(p, &format!("{prefix}.bias")).1;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

struct OracleOut {
    next: Vec<Vec<f64>>,
    alpha: Vec<Vec<Vec<f64>>>,
}

/// One sample, straight-line f64 evaluation.
fn oracle(c: &ModelConfig, p: &ModelParams, state: &[f32]) -> OracleOut {
    let n = state.len() / 4;
    let e = c.embed_dim;
    let dh = c.head_dim();
    let layout = BoundaryLayout::from_config(c);
    let xs: Vec<Vec<f64>> = (0..n).map(|i| state[4 * i..4 * i + 4].iter().map(|&v| f64::from(v)).collect()).collect();
    let hb: Vec<Vec<f64>> = layout
        .points
        .iter()
        .map(|b| affine(p, "boundary.w2", Some("boundary.b2"), &relu(affine(p, "boundary.w1", Some("boundary.b1"), b))))
        .collect();
    let mut h: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut v = affine(p, "embed.w2", Some("embed.b2"), &relu(affine(p, "embed.w1", Some("embed.b1"), x)));
            for (j, b) in layout.points.iter().enumerate() {
                if (x[0] - b[0]).powi(2) + (x[1] - b[1]).powi(2) < c.boundary_radius.powi(2) {
                    for k in 0..e {
                        v[k] += hb[j][k];
                    }
                }
            }
            v
        })
        .collect();
    let mut alpha = Vec::new();
    for l in 0..c.blocks {
        let u: Vec<Vec<f64>> = h.iter().map(|x| ln(p, &format!("block{l}.ln1"), x)).collect();
        let mut attn_out = vec![w(p, &format!("block{l}.attn.bo")).1; n];
        for hd in 0..c.heads {
            let pre = format!("block{l}.head{hd}");
            let q: Vec<_> = u.iter().map(|x| affine(p, &format!("{pre}.wq"), Some(&format!("{pre}.bq")), x)).collect();
            let k: Vec<_> = u.iter().map(|x| affine(p, &format!("{pre}.wk"), Some(&format!("{pre}.bk")), x)).collect();
            let v: Vec<_> = u.iter().map(|x| affine(p, &format!("{pre}.wv"), Some(&format!("{pre}.bv")), x)).collect();
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let denom = 1.0 + (0..n).filter(|&j| j != i).map(|j| logits[j].exp()).sum::<f64>();
                for j in 0..n {
                    if j != i {
                        a[i][j] = logits[j].exp() / denom;
                    }
                }
                let o: Vec<f64> = (0..dh).map(|t| (0..n).map(|j| a[i][j] * v[j][t]).sum()).collect();
                let proj = affine(p, &format!("{pre}.wo"), None, &o);
                for kk in 0..e {
                    attn_out[i][kk] += proj[kk];
                }
            }
            alpha.push(a);
        }
        for i in 0..n {
            for kk in 0..e {
                h[i][kk] += attn_out[i][kk];
            }
            let m = affine(
                p,
                &format!("block{l}.mlp.w2"),
                Some(&format!("block{l}.mlp.b2")),
                &relu(affine(p, &format!("block{l}.mlp.w1"), Some(&format!("block{l}.mlp.b1")), &ln(p, &format!("block{l}.ln2"), &h[i]))),
            );
            for kk in 0..e {
                h[i][kk] += m[kk];
            }
        }
    }
    let next = (0..n)
        .map(|i| {
            let a = affine(p, "unembed.w", Some("unembed.b"), &ln(p, "final_ln", &h[i]));
            let g = c.gravity_vector();
            let v: Vec<f64> = (0..2).map(|d| xs[i][2 + d] + c.dt * (a[d] + g[d])).collect();
            let pos: Vec<f64> = (0..2).map(|d| xs[i][d] + c.dt * v[d]).collect();
            vec![pos[0], pos[1], v[0], v[1]]
        })
        .collect();
    OracleOut { next, alpha }
}

#[test]
fn forward_matches_straight_line_oracle() {
    let c = cfg(2, 2, 16);
    let p = random_params(&c, 1);
    let n = 6;
    let x = states(n, 3, 2);
    let layout = BoundaryLayout::from_config(&c);
    let mut g = Graph::<f64>::new();
    let nodes = build_forward(&mut g, &c, &layout, &p, &x, n, &|_| false).unwrap();
    let pred = g.value(nodes.pred).data();
    for s in 0..3 {
        let o = oracle(&c, &p, &x[s * n * 4..(s + 1) * n * 4]);
        for i in 0..n {
            for k in 0..4 {
                let got = pred[(s * n + i) * 4 + k];
                assert!((got - o.next[i][k]).abs() < 1e-9, "sample {s} particle {i}: {got} vs {}", o.next[i][k]);
            }
        }
        for (idx, &(_, _, id)) in nodes.attention.iter().enumerate() {
            let a = g.value(id).data();
            for i in 0..n {
                for j in 0..n {
                    assert!((a[(s * n + i) * n + j] - o.alpha[idx][i][j]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn f32_forward_tracks_the_oracle() {
    let c = cfg(2, 4, 32);
    let p = random_params(&c, 3);
    let x = states(16, 1, 4);
    let out = predict(&c, &BoundaryLayout::from_config(&c), &p, &x, 16, false).unwrap();
    let o = oracle(&c, &p, &x);
    for i in 0..16 {
        for k in 0..4 {
            assert!((f64::from(out.states[i * 4 + k]) - o.next[i][k]).abs() < 1e-5);
        }
    }
}

#[test]
fn zero_weights_collapse_embedding_to_bias() {
    let c = cfg(1, 2, 8);
    let mut p = random_params(&c, 5);
    p.set("embed.w2", Tensor::zeros(&[8, 8])).unwrap();
    let bias: Vec<f32> = (0..8).map(|k| k as f32 * 0.1).collect();
    p.set("embed.b2", Tensor::vector(bias.clone())).unwrap();
    let mut g = Graph::<f64>::new();
    let pn = ParamNodes::add(&mut g, &p, &|_| false);
    let input = g.constant(Tensor::new(vec![3, 4], vec![1.0, 2.0, 0.1, 0.2, 5.0, 6.0, -1.0, 0.0, 3.0, 3.0, 0.0, 0.5]).unwrap());
    let out = embed(&mut g, &pn, input).unwrap();
    for row in g.value(out).data().chunks(8) {
        for (a, b) in row.iter().zip(&bias) {
            assert_eq!(*a, f64::from(*b));
        }
    }
}

#[test]
fn embedding_is_per_particle() {
    let c = cfg(1, 2, 8);
    let p = random_params(&c, 9);
    let x = states(5, 1, 3);
    let perm = [3usize, 0, 4, 1, 2];
    let xp: Vec<f32> = perm.iter().flat_map(|&s| x[4 * s..4 * s + 4].to_vec()).collect();
    let run = |x: &[f32]| {
        let mut g = Graph::<f64>::new();
        let pn = ParamNodes::add(&mut g, &p, &|_| false);
        let input = g.constant(Tensor::new(vec![5, 4], x.iter().map(|&v| f64::from(v)).collect()).unwrap());
        let out = embed(&mut g, &pn, input).unwrap();
        g.value(out).data().to_vec()
    };
    let (a, b) = (run(&x), run(&xp));
    for (i, &s) in perm.iter().enumerate() {
        assert_eq!(&b[8 * i..8 * i + 8], &a[8 * s..8 * s + 8]);
    }
}

fn boundary_rows(c: &ModelConfig, p: &ModelParams, x: &[f32]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let pn = ParamNodes::add(&mut g, p, &|_| false);
    let out = boundary_embed(&mut g, &pn, c, &BoundaryLayout::from_config(c), x).unwrap().unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn boundary_term_is_empty_at_the_centre_and_counts_wall_points() {
    let c = ModelConfig {
        box_width: 28.0,
        box_height: 14.0,
        ..cfg(1, 2, 8)
    };
    let layout = BoundaryLayout::from_config(&c);
    let mut p = random_params(&c, 6);
    assert!(boundary_rows(&c, &p, &[14.0, 7.0, 0.0, 0.0]).iter().all(|&v| v == 0.0));

    p.set("boundary.w2", Tensor::zeros(&[8, 8])).unwrap();
    p.set("boundary.b2", Tensor::full(&[8], 0.5)).unwrap();
    let pos = [1.0f32, 1.0];
    let k = layout
        .points
        .iter()
        .filter(|b| (f64::from(pos[0]) - b[0]).powi(2) + (f64::from(pos[1]) - b[1]).powi(2) < 4.0)
        .count();
    assert!(k > 0);
    assert!(boundary_rows(&c, &p, &[pos[0], pos[1], 0.0, 0.0]).iter().all(|&v| v == 0.5 * k as f64));
}

#[test]
fn boundary_term_matches_brute_force_loop() {
    let c = cfg(1, 2, 8);
    let p = random_params(&c, 10);
    let layout = BoundaryLayout::from_config(&c);
    let x = states(8, 1, 11);
    let got = boundary_rows(&c, &p, &x);
    for i in 0..8 {
        let mut want = [0.0f64; 8];
        for b in &layout.points {
            let (dx, dy) = (f64::from(x[4 * i]) - b[0], f64::from(x[4 * i + 1]) - b[1]);
            if (dx * dx + dy * dy).sqrt() < c.boundary_radius {
                let h = affine(&p, "boundary.w2", Some("boundary.b2"), &relu(affine(&p, "boundary.w1", Some("boundary.b1"), b)));
                for k in 0..8 {
                    want[k] += h[k];
                }
            }
        }
        for k in 0..8 {
            assert!((got[8 * i + k] - want[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_logits_split_mass_with_the_zero_slot() {
    let c = cfg(1, 2, 8);
    let mut p = random_params(&c, 12);
    for h in 0..2 {
        p.set(&format!("block0.head{h}.wq"), Tensor::zeros(&[4, 8])).unwrap();
        p.set(&format!("block0.head{h}.bq"), Tensor::zeros(&[4])).unwrap();
    }
    let out = predict(&c, &BoundaryLayout::from_config(&c), &p, &states(3, 1, 1), 3, true).unwrap();
    for rec in out.attention.unwrap() {
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((rec.alpha(0, i, j) - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn block_with_zeroed_outputs_is_identity() {
    let c = cfg(1, 2, 8);
    let mut p = random_params(&c, 13);
    for h in 0..2 {
        p.set(&format!("block0.head{h}.wo"), Tensor::zeros(&[8, 4])).unwrap();
    }
    p.set("block0.attn.bo", Tensor::zeros(&[8])).unwrap();
    p.set("block0.mlp.w2", Tensor::zeros(&[8, 8])).unwrap();
    p.set("block0.mlp.b2", Tensor::zeros(&[8])).unwrap();
    let mut g = Graph::<f64>::new();
    let pn = ParamNodes::add(&mut g, &p, &|_| false);
    let x = g.constant(Tensor::from_fn(&[6, 8], |k| (k as f64 * 0.37).sin()));
    let (y, _) = transformer_block(&mut g, &pn, &c, 0, x, 2, 3).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn loss_gradient_passes_grad_check() {
    let c = cfg(1, 2, 8);
    let p = random_params(&c, 7);
    let n = 4;
    let x = states(n, 2, 8);
    let y: Vec<f32> = x.iter().map(|v| v + 0.01).collect();
    let mut g = Graph::<f64>::new();
    let nodes = build_forward(&mut g, &c, &BoundaryLayout::from_config(&c), &p, &x, n, &|_| true).unwrap();
    let loss = loss_node(&mut g, nodes.pred, &y, 2).unwrap();
    let report = grad_check(&g, loss, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_equivariance_and_attention_invariants(seed in 0u64..1000, shift in 1usize..7) {
        let c = cfg(2, 2, 16);
        let p = random_params(&c, seed);
        let n = 7;
        let x = states(n, 1, seed + 1);
        let perm: Vec<usize> = (0..n).map(|i| (i * 3 + shift) % n).collect();
        let xp: Vec<f32> = perm.iter().flat_map(|&s| x[4 * s..4 * s + 4].to_vec()).collect();
        let layout = BoundaryLayout::from_config(&c);
        let a = predict(&c, &layout, &p, &x, n, true).unwrap();
        let b = predict(&c, &layout, &p, &xp, n, true).unwrap();
        for (i, &s) in perm.iter().enumerate() {
            for k in 0..4 {
                prop_assert!((b.states[4 * i + k] - a.states[4 * s + k]).abs() <= 1e-5);
            }
        }
        for rec in a.attention.unwrap() {
            for i in 0..n {
                prop_assert_eq!(rec.alpha(0, i, i), 0.0);
                let row: f32 = (0..n).map(|j| rec.alpha(0, i, j)).sum();
                prop_assert!(row > 0.0 && row < 1.0);
                prop_assert!((0..n).all(|j| (0.0..=1.0).contains(&rec.alpha(0, i, j))));
            }
        }
        let plain = predict(&c, &layout, &p, &x, n, false).unwrap();
        prop_assert_eq!(plain.states, a.states);
    }

    #[test]
    fn integrator_identity_holds_bitwise(seed in 0u64..1000) {
        let c = cfg(1, 2, 8);
        let p = random_params(&c, seed);
        let x = states(5, 2, seed);
        let out = predict(&c, &BoundaryLayout::from_config(&c), &p, &x, 5, false).unwrap();
        let dt = c.dt as f32;
        for (xi, yi) in x.chunks(4).zip(out.states.chunks(4)) {
            for d in 0..2 {
                prop_assert_eq!(yi[d].to_bits(), (xi[d] + dt * yi[2 + d]).to_bits());
            }
        }
    }
}
