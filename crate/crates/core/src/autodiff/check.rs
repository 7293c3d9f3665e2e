//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::TensorError;

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the worst relative error.
    pub tolerance: f64,
    /// Check at most this many entries per leaf (chosen at random); `None`
    /// checks every entry.
    pub max_entries_per_leaf: Option<usize>,
    pub seed: u64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
    /// where `floor = relative_floor · max |analytic|` over all checked leaves.
    pub relative_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_entries_per_leaf: None,
            seed: 0,
            relative_floor: 1e-3,
        }
    }
}

/// The entry with the largest discrepancy.
#[derive(Clone, Debug)]
pub struct GradCheckOffender {
    pub node: NodeId,
    pub name: Option<String>,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub worst: Option<GradCheckOffender>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (max rel error {:.3e} over {} entries",
            if self.passed { "pass" } else { "FAIL" },
            self.max_rel_error,
            self.entries_checked
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{}]: analytic {:.6e} numeric {:.6e}",
                w.name.clone().unwrap_or_else(|| format!("node#{}", w.node.index())),
                w.index,
                w.analytic,
                w.numeric
            )?;
        }
        write!(f, ")")
    }
}

/// Compare `backward` against symmetric finite differences on every
/// differentiable leaf of `graph`.
pub fn grad_check(graph: &Graph<f64>, root: NodeId, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError> {
    let grads = graph.backward(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    for leaf in graph.params() {
        let base = graph.value(leaf).clone();
        let analytic = grads.wrt(leaf);
        let indices: Vec<usize> = match opts.max_entries_per_leaf {
            Some(k) if k < base.numel() => {
                let mut v = sample(&mut rng, base.numel(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..base.numel()).collect(),
        };
        for index in indices {
            let mut plus = base.clone();
            plus.data_mut()[index] += opts.step;
            let mut minus = base.clone();
            minus.data_mut()[index] -= opts.step;
            let fp = graph.replay(root, &[(leaf, &plus)])?.data()[0];
            let fm = graph.replay(root, &[(leaf, &minus)])?.data()[0];
            let numeric = (fp - fm) / (2.0 * opts.step);
            rows.push((leaf, index, analytic.data()[index], numeric));
        }
    }
    let scale = rows.iter().map(|r| r.2.abs()).fold(0.0f64, f64::max);
    let floor = (opts.relative_floor * scale).max(f64::MIN_POSITIVE);
    let mut worst: Option<GradCheckOffender> = None;
    for &(node, index, analytic, numeric) in &rows {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel_error = (analytic - numeric).abs() / denom;
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(GradCheckOffender {
                node,
                name: graph.name(node).map(str::to_owned),
                index,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        max_rel_error,
        entries_checked: rows.len(),
        passed: max_rel_error < opts.tolerance,
        worst,
    })
}
