//! Predicted influence of single-edge edits.
//!
//! `total = param_shift + msg_prop` where
//! `param_shift = (1/N) wᵀ Σ_v (∇L(h_v^G) − ∇L(h_v^{Gε}))`, `w = G⁻¹∇_θ f`,
//! and `msg_prop = −(2𝕀[{u,v}∈E] − 1)(∂f/∂A_uv + ∂f/∂A_vu)`.

mod operators;

use std::collections::HashSet;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{CandidateEdit, EditKind, Graph, WeightedAdjacency};
use crate::metrics::{metric_program, EvalMetric};
use crate::model::{GcnParams, ModelProgram};
use crate::Error;

pub use operators::{
    densify, estimate_scale, lissa_solve, relative_residual, CachedGgn, DenseOperator, GgnOperator,
    HessianOperator, LinearOperator, LissaConfig, LissaSolution,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceBreakdown {
    pub edit: CandidateEdit,
    pub metric: EvalMetric,
    pub param_shift: f64,
    pub msg_prop: f64,
    pub total: f64,
}

impl InfluenceBreakdown {
    pub fn new(edit: CandidateEdit, metric: EvalMetric, param_shift: f64, msg_prop: f64) -> Self {
        Self {
            edit,
            metric,
            param_shift,
            msg_prop,
            total: param_shift + msg_prop,
        }
    }
}

pub fn ggn_vector_product(op: &GgnOperator, v: &[f64]) -> Result<Vec<f64>, Error> {
    op.apply(v)
}

/// Value and gradients of a metric at `θ_s` over an adjacency with
/// candidate entries materialized.
#[derive(Debug, Clone)]
pub struct MetricGradients {
    pub metric: EvalMetric,
    pub value: f64,
    pub theta: Vec<f64>,
    pub adjacency: Vec<f64>,
}

/// Shared state for scoring many edits against one trained model: an
/// adjacency with every candidate pair materialized and the original-graph
/// training-loss gradient, both computed once.
pub struct InfluenceEngine<'a> {
    graph: &'a Graph,
    params: &'a GcnParams,
    adj: WeightedAdjacency,
    loss_prog: ModelProgram,
    base_grad: Vec<f64>,
}

impl<'a> InfluenceEngine<'a> {
    pub fn new(graph: &'a Graph, params: &'a GcnParams, candidates: &[CandidateEdit]) -> Result<Self, Error> {
        let train = graph.train();
        if train.is_empty() {
            return Err(Error::EmptyMask("train"));
        }
        let pairs: Vec<(usize, usize)> = candidates.iter().map(|e| e.pair()).collect();
        for e in candidates {
            if e.u >= graph.num_nodes() || e.v >= graph.num_nodes() || e.u == e.v {
                graph.validate_edit(e)?;
            }
        }
        let adj = graph.adjacency_with_candidates(&pairs);
        let loss_prog = crate::model::loss_program(&params.config, graph, &adj, train, 1.0);
        let (_, base_grad, _) = loss_prog.value_and_grads(&params.theta, &[&adj])?;
        Ok(Self {
            graph,
            params,
            adj,
            loss_prog,
            base_grad,
        })
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn params(&self) -> &GcnParams {
        self.params
    }

    pub fn adjacency(&self) -> &WeightedAdjacency {
        &self.adj
    }

    pub fn num_train(&self) -> f64 {
        self.graph.train().len() as f64
    }

    /// The adjacency at the `ε = −1/N` end point of `edit`.
    pub fn edited_adjacency(&self, edit: &CandidateEdit) -> Result<WeightedAdjacency, Error> {
        self.graph.validate_edit(edit)?;
        self.materialized(edit)?;
        let w = match edit.kind {
            EditKind::Delete => 0.0,
            EditKind::Insert => 1.0,
        };
        Ok(self.adj.with_pair_weight(edit.u, edit.v, w))
    }

    fn materialized(&self, edit: &CandidateEdit) -> Result<(), Error> {
        if !self.adj.is_materialized(edit.u, edit.v) {
            return Err(Error::Config(format!("candidate {edit} is not materialized")));
        }
        Ok(())
    }

    /// `Σ_{v∈train} (∇_θ L(h_v^G) − ∇_θ L(h_v^{Gε}))` at `θ_s`.
    pub fn grad_difference(&self, edit: &CandidateEdit) -> Result<Vec<f64>, Error> {
        let edited = self.edited_adjacency(edit)?;
        let (_, g, _) = self.loss_prog.value_and_grads(&self.params.theta, &[&edited])?;
        Ok(self.base_grad.iter().zip(&g).map(|(a, b)| a - b).collect())
    }

    pub fn metric_gradients(&self, metric: EvalMetric) -> Result<MetricGradients, Error> {
        let prog = metric_program(metric, self.graph, &self.params.config, &self.adj)?;
        let (value, theta, mut adjacency) = prog.value_and_grads(&self.params.theta, &[&self.adj])?;
        Ok(MetricGradients {
            metric,
            value,
            theta,
            adjacency: adjacency.remove(0),
        })
    }

    /// `−(2𝕀[{u,v}∈E] − 1)(∂f/∂A_uv + ∂f/∂A_vu)` read from the cached
    /// adjacency gradient.
    pub fn message_propagation_term(&self, grads: &MetricGradients, edit: &CandidateEdit) -> Result<f64, Error> {
        let p = self.adj.pattern();
        let (Some(a), Some(b)) = (p.entry(edit.u, edit.v), p.entry(edit.v, edit.u)) else {
            return Err(Error::Config(format!("candidate {edit} is not materialized")));
        };
        Ok(-edit.kind.sign() * (grads.adjacency[a] + grads.adjacency[b]))
    }

    /// `w = G⁻¹ ∇_θ f` for the damped GGN.
    pub fn solve_ggn(&self, op: &dyn LinearOperator, grads: &MetricGradients, lissa: &LissaConfig) -> Result<LissaSolution, Error> {
        let sol = lissa_solve(op, &grads.theta, lissa)?;
        if !sol.converged {
            warn!(
                "LiSSA for {} hit the {}-iteration cap without meeting tolerance {:.1e}",
                grads.metric, lissa.max_iters, lissa.tolerance
            );
        }
        Ok(sol)
    }

    pub fn breakdown(
        &self,
        grads: &MetricGradients,
        w: &[f64],
        diff: &[f64],
        edit: &CandidateEdit,
    ) -> Result<InfluenceBreakdown, Error> {
        if w.len() != diff.len() {
            return Err(crate::DiffError::LayoutMismatch { expected: diff.len(), got: w.len() }.into());
        }
        let param_shift = dot(w, diff) / self.num_train();
        let msg_prop = self.message_propagation_term(grads, edit)?;
        Ok(InfluenceBreakdown::new(*edit, grads.metric, param_shift, msg_prop))
    }

    /// The GGN operator at `θ_s`, with its Jacobian cached when small.
    pub fn ggn(&self, damping: f64) -> Result<Box<dyn LinearOperator>, Error> {
        let op = GgnOperator::new(self.params, self.graph, damping)?;
        let c = self.params.config.num_classes;
        let size = self.graph.train().len() * c * self.params.theta.len();
        if size <= 25_000_000 {
            Ok(Box::new(op.with_cached_jacobian()?))
        } else {
            Ok(Box::new(op))
        }
    }

    /// Scores every edit under every metric. Rows are ordered by metric,
    /// then by edit.
    pub fn scan(
        &self,
        metrics: &[EvalMetric],
        edits: &[CandidateEdit],
        lissa: &LissaConfig,
    ) -> Result<Vec<InfluenceBreakdown>, Error> {
        let op = self.ggn(lissa.damping)?;
        let diffs = self.grad_differences(edits)?;
        let mut out = Vec::with_capacity(metrics.len() * edits.len());
        for &metric in metrics {
            let grads = self.metric_gradients(metric)?;
            let sol = self.solve_ggn(op.as_ref(), &grads, lissa)?;
            info!("{metric}: w solved in {} iterations (scale {:.3e})", sol.iterations, sol.scale);
            for (edit, d) in edits.iter().zip(&diffs) {
                out.push(self.breakdown(&grads, &sol.x, d, edit)?);
            }
        }
        Ok(out)
    }

    /// Gradient differences for many edits, in parallel on the current
    /// rayon pool.
    pub fn grad_differences(&self, edits: &[CandidateEdit]) -> Result<Vec<Vec<f64>>, Error> {
        edits.par_iter().map(|e| self.grad_difference(e)).collect()
    }

    /// GIF predictions: `(1/N) ∇_θf ᵀ (H + λI)⁻¹ Σ_v (∇L(h_v) − ∇L(h_v^{−e}))`
    /// with the true training-loss Hessian and no propagation term.
    pub fn gif_scan(
        &self,
        metrics: &[EvalMetric],
        edits: &[CandidateEdit],
        diffs: &[Vec<f64>],
        lissa: &LissaConfig,
    ) -> Result<Vec<(EvalMetric, Vec<f64>)>, Error> {
        let op = HessianOperator::new(self.params, self.graph, lissa.damping)?;
        let mut out = Vec::new();
        for &metric in metrics {
            let grads = self.metric_gradients(metric)?;
            let sol = lissa_solve(&op, &grads.theta, lissa)?;
            debug!("GIF {metric}: {} iterations, converged {}", sol.iterations, sol.converged);
            let n = self.num_train();
            let scores = edits.iter().zip(diffs).map(|(_, d)| dot(&sol.x, d) / n).collect();
            out.push((metric, scores));
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Single-edit gradient difference at `θ_s`.
pub fn grad_difference(params: &GcnParams, graph: &Graph, edit: &CandidateEdit) -> Result<Vec<f64>, Error> {
    graph.validate_edit(edit)?;
    InfluenceEngine::new(graph, params, &[*edit])?.grad_difference(edit)
}

/// Single-edit message-propagation term.
pub fn message_propagation_term(
    params: &GcnParams,
    graph: &Graph,
    metric: EvalMetric,
    edit: &CandidateEdit,
) -> Result<f64, Error> {
    let engine = InfluenceEngine::new(graph, params, &[*edit])?;
    let g = engine.metric_gradients(metric)?;
    engine.message_propagation_term(&g, edit)
}

/// Single-edit influence with a precomputed `w = G⁻¹∇_θ f`.
pub fn influence(
    params: &GcnParams,
    graph: &Graph,
    metric: EvalMetric,
    edit: &CandidateEdit,
    w: &[f64],
) -> Result<InfluenceBreakdown, Error> {
    let engine = InfluenceEngine::new(graph, params, &[*edit])?;
    let g = engine.metric_gradients(metric)?;
    let d = engine.grad_difference(edit)?;
    engine.breakdown(&g, w, &d, edit)
}

/// Single-edit GIF prediction.
pub fn gif_influence(
    params: &GcnParams,
    graph: &Graph,
    metric: EvalMetric,
    edit: &CandidateEdit,
    lissa: &LissaConfig,
) -> Result<f64, Error> {
    let engine = InfluenceEngine::new(graph, params, &[*edit])?;
    let d = engine.grad_difference(edit)?;
    let scores = engine.gif_scan(&[metric], &[*edit], &[d], lissa)?;
    Ok(scores[0].1[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKinds {
    Delete,
    Insert,
    Both,
}

impl std::str::FromStr for EditKinds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "delete" => Ok(EditKinds::Delete),
            "insert" => Ok(EditKinds::Insert),
            "both" => Ok(EditKinds::Both),
            other => Err(Error::Config(format!("unknown edit kinds `{other}`"))),
        }
    }
}

/// Uniform samples without replacement: up to `k` existing edges (Delete)
/// and/or up to `k` absent pairs (Insert). `Both` draws `k` of each kind.
/// Output is sorted by kind, then pair.
pub fn sample_candidates(graph: &Graph, k: usize, kinds: EditKinds, seed: u64) -> Vec<CandidateEdit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if matches!(kinds, EditKinds::Delete | EditKinds::Both) {
        let edges: Vec<(usize, usize)> = graph.edges().collect();
        let take = k.min(edges.len());
        let mut picked: Vec<CandidateEdit> = sample(&mut rng, edges.len(), take)
            .into_iter()
            .map(|i| CandidateEdit::delete(edges[i].0, edges[i].1))
            .collect();
        picked.sort();
        out.extend(picked);
    }
    if matches!(kinds, EditKinds::Insert | EditKinds::Both) {
        let n = graph.num_nodes();
        let total_pairs = n * n.saturating_sub(1) / 2;
        let absent_count = total_pairs - graph.num_edges();
        let take = k.min(absent_count);
        let mut picked: Vec<CandidateEdit> = if total_pairs <= 5_000_000 || take * 2 > absent_count {
            let absent: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                .filter(|&(u, v)| !graph.has_edge(u, v))
                .collect();
            sample(&mut rng, absent.len(), take)
                .into_iter()
                .map(|i| CandidateEdit::insert(absent[i].0, absent[i].1))
                .collect()
        } else {
            let mut seen = HashSet::new();
            while seen.len() < take {
                let u = rng.gen_range(0..n);
                let v = rng.gen_range(0..n);
                if u != v && !graph.has_edge(u, v) {
                    seen.insert((u.min(v), u.max(v)));
                }
            }
            seen.into_iter().map(|(u, v)| CandidateEdit::insert(u, v)).collect()
        };
        picked.sort();
        out.extend(picked);
    }
    out
}

/// Pearson correlation between the two terms across a candidate set.
pub fn component_correlation(rows: &[InfluenceBreakdown]) -> Option<f64> {
    let a: Vec<f64> = rows.iter().map(|r| r.param_shift).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.msg_prop).collect();
    crate::oracle::pearson(&a, &b).ok()
}

pub fn write_influence_csv(path: &Path, rows: &[InfluenceBreakdown]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["u", "v", "kind", "metric", "param_shift", "msg_prop", "total"])?;
    for r in rows {
        w.write_record([
            r.edit.u.to_string(),
            r.edit.v.to_string(),
            r.edit.kind.as_str().to_string(),
            r.metric.name().to_string(),
            format!("{:e}", r.param_shift),
            format!("{:e}", r.msg_prop),
            format!("{:e}", r.total),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
