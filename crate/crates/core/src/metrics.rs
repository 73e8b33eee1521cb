//! Evaluation functionals `f(θ, G)`, each built as a program so both
//! `∇_θ f` and `∂f/∂A` are available.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{Mat, NodeId};
use crate::graph::{Graph, WeightedAdjacency};
use crate::model::{GcnConfig, GcnParams, ModelProgram, ModelProgramBuilder};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EvalMetric {
    ValidationLoss,
    DirichletEnergy,
    /// Summed (or, with `mean`, averaged over all nodes) embedding change
    /// when features at exactly `hops` hops are zeroed.
    OverSquashing { hops: usize, mean: bool },
}

impl EvalMetric {
    pub fn oversquashing(hops: usize) -> Self {
        EvalMetric::OverSquashing { hops, mean: false }
    }

    /// The three metrics with over-squashing at the model depth.
    pub fn all(layers: usize) -> Vec<Self> {
        vec![
            EvalMetric::ValidationLoss,
            EvalMetric::DirichletEnergy,
            EvalMetric::oversquashing(layers),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvalMetric::ValidationLoss => "val-loss",
            EvalMetric::DirichletEnergy => "dirichlet",
            EvalMetric::OverSquashing { .. } => "oversquash",
        }
    }

    /// Parses a CLI metric name; over-squashing uses `layers` hops.
    pub fn parse(name: &str, layers: usize) -> Result<Self, Error> {
        match name {
            "val-loss" => Ok(EvalMetric::ValidationLoss),
            "dirichlet" => Ok(EvalMetric::DirichletEnergy),
            "oversquash" => Ok(EvalMetric::oversquashing(layers)),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected val-loss, dirichlet or oversquash)"
            ))),
        }
    }
}

impl fmt::Display for EvalMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::parse(s, 4)
    }
}

/// Program over `[params…, adjacency]` whose scalar output 0 is the
/// metric. Structural internals (hop sets, validation nodes) come from
/// `graph`; adjacency weights are an input, so `adj` may carry extra
/// zero-weight candidate entries.
pub fn metric_program(
    metric: EvalMetric,
    graph: &Graph,
    config: &GcnConfig,
    adj: &WeightedAdjacency,
) -> Result<ModelProgram, Error> {
    let pattern = adj.pattern().clone();
    let mut mb = ModelProgramBuilder::new(config);
    let a = mb.adjacency(&pattern);
    let x = mb.constant("features", graph.features().clone());
    let s = mb.b.inv_sqrt_degree(a, &pattern);
    let h = *mb.gcn(a, s, x, &pattern).last().unwrap();
    let out = match metric {
        EvalMetric::ValidationLoss => {
            let val = graph.val();
            if val.is_empty() {
                return Err(Error::EmptyMask("validation"));
            }
            let lp = mb.b.log_softmax(h);
            let targets: Vec<(usize, usize)> = val.iter().map(|&v| (v, graph.labels()[v])).collect();
            mb.b.nll(lp, &targets, 1.0 / val.len() as f64)
        }
        EvalMetric::DirichletEnergy => {
            if graph.num_edges() == 0 {
                return Err(Error::Degenerate("Dirichlet energy needs at least one edge".into()));
            }
            let num = mb.b.edge_sq_dist(a, h, &pattern);
            let den = mb.b.sum(a);
            mb.b.div(num, den)
        }
        EvalMetric::OverSquashing { hops, mean } => {
            if hops == 0 {
                return Err(Error::Config("over-squashing needs hops >= 1".into()));
            }
            let sets = graph.all_exact_hop_sets(hops);
            let mut terms: Vec<NodeId> = Vec::new();
            for (v, set) in sets.iter().enumerate() {
                if set.is_empty() {
                    continue;
                }
                let mut masked = graph.features().clone();
                for &u in set {
                    masked.row_mut(u).fill(0.0);
                }
                let xm = mb.constant("masked_features", masked);
                let hm = *mb.gcn(a, s, xm, &pattern).last().unwrap();
                let hv = mb.b.pick_rows(h, &[v]);
                let hmv = mb.b.pick_rows(hm, &[v]);
                let d = mb.b.sub(hv, hmv);
                let n = mb.b.row_norms(d);
                terms.push(mb.b.sum(n));
            }
            let total = if terms.is_empty() {
                let zero = mb.b.scale(h, 0.0);
                mb.b.sum(zero)
            } else {
                mb.b.add_n(&terms)
            };
            if mean {
                mb.b.scale(total, 1.0 / graph.num_nodes() as f64)
            } else {
                total
            }
        }
    };
    Ok(mb.build(&[out]))
}

/// Metric value on `graph`'s own structure.
pub fn evaluate_metric(metric: EvalMetric, params: &GcnParams, graph: &Graph) -> Result<f64, Error> {
    let adj = graph.adjacency();
    metric_program(metric, graph, &params.config, &adj)?.value(&params.theta, &[&adj])
}

pub fn validation_loss(params: &GcnParams, graph: &Graph) -> Result<f64, Error> {
    evaluate_metric(EvalMetric::ValidationLoss, params, graph)
}

pub fn dirichlet_energy(params: &GcnParams, graph: &Graph) -> Result<f64, Error> {
    evaluate_metric(EvalMetric::DirichletEnergy, params, graph)
}

pub fn oversquashing(params: &GcnParams, graph: &Graph, hops: usize) -> Result<f64, Error> {
    evaluate_metric(EvalMetric::oversquashing(hops), params, graph)
}

/// Dirichlet energy of given embeddings under the graph's adjacency.
pub fn dirichlet_of_embeddings(graph: &Graph, h: &Mat<f64>) -> f64 {
    let mut num = 0.0;
    for (u, v) in graph.edges() {
        let d2: f64 = h.row(u).iter().zip(h.row(v)).map(|(a, b)| (a - b) * (a - b)).sum();
        num += 2.0 * d2;
    }
    num / (2 * graph.num_edges()) as f64
}
