//! Full-batch training, the edge-edit PBRF fine-tuner and plain retraining.

use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::diff::Mat;
use crate::graph::{CandidateEdit, Graph, WeightedAdjacency};
use crate::model::{accuracy, init_params, softmax, GcnConfig, GcnParams, ModelProgram, ModelProgramBuilder};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            weight_decay: 1e-4,
            epochs: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GcnParams,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

/// Training-loss program with the validation loss and logits as extra
/// outputs.
struct TrainProgram {
    prog: ModelProgram,
    has_val: bool,
}

impl TrainProgram {
    fn new(config: &GcnConfig, graph: &Graph, adj: &WeightedAdjacency) -> Result<Self, Error> {
        let train = graph.train();
        if train.is_empty() {
            return Err(Error::EmptyMask("train"));
        }
        let mut mb = ModelProgramBuilder::new(config);
        let a = mb.adjacency(adj.pattern());
        let x = mb.constant("features", graph.features().clone());
        let s = mb.b.inv_sqrt_degree(a, adj.pattern());
        let logits = *mb.gcn(a, s, x, adj.pattern()).last().unwrap();
        let lp = mb.b.log_softmax(logits);
        let targets = |nodes: &[usize]| nodes.iter().map(|&v| (v, graph.labels()[v])).collect::<Vec<_>>();
        let train_loss = mb.b.nll(lp, &targets(train), 1.0 / train.len() as f64);
        let val = graph.val();
        let mut outs = vec![train_loss, logits];
        if !val.is_empty() {
            outs.push(mb.b.nll(lp, &targets(val), 1.0 / val.len() as f64));
        }
        Ok(Self {
            prog: mb.build(&outs),
            has_val: !val.is_empty(),
        })
    }

    /// `(record, gradient of the train loss)` at `theta`.
    fn step(
        &self,
        theta: &[f64],
        adj: &WeightedAdjacency,
        graph: &Graph,
        epoch: usize,
    ) -> Result<(EpochRecord, Vec<f64>), Error> {
        let b = self.prog.bindings(theta, &[adj])?;
        let trace = self.prog.program.forward(&b)?;
        let train_loss = trace.output(0).as_scalar();
        let logits = trace.output(1);
        let (val_loss, val_acc) = if self.has_val {
            (trace.output(2).as_scalar(), accuracy(logits, graph.labels(), graph.val()))
        } else {
            (f64::NAN, f64::NAN)
        };
        let mut cts = vec![Mat::scalar(1.0), Mat::zeros(logits.rows, logits.cols)];
        if self.has_val {
            cts.push(Mat::scalar(0.0));
        }
        let grads = trace.vjp(&cts)?;
        let g = self.prog.layout().concat(&grads[..self.prog.num_param_slots()])?;
        Ok((
            EpochRecord {
                epoch,
                train_loss,
                val_loss,
                val_acc,
            },
            g,
        ))
    }
}

/// Trains from `init_params(model_config)`.
pub fn train(graph: &Graph, model_config: &GcnConfig, config: &TrainConfig) -> Result<TrainOutcome, Error> {
    let init = init_params(model_config)?;
    train_from(graph, &init, config)
}

/// Full-batch gradient descent on the mean training cross-entropy plus
/// `weight_decay/2 · ‖θ‖²`. Record `e` holds the losses at the parameters
/// entering epoch `e`; a final record after the last update is appended.
pub fn train_from(graph: &Graph, init: &GcnParams, config: &TrainConfig) -> Result<TrainOutcome, Error> {
    config.validate()?;
    let adj = graph.adjacency();
    let tp = TrainProgram::new(&init.config, graph, &adj)?;
    let mut theta = init.theta.clone();
    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (rec, g) = tp.step(&theta, &adj, graph, epoch)?;
        if !rec.train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: rec.train_loss,
            });
        }
        if epoch % 500 == 0 {
            debug!(
                "epoch {epoch}: train {:.5} val {:.5} acc {:.3}",
                rec.train_loss, rec.val_loss, rec.val_acc
            );
        }
        history.push(rec);
        if epoch == config.epochs {
            break;
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= config.lr * (gi + config.weight_decay * *t);
        }
    }
    if let Some(r) = history.last() {
        info!(
            "trained {} epochs: train loss {:.5}, val loss {:.5}, val acc {:.3}",
            config.epochs, r.train_loss, r.val_loss, r.val_acc
        );
    }
    Ok(TrainOutcome {
        params: init.with_theta(theta),
        history,
    })
}

/// Standard training on an edited graph from a given initialization.
pub fn retrain_plain(graph_edited: &Graph, init: &GcnParams, config: &TrainConfig) -> Result<GcnParams, Error> {
    Ok(train_from(graph_edited, init, config)?.params)
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_acc"])?;
    for r in history {
        w.serialize((r.epoch, r.train_loss, r.val_loss, r.val_acc))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbrfConfig {
    pub damping: f64,
    /// Edit weight; `None` means `−1/N`.
    pub eps: Option<f64>,
    pub steps: usize,
    pub lr: f64,
    pub tolerance: f64,
}

impl Default for PbrfConfig {
    fn default() -> Self {
        Self {
            damping: 0.01,
            eps: None,
            steps: 500,
            lr: 0.03,
            tolerance: 1e-7,
        }
    }
}

impl PbrfConfig {
    pub fn eps_for(&self, graph: &Graph) -> f64 {
        self.eps.unwrap_or(-1.0 / graph.train().len() as f64)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.damping > 0.0) || self.steps == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("invalid PBRF config {self:?}")));
        }
        Ok(())
    }
}

/// The edge-edit PBRF objective
/// `(1/N)Σ D(h_v, h_v^s) + λ/2‖θ−θ_s‖² + εΣ(L(h_v^G) − L(h_v^{Gε}))`
/// over training nodes `v`.
pub struct PbrfObjective {
    prog: ModelProgram,
    adj: WeightedAdjacency,
    adj_eps: WeightedAdjacency,
    theta_s: Vec<f64>,
    damping: f64,
    offset: f64,
}

impl PbrfObjective {
    pub fn new(graph: &Graph, theta_s: &GcnParams, edit: &CandidateEdit, damping: f64, eps: f64) -> Result<Self, Error> {
        let train = graph.train();
        if train.is_empty() {
            return Err(Error::EmptyMask("train"));
        }
        let n = train.len() as f64;
        let adj_eps = graph.reweighted_adjacency(edit, eps)?;
        let adj = graph.reweighted_adjacency(edit, 0.0)?;

        // reference logits and their loss gradients
        let base = crate::model::forward(theta_s, &adj, graph.features())?.logits;
        let c = base.cols;
        let mut ref_grad = Mat::zeros(train.len(), c);
        let mut offset = 0.0;
        for (i, &v) in train.iter().enumerate() {
            let z = base.row(v);
            let p = softmax(z);
            let y = graph.labels()[v];
            let loss = -p[y].ln();
            let mut lin = 0.0;
            for k in 0..c {
                let g = p[k] - if k == y { 1.0 } else { 0.0 };
                ref_grad.set(i, k, g / n);
                lin += g * z[k];
            }
            offset += (-loss + lin) / n;
        }

        let targets: Vec<(usize, usize)> = train.iter().map(|&v| (v, graph.labels()[v])).collect();
        let mut mb = ModelProgramBuilder::new(&theta_s.config);
        let pattern = adj.pattern().clone();
        let a0 = mb.adjacency(&pattern);
        let a1 = mb.adjacency(adj_eps.pattern());
        let x = mb.constant("features", graph.features().clone());
        let rg = mb.constant("reference_grad", ref_grad);
        let s0 = mb.b.inv_sqrt_degree(a0, &pattern);
        let z0 = *mb.gcn(a0, s0, x, &pattern).last().unwrap();
        let lp0 = mb.b.log_softmax(z0);
        let bregman_loss = mb.b.nll(lp0, &targets, 1.0 / n);
        let zt = mb.b.pick_rows(z0, train);
        let lin = mb.b.inner(zt, rg);
        let bregman = mb.b.sub(bregman_loss, lin);
        let outputs = if eps == 0.0 {
            vec![bregman]
        } else {
            let s1 = mb.b.inv_sqrt_degree(a1, adj_eps.pattern());
            let z1 = *mb.gcn(a1, s1, x, adj_eps.pattern()).last().unwrap();
            let lp1 = mb.b.log_softmax(z1);
            let l0 = mb.b.nll(lp0, &targets, eps);
            let l1 = mb.b.nll(lp1, &targets, eps);
            let shift = mb.b.sub(l0, l1);
            vec![mb.b.add(bregman, shift)]
        };
        Ok(Self {
            prog: mb.build(&outputs),
            adj,
            adj_eps,
            theta_s: theta_s.theta.clone(),
            damping,
            offset,
        })
    }

    /// Objective value and gradient at `theta`.
    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), Error> {
        let (data, mut g, _) = self.prog.value_and_grads(theta, &[&self.adj, &self.adj_eps])?;
        let mut prox = 0.0;
        for ((gi, t), ts) in g.iter_mut().zip(theta).zip(&self.theta_s) {
            let d = t - ts;
            prox += d * d;
            *gi += self.damping * d;
        }
        Ok((data + self.offset + 0.5 * self.damping * prox, g))
    }

    /// `εΣ(L(h^G) − L(h^{Gε}))` alone, evaluated at `theta`.
    pub fn shift_term(graph: &Graph, params: &GcnParams, edit: &CandidateEdit, eps: f64) -> Result<f64, Error> {
        let train = graph.train();
        let adj = graph.reweighted_adjacency(edit, 0.0)?;
        let adj_eps = graph.reweighted_adjacency(edit, eps)?;
        let sum_loss = |a: &WeightedAdjacency| -> Result<f64, Error> {
            let prog = crate::model::loss_program(&params.config, graph, a, train, 1.0);
            prog.value(&params.theta, &[a])
        };
        Ok(eps * (sum_loss(&adj)? - sum_loss(&adj_eps)?))
    }
}

#[derive(Debug, Clone)]
pub struct PbrfOutcome {
    pub params: GcnParams,
    /// Objective before each step, then at the returned parameters.
    pub objective: Vec<f64>,
    pub grad_norm: f64,
}

/// Minimizes the PBRF objective by full-batch gradient descent from `θ_s`.
/// Steps start at `lr` and are halved until the objective does not rise,
/// so the recorded trace is non-increasing.
pub fn pbrf_finetune(
    graph: &Graph,
    theta_s: &GcnParams,
    edit: &CandidateEdit,
    config: &PbrfConfig,
) -> Result<PbrfOutcome, Error> {
    config.validate()?;
    let eps = config.eps_for(graph);
    let obj = PbrfObjective::new(graph, theta_s, edit, config.damping, eps)?;
    let mut theta = theta_s.theta.clone();
    let (mut value, mut g) = obj.value_and_grad(&theta)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("PBRF objective at θ_s for {edit}")));
    }
    let mut trace = Vec::with_capacity(config.steps + 1);
    trace.push(value);
    let mut step = config.lr;
    let min_step = config.lr * 1e-12;
    for _ in 0..config.steps {
        if norm(&g) <= config.tolerance {
            break;
        }
        let mut accepted = None;
        while step >= min_step {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
            let (v, cg) = obj.value_and_grad(&cand)?;
            if v.is_finite() && v <= value {
                accepted = Some((cand, v, cg));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, v, cg)) = accepted else {
            break;
        };
        theta = cand;
        value = v;
        g = cg;
        trace.push(value);
        step = (2.0 * step).min(config.lr);
    }
    let grad_norm = norm(&g);
    debug!("pbrf {edit}: {} steps, |g| = {grad_norm:.3e}", trace.len() - 1);
    Ok(PbrfOutcome {
        params: theta_s.with_theta(theta),
        objective: trace,
        grad_norm,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_graph, GeneratorSpec, GraphBundle};

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            lr: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let g = Graph::from_bundle(GraphBundle {
            num_nodes: 2,
            num_classes: 2,
            features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            labels: vec![0, 1],
            edges: vec![],
            train: vec![0, 1],
            val: vec![],
            test: vec![],
        })
        .unwrap();
        let cfg = GcnConfig { layers: 1, input_dim: 2, hidden_dim: 4, num_classes: 2, seed: 0 };
        let out = train(&g, &cfg, &TrainConfig { lr: 0.1, epochs: 2000, ..TrainConfig::default() }).unwrap();
        let logits = crate::model::forward(&out.params, &g.adjacency(), g.features()).unwrap().logits;
        assert_eq!(accuracy(&logits, g.labels(), g.train()), 1.0);
    }

    #[test]
    fn null_optimizer_keeps_parameters() {
        let g = generate_graph(&GeneratorSpec::barbell(4, 1), 0).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 8, 3);
        let out = train(&g, &cfg, &TrainConfig { lr: 0.0, weight_decay: 0.0, epochs: 20, seed: 3 }).unwrap();
        assert_eq!(out.params, init_params(&cfg).unwrap());
        assert!(out.history.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
        let zero = train(&g, &cfg, &TrainConfig { epochs: 0, ..quick() }).unwrap();
        assert_eq!(zero.params, init_params(&cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![6, 6], 0.6, 0.1), 2).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 8, 1);
        let a = train(&g, &cfg, &quick()).unwrap();
        let b = train(&g, &cfg, &quick()).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
        let r = retrain_plain(&g, &init_params(&cfg).unwrap(), &quick()).unwrap();
        assert_eq!(r, a.params);
    }

    #[test]
    fn divergence_is_reported() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![6, 6], 0.6, 0.1), 2).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 8, 1);
        let err = train(&g, &cfg, &TrainConfig { lr: 1e6, epochs: 50, ..quick() }).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn bridge_deletion_changes_retraining() {
        let g = generate_graph(&GeneratorSpec::barbell(5, 1), 0).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 8, 0);
        let init = init_params(&cfg).unwrap();
        let a = retrain_plain(&g, &init, &quick()).unwrap();
        let edited = g.apply_edit(&CandidateEdit::delete(4, 5)).unwrap();
        let b = retrain_plain(&edited, &init, &quick()).unwrap();
        let d: f64 = a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn history_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history_csv(&[EpochRecord { epoch: 0, train_loss: 1.0, val_loss: 2.0, val_acc: 0.5 }], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_loss,val_acc");
        assert_eq!(text.lines().count(), 2);
    }

    fn trained_barbell() -> (Graph, GcnParams) {
        let g = generate_graph(&GeneratorSpec::barbell(5, 1), 0).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 8, 0);
        let p = train(&g, &cfg, &quick()).unwrap().params;
        (g, p)
    }

    #[test]
    fn pbrf_zero_eps_is_a_fixed_point() {
        let (g, p) = trained_barbell();
        let cfg = PbrfConfig { eps: Some(0.0), ..PbrfConfig::default() };
        let out = pbrf_finetune(&g, &p, &CandidateEdit::delete(4, 5), &cfg).unwrap();
        let norm: f64 = p.theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let d: f64 = out.params.theta.iter().zip(&p.theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 1e-12 * norm, "{d}");
        assert!(out.objective[0].abs() < 1e-12);
    }

    #[test]
    fn pbrf_large_damping_stays_close() {
        let (g, p) = trained_barbell();
        let cfg = PbrfConfig { damping: 1e6, lr: 1e-7, ..PbrfConfig::default() };
        let out = pbrf_finetune(&g, &p, &CandidateEdit::delete(4, 5), &cfg).unwrap();
        let d = out.params.theta.iter().zip(&p.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-3, "{d}");
    }

    #[test]
    fn pbrf_descent_is_monotone() {
        let (g, p) = trained_barbell();
        for lr in [0.03, 5.0] {
            let cfg = PbrfConfig { lr, ..PbrfConfig::default() };
            let out = pbrf_finetune(&g, &p, &CandidateEdit::delete(4, 5), &cfg).unwrap();
            assert!(out.objective.len() > 2);
            for w in out.objective.windows(2) {
                assert!(w[1] <= w[0], "lr {lr}: {} -> {}", w[0], w[1]);
            }
            assert!(out.objective.last().unwrap() < &out.objective[0]);
        }
    }

    #[test]
    fn pbrf_gradient_matches_finite_differences() {
        let (g, p) = trained_barbell();
        let eps = -1.0 / g.train().len() as f64;
        let obj = PbrfObjective::new(&g, &p, &CandidateEdit::insert(0, 9), 0.01, eps).unwrap();
        let theta: Vec<f64> = p.theta.iter().enumerate().map(|(i, t)| t + 0.01 * ((i % 7) as f64 - 3.0)).collect();
        let (_, grad) = obj.value_and_grad(&theta).unwrap();
        let h = 1e-6;
        for i in (0..theta.len()).step_by(5) {
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fd = (obj.value_and_grad(&up).unwrap().0 - obj.value_and_grad(&dn).unwrap().0) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn reversed_edit_negates_shift_term() {
        let (g, p) = trained_barbell();
        let eps = -1.0 / g.train().len() as f64;
        let del = CandidateEdit::delete(4, 5);
        let edited = g.apply_edit(&del).unwrap();
        let a = PbrfObjective::shift_term(&g, &p, &del, eps).unwrap();
        let b = PbrfObjective::shift_term(&edited, &p, &CandidateEdit::insert(4, 5), eps).unwrap();
        assert!(a != 0.0);
        assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0), "{a} {b}");
    }
}
