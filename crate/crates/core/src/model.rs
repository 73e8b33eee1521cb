//! Graph convolutional network: parameters, program construction and the
//! output-space loss Hessian.
//!
//! Layer `ℓ` computes `Â H W_ℓ + b_ℓ` with
//! `Â = D̃^{-1/2}(A_w + I)D̃^{-1/2}` and `D̃` the weighted degree plus the
//! unit self-loop. Every layer but the last is followed by ReLU.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Block, BlockLayout, DiffProgram, Dual, Mat, NodeId, ProgramBuilder, Scalar, SparsePattern};
use crate::graph::{Graph, WeightedAdjacency};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl GcnConfig {
    pub fn for_graph(graph: &Graph, layers: usize, hidden_dim: usize, seed: u64) -> Self {
        Self {
            layers,
            input_dim: graph.feature_dim(),
            hidden_dim,
            num_classes: graph.num_classes(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.layers == 0 || self.input_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("invalid GCN config {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each layer.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let i = if l == 0 { self.input_dim } else { self.hidden_dim };
                let o = if l + 1 == self.layers { self.num_classes } else { self.hidden_dim };
                (i, o)
            })
            .collect()
    }

    pub fn layout(&self) -> BlockLayout {
        let mut blocks = Vec::new();
        for (l, (i, o)) in self.dims().into_iter().enumerate() {
            blocks.push(Block { name: format!("W{l}"), rows: i, cols: o });
            blocks.push(Block { name: format!("b{l}"), rows: 1, cols: o });
        }
        BlockLayout { blocks }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

/// Flattened GCN parameters (`W0, b0, W1, b1, …`, each row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub config: GcnConfig,
    pub theta: Vec<f64>,
}

impl GcnParams {
    pub fn new(config: GcnConfig, theta: Vec<f64>) -> Result<Self, Error> {
        let expected = config.num_params();
        if theta.len() != expected {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, config needs {expected}",
                theta.len()
            )));
        }
        Ok(Self { config, theta })
    }

    pub fn layout(&self) -> BlockLayout {
        self.config.layout()
    }

    pub fn blocks(&self) -> Vec<Mat<f64>> {
        self.layout().split(&self.theta).expect("theta matches its layout")
    }

    pub fn from_blocks(config: GcnConfig, blocks: &[Mat<f64>]) -> Result<Self, Error> {
        let theta = config.layout().concat(blocks)?;
        Self::new(config, theta)
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.theta.len());
        Self {
            config: self.config.clone(),
            theta,
        }
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `config.seed`.
pub fn init_params(config: &GcnConfig) -> Result<GcnParams, Error> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = Vec::with_capacity(config.num_params());
    for (i, o) in config.dims() {
        let bound = (6.0 / (i + o) as f64).sqrt();
        theta.extend((0..i * o).map(|_| rng.gen_range(-bound..=bound)));
        theta.extend(std::iter::repeat(0.0).take(o));
    }
    GcnParams::new(config.clone(), theta)
}

/// Program under construction whose first slots are the GCN parameters.
/// Constant inputs are captured with their values so a finished
/// [`ModelProgram`] only needs parameters and adjacency weights.
pub struct ModelProgramBuilder {
    pub b: ProgramBuilder,
    config: GcnConfig,
    params: Vec<NodeId>,
    adj_slots: Vec<usize>,
    consts: Vec<(usize, Mat<f64>)>,
    slot_count: usize,
}

impl ModelProgramBuilder {
    pub fn new(config: &GcnConfig) -> Self {
        let mut b = ProgramBuilder::new();
        let layout = config.layout();
        let params = layout
            .blocks
            .iter()
            .map(|blk| b.param(&blk.name, blk.rows, blk.cols))
            .collect::<Vec<_>>();
        let slot_count = params.len();
        Self {
            b,
            config: config.clone(),
            params,
            adj_slots: Vec::new(),
            consts: Vec::new(),
            slot_count,
        }
    }

    pub fn adjacency(&mut self, pattern: &SparsePattern) -> NodeId {
        let id = self.b.adjacency("adjacency", pattern);
        self.adj_slots.push(self.slot_count);
        self.slot_count += 1;
        id
    }

    pub fn constant(&mut self, name: &str, value: Mat<f64>) -> NodeId {
        let id = self.b.constant(name, value.rows, value.cols);
        self.consts.push((self.slot_count, value));
        self.slot_count += 1;
        id
    }

    /// Layer outputs of the GCN on features `x`; the last entry is the
    /// logits.
    pub fn gcn(
        &mut self,
        adj: NodeId,
        inv_sqrt_deg: NodeId,
        x: NodeId,
        pattern: &Arc<SparsePattern>,
    ) -> Vec<NodeId> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let w = self.params[2 * l];
            let bias = self.params[2 * l + 1];
            let hw = self.b.matmul(h, w);
            let prop = self.b.normalized_propagate(adj, inv_sqrt_deg, hw, pattern);
            let z = self.b.add_bias(prop, bias);
            h = if l + 1 < self.config.layers {
                self.b.relu(z)
            } else {
                z
            };
            outs.push(h);
        }
        outs
    }

    pub fn build(self, outputs: &[NodeId]) -> ModelProgram {
        ModelProgram {
            program: self.b.build(outputs),
            layout: self.config.layout(),
            adj_slots: self.adj_slots,
            consts: self.consts,
        }
    }
}

/// A program over `[params…, adjacency…, constants…]` with captured
/// constants.
pub struct ModelProgram {
    pub program: DiffProgram,
    layout: BlockLayout,
    adj_slots: Vec<usize>,
    consts: Vec<(usize, Mat<f64>)>,
}

impl ModelProgram {
    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn num_param_slots(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn adjacency_slots(&self) -> &[usize] {
        &self.adj_slots
    }

    pub fn bindings(&self, theta: &[f64], adjs: &[&WeightedAdjacency]) -> Result<Vec<Mat<f64>>, Error> {
        self.bindings_with(theta, adjs, |x| x)
    }

    /// Bindings in dual arithmetic: parameters carry `tangent`, all other
    /// inputs carry zero.
    pub fn dual_bindings(
        &self,
        theta: &[f64],
        tangent: &[f64],
        adjs: &[&WeightedAdjacency],
    ) -> Result<Vec<Mat<Dual>>, Error> {
        let tblocks = self.layout.split(tangent)?;
        let mut out = self.bindings_with(theta, adjs, |x| Dual::new(x, 0.0))?;
        for (m, t) in out.iter_mut().zip(&tblocks) {
            for (d, &dt) in m.data.iter_mut().zip(&t.data) {
                d.du = dt;
            }
        }
        Ok(out)
    }

    fn bindings_with<T: Scalar>(
        &self,
        theta: &[f64],
        adjs: &[&WeightedAdjacency],
        lift: impl Fn(f64) -> T + Copy,
    ) -> Result<Vec<Mat<T>>, Error> {
        if adjs.len() != self.adj_slots.len() {
            return Err(Error::Config(format!(
                "program takes {} adjacency inputs, got {}",
                self.adj_slots.len(),
                adjs.len()
            )));
        }
        let total = self.program.slots().len();
        let mut out: Vec<Option<Mat<T>>> = vec![None; total];
        for (k, m) in self.layout.split(theta)?.into_iter().enumerate() {
            out[k] = Some(lift_mat(&m, lift));
        }
        for (&slot, adj) in self.adj_slots.iter().zip(adjs) {
            out[slot] = Some(lift_mat(&adj.as_binding(), lift));
        }
        for (slot, value) in &self.consts {
            out[*slot] = Some(lift_mat(value, lift));
        }
        Ok(out.into_iter().map(|m| m.expect("every slot bound")).collect())
    }

    /// Scalar value of output 0.
    pub fn value(&self, theta: &[f64], adjs: &[&WeightedAdjacency]) -> Result<f64, Error> {
        let b = self.bindings(theta, adjs)?;
        Ok(self.program.evaluate(&b)?[0].as_scalar())
    }

    /// Value of scalar output 0 plus its gradient with respect to the
    /// parameters (flattened) and each adjacency input.
    pub fn value_and_grads(
        &self,
        theta: &[f64],
        adjs: &[&WeightedAdjacency],
    ) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), Error> {
        let b = self.bindings(theta, adjs)?;
        let trace = self.program.forward(&b)?;
        let value = trace.output(0).as_scalar();
        let mut cts = vec![Mat::scalar(1.0)];
        for k in 1..self.program.num_outputs() {
            let (r, c) = self.program.output_shape(k);
            cts.push(Mat::zeros(r, c));
        }
        let grads = trace.vjp(&cts)?;
        let np = self.num_param_slots();
        let g_theta = self.layout.concat(&grads[..np])?;
        let g_adj = self
            .adj_slots
            .iter()
            .map(|&s| grads[s].data.clone())
            .collect();
        Ok((value, g_theta, g_adj))
    }
}

fn lift_mat<T: Scalar>(m: &Mat<f64>, f: impl Fn(f64) -> T) -> Mat<T> {
    Mat::from_vec(m.rows, m.cols, m.data.iter().map(|&x| f(x)).collect())
}

/// Logits plus every layer's output.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Mat<f64>,
    pub embeddings: Vec<Mat<f64>>,
}

pub fn logits_program(config: &GcnConfig, adj: &WeightedAdjacency, features: &Mat<f64>) -> ModelProgram {
    let mut mb = ModelProgramBuilder::new(config);
    let a = mb.adjacency(adj.pattern());
    let x = mb.constant("features", features.clone());
    let s = mb.b.inv_sqrt_degree(a, adj.pattern());
    let layers = mb.gcn(a, s, x, adj.pattern());
    mb.build(&layers)
}

pub fn forward(params: &GcnParams, adj: &WeightedAdjacency, features: &Mat<f64>) -> Result<ForwardOutput, Error> {
    if features.cols != params.config.input_dim || features.rows != adj.dim() {
        return Err(Error::Config(format!(
            "features {}x{} incompatible with {} nodes / input dim {}",
            features.rows,
            features.cols,
            adj.dim(),
            params.config.input_dim
        )));
    }
    let prog = logits_program(&params.config, adj, features);
    let outs = prog.program.evaluate(&prog.bindings(&params.theta, &[adj])?)?;
    Ok(ForwardOutput {
        logits: outs.last().expect("at least one layer").clone(),
        embeddings: outs,
    })
}

/// Program whose output 0 is `scale · Σ_{v∈nodes} CE(h_v, y_v)`.
pub fn loss_program(
    config: &GcnConfig,
    graph: &Graph,
    adj: &WeightedAdjacency,
    nodes: &[usize],
    scale: f64,
) -> ModelProgram {
    let mut mb = ModelProgramBuilder::new(config);
    let a = mb.adjacency(adj.pattern());
    let x = mb.constant("features", graph.features().clone());
    let s = mb.b.inv_sqrt_degree(a, adj.pattern());
    let logits = *mb.gcn(a, s, x, adj.pattern()).last().unwrap();
    let lp = mb.b.log_softmax(logits);
    let targets: Vec<(usize, usize)> = nodes.iter().map(|&v| (v, graph.labels()[v])).collect();
    let loss = mb.b.nll(lp, &targets, scale);
    mb.build(&[loss])
}

/// Mean cross-entropy over `mask` and its parameter gradient.
pub fn loss_and_grad(params: &GcnParams, graph: &Graph, mask: &[usize]) -> Result<(f64, Vec<f64>), Error> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("loss"));
    }
    let adj = graph.adjacency();
    let prog = loss_program(&params.config, graph, &adj, mask, 1.0 / mask.len() as f64);
    let (loss, g, _) = prog.value_and_grads(&params.theta, &[&adj])?;
    Ok((loss, g))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Hessian of `CE(softmax(z), y)` in `z`: `diag(p) − p pᵀ`. Independent of
/// the label.
pub fn output_loss_hessian(logits: &[f64], _label: usize) -> Mat<f64> {
    let p = softmax(logits);
    let c = p.len();
    let mut h = Mat::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let d = if i == j { p[i] } else { 0.0 };
            h.set(i, j, d - p[i] * p[j]);
        }
    }
    h
}

pub fn accuracy(logits: &Mat<f64>, labels: &[usize], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return f64::NAN;
    }
    let correct = mask
        .iter()
        .filter(|&&v| {
            let row = logits.row(v);
            let arg = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap();
            arg == labels[v]
        })
        .count();
    correct as f64 / mask.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
}

/// Model checkpoint JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: GcnConfig,
    pub params: Vec<f64>,
    pub training: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn params(&self) -> Result<GcnParams, Error> {
        GcnParams::new(self.config.clone(), self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.config.validate()?;
        ck.params()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference_gradient, max_relative_error};
    use crate::graph::{generate_graph, GeneratorSpec, GraphBundle};

    fn two_node_graph() -> Graph {
        Graph::from_bundle(GraphBundle {
            num_nodes: 2,
            num_classes: 2,
            features: vec![vec![1.0, 2.0], vec![3.0, -1.0]],
            labels: vec![0, 1],
            edges: vec![[0, 1]],
            train: vec![0],
            val: vec![1],
            test: vec![],
        })
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = GcnConfig { layers: 3, input_dim: 64, hidden_dim: 64, num_classes: 5, seed: 9 };
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        let blocks = a.blocks();
        for l in 0..3 {
            assert!(blocks[2 * l + 1].data.iter().all(|&x| x == 0.0));
        }
        let bound = (6.0f64 / 128.0).sqrt();
        assert!(blocks[2].data.iter().all(|x| x.abs() <= bound));
        assert!(blocks[2].data.iter().any(|x| x.abs() > 0.9 * bound));
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = GcnConfig { layers: 2, input_dim: 3, hidden_dim: 4, num_classes: 2, seed: 1 };
        let p = init_params(&cfg).unwrap();
        let back = GcnParams::from_blocks(cfg, &p.blocks()).unwrap();
        assert_eq!(back.theta, p.theta);
    }

    #[test]
    fn isolated_node_logits_equal_features() {
        let g = Graph::from_bundle(GraphBundle {
            num_nodes: 1,
            num_classes: 2,
            features: vec![vec![0.3, -0.7]],
            labels: vec![0],
            edges: vec![],
            train: vec![0],
            val: vec![],
            test: vec![],
        })
        .unwrap();
        let cfg = GcnConfig { layers: 1, input_dim: 2, hidden_dim: 4, num_classes: 2, seed: 0 };
        let p = GcnParams::from_blocks(cfg, &[Mat::identity(2), Mat::zeros(1, 2)]).unwrap();
        let out = forward(&p, &g.adjacency(), g.features()).unwrap();
        assert_eq!(out.logits.data, vec![0.3, -0.7]);
    }

    #[test]
    fn zero_features_give_zero_logits() {
        let g = generate_graph(&GeneratorSpec::barbell(4, 2), 0).unwrap();
        let g = g.with_features(Mat::zeros(g.num_nodes(), g.feature_dim()));
        let cfg = GcnConfig::for_graph(&g, 3, 8, 0);
        let p = init_params(&cfg).unwrap();
        let out = forward(&p, &g.adjacency(), g.features()).unwrap();
        assert!(out.logits.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_node_normalization_by_hand() {
        // Â = [[1/2, 1/2], [1/2, 1/2]] for one edge plus self-loops
        let g = two_node_graph();
        let cfg = GcnConfig { layers: 1, input_dim: 2, hidden_dim: 2, num_classes: 2, seed: 0 };
        let p = GcnParams::from_blocks(cfg, &[Mat::identity(2), Mat::zeros(1, 2)]).unwrap();
        let out = forward(&p, &g.adjacency(), g.features()).unwrap();
        let x = g.features();
        let want: Vec<f64> = (0..2)
            .flat_map(|_| (0..2).map(move |c| 0.5 * x.get(0, c) + 0.5 * x.get(1, c)))
            .collect();
        for (a, b) in out.logits.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_and_uniform_losses() {
        let g = two_node_graph();
        let cfg = GcnConfig { layers: 1, input_dim: 2, hidden_dim: 2, num_classes: 2, seed: 0 };
        let zero = GcnParams::from_blocks(cfg.clone(), &[Mat::zeros(2, 2), Mat::zeros(1, 2)]).unwrap();
        let (loss, _) = loss_and_grad(&zero, &g, &[0, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // bias drives class 0 with huge margin; node 0 is class 0
        let sat = GcnParams::from_blocks(cfg, &[Mat::zeros(2, 2), Mat::from_vec(1, 2, vec![1000.0, 0.0])]).unwrap();
        let (loss, _) = loss_and_grad(&sat, &g, &[0]).unwrap();
        assert!(loss < 1e-12);
        assert!(matches!(loss_and_grad(&sat, &g, &[]), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn uniform_loss_seven_classes() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![3; 7], 0.5, 0.1), 1).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 4, 0);
        let p = GcnParams::new(cfg.clone(), vec![0.0; cfg.num_params()]).unwrap();
        let (loss, _) = loss_and_grad(&p, &g, g.train()).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![3, 3], 0.7, 0.2), 4).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 3, 4);
        let p = init_params(&cfg).unwrap();
        let adj = g.adjacency();
        let prog = loss_program(&cfg, &g, &adj, g.train(), 1.0 / g.train().len() as f64);
        let (_, grad) = loss_and_grad(&p, &g, g.train()).unwrap();
        let b = prog.bindings(&p.theta, &[&adj]).unwrap();
        let mut fd = Vec::new();
        for slot in 0..prog.num_param_slots() {
            fd.extend(finite_difference_gradient(&prog.program, &b, slot, 1e-6).unwrap().data);
        }
        assert!(max_relative_error(&grad, &fd, 1e-7) <= 1e-4);
    }

    #[test]
    fn output_hessian_closed_forms() {
        let h = output_loss_hessian(&[0.3, 0.3], 0);
        for (a, b) in h.data.iter().zip([0.25, -0.25, -0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let h = output_loss_hessian(&[800.0, 0.0, 0.0], 0);
        assert!(h.data.iter().all(|x| x.abs() < 1e-300));
    }

    #[test]
    fn output_hessian_matches_finite_differences() {
        let z = [0.4, -1.2, 0.9, 0.1];
        let y = 2;
        let ce = |z: &[f64]| -softmax(z)[y].ln();
        let h = output_loss_hessian(&z, y);
        let eps = 1e-4;
        for i in 0..4 {
            for j in 0..4 {
                let f = |di: f64, dj: f64| {
                    let mut w = z;
                    w[i] += di;
                    w[j] += dj;
                    ce(&w)
                };
                let fd = (f(eps, eps) - f(eps, -eps) - f(-eps, eps) + f(-eps, -eps)) / (4.0 * eps * eps);
                assert!((fd - h.get(i, j)).abs() <= 1e-5, "({i},{j})");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = GcnConfig { layers: 2, input_dim: 2, hidden_dim: 3, num_classes: 2, seed: 5 };
        let ck = Checkpoint { config: cfg.clone(), params: init_params(&cfg).unwrap().theta, training: None };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
