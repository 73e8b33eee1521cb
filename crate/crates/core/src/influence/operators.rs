//! Curvature operators and the LiSSA inverse solve.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Dual, Mat};
use crate::graph::{Graph, WeightedAdjacency};
use crate::model::{output_loss_hessian, GcnParams, ModelProgram, ModelProgramBuilder};
use crate::Error;

/// A symmetric linear map on flat parameter vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, Error>;
    /// Known lower bound on the spectrum, used as a floor for the scale.
    fn damping(&self) -> f64 {
        0.0
    }
}

/// Explicit matrix; a test seam and the dense form of other operators.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    pub matrix: Mat<f64>,
}

impl DenseOperator {
    pub fn new(matrix: Mat<f64>) -> Self {
        assert_eq!(matrix.rows, matrix.cols, "square operator");
        Self { matrix }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m.set(i, i, x);
        }
        Self::new(m)
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.rows
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        check_len(self.dim(), v)?;
        Ok((0..self.matrix.rows)
            .map(|i| self.matrix.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

fn check_len(dim: usize, v: &[f64]) -> Result<(), Error> {
    if v.len() != dim {
        return Err(crate::DiffError::LayoutMismatch { expected: dim, got: v.len() }.into());
    }
    Ok(())
}

/// Column-by-column densification through `apply`.
pub fn densify(op: &dyn LinearOperator) -> Result<Mat<f64>, Error> {
    let n = op.dim();
    let mut m = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        e[j] = 0.0;
        for (i, x) in col.into_iter().enumerate() {
            m.set(i, j, x);
        }
    }
    Ok(m)
}

/// `v ↦ JᵀHJv/N + λv` with `J` the Jacobian of training-node logits in
/// `θ` and `H` the per-node output-space loss Hessian, all at `θ_s`.
pub struct GgnOperator {
    prog: ModelProgram,
    theta: Vec<f64>,
    adj: WeightedAdjacency,
    hessians: Vec<Mat<f64>>,
    n: f64,
    damping: f64,
}

impl GgnOperator {
    pub fn new(params: &GcnParams, graph: &Graph, damping: f64) -> Result<Self, Error> {
        let train = graph.train();
        if train.is_empty() {
            return Err(Error::EmptyMask("train"));
        }
        if !(damping > 0.0) {
            return Err(Error::Config(format!("damping must be positive, got {damping}")));
        }
        let adj = graph.adjacency();
        let mut mb = ModelProgramBuilder::new(&params.config);
        let a = mb.adjacency(adj.pattern());
        let x = mb.constant("features", graph.features().clone());
        let s = mb.b.inv_sqrt_degree(a, adj.pattern());
        let h = *mb.gcn(a, s, x, adj.pattern()).last().unwrap();
        let ht = mb.b.pick_rows(h, train);
        let prog = mb.build(&[ht]);
        let logits = prog.program.evaluate(&prog.bindings(&params.theta, &[&adj])?)?.remove(0);
        let hessians = train
            .iter()
            .enumerate()
            .map(|(i, &v)| output_loss_hessian(logits.row(i), graph.labels()[v]))
            .collect();
        Ok(Self {
            prog,
            theta: params.theta.clone(),
            adj,
            hessians,
            n: train.len() as f64,
            damping,
        })
    }

    fn bindings(&self) -> Result<Vec<Mat<f64>>, Error> {
        self.prog.bindings(&self.theta, &[&self.adj])
    }

    fn apply_hessians(&self, x: &Mat<f64>) -> Mat<f64> {
        let mut y = Mat::zeros(x.rows, x.cols);
        for (i, h) in self.hessians.iter().enumerate() {
            let xi = x.row(i);
            for (k, out) in y.row_mut(i).iter_mut().enumerate() {
                *out = h.row(k).iter().zip(xi).map(|(a, b)| a * b).sum();
            }
        }
        y
    }

    /// Training-logit Jacobian (`N·C × P`, row `i·C + k`) via one reverse
    /// pass per output entry.
    pub fn jacobian(&self) -> Result<Mat<f64>, Error> {
        let b = self.bindings()?;
        let trace = self.prog.program.forward(&b)?;
        let (r, c) = self.prog.program.output_shape(0);
        let p = self.theta.len();
        let np = self.prog.num_param_slots();
        let mut jac = Mat::zeros(r * c, p);
        let mut ct = Mat::zeros(r, c);
        for row in 0..r * c {
            ct.data[row] = 1.0;
            let g = trace.vjp(std::slice::from_ref(&ct))?;
            ct.data[row] = 0.0;
            jac.row_mut(row).copy_from_slice(&self.prog.layout().concat(&g[..np])?);
        }
        Ok(jac)
    }

    /// The same operator with `J` precomputed, so each product is two
    /// dense matrix-vector multiplies.
    pub fn with_cached_jacobian(&self) -> Result<CachedGgn, Error> {
        Ok(CachedGgn {
            jacobian: self.jacobian()?,
            hessians: self.hessians.clone(),
            n: self.n,
            damping: self.damping,
        })
    }
}

impl LinearOperator for GgnOperator {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        check_len(self.dim(), v)?;
        let b = self.bindings()?;
        let trace = self.prog.program.forward(&b)?;
        let mut tangents: Vec<Option<Mat<f64>>> = self.prog.layout().split(v)?.into_iter().map(Some).collect();
        tangents.resize(b.len(), None);
        let jv = trace.jvp(&tangents)?.remove(0);
        let hjv = self.apply_hessians(&jv);
        let g = trace.vjp(&[hjv])?;
        let jt = self.prog.layout().concat(&g[..self.prog.num_param_slots()])?;
        Ok(jt.iter().zip(v).map(|(a, x)| a / self.n + self.damping * x).collect())
    }

    fn damping(&self) -> f64 {
        self.damping
    }
}

/// [`GgnOperator`] with an explicit Jacobian.
pub struct CachedGgn {
    jacobian: Mat<f64>,
    hessians: Vec<Mat<f64>>,
    n: f64,
    damping: f64,
}

impl LinearOperator for CachedGgn {
    fn dim(&self) -> usize {
        self.jacobian.cols
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        check_len(self.dim(), v)?;
        let c = self.hessians.first().map_or(0, |h| h.rows);
        let jv: Vec<f64> = (0..self.jacobian.rows)
            .map(|r| self.jacobian.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        let mut hjv = vec![0.0; jv.len()];
        for (i, h) in self.hessians.iter().enumerate() {
            for k in 0..c {
                hjv[i * c + k] = h.row(k).iter().zip(&jv[i * c..(i + 1) * c]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out: Vec<f64> = v.iter().map(|x| self.damping * x).collect();
        let inv_n = 1.0 / self.n;
        for (r, &y) in hjv.iter().enumerate() {
            if y == 0.0 {
                continue;
            }
            let s = y * inv_n;
            for (o, a) in out.iter_mut().zip(self.jacobian.row(r)) {
                *o += s * a;
            }
        }
        Ok(out)
    }

    fn damping(&self) -> f64 {
        self.damping
    }
}

/// `v ↦ ∇²_θ L̄(θ_s) v + λv` for the mean training cross-entropy `L̄`,
/// with products by forward-over-reverse differentiation.
pub struct HessianOperator {
    prog: ModelProgram,
    theta: Vec<f64>,
    adj: WeightedAdjacency,
    damping: f64,
}

impl HessianOperator {
    pub fn new(params: &GcnParams, graph: &Graph, damping: f64) -> Result<Self, Error> {
        let train = graph.train();
        if train.is_empty() {
            return Err(Error::EmptyMask("train"));
        }
        let adj = graph.adjacency();
        let prog = crate::model::loss_program(&params.config, graph, &adj, train, 1.0 / train.len() as f64);
        Ok(Self {
            prog,
            theta: params.theta.clone(),
            adj,
            damping,
        })
    }
}

impl LinearOperator for HessianOperator {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        check_len(self.dim(), v)?;
        let b = self.prog.dual_bindings(&self.theta, v, &[&self.adj])?;
        let trace = self.prog.program.forward(&b)?;
        let g = trace.vjp(&[Mat::scalar(Dual::new(1.0, 0.0))])?;
        let np = self.prog.num_param_slots();
        let hv = self.prog.layout().concat(&g[..np])?;
        Ok(hv.iter().zip(v).map(|(d, x)| d.du + self.damping * x).collect())
    }

    fn damping(&self) -> f64 {
        self.damping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    pub damping: f64,
    /// `None` estimates the scale by power iteration.
    pub scale: Option<f64>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self {
            damping: 0.01,
            scale: None,
            max_iters: 10_000,
            tolerance: 1e-8,
            power_iters: 100,
            seed: 0,
        }
    }
}

impl LissaConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.damping > 0.0) || self.max_iters == 0 || self.scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config(format!("invalid LiSSA config {self:?}")));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1.1 ×` the Rayleigh quotient after `iters` power iterations from a
/// seeded Gaussian start, floored at `1.1 × op.damping()`.
pub fn estimate_scale(op: &dyn LinearOperator, iters: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..op.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut rq = 0.0;
    for _ in 0..iters.max(1) {
        let w = op.apply(&v)?;
        rq = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 || !nw.is_finite() {
            break;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    let s = 1.1 * rq.abs().max(op.damping());
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Degenerate(format!("cannot scale operator (Rayleigh quotient {rq})")));
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct LissaSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub scale: f64,
}

/// Neumann iteration `r ← v + r − (G/s) r` from `r = v`, returning `r/s`.
pub fn lissa_solve(op: &dyn LinearOperator, v: &[f64], config: &LissaConfig) -> Result<LissaSolution, Error> {
    config.validate()?;
    check_len(op.dim(), v)?;
    let scale = match config.scale {
        Some(s) => s,
        None => estimate_scale(op, config.power_iters, config.seed)?,
    };
    let mut r = v.to_vec();
    let mut converged = false;
    let mut iterations = 0;
    if norm(v) == 0.0 {
        return Ok(LissaSolution { x: vec![0.0; v.len()], iterations, converged: true, scale });
    }
    while iterations < config.max_iters {
        let gr = op.apply(&r)?;
        let mut delta2 = 0.0;
        let mut r2 = 0.0;
        for ((ri, vi), gi) in r.iter_mut().zip(v).zip(&gr) {
            let d = vi - gi / scale;
            *ri += d;
            delta2 += d * d;
            r2 += *ri * *ri;
        }
        iterations += 1;
        if !(r2.is_finite() && delta2.is_finite()) {
            return Err(Error::NonFinite(format!(
                "LiSSA iterate at step {iterations} (scale {scale:.4e} too small?)"
            )));
        }
        if delta2.sqrt() <= config.tolerance * r2.sqrt() {
            converged = true;
            break;
        }
    }
    debug!("lissa: {iterations} iterations, converged {converged}, scale {scale:.4e}");
    Ok(LissaSolution {
        x: r.into_iter().map(|x| x / scale).collect(),
        iterations,
        converged,
        scale,
    })
}

/// `‖G x − v‖ / ‖v‖`.
pub fn relative_residual(op: &dyn LinearOperator, x: &[f64], v: &[f64]) -> Result<f64, Error> {
    let gx = op.apply(x)?;
    let r: f64 = gx.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(r / norm(v).max(f64::MIN_POSITIVE))
}
