//! Recorded computations over a closed operator family.
//!
//! A [`DiffProgram`] is built once with [`ProgramBuilder`] and then
//! evaluated any number of times. [`DiffProgram::forward`] produces a
//! [`Trace`] holding every intermediate value; the trace answers reverse
//! mode ([`Trace::vjp`]) and forward mode ([`Trace::jvp`]) queries without
//! re-running the forward pass.
//!
//! Every kernel iterates in a fixed order, so repeated evaluation at the
//! same bindings is bitwise reproducible.

use std::sync::Arc;

use super::matrix::Mat;
use super::scalar::Scalar;
use super::sparse::SparsePattern;
use super::DiffError;

/// Handle to a node inside a program under construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Differentiable model parameters.
    Param,
    /// Differentiable adjacency weights, one per directed sparse entry.
    Adjacency,
    /// Data held fixed (features, reference outputs).
    Const,
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    MatMul(usize, usize),
    /// Adds a `1 x c` row to every row.
    AddBias(usize, usize),
    Relu(usize),
    LogSoftmax(usize),
    /// `scale * Σ -logp[r, c]` over the listed `(row, class)` targets.
    Nll {
        logp: usize,
        targets: Arc<[(usize, usize)]>,
        scale: f64,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    /// Frobenius inner product, `1 x 1`.
    Inner(usize, usize),
    /// Row-wise Euclidean norms, `n x 1`. The subgradient at 0 is 0.
    RowNorms(usize),
    Sum(usize),
    /// Scalar division.
    Div(usize, usize),
    AddN(Vec<usize>),
    PickRows(usize, Arc<[usize]>),
    /// `(1 + Σ_j w_ij)^(-1/2)` per row, `n x 1`.
    InvSqrtDegree {
        adj: usize,
        pattern: Arc<SparsePattern>,
    },
    /// `y_i = s_i x_i` with `s` an `n x 1` column.
    RowScale(usize, usize),
    /// `(W + I) x` for the sparse weighted `W`.
    SpMM {
        adj: usize,
        x: usize,
        pattern: Arc<SparsePattern>,
    },
    /// `Σ_e w_e ‖h_row(e) - h_col(e)‖²`, `1 x 1`.
    EdgeSqDist {
        adj: usize,
        h: usize,
        pattern: Arc<SparsePattern>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// Immutable computation graph with typed input slots.
#[derive(Debug, Clone)]
pub struct DiffProgram {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    outputs: Vec<usize>,
    /// Whether a node depends on a differentiable slot.
    active: Vec<bool>,
}

#[derive(Debug, Default)]
pub struct ProgramBuilder {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn input(&mut self, name: &str, kind: SlotKind, rows: usize, cols: usize) -> NodeId {
        self.slots.push(Slot {
            name: name.to_string(),
            kind,
            rows,
            cols,
        });
        let slot = self.slots.len() - 1;
        self.push(Op::Input(slot), rows, cols)
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.input(name, SlotKind::Param, rows, cols)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.input(name, SlotKind::Const, rows, cols)
    }

    /// Adjacency weights over `pattern`, bound as an `nnz x 1` column.
    pub fn adjacency(&mut self, name: &str, pattern: &SparsePattern) -> NodeId {
        self.input(name, SlotKind::Adjacency, pattern.nnz(), 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shapes {ar}x{ac} * {br}x{bc}");
        self.push(Op::MatMul(a.0, b.0), ar, bc)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(bias), (1, c), "bias must be 1x{c}");
        self.push(Op::AddBias(x.0, bias.0), r, c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        self.push(Op::Relu(x.0), r, c)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        self.push(Op::LogSoftmax(x.0), r, c)
    }

    /// `scale * Σ_(r, c) -logp[r, c]`.
    pub fn nll(&mut self, logp: NodeId, targets: &[(usize, usize)], scale: f64) -> NodeId {
        let (r, c) = self.shape(logp);
        for &(row, class) in targets {
            assert!(row < r && class < c, "nll target ({row},{class}) out of {r}x{c}");
        }
        self.push(
            Op::Nll {
                logp: logp.0,
                targets: targets.into(),
                scale,
            },
            1,
            1,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "add shapes");
        self.push(Op::Add(a.0, b.0), s.0, s.1)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "sub shapes");
        self.push(Op::Sub(a.0, b.0), s.0, s.1)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a.0, k), r, c)
    }

    pub fn inner(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "inner shapes");
        self.push(Op::Inner(a.0, b.0), 1, 1)
    }

    pub fn row_norms(&mut self, x: NodeId) -> NodeId {
        let (r, _) = self.shape(x);
        self.push(Op::RowNorms(x.0), r, 1)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x.0), 1, 1)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), (1, 1), "div numerator must be scalar");
        assert_eq!(self.shape(b), (1, 1), "div denominator must be scalar");
        self.push(Op::Div(a.0, b.0), 1, 1)
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty(), "add_n of nothing");
        let s = self.shape(terms[0]);
        for t in terms {
            assert_eq!(self.shape(*t), s, "add_n shapes");
        }
        self.push(Op::AddN(terms.iter().map(|t| t.0).collect()), s.0, s.1)
    }

    pub fn pick_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(rows.iter().all(|&i| i < r), "pick_rows index out of range");
        self.push(Op::PickRows(x.0, rows.into()), rows.len(), c)
    }

    pub fn inv_sqrt_degree(&mut self, adj: NodeId, pattern: &Arc<SparsePattern>) -> NodeId {
        assert_eq!(self.shape(adj), (pattern.nnz(), 1), "adjacency weights vs pattern");
        self.push(
            Op::InvSqrtDegree {
                adj: adj.0,
                pattern: pattern.clone(),
            },
            pattern.dim(),
            1,
        )
    }

    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(s), (r, 1), "row_scale factor shape");
        self.push(Op::RowScale(x.0, s.0), r, c)
    }

    pub fn spmm(&mut self, adj: NodeId, x: NodeId, pattern: &Arc<SparsePattern>) -> NodeId {
        assert_eq!(self.shape(adj), (pattern.nnz(), 1), "adjacency weights vs pattern");
        let (r, c) = self.shape(x);
        assert_eq!(r, pattern.dim(), "spmm operand rows");
        self.push(
            Op::SpMM {
                adj: adj.0,
                x: x.0,
                pattern: pattern.clone(),
            },
            r,
            c,
        )
    }

    /// `D̃^(-1/2) (W + I) D̃^(-1/2) x` given the precomputed `D̃^(-1/2)`.
    pub fn normalized_propagate(
        &mut self,
        adj: NodeId,
        inv_sqrt_deg: NodeId,
        x: NodeId,
        pattern: &Arc<SparsePattern>,
    ) -> NodeId {
        let scaled = self.row_scale(x, inv_sqrt_deg);
        let mixed = self.spmm(adj, scaled, pattern);
        self.row_scale(mixed, inv_sqrt_deg)
    }

    pub fn edge_sq_dist(&mut self, adj: NodeId, h: NodeId, pattern: &Arc<SparsePattern>) -> NodeId {
        assert_eq!(self.shape(adj), (pattern.nnz(), 1), "adjacency weights vs pattern");
        assert_eq!(self.shape(h).0, pattern.dim(), "edge_sq_dist operand rows");
        self.push(
            Op::EdgeSqDist {
                adj: adj.0,
                h: h.0,
                pattern: pattern.clone(),
            },
            1,
            1,
        )
    }

    pub fn build(self, outputs: &[NodeId]) -> DiffProgram {
        let mut active = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            active[i] = match &node.op {
                Op::Input(s) => self.slots[*s].kind != SlotKind::Const,
                op => operands(op).iter().any(|&j| active[j]),
            };
        }
        DiffProgram {
            slots: self.slots,
            nodes: self.nodes,
            outputs: outputs.iter().map(|o| o.0).collect(),
            active,
        }
    }
}

fn operands(op: &Op) -> Vec<usize> {
    match op {
        Op::Input(_) => vec![],
        Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Inner(a, b)
        | Op::Div(a, b)
        | Op::RowScale(a, b) => vec![*a, *b],
        Op::Relu(a) | Op::LogSoftmax(a) | Op::Scale(a, _) | Op::RowNorms(a) | Op::Sum(a) => {
            vec![*a]
        }
        Op::Nll { logp, .. } => vec![*logp],
        Op::AddN(v) => v.clone(),
        Op::PickRows(a, _) => vec![*a],
        Op::InvSqrtDegree { adj, .. } => vec![*adj],
        Op::SpMM { adj, x, .. } => vec![*adj, *x],
        Op::EdgeSqDist { adj, h, .. } => vec![*adj, *h],
    }
}

impl DiffProgram {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn output_shape(&self, k: usize) -> (usize, usize) {
        let n = &self.nodes[self.outputs[k]];
        (n.rows, n.cols)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn check_bindings<T: Scalar>(&self, bindings: &[Mat<T>]) -> Result<(), DiffError> {
        if bindings.len() != self.slots.len() {
            return Err(DiffError::BindingCount {
                expected: self.slots.len(),
                got: bindings.len(),
            });
        }
        for (slot, m) in self.slots.iter().zip(bindings) {
            if m.shape() != (slot.rows, slot.cols) {
                return Err(DiffError::ShapeMismatch {
                    slot: slot.name.clone(),
                    expected: (slot.rows, slot.cols),
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }

    /// Runs the forward pass and keeps every intermediate value.
    pub fn forward<T: Scalar>(&self, bindings: &[Mat<T>]) -> Result<Trace<'_, T>, DiffError> {
        self.check_bindings(bindings)?;
        let mut values: Vec<Mat<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = eval_node(&node.op, &values, bindings);
            debug_assert_eq!(v.shape(), (node.rows, node.cols));
            values.push(v);
        }
        Ok(Trace {
            program: self,
            values,
        })
    }

    /// Output values at `bindings`.
    pub fn evaluate<T: Scalar>(&self, bindings: &[Mat<T>]) -> Result<Vec<Mat<T>>, DiffError> {
        let trace = self.forward(bindings)?;
        Ok(trace.outputs().into_iter().cloned().collect())
    }

    /// Reverse-mode products: gradients of `Σ_k <cotangent_k, output_k>`
    /// with respect to every slot.
    pub fn vjp<T: Scalar>(
        &self,
        bindings: &[Mat<T>],
        cotangents: &[Mat<T>],
    ) -> Result<Vec<Mat<T>>, DiffError> {
        self.forward(bindings)?.vjp(cotangents)
    }

    /// Forward-mode products along per-slot tangents (`None` holds a slot
    /// fixed).
    pub fn jvp<T: Scalar>(
        &self,
        bindings: &[Mat<T>],
        tangents: &[Option<Mat<T>>],
    ) -> Result<Vec<Mat<T>>, DiffError> {
        self.forward(bindings)?.jvp(tangents)
    }
}

/// Forward values of one evaluation.
pub struct Trace<'p, T> {
    program: &'p DiffProgram,
    values: Vec<Mat<T>>,
}

impl<'p, T: Scalar> Trace<'p, T> {
    pub fn program(&self) -> &'p DiffProgram {
        self.program
    }

    pub fn outputs(&self) -> Vec<&Mat<T>> {
        self.program.outputs.iter().map(|&i| &self.values[i]).collect()
    }

    pub fn output(&self, k: usize) -> &Mat<T> {
        &self.values[self.program.outputs[k]]
    }

    pub fn vjp(&self, cotangents: &[Mat<T>]) -> Result<Vec<Mat<T>>, DiffError> {
        let prog = self.program;
        if cotangents.len() != prog.outputs.len() {
            return Err(DiffError::CotangentCount {
                expected: prog.outputs.len(),
                got: cotangents.len(),
            });
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; prog.nodes.len()];
        for (k, (&o, ct)) in prog.outputs.iter().zip(cotangents).enumerate() {
            let node = &prog.nodes[o];
            if ct.shape() != (node.rows, node.cols) {
                return Err(DiffError::CotangentShape {
                    output: k,
                    expected: (node.rows, node.cols),
                    got: ct.shape(),
                });
            }
            accumulate(&mut grads, &prog.active, o, ct.clone());
        }
        let mut slot_grads: Vec<Mat<T>> = prog
            .slots
            .iter()
            .map(|s| Mat::zeros(s.rows, s.cols))
            .collect();
        for i in (0..prog.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &prog.nodes[i].op {
                Op::Input(s) => slot_grads[*s].add_assign(&g),
                op => backprop(op, i, &g, &self.values, &mut grads, &prog.active),
            }
        }
        Ok(slot_grads)
    }

    pub fn jvp(&self, tangents: &[Option<Mat<T>>]) -> Result<Vec<Mat<T>>, DiffError> {
        let prog = self.program;
        if tangents.len() != prog.slots.len() {
            return Err(DiffError::BindingCount {
                expected: prog.slots.len(),
                got: tangents.len(),
            });
        }
        for (slot, t) in prog.slots.iter().zip(tangents) {
            if let Some(t) = t {
                if t.shape() != (slot.rows, slot.cols) {
                    return Err(DiffError::TangentShape {
                        slot: slot.name.clone(),
                        expected: (slot.rows, slot.cols),
                        got: t.shape(),
                    });
                }
            }
        }
        let mut dots: Vec<Option<Mat<T>>> = Vec::with_capacity(prog.nodes.len());
        for node in &prog.nodes {
            let d = match &node.op {
                Op::Input(s) => tangents[*s].clone(),
                op => push_tangent(op, &self.values, &dots, node.rows, node.cols),
            };
            dots.push(d);
        }
        Ok(prog
            .outputs
            .iter()
            .map(|&o| {
                dots[o]
                    .clone()
                    .unwrap_or_else(|| Mat::zeros(prog.nodes[o].rows, prog.nodes[o].cols))
            })
            .collect())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], active: &[bool], i: usize, g: Mat<T>) {
    if !active[i] {
        return;
    }
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let shift = T::from_f64(m);
    let mut s = T::zero();
    for &x in row {
        s += (x - shift).exp();
    }
    shift + s.ln()
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    let mut ss = T::zero();
    for &x in row {
        ss += x * x;
    }
    if ss.re() == 0.0 {
        T::zero()
    } else {
        ss.sqrt()
    }
}

fn eval_node<T: Scalar>(op: &Op, v: &[Mat<T>], bindings: &[Mat<T>]) -> Mat<T> {
    match op {
        Op::Input(s) => bindings[*s].clone(),
        Op::MatMul(a, b) => v[*a].matmul(&v[*b]),
        Op::AddBias(x, b) => {
            let mut out = v[*x].clone();
            let bias = &v[*b].data;
            for r in 0..out.rows {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += bb;
                }
            }
            out
        }
        Op::Relu(x) => v[*x].map(|t| if t.re() > 0.0 { t } else { T::zero() }),
        Op::LogSoftmax(x) => {
            let mut out = v[*x].clone();
            for r in 0..out.rows {
                let lse = row_logsumexp(out.row(r));
                for o in out.row_mut(r) {
                    *o -= lse;
                }
            }
            out
        }
        Op::Nll {
            logp,
            targets,
            scale,
        } => {
            let lp = &v[*logp];
            let mut acc = T::zero();
            for &(r, c) in targets.iter() {
                acc -= lp.get(r, c);
            }
            Mat::scalar(acc.scale(*scale))
        }
        Op::Add(a, b) => {
            let mut out = v[*a].clone();
            out.add_assign(&v[*b]);
            out
        }
        Op::Sub(a, b) => {
            let mut out = v[*a].clone();
            for (o, &y) in out.data.iter_mut().zip(&v[*b].data) {
                *o -= y;
            }
            out
        }
        Op::Scale(a, k) => v[*a].map(|t| t.scale(*k)),
        Op::Inner(a, b) => {
            let mut acc = T::zero();
            for (&x, &y) in v[*a].data.iter().zip(&v[*b].data) {
                acc += x * y;
            }
            Mat::scalar(acc)
        }
        Op::RowNorms(x) => {
            let m = &v[*x];
            Mat::from_vec(m.rows, 1, (0..m.rows).map(|r| row_norm(m.row(r))).collect())
        }
        Op::Sum(x) => {
            let mut acc = T::zero();
            for &t in &v[*x].data {
                acc += t;
            }
            Mat::scalar(acc)
        }
        Op::Div(a, b) => Mat::scalar(v[*a].as_scalar() / v[*b].as_scalar()),
        Op::AddN(terms) => {
            let mut out = v[terms[0]].clone();
            for &t in &terms[1..] {
                out.add_assign(&v[t]);
            }
            out
        }
        Op::PickRows(x, rows) => {
            let m = &v[*x];
            let mut out = Mat::zeros(rows.len(), m.cols);
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(k).copy_from_slice(m.row(r));
            }
            out
        }
        Op::InvSqrtDegree { adj, pattern } => {
            let w = &v[*adj].data;
            let n = pattern.dim();
            let mut out = Mat::zeros(n, 1);
            for i in 0..n {
                let mut d = T::one();
                for e in pattern.row_range(i) {
                    d += w[e];
                }
                out.data[i] = T::one() / d.sqrt();
            }
            out
        }
        Op::RowScale(x, s) => {
            let mut out = v[*x].clone();
            let s = &v[*s].data;
            for r in 0..out.rows {
                let f = s[r];
                for o in out.row_mut(r) {
                    *o *= f;
                }
            }
            out
        }
        Op::SpMM { adj, x, pattern } => {
            let w = &v[*adj].data;
            let xm = &v[*x];
            let mut out = xm.clone();
            for i in 0..pattern.dim() {
                for e in pattern.row_range(i) {
                    let we = w[e];
                    let src = pattern.col_of(e);
                    for c in 0..xm.cols {
                        let t = we * xm.data[src * xm.cols + c];
                        out.data[i * xm.cols + c] += t;
                    }
                }
            }
            out
        }
        Op::EdgeSqDist { adj, h, pattern } => {
            let w = &v[*adj].data;
            let hm = &v[*h];
            let mut acc = T::zero();
            for (e, (r, c)) in pattern.entries().enumerate() {
                let mut d2 = T::zero();
                for (&a, &b) in hm.row(r).iter().zip(hm.row(c)) {
                    let d = a - b;
                    d2 += d * d;
                }
                acc += w[e] * d2;
            }
            Mat::scalar(acc)
        }
    }
}

fn backprop<T: Scalar>(
    op: &Op,
    self_index: usize,
    g: &Mat<T>,
    v: &[Mat<T>],
    grads: &mut [Option<Mat<T>>],
    active: &[bool],
) {
    match op {
        Op::Input(_) => unreachable!(),
        Op::MatMul(a, b) => {
            if active[*a] {
                accumulate(grads, active, *a, g.matmul_t(&v[*b]));
            }
            if active[*b] {
                accumulate(grads, active, *b, v[*a].t_matmul(g));
            }
        }
        Op::AddBias(x, b) => {
            accumulate(grads, active, *x, g.clone());
            if active[*b] {
                let mut gb = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &t) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += t;
                    }
                }
                accumulate(grads, active, *b, gb);
            }
        }
        Op::Relu(x) => {
            let xm = &v[*x];
            let mut gx = g.clone();
            for (o, &xv) in gx.data.iter_mut().zip(&xm.data) {
                if xv.re() <= 0.0 {
                    *o = T::zero();
                }
            }
            accumulate(grads, active, *x, gx);
        }
        Op::LogSoftmax(x) => {
            // y = log p; x̄ = ȳ - p Σ ȳ
            let y = &v[self_index];
            let mut gx = g.clone();
            for r in 0..g.rows {
                let mut s = T::zero();
                for &t in g.row(r) {
                    s += t;
                }
                let yr = y.row(r);
                for (o, &yl) in gx.row_mut(r).iter_mut().zip(yr) {
                    *o -= yl.exp() * s;
                }
            }
            accumulate(grads, active, *x, gx);
        }
        Op::Nll {
            logp,
            targets,
            scale,
        } => {
            let lp = &v[*logp];
            let mut gl = Mat::zeros(lp.rows, lp.cols);
            let coef = -g.as_scalar().scale(*scale);
            for &(r, c) in targets.iter() {
                let cur = gl.get(r, c);
                gl.set(r, c, cur + coef);
            }
            accumulate(grads, active, *logp, gl);
        }
        Op::Add(a, b) => {
            accumulate(grads, active, *a, g.clone());
            accumulate(grads, active, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, active, *a, g.clone());
            if active[*b] {
                accumulate(grads, active, *b, g.map(|t| -t));
            }
        }
        Op::Scale(a, k) => accumulate(grads, active, *a, g.map(|t| t.scale(*k))),
        Op::Inner(a, b) => {
            let s = g.as_scalar();
            if active[*a] {
                accumulate(grads, active, *a, v[*b].map(|t| t * s));
            }
            if active[*b] {
                accumulate(grads, active, *b, v[*a].map(|t| t * s));
            }
        }
        Op::RowNorms(x) => {
            let xm = &v[*x];
            let mut gx = Mat::zeros(xm.rows, xm.cols);
            for r in 0..xm.rows {
                let nrm = row_norm(xm.row(r));
                if nrm.re() == 0.0 {
                    continue;
                }
                let f = g.data[r] / nrm;
                for (o, &t) in gx.row_mut(r).iter_mut().zip(xm.row(r)) {
                    *o = t * f;
                }
            }
            accumulate(grads, active, *x, gx);
        }
        Op::Sum(x) => {
            let s = g.as_scalar();
            let xm = &v[*x];
            accumulate(grads, active, *x, Mat::from_vec(xm.rows, xm.cols, vec![s; xm.data.len()]));
        }
        Op::Div(a, b) => {
            let s = g.as_scalar();
            let bv = v[*b].as_scalar();
            if active[*a] {
                accumulate(grads, active, *a, Mat::scalar(s / bv));
            }
            if active[*b] {
                let av = v[*a].as_scalar();
                accumulate(grads, active, *b, Mat::scalar(-(s * av) / (bv * bv)));
            }
        }
        Op::AddN(terms) => {
            for &t in terms {
                accumulate(grads, active, t, g.clone());
            }
        }
        Op::PickRows(x, rows) => {
            let xm = &v[*x];
            let mut gx = Mat::zeros(xm.rows, xm.cols);
            for (k, &r) in rows.iter().enumerate() {
                for (o, &t) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                    *o += t;
                }
            }
            accumulate(grads, active, *x, gx);
        }
        Op::InvSqrtDegree { adj, pattern } => {
            // s_i = d_i^(-1/2), ds/dd = -s³/2
            let s = &v[self_index];
            let mut gw = Mat::zeros(pattern.nnz(), 1);
            for i in 0..pattern.dim() {
                let si = s.data[i];
                let gd = (g.data[i] * si * si * si).scale(-0.5);
                for e in pattern.row_range(i) {
                    gw.data[e] = gd;
                }
            }
            accumulate(grads, active, *adj, gw);
        }
        Op::RowScale(x, s) => {
            let xm = &v[*x];
            let sv = &v[*s].data;
            if active[*x] {
                let mut gx = g.clone();
                for r in 0..gx.rows {
                    let f = sv[r];
                    for o in gx.row_mut(r) {
                        *o *= f;
                    }
                }
                accumulate(grads, active, *x, gx);
            }
            if active[*s] {
                let mut gs = Mat::zeros(xm.rows, 1);
                for r in 0..xm.rows {
                    let mut acc = T::zero();
                    for (&a, &b) in g.row(r).iter().zip(xm.row(r)) {
                        acc += a * b;
                    }
                    gs.data[r] = acc;
                }
                accumulate(grads, active, *s, gs);
            }
        }
        Op::SpMM { adj, x, pattern } => {
            let w = &v[*adj].data;
            let xm = &v[*x];
            if active[*x] {
                let mut gx = g.clone();
                for i in 0..pattern.dim() {
                    for e in pattern.row_range(i) {
                        let we = w[e];
                        let src = pattern.col_of(e);
                        for c in 0..xm.cols {
                            let t = we * g.data[i * xm.cols + c];
                            gx.data[src * xm.cols + c] += t;
                        }
                    }
                }
                accumulate(grads, active, *x, gx);
            }
            if active[*adj] {
                let mut gw = Mat::zeros(pattern.nnz(), 1);
                for (e, (r, c)) in pattern.entries().enumerate() {
                    let mut acc = T::zero();
                    for (&a, &b) in g.row(r).iter().zip(xm.row(c)) {
                        acc += a * b;
                    }
                    gw.data[e] = acc;
                }
                accumulate(grads, active, *adj, gw);
            }
        }
        Op::EdgeSqDist { adj, h, pattern } => {
            let w = &v[*adj].data;
            let hm = &v[*h];
            let s = g.as_scalar();
            let mut gw = Mat::zeros(pattern.nnz(), 1);
            let mut gh = Mat::zeros(hm.rows, hm.cols);
            for (e, (r, c)) in pattern.entries().enumerate() {
                let mut d2 = T::zero();
                for k in 0..hm.cols {
                    let d = hm.get(r, k) - hm.get(c, k);
                    d2 += d * d;
                    let t = (s * w[e] * d).scale(2.0);
                    gh.data[r * hm.cols + k] += t;
                    gh.data[c * hm.cols + k] -= t;
                }
                gw.data[e] = s * d2;
            }
            if active[*adj] {
                accumulate(grads, active, *adj, gw);
            }
            if active[*h] {
                accumulate(grads, active, *h, gh);
            }
        }
    }
}

fn zero_or<T: Scalar>(d: &Option<Mat<T>>, rows: usize, cols: usize) -> Mat<T> {
    d.clone().unwrap_or_else(|| Mat::zeros(rows, cols))
}

fn push_tangent<T: Scalar>(
    op: &Op,
    v: &[Mat<T>],
    dots: &[Option<Mat<T>>],
    rows: usize,
    cols: usize,
) -> Option<Mat<T>> {
    let any = operands(op).iter().any(|&j| dots[j].is_some());
    if !any {
        return None;
    }
    let self_index = dots.len();
    let out = match op {
        Op::Input(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let mut out = Mat::zeros(rows, cols);
            if let Some(da) = &dots[*a] {
                out.add_assign(&da.matmul(&v[*b]));
            }
            if let Some(db) = &dots[*b] {
                out.add_assign(&v[*a].matmul(db));
            }
            out
        }
        Op::AddBias(x, b) => {
            let mut out = zero_or(&dots[*x], rows, cols);
            if let Some(db) = &dots[*b] {
                for r in 0..rows {
                    for (o, &t) in out.row_mut(r).iter_mut().zip(&db.data) {
                        *o += t;
                    }
                }
            }
            out
        }
        Op::Relu(x) => {
            let mut out = zero_or(&dots[*x], rows, cols);
            for (o, &xv) in out.data.iter_mut().zip(&v[*x].data) {
                if xv.re() <= 0.0 {
                    *o = T::zero();
                }
            }
            out
        }
        Op::LogSoftmax(x) => {
            let y = &v[self_index];
            let mut out = zero_or(&dots[*x], rows, cols);
            for r in 0..rows {
                let mut s = T::zero();
                for (&t, &yl) in out.row(r).iter().zip(y.row(r)) {
                    s += yl.exp() * t;
                }
                for o in out.row_mut(r) {
                    *o -= s;
                }
            }
            out
        }
        Op::Nll {
            logp,
            targets,
            scale,
        } => {
            let d = dots[*logp].as_ref().expect("checked");
            let mut acc = T::zero();
            for &(r, c) in targets.iter() {
                acc -= d.get(r, c);
            }
            Mat::scalar(acc.scale(*scale))
        }
        Op::Add(a, b) => {
            let mut out = zero_or(&dots[*a], rows, cols);
            if let Some(db) = &dots[*b] {
                out.add_assign(db);
            }
            out
        }
        Op::Sub(a, b) => {
            let mut out = zero_or(&dots[*a], rows, cols);
            if let Some(db) = &dots[*b] {
                for (o, &t) in out.data.iter_mut().zip(&db.data) {
                    *o -= t;
                }
            }
            out
        }
        Op::Scale(a, k) => dots[*a].as_ref().expect("checked").map(|t| t.scale(*k)),
        Op::Inner(a, b) => {
            let mut acc = T::zero();
            if let Some(da) = &dots[*a] {
                for (&x, &y) in da.data.iter().zip(&v[*b].data) {
                    acc += x * y;
                }
            }
            if let Some(db) = &dots[*b] {
                for (&x, &y) in v[*a].data.iter().zip(&db.data) {
                    acc += x * y;
                }
            }
            Mat::scalar(acc)
        }
        Op::RowNorms(x) => {
            let xm = &v[*x];
            let dx = dots[*x].as_ref().expect("checked");
            let nrm = &v[self_index];
            let mut out = Mat::zeros(rows, 1);
            for r in 0..rows {
                let n = nrm.data[r];
                if n.re() == 0.0 {
                    continue;
                }
                let mut acc = T::zero();
                for (&a, &b) in xm.row(r).iter().zip(dx.row(r)) {
                    acc += a * b;
                }
                out.data[r] = acc / n;
            }
            out
        }
        Op::Sum(x) => {
            let mut acc = T::zero();
            for &t in &dots[*x].as_ref().expect("checked").data {
                acc += t;
            }
            Mat::scalar(acc)
        }
        Op::Div(a, b) => {
            let bv = v[*b].as_scalar();
            let q = v[self_index].as_scalar();
            let mut acc = T::zero();
            if let Some(da) = &dots[*a] {
                acc += da.as_scalar();
            }
            if let Some(db) = &dots[*b] {
                acc -= q * db.as_scalar();
            }
            Mat::scalar(acc / bv)
        }
        Op::AddN(terms) => {
            let mut out = Mat::zeros(rows, cols);
            for &t in terms {
                if let Some(d) = &dots[t] {
                    out.add_assign(d);
                }
            }
            out
        }
        Op::PickRows(x, idx) => {
            let dx = dots[*x].as_ref().expect("checked");
            let mut out = Mat::zeros(rows, cols);
            for (k, &r) in idx.iter().enumerate() {
                out.row_mut(k).copy_from_slice(dx.row(r));
            }
            out
        }
        Op::InvSqrtDegree { adj, pattern } => {
            let dw = &dots[*adj].as_ref().expect("checked").data;
            let s = &v[self_index].data;
            let mut out = Mat::zeros(rows, 1);
            for i in 0..pattern.dim() {
                let mut dd = T::zero();
                for e in pattern.row_range(i) {
                    dd += dw[e];
                }
                let si = s[i];
                out.data[i] = (si * si * si * dd).scale(-0.5);
            }
            out
        }
        Op::RowScale(x, s) => {
            let sv = &v[*s].data;
            let mut out = Mat::zeros(rows, cols);
            if let Some(dx) = &dots[*x] {
                for r in 0..rows {
                    for (o, &t) in out.row_mut(r).iter_mut().zip(dx.row(r)) {
                        *o += sv[r] * t;
                    }
                }
            }
            if let Some(ds) = &dots[*s] {
                let xm = &v[*x];
                for r in 0..rows {
                    let f = ds.data[r];
                    for (o, &t) in out.row_mut(r).iter_mut().zip(xm.row(r)) {
                        *o += f * t;
                    }
                }
            }
            out
        }
        Op::SpMM { adj, x, pattern } => {
            let w = &v[*adj].data;
            let xm = &v[*x];
            let mut out = Mat::zeros(rows, cols);
            if let Some(dx) = &dots[*x] {
                out.add_assign(dx);
                for i in 0..pattern.dim() {
                    for e in pattern.row_range(i) {
                        let src = pattern.col_of(e);
                        for c in 0..cols {
                            let t = w[e] * dx.data[src * cols + c];
                            out.data[i * cols + c] += t;
                        }
                    }
                }
            }
            if let Some(dw) = &dots[*adj] {
                for i in 0..pattern.dim() {
                    for e in pattern.row_range(i) {
                        let src = pattern.col_of(e);
                        for c in 0..cols {
                            let t = dw.data[e] * xm.data[src * cols + c];
                            out.data[i * cols + c] += t;
                        }
                    }
                }
            }
            out
        }
        Op::EdgeSqDist { adj, h, pattern } => {
            let w = &v[*adj].data;
            let hm = &v[*h];
            let mut acc = T::zero();
            for (e, (r, c)) in pattern.entries().enumerate() {
                if let Some(dw) = &dots[*adj] {
                    let mut d2 = T::zero();
                    for (&a, &b) in hm.row(r).iter().zip(hm.row(c)) {
                        let d = a - b;
                        d2 += d * d;
                    }
                    acc += dw.data[e] * d2;
                }
                if let Some(dh) = &dots[*h] {
                    let mut lin = T::zero();
                    for k in 0..hm.cols {
                        let d = hm.get(r, k) - hm.get(c, k);
                        let dd = dh.get(r, k) - dh.get(c, k);
                        lin += d * dd;
                    }
                    acc += (w[e] * lin).scale(2.0);
                }
            }
            Mat::scalar(acc)
        }
    };
    Some(out)
}
