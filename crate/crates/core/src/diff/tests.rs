use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_pattern(rng: &mut ChaCha8Rng, n: usize, p: f64) -> SparsePattern {
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                pairs.push((u, v));
            }
        }
    }
    SparsePattern::symmetric(n, pairs)
}

#[test]
fn identity_program_returns_input() {
    let mut b = ProgramBuilder::new();
    let x = b.param("x", 1, 3);
    let prog = b.build(&[x]);
    let out = prog.evaluate(&[Mat::from_vec(1, 3, vec![1.0, -2.0, 3.5])]).unwrap();
    assert_eq!(out[0].data, vec![1.0, -2.0, 3.5]);
}

#[test]
fn relu_clamps_negatives() {
    let mut b = ProgramBuilder::new();
    let x = b.param("x", 1, 2);
    let y = b.relu(x);
    let prog = b.build(&[y]);
    let out = prog.evaluate(&[Mat::from_vec(1, 2, vec![-1.0, 2.0])]).unwrap();
    assert_eq!(out[0].data, vec![0.0, 2.0]);
}

#[test]
fn uniform_logits_cross_entropy_is_log_c() {
    let mut b = ProgramBuilder::new();
    let x = b.param("logits", 3, 4);
    let lp = b.log_softmax(x);
    let loss = b.nll(lp, &[(0, 1), (2, 3)], 0.5);
    let prog = b.build(&[loss]);
    let out = prog.evaluate(&[Mat::<f64>::zeros(3, 4)]).unwrap();
    assert!((out[0].as_scalar() - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn quadratic_gradient() {
    let mut b = ProgramBuilder::new();
    let t = b.param("theta", 1, 2);
    let q = b.inner(t, t);
    let prog = b.build(&[q]);
    let theta = Mat::from_vec(1, 2, vec![1.0, 2.0]);
    let g = prog.vjp(&[theta.clone()], &[Mat::scalar(1.0)]).unwrap();
    assert_eq!(g[0].data, vec![2.0, 4.0]);
    let g0 = prog.vjp(&[theta], &[Mat::scalar(0.0)]).unwrap();
    assert_eq!(g0[0].data, vec![0.0, 0.0]);
}

#[test]
fn linear_jvp() {
    let mut b = ProgramBuilder::new();
    let w = b.param("w", 2, 3);
    let x = b.constant("x", 3, 1);
    let y = b.matmul(w, x);
    let prog = b.build(&[y]);
    let wv = Mat::from_vec(2, 3, vec![1.0, 0.0, 2.0, -1.0, 3.0, 1.0]);
    let xv = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
    let dw = Mat::from_vec(2, 3, vec![0.5, 1.0, 0.0, 0.0, 0.0, -1.0]);
    let out = prog
        .jvp(&[wv.clone(), xv.clone()], &[Some(dw.clone()), None])
        .unwrap();
    assert_eq!(out[0].data, dw.matmul(&xv).data);
    let zero = prog
        .jvp(&[wv, xv], &[Some(Mat::zeros(2, 3)), None])
        .unwrap();
    assert_eq!(zero[0].data, vec![0.0, 0.0]);
}

#[test]
fn finite_difference_of_square() {
    let mut b = ProgramBuilder::new();
    let x = b.param("x", 1, 1);
    let q = b.inner(x, x);
    let prog = b.build(&[q]);
    let g = finite_difference_gradient(&prog, &[Mat::scalar(3.0)], 0, 1e-5).unwrap();
    assert!((g.as_scalar() - 6.0).abs() < 1e-8);

    let mut b = ProgramBuilder::new();
    let x = b.param("x", 1, 1);
    let c = b.constant("c", 1, 1);
    let k = b.inner(c, c);
    let _ = x;
    let prog = b.build(&[k]);
    let g = finite_difference_gradient(&prog, &[Mat::scalar(3.0), Mat::scalar(2.0)], 0, 1e-5)
        .unwrap();
    assert!(g.as_scalar().abs() < 1e-10);
}

#[test]
fn finite_difference_rejects_vector_output() {
    let mut b = ProgramBuilder::new();
    let x = b.param("x", 1, 2);
    let prog = b.build(&[x]);
    let err = finite_difference_gradient(&prog, &[Mat::zeros(1, 2)], 0, 1e-5).unwrap_err();
    assert_eq!(err, DiffError::NonScalarOutput((1, 2)));
}

#[test]
fn binding_errors_are_reported() {
    let mut b = ProgramBuilder::new();
    let x = b.param("x", 2, 2);
    let prog = b.build(&[x]);
    assert!(matches!(
        prog.evaluate::<f64>(&[]),
        Err(DiffError::BindingCount { expected: 1, got: 0 })
    ));
    assert!(matches!(
        prog.evaluate(&[Mat::<f64>::zeros(1, 2)]),
        Err(DiffError::ShapeMismatch { .. })
    ));
    assert!(matches!(
        prog.vjp(&[Mat::<f64>::zeros(2, 2)], &[Mat::zeros(1, 1)]),
        Err(DiffError::CotangentShape { .. })
    ));
    assert!(matches!(
        prog.jvp(&[Mat::<f64>::zeros(2, 2)], &[Some(Mat::zeros(3, 1))]),
        Err(DiffError::TangentShape { .. })
    ));
}

#[test]
fn layout_round_trip() {
    let layout = BlockLayout {
        blocks: vec![
            Block { name: "a".into(), rows: 2, cols: 3 },
            Block { name: "b".into(), rows: 1, cols: 3 },
        ],
    };
    let flat: Vec<f64> = (0..9).map(f64::from).collect();
    let mats = layout.split(&flat).unwrap();
    assert_eq!(mats[1].data, vec![6.0, 7.0, 8.0]);
    assert_eq!(layout.concat(&mats).unwrap(), flat);
    assert!(layout.split(&flat[..8]).is_err());
}

/// Builds a scalar program that exercises one operator between random
/// inputs; the scalar is `<op(...), R>` for a random constant `R`.
struct OpCase {
    prog: DiffProgram,
    bindings: Vec<Mat<f64>>,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpCase)> {
    let n = rng.gen_range(3..=8);
    let c = rng.gen_range(1..=5);
    let k = rng.gen_range(1..=5);
    let pattern = Arc::new(rand_pattern(rng, n, 0.5));
    let mut cases = Vec::new();

    let scalarize = |b: &mut ProgramBuilder, y: NodeId, shape: (usize, usize)| {
        let r = b.constant("r", shape.0, shape.1);
        b.inner(y, r)
    };

    macro_rules! case {
        ($name:expr, |$b:ident| $body:block, $inputs:expr) => {{
            let mut $b = ProgramBuilder::new();
            let (y, shape) = $body;
            let s = scalarize(&mut $b, y, shape);
            let prog = $b.build(&[s]);
            let mut bindings: Vec<Mat<f64>> = $inputs;
            bindings.push(rand_mat(rng, shape.0, shape.1));
            cases.push(($name, OpCase { prog, bindings }));
        }};
    }

    case!("matmul", |b| {
        let a = b.param("a", n, c);
        let w = b.param("w", c, k);
        (b.matmul(a, w), (n, k))
    }, vec![rand_mat(rng, n, c), rand_mat(rng, c, k)]);
    case!("add_bias", |b| {
        let a = b.param("a", n, c);
        let w = b.param("b", 1, c);
        (b.add_bias(a, w), (n, c))
    }, vec![rand_mat(rng, n, c), rand_mat(rng, 1, c)]);
    case!("relu", |b| {
        let a = b.param("a", n, c);
        (b.relu(a), (n, c))
    }, vec![rand_mat(rng, n, c)]);
    case!("log_softmax", |b| {
        let a = b.param("a", n, c);
        (b.log_softmax(a), (n, c))
    }, vec![rand_mat(rng, n, c)]);
    let targets: Vec<(usize, usize)> = (0..n).step_by(2).map(|r| (r, r % c)).collect();
    case!("nll", |b| {
        let a = b.param("a", n, c);
        let lp = b.log_softmax(a);
        (b.nll(lp, &targets, 0.7), (1, 1))
    }, vec![rand_mat(rng, n, c)]);
    case!("add_sub_scale", |b| {
        let a = b.param("a", n, c);
        let d = b.param("d", n, c);
        let s = b.sub(a, d);
        let t = b.add(s, a);
        (b.scale(t, -1.5), (n, c))
    }, vec![rand_mat(rng, n, c), rand_mat(rng, n, c)]);
    case!("row_norms", |b| {
        let a = b.param("a", n, c);
        (b.row_norms(a), (n, 1))
    }, vec![rand_mat(rng, n, c)]);
    case!("sum_div", |b| {
        let a = b.param("a", n, c);
        let d = b.param("d", 1, 1);
        let s = b.sum(a);
        (b.div(s, d), (1, 1))
    }, vec![rand_mat(rng, n, c), Mat::scalar(rng.gen_range(1.0..2.0))]);
    case!("add_n_pick_rows", |b| {
        let a = b.param("a", n, c);
        let p = b.pick_rows(a, &[0, n - 1, 0]);
        let q = b.pick_rows(a, &[1, 1, 2]);
        (b.add_n(&[p, q, p]), (3, c))
    }, vec![rand_mat(rng, n, c)]);
    let pat = pattern.clone();
    case!("inv_sqrt_degree", |b| {
        let w = b.adjacency("w", &pat);
        (b.inv_sqrt_degree(w, &pat), (n, 1))
    }, vec![Mat::from_vec(pat.nnz(), 1, (0..pat.nnz()).map(|_| rng.gen_range(0.0..1.5)).collect())]);
    let pat = pattern.clone();
    case!("row_scale", |b| {
        let a = b.param("a", n, c);
        let s = b.param("s", n, 1);
        (b.row_scale(a, s), (n, c))
    }, vec![rand_mat(rng, n, c), rand_mat(rng, n, 1)]);
    case!("spmm", |b| {
        let w = b.adjacency("w", &pat);
        let a = b.param("a", n, c);
        (b.spmm(w, a, &pat), (n, c))
    }, vec![Mat::from_vec(pat.nnz(), 1, (0..pat.nnz()).map(|_| rng.gen_range(0.0..1.5)).collect()), rand_mat(rng, n, c)]);
    let pat = pattern.clone();
    case!("normalized_propagate", |b| {
        let w = b.adjacency("w", &pat);
        let a = b.param("a", n, c);
        let s = b.inv_sqrt_degree(w, &pat);
        (b.normalized_propagate(w, s, a, &pat), (n, c))
    }, vec![Mat::from_vec(pat.nnz(), 1, (0..pat.nnz()).map(|e| if e % 3 == 0 { 0.0 } else { 1.0 }).collect()), rand_mat(rng, n, c)]);
    let pat = pattern.clone();
    case!("edge_sq_dist", |b| {
        let w = b.adjacency("w", &pat);
        let h = b.param("h", n, c);
        (b.edge_sq_dist(w, h, &pat), (1, 1))
    }, vec![Mat::from_vec(pat.nnz(), 1, (0..pat.nnz()).map(|_| rng.gen_range(0.0..1.5)).collect()), rand_mat(rng, n, c)]);
    cases
}

#[test]
fn every_operator_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _round in 0..5 {
        for (name, case) in op_cases(&mut rng) {
            let grads = case.prog.vjp(&case.bindings, &[Mat::scalar(1.0)]).unwrap();
            for (slot, meta) in case.prog.slots().iter().enumerate() {
                if meta.kind == SlotKind::Const {
                    continue;
                }
                let fd = finite_difference_gradient(&case.prog, &case.bindings, slot, 1e-6).unwrap();
                let err = max_relative_error(&grads[slot].data, &fd.data, 1e-6);
                assert!(err <= 1e-4, "{name} slot {} rel err {err}", meta.name);
            }
        }
    }
}

#[test]
fn jvp_is_transpose_of_vjp_for_every_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, case) in op_cases(&mut rng) {
        let trace = case.prog.forward(&case.bindings).unwrap();
        let tangents: Vec<Option<Mat<f64>>> = case
            .prog
            .slots()
            .iter()
            .map(|s| (s.kind != SlotKind::Const).then(|| rand_mat(&mut rng, s.rows, s.cols)))
            .collect();
        let u = rng.gen_range(-1.0..1.0);
        let jw = trace.jvp(&tangents).unwrap()[0].as_scalar();
        let jtu = trace.vjp(&[Mat::scalar(u)]).unwrap();
        let mut rhs = 0.0;
        for (g, t) in jtu.iter().zip(&tangents) {
            if let Some(t) = t {
                rhs += g.data.iter().zip(&t.data).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let lhs = u * jw;
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12),
            "{name}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn repeated_evaluation_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (_, case) in op_cases(&mut rng) {
        let a = case.prog.evaluate(&case.bindings).unwrap();
        let b = case.prog.evaluate(&case.bindings).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn dual_reverse_pass_gives_hessian_vector_products() {
    // f(x) = Σ log-softmax-nll(x W) ; Hv by forward-over-reverse vs FD of gradients
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut b = ProgramBuilder::new();
    let x = b.constant("x", 5, 3);
    let w = b.param("w", 3, 4);
    let z = b.matmul(x, w);
    let h = b.relu(z);
    let lp = b.log_softmax(h);
    let loss = b.nll(lp, &[(0, 1), (1, 2), (3, 0), (4, 3)], 1.0);
    let prog = b.build(&[loss]);
    let xv = rand_mat(&mut rng, 5, 3);
    let wv = rand_mat(&mut rng, 3, 4);
    let v = rand_mat(&mut rng, 3, 4);

    let to_dual = |m: &Mat<f64>, t: Option<&Mat<f64>>| {
        Mat::from_vec(
            m.rows,
            m.cols,
            m.data
                .iter()
                .enumerate()
                .map(|(i, &a)| Dual::new(a, t.map_or(0.0, |t| t.data[i])))
                .collect(),
        )
    };
    let g = prog
        .vjp(
            &[to_dual(&xv, None), to_dual(&wv, Some(&v))],
            &[Mat::scalar(Dual::new(1.0, 0.0))],
        )
        .unwrap();
    let hv: Vec<f64> = g[1].data.iter().map(|d| d.du).collect();

    let grad_at = |wm: &Mat<f64>| prog.vjp(&[xv.clone(), wm.clone()], &[Mat::scalar(1.0)]).unwrap()[1].clone();
    let eps = 1e-6;
    let mut wp = wv.clone();
    let mut wm = wv.clone();
    for i in 0..wv.data.len() {
        wp.data[i] += eps * v.data[i];
        wm.data[i] -= eps * v.data[i];
    }
    let gp = grad_at(&wp);
    let gm = grad_at(&wm);
    let fd: Vec<f64> = gp.data.iter().zip(&gm.data).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    assert!(max_relative_error(&hv, &fd, 1e-6) < 1e-4);
}
