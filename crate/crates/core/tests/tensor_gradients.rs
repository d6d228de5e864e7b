//! Finite-difference checks for every differentiable tape operation.

use longsum_core::tensor::{grad_check, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

type Builder = fn(&mut Tape, &[Var], &mut ChaCha8Rng) -> Result<Var, TensorError>;

/// Builds a store of random inputs with the given shapes and checks that
/// `sum(op(inputs) ⊙ w)` has matching analytic and numeric gradients, where
/// `w` is a fixed random weighting so every output element matters.
fn check_op(name: &str, shapes: impl Fn(&mut ChaCha8Rng) -> Vec<(usize, usize)>, build: Builder) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = shapes(&mut rng);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.insert(format!("in{i}"), Tensor::randn(r, c, 1.0, &mut rng)))
            .collect();
        let weight_seed = rng.gen::<u64>();
        let report = grad_check(&store, 1e-5, |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let mut local = ChaCha8Rng::seed_from_u64(weight_seed);
            let out = build(tape, &vars, &mut local)?;
            let shape = tape.value(out).shape().to_vec();
            let w = Tensor::randn(shape[0], shape[1], 1.0, &mut local);
            let w = tape.constant(w);
            let weighted = tape.mul(out, w)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

#[test]
fn matmul_grads() {
    check_op(
        "matmul",
        |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..5);
            vec![(m, k), (k, n)]
        },
        |t, v, _| t.matmul(v[0], v[1]),
    );
}

#[test]
fn matmul_bt_grads() {
    check_op(
        "matmul_bt",
        |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..5);
            vec![(m, k), (n, k)]
        },
        |t, v, _| t.matmul_bt(v[0], v[1]),
    );
}

#[test]
fn elementwise_binary_grads() {
    check_op("add", |r| { let d = dims(r); vec![d, d] }, |t, v, _| t.add(v[0], v[1]));
    check_op("sub", |r| { let d = dims(r); vec![d, d] }, |t, v, _| t.sub(v[0], v[1]));
    check_op("mul", |r| { let d = dims(r); vec![d, d] }, |t, v, _| t.mul(v[0], v[1]));
}

#[test]
fn broadcast_grads() {
    check_op(
        "add_row",
        |r| { let (m, n) = dims(r); vec![(m, n), (1, n)] },
        |t, v, _| t.add_row(v[0], v[1]),
    );
    check_op(
        "mul_col",
        |r| { let (m, n) = dims(r); vec![(m, n), (m, 1)] },
        |t, v, _| t.mul_col(v[0], v[1]),
    );
}

#[test]
fn unary_grads() {
    check_op("transpose", |r| vec![dims(r)], |t, v, _| Ok(t.transpose(v[0])));
    check_op("scale", |r| vec![dims(r)], |t, v, _| Ok(t.scale(v[0], -1.7)));
    check_op("one_minus", |r| vec![dims(r)], |t, v, _| Ok(t.one_minus(v[0])));
    check_op("gelu", |r| vec![dims(r)], |t, v, _| Ok(t.gelu(v[0])));
    check_op("tanh", |r| vec![dims(r)], |t, v, _| Ok(t.tanh(v[0])));
    check_op("sigmoid", |r| vec![dims(r)], |t, v, _| Ok(t.sigmoid(v[0])));
    check_op(
        "log",
        |r| vec![dims(r)],
        |t, v, _| {
            // keep the argument positive
            let sq = t.mul(v[0], v[0])?;
            let pos = t.add_scalar(sq, 0.5);
            Ok(t.log(pos))
        },
    );
    check_op(
        "mean",
        |r| vec![dims(r)],
        |t, v, _| Ok(t.mean(v[0])),
    );
}

#[test]
fn softmax_grads_both_axes() {
    check_op("softmax rows", |r| vec![dims(r)], |t, v, _| t.softmax(v[0], 1));
    check_op("softmax cols", |r| vec![dims(r)], |t, v, _| t.softmax(v[0], 0));
}

#[test]
fn masked_softmax_grads() {
    check_op(
        "masked_softmax",
        |r| vec![dims(r)],
        |t, v, rng| {
            let n = t.value(v[0]).len();
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            t.masked_softmax(v[0], &mask)
        },
    );
}

#[test]
fn layer_norm_grads() {
    check_op(
        "layer_norm",
        |r| {
            let m = r.gen_range(1..4);
            let n = r.gen_range(2..7);
            vec![(m, n), (1, n), (1, n)]
        },
        |t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn cross_entropy_grads() {
    check_op(
        "cross_entropy",
        |r| {
            let m = r.gen_range(1..5);
            let n = r.gen_range(2..6);
            vec![(m, n)]
        },
        |t, v, rng| {
            let (rows, cols) = (t.value(v[0]).rows(), t.value(v[0]).cols());
            let mut targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..cols as u32)).collect();
            if rows > 1 {
                targets[rows - 1] = 999;
            }
            t.cross_entropy(v[0], &targets, 999)
        },
    );
}

#[test]
fn cross_entropy_two_by_three_under_1e5() {
    let mut store = ParamStore::new();
    let id = store.insert(
        "logits",
        Tensor::from_rows(&[vec![0.2, -1.3, 0.7], vec![2.0, 0.1, -0.4]]).unwrap(),
    );
    let report = grad_check(&store, 1e-5, |t, s| {
        let x = t.param(s, id);
        t.cross_entropy(x, &[2, 0], u32::MAX)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn nll_probs_grads() {
    check_op(
        "nll_probs",
        |r| {
            let m = r.gen_range(1..5);
            let n = r.gen_range(2..6);
            vec![(m, n)]
        },
        |t, v, rng| {
            let (rows, cols) = (t.value(v[0]).rows(), t.value(v[0]).cols());
            let p = t.softmax(v[0], 1)?;
            let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..cols as u32)).collect();
            t.nll_probs(p, &targets, u32::MAX)
        },
    );
}

#[test]
fn embedding_and_reshaping_grads() {
    check_op(
        "embedding",
        |r| vec![(r.gen_range(2..6), r.gen_range(1..4))],
        |t, v, rng| {
            let rows = t.value(v[0]).rows() as u32;
            let ids: Vec<u32> = (0..5).map(|_| rng.gen_range(0..rows)).collect();
            t.embedding(v[0], &ids)
        },
    );
    check_op(
        "slice_cols+concat_cols",
        |r| vec![(r.gen_range(1..4), r.gen_range(3..7))],
        |t, v, _| {
            let cols = t.value(v[0]).cols();
            let a = t.slice_cols(v[0], 0, 2)?;
            let b = t.slice_cols(v[0], 1, cols - 1)?;
            t.concat_cols(&[b, a])
        },
    );
    check_op(
        "slice_rows+concat_rows",
        |r| vec![(r.gen_range(2..5), r.gen_range(1..4))],
        |t, v, _| {
            let rows = t.value(v[0]).rows();
            let a = t.slice_rows(v[0], 1, rows - 1)?;
            let b = t.slice_rows(v[0], 0, 1)?;
            t.concat_rows(&[a, b, b])
        },
    );
    check_op(
        "scatter_cols",
        |r| vec![(r.gen_range(1..4), r.gen_range(1..6))],
        |t, v, rng| {
            let cols = t.value(v[0]).cols();
            let index: Vec<usize> = (0..cols).map(|_| rng.gen_range(0..4)).collect();
            t.scatter_cols(v[0], &index, 4)
        },
    );
}

#[test]
fn dropout_training_grads() {
    check_op(
        "dropout",
        |r| vec![dims(r)],
        |t, v, rng| Ok(t.dropout(v[0], 0.3, true, rng)),
    );
}

#[test]
fn topologically_different_equal_graphs_have_equal_grads() {
    // (a+b)·c versus a·c + b·c
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::randn(3, 4, 1.0, &mut rng);
    let b = Tensor::randn(3, 4, 1.0, &mut rng);
    let c = Tensor::randn(4, 2, 1.0, &mut rng);
    let grads_of = |factored: bool| {
        let mut tape = Tape::new();
        let (va, vb, vc) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(c.clone()));
        let out = if factored {
            let s = tape.add(va, vb).unwrap();
            tape.matmul(s, vc).unwrap()
        } else {
            let x = tape.matmul(va, vc).unwrap();
            let y = tape.matmul(vb, vc).unwrap();
            tape.add(x, y).unwrap()
        };
        let l = tape.sum(out);
        let g = tape.gradients(l).unwrap();
        (g.get(va).unwrap().clone(), g.get(vb).unwrap().clone(), g.get(vc).unwrap().clone())
    };
    let (a1, b1, c1) = grads_of(true);
    let (a2, b2, c2) = grads_of(false);
    assert!(a1.max_abs_diff(&a2) < 1e-10);
    assert!(b1.max_abs_diff(&b2) < 1e-10);
    assert!(c1.max_abs_diff(&c2) < 1e-10);
}

mod softmax_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rows_sum_to_one_and_shift_invariant(
            values in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::row(values.clone()));
            let y = tape.softmax(x, 1).unwrap();
            let xs = tape.leaf(Tensor::row(values.iter().map(|v| v + shift).collect()));
            let ys = tape.softmax(xs, 1).unwrap();
            let sum: f64 = tape.value(y).data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-12);
        }
    }
}
