//! Sparse attention against the dense masked reference.

use longsum_core::attention::{
    attention_op_count, cross_attention, dense_attention, dense_attention_allowed,
    sparse_equivalent_mask, window_pair_count, windowed_global_attention, AttentionConfig,
    AttentionMask,
};
use longsum_core::tensor::{grad_check, ParamStore, Tape, Tensor};
use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w: Tensor,
    cfg: AttentionConfig,
    mask: AttentionMask,
}

fn random_case(rng: &mut ChaCha8Rng, n: usize, r: usize, globals: usize, padded: bool) -> Case {
    let d = rng.gen_range(1..6);
    let g: Vec<usize> = sample(rng, n, globals.min(n)).into_vec();
    let len = if padded { rng.gen_range(1..=n) } else { n };
    let cfg = AttentionConfig::single_head(r, g.clone(), d);
    Case {
        q: Tensor::randn(n, d, 1.0, rng),
        k: Tensor::randn(n, d, 1.0, rng),
        v: Tensor::randn(n, d, 1.0, rng),
        w: Tensor::randn(n, d, 1.0, rng),
        mask: AttentionMask::with_length(n, len).with_globals(&g),
        cfg,
    }
}

/// Returns (output, dQ, dK, dV) for `sum(out ⊙ w)`.
fn run(case: &Case, sparse: bool) -> [Tensor; 4] {
    let mut tape = Tape::new();
    let q = tape.leaf(case.q.clone());
    let k = tape.leaf(case.k.clone());
    let v = tape.leaf(case.v.clone());
    let out = if sparse {
        windowed_global_attention(&mut tape, q, k, v, &case.cfg, &case.mask).unwrap().0
    } else {
        let n = case.q.rows();
        let allowed = sparse_equivalent_mask(n, &case.cfg, &case.mask);
        dense_attention_allowed(&mut tape, q, k, v, &allowed).unwrap()
    };
    let w = tape.constant(case.w.clone());
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum(weighted);
    let g = tape.gradients(loss).unwrap();
    [
        tape.value(out).clone(),
        g.get(q).unwrap().clone(),
        g.get(k).unwrap().clone(),
        g.get(v).unwrap().clone(),
    ]
}

#[test]
fn sparse_matches_dense_forward_and_backward() {
    let mut worst_fwd: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..12 {
            let n = rng.gen_range(1..=64);
            let r = rng.gen_range(0..=8);
            let globals = rng.gen_range(0..=3);
            let padded = rng.gen_bool(0.5);
            let case = random_case(&mut rng, n, r, globals, padded);
            let s = run(&case, true);
            let d = run(&case, false);
            worst_fwd = worst_fwd.max(s[0].max_abs_diff(&d[0]));
            for i in 1..4 {
                worst_grad = worst_grad.max(s[i].max_abs_diff(&d[i]));
            }
        }
    }
    assert!(worst_fwd < 1e-10, "forward diff {worst_fwd}");
    assert!(worst_grad < 1e-8, "gradient diff {worst_grad}");
}

#[test]
fn full_window_equals_dense_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 9;
    let case = random_case(&mut rng, n, n - 1, 0, false);
    let mut tape = Tape::new();
    let q = tape.leaf(case.q.clone());
    let k = tape.leaf(case.k.clone());
    let v = tape.leaf(case.v.clone());
    let (sparse, _) = windowed_global_attention(&mut tape, q, k, v, &case.cfg, &case.mask).unwrap();
    let dense = dense_attention(&mut tape, q, k, v, &AttentionMask::all_valid(n), false).unwrap();
    assert_eq!(tape.value(sparse), tape.value(dense));
}

#[test]
fn counter_equals_analytic_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let n = rng.gen_range(1..80);
        let r = rng.gen_range(0..10);
        let globals = rng.gen_range(0..4);
        let case = random_case(&mut rng, n, r, globals, false);
        let mut tape = Tape::new();
        let q = tape.leaf(case.q.clone());
        let (_, stats) = windowed_global_attention(&mut tape, q, q, q, &case.cfg, &case.mask).unwrap();
        assert_eq!(stats.score_evals, attention_op_count(n, &case.cfg));
        if globals == 0 {
            assert_eq!(stats.score_evals, window_pair_count(n, r));
        }
    }
}

#[test]
fn work_and_memory_grow_linearly() {
    let cfg = AttentionConfig::single_head(8, vec![0, 3], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut peaks = Vec::new();
    let mut counts = Vec::new();
    for n in [256, 512, 1024] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(n, 4, 1.0, &mut rng));
        let (_, stats) =
            windowed_global_attention(&mut tape, x, x, x, &cfg, &AttentionMask::all_valid(n)).unwrap();
        peaks.push(stats.workspace_bytes as f64);
        counts.push(stats.score_evals as f64);
    }
    for i in 1..3 {
        assert!(peaks[i] / peaks[i - 1] <= 2.2, "{peaks:?}");
        assert!(counts[i] / counts[i - 1] <= 2.05, "{counts:?}");
    }
}

#[test]
fn dense_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let ids = [
        store.insert("q", Tensor::randn(8, 4, 1.0, &mut rng)),
        store.insert("k", Tensor::randn(8, 4, 1.0, &mut rng)),
        store.insert("v", Tensor::randn(8, 4, 1.0, &mut rng)),
    ];
    let w = Tensor::randn(8, 4, 1.0, &mut rng);
    for causal in [false, true] {
        let report = grad_check(&store, 1e-5, |t, s| {
            let [q, k, v] = ids.map(|id| t.param(s, id));
            let out = dense_attention(t, q, k, v, &AttentionMask::with_length(8, 6), causal)?;
            let w = t.constant(w.clone());
            let o = t.mul(out, w)?;
            Ok(t.sum(o))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}

#[test]
fn cross_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let ids = [
        store.insert("q", Tensor::randn(3, 4, 1.0, &mut rng)),
        store.insert("k", Tensor::randn(7, 4, 1.0, &mut rng)),
        store.insert("v", Tensor::randn(7, 4, 1.0, &mut rng)),
    ];
    let w = Tensor::randn(3, 4, 1.0, &mut rng);
    let report = grad_check(&store, 1e-5, |t, s| {
        let [q, k, v] = ids.map(|id| t.param(s, id));
        let out = cross_attention(t, q, k, v, &AttentionMask::with_length(7, 5))?;
        let w = t.constant(w.clone());
        let o = t.mul(out, w)?;
        Ok(t.sum(o))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn cross_attention_single_encoder_position_copies_value() {
    let mut tape = Tape::new();
    let q = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap());
    let k = tape.leaf(Tensor::row(vec![0.2, 0.9]));
    let v = tape.leaf(Tensor::row(vec![6.0, -1.0]));
    let out = cross_attention(&mut tape, q, k, v, &AttentionMask::all_valid(1)).unwrap();
    assert_eq!(tape.value(out).data(), &[6.0, -1.0, 6.0, -1.0]);
}
