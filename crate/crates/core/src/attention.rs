//! Sliding-window + global attention and its dense reference.
//!
//! A non-global query `i` attends to the keys `j` with `|i - j| <= r` plus
//! every global position; a global query attends to every key. Padding
//! positions neither attend nor are attended to, and their output rows are
//! zero. The sparse kernel stores only the allowed `(i, j)` pairs (banded
//! gather), so its workspace grows as `n·(2r+1) + n·|G|`.

use crate::tensor::{dot, CustomOp, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// One-sided window radius; the full window covers `i-r ..= i+r`.
    pub radius: usize,
    /// Positions with symmetric global attention, sorted and deduplicated.
    pub global_indices: Vec<usize>,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(radius: usize, mut global_indices: Vec<usize>, num_heads: usize, head_dim: usize) -> Self {
        global_indices.sort_unstable();
        global_indices.dedup();
        AttentionConfig {
            radius,
            global_indices,
            num_heads,
            head_dim,
        }
    }

    /// Single-head configuration for kernels working on one `n×d` slice.
    pub fn single_head(radius: usize, global_indices: Vec<usize>, head_dim: usize) -> Self {
        Self::new(radius, global_indices, 1, head_dim)
    }

    pub fn validate(&self, n: usize, hidden: Option<usize>) -> Result<(), TensorError> {
        if let Some(&g) = self.global_indices.iter().find(|&&g| g >= n) {
            return Err(TensorError::contract(
                "attention_config",
                format!("global index {g} outside sequence of {n}"),
            ));
        }
        if let Some(h) = hidden {
            if self.num_heads * self.head_dim != h {
                return Err(TensorError::contract(
                    "attention_config",
                    format!(
                        "{} heads × {} dims does not match hidden size {h}",
                        self.num_heads, self.head_dim
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Per-position padding validity plus global/local role flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub valid: Vec<bool>,
    pub global: Vec<bool>,
}

impl AttentionMask {
    pub fn all_valid(n: usize) -> Self {
        AttentionMask {
            valid: vec![true; n],
            global: vec![false; n],
        }
    }

    /// First `len` positions valid, the rest padding.
    pub fn with_length(n: usize, len: usize) -> Self {
        AttentionMask {
            valid: (0..n).map(|i| i < len).collect(),
            global: vec![false; n],
        }
    }

    pub fn with_globals(mut self, global_indices: &[usize]) -> Self {
        for &g in global_indices {
            if g < self.global.len() {
                self.global[g] = true;
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Decoder self-attention mask: every position valid, causality is applied
/// by [`dense_attention`] with `causal = true`.
pub fn causal_mask(n: usize) -> AttentionMask {
    AttentionMask::all_valid(n)
}

/// Pairs `(i, j)` allowed under causal masking, `j <= i`.
pub fn causal_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

/// Work performed by one sparse-kernel call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Query–key score evaluations.
    pub score_evals: usize,
    /// Bytes allocated for the kernel's workspace and output.
    pub workspace_bytes: usize,
}

impl std::ops::AddAssign for AttentionStats {
    fn add_assign(&mut self, rhs: Self) {
        self.score_evals += rhs.score_evals;
        self.workspace_bytes = self.workspace_bytes.max(rhs.workspace_bytes);
    }
}

/// Number of score evaluations the sparse kernel performs on an unpadded
/// sequence of length `n`.
pub fn attention_op_count(n: usize, cfg: &AttentionConfig) -> usize {
    let r = cfg.radius;
    let globals: Vec<usize> = cfg.global_indices.iter().copied().filter(|&g| g < n).collect();
    let mut total = 0;
    for i in 0..n {
        if globals.binary_search(&i).is_ok() {
            total += n;
            continue;
        }
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        let outside = globals.iter().filter(|&&g| g < lo || g > hi).count();
        total += hi - lo + 1 + outside;
    }
    total
}

/// Closed form `n(2r+1) - r(r+1)` for the window-only pair count.
pub fn window_pair_count(n: usize, radius: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let r = radius.min(n - 1);
    n * (2 * r + 1) - r * (r + 1)
}

/// Sorted key positions visible from each query (empty for padding).
pub fn key_sets(n: usize, cfg: &AttentionConfig, mask: &AttentionMask) -> Vec<Vec<usize>> {
    let globals: Vec<usize> = cfg
        .global_indices
        .iter()
        .copied()
        .filter(|&g| g < n && mask.valid[g])
        .collect();
    (0..n)
        .map(|i| {
            if !mask.valid[i] {
                return Vec::new();
            }
            if globals.binary_search(&i).is_ok() {
                return (0..n).filter(|&j| mask.valid[j]).collect();
            }
            let lo = i.saturating_sub(cfg.radius);
            let hi = (i + cfg.radius).min(n - 1);
            let mut keys: Vec<usize> = globals.iter().copied().filter(|&g| g < lo).collect();
            keys.extend((lo..=hi).filter(|&j| mask.valid[j]));
            keys.extend(globals.iter().copied().filter(|&g| g > hi));
            keys
        })
        .collect()
}

/// Dense `n×n` allowed matrix equivalent to the sparse pattern.
pub fn sparse_equivalent_mask(n: usize, cfg: &AttentionConfig, mask: &AttentionMask) -> Vec<bool> {
    let is_global = |p: usize| cfg.global_indices.binary_search(&p).is_ok();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = mask.valid[i]
                && mask.valid[j]
                && (is_global(i) || is_global(j) || i.abs_diff(j) <= cfg.radius);
        }
    }
    allowed
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize), TensorError> {
    let (tq, tk, tv) = (tape.value(q), tape.value(k), tape.value(v));
    if tq.cols() != tk.cols() {
        return Err(TensorError::Shape {
            op: "attention",
            left: tq.shape().to_vec(),
            right: tk.shape().to_vec(),
        });
    }
    if tk.rows() != tv.rows() {
        return Err(TensorError::Shape {
            op: "attention",
            left: tk.shape().to_vec(),
            right: tv.shape().to_vec(),
        });
    }
    Ok((tq.rows(), tk.rows(), tq.cols()))
}

/// `softmax(QKᵀ/√d + mask)·V` over an explicit `rows×keys` allowed matrix,
/// built from ordinary tape operations. Rows with no allowed key are zero.
pub fn dense_attention_allowed(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    allowed: &[bool],
) -> Result<Var, TensorError> {
    let (_, _, d) = check_qkv(tape, q, k, v)?;
    let scores = tape.matmul_bt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = tape.masked_softmax(scaled, allowed)?;
    tape.matmul(probs, v)
}

/// Dense self-attention with padding and optional causal masking.
pub fn dense_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    causal: bool,
) -> Result<Var, TensorError> {
    let (n, nk, _) = check_qkv(tape, q, k, v)?;
    if n != nk || mask.len() != n {
        return Err(TensorError::contract(
            "dense_attention",
            format!("{n} queries, {nk} keys, mask of {}", mask.len()),
        ));
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        if !mask.valid[i] {
            continue;
        }
        let mut any = false;
        for j in 0..n {
            let ok = mask.valid[j] && (!causal || j <= i);
            allowed[i * n + j] = ok;
            any |= ok;
        }
        if !any {
            return Err(TensorError::contract(
                "dense_attention",
                format!("query {i} has no key to attend to"),
            ));
        }
    }
    dense_attention_allowed(tape, q, k, v, &allowed)
}

/// Decoder-to-encoder attention, dense over non-padding encoder positions.
pub fn cross_attention(
    tape: &mut Tape,
    q_dec: Var,
    k_enc: Var,
    v_enc: Var,
    enc_mask: &AttentionMask,
) -> Result<Var, TensorError> {
    let (m, n, _) = check_qkv(tape, q_dec, k_enc, v_enc)?;
    if enc_mask.len() != n {
        return Err(TensorError::contract(
            "cross_attention",
            format!("encoder mask of {} for {n} keys", enc_mask.len()),
        ));
    }
    if !enc_mask.valid.iter().any(|&v| v) {
        return Err(TensorError::contract(
            "cross_attention",
            "encoder sequence is entirely padding",
        ));
    }
    let allowed: Vec<bool> = (0..m).flat_map(|_| enc_mask.valid.iter().copied()).collect();
    dense_attention_allowed(tape, q_dec, k_enc, v_enc, &allowed)
}

/// Saved state of the banded kernel: CSR key lists and probabilities.
struct WindowedAttentionOp {
    offsets: Vec<usize>,
    keys: Vec<usize>,
    probs: Vec<f64>,
    scale: f64,
}

impl CustomOp for WindowedAttentionOp {
    fn name(&self) -> &'static str {
        "windowed_global_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let d = q.cols();
        let dv_cols = v.cols();
        let mut gq = Tensor::zeros_like(q);
        let mut gk = Tensor::zeros_like(k);
        let mut gv = Tensor::zeros_like(v);
        let mut dp = Vec::new();
        for i in 0..self.offsets.len() - 1 {
            let (s, e) = (self.offsets[i], self.offsets[i + 1]);
            if s == e {
                continue;
            }
            let go = grad.row_slice(i);
            dp.clear();
            for (&j, &p) in self.keys[s..e].iter().zip(&self.probs[s..e]) {
                let vrow = v.row_slice(j);
                dp.push(dot(go, vrow));
                let gvrow = &mut gv.data_mut()[j * dv_cols..(j + 1) * dv_cols];
                for (g, &o) in gvrow.iter_mut().zip(go) {
                    *g += p * o;
                }
            }
            let weighted: f64 = self.probs[s..e].iter().zip(&dp).map(|(p, x)| p * x).sum();
            let qi = q.row_slice(i).to_vec();
            for (idx, &j) in self.keys[s..e].iter().enumerate() {
                let ds = self.probs[s + idx] * (dp[idx] - weighted) * self.scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = k.row_slice(j).to_vec();
                let gqrow = &mut gq.data_mut()[i * d..(i + 1) * d];
                for (g, x) in gqrow.iter_mut().zip(&kj) {
                    *g += ds * x;
                }
                let gkrow = &mut gk.data_mut()[j * d..(j + 1) * d];
                for (g, x) in gkrow.iter_mut().zip(&qi) {
                    *g += ds * x;
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// Banded sparse attention for one head. Never materialises an `n×n`
/// matrix; returns the output together with an exact work count.
pub fn windowed_global_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
    mask: &AttentionMask,
) -> Result<(Var, AttentionStats), TensorError> {
    let (n, nk, d) = check_qkv(tape, q, k, v)?;
    if n != nk || mask.len() != n {
        return Err(TensorError::contract(
            "windowed_global_attention",
            format!("{n} queries, {nk} keys, mask of {}", mask.len()),
        ));
    }
    cfg.validate(n, None)?;
    let scale = 1.0 / (d as f64).sqrt();
    let sets = key_sets(n, cfg, mask);
    let nnz: usize = sets.iter().map(Vec::len).sum();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut keys = Vec::with_capacity(nnz);
    let mut probs = Vec::with_capacity(nnz);
    offsets.push(0);
    let (tq, tk, tv) = (tape.value(q), tape.value(k), tape.value(v));
    let dv = tv.cols();
    let mut out = Tensor::zeros(n, dv);
    let mut score_evals = 0;
    for (i, set) in sets.iter().enumerate() {
        let start = probs.len();
        let qi = tq.row_slice(i);
        let mut max = f64::NEG_INFINITY;
        for &j in set {
            let s = dot(qi, tk.row_slice(j)) * scale;
            score_evals += 1;
            if !s.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "windowed_global_attention",
                });
            }
            max = max.max(s);
            probs.push(s);
            keys.push(j);
        }
        let row = &mut probs[start..];
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
        let orow = &mut out.data_mut()[i * dv..(i + 1) * dv];
        for (&j, &p) in set.iter().zip(&probs[start..]) {
            for (o, &x) in orow.iter_mut().zip(tv.row_slice(j)) {
                *o += p * x;
            }
        }
        offsets.push(probs.len());
    }
    let workspace_bytes = offsets.capacity() * std::mem::size_of::<usize>()
        + keys.capacity() * std::mem::size_of::<usize>()
        + probs.capacity() * std::mem::size_of::<f64>()
        + out.len() * std::mem::size_of::<f64>();
    let stats = AttentionStats {
        score_evals,
        workspace_bytes,
    };
    let op = WindowedAttentionOp {
        offsets,
        keys,
        probs,
        scale,
    };
    Ok((tape.custom(&[q, k, v], out, Box::new(op)), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_key_sets() {
        let cfg = AttentionConfig::single_head(1, vec![], 4);
        let sets = key_sets(5, &cfg, &AttentionMask::all_valid(5));
        assert_eq!(
            sets,
            vec![vec![0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 4], vec![3, 4]]
        );
    }

    #[test]
    fn globals_attend_everywhere_and_are_attended() {
        let cfg = AttentionConfig::single_head(0, vec![2], 4);
        let sets = key_sets(4, &cfg, &AttentionMask::all_valid(4));
        assert_eq!(sets[2], vec![0, 1, 2, 3]);
        assert_eq!(sets[0], vec![0, 2]);
        assert_eq!(sets[3], vec![2, 3]);
    }

    #[test]
    fn padding_neither_attends_nor_is_attended() {
        let cfg = AttentionConfig::single_head(2, vec![0], 4);
        let sets = key_sets(5, &cfg, &AttentionMask::with_length(5, 3));
        assert!(sets[3].is_empty() && sets[4].is_empty());
        assert!(sets[..3].iter().all(|s| s.iter().all(|&j| j < 3)));
    }

    #[test]
    fn op_count_examples() {
        let cfg = AttentionConfig::single_head(1, vec![], 4);
        assert_eq!(attention_op_count(5, &cfg), 13);
        assert_eq!(window_pair_count(5, 1), 13);
        let wide = AttentionConfig::single_head(4, vec![], 4);
        assert_eq!(attention_op_count(5, &wide), 25);
        let wider = AttentionConfig::single_head(9, vec![], 4);
        assert_eq!(attention_op_count(5, &wider), 25);
        assert_eq!(window_pair_count(5, 9), 25);
    }

    #[test]
    fn op_count_with_globals_avoids_double_counting() {
        // n=6, r=1, G={0}: row 0 → 6; rows 1..=5 → window + 1 if 0 outside
        // window sizes 2,3,3,3,3,2; rows 2..=5 add global 0
        let cfg = AttentionConfig::single_head(1, vec![0], 4);
        assert_eq!(attention_op_count(6, &cfg), 6 + 3 + (3 + 1) * 3 + (2 + 1));
    }

    #[test]
    fn causal_pair_count() {
        assert_eq!(causal_pairs(3).len(), 6);
    }

    #[test]
    fn single_position_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::row(vec![0.3, -0.2]));
        let k = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let v = tape.leaf(Tensor::row(vec![4.0, 5.0]));
        let out = dense_attention(&mut tape, q, k, v, &AttentionMask::all_valid(1), false).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 5.0]);
    }

    #[test]
    fn identical_keys_and_values_return_that_value() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![9.0, -3.0], vec![0.1, 0.2]]).unwrap());
        let k = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap());
        let v = tape.leaf(Tensor::from_rows(&[vec![2.0, 7.0], vec![2.0, 7.0]]).unwrap());
        let out = dense_attention(&mut tape, q, k, v, &AttentionMask::all_valid(2), false).unwrap();
        for r in 0..2 {
            assert!((tape.value(out).get(r, 0) - 2.0).abs() < 1e-12);
            assert!((tape.value(out).get(r, 1) - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_radius_without_globals_is_self_attention() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let q = tape.leaf(x.clone());
        let v = tape.leaf(x.clone());
        let cfg = AttentionConfig::single_head(0, vec![], 2);
        let (out, stats) =
            windowed_global_attention(&mut tape, q, q, v, &cfg, &AttentionMask::all_valid(3)).unwrap();
        assert_eq!(tape.value(out), &x);
        assert_eq!(stats.score_evals, 3);
    }

    #[test]
    fn cross_attention_all_padding_is_error() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(2, 2));
        let k = tape.leaf(Tensor::zeros(3, 2));
        let err = cross_attention(&mut tape, q, k, k, &AttentionMask::with_length(3, 0));
        assert!(err.is_err());
    }

    #[test]
    fn padded_query_rows_are_zero() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::filled(2, 2, 1.0));
        let mask = AttentionMask::with_length(2, 1);
        let out = dense_attention(&mut tape, q, q, q, &mask, true).unwrap();
        assert_eq!(tape.value(out).row_slice(1), &[0.0, 0.0]);
    }

    #[test]
    fn config_rejects_out_of_range_global() {
        let cfg = AttentionConfig::single_head(0, vec![5], 2);
        assert!(cfg.validate(2, None).is_err());
        let cfg = AttentionConfig::new(1, vec![], 3, 4);
        assert!(cfg.validate(2, Some(10)).is_err());
        assert!(cfg.validate(2, Some(12)).is_ok());
    }
}
