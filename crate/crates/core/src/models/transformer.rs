//! Post-LN transformer blocks shared by the encoders and the decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{normal, ModelConfig, Result};
use crate::attention::{
    cross_attention, dense_attention, windowed_global_attention, AttentionConfig, AttentionMask,
    AttentionStats,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Per-forward context: the tape, the parameters and the dropout stream.
pub(crate) struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
}

/// How a stack's self-attention is restricted.
pub(crate) enum SelfAttention<'a> {
    Dense { mask: &'a AttentionMask, causal: bool },
    Windowed { cfg: &'a AttentionConfig, mask: &'a AttentionMask },
}

impl Fwd<'_> {
    pub fn p(&mut self, name: &str) -> Result<Var> {
        Ok(self.tape.param_named(self.store, name)?)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let p = self.cfg.dropout;
        self.tape.dropout(x, p, self.train, self.rng)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b, self.cfg.layer_norm_eps)?)
    }

    /// Word + learned absolute position embeddings, normalised.
    pub fn embed(&mut self, prefix: &str, ids: &[u32]) -> Result<Var> {
        let words = self.p(&format!("{prefix}.embeddings.word"))?;
        let pos = self.p(&format!("{prefix}.embeddings.position"))?;
        let w = self.tape.embedding(words, ids)?;
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let p = self.tape.embedding(pos, &positions)?;
        let x = self.tape.add(w, p)?;
        let x = self.layer_norm(x, &format!("{prefix}.embeddings.ln"))?;
        Ok(self.dropout(x))
    }

    fn split_heads(&mut self, x: Var) -> Result<Vec<Var>> {
        let d = self.cfg.head_dim();
        (0..self.cfg.num_heads)
            .map(|h| Ok(self.tape.slice_cols(x, h * d, d)?))
            .collect()
    }

    pub fn self_attention(
        &mut self,
        x: Var,
        prefix: &str,
        kind: &SelfAttention,
    ) -> Result<(Var, AttentionStats)> {
        let q = self.linear(x, &format!("{prefix}.q"))?;
        let k = self.linear(x, &format!("{prefix}.k"))?;
        let v = self.linear(x, &format!("{prefix}.v"))?;
        let (qs, ks, vs) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let mut heads = Vec::with_capacity(qs.len());
        let mut stats = AttentionStats::default();
        for ((q, k), v) in qs.into_iter().zip(ks).zip(vs) {
            let out = match kind {
                SelfAttention::Dense { mask, causal } => dense_attention(self.tape, q, k, v, mask, *causal)?,
                SelfAttention::Windowed { cfg, mask } => {
                    let (out, s) = windowed_global_attention(self.tape, q, k, v, cfg, mask)?;
                    stats += s;
                    out
                }
            };
            heads.push(out);
        }
        let joined = self.tape.concat_cols(&heads)?;
        Ok((self.linear(joined, &format!("{prefix}.o"))?, stats))
    }

    pub fn cross_attention(
        &mut self,
        x: Var,
        enc: Var,
        enc_mask: &AttentionMask,
        prefix: &str,
    ) -> Result<Var> {
        let q = self.linear(x, &format!("{prefix}.q"))?;
        let k = self.linear(enc, &format!("{prefix}.k"))?;
        let v = self.linear(enc, &format!("{prefix}.v"))?;
        let (qs, ks, vs) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let mut heads = Vec::with_capacity(qs.len());
        for ((q, k), v) in qs.into_iter().zip(ks).zip(vs) {
            heads.push(cross_attention(self.tape, q, k, v, enc_mask)?);
        }
        let joined = self.tape.concat_cols(&heads)?;
        self.linear(joined, &format!("{prefix}.o"))
    }

    fn residual_norm(&mut self, x: Var, delta: Var, ln: &str) -> Result<Var> {
        let delta = self.dropout(delta);
        let sum = self.tape.add(x, delta)?;
        self.layer_norm(sum, ln)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ffn.in"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.ffn.out"))
    }

    /// One encoder layer, or a decoder layer when `cross` is given.
    pub fn layer(
        &mut self,
        x: Var,
        prefix: &str,
        kind: &SelfAttention,
        cross: Option<(Var, &AttentionMask)>,
    ) -> Result<(Var, AttentionStats)> {
        let (a, stats) = self.self_attention(x, &format!("{prefix}.attn"), kind)?;
        let mut x = self.residual_norm(x, a, &format!("{prefix}.attn_ln"))?;
        if let Some((enc, enc_mask)) = cross {
            let c = self.cross_attention(x, enc, enc_mask, &format!("{prefix}.cross"))?;
            x = self.residual_norm(x, c, &format!("{prefix}.cross_ln"))?;
        }
        let f = self.ffn(x, prefix)?;
        Ok((self.residual_norm(x, f, &format!("{prefix}.ffn_ln"))?, stats))
    }

    /// Vocabulary logits: `h·Eᵀ + b` when the head is tied, else `h·W + b`.
    pub fn lm_logits(&mut self, h: Var, word_table: &str, head_prefix: &str) -> Result<Var> {
        let logits = if self.cfg.tie_lm_head {
            let e = self.p(word_table)?;
            self.tape.matmul_bt(h, e)?
        } else {
            let w = self.p(&format!("{head_prefix}.w"))?;
            self.tape.matmul(h, w)?
        };
        let b = self.p(&format!("{head_prefix}.bias"))?;
        Ok(self.tape.add_row(logits, b)?)
    }
}

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, i: usize, o: usize, std: f64, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.w"), normal(i, o, std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, o));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, h: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(1, h, 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(1, h));
}

pub(crate) fn init_attention(store: &mut ParamStore, prefix: &str, h: usize, std: f64, rng: &mut impl Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), h, h, std, rng);
    }
}

pub(crate) fn init_layer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    cross: bool,
    rng: &mut impl Rng,
) {
    let (h, f, std) = (cfg.hidden_size, cfg.ffn_size, cfg.init_std);
    init_attention(store, &format!("{prefix}.attn"), h, std, rng);
    init_layer_norm(store, &format!("{prefix}.attn_ln"), h);
    if cross {
        init_attention(store, &format!("{prefix}.cross"), h, std, rng);
        init_layer_norm(store, &format!("{prefix}.cross_ln"), h);
    }
    init_linear(store, &format!("{prefix}.ffn.in"), h, f, std, rng);
    init_linear(store, &format!("{prefix}.ffn.out"), f, h, std, rng);
    init_layer_norm(store, &format!("{prefix}.ffn_ln"), h);
}

pub(crate) fn init_embeddings(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    max_positions: usize,
    rng: &mut impl Rng,
) {
    let (h, std) = (cfg.hidden_size, cfg.init_std);
    store.insert(format!("{prefix}.embeddings.word"), normal(cfg.vocab_size, h, std, rng));
    store.insert(format!("{prefix}.embeddings.position"), normal(max_positions, h, std, rng));
    init_layer_norm(store, &format!("{prefix}.embeddings.ln"), h);
}

pub(crate) fn init_lm_head(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) {
    if !cfg.tie_lm_head {
        store.insert(format!("{prefix}.w"), normal(cfg.hidden_size, cfg.vocab_size, cfg.init_std, rng));
    }
    store.insert(format!("{prefix}.bias"), Tensor::zeros(1, cfg.vocab_size));
}
