//! Pointer-generator network: BiLSTM encoder, LSTM decoder, additive
//! attention and a generate/copy switch over an extended vocabulary.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::DecodeMode;
use super::encoder::IGNORE_INDEX;
use super::transformer::init_linear;
use super::{normal, validate_params, ModelError, Result};
use crate::tensor::{Checkpoint, CustomOp, ParamStore, Tape, Tensor, TensorError, Var};

pub const PGN_PAD: u32 = 0;
pub const PGN_UNK: u32 = 1;
pub const PGN_START: u32 = 2;
pub const PGN_STOP: u32 = 3;
const PGN_SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<start>", "<stop>"];

/// Word-level vocabulary ordered by descending frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordVocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        WordVocab { words, index }
    }

    /// Keeps the `max_size - 4` most frequent words; ties break
    /// alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in text {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words: Vec<String> = PGN_SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(
            ranked
                .into_iter()
                .filter(|(w, _)| !PGN_SPECIALS.contains(w))
                .take(max_size.saturating_sub(PGN_SPECIALS.len()))
                .map(|(w, _)| w.to_string()),
        );
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgnConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    /// Source words beyond this many are dropped (head kept).
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub init_std: f64,
}

impl PgnConfig {
    pub fn tiny() -> Self {
        PgnConfig {
            emb_dim: 32,
            hidden_dim: 32,
            attn_dim: 32,
            max_source_len: 400,
            max_target_len: 100,
            init_std: 0.2,
        }
    }
}

/// A source/target pair of word tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PgnExample {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// Source mapped into the fixed and the extended vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSource {
    /// Fixed-vocabulary ids (OOV → UNK) used as encoder input.
    pub ids: Vec<u32>,
    /// Extended ids: OOV words get `V + k` in order of first appearance.
    pub ext_ids: Vec<usize>,
    pub oovs: Vec<String>,
}

/// How the generate/copy switch is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PgnSwitch {
    Learned,
    /// Constant `p_gen`, for analysis and tests.
    Forced(f64),
}

/// `P = p_gen·Pv ⊕ (1 − p_gen)·scatter(attn → source ids)` over an
/// extended vocabulary of `ext_size` columns.
pub fn copy_mixture(
    tape: &mut Tape,
    pv: Var,
    attn: Var,
    src_ext_ids: &[usize],
    p_gen: Var,
    ext_size: usize,
) -> std::result::Result<Var, TensorError> {
    let gen = tape.pad_cols(pv, ext_size)?;
    let gen = tape.mul_col(gen, p_gen)?;
    let copy = tape.scatter_cols(attn, src_ext_ids, ext_size)?;
    let keep = tape.one_minus(p_gen);
    let copy = tape.mul_col(copy, keep)?;
    tape.add(gen, copy)
}

/// `E[t, i] = Σ_k v_k · tanh(A[i, k] + B[t, k])`
struct AdditiveScores;

impl CustomOp for AdditiveScores {
    fn name(&self) -> &'static str {
        "additive_scores"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, t, k) = (a.rows(), b.rows(), a.cols());
        let mut ga = Tensor::zeros_like(a);
        let mut gb = Tensor::zeros_like(b);
        let mut gv = Tensor::zeros_like(v);
        let vv = v.data();
        for ti in 0..t {
            let brow = b.row_slice(ti);
            for i in 0..n {
                let g = grad.get(ti, i);
                if g == 0.0 {
                    continue;
                }
                let arow = a.row_slice(i);
                for kk in 0..k {
                    let u = (arow[kk] + brow[kk]).tanh();
                    let d = g * vv[kk] * (1.0 - u * u);
                    ga.data_mut()[i * k + kk] += d;
                    gb.data_mut()[ti * k + kk] += d;
                    gv.data_mut()[kk] += g * u;
                }
            }
        }
        vec![Some(ga), Some(gb), Some(gv)]
    }
}

fn additive_scores(tape: &mut Tape, a: Var, b: Var, v: Var) -> std::result::Result<Var, TensorError> {
    let (ta, tb, tv) = (tape.value(a), tape.value(b), tape.value(v));
    if ta.cols() != tb.cols() || tv.len() != ta.cols() {
        return Err(TensorError::Shape {
            op: "additive_scores",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        });
    }
    let (n, t, k) = (ta.rows(), tb.rows(), ta.cols());
    let mut out = vec![0.0; t * n];
    for ti in 0..t {
        let brow = tb.row_slice(ti);
        for i in 0..n {
            let arow = ta.row_slice(i);
            out[ti * n + i] = (0..k).map(|kk| tv.data()[kk] * (arow[kk] + brow[kk]).tanh()).sum();
        }
    }
    let out = Tensor::matrix(t, n, out)?;
    Ok(tape.custom(&[a, b, v], out, Box::new(AdditiveScores)))
}

#[derive(Clone, Debug)]
pub struct PgnModel {
    pub config: PgnConfig,
    pub vocab: WordVocab,
    pub params: ParamStore,
}

/// Encoder outputs needed by every decoder step.
struct Encoded {
    states: Var,
    attn_keys: Var,
    h0: Var,
    c0: Var,
}

impl PgnModel {
    pub fn new(config: PgnConfig, vocab: WordVocab, seed: u64) -> Result<Self> {
        if vocab.len() <= PGN_SPECIALS.len() {
            return Err(ModelError::Config("pointer-generator vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, h, a, std) = (
            vocab.len(),
            config.emb_dim,
            config.hidden_dim,
            config.attn_dim,
            config.init_std,
        );
        let mut p = ParamStore::new();
        p.insert("pgn.embedding", normal(v, e, std, &mut rng));
        for dir in ["pgn.enc.fw", "pgn.enc.bw", "pgn.dec"] {
            p.insert(format!("{dir}.wx"), normal(e, 4 * h, std, &mut rng));
            p.insert(format!("{dir}.wh"), normal(h, 4 * h, std, &mut rng));
            let mut bias = Tensor::zeros(1, 4 * h);
            // forget gate starts open
            bias.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
            p.insert(format!("{dir}.b"), bias);
        }
        init_linear(&mut p, "pgn.reduce.h", 2 * h, h, std, &mut rng);
        init_linear(&mut p, "pgn.reduce.c", 2 * h, h, std, &mut rng);
        p.insert("pgn.attn.enc.w", normal(2 * h, a, std, &mut rng));
        init_linear(&mut p, "pgn.attn.dec", h, a, std, &mut rng);
        p.insert("pgn.attn.v", normal(1, a, std, &mut rng));
        init_linear(&mut p, "pgn.out1", 3 * h, h, std, &mut rng);
        init_linear(&mut p, "pgn.out2", h, v, std, &mut rng);
        p.insert("pgn.gen.ctx", normal(2 * h, 1, std, &mut rng));
        p.insert("pgn.gen.state", normal(h, 1, std, &mut rng));
        p.insert("pgn.gen.input", normal(e, 1, std, &mut rng));
        p.insert("pgn.gen.b", Tensor::zeros(1, 1));
        Ok(PgnModel {
            config,
            vocab,
            params: p,
        })
    }

    pub fn encode_source(&self, source: &[String]) -> EncodedSource {
        let source = &source[..source.len().min(self.config.max_source_len)];
        let v = self.vocab.len();
        let mut oovs: Vec<String> = Vec::new();
        let mut ids = Vec::with_capacity(source.len());
        let mut ext_ids = Vec::with_capacity(source.len());
        for w in source {
            match self.vocab.id(w) {
                Some(id) => {
                    ids.push(id);
                    ext_ids.push(id as usize);
                }
                None => {
                    let k = oovs.iter().position(|o| o == w).unwrap_or_else(|| {
                        oovs.push(w.clone());
                        oovs.len() - 1
                    });
                    ids.push(PGN_UNK);
                    ext_ids.push(v + k);
                }
            }
        }
        EncodedSource { ids, ext_ids, oovs }
    }

    /// Extended target ids: in-vocabulary id, else the source OOV slot,
    /// else UNK.
    pub fn target_ids(&self, target: &[String], src: &EncodedSource) -> Vec<u32> {
        let v = self.vocab.len();
        target
            .iter()
            .map(|w| match self.vocab.id(w) {
                Some(id) => id,
                None => src
                    .oovs
                    .iter()
                    .position(|o| o == w)
                    .map_or(PGN_UNK, |k| (v + k) as u32),
            })
            .collect()
    }

    fn to_fixed(&self, id: u32) -> u32 {
        if (id as usize) < self.vocab.len() {
            id
        } else {
            PGN_UNK
        }
    }

    fn p(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(tape.param_named(store, name)?)
    }

    fn linear(&self, tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(tape, store, &format!("{prefix}.w"))?;
        let b = self.p(tape, store, &format!("{prefix}.b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Runs an LSTM over the rows of `x` (T×e); returns the states in input
    /// order plus the final `(h, c)`.
    fn lstm(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        x: Var,
        init: Option<(Var, Var)>,
        reverse: bool,
    ) -> Result<(Vec<Var>, Var, Var)> {
        let hd = self.config.hidden_dim;
        let wx = self.p(tape, store, &format!("{prefix}.wx"))?;
        let wh = self.p(tape, store, &format!("{prefix}.wh"))?;
        let b = self.p(tape, store, &format!("{prefix}.b"))?;
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add_row(xw, b)?;
        let steps = tape.value(x).rows();
        let (mut h, mut c) = match init {
            Some(s) => s,
            None => (tape.constant(Tensor::zeros(1, hd)), tape.constant(Tensor::zeros(1, hd))),
        };
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.slice_rows(xw, t, 1)?;
            let hw = tape.matmul(h, wh)?;
            let g = tape.add(xt, hw)?;
            let i = tape.slice_cols(g, 0, hd)?;
            let f = tape.slice_cols(g, hd, hd)?;
            let u = tape.slice_cols(g, 2 * hd, hd)?;
            let o = tape.slice_cols(g, 3 * hd, hd)?;
            let (i, f, u, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(u), tape.sigmoid(o));
            let fc = tape.mul(f, c)?;
            let iu = tape.mul(i, u)?;
            c = tape.add(fc, iu)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            states[t] = h;
        }
        Ok((states, h, c))
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, ids: &[u32]) -> Result<Encoded> {
        if ids.is_empty() {
            return Err(ModelError::Contract("empty source".into()));
        }
        let emb = self.p(tape, store, "pgn.embedding")?;
        let x = tape.embedding(emb, ids)?;
        let (fw, fh, fc) = self.lstm(tape, store, "pgn.enc.fw", x, None, false)?;
        let (bw, bh, bc) = self.lstm(tape, store, "pgn.enc.bw", x, None, true)?;
        let fw = tape.concat_rows(&fw)?;
        let bw = tape.concat_rows(&bw)?;
        let states = tape.concat_cols(&[fw, bw])?;
        let hcat = tape.concat_cols(&[fh, bh])?;
        let ccat = tape.concat_cols(&[fc, bc])?;
        let h0 = self.linear(tape, store, hcat, "pgn.reduce.h")?;
        let h0 = tape.relu(h0);
        let c0 = self.linear(tape, store, ccat, "pgn.reduce.c")?;
        let c0 = tape.relu(c0);
        let wa = self.p(tape, store, "pgn.attn.enc.w")?;
        let attn_keys = tape.matmul(states, wa)?;
        Ok(Encoded {
            states,
            attn_keys,
            h0,
            c0,
        })
    }

    /// Per-step mixture distributions `T×(V + |oov|)` for decoder input
    /// `dec_in` (fixed-vocabulary ids, starting with START).
    fn step_distributions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &Encoded,
        src: &EncodedSource,
        dec_in: &[u32],
        switch: PgnSwitch,
    ) -> Result<(Var, Var, Var)> {
        let emb = self.p(tape, store, "pgn.embedding")?;
        let y = tape.embedding(emb, dec_in)?;
        let (states, _, _) = self.lstm(tape, store, "pgn.dec", y, Some((enc.h0, enc.c0)), false)?;
        let s = tape.concat_rows(&states)?;
        let q = self.linear(tape, store, s, "pgn.attn.dec")?;
        let v = self.p(tape, store, "pgn.attn.v")?;
        let scores = additive_scores(tape, enc.attn_keys, q, v)?;
        let attn = tape.softmax(scores, 1)?;
        let ctx = tape.matmul(attn, enc.states)?;
        let sc = tape.concat_cols(&[s, ctx])?;
        let hidden = self.linear(tape, store, sc, "pgn.out1")?;
        let logits = self.linear(tape, store, hidden, "pgn.out2")?;
        let pv = tape.softmax(logits, 1)?;
        let p_gen = match switch {
            PgnSwitch::Learned => {
                let wc = self.p(tape, store, "pgn.gen.ctx")?;
                let ws = self.p(tape, store, "pgn.gen.state")?;
                let wi = self.p(tape, store, "pgn.gen.input")?;
                let b = self.p(tape, store, "pgn.gen.b")?;
                let a = tape.matmul(ctx, wc)?;
                let bb = tape.matmul(s, ws)?;
                let c = tape.matmul(y, wi)?;
                let sum = tape.add(a, bb)?;
                let sum = tape.add(sum, c)?;
                let sum = tape.add_row(sum, b)?;
                tape.sigmoid(sum)
            }
            PgnSwitch::Forced(p) => tape.constant(Tensor::filled(dec_in.len(), 1, p)),
        };
        let ext = self.vocab.len() + src.oovs.len();
        let mix = copy_mixture(tape, pv, attn, &src.ext_ids, p_gen, ext)?;
        Ok((mix, attn, p_gen))
    }

    /// Distributions for teacher-forced decoding of `target`; row `t`
    /// predicts target word `t` (the last row predicts STOP).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &PgnExample,
        switch: PgnSwitch,
    ) -> Result<(Var, EncodedSource)> {
        let src = self.encode_source(&ex.source);
        let enc = self.encode(tape, store, &src.ids)?;
        let tgt = self.target_ids(&ex.target, &src);
        let dec_in: Vec<u32> = std::iter::once(PGN_START)
            .chain(tgt.iter().map(|&t| self.to_fixed(t)))
            .collect();
        let (mix, _, _) = self.step_distributions(tape, store, &enc, &src, &dec_in, switch)?;
        Ok((mix, src))
    }

    /// Mean negative log-likelihood of target + STOP and the token count.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, ex: &PgnExample) -> Result<(Var, usize)> {
        let (mix, src) = self.forward(tape, store, ex, PgnSwitch::Learned)?;
        let mut labels = self.target_ids(&ex.target, &src);
        labels.push(PGN_STOP);
        Ok((tape.nll_probs(mix, &labels, IGNORE_INDEX)?, labels.len()))
    }

    /// Extended-vocabulary ids, ending with STOP when produced.
    pub fn generate_ids(
        &self,
        source: &[String],
        mode: DecodeMode,
        max_len: usize,
        switch: PgnSwitch,
    ) -> Result<(Vec<u32>, EncodedSource)> {
        let src = self.encode_source(source);
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &self.params, &src.ids)?;
        let frozen = [enc.states, enc.attn_keys, enc.h0, enc.c0].map(|v| tape.value(v).clone());
        let step = |prefix: &[u32]| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let [states, attn_keys, h0, c0] = frozen.clone().map(|t| tape.constant(t));
            let enc = Encoded {
                states,
                attn_keys,
                h0,
                c0,
            };
            let dec_in: Vec<u32> = std::iter::once(PGN_START)
                .chain(prefix.iter().map(|&t| self.to_fixed(t)))
                .collect();
            let (mix, _, _) = self.step_distributions(&mut tape, &self.params, &enc, &src, &dec_in, switch)?;
            let t = tape.value(mix);
            Ok(t.row_slice(t.rows() - 1).iter().map(|p| p.max(1e-300).ln()).collect())
        };
        let ids = mode.run(step, PGN_STOP, max_len)?;
        Ok((ids, src))
    }

    /// Generated words; copied OOV ids map back to their source surface.
    pub fn generate(&self, source: &[String], mode: DecodeMode, max_len: usize) -> Result<Vec<String>> {
        let (ids, src) = self.generate_ids(source, mode, max_len, PgnSwitch::Learned)?;
        Ok(self.ids_to_words(&ids, &src))
    }

    pub fn ids_to_words(&self, ids: &[u32], src: &EncodedSource) -> Vec<String> {
        let v = self.vocab.len();
        ids.iter()
            .filter(|&&id| id != PGN_STOP && id != PGN_START && id != PGN_PAD)
            .map(|&id| {
                let id = id as usize;
                if id < v {
                    self.vocab.words[id].clone()
                } else {
                    src.oovs[id - v].clone()
                }
            })
            .collect()
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("model.kind".into(), "pgn".into());
        meta.insert(
            "pgn.config".into(),
            serde_json::to_string(&self.config).expect("config serialises"),
        );
        meta.insert(
            "pgn.vocab".into(),
            serde_json::to_string(&self.vocab.words).expect("vocab serialises"),
        );
        meta
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.get("model.kind").map(String::as_str) != Some("pgn") {
            return Err(ModelError::Config("checkpoint does not hold a pointer-generator".into()));
        }
        let parse_err = |e: serde_json::Error| ModelError::Config(format!("pgn metadata: {e}"));
        let config: PgnConfig =
            serde_json::from_str(meta.get("pgn.config").map_or("", String::as_str)).map_err(parse_err)?;
        let words: Vec<String> =
            serde_json::from_str(meta.get("pgn.vocab").map_or("", String::as_str)).map_err(parse_err)?;
        let skeleton = PgnModel::new(config.clone(), WordVocab::from_words(words.clone()), 0)?;
        validate_params(&skeleton.params, &ckpt.params)?;
        Ok(PgnModel {
            config,
            vocab: WordVocab::from_words(words),
            params: ckpt.params,
        })
    }
}
