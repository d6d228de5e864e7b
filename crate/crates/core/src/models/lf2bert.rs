//! Windowed encoder + BERT decoder with tied word embeddings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::decode::DecodeMode;
use super::encoder::{config_from_metadata, encoder_hidden, model_metadata, EncoderKind, IGNORE_INDEX};
use super::transformer::{init_embeddings, init_layer, init_layer_norm, init_lm_head, Fwd, SelfAttention};
use super::{normal, validate_params, MaskedLm, ModelConfig, ModelError, Result};
use crate::attention::{AttentionMask, AttentionStats};
use crate::tensor::{softmax_rows, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{CLS, EOS};

/// One training pair in token ids. `target` carries neither [CLS] nor [EOS].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub history: Vec<u32>,
    /// Extra global positions, typically the section-prefix tokens.
    pub globals: Vec<usize>,
    pub target: Vec<u32>,
}

impl Seq2SeqExample {
    /// `[CLS] + target`
    pub fn decoder_input(&self) -> Vec<u32> {
        std::iter::once(CLS).chain(self.target.iter().copied()).collect()
    }

    /// `target + [EOS]`
    pub fn labels(&self) -> Vec<u32> {
        self.target.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Lf2Bert {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const DEC_WORDS: &str = "decoder.embeddings.word";

impl Lf2Bert {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_embeddings(&mut params, "encoder", &config, config.max_positions_encoder, &mut rng);
        for l in 0..config.num_layers {
            init_layer(&mut params, &format!("encoder.layer{l}"), &config, false, &mut rng);
        }
        if config.tie_embeddings {
            params.alias(DEC_WORDS, "encoder.embeddings.word")?;
        } else {
            let table = params.by_name("encoder.embeddings.word").cloned().expect("just inserted");
            params.insert(DEC_WORDS, table);
        }
        let (h, std) = (config.hidden_size, config.init_std);
        params.insert(
            "decoder.embeddings.position",
            normal(config.max_positions_decoder, h, std, &mut rng),
        );
        init_layer_norm(&mut params, "decoder.embeddings.ln", h);
        for l in 0..config.num_layers {
            init_layer(&mut params, &format!("decoder.layer{l}"), &config, true, &mut rng);
        }
        init_lm_head(&mut params, "decoder.lm_head", &config, &mut rng);
        Ok(Lf2Bert { config, params })
    }

    /// Assembles the model from a pretrained long encoder and a pretrained
    /// dense encoder. Cross-attention blocks start from random weights.
    pub fn from_pretrained(long: &MaskedLm, bert: &MaskedLm, seed: u64) -> Result<Self> {
        let (a, b) = (&long.config, &bert.config);
        if a.hidden_size != b.hidden_size
            || a.num_layers != b.num_layers
            || a.vocab_size != b.vocab_size
            || a.num_heads != b.num_heads
            || a.ffn_size != b.ffn_size
        {
            return Err(ModelError::Config(
                "encoder and decoder checkpoints have different shapes".into(),
            ));
        }
        let mut config = a.clone();
        config.max_positions_decoder = a.max_positions_decoder.min(b.max_positions_encoder);
        config.tie_embeddings = a.tie_embeddings;
        config.tie_lm_head = a.tie_lm_head && b.tie_lm_head;
        let mut model = Lf2Bert::new(config.clone(), seed)?;
        let p = &mut model.params;
        for (name, id) in long.params.names() {
            if name.starts_with("encoder.") {
                p.insert(name, long.params.get(id).clone());
            }
        }
        let copy = |p: &mut ParamStore, from: &str, to: &str| -> Result<()> {
            let t = bert
                .params
                .by_name(from)
                .ok_or_else(|| ModelError::Config(format!("pretrained decoder lacks {from}")))?;
            p.insert(to, t.clone());
            Ok(())
        };
        for l in 0..config.num_layers {
            for part in ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.in", "ffn.out"] {
                for leaf in ["w", "b"] {
                    copy(
                        p,
                        &format!("encoder.layer{l}.{part}.{leaf}"),
                        &format!("decoder.layer{l}.{part}.{leaf}"),
                    )?;
                }
            }
            for ln in ["attn_ln", "ffn_ln"] {
                for leaf in ["gamma", "beta"] {
                    copy(
                        p,
                        &format!("encoder.layer{l}.{ln}.{leaf}"),
                        &format!("decoder.layer{l}.{ln}.{leaf}"),
                    )?;
                }
            }
        }
        for leaf in ["gamma", "beta"] {
            copy(
                p,
                &format!("encoder.embeddings.ln.{leaf}"),
                &format!("decoder.embeddings.ln.{leaf}"),
            )?;
        }
        copy(p, "mlm_head.bias", "decoder.lm_head.bias")?;
        if !config.tie_lm_head {
            if let Some(w) = bert.params.by_name("mlm_head.w") {
                p.insert("decoder.lm_head.w", w.clone());
            }
        }
        if !config.tie_embeddings {
            copy(p, "encoder.embeddings.word", DEC_WORDS)?;
        }
        let pos = bert
            .params
            .by_name("encoder.embeddings.position")
            .ok_or_else(|| ModelError::Config("pretrained decoder lacks positions".into()))?;
        let rows = config.max_positions_decoder;
        let h = pos.cols();
        p.insert(
            "decoder.embeddings.position",
            Tensor::matrix(rows, h, pos.data()[..rows * h].to_vec())?,
        );
        Ok(model)
    }

    /// Encoder states and the padding mask used for cross-attention.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        history: &[u32],
        globals: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, AttentionMask, AttentionStats)> {
        if history.is_empty() {
            return Err(ModelError::Contract("empty history".into()));
        }
        let mask = AttentionMask::all_valid(history.len());
        let mut f = Fwd {
            tape,
            store,
            cfg: &self.config,
            train,
            rng,
        };
        let (h, stats) = encoder_hidden(&mut f, "encoder", EncoderKind::Windowed, history, &mask, globals)?;
        Ok((h, mask, stats))
    }

    /// Decoder logits `m×V` for decoder input `dec_in` given encoder states.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        enc_mask: &AttentionMask,
        dec_in: &[u32],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let m = dec_in.len();
        let max = self.config.max_positions_decoder;
        if m == 0 {
            return Err(ModelError::Contract("empty decoder input".into()));
        }
        if m > max {
            return Err(ModelError::Length {
                what: "decoder input",
                len: m,
                max,
            });
        }
        let mut f = Fwd {
            tape,
            store,
            cfg: &self.config,
            train,
            rng,
        };
        let self_mask = AttentionMask::all_valid(m);
        let kind = SelfAttention::Dense {
            mask: &self_mask,
            causal: true,
        };
        let mut x = f.embed("decoder", dec_in)?;
        for l in 0..self.config.num_layers {
            x = f.layer(x, &format!("decoder.layer{l}"), &kind, Some((enc, enc_mask)))?.0;
        }
        f.lm_logits(x, DEC_WORDS, "decoder.lm_head")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        history: &[u32],
        globals: &[usize],
        dec_in: &[u32],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (enc, mask, _) = self.encode(tape, store, history, globals, train, rng)?;
        self.decode(tape, store, enc, &mask, dec_in, train, rng)
    }

    /// Teacher-forced mean cross entropy and the number of scored tokens.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &Seq2SeqExample,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, usize)> {
        let logits = self.logits(tape, store, &ex.history, &ex.globals, &ex.decoder_input(), train, rng)?;
        let labels = ex.labels();
        Ok((tape.cross_entropy(logits, &labels, IGNORE_INDEX)?, labels.len()))
    }

    /// Decodes from [CLS] until [EOS] or `max_len` tokens (capped by the
    /// decoder position table). The result includes [EOS] if produced.
    pub fn generate(
        &self,
        history: &[u32],
        globals: &[usize],
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let (enc, mask, _) = self.encode(&mut tape, &self.params, history, globals, false, &mut rng)?;
        let enc = tape.value(enc).clone();
        let max_len = max_len.min(self.config.max_positions_decoder);
        let step = |prefix: &[u32]| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let enc = tape.constant(enc.clone());
            let dec_in: Vec<u32> = std::iter::once(CLS).chain(prefix.iter().copied()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let logits = self.decode(&mut tape, &self.params, enc, &mask, &dec_in, false, &mut rng)?;
            let t = tape.value(logits);
            let last = Tensor::row(t.row_slice(t.rows() - 1).to_vec());
            let p = softmax_rows(&last, None)?;
            Ok(p.data().iter().map(|x| x.ln()).collect())
        };
        mode.run(step, EOS, max_len)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        model_metadata("lf2bert", &self.config)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.metadata.get("model.kind").map(String::as_str) != Some("lf2bert") {
            return Err(ModelError::Config("checkpoint does not hold an LF2BERT model".into()));
        }
        let config = config_from_metadata(&ckpt.metadata)?;
        let skeleton = Lf2Bert::new(config.clone(), 0)?;
        validate_params(&skeleton.params, &ckpt.params)?;
        Ok(Lf2Bert {
            config,
            params: ckpt.params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tie: bool) -> ModelConfig {
        let mut cfg = ModelConfig::new(1, 2, 8, 16, 12, 6, 13, 1);
        cfg.dropout = 0.0;
        cfg.tie_embeddings = tie;
        cfg
    }

    #[test]
    fn logits_shape_matches_decoder_input() {
        let m = Lf2Bert::new(tiny(true), 3).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .logits(&mut tape, &m.params, &[0, 7, 8, 9, 2], &[1], &[0, 7, 8], false, &mut rng)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 13]);
    }

    #[test]
    fn tied_tables_share_storage() {
        let mut m = Lf2Bert::new(tiny(true), 3).unwrap();
        let dec = m.params.expect_id(DEC_WORDS).unwrap();
        let enc = m.params.expect_id("encoder.embeddings.word").unwrap();
        assert_eq!(dec, enc);
        m.params.get_mut(dec).data_mut()[0] = 42.0;
        assert_eq!(m.params.by_name("encoder.embeddings.word").unwrap().data()[0], 42.0);
        let untied = Lf2Bert::new(tiny(false), 3).unwrap();
        assert_ne!(
            untied.params.expect_id(DEC_WORDS).unwrap(),
            untied.params.expect_id("encoder.embeddings.word").unwrap()
        );
    }

    #[test]
    fn empty_history_is_rejected() {
        let m = Lf2Bert::new(tiny(true), 3).unwrap();
        assert!(m.generate(&[], &[], DecodeMode::Greedy, 3).is_err());
    }

    #[test]
    fn max_len_one_generates_one_token() {
        let m = Lf2Bert::new(tiny(true), 3).unwrap();
        let out = m.generate(&[0, 9, 10, 2], &[], DecodeMode::Greedy, 1).unwrap();
        assert_eq!(out.len(), 1);
    }
}
