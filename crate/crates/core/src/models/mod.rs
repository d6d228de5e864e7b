//! Model assemblies: dense and windowed masked-LM encoders, the LF2BERT
//! encoder-decoder, the pointer-generator baseline and decoding.

mod decode;
mod encoder;
mod lf2bert;
mod pgn;
mod transformer;

pub use decode::{beam_search, greedy, DecodeMode};
pub use encoder::{longformer_from_bert, EncoderKind, MaskedLm, IGNORE_INDEX};
pub use lf2bert::{Lf2Bert, Seq2SeqExample};
pub use pgn::{
    copy_mixture, EncodedSource, PgnConfig, PgnExample, PgnModel, PgnSwitch, WordVocab, PGN_PAD,
    PGN_START, PGN_STOP, PGN_UNK,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::AttentionConfig;
use crate::tensor::{CheckpointError, ParamStore, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds the maximum of {max}")]
    Length {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Transformer hyper-parameters shared by every encoder and decoder stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub max_positions_encoder: usize,
    pub max_positions_decoder: usize,
    pub vocab_size: usize,
    /// Window radius plus always-global positions (usually `[0]`, the CLS).
    pub attention: AttentionConfig,
    pub tie_embeddings: bool,
    pub tie_lm_head: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        hidden_size: usize,
        ffn_size: usize,
        max_positions_encoder: usize,
        max_positions_decoder: usize,
        vocab_size: usize,
        radius: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            num_heads,
            hidden_size,
            ffn_size,
            max_positions_encoder,
            max_positions_decoder,
            vocab_size,
            attention: AttentionConfig::new(radius, vec![0], num_heads, hidden_size / num_heads.max(1)),
            tie_embeddings: true,
            tie_lm_head: true,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Desk-scale model: 2 layers, 2 heads, hidden 32.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig::new(2, 2, 32, 64, 512, 64, vocab_size, 8)
    }

    /// BERT-Base sized long encoder with 8192/256 input/output lengths.
    pub fn paper_base() -> Self {
        ModelConfig::new(12, 12, 768, 3072, 8192, 256, 40_000, 256)
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny(vocab_size)),
            "paper-base" => Some(Self::paper_base()),
            _ => None,
        }
    }

    pub fn is_cluster_scale(&self) -> bool {
        self.hidden_size >= 768 || self.num_layers >= 12 || self.max_positions_encoder >= 8192
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_positions_decoder > self.max_positions_encoder {
            return bad(format!(
                "decoder positions {} exceed encoder positions {}",
                self.max_positions_decoder, self.max_positions_encoder
            ));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.ffn_size == 0 {
            return bad("layers, vocabulary and ffn size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.attention.num_heads != self.num_heads || self.attention.head_dim != self.head_dim() {
            return bad("attention heads disagree with the model heads".into());
        }
        Ok(())
    }

    /// Flat `key=value` form, also stored in checkpoint metadata.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let globals: Vec<String> = self.attention.global_indices.iter().map(|g| g.to_string()).collect();
        [
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("ffn_size", self.ffn_size.to_string()),
            ("max_positions_encoder", self.max_positions_encoder.to_string()),
            ("max_positions_decoder", self.max_positions_decoder.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("window_radius", self.attention.radius.to_string()),
            ("global_indices", globals.join(",")),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("tie_lm_head", self.tie_lm_head.to_string()),
            ("dropout", self.dropout.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
            ("init_std", self.init_std.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = kv
                .get(key)
                .ok_or_else(|| ModelError::Config(format!("missing key {key}")))?;
            raw.trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("bad value for {key}: {raw}")))
        }
        let heads: usize = get(kv, "num_heads")?;
        let hidden: usize = get(kv, "hidden_size")?;
        let globals = kv
            .get("global_indices")
            .map(|s| {
                s.split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .transpose()
            .map_err(|_| ModelError::Config("bad global_indices".into()))?
            .unwrap_or_else(|| vec![0]);
        let cfg = ModelConfig {
            num_layers: get(kv, "num_layers")?,
            num_heads: heads,
            hidden_size: hidden,
            ffn_size: get(kv, "ffn_size")?,
            max_positions_encoder: get(kv, "max_positions_encoder")?,
            max_positions_decoder: get(kv, "max_positions_decoder")?,
            vocab_size: get(kv, "vocab_size")?,
            attention: AttentionConfig::new(
                get(kv, "window_radius")?,
                globals,
                heads,
                hidden / heads.max(1),
            ),
            tie_embeddings: get(kv, "tie_embeddings")?,
            tie_lm_head: get(kv, "tie_lm_head")?,
            dropout: get(kv, "dropout")?,
            layer_norm_eps: get(kv, "layer_norm_eps")?,
            init_std: get(kv, "init_std")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Checks that `loaded` has exactly the names and shapes of `expected`.
pub(crate) fn validate_params(expected: &ParamStore, loaded: &ParamStore) -> Result<()> {
    for (name, id) in expected.names() {
        let want = expected.get(id).shape();
        match loaded.by_name(name) {
            None => return Err(ModelError::Config(format!("checkpoint lacks {name}"))),
            Some(t) if t.shape() != want => {
                return Err(ModelError::Config(format!(
                    "{name}: checkpoint shape {:?}, config expects {want:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some((name, _)) = loaded.names().find(|(n, _)| expected.id(n).is_none()) {
        return Err(ModelError::Config(format!("unexpected tensor {name} in checkpoint")));
    }
    Ok(())
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(rows, cols, std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::tiny(123);
        cfg.attention.global_indices = vec![0, 4];
        cfg.tie_lm_head = false;
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn base_preset_values() {
        let cfg = ModelConfig::paper_base();
        assert_eq!(
            (cfg.num_layers, cfg.num_heads, cfg.hidden_size, cfg.ffn_size),
            (12, 12, 768, 3072)
        );
        assert_eq!((cfg.max_positions_encoder, cfg.max_positions_decoder), (8192, 256));
        assert_eq!(cfg.vocab_size, 40_000);
        assert!(cfg.is_cluster_scale());
        assert!(!ModelConfig::tiny(200).is_cluster_scale());
    }

    #[test]
    fn rejects_indivisible_heads_and_long_decoder() {
        let mut cfg = ModelConfig::tiny(10);
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(10);
        cfg.max_positions_decoder = cfg.max_positions_encoder + 1;
        assert!(cfg.validate().is_err());
    }
}
