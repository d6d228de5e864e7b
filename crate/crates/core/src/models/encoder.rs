//! Masked-LM encoders: dense ("BERT") and windowed ("Longformer").

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::{init_embeddings, init_layer, init_lm_head, Fwd, SelfAttention};
use super::{validate_params, ModelConfig, ModelError, Result};
use crate::attention::{AttentionConfig, AttentionMask, AttentionStats};
use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor, Var};

/// Label value excluded from every loss.
pub const IGNORE_INDEX: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Full self-attention.
    Dense,
    /// Sliding window plus global positions.
    Windowed,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Dense => "bert",
            EncoderKind::Windowed => "longformer",
        }
    }
}

/// Bidirectional encoder with a masked-LM head. Parameters live under
/// `encoder.*` and `mlm_head.*`.
#[derive(Clone, Debug)]
pub struct MaskedLm {
    pub config: ModelConfig,
    pub kind: EncoderKind,
    pub params: ParamStore,
}

/// Encoder stack over `ids` under parameter prefix `prefix`.
pub(crate) fn encoder_hidden(
    f: &mut Fwd,
    prefix: &str,
    kind: EncoderKind,
    ids: &[u32],
    mask: &AttentionMask,
    extra_globals: &[usize],
) -> Result<(Var, AttentionStats)> {
    let n = ids.len();
    if n == 0 {
        return Err(ModelError::Contract("empty encoder input".into()));
    }
    let max = f.cfg.max_positions_encoder;
    if n > max {
        return Err(ModelError::Length {
            what: "encoder input",
            len: n,
            max,
        });
    }
    if mask.len() != n {
        return Err(ModelError::Contract(format!("mask of {} for {n} tokens", mask.len())));
    }
    let window_cfg;
    let kind = match kind {
        EncoderKind::Dense => SelfAttention::Dense { mask, causal: false },
        EncoderKind::Windowed => {
            let mut globals: Vec<usize> = f.cfg.attention.global_indices.clone();
            globals.extend_from_slice(extra_globals);
            globals.retain(|&g| g < n);
            window_cfg = AttentionConfig::new(
                f.cfg.attention.radius,
                globals,
                f.cfg.num_heads,
                f.cfg.head_dim(),
            );
            SelfAttention::Windowed {
                cfg: &window_cfg,
                mask,
            }
        }
    };
    let mut x = f.embed(prefix, ids)?;
    let mut stats = AttentionStats::default();
    for l in 0..f.cfg.num_layers {
        let (y, s) = f.layer(x, &format!("{prefix}.layer{l}"), &kind, None)?;
        stats += s;
        x = y;
    }
    Ok((x, stats))
}

pub(crate) fn model_metadata(kind: &str, cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut meta: BTreeMap<String, String> = cfg
        .to_kv()
        .into_iter()
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect();
    meta.insert("model.kind".into(), kind.into());
    meta
}

pub(crate) fn config_from_metadata(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let kv = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    ModelConfig::from_kv(&kv)
}

impl MaskedLm {
    pub fn new(config: ModelConfig, kind: EncoderKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_embeddings(&mut params, "encoder", &config, config.max_positions_encoder, &mut rng);
        for l in 0..config.num_layers {
            init_layer(&mut params, &format!("encoder.layer{l}"), &config, false, &mut rng);
        }
        init_lm_head(&mut params, "mlm_head", &config, &mut rng);
        Ok(MaskedLm { config, kind, params })
    }

    pub fn bert(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, EncoderKind::Dense, seed)
    }

    /// Final hidden states `n×H`.
    #[allow(clippy::too_many_arguments)]
    pub fn hidden(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[u32],
        mask: Option<&AttentionMask>,
        extra_globals: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, AttentionStats)> {
        let full = AttentionMask::all_valid(ids.len());
        let mask = mask.unwrap_or(&full);
        let mut f = Fwd {
            tape,
            store,
            cfg: &self.config,
            train,
            rng,
        };
        encoder_hidden(&mut f, "encoder", self.kind, ids, mask, extra_globals)
    }

    /// Per-position vocabulary logits `n×V`.
    #[allow(clippy::too_many_arguments)]
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[u32],
        mask: Option<&AttentionMask>,
        extra_globals: &[usize],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let (h, _) = self.hidden(tape, store, ids, mask, extra_globals, train, rng)?;
        let mut f = Fwd {
            tape,
            store,
            cfg: &self.config,
            train,
            rng,
        };
        f.lm_logits(h, "encoder.embeddings.word", "mlm_head")
    }

    /// Evaluation-mode logits with the model's own parameters.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.logits(&mut tape, &self.params, ids, None, &[], false, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross entropy over positions whose label is not [`IGNORE_INDEX`].
    #[allow(clippy::too_many_arguments)]
    pub fn mlm_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        corrupted: &[u32],
        labels: &[u32],
        mask: Option<&AttentionMask>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let logits = self.logits(tape, store, corrupted, mask, &[], train, rng)?;
        Ok(tape.cross_entropy(logits, labels, IGNORE_INDEX)?)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        model_metadata(self.kind.name(), &self.config)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let kind = match ckpt.metadata.get("model.kind").map(String::as_str) {
            Some("bert") => EncoderKind::Dense,
            Some("longformer") => EncoderKind::Windowed,
            other => {
                return Err(ModelError::Config(format!(
                    "checkpoint holds {other:?}, expected a masked-LM encoder"
                )))
            }
        };
        let config = config_from_metadata(&ckpt.metadata)?;
        let skeleton = MaskedLm::new(config.clone(), kind, 0)?;
        validate_params(&skeleton.params, &ckpt.params)?;
        Ok(MaskedLm {
            config,
            kind,
            params: ckpt.params,
        })
    }
}

/// Long encoder warm-started from a dense one: every weight is copied and
/// the position table is tiled, row `i` taking old row `i mod old_max`.
pub fn longformer_from_bert(bert: &MaskedLm, new_max_positions: usize) -> Result<MaskedLm> {
    let old = bert.config.max_positions_encoder;
    if new_max_positions < old {
        return Err(ModelError::Config(format!(
            "new position limit {new_max_positions} is below the pretrained {old}"
        )));
    }
    let table = bert
        .params
        .by_name("encoder.embeddings.position")
        .ok_or_else(|| ModelError::Config("missing encoder.embeddings.position".into()))?;
    let h = table.cols();
    let mut data = Vec::with_capacity(new_max_positions * h);
    for i in 0..new_max_positions {
        data.extend_from_slice(table.row_slice(i % old));
    }
    let mut params = bert.params.clone();
    params.insert(
        "encoder.embeddings.position",
        Tensor::matrix(new_max_positions, h, data)?,
    );
    let mut config = bert.config.clone();
    config.max_positions_encoder = new_max_positions;
    Ok(MaskedLm {
        config,
        kind: EncoderKind::Windowed,
        params,
    })
}
