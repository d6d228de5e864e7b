//! Masked-LM pretraining, teacher-forced fine-tuning and patient splits.
//!
//! Every loop is driven by a single seed: one ChaCha stream shuffles, one
//! draws masks and one feeds dropout, so a rerun with the same corpus and
//! config reproduces the parameters bit for bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{
    Lf2Bert, MaskedLm, ModelError, PgnExample, PgnModel, Seq2SeqExample, IGNORE_INDEX,
};
use crate::tensor::{linear_lr, Adam, ParamStore, Tape, Var};
use crate::tokenizer::{is_special, EOS, MASK, NUM_SPECIALS};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training config: {0}")]
    Config(String),
    #[error("split: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How selected MLM positions are corrupted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskStyle {
    /// Every selected token becomes [MASK].
    #[default]
    Basic,
    /// BERT's 80% [MASK], 10% random token, 10% unchanged.
    Bert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed linearly to zero over the run.
    pub lr0: f64,
    pub seed: u64,
    pub mask_prob: f64,
    pub mask_style: MaskStyle,
    /// Process examples shortest first in every epoch.
    pub curriculum: bool,
    pub max_in_len: usize,
    pub max_out_len: usize,
    /// Hard cap on optimiser steps, if any.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip, if any.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr0: 1e-3,
            seed: 0,
            mask_prob: 0.15,
            mask_style: MaskStyle::Basic,
            curriculum: false,
            max_in_len: 512,
            max_out_len: 64,
            max_steps: None,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(TrainError::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if self.max_in_len < 2 || self.max_out_len < 1 {
            return Err(TrainError::Config("max_in_len must be >= 2 and max_out_len >= 1".into()));
        }
        Ok(())
    }

    fn total_steps(&self, n_examples: usize) -> usize {
        let per_epoch = n_examples.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |cap| total.min(cap))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    /// Token-weighted mean loss of the batch before the update.
    pub loss: f64,
    /// Longest example in the batch, in tokens.
    pub max_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    /// Examples removed before training (over-long targets, empty inputs).
    pub dropped: usize,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Plain-text metrics log: a header, then `step lr loss` per line.
    pub fn metrics_log(&self) -> String {
        let mut out = String::from("step lr loss\n");
        for s in &self.steps {
            let _ = writeln!(out, "{} {:.6e} {:.6}", s.step, s.lr, s.loss);
        }
        out
    }
}

/// Parses a log written by [`TrainReport::metrics_log`].
pub fn parse_metrics_log(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let bad = |line: &str| TrainError::Config(format!("bad metrics line: {line}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split_whitespace();
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
            let lr = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
            let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
            Ok((step, lr, loss))
        })
        .collect()
}

/// Basic MLM corruption: every non-special token is selected with
/// probability `mask_prob` and replaced by [MASK]. Labels hold the original
/// token at selected positions and [`IGNORE_INDEX`] elsewhere.
pub fn mlm_mask(tokens: &[u32], mask_prob: f64, rng: &mut impl Rng) -> (Vec<u32>, Vec<u32>) {
    mlm_mask_with(tokens, mask_prob, MaskStyle::Basic, 0, rng)
}

/// [`mlm_mask`] with a selectable corruption style. `vocab_size` is only
/// used by [`MaskStyle::Bert`] to draw random replacement tokens.
pub fn mlm_mask_with(
    tokens: &[u32],
    mask_prob: f64,
    style: MaskStyle,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<u32>) {
    let mut corrupted = tokens.to_vec();
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    for (i, &tok) in tokens.iter().enumerate() {
        if is_special(tok) || !rng.gen_bool(mask_prob) {
            continue;
        }
        labels[i] = tok;
        corrupted[i] = match style {
            MaskStyle::Basic => MASK,
            MaskStyle::Bert => {
                let roll: f64 = rng.gen();
                if roll < 0.8 || vocab_size <= NUM_SPECIALS {
                    MASK
                } else if roll < 0.9 {
                    rng.gen_range(NUM_SPECIALS..vocab_size) as u32
                } else {
                    tok
                }
            }
        };
    }
    (corrupted, labels)
}

/// Batches of example indices for one epoch. With `curriculum` the order is
/// ascending length (ties by index) so batch maxima never decrease;
/// otherwise it is a seeded shuffle.
pub fn epoch_batches(lengths: &[usize], batch_size: usize, curriculum: bool, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if curriculum {
        order.sort_by_key(|&i| (lengths[i], i));
    } else {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Shared optimisation loop. `loss_of(i, store, rng)` builds the loss of
/// example `i` on a fresh tape and returns it with its token count; a count
/// of zero skips the example for this step.
fn run_loop<F>(
    store: &mut ParamStore,
    lengths: &[usize],
    cfg: &TrainConfig,
    mut loss_of: F,
) -> Result<Vec<StepMetrics>>
where
    F: FnMut(usize, &ParamStore, &mut Tape) -> Result<Option<(Var, usize)>>,
{
    let total = cfg.total_steps(lengths.len());
    let mut shuffle = rng_stream(cfg.seed, SHUFFLE_STREAM);
    let mut adam = Adam::new(store);
    let mut metrics = Vec::with_capacity(total);
    'epochs: for _ in 0..cfg.epochs {
        for batch in epoch_batches(lengths, cfg.batch_size, cfg.curriculum, &mut shuffle) {
            if metrics.len() >= total {
                break 'epochs;
            }
            // Examples are run one at a time without padding. Each loss is
            // weighted by its share of the batch tokens, which gives the
            // same gradient as a padded batch with a token-mean loss.
            store.zero_grad();
            let mut scored = Vec::with_capacity(batch.len());
            for &i in &batch {
                let mut tape = Tape::new();
                if let Some((loss, count)) = loss_of(i, store, &mut tape)? {
                    scored.push((tape, loss, count));
                }
            }
            let tokens: usize = scored.iter().map(|s| s.2).sum();
            if tokens == 0 {
                continue;
            }
            let mut batch_loss = 0.0;
            for (mut tape, loss, count) in scored {
                let w = count as f64 / tokens as f64;
                batch_loss += w * tape.value(loss).item();
                let weighted = tape.scale(loss, w);
                tape.backward(weighted, store).map_err(ModelError::from)?;
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = store.grad_norm();
                if norm > clip {
                    store.scale_grads(clip / norm);
                }
            }
            let step = metrics.len();
            let lr = linear_lr(step as u64, total as u64, cfg.lr0);
            adam.step(store, lr);
            metrics.push(StepMetrics {
                step,
                lr,
                loss: batch_loss,
                max_len: batch.iter().map(|&i| lengths[i]).max().unwrap_or(0),
            });
        }
    }
    store.zero_grad();
    Ok(metrics)
}

/// Masked-LM training on token sequences. Sequences longer than
/// `max_in_len` (or the position table) keep their head.
pub fn pretrain_mlm(model: &mut MaskedLm, corpus: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let max = cfg.max_in_len.min(model.config.max_positions_encoder);
    let seqs: Vec<&[u32]> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| &s[..s.len().min(max)])
        .collect();
    if seqs.is_empty() {
        return Err(TrainError::Config("empty pretraining corpus".into()));
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let mut mask_rng = rng_stream(cfg.seed, MASK_STREAM);
    let mut drop_rng = rng_stream(cfg.seed, DROPOUT_STREAM);
    let vocab = model.config.vocab_size;
    let mut params = std::mem::take(&mut model.params);
    let frozen = MaskedLm {
        params: ParamStore::new(),
        ..model.clone()
    };
    let result = run_loop(&mut params, &lengths, cfg, |i, store, tape| {
        let (corrupted, labels) = mlm_mask_with(seqs[i], cfg.mask_prob, cfg.mask_style, vocab, &mut mask_rng);
        let count = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        if count == 0 {
            return Ok(None);
        }
        let loss = frozen.mlm_loss(tape, store, &corrupted, &labels, None, true, &mut drop_rng)?;
        Ok(Some((loss, count)))
    });
    model.params = params;
    Ok(TrainReport {
        steps: result?,
        dropped: corpus.len() - seqs.len(),
    })
}

/// A model trainable with teacher forcing on its own example type.
pub trait Seq2SeqTrainable {
    type Example: Clone;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Applies the length policy: the input keeps its head, the target is
    /// never cut. `None` means the example must be dropped.
    fn fit_lengths(&self, ex: &Self::Example, cfg: &TrainConfig) -> Option<Self::Example>;

    /// Input length used for curriculum ordering.
    fn input_len(ex: &Self::Example) -> usize;

    /// Mean token loss under `store` and the number of scored tokens.
    fn example_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &Self::Example,
        rng: &mut ChaCha8Rng,
    ) -> std::result::Result<(Var, usize), ModelError>;
}

/// Cuts `history` to at most `max` tokens keeping the head and ending with
/// [EOS]; globals past the cut are dropped.
pub fn truncate_history(ex: &Seq2SeqExample, max: usize) -> Seq2SeqExample {
    if ex.history.len() <= max {
        return ex.clone();
    }
    let mut history = ex.history[..max - 1].to_vec();
    history.push(EOS);
    Seq2SeqExample {
        globals: ex.globals.iter().copied().filter(|&g| g < max - 1).collect(),
        history,
        target: ex.target.clone(),
    }
}

impl Seq2SeqTrainable for Lf2Bert {
    type Example = Seq2SeqExample;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn fit_lengths(&self, ex: &Seq2SeqExample, cfg: &TrainConfig) -> Option<Seq2SeqExample> {
        let max_out = cfg.max_out_len.min(self.config.max_positions_decoder);
        if ex.history.is_empty() || ex.target.len() + 1 > max_out {
            return None;
        }
        let max_in = cfg.max_in_len.min(self.config.max_positions_encoder);
        Some(truncate_history(ex, max_in))
    }

    fn input_len(ex: &Seq2SeqExample) -> usize {
        ex.history.len()
    }

    fn example_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &Seq2SeqExample,
        rng: &mut ChaCha8Rng,
    ) -> std::result::Result<(Var, usize), ModelError> {
        self.loss(tape, store, ex, true, rng)
    }
}

impl Seq2SeqTrainable for PgnModel {
    type Example = PgnExample;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn fit_lengths(&self, ex: &PgnExample, cfg: &TrainConfig) -> Option<PgnExample> {
        let max_out = cfg.max_out_len.min(self.config.max_target_len);
        if ex.source.is_empty() || ex.target.len() + 1 > max_out {
            return None;
        }
        let max_in = cfg.max_in_len.min(self.config.max_source_len);
        Some(PgnExample {
            source: ex.source[..ex.source.len().min(max_in)].to_vec(),
            target: ex.target.clone(),
        })
    }

    fn input_len(ex: &PgnExample) -> usize {
        ex.source.len()
    }

    fn example_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ex: &PgnExample,
        _rng: &mut ChaCha8Rng,
    ) -> std::result::Result<(Var, usize), ModelError> {
        self.loss(tape, store, ex)
    }
}

/// Teacher-forced fine-tuning minimising the summed target negative
/// log-likelihood (token-weighted per batch).
pub fn finetune_seq2seq<M>(model: &mut M, examples: &[M::Example], cfg: &TrainConfig) -> Result<TrainReport>
where
    M: Seq2SeqTrainable + Clone,
{
    cfg.validate()?;
    let kept: Vec<M::Example> = examples
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| {
            let fitted = model.fit_lengths(ex, cfg);
            if fitted.is_none() {
                log::warn!("dropping example {i}: empty input or target longer than {}", cfg.max_out_len);
            }
            fitted
        })
        .collect();
    if kept.is_empty() {
        return Err(TrainError::Config("no trainable examples".into()));
    }
    let lengths: Vec<usize> = kept.iter().map(M::input_len).collect();
    let mut drop_rng = rng_stream(cfg.seed, DROPOUT_STREAM);
    let mut params = std::mem::take(model.params_mut());
    let frozen = model.clone();
    let result = run_loop(&mut params, &lengths, cfg, |i, store, tape| {
        let (loss, count) = frozen.example_loss(tape, store, &kept[i], &mut drop_rng)?;
        Ok(Some((loss, count)))
    });
    *model.params_mut() = params;
    Ok(TrainReport {
        steps: result?,
        dropped: examples.len() - kept.len(),
    })
}

/// Partitions items by patient: a seeded shuffle of the distinct patient
/// ids, with `floor(n · (1 − train_fraction))` patients (at least one, at
/// most `n − 1`) going to validation. Item order is kept on both sides.
pub fn split_by_patient<T, F>(items: Vec<T>, patient_of: F, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)>
where
    F: Fn(&T) -> &str,
{
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TrainError::Split(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let patients: BTreeSet<&str> = items.iter().map(&patient_of).collect();
    let n = patients.len();
    if n < 2 {
        return Err(TrainError::Split(format!("need at least 2 patients, found {n}")));
    }
    let mut order: Vec<String> = patients.into_iter().map(str::to_string).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // the epsilon keeps 100 · 0.03 from flooring to 2
    let n_val = ((n as f64 * (1.0 - train_fraction) + 1e-9).floor() as usize).clamp(1, n - 1);
    let val: BTreeSet<String> = order.into_iter().take(n_val).collect();
    let (valid, train): (Vec<T>, Vec<T>) = items.into_iter().partition(|it| val.contains(patient_of(it)));
    Ok((train, valid))
}
