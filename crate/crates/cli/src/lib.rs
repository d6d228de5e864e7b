//! Command-line driver: every subcommand resolves its settings, delegates
//! to one pipeline operation and records a run manifest next to its
//! outputs.

pub mod config;
pub mod error;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use longsum_core::datapipe::{
    corpus_stats, filter_dataset, pgn_example, read_corpus, seq2seq_example, synth_corpus,
    synth_lexicon_text, write_audit_csv, write_corpus, ConceptLexicon, PatientHistory,
    SectionKind, SynthConfig,
};
use longsum_core::evalkit::{
    doctor_eval_aggregate, evaluate_model, example_scores_csv, length_bucket_csv,
    length_bucket_report, read_annotations, read_length_pairs, rouge_table_csv, EchoOracle,
    Lf2BertSummarizer, PgnSummarizer, RandomBaseline, Summarizer,
};
use longsum_core::models::{
    longformer_from_bert, DecodeMode, EncoderKind, Lf2Bert, MaskedLm, ModelConfig, PgnConfig,
    PgnModel, WordVocab,
};
use longsum_core::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Dtype, ParamStore};
use longsum_core::tokenizer::{Tokenizer, CLS, EOS, SEP};
use longsum_core::training::{
    finetune_seq2seq, pretrain_mlm, split_by_patient, MaskStyle, TrainConfig, TrainReport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Settings;
use crate::error::{CliError, Result};
use crate::manifest::{manifest_path, version_string, RunManifest};

const RANDOM_BASELINE_STREAM: u64 = 4;

#[derive(Parser, Debug)]
#[command(name = "longsum", version = env!("CARGO_PKG_VERSION"), about = "Long clinical history summarization pipeline")]
pub struct Cli {
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus whose targets follow from the records.
    Synth(SynthArgs),
    /// Train the BPE tokenizer on corpus records and targets.
    TrainBpe(TrainBpeArgs),
    /// Masked-LM pretraining of a dense or windowed encoder.
    Pretrain(PretrainArgs),
    /// Build a long windowed encoder from a dense one by tiling positions.
    TileInit(TileInitArgs),
    /// Fine-tune LF2BERT or the pointer-generator on history/target pairs.
    Finetune(FinetuneArgs),
    /// Write one prediction per history and section as JSONL.
    Generate(GenerateArgs),
    /// ROUGE table for a checkpoint or a reference system.
    Evaluate(EvaluateArgs),
    /// Concept-coverage filtering with an audit CSV.
    Filter(FilterArgs),
    /// Corpus statistics and the history-length histogram.
    Stats(StatsArgs),
    /// Mean ROUGE-L per input-length bucket.
    ReportLength(ReportLengthArgs),
    /// Aggregate doctor annotations into criterion percentages.
    ReportDoctor(ReportDoctorArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub max_histories: Option<usize>,
    #[arg(long)]
    pub filler_min: Option<usize>,
    #[arg(long)]
    pub filler_max: Option<usize>,
    #[arg(long)]
    pub contamination: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the matching concept lexicon.
    #[arg(long)]
    pub lexicon_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainBpeArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Directory receiving vocab.txt and merges.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub curriculum: Option<bool>,
    #[arg(long)]
    pub max_in_len: Option<usize>,
    #[arg(long)]
    pub max_out_len: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Loss log; defaults to `<checkpoint-out>.metrics.txt`.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// `tiny` or `paper-base`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Allow cluster-scale model sizes.
    #[arg(long)]
    pub i_have_a_cluster: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Continue from an encoder checkpoint instead of a fresh BERT.
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    /// `basic` or `bert`.
    #[arg(long)]
    pub mask_style: Option<MaskStyleArg>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct TileInitArgs {
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub max_positions: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// `lf2bert` or `pgn`.
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Train on one section; all sections by default.
    #[arg(long)]
    pub section: Option<SectionKind>,
    /// Long encoder, dense encoder or a model of the same kind to continue.
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    /// Dense encoder that initialises the LF2BERT decoder.
    #[arg(long)]
    pub bert_checkpoint: Option<PathBuf>,
    /// Needed to build LF2BERT from scratch.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    /// Hold out patients: train on this fraction of them.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Held-out corpus; defaults to `<checkpoint-out>.valid.jsonl`.
    #[arg(long)]
    pub validation_out: Option<PathBuf>,
    #[arg(long)]
    pub pgn_vocab_size: Option<usize>,
    #[arg(long)]
    pub pgn_max_source_len: Option<usize>,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// `greedy` or `beam`.
    #[arg(long)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub section: Option<SectionKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    /// `echo` (gold targets) or `random`, instead of a checkpoint.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub section: Option<SectionKind>,
    /// ROUGE table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-example scores CSV; needs a single --section.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Two-column `form lemma` table.
    #[arg(long)]
    pub lemmas: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub section: Option<SectionKind>,
    /// Filtered corpus.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Audit CSV; defaults to `<out>.audit.csv`.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<usize>,
    /// Directory receiving sections.csv and histogram.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportLengthArgs {
    /// Per-example scores CSV written by `evaluate --scores-out`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub bucket_width: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportDoctorArgs {
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Directory receiving criteria.csv and human_vs_machine.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($text),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }
    };
}

keyword_enum!(ModeArg { Greedy => "greedy", Beam => "beam" });
keyword_enum!(ModelKind { Lf2Bert => "lf2bert", Pgn => "pgn" });
keyword_enum!(MaskStyleArg { Basic => "basic", Bert => "bert" });

/// Files a command read and wrote; the first output anchors the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("LONGSUM_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parses `argv` (program name first) and runs the command.
pub fn run(argv: Vec<OsString>) -> Result<()> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let started_at = chrono::Utc::now().to_rfc3339();
    let mut settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.or("seed", cli.seed, 0u64)?;
    let (name, outcome) = match cli.command {
        Command::Synth(a) => ("synth", synth(&mut settings, seed, a)?),
        Command::TrainBpe(a) => ("train-bpe", train_bpe(&mut settings, a)?),
        Command::Pretrain(a) => ("pretrain", pretrain(&mut settings, seed, a)?),
        Command::TileInit(a) => ("tile-init", tile_init(&mut settings, a)?),
        Command::Finetune(a) => ("finetune", finetune(&mut settings, seed, a)?),
        Command::Generate(a) => ("generate", generate(&mut settings, a)?),
        Command::Evaluate(a) => ("evaluate", evaluate(&mut settings, seed, a)?),
        Command::Filter(a) => ("filter", filter(&mut settings, a)?),
        Command::Stats(a) => ("stats", stats(&mut settings, a)?),
        Command::ReportLength(a) => ("report-length", report_length(&mut settings, a)?),
        Command::ReportDoctor(a) => ("report-doctor", report_doctor(&mut settings, a)?),
    };
    let Some(primary) = outcome.outputs.first() else {
        return Ok(());
    };
    let show = |paths: &[PathBuf]| paths.iter().map(|p| p.display().to_string()).collect();
    let manifest = RunManifest {
        command: name.to_string(),
        config_path: settings.config_path.as_ref().map(|p| p.display().to_string()),
        seed: Some(seed),
        inputs: show(&outcome.inputs),
        outputs: show(&outcome.outputs),
        version: version_string(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        settings: settings.resolved.clone(),
        argv: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
    };
    let path = manifest_path(primary);
    manifest.write(&path)?;
    log::info!("{name}: manifest {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_corpus(path: &Path) -> Result<Vec<PatientHistory>> {
    let corpus = read_corpus(path)?;
    log::info!("read {} histories from {}", corpus.len(), path.display());
    Ok(corpus)
}

fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))
    };
    Ok(Tokenizer::from_files(&read("vocab.txt")?, &read("merges.txt")?)?)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::io(path, "no such checkpoint file"));
    }
    Ok(load_checkpoint(path)?)
}

fn write_checkpoint(path: &Path, params: &ParamStore, meta: &BTreeMap<String, String>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_checkpoint(path, params, meta, Dtype::F64).map_err(|e| CliError::io(path, e))
}

const TOKENIZER_VOCAB: &str = "tokenizer.vocab";
const TOKENIZER_MERGES: &str = "tokenizer.merges";

fn with_tokenizer(mut meta: BTreeMap<String, String>, tok: &Tokenizer) -> BTreeMap<String, String> {
    let (vocab, merges) = tok.to_files();
    meta.insert(TOKENIZER_VOCAB.into(), vocab);
    meta.insert(TOKENIZER_MERGES.into(), merges);
    meta
}

fn embedded_tokenizer(meta: &BTreeMap<String, String>) -> Result<Tokenizer> {
    match (meta.get(TOKENIZER_VOCAB), meta.get(TOKENIZER_MERGES)) {
        (Some(v), Some(m)) => Ok(Tokenizer::from_files(v, m)?),
        _ => Err(CliError::Schema("checkpoint carries no tokenizer".into())),
    }
}

fn sections_for(section: Option<SectionKind>) -> Vec<SectionKind> {
    section.map_or_else(|| SectionKind::ALL.to_vec(), |s| vec![s])
}

fn synth(s: &mut Settings, seed: u64, a: SynthArgs) -> Result<Outcome> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_patients: s.or("patients", a.patients, defaults.n_patients)?,
        max_histories_per_patient: s.or("max_histories", a.max_histories, defaults.max_histories_per_patient)?,
        filler_records: (
            s.or("filler_min", a.filler_min, defaults.filler_records.0)?,
            s.or("filler_max", a.filler_max, defaults.filler_records.1)?,
        ),
        contamination: s.or("contamination", a.contamination, defaults.contamination)?,
        ..defaults
    };
    if cfg.filler_records.0 > cfg.filler_records.1 {
        return Err(CliError::Usage("--filler-min exceeds --filler-max".into()));
    }
    if !(0.0..=1.0).contains(&cfg.contamination) {
        return Err(CliError::Usage("--contamination must lie in [0, 1]".into()));
    }
    let out = s.required_path("out", a.out)?;
    let corpus = synth_corpus(seed, &cfg);
    write_corpus(&out, &corpus)?;
    log::info!("wrote {} histories to {}", corpus.len(), out.display());
    let mut outputs = vec![out];
    if let Some(lex) = s.path("lexicon_out", a.lexicon_out)? {
        write_text(&lex, &synth_lexicon_text())?;
        outputs.push(lex);
    }
    Ok(Outcome { inputs: vec![], outputs })
}

/// Record texts, targets and section prefixes.
fn tokenizer_training_text(corpus: &[PatientHistory]) -> Vec<String> {
    let mut texts: Vec<String> = SectionKind::ALL.iter().map(|s| s.prefix().to_string()).collect();
    for h in corpus {
        texts.extend(h.records.iter().map(|r| r.text()));
        texts.extend(SectionKind::ALL.iter().filter_map(|&s| h.target(s)).map(String::from));
    }
    texts
}

fn train_bpe(s: &mut Settings, a: TrainBpeArgs) -> Result<Outcome> {
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let vocab_size = s.or("vocab_size", a.vocab_size, 2000usize)?;
    let out = s.required_path("out", a.out)?;
    let corpus = load_corpus(&corpus_path)?;
    let tok = Tokenizer::train(&tokenizer_training_text(&corpus), vocab_size)?;
    tok.save(&out).map_err(|e| CliError::io(&out, e))?;
    log::info!("tokenizer with {} entries in {}", tok.vocab_size(), out.display());
    Ok(Outcome {
        inputs: vec![corpus_path],
        outputs: vec![out],
    })
}

fn model_config(s: &mut Settings, args: &ModelArgs, vocab_size: usize) -> Result<ModelConfig> {
    let preset = s.or("preset", args.preset.clone(), "tiny".to_string())?;
    let base = ModelConfig::preset(&preset, vocab_size)
        .ok_or_else(|| CliError::Usage(format!("unknown preset {preset:?}; expected tiny or paper-base")))?;
    let mut kv = base.to_kv();
    let known: Vec<String> = kv.keys().cloned().collect();
    kv.extend(s.overrides(&known));
    kv.insert("vocab_size".into(), vocab_size.to_string());
    let cfg = ModelConfig::from_kv(&kv)?;
    cfg.validate()?;
    let cluster = args.i_have_a_cluster
        || s.file_value("i_have_a_cluster").is_some_and(|v| v == "true");
    if cfg.is_cluster_scale() && !cluster {
        return Err(CliError::Usage(format!(
            "{} layers, hidden {} and {} positions need --i-have-a-cluster",
            cfg.num_layers, cfg.hidden_size, cfg.max_positions_encoder
        )));
    }
    Ok(cfg)
}

fn train_config(
    s: &mut Settings,
    a: &TrainArgs,
    seed: u64,
    max_in: usize,
    max_out: usize,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let clip = s.or("grad_clip", a.grad_clip, 1.0)?;
    Ok(TrainConfig {
        epochs: s.or("epochs", a.epochs, d.epochs)?,
        batch_size: s.or("batch_size", a.batch_size, d.batch_size)?,
        lr0: s.or("lr", a.lr, d.lr0)?,
        seed,
        curriculum: s.or("curriculum", a.curriculum, d.curriculum)?,
        max_in_len: s.or("max_in_len", a.max_in_len, max_in)?,
        max_out_len: s.or("max_out_len", a.max_out_len, max_out)?,
        max_steps: s.get("max_steps", a.max_steps)?,
        grad_clip: (clip > 0.0).then_some(clip),
        ..d
    })
}

fn write_metrics(s: &mut Settings, a: &TrainArgs, ckpt_out: &Path, report: &TrainReport) -> Result<PathBuf> {
    let path = match s.path("metrics_out", a.metrics_out.clone())? {
        Some(p) => p,
        None => {
            let mut name = ckpt_out.file_name().unwrap_or_default().to_os_string();
            name.push(".metrics.txt");
            ckpt_out.with_file_name(name)
        }
    };
    write_text(&path, &report.metrics_log())?;
    if let Some(last) = report.final_loss() {
        log::info!("{} steps, final loss {last:.4}", report.steps.len());
    }
    Ok(path)
}

/// `[CLS] record [EOS]` for every record.
fn record_sequences(corpus: &[PatientHistory], tok: &Tokenizer) -> Vec<Vec<u32>> {
    corpus
        .iter()
        .flat_map(|h| h.records.iter())
        .map(|r| {
            let mut ids = vec![CLS];
            ids.extend(tok.encode(&r.text()));
            ids.push(EOS);
            ids
        })
        .collect()
}

/// `[CLS] record [SEP] ... record [EOS]` for every history.
fn history_sequences(corpus: &[PatientHistory], tok: &Tokenizer) -> Vec<Vec<u32>> {
    corpus
        .iter()
        .filter(|h| !h.records.is_empty())
        .map(|h| {
            let mut ids = vec![CLS];
            for (i, r) in h.records.iter().enumerate() {
                if i > 0 {
                    ids.push(SEP);
                }
                ids.extend(tok.encode(&r.text()));
            }
            ids.push(EOS);
            ids
        })
        .collect()
}

fn pretrain(s: &mut Settings, seed: u64, a: PretrainArgs) -> Result<Outcome> {
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let ckpt_out = s.required_path("checkpoint_out", a.checkpoint_out)?;
    let mut inputs = vec![corpus_path.clone()];
    let (mut model, tok) = match s.path("checkpoint_in", a.checkpoint_in)? {
        Some(p) => {
            let ckpt = read_checkpoint(&p)?;
            let tok = embedded_tokenizer(&ckpt.metadata)?;
            inputs.push(p);
            (MaskedLm::from_checkpoint(ckpt)?, tok)
        }
        None => {
            let dir = s.required_path("tokenizer", a.tokenizer)?;
            let tok = load_tokenizer(&dir)?;
            inputs.push(dir);
            let cfg = model_config(s, &a.model, tok.vocab_size())?;
            (MaskedLm::bert(cfg, seed)?, tok)
        }
    };
    let corpus = load_corpus(&corpus_path)?;
    let sequences = match model.kind {
        EncoderKind::Dense => record_sequences(&corpus, &tok),
        EncoderKind::Windowed => history_sequences(&corpus, &tok),
    };
    let max_pos = model.config.max_positions_encoder;
    let mut cfg = train_config(s, &a.train, seed, max_pos, 1)?;
    cfg.mask_prob = s.or("mask_prob", a.mask_prob, cfg.mask_prob)?;
    cfg.mask_style = match s.or("mask_style", a.mask_style, MaskStyleArg::Basic)? {
        MaskStyleArg::Basic => MaskStyle::Basic,
        MaskStyleArg::Bert => MaskStyle::Bert,
    };
    log::info!(
        "pretraining {} encoder on {} sequences",
        model.kind.name(),
        sequences.len()
    );
    let report = pretrain_mlm(&mut model, &sequences, &cfg)?;
    write_checkpoint(&ckpt_out, &model.params, &with_tokenizer(model.metadata(), &tok))?;
    let metrics = write_metrics(s, &a.train, &ckpt_out, &report)?;
    Ok(Outcome {
        inputs,
        outputs: vec![ckpt_out, metrics],
    })
}

fn tile_init(s: &mut Settings, a: TileInitArgs) -> Result<Outcome> {
    let ckpt_in = s.required_path("checkpoint_in", a.checkpoint_in)?;
    let ckpt_out = s.required_path("checkpoint_out", a.checkpoint_out)?;
    let max_positions = s.required("max_positions", a.max_positions)?;
    let ckpt = read_checkpoint(&ckpt_in)?;
    let tok = embedded_tokenizer(&ckpt.metadata)?;
    let bert = MaskedLm::from_checkpoint(ckpt)?;
    let long = longformer_from_bert(&bert, max_positions)?;
    write_checkpoint(&ckpt_out, &long.params, &with_tokenizer(long.metadata(), &tok))?;
    log::info!(
        "tiled {} positions to {}",
        bert.config.max_positions_encoder,
        max_positions
    );
    Ok(Outcome {
        inputs: vec![ckpt_in],
        outputs: vec![ckpt_out],
    })
}

fn finetune(s: &mut Settings, seed: u64, a: FinetuneArgs) -> Result<Outcome> {
    let kind = s.or("model", a.model, ModelKind::Lf2Bert)?;
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let ckpt_out = s.required_path("checkpoint_out", a.checkpoint_out)?;
    let sections = sections_for(s.get("section", a.section)?);
    let mut inputs = vec![corpus_path.clone()];
    let mut outputs = vec![ckpt_out.clone()];

    let corpus = load_corpus(&corpus_path)?;
    let train = match s.get("train_fraction", a.train_fraction)? {
        Some(f) => {
            let (train, valid) = split_by_patient(corpus, |h| h.patient_id.as_str(), f, seed)?;
            let valid_path = match s.path("validation_out", a.validation_out)? {
                Some(p) => p,
                None => {
                    let mut name = ckpt_out.file_name().unwrap_or_default().to_os_string();
                    name.push(".valid.jsonl");
                    ckpt_out.with_file_name(name)
                }
            };
            write_corpus(&valid_path, &valid)?;
            log::info!("{} training and {} held-out histories", train.len(), valid.len());
            outputs.push(valid_path);
            train
        }
        None => corpus,
    };
    let ckpt_in = s.path("checkpoint_in", a.checkpoint_in)?;
    if let Some(p) = &ckpt_in {
        inputs.push(p.clone());
    }

    let report = match kind {
        ModelKind::Lf2Bert => {
            let (mut model, tok) = match &ckpt_in {
                Some(p) => {
                    let ckpt = read_checkpoint(p)?;
                    let tok = embedded_tokenizer(&ckpt.metadata)?;
                    if ckpt.metadata.get("model.kind").map(String::as_str) == Some("lf2bert") {
                        (Lf2Bert::from_checkpoint(ckpt)?, tok)
                    } else {
                        let long = MaskedLm::from_checkpoint(ckpt)?;
                        let bert = match s.path("bert_checkpoint", a.bert_checkpoint)? {
                            Some(b) => {
                                let m = MaskedLm::from_checkpoint(read_checkpoint(&b)?)?;
                                inputs.push(b);
                                m
                            }
                            None => long.clone(),
                        };
                        (Lf2Bert::from_pretrained(&long, &bert, seed)?, tok)
                    }
                }
                None => {
                    let dir = s.required_path("tokenizer", a.tokenizer)?;
                    let tok = load_tokenizer(&dir)?;
                    inputs.push(dir);
                    let cfg = model_config(s, &a.model_args, tok.vocab_size())?;
                    (Lf2Bert::new(cfg, seed)?, tok)
                }
            };
            let mut examples = Vec::new();
            for h in &train {
                for &sec in &sections {
                    examples.extend(seq2seq_example(h, sec, &tok)?);
                }
            }
            let c = &model.config;
            let cfg = train_config(s, &a.train, seed, c.max_positions_encoder, c.max_positions_decoder)?;
            log::info!("fine-tuning LF2BERT on {} pairs", examples.len());
            let report = finetune_seq2seq(&mut model, &examples, &cfg)?;
            write_checkpoint(&ckpt_out, &model.params, &with_tokenizer(model.metadata(), &tok))?;
            report
        }
        ModelKind::Pgn => {
            let examples: Vec<_> = train
                .iter()
                .flat_map(|h| sections.iter().filter_map(move |&sec| pgn_example(h, sec)))
                .collect();
            let mut model = match &ckpt_in {
                Some(p) => PgnModel::from_checkpoint(read_checkpoint(p)?)?,
                None => {
                    let mut cfg = PgnConfig::tiny();
                    cfg.max_source_len = s.or("pgn_max_source_len", a.pgn_max_source_len, cfg.max_source_len)?;
                    let size = s.or("pgn_vocab_size", a.pgn_vocab_size, 50_000usize)?;
                    let texts = examples
                        .iter()
                        .flat_map(|e| [e.source.as_slice(), e.target.as_slice()]);
                    PgnModel::new(cfg, WordVocab::build(texts, size), seed)?
                }
            };
            let c = &model.config;
            let cfg = train_config(s, &a.train, seed, c.max_source_len, c.max_target_len)?;
            log::info!("fine-tuning the pointer-generator on {} pairs", examples.len());
            let report = finetune_seq2seq(&mut model, &examples, &cfg)?;
            write_checkpoint(&ckpt_out, &model.params, &model.metadata())?;
            report
        }
    };
    if report.dropped > 0 {
        log::warn!("{} pairs did not fit the length limits", report.dropped);
    }
    outputs.insert(1, write_metrics(s, &a.train, &ckpt_out, &report)?);
    Ok(Outcome { inputs, outputs })
}

enum Loaded {
    Lf2Bert(Lf2Bert, Tokenizer),
    Pgn(PgnModel),
}

impl Loaded {
    fn read(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        match ckpt.metadata.get("model.kind").map(String::as_str) {
            Some("lf2bert") => {
                let tok = embedded_tokenizer(&ckpt.metadata)?;
                Ok(Loaded::Lf2Bert(Lf2Bert::from_checkpoint(ckpt)?, tok))
            }
            Some("pgn") => Ok(Loaded::Pgn(PgnModel::from_checkpoint(ckpt)?)),
            other => Err(CliError::Usage(format!(
                "{} holds {other:?}, not a summarization model",
                path.display()
            ))),
        }
    }

    fn summarizer(&self, mode: DecodeMode, max_len: Option<usize>) -> Box<dyn Summarizer + '_> {
        match self {
            Loaded::Lf2Bert(model, tokenizer) => Box::new(Lf2BertSummarizer {
                model,
                tokenizer,
                mode,
                max_len: max_len.unwrap_or(model.config.max_positions_decoder),
            }),
            Loaded::Pgn(model) => Box::new(PgnSummarizer {
                model,
                mode,
                max_len: max_len.unwrap_or(model.config.max_target_len),
            }),
        }
    }
}

fn decode_mode(s: &mut Settings, a: &DecodeArgs) -> Result<(DecodeMode, Option<usize>)> {
    let mode = match s.or("mode", a.mode, ModeArg::Greedy)? {
        ModeArg::Greedy => DecodeMode::Greedy,
        ModeArg::Beam => DecodeMode::Beam(s.or("beam_width", a.beam_width, 4usize)?),
    };
    Ok((mode, s.get("max_len", a.max_len)?))
}

fn generate(s: &mut Settings, a: GenerateArgs) -> Result<Outcome> {
    let ckpt = s.required_path("checkpoint_in", a.checkpoint_in)?;
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let out = s.required_path("out", a.out)?;
    let sections = sections_for(s.get("section", a.section)?);
    let (mode, max_len) = decode_mode(s, &a.decode)?;
    let loaded = Loaded::read(&ckpt)?;
    let corpus = load_corpus(&corpus_path)?;
    let mut summarizer = loaded.summarizer(mode, max_len);
    let mut lines = String::new();
    for h in &corpus {
        for &sec in &sections {
            let prediction = summarizer.summarize(h, sec)?;
            let row = serde_json::json!({
                "history_id": h.history_id,
                "section": sec.key(),
                "prediction": prediction,
            });
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
    }
    write_text(&out, &lines)?;
    Ok(Outcome {
        inputs: vec![ckpt, corpus_path],
        outputs: vec![out],
    })
}

fn evaluate(s: &mut Settings, seed: u64, a: EvaluateArgs) -> Result<Outcome> {
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let out = s.required_path("out", a.out)?;
    let section = s.get("section", a.section)?;
    let scores_out = s.path("scores_out", a.scores_out)?;
    if scores_out.is_some() && section.is_none() {
        return Err(CliError::Usage("--scores-out needs a single --section".into()));
    }
    let (mode, max_len) = decode_mode(s, &a.decode)?;
    let corpus = load_corpus(&corpus_path)?;
    let mut inputs = vec![corpus_path];
    let ckpt = s.path("checkpoint_in", a.checkpoint_in)?;
    let system = s.get("system", a.system)?;
    let loaded;
    let mut summarizer: Box<dyn Summarizer + '_> = match (ckpt, system.as_deref()) {
        (Some(p), None) => {
            loaded = Loaded::read(&p)?;
            inputs.push(p);
            loaded.summarizer(mode, max_len)
        }
        (None, Some("echo")) => Box::new(EchoOracle),
        (None, Some("random")) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(RANDOM_BASELINE_STREAM);
            Box::new(RandomBaseline { corpus: &corpus, rng })
        }
        (None, Some(other)) => {
            return Err(CliError::Usage(format!("unknown --system {other:?}; expected echo or random")))
        }
        (None, None) => return Err(CliError::Usage("need --checkpoint-in or --system".into())),
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--checkpoint-in and --system are exclusive".into()))
        }
    };
    let mut reports = Vec::new();
    for sec in sections_for(section) {
        let report = evaluate_model(summarizer.as_mut(), &corpus, sec)?;
        let [r1, r2, rl] = report.mean_f1();
        log::info!("{} {sec}: R1 {r1:.3} R2 {r2:.3} RL {rl:.3}", report.system);
        reports.push(report);
    }
    write_text(&out, &rouge_table_csv(&reports))?;
    let mut outputs = vec![out];
    if let Some(p) = scores_out {
        write_text(&p, &example_scores_csv(&reports[0]))?;
        outputs.push(p);
    }
    Ok(Outcome { inputs, outputs })
}

fn filter(s: &mut Settings, a: FilterArgs) -> Result<Outcome> {
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let lex_path = s.required_path("lexicon", a.lexicon)?;
    let lemmas = s.path("lemmas", a.lemmas)?;
    let threshold = s.or("threshold", a.threshold, 0.5)?;
    let sections = sections_for(s.get("section", a.section)?);
    let out = s.required_path("out", a.out)?;
    let audit = match s.path("audit", a.audit)? {
        Some(p) => p,
        None => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".audit.csv");
            out.with_file_name(name)
        }
    };
    let lexicon = ConceptLexicon::load(&lex_path, lemmas.as_deref())?;
    let corpus = load_corpus(&corpus_path)?;
    let outcome = filter_dataset(&corpus, &lexicon, threshold, &sections);
    write_corpus(&out, &outcome.kept)?;
    let mut buf = Vec::new();
    write_audit_csv(&outcome.audit, &mut buf)?;
    std::fs::write(&audit, buf).map_err(|e| CliError::io(&audit, e))?;
    log::info!(
        "kept {} of {} pairs ({:.1}%)",
        outcome.kept_pairs(),
        outcome.audit.len(),
        100.0 * outcome.keep_rate()
    );
    let mut inputs = vec![corpus_path, lex_path];
    inputs.extend(lemmas);
    Ok(Outcome {
        inputs,
        outputs: vec![out, audit],
    })
}

fn stats(s: &mut Settings, a: StatsArgs) -> Result<Outcome> {
    let corpus_path = s.required_path("corpus", a.corpus)?;
    let bin_width = s.or("bin_width", a.bin_width, 512usize)?;
    if bin_width == 0 {
        return Err(CliError::Usage("--bin-width must be positive".into()));
    }
    let corpus = load_corpus(&corpus_path)?;
    let st = corpus_stats(&corpus, bin_width);
    print!("{st}");
    let mut outcome = Outcome {
        inputs: vec![corpus_path],
        outputs: vec![],
    };
    if let Some(dir) = s.path("out", a.out)? {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_text(&dir.join("sections.csv"), &st.sections_csv())?;
        write_text(&dir.join("histogram.csv"), &st.histogram_csv())?;
        outcome.outputs = vec![dir.clone(), dir.join("sections.csv"), dir.join("histogram.csv")];
    }
    Ok(outcome)
}

fn report_length(s: &mut Settings, a: ReportLengthArgs) -> Result<Outcome> {
    let scores = s.required_path("scores", a.scores)?;
    let width = s.or("bucket_width", a.bucket_width, 512usize)?;
    if width == 0 {
        return Err(CliError::Usage("--bucket-width must be positive".into()));
    }
    let out = s.required_path("out", a.out)?;
    let file = std::fs::File::open(&scores).map_err(|e| CliError::io(&scores, e))?;
    let pairs = read_length_pairs(file)?;
    write_text(&out, &length_bucket_csv(&length_bucket_report(&pairs, width)))?;
    Ok(Outcome {
        inputs: vec![scores],
        outputs: vec![out],
    })
}

fn report_doctor(s: &mut Settings, a: ReportDoctorArgs) -> Result<Outcome> {
    let path = s.required_path("annotations", a.annotations)?;
    let dir = s.required_path("out", a.out)?;
    let file = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let report = doctor_eval_aggregate(&read_annotations(file)?)?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let (criteria, hvm) = (dir.join("criteria.csv"), dir.join("human_vs_machine.csv"));
    write_text(&criteria, &report.criteria_csv())?;
    write_text(&hvm, &report.human_vs_machine_csv())?;
    Ok(Outcome {
        inputs: vec![path],
        outputs: vec![dir, criteria, hvm],
    })
}
