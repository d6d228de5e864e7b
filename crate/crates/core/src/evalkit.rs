//! ROUGE metrics, model evaluation tables, random baselines, length-bucket
//! reports and the doctor-evaluation arithmetic.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Read;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::datapipe::{pgn_source, serialize_history, DataError, PatientHistory, SectionKind};
use crate::models::{DecodeMode, Lf2Bert, ModelError, PgnModel};
use crate::tokenizer::{split_words, Tokenizer, EOS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("annotation row {row}: {message}")]
    Annotation { row: usize, message: String },
    #[error("case {case}: {message}")]
    Incomplete { case: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(overlap, candidate), ratio(overlap, reference));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        RougeScore {
            precision: p,
            recall: r,
            f1,
        }
    }
}

/// Lowercased words with punctuation split into separate tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    split_words(&text.to_lowercase()).into_iter().map(String::from).collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
///
/// # Panics
/// When `n == 0`.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> RougeScore {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summary-level ROUGE-L: one LCS over the whole token sequences.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

impl RougeTriple {
    pub fn f1s(&self) -> [f64; 3] {
        [self.rouge1.f1, self.rouge2.f1, self.rouge_l.f1]
    }
}

/// ROUGE-1/2/L of two raw texts under [`rouge_tokens`].
pub fn score_texts(candidate: &str, reference: &str) -> RougeTriple {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    RougeTriple {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: rouge_l(&c, &r),
    }
}

/// Anything that turns a history into a section summary.
pub trait Summarizer {
    fn name(&self) -> &str;

    fn summarize(&mut self, history: &PatientHistory, section: SectionKind) -> Result<String>;

    /// Input length used by the length-bucket report; whitespace words by
    /// default.
    fn input_len(&self, history: &PatientHistory, _section: SectionKind) -> usize {
        history.word_count()
    }
}

/// Returns the gold target; an upper-bound oracle.
pub struct EchoOracle;

impl Summarizer for EchoOracle {
    fn name(&self) -> &str {
        "Target"
    }

    fn summarize(&mut self, history: &PatientHistory, section: SectionKind) -> Result<String> {
        Ok(history.target(section).unwrap_or_default().to_string())
    }
}

pub struct Lf2BertSummarizer<'a> {
    pub model: &'a Lf2Bert,
    pub tokenizer: &'a Tokenizer,
    pub mode: DecodeMode,
    pub max_len: usize,
}

impl Summarizer for Lf2BertSummarizer<'_> {
    fn name(&self) -> &str {
        "LF2BERT"
    }

    fn summarize(&mut self, history: &PatientHistory, section: SectionKind) -> Result<String> {
        let s = serialize_history(history, section, self.tokenizer)?;
        let max_in = self.model.config.max_positions_encoder;
        let ex = crate::training::truncate_history(
            &crate::models::Seq2SeqExample {
                history: s.ids,
                globals: s.prefix_positions,
                target: Vec::new(),
            },
            max_in,
        );
        let mut ids = self.model.generate(&ex.history, &ex.globals, self.mode, self.max_len)?;
        if ids.last() == Some(&EOS) {
            ids.pop();
        }
        Ok(self.tokenizer.decode(&ids).trim().to_string())
    }

    fn input_len(&self, history: &PatientHistory, section: SectionKind) -> usize {
        serialize_history(history, section, self.tokenizer).map_or(0, |s| s.ids.len())
    }
}

pub struct PgnSummarizer<'a> {
    pub model: &'a PgnModel,
    pub mode: DecodeMode,
    pub max_len: usize,
}

impl Summarizer for PgnSummarizer<'_> {
    fn name(&self) -> &str {
        "PGN"
    }

    fn summarize(&mut self, history: &PatientHistory, section: SectionKind) -> Result<String> {
        let words = self.model.generate(&pgn_source(history, section), self.mode, self.max_len)?;
        Ok(words.join(" "))
    }

    fn input_len(&self, history: &PatientHistory, section: SectionKind) -> usize {
        pgn_source(history, section).len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScore {
    pub history_id: String,
    pub input_len: usize,
    pub prediction: String,
    pub scores: RougeTriple,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub section: SectionKind,
    pub examples: Vec<ExampleScore>,
}

impl EvalReport {
    /// Mean F1 of ROUGE-1, ROUGE-2 and ROUGE-L.
    pub fn mean_f1(&self) -> [f64; 3] {
        let n = self.examples.len().max(1) as f64;
        let mut acc = [0.0; 3];
        for e in &self.examples {
            for (a, f) in acc.iter_mut().zip(e.scores.f1s()) {
                *a += f;
            }
        }
        acc.map(|a| a / n)
    }

    /// `(input length, ROUGE-L F1)` pairs for [`length_bucket_report`].
    pub fn length_pairs(&self) -> Vec<(usize, f64)> {
        self.examples.iter().map(|e| (e.input_len, e.scores.rouge_l.f1)).collect()
    }
}

/// Generates a summary for every history holding a `section` target and
/// scores it against the gold text.
pub fn evaluate_model(
    summarizer: &mut dyn Summarizer,
    histories: &[PatientHistory],
    section: SectionKind,
) -> Result<EvalReport> {
    let mut examples = Vec::new();
    for h in histories {
        let Some(gold) = h.target(section) else { continue };
        let prediction = summarizer.summarize(h, section)?;
        examples.push(ExampleScore {
            history_id: h.history_id.clone(),
            input_len: summarizer.input_len(h, section),
            scores: score_texts(&prediction, gold),
            prediction,
        });
    }
    Ok(EvalReport {
        system: summarizer.name().to_string(),
        section,
        examples,
    })
}

/// Table of mean F1 per system and section, three decimals.
pub fn rouge_table_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("system,section,rouge1,rouge2,rougeL,examples\n");
    for r in reports {
        let [a, b, c] = r.mean_f1();
        let _ = writeln!(out, "{},{},{a:.3},{b:.3},{c:.3},{}", r.system, r.section.key(), r.examples.len());
    }
    out
}

/// Per-example scores as CSV.
pub fn example_scores_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record(["history_id", "input_len", "rouge1", "rouge2", "rougeL", "prediction"]);
    for e in &report.examples {
        let [a, b, c] = e.scores.f1s();
        let _ = w.write_record([
            e.history_id.clone(),
            e.input_len.to_string(),
            format!("{a:.4}"),
            format!("{b:.4}"),
            format!("{c:.4}"),
            e.prediction.clone(),
        ]);
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Splits on `.`, `!` or `?` followed by whitespace (or the end of text).
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let next_ws = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if next_ws {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn history_sentences(h: &PatientHistory) -> Vec<&str> {
    h.records.iter().flat_map(|r| split_sentences(&r.body)).collect()
}

/// Random prediction for `corpus[case]`. Treatment and performed labs take
/// `k` sentences of the history, k being the rounded corpus mean of target
/// sentences (at least 1), kept in history order; recommendations take the
/// gold text of a uniformly drawn history of another patient.
pub fn random_baseline(
    corpus: &[PatientHistory],
    case: usize,
    section: SectionKind,
    rng: &mut impl Rng,
) -> Result<String> {
    let h = corpus
        .get(case)
        .ok_or_else(|| EvalError::Invalid(format!("case {case} outside corpus of {}", corpus.len())))?;
    match section {
        SectionKind::Recommendations => {
            let donors: Vec<&str> = corpus
                .iter()
                .filter(|o| o.patient_id != h.patient_id)
                .filter_map(|o| o.target(section))
                .collect();
            if donors.is_empty() {
                return Err(EvalError::Invalid(format!(
                    "no other patient with {} to borrow for {}",
                    section.key(),
                    h.history_id
                )));
            }
            Ok(donors[rng.gen_range(0..donors.len())].to_string())
        }
        _ => {
            let counts: Vec<usize> = corpus
                .iter()
                .filter_map(|o| o.target(section))
                .map(|t| split_sentences(t).len())
                .collect();
            let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
            let sentences = history_sentences(h);
            if sentences.is_empty() {
                return Ok(String::new());
            }
            let k = (mean.round() as usize).clamp(1, sentences.len());
            let mut picked = sample(rng, sentences.len(), k).into_vec();
            picked.sort_unstable();
            Ok(picked.iter().map(|&i| sentences[i]).collect::<Vec<_>>().join(" "))
        }
    }
}

/// [`random_baseline`] as a [`Summarizer`] over a fixed corpus.
pub struct RandomBaseline<'a, R: Rng> {
    pub corpus: &'a [PatientHistory],
    pub rng: R,
}

impl<R: Rng> Summarizer for RandomBaseline<'_, R> {
    fn name(&self) -> &str {
        "Random"
    }

    fn summarize(&mut self, history: &PatientHistory, section: SectionKind) -> Result<String> {
        let case = self
            .corpus
            .iter()
            .position(|h| h.history_id == history.history_id)
            .ok_or_else(|| EvalError::Invalid(format!("{} is not in the baseline corpus", history.history_id)))?;
        random_baseline(self.corpus, case, section, &mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucket {
    pub start: usize,
    pub mean_rouge_l: f64,
    pub count: usize,
}

/// Mean ROUGE-L per half-open length bucket `[k·w, (k+1)·w)`; empty
/// buckets are omitted.
pub fn length_bucket_report(pairs: &[(usize, f64)], bucket_width: usize) -> Vec<LengthBucket> {
    let w = bucket_width.max(1);
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(len, f1) in pairs {
        let e = acc.entry(len / w * w).or_default();
        e.0 += f1;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(start, (sum, count))| LengthBucket {
            start,
            mean_rouge_l: sum / count as f64,
            count,
        })
        .collect()
}

pub fn length_bucket_csv(buckets: &[LengthBucket]) -> String {
    let mut out = String::from("bucket_start,mean_rougeL,count\n");
    for b in buckets {
        let _ = writeln!(out, "{},{:.4},{}", b.start, b.mean_rouge_l, b.count);
    }
    out
}

/// Reads `input_len,rougeL` columns (by header name) from a per-example
/// score CSV.
pub fn read_length_pairs<R: Read>(reader: R) -> Result<Vec<(usize, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvalError::Invalid(format!("score file lacks a {name} column")))
    };
    let (li, ri) = (col("input_len")?, col("rougeL")?);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| EvalError::Annotation { row: row + 1, message };
        let len = rec[li].trim().parse().map_err(|e| bad(format!("input_len: {e}")))?;
        let f1 = rec[ri].trim().parse().map_err(|e| bad(format!("rougeL: {e}")))?;
        out.push((len, f1));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum System {
    Random,
    Target,
    Pgn,
    Lf2Bert,
}

impl System {
    pub const ALL: [System; 4] = [System::Random, System::Target, System::Pgn, System::Lf2Bert];

    pub fn label(self) -> &'static str {
        match self {
            System::Random => "Random",
            System::Target => "Target",
            System::Pgn => "PGN",
            System::Lf2Bert => "LF2BERT",
        }
    }
}

impl FromStr for System {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EvalError::Invalid(format!("unknown system {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub case_id: String,
    pub system: System,
    pub missing_info: bool,
    pub incorrect_info: bool,
    pub extra_info: bool,
    pub grammar_ok: bool,
    /// 1 to 10.
    pub overall: u8,
}

fn yes_no(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" | "1" => Some(true),
        "no" | "n" | "false" | "0" => Some(false),
        _ => None,
    }
}

const ANNOTATION_COLUMNS: [&str; 7] = [
    "case_id",
    "system",
    "missing_info",
    "incorrect_info",
    "extra_info",
    "grammar_ok",
    "overall",
];

/// Reads annotation CSV with the [`AnnotationRecord`] columns (any order).
pub fn read_annotations<R: Read>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(ANNOTATION_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EvalError::Annotation {
                row: 0,
                message: format!("missing column {name}"),
            })?;
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |message: String| EvalError::Annotation { row, message };
        let flag = |k: usize| {
            yes_no(&rec[idx[k]]).ok_or_else(|| bad(format!("{}: expected yes/no, got {:?}", ANNOTATION_COLUMNS[k], &rec[idx[k]])))
        };
        let overall: u8 = rec[idx[6]]
            .trim()
            .parse()
            .map_err(|_| bad(format!("overall: not an integer: {:?}", &rec[idx[6]])))?;
        if !(1..=10).contains(&overall) {
            return Err(bad(format!("overall {overall} outside 1..10")));
        }
        out.push(AnnotationRecord {
            case_id: rec[idx[0]].trim().to_string(),
            system: rec[idx[1]].parse().map_err(|e: EvalError| bad(e.to_string()))?,
            missing_info: flag(2)?,
            incorrect_info: flag(3)?,
            extra_info: flag(4)?,
            grammar_ok: flag(5)?,
            overall,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SystemSummary {
    pub cases: usize,
    pub no_missing_pct: f64,
    pub no_incorrect_pct: f64,
    pub no_extra_pct: f64,
    pub grammar_ok_pct: f64,
    pub mean_overall: f64,
}

/// Share of cases where the reference (Target) or LF2BERT rates higher,
/// or both are within one point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HumanVsMachine {
    pub human_better_pct: f64,
    pub machine_better_pct: f64,
    pub roughly_equal_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DoctorEvalReport {
    pub systems: BTreeMap<System, SystemSummary>,
    pub human_vs_machine: HumanVsMachine,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Aggregates annotations; every case must rate each of the four systems
/// exactly once.
pub fn doctor_eval_aggregate(records: &[AnnotationRecord]) -> Result<DoctorEvalReport> {
    let mut cases: BTreeMap<&str, BTreeMap<System, &AnnotationRecord>> = BTreeMap::new();
    for r in records {
        if cases.entry(&r.case_id).or_default().insert(r.system, r).is_some() {
            return Err(EvalError::Incomplete {
                case: r.case_id.clone(),
                message: format!("{} rated twice", r.system.label()),
            });
        }
    }
    for (case, systems) in &cases {
        if let Some(missing) = System::ALL.iter().find(|s| !systems.contains_key(s)) {
            return Err(EvalError::Incomplete {
                case: case.to_string(),
                message: format!("no rating for {}", missing.label()),
            });
        }
    }
    let n = cases.len();
    let mut report = DoctorEvalReport::default();
    for system in System::ALL {
        let rows: Vec<&AnnotationRecord> = cases.values().map(|m| m[&system]).collect();
        let count = |f: fn(&AnnotationRecord) -> bool| rows.iter().filter(|r| f(r)).count();
        report.systems.insert(
            system,
            SystemSummary {
                cases: n,
                no_missing_pct: pct(count(|r| !r.missing_info), n),
                no_incorrect_pct: pct(count(|r| !r.incorrect_info), n),
                no_extra_pct: pct(count(|r| !r.extra_info), n),
                grammar_ok_pct: pct(count(|r| r.grammar_ok), n),
                mean_overall: rows.iter().map(|r| r.overall as f64).sum::<f64>() / n.max(1) as f64,
            },
        );
    }
    let (mut human, mut machine, mut equal) = (0, 0, 0);
    for m in cases.values() {
        let (t, l) = (m[&System::Target].overall as i32, m[&System::Lf2Bert].overall as i32);
        if (t - l).abs() <= 1 {
            equal += 1;
        } else if t > l {
            human += 1;
        } else {
            machine += 1;
        }
    }
    report.human_vs_machine = HumanVsMachine {
        human_better_pct: pct(human, n),
        machine_better_pct: pct(machine, n),
        roughly_equal_pct: pct(equal, n),
    };
    Ok(report)
}

impl DoctorEvalReport {
    /// Criterion rows by system column, percentages with one decimal.
    pub fn criteria_csv(&self) -> String {
        let mut out = String::from("criterion");
        for s in System::ALL {
            out.push(',');
            out.push_str(s.label());
        }
        out.push('\n');
        type Column = fn(&SystemSummary) -> f64;
        let rows: [(&str, Column); 5] = [
            ("No missed info", |s| s.no_missing_pct),
            ("No incorrect info", |s| s.no_incorrect_pct),
            ("No extra info", |s| s.no_extra_pct),
            ("Correct grammar", |s| s.grammar_ok_pct),
            ("Mean overall", |s| s.mean_overall),
        ];
        for (label, get) in rows {
            out.push_str(label);
            for s in System::ALL {
                let _ = write!(out, ",{:.1}", self.systems.get(&s).map_or(0.0, get));
            }
            out.push('\n');
        }
        out
    }

    pub fn human_vs_machine_csv(&self) -> String {
        let h = &self.human_vs_machine;
        format!(
            "human_better,machine_better,roughly_equal\n{:.1},{:.1},{:.1}\n",
            h.human_better_pct, h.machine_better_pct, h.roughly_equal_pct
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn the_cat_sat_table() {
        let (c, r) = (toks("the cat sat"), toks("the cat sat on the mat"));
        let r1 = rouge_n(&c, &r, 1);
        assert_eq!((r1.precision, r1.recall), (1.0, 0.5));
        assert!((r1.f1 - 0.6667).abs() < 5e-5);
        let r2 = rouge_n(&c, &r, 2);
        assert_eq!((r2.precision, r2.recall), (1.0, 0.4));
        assert!((r2.f1 - 0.5714).abs() < 5e-5);
        let rl = rouge_l(&c, &r);
        assert!((rl.f1 - 0.6667).abs() < 5e-5);
    }

    #[test]
    fn reversed_tokens_share_one() {
        assert_eq!(lcs_len(&toks("a b c"), &toks("c b a")), 1);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).f1, 0.0);
        assert_eq!(rouge_l::<&str>(&[], &toks("c d")).f1, 0.0);
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let s = rouge_n(&toks("the the the"), &toks("the cat"), 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn short_sides_score_zero() {
        assert_eq!(rouge_n(&toks("a"), &toks("a b"), 2), RougeScore::default());
    }

    #[test]
    fn tokenization_lowercases_and_splits_punctuation() {
        assert_eq!(rouge_tokens("Aspirin, 100mg."), vec!["aspirin", ",", "100mg", "."]);
    }

    #[test]
    fn sentence_splitting_needs_following_whitespace() {
        assert_eq!(
            split_sentences("Take 2.5 mg. Rest! Why? ok"),
            vec!["Take 2.5 mg.", "Rest!", "Why?", "ok"]
        );
        assert!(split_sentences("  ").is_empty());
    }

    #[test]
    fn bucket_boundaries_are_half_open() {
        let b = length_bucket_report(&[(0, 0.2), (511, 0.4), (512, 0.8)], 512);
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].start, b[0].count), (0, 2));
        assert!((b[0].mean_rouge_l - 0.3).abs() < 1e-12);
        assert_eq!((b[1].start, b[1].mean_rouge_l), (512, 0.8));
    }

    #[test]
    fn annotation_flags_parse() {
        assert_eq!(yes_no("Yes"), Some(true));
        assert_eq!(yes_no(" no "), Some(false));
        assert_eq!(yes_no("maybe"), None);
        assert_eq!("lf2bert".parse::<System>().unwrap(), System::Lf2Bert);
    }
}
