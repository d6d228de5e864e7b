//! Patient-history corpora: JSONL ingestion, record serialization with
//! section prefixes, the concept-coverage filter, corpus statistics and a
//! deterministic synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{PgnExample, Seq2SeqExample};
use crate::tokenizer::{split_words, Tokenizer, CLS, EOS, SEP};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// As stored: ISO `YYYY-MM-DD` or `MM/DD/YYYY`.
    pub date: String,
    pub title: String,
    pub body: String,
}

impl Record {
    pub fn parsed_date(&self) -> Option<NaiveDate> {
        let d = self.date.trim();
        NaiveDate::parse_from_str(d, "%Y-%m-%d")
            .or_else(|_| NaiveDate::parse_from_str(d, "%m/%d/%Y"))
            .ok()
    }

    /// `date title: body`
    pub fn text(&self) -> String {
        format!("{} {}: {}", self.date, self.title, self.body)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SectionKind {
    Treatment,
    PerformedLabs,
    Recommendations,
}

impl SectionKind {
    pub const ALL: [SectionKind; 3] = [
        SectionKind::Treatment,
        SectionKind::PerformedLabs,
        SectionKind::Recommendations,
    ];

    /// Text prepended to the serialized history.
    pub fn prefix(self) -> &'static str {
        match self {
            SectionKind::Treatment => "Treatment:",
            SectionKind::PerformedLabs => "Performed labs:",
            SectionKind::Recommendations => "Recommendations:",
        }
    }

    /// Key used in the corpus JSON and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            SectionKind::Treatment => "treatment",
            SectionKind::PerformedLabs => "performed_labs",
            SectionKind::Recommendations => "recommendations",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SectionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        SectionKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown section {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performed_labs: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendations: Option<String>,
}

impl Targets {
    pub fn get(&self, section: SectionKind) -> Option<&str> {
        match section {
            SectionKind::Treatment => self.treatment.as_deref(),
            SectionKind::PerformedLabs => self.performed_labs.as_deref(),
            SectionKind::Recommendations => self.recommendations.as_deref(),
        }
    }

    pub fn slot(&mut self, section: SectionKind) -> &mut Option<String> {
        match section {
            SectionKind::Treatment => &mut self.treatment,
            SectionKind::PerformedLabs => &mut self.performed_labs,
            SectionKind::Recommendations => &mut self.recommendations,
        }
    }

    pub fn is_empty(&self) -> bool {
        SectionKind::ALL.iter().all(|&s| self.get(s).is_none())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientHistory {
    pub patient_id: String,
    pub history_id: String,
    pub records: Vec<Record>,
    #[serde(default)]
    pub targets: Targets,
}

impl PatientHistory {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.patient_id.trim().is_empty() || self.history_id.trim().is_empty() {
            return Err("patient_id and history_id must be non-empty".into());
        }
        if let Some(r) = self.records.iter().find(|r| r.title.trim().is_empty()) {
            return Err(format!("record dated {} has an empty title", r.date));
        }
        let dates: Vec<NaiveDate> = self.records.iter().filter_map(Record::parsed_date).collect();
        if dates.windows(2).any(|w| w[1] < w[0]) {
            return Err(format!("records of {} are not in date order", self.history_id));
        }
        Ok(())
    }

    pub fn target(&self, section: SectionKind) -> Option<&str> {
        self.targets.get(section)
    }

    /// All record texts joined by newlines.
    pub fn text(&self) -> String {
        self.records.iter().map(Record::text).collect::<Vec<_>>().join("\n")
    }

    pub fn word_count(&self) -> usize {
        self.records.iter().map(|r| r.text().split_whitespace().count()).sum()
    }
}

/// Parses JSONL, one history per non-blank line.
pub fn parse_corpus(text: &str) -> Result<Vec<PatientHistory>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DataError::Schema { line: i + 1, message };
        let h: PatientHistory = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        h.validate().map_err(schema)?;
        out.push(h);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<PatientHistory>> {
    parse_corpus(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn corpus_to_jsonl(corpus: &[PatientHistory]) -> String {
    corpus
        .iter()
        .map(|h| serde_json::to_string(h).expect("history serialises") + "\n")
        .collect()
}

pub fn write_corpus(path: &Path, corpus: &[PatientHistory]) -> Result<()> {
    fs::write(path, corpus_to_jsonl(corpus)).map_err(io_err(path))
}

/// Text between the special tokens of a serialized history: the section
/// prefix fused with the first record, then one entry per later record.
pub fn serialized_segments(history: &PatientHistory, section: SectionKind) -> Vec<String> {
    history
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i == 0 {
                format!("{} {}", section.prefix(), r.text())
            } else {
                r.text()
            }
        })
        .collect()
}

/// Encoder input plus the positions of the section prefix, which the long
/// encoder treats as global.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedHistory {
    pub ids: Vec<u32>,
    pub prefix_positions: Vec<usize>,
}

/// `[CLS] prefix date title: body [SEP] ... [SEP] date title: body [EOS]`
pub fn serialize_history(
    history: &PatientHistory,
    section: SectionKind,
    tokenizer: &Tokenizer,
) -> Result<SerializedHistory> {
    if history.records.is_empty() {
        return Err(DataError::Invalid(format!("history {} has no records", history.history_id)));
    }
    let mut ids = vec![CLS];
    for (i, seg) in serialized_segments(history, section).iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(tokenizer.encode(seg));
    }
    ids.push(EOS);
    // encoding is per whitespace word, so the prefix keeps its own tokens
    let prefix_len = tokenizer.encode(&format!("{} ", section.prefix())).len();
    Ok(SerializedHistory {
        ids,
        prefix_positions: (1..=prefix_len).collect(),
    })
}

/// Training pair for the transformer: serialized history and the encoded
/// target (without [CLS]/[EOS]). `None` when the section has no target.
pub fn seq2seq_example(
    history: &PatientHistory,
    section: SectionKind,
    tokenizer: &Tokenizer,
) -> Result<Option<Seq2SeqExample>> {
    let Some(target) = history.target(section) else {
        return Ok(None);
    };
    let s = serialize_history(history, section, tokenizer)?;
    Ok(Some(Seq2SeqExample {
        history: s.ids,
        globals: s.prefix_positions,
        target: tokenizer.encode(target),
    }))
}

/// Word-level source text for the pointer-generator: prefix then records.
pub fn pgn_source(history: &PatientHistory, section: SectionKind) -> Vec<String> {
    let text = serialized_segments(history, section).join(" ");
    split_words(&text).into_iter().map(String::from).collect()
}

pub fn pgn_example(history: &PatientHistory, section: SectionKind) -> Option<PgnExample> {
    let target = history.target(section)?;
    Some(PgnExample {
        source: pgn_source(history, section),
        target: split_words(target).into_iter().map(String::from).collect(),
    })
}

/// Concept inventory matched on lowercased, lemmatized word sequences.
#[derive(Clone, Debug, Default)]
pub struct ConceptLexicon {
    concepts: Vec<Vec<String>>,
    by_first: HashMap<String, Vec<usize>>,
    lemmas: HashMap<String, String>,
}

impl ConceptLexicon {
    /// Builds a lexicon from surface terms and a surface→lemma table.
    pub fn new<S: AsRef<str>>(terms: &[S], lemmas: HashMap<String, String>) -> Self {
        let mut lex = ConceptLexicon {
            lemmas: lemmas.into_iter().map(|(k, v)| (k.to_lowercase(), v.to_lowercase())).collect(),
            ..Default::default()
        };
        let mut seen = BTreeSet::new();
        for t in terms {
            let seq = lex.lemmatize(t.as_ref());
            if seq.is_empty() || !seen.insert(seq.clone()) {
                continue;
            }
            lex.by_first.entry(seq[0].clone()).or_default().push(lex.concepts.len());
            lex.concepts.push(seq);
        }
        lex
    }

    /// One concept per line; the optional lemma table has
    /// `surface<TAB>lemma` lines. Blank lines and `#` comments are skipped.
    pub fn parse(lexicon: &str, lemma_table: Option<&str>) -> Result<Self> {
        let terms: Vec<&str> = lexicon
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let mut lemmas = HashMap::new();
        for (i, line) in lemma_table.unwrap_or("").lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, lemma) = line
                .split_once('\t')
                .ok_or_else(|| DataError::Lexicon(format!("lemma line {} lacks a tab", i + 1)))?;
            lemmas.insert(surface.trim().to_string(), lemma.trim().to_string());
        }
        Ok(Self::new(&terms, lemmas))
    }

    pub fn load(lexicon: &Path, lemma_table: Option<&Path>) -> Result<Self> {
        let lex = fs::read_to_string(lexicon).map_err(io_err(lexicon))?;
        let lemmas = lemma_table
            .map(|p| fs::read_to_string(p).map_err(io_err(p)))
            .transpose()?;
        Self::parse(&lex, lemmas.as_deref())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Lowercased words (punctuation split off) mapped through the lemma
    /// table, identity when absent.
    pub fn lemmatize(&self, text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        split_words(&lower)
            .into_iter()
            .map(|w| self.lemmas.get(w).cloned().unwrap_or_else(|| w.to_string()))
            .collect()
    }

    /// Distinct concepts occurring in `text` as contiguous lemma runs.
    pub fn concepts_in(&self, text: &str) -> BTreeSet<String> {
        let words = self.lemmatize(text);
        let mut found = BTreeSet::new();
        for (i, w) in words.iter().enumerate() {
            for &c in self.by_first.get(w).into_iter().flatten() {
                let seq = &self.concepts[c];
                if words.len() - i >= seq.len() && words[i..i + seq.len()] == seq[..] {
                    found.insert(seq.join(" "));
                }
            }
        }
        found
    }
}

/// `|S ∩ H| / |S|` over distinct concepts, and 1.0 when the summary
/// mentions none.
pub fn coverage_score(history_text: &str, summary: &str, lexicon: &ConceptLexicon) -> f64 {
    let s = lexicon.concepts_in(summary);
    if s.is_empty() {
        return 1.0;
    }
    let h = lexicon.concepts_in(history_text);
    s.intersection(&h).count() as f64 / s.len() as f64
}

pub fn concept_coverage_score(history: &PatientHistory, summary: &str, lexicon: &ConceptLexicon) -> f64 {
    coverage_score(&history.text(), summary, lexicon)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub history_id: String,
    pub section: SectionKind,
    pub score: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    /// Histories with failing targets removed; histories left with no
    /// target among the filtered sections are dropped.
    pub kept: Vec<PatientHistory>,
    pub audit: Vec<AuditRow>,
}

impl FilterOutcome {
    pub fn kept_pairs(&self) -> usize {
        self.audit.iter().filter(|r| r.kept).count()
    }

    pub fn keep_rate(&self) -> f64 {
        if self.audit.is_empty() {
            return 0.0;
        }
        self.kept_pairs() as f64 / self.audit.len() as f64
    }
}

/// Keeps `(history, section)` pairs whose coverage score is `>= threshold`.
pub fn filter_dataset(
    corpus: &[PatientHistory],
    lexicon: &ConceptLexicon,
    threshold: f64,
    sections: &[SectionKind],
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for h in corpus {
        let text = h.text();
        let mut kept = h.clone();
        let mut any = false;
        for &section in sections {
            let Some(target) = h.target(section) else { continue };
            let score = coverage_score(&text, target, lexicon);
            let keep = score >= threshold;
            if keep {
                any = true;
            } else {
                *kept.targets.slot(section) = None;
            }
            out.audit.push(AuditRow {
                history_id: h.history_id.clone(),
                section,
                score,
                kept: keep,
            });
        }
        if any {
            out.kept.push(kept);
        }
    }
    out
}

pub fn write_audit_csv<W: Write>(rows: &[AuditRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["history_id", "section", "score", "kept"])?;
    for r in rows {
        csv.write_record([
            r.history_id.as_str(),
            r.section.key(),
            &format!("{:.4}", r.score),
            if r.kept { "true" } else { "false" },
        ])?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SectionStats {
    pub count: usize,
    pub mean_words: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub histories: usize,
    pub patients: usize,
    pub mean_records: f64,
    pub mean_history_words: f64,
    pub sections: BTreeMap<SectionKind, SectionStats>,
    pub bin_width: usize,
    /// `(bin start, histories)` for every non-empty bin, ascending.
    pub history_word_histogram: Vec<(usize, usize)>,
}

fn mean(values: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = values.fold((0usize, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Counts, mean lengths and a word-count histogram; words are
/// whitespace-separated.
pub fn corpus_stats(corpus: &[PatientHistory], bin_width: usize) -> CorpusStats {
    let bin_width = bin_width.max(1);
    let mut sections = BTreeMap::new();
    for s in SectionKind::ALL {
        let lens: Vec<usize> = corpus
            .iter()
            .filter_map(|h| h.target(s))
            .map(|t| t.split_whitespace().count())
            .collect();
        sections.insert(
            s,
            SectionStats {
                count: lens.len(),
                mean_words: mean(lens.into_iter()),
            },
        );
    }
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    for h in corpus {
        *bins.entry(h.word_count() / bin_width * bin_width).or_default() += 1;
    }
    CorpusStats {
        histories: corpus.len(),
        patients: corpus.iter().map(|h| h.patient_id.as_str()).collect::<BTreeSet<_>>().len(),
        mean_records: mean(corpus.iter().map(|h| h.records.len())),
        mean_history_words: mean(corpus.iter().map(PatientHistory::word_count)),
        sections,
        bin_width,
        history_word_histogram: bins.into_iter().collect(),
    }
}

impl CorpusStats {
    /// Section table as CSV: `section,histories,mean_target_words`.
    pub fn sections_csv(&self) -> String {
        let mut out = String::from("section,histories,mean_target_words\n");
        for (s, st) in &self.sections {
            out.push_str(&format!("{},{},{:.2}\n", s.key(), st.count, st.mean_words));
        }
        out
    }

    /// Histogram as CSV: `bin_start,histories`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start,histories\n");
        for (start, n) in &self.history_word_histogram {
            out.push_str(&format!("{start},{n}\n"));
        }
        out
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "histories: {}", self.histories)?;
        writeln!(f, "patients: {}", self.patients)?;
        writeln!(f, "mean records per history: {:.2}", self.mean_records)?;
        writeln!(f, "mean words per history: {:.2}", self.mean_history_words)?;
        for (s, st) in &self.sections {
            writeln!(f, "{}: {} histories, {:.2} mean target words", s.key(), st.count, st.mean_words)?;
        }
        Ok(())
    }
}

const CONDITIONS: &[&str] = &[
    "hypertension", "diabetes", "asthma", "pneumonia", "gastritis", "migraine", "bronchitis",
    "arthritis", "anemia", "dermatitis", "sinusitis", "tonsillitis", "cystitis", "otitis",
];
const DRUGS: &[&str] = &[
    "aspirin", "metformin", "ibuprofen", "amoxicillin", "omeprazole", "salbutamol", "lisinopril",
    "paracetamol", "prednisolone", "cetirizine", "azithromycin", "naproxen", "furosemide",
    "atorvastatin",
];
const LABS: &[&str] = &[
    "complete blood count", "blood glucose", "chest x-ray", "urinalysis", "ecg", "liver panel",
    "lipid panel", "abdominal ultrasound", "throat swab", "kidney panel", "thyroid panel",
    "blood pressure monitoring",
];
const ADVICE: &[&str] = &[
    "daily walking", "low salt diet", "bed rest", "increased fluids", "physiotherapy",
    "weight control", "smoking cessation", "sleep hygiene", "breathing exercises",
    "sugar free diet", "cold compress", "foot care",
];
const SYMPTOMS: &[&str] = &[
    "fever", "cough", "headache", "nausea", "fatigue", "dizziness", "chest pain", "back pain",
    "rash", "joint pain", "sore throat", "shortness of breath",
];
const DOSES: &[u32] = &[5, 10, 20, 40, 50, 100, 250, 500];
const FILLER: &[&str] = &[
    "Vital signs stable.",
    "No new complaints.",
    "Local status: walks without limp.",
    "Patient tolerates activity well.",
    "Appetite normal.",
    "Sleep undisturbed.",
    "Skin clean and dry.",
    "Heart sounds regular.",
    "Abdomen soft and painless.",
    "Neurological status unchanged.",
];
const FILLER_TITLES: &[&str] = &["Routine visit", "Nurse note", "Phone consultation", "Observation"];

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub max_histories_per_patient: usize,
    /// Routine records placed before the informative ones, inclusive range.
    pub filler_records: (usize, usize),
    /// Sentences per routine record, inclusive range.
    pub filler_sentences: (usize, usize),
    /// Exact fraction of targets rewritten with concepts absent from the
    /// history, rounded to the nearest count.
    pub contamination: f64,
    pub sections: Vec<SectionKind>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 50,
            max_histories_per_patient: 2,
            filler_records: (0, 2),
            filler_sentences: (1, 3),
            contamination: 0.0,
            sections: SectionKind::ALL.to_vec(),
        }
    }
}

struct Facts {
    condition: &'static str,
    drug: &'static str,
    dose: u32,
    labs: [&'static str; 2],
    advice: &'static str,
    symptom: &'static str,
}

fn pick<'a>(rng: &mut ChaCha8Rng, bank: &[&'a str]) -> &'a str {
    bank[rng.gen_range(0..bank.len())]
}

fn pick_other<'a>(rng: &mut ChaCha8Rng, bank: &[&'a str], avoid: &[&str]) -> &'a str {
    let pool: Vec<&'a str> = bank.iter().copied().filter(|w| !avoid.contains(w)).collect();
    pool[rng.gen_range(0..pool.len())]
}

fn target_text(section: SectionKind, f: &Facts) -> String {
    match section {
        SectionKind::Treatment => format!("{} {} mg daily for {}.", f.drug, f.dose, f.condition),
        SectionKind::PerformedLabs => format!("{} and {}.", f.labs[0], f.labs[1]),
        SectionKind::Recommendations => format!("{} and follow-up in {} weeks.", f.advice, 1 + f.dose % 4),
    }
}

fn contaminate(section: SectionKind, f: &Facts, rng: &mut ChaCha8Rng) -> String {
    let swapped = Facts {
        condition: pick_other(rng, CONDITIONS, &[f.condition]),
        drug: pick_other(rng, DRUGS, &[f.drug]),
        dose: f.dose,
        labs: {
            let a = pick_other(rng, LABS, &f.labs);
            [a, pick_other(rng, LABS, &[f.labs[0], f.labs[1], a])]
        },
        advice: pick_other(rng, ADVICE, &[f.advice]),
        symptom: f.symptom,
    };
    target_text(section, &swapped)
}

/// Deterministic template corpus. Informative records (examination, labs,
/// prescription, discharge) follow a run of routine filler records, and
/// each target is a fixed function of the informative records.
pub fn synth_corpus(seed: u64, cfg: &SynthConfig) -> Vec<PatientHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::new();
    let mut facts = Vec::new();
    for p in 0..cfg.n_patients.max(1) {
        let patient_id = format!("P{:05}", p + 1);
        let n_hist = rng.gen_range(1..=cfg.max_histories_per_patient.max(1));
        for k in 0..n_hist {
            let f = Facts {
                condition: pick(&mut rng, CONDITIONS),
                drug: pick(&mut rng, DRUGS),
                dose: DOSES[rng.gen_range(0..DOSES.len())],
                labs: {
                    let a = pick(&mut rng, LABS);
                    [a, pick_other(&mut rng, LABS, &[a])]
                },
                advice: pick(&mut rng, ADVICE),
                symptom: pick(&mut rng, SYMPTOMS),
            };
            let base = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date");
            let mut day = base + Duration::days(rng.gen_range(0..2000));
            let mut date = |rng: &mut ChaCha8Rng| {
                day += Duration::days(rng.gen_range(0..5));
                day.format("%m/%d/%Y").to_string()
            };
            let mut records = Vec::new();
            let (lo, hi) = cfg.filler_records;
            for _ in 0..rng.gen_range(lo..=hi.max(lo)) {
                let (slo, shi) = cfg.filler_sentences;
                let n = rng.gen_range(slo.max(1)..=shi.max(slo.max(1)));
                let body: Vec<&str> = (0..n).map(|_| pick(&mut rng, FILLER)).collect();
                records.push(Record {
                    date: date(&mut rng),
                    title: pick(&mut rng, FILLER_TITLES).to_string(),
                    body: body.join(" "),
                });
            }
            records.push(Record {
                date: date(&mut rng),
                title: "Initial examination".into(),
                body: format!("Complaints of {}. Diagnosis: {}.", f.symptom, f.condition),
            });
            records.push(Record {
                date: date(&mut rng),
                title: "Laboratory results".into(),
                body: format!("Performed {} and {}. Results reviewed.", f.labs[0], f.labs[1]),
            });
            records.push(Record {
                date: date(&mut rng),
                title: "Prescription".into(),
                body: format!("Prescribed {} {} mg daily.", f.drug, f.dose),
            });
            records.push(Record {
                date: date(&mut rng),
                title: "Discharge summary".into(),
                body: format!("Advised {}. Follow-up in {} weeks.", f.advice, 1 + f.dose % 4),
            });
            let mut targets = Targets::default();
            for &s in &cfg.sections {
                *targets.slot(s) = Some(target_text(s, &f));
            }
            corpus.push(PatientHistory {
                patient_id: patient_id.clone(),
                history_id: format!("{patient_id}-H{}", k + 1),
                records,
                targets,
            });
            facts.push(f);
        }
    }
    let mut slots: Vec<(usize, SectionKind)> = (0..corpus.len())
        .flat_map(|i| cfg.sections.iter().map(move |&s| (i, s)))
        .collect();
    let n_bad = (slots.len() as f64 * cfg.contamination.clamp(0.0, 1.0)).round() as usize;
    slots.shuffle(&mut rng);
    for &(i, s) in &slots[..n_bad] {
        let text = contaminate(s, &facts[i], &mut rng);
        *corpus[i].targets.slot(s) = Some(text);
    }
    corpus
}

/// Lexicon covering every concept the generator can emit.
pub fn synth_lexicon() -> ConceptLexicon {
    let terms: Vec<&str> = [CONDITIONS, DRUGS, LABS, ADVICE, SYMPTOMS].concat();
    let lemmas = [("coughs", "cough"), ("headaches", "headache"), ("rashes", "rash"), ("fevers", "fever")]
        .into_iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    ConceptLexicon::new(&terms, lemmas)
}

/// Lexicon file text (one concept per line) matching [`synth_lexicon`].
pub fn synth_lexicon_text() -> String {
    [CONDITIONS, DRUGS, LABS, ADVICE, SYMPTOMS]
        .concat()
        .iter()
        .map(|t| format!("{t}\n"))
        .collect()
}
