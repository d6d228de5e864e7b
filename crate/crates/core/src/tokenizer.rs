//! Cased byte-pair-encoding tokenizer.
//!
//! Text is split on whitespace. A word followed by exactly one space gets the
//! boundary marker `</w>` appended to its last symbol, which absorbs that
//! space; any other whitespace character becomes a symbol of its own. This
//! keeps `decode(encode(t)) == t` for every text over the trained alphabet.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PAD: TokenId = 3;
pub const MASK: TokenId = 4;
pub const UNK: TokenId = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[CLS]", "[SEP]", "[EOS]", "[PAD]", "[MASK]", "[UNK]"];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

const MARKER: &str = "</w>";

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("tokenizer config: {0}")]
    Config(String),
    #[error("tokenizer training needs a non-empty corpus")]
    EmptyCorpus,
    #[error("tokenizer io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tokenizer file format: {0}")]
    Format(String),
}

/// Token ↔ id maps. Ids `0..6` are the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s.to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> TokenId {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a non-special symbol.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied().filter(|&id| !is_special(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Merge rules in rank order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    pub pairs: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeTable,
    ranks: HashMap<(String, String), usize>,
}

enum Unit<'a> {
    Word { text: &'a str, marked: bool },
    Space(char),
}

fn segment(text: &str) -> Vec<Unit<'_>> {
    let mut units = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() {
            units.push(Unit::Space(c));
            chars.next();
            continue;
        }
        let mut end = text.len();
        while let Some(&(i, ch)) = chars.peek() {
            if ch.is_whitespace() {
                end = i;
                break;
            }
            chars.next();
        }
        let marked = matches!(chars.peek(), Some(&(_, ' ')));
        if marked {
            chars.next();
        }
        units.push(Unit::Word {
            text: &text[start..end],
            marked,
        });
    }
    units
}

fn initial_symbols(word: &str, marked: bool) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if marked {
        if let Some(last) = syms.last_mut() {
            last.push_str(MARKER);
        }
    }
    syms
}

impl Tokenizer {
    /// Learns merges until the vocabulary reaches `target_size` or no
    /// adjacent pair occurs at least twice. Ties go to the lexicographically
    /// smallest pair.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self, TokenizerError> {
        Self::train_with_min_frequency(corpus, target_size, 2)
    }

    /// [`Tokenizer::train`] with an explicit minimum pair frequency.
    pub fn train_with_min_frequency<S: AsRef<str>>(
        corpus: &[S],
        target_size: usize,
        min_frequency: usize,
    ) -> Result<Self, TokenizerError> {
        if corpus.iter().all(|t| t.as_ref().is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut word_freq: BTreeMap<(String, bool), usize> = BTreeMap::new();
        let mut alphabet = BTreeSet::new();
        let mut spaces = BTreeSet::new();
        for text in corpus {
            for unit in segment(text.as_ref()) {
                match unit {
                    Unit::Word { text, marked } => {
                        alphabet.extend(text.chars());
                        *word_freq.entry((text.to_string(), marked)).or_default() += 1;
                    }
                    Unit::Space(c) => {
                        spaces.insert(c);
                    }
                }
            }
        }
        // separator spaces are absorbed by markers but must still be encodable
        spaces.insert(' ');

        let mut vocab = Vocab::with_specials();
        let mut base = BTreeSet::new();
        for c in &alphabet {
            base.insert(c.to_string());
            base.insert(format!("{c}{MARKER}"));
        }
        for c in &spaces {
            base.insert(c.to_string());
        }
        if target_size < base.len() + NUM_SPECIALS {
            return Err(TokenizerError::Config(format!(
                "target size {target_size} is below the {} base symbols plus {NUM_SPECIALS} specials",
                base.len()
            )));
        }
        for s in base {
            vocab.push(s);
        }

        let mut words: Vec<(Vec<String>, usize)> = word_freq
            .into_iter()
            .map(|((w, marked), f)| (initial_symbols(&w, marked), f))
            .collect();
        let mut merges = MergeTable::default();
        while vocab.len() < target_size {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, f) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += f;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&((l, r), c)| {
                    c >= min_frequency.max(1) && !SPECIAL_TOKENS.contains(&format!("{l}{r}").as_str())
                })
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .map(|((l, r), _)| (l.to_string(), r.to_string()));
            let Some((left, right)) = best else { break };
            let merged = format!("{left}{right}");
            for (syms, _) in &mut words {
                merge_in_place(syms, &left, &right, &merged);
            }
            vocab.push(merged);
            merges.pairs.push((left, right));
        }
        Ok(Self::from_parts(vocab, merges))
    }

    fn from_parts(vocab: Vocab, merges: MergeTable) -> Self {
        let ranks = merges
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Tokenizer {
            vocab,
            merges,
            ranks,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn encode_word(&self, word: &str, marked: bool, out: &mut Vec<TokenId>) {
        let mut syms = initial_symbols(word, marked);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            let Some((l, r)) = best else { break };
            let merged = format!("{l}{r}");
            merge_in_place(&mut syms, &l, &r, &merged);
        }
        out.extend(syms.iter().map(|s| self.vocab.id(s).unwrap_or(UNK)));
    }

    /// Applies merges greedily by rank. Never emits special ids other than
    /// `[UNK]`, which stands for symbols outside the trained alphabet.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for unit in segment(text) {
            match unit {
                Unit::Word { text, marked } => self.encode_word(text, marked, &mut out),
                Unit::Space(c) => {
                    let mut buf = [0u8; 4];
                    out.push(self.vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK));
                }
            }
        }
        out
    }

    /// Concatenates symbols, skipping structural specials. `[UNK]` is
    /// rendered literally.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                UNK => out.push_str(SPECIAL_TOKENS[UNK as usize]),
                id if is_special(id) => {}
                id => {
                    if let Some(tok) = self.vocab.token(id) {
                        match tok.strip_suffix(MARKER) {
                            Some(stem) => {
                                out.push_str(stem);
                                out.push(' ');
                            }
                            None => out.push_str(tok),
                        }
                    }
                }
            }
        }
        out
    }

    /// Like [`Tokenizer::decode`] but shows every special token.
    pub fn decode_with_specials(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if is_special(id) {
                if !out.is_empty() && !out.ends_with(' ') {
                    out.push(' ');
                }
                out.push_str(SPECIAL_TOKENS[id as usize]);
                out.push(' ');
            } else {
                out.push_str(&self.decode(&[id]));
            }
        }
        out
    }

    /// Writes `vocab.txt` (line number = id) and `merges.txt` (one
    /// `left right` pair per line in rank order).
    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir)?;
        let (vocab, merges) = self.to_files();
        fs::write(dir.join("vocab.txt"), vocab)?;
        fs::write(dir.join("merges.txt"), merges)?;
        Ok(())
    }

    /// The `vocab.txt` and `merges.txt` contents; inverse of `from_files`.
    pub fn to_files(&self) -> (String, String) {
        let vocab: String = self.vocab.tokens.iter().map(|t| escape(t) + "\n").collect();
        let merges: String = self
            .merges
            .pairs
            .iter()
            .map(|(l, r)| format!("{} {}\n", escape(l), escape(r)))
            .collect();
        (vocab, merges)
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        let vocab_text = fs::read_to_string(dir.join("vocab.txt"))?;
        let merges_text = fs::read_to_string(dir.join("merges.txt"))?;
        Self::from_files(&vocab_text, &merges_text)
    }

    pub fn from_files(vocab_text: &str, merges_text: &str) -> Result<Self, TokenizerError> {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (i, line) in vocab_text.lines().enumerate() {
            let tok = unescape(line)?;
            if i < NUM_SPECIALS && tok != SPECIAL_TOKENS[i] {
                return Err(TokenizerError::Format(format!(
                    "line {i} must be {}, found {tok}",
                    SPECIAL_TOKENS[i]
                )));
            }
            if vocab.ids.contains_key(&tok) {
                return Err(TokenizerError::Format(format!("duplicate token {tok}")));
            }
            vocab.push(tok);
        }
        if vocab.len() < NUM_SPECIALS {
            return Err(TokenizerError::Format("vocabulary lacks special tokens".into()));
        }
        let mut merges = MergeTable::default();
        for line in merges_text.lines() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| TokenizerError::Format(format!("bad merge line {line:?}")))?;
            merges.pairs.push((unescape(l)?, unescape(r)?));
        }
        Ok(Self::from_parts(vocab, merges))
    }
}

fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('s') => out.push(' '),
            other => {
                return Err(TokenizerError::Format(format!(
                    "bad escape \\{}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

/// Whitespace-separated words with each ASCII punctuation character split
/// off as its own token.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if c.is_ascii_punctuation() {
                out.push(&text[i..i + 1]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_count(t: &Tokenizer) -> usize {
        t.vocab_size() - NUM_SPECIALS - t.merges().pairs.len()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // words: "abab</w>" and "ab" → (a,b) occurs 3 times
        let probe = Tokenizer::train(&["abab ab"], 1000).unwrap();
        let base = base_count(&probe);
        let t = Tokenizer::train(&["abab ab"], NUM_SPECIALS + base + 1).unwrap();
        assert_eq!(t.merges().pairs, vec![("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn single_character_corpus_merges_twice() {
        // (aa, aa) occurs once, so the default frequency floor of 2 stops early
        let t = Tokenizer::train(&["aaaa"], 1000).unwrap();
        assert_eq!(t.merges().pairs, vec![("a".to_string(), "a".to_string())]);
        let t = Tokenizer::train_with_min_frequency(&["aaaa"], 1000, 1).unwrap();
        assert_eq!(
            t.merges().pairs,
            vec![
                ("a".to_string(), "a".to_string()),
                ("aa".to_string(), "aa".to_string())
            ]
        );
        assert_eq!(t.encode("aaaa").len(), 1);
    }

    #[test]
    fn empty_budget_gives_base_plus_specials() {
        let probe = Tokenizer::train(&["hello world"], 1000).unwrap();
        let base = base_count(&probe);
        let t = Tokenizer::train(&["hello world"], NUM_SPECIALS + base).unwrap();
        assert!(t.merges().pairs.is_empty());
        assert_eq!(t.vocab_size(), NUM_SPECIALS + base);
        assert!(Tokenizer::train(&["hello world"], NUM_SPECIALS + base - 1).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Tokenizer::train(&[""], 100),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn specials_occupy_low_ids() {
        let t = Tokenizer::train(&["x y"], 100).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(t.vocab().token(i as TokenId), Some(*s));
        }
    }

    #[test]
    fn empty_text_round_trip() {
        let t = Tokenizer::train(&["some text"], 100).unwrap();
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
    }

    #[test]
    fn whitespace_is_preserved() {
        let t = Tokenizer::train(&["a b\nc\t d  e "], 100).unwrap();
        for s in ["a b", " a", "a  b", "a\nb ", "\t\td e", "e"] {
            assert_eq!(t.decode(&t.encode(s)), s, "{s:?}");
        }
    }

    #[test]
    fn unknown_glyph_maps_to_unk() {
        let t = Tokenizer::train(&["abc"], 100).unwrap();
        assert!(t.encode("a€c").contains(&UNK));
    }

    #[test]
    fn case_is_preserved() {
        let t = Tokenizer::train(&["Aa aA AA aa"], 100).unwrap();
        assert_eq!(t.decode(&t.encode("aA Aa")), "aA Aa");
        assert_ne!(t.encode("Aa"), t.encode("aa"));
    }

    #[test]
    fn special_strings_in_text_never_become_special_ids() {
        let t = Tokenizer::train(&["[CLS] [CLS] [CLS] [EOS] [EOS]"], 200).unwrap();
        let ids = t.encode("[CLS] [EOS]");
        assert!(ids.iter().all(|&i| !is_special(i)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tokenizer::train(&["the cat sat\non the  mat\\ x"], 80).unwrap();
        t.save(dir.path()).unwrap();
        let back = Tokenizer::load(dir.path()).unwrap();
        assert_eq!(back.vocab(), t.vocab());
        assert_eq!(back.merges(), t.merges());
    }

    #[test]
    fn retraining_is_deterministic() {
        let corpus = ["lorem ipsum dolor sit amet", "ipsum ipsum dolor"];
        let a = Tokenizer::train(&corpus, 60).unwrap();
        let b = Tokenizer::train(&corpus, 60).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.vocab(), b.vocab());
    }

    #[test]
    fn split_words_separates_punctuation() {
        assert_eq!(
            split_words("Fever, cough.  01/24 ok"),
            vec!["Fever", ",", "cough", ".", "01", "/", "24", "ok"]
        );
        assert!(split_words("  ").is_empty());
    }
}
