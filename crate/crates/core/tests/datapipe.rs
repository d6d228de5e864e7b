use std::collections::HashMap;

use longsum_core::datapipe::{
    corpus_stats, coverage_score, filter_dataset, serialize_history, serialized_segments,
    synth_corpus, synth_lexicon, ConceptLexicon, PatientHistory, Record, SectionKind, SynthConfig,
    Targets,
};
use longsum_core::tokenizer::{is_special, Tokenizer, CLS, EOS, SEP};
use proptest::prelude::*;

fn record(date: &str, title: &str, body: &str) -> Record {
    Record {
        date: date.into(),
        title: title.into(),
        body: body.into(),
    }
}

fn history(id: &str, records: Vec<Record>) -> PatientHistory {
    PatientHistory {
        patient_id: format!("{id}-patient"),
        history_id: id.into(),
        records,
        targets: Targets::default(),
    }
}

fn tokenizer_for(texts: &[String]) -> Tokenizer {
    let mut corpus = texts.to_vec();
    corpus.push("abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ 0123456789 .,:/!-".into());
    for s in SectionKind::ALL {
        corpus.push(s.prefix().into());
    }
    Tokenizer::train(&corpus, 300).unwrap()
}

#[test]
fn serializes_the_reference_example() {
    let h = history(
        "H1",
        vec![record("01/24/2017", "Initial examination", "Local status: Walks without limp...")],
    );
    let tok = tokenizer_for(&[h.text()]);
    let s = serialize_history(&h, SectionKind::Recommendations, &tok).unwrap();
    assert_eq!(
        tok.decode_with_specials(&s.ids).trim_end(),
        "[CLS] Recommendations: 01/24/2017 Initial examination: Local status: Walks without limp... [EOS]"
    );
    assert_eq!(tok.decode(&s.ids[1..1 + s.prefix_positions.len()]), "Recommendations: ");
}

#[test]
fn two_records_have_exactly_one_separator() {
    let h = history(
        "H1",
        vec![record("01/24/2017", "A", "first body."), record("01/25/2017", "B", "second body.")],
    );
    let tok = tokenizer_for(&[h.text()]);
    let s = serialize_history(&h, SectionKind::Treatment, &tok).unwrap();
    assert_eq!(s.ids.iter().filter(|&&t| t == SEP).count(), 1);
    assert_eq!(tok.decode(&s.ids[1..1 + s.prefix_positions.len()]), "Treatment: ");
    assert_eq!(s.prefix_positions[0], 1);
}

fn text_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z0-9.,:/-]{1,8}( [A-Za-z0-9.,:/-]{1,8}){0,6}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn specials_sit_exactly_where_the_format_puts_them(
        recs in prop::collection::vec((text_strategy(), text_strategy()), 1..6),
        section in 0usize..3,
    ) {
        let h = history(
            "H",
            recs.iter().map(|(t, b)| record("03/04/2019", t, b)).collect(),
        );
        let section = SectionKind::ALL[section];
        let tok = tokenizer_for(&[h.text()]);
        let s = serialize_history(&h, section, &tok).unwrap();
        prop_assert_eq!(s.ids[0], CLS);
        prop_assert_eq!(*s.ids.last().unwrap(), EOS);
        let specials: Vec<u32> = s.ids.iter().copied().filter(|&t| is_special(t)).collect();
        prop_assert_eq!(specials.len(), recs.len() + 1);
        prop_assert_eq!(s.ids.iter().filter(|&&t| t == SEP).count(), recs.len() - 1);

        // text between specials decodes back to each segment
        let inner = &s.ids[1..s.ids.len() - 1];
        let decoded: Vec<String> = inner.split(|&t| t == SEP).map(|seg| tok.decode(seg)).collect();
        prop_assert_eq!(decoded, serialized_segments(&h, section));
    }

    #[test]
    fn coverage_is_bounded_and_monotone(
        hist in prop::collection::vec(0usize..8, 0..8),
        summ in prop::collection::vec(0usize..8, 0..8),
        extra in 0usize..8,
    ) {
        let terms: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
        let lex = ConceptLexicon::new(&terms, HashMap::new());
        let text = |ids: &[usize]| ids.iter().map(|&i| terms[i].clone()).collect::<Vec<_>>().join(" and ");
        let (h, s) = (text(&hist), text(&summ));
        let base = coverage_score(&h, &s, &lex);
        prop_assert!((0.0..=1.0).contains(&base));
        if !hist.contains(&extra) {
            let more = coverage_score(&h, &format!("{s} {}", terms[extra]), &lex);
            prop_assert!(more <= base);
        }
        let richer = coverage_score(&format!("{h} {}", terms[extra]), &s, &lex);
        prop_assert!(richer >= base);
    }

    #[test]
    fn filter_is_monotone_in_threshold(t1 in 0.0f64..1.1, t2 in 0.0f64..1.1) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let corpus = synth_corpus(3, &SynthConfig { n_patients: 20, contamination: 0.4, ..SynthConfig::default() });
        let lex = synth_lexicon();
        let a = filter_dataset(&corpus, &lex, lo, &SectionKind::ALL);
        let b = filter_dataset(&corpus, &lex, hi, &SectionKind::ALL);
        for (ra, rb) in a.audit.iter().zip(&b.audit) {
            prop_assert!(!rb.kept || ra.kept);
        }
        prop_assert!(a.kept.len() >= b.kept.len());
    }
}

#[test]
fn threshold_arithmetic_on_hand_scores() {
    let lex = ConceptLexicon::new(
        &["a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9", "a10", "z1", "z2", "z3", "z4", "z5", "z6"],
        HashMap::new(),
    );
    let mut corpus = Vec::new();
    for (id, summary) in [("H1", "a1 a2 z1 z2 z3"), ("H2", "a1 z1"), ("H3", "a1 a2 a3 a4 a5 a6 a7 a8 a9 z1")] {
        let mut h = history(id, vec![record("01/01/2017", "Visit", "a1 a2 a3 a4 a5 a6 a7 a8 a9 a10")]);
        h.targets.treatment = Some(summary.into());
        corpus.push(h);
    }
    let scores: Vec<f64> = filter_dataset(&corpus, &lex, 0.5, &SectionKind::ALL)
        .audit
        .iter()
        .map(|r| r.score)
        .collect();
    assert_eq!(scores, vec![0.4, 0.5, 0.9]);
    let kept = |t| -> Vec<String> {
        filter_dataset(&corpus, &lex, t, &SectionKind::ALL)
            .kept
            .into_iter()
            .map(|h| h.history_id)
            .collect()
    };
    assert_eq!(kept(0.5), vec!["H2", "H3"]);
    assert_eq!(kept(0.0).len(), 3);
    assert!(kept(1.01).is_empty());
}

#[test]
fn contaminated_corpus_keeps_seventy_percent() {
    let cfg = SynthConfig {
        n_patients: 200,
        contamination: 0.3,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(17, &cfg);
    let out = filter_dataset(&corpus, &synth_lexicon(), 0.5, &SectionKind::ALL);
    let n_targets: usize = corpus
        .iter()
        .map(|h| SectionKind::ALL.iter().filter(|&&s| h.target(s).is_some()).count())
        .sum();
    assert_eq!(out.audit.len(), n_targets);
    assert!((out.keep_rate() - 0.7).abs() <= 0.05, "keep rate {}", out.keep_rate());
}

#[test]
fn clean_corpus_scores_full_coverage() {
    let corpus = synth_corpus(2, &SynthConfig::default());
    let out = filter_dataset(&corpus, &synth_lexicon(), 0.5, &SectionKind::ALL);
    assert!(out.audit.iter().all(|r| r.score == 1.0));
}

#[test]
fn generator_is_deterministic_and_complete() {
    let cfg = SynthConfig {
        n_patients: 30,
        filler_records: (1, 4),
        ..SynthConfig::default()
    };
    let a = synth_corpus(9, &cfg);
    assert_eq!(a, synth_corpus(9, &cfg));
    assert_ne!(a, synth_corpus(10, &cfg));
    for h in &a {
        assert!(!h.records.is_empty());
        assert!(h.validate().is_ok());
        assert!(SectionKind::ALL.iter().all(|&s| h.target(s).is_some()));
    }
}

#[test]
fn stats_of_empty_corpus() {
    let st = corpus_stats(&[], 100);
    assert_eq!(st.histories, 0);
    assert!(st.history_word_histogram.is_empty());
    assert!(st.sections.values().all(|s| s.count == 0 && s.mean_words == 0.0));
}

#[test]
fn stats_match_a_hand_tally() {
    let mut a = history("A", vec![record("01/01/2017", "Visit", "one two three")]);
    a.targets.treatment = Some("x y".into());
    a.targets.recommendations = Some("r".into());
    let mut b = history("B", vec![record("01/01/2017", "Visit", "one"), record("01/02/2017", "Check", "a b c d e f")]);
    b.targets.treatment = Some("x y z w".into());
    let c = history("C", vec![record("01/01/2017", "Visit", "")]);
    let st = corpus_stats(&[a, b, c], 5);
    // word counts: A = 5, B = 3 + 8 = 11, C = 2
    assert_eq!(st.histories, 3);
    assert_eq!(st.sections[&SectionKind::Treatment].count, 2);
    assert_eq!(st.sections[&SectionKind::Treatment].mean_words, 3.0);
    assert_eq!(st.sections[&SectionKind::PerformedLabs].count, 0);
    assert_eq!(st.sections[&SectionKind::Recommendations].count, 1);
    assert_eq!(st.history_word_histogram, vec![(0, 1), (5, 1), (10, 1)]);
    assert!((st.mean_history_words - 6.0).abs() < 1e-12);
}

#[test]
fn thirty_five_word_targets_average_thirty_five() {
    let mut corpus = synth_corpus(1, &SynthConfig { n_patients: 5, ..SynthConfig::default() });
    let target = vec!["word"; 35].join(" ");
    for h in &mut corpus {
        h.targets.treatment = Some(target.clone());
    }
    assert_eq!(corpus_stats(&corpus, 50).sections[&SectionKind::Treatment].mean_words, 35.0);
}
