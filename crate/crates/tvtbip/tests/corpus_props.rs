//! Corpus builder checked against an independent hash-map tally and the
//! filter fixed-point properties, over both hand-built and generated inputs.

mod support;

use proptest::prelude::*;
use std::collections::{HashMap, HashSet};
use tvtbip::corpus::{
    build_session_corpus, extract_bigrams, tokenize, Party, SessionCorpus, SpeechRecord,
};

fn record(id: usize, speaker: &str, text: &str) -> SpeechRecord {
    SpeechRecord {
        speech_id: format!("s{id}"),
        session: 1,
        speaker_id: speaker.to_owned(),
        speaker_name: speaker.to_uppercase(),
        party: if speaker.len().is_multiple_of(2) {
            Party::D
        } else {
            Party::R
        },
        text: text.to_owned(),
    }
}

/// Independent oracle: bigram counts tallied with a plain hash map over the
/// raw texts, no filtering.
fn brute_force_tally(records: &[SpeechRecord]) -> HashMap<String, u64> {
    let stopwords = HashSet::new();
    let mut tally = HashMap::new();
    for r in records {
        let tokens = tokenize(&r.text, &stopwords);
        for pair in tokens.windows(2) {
            *tally
                .entry(format!("{} {}", pair[0], pair[1]))
                .or_insert(0u64) += 1;
        }
    }
    tally
}

fn corpus_tally(corpus: &SessionCorpus) -> HashMap<String, u64> {
    let mut tally = HashMap::new();
    for row in &corpus.counts.rows {
        for &(term, count) in row {
            *tally
                .entry(corpus.vocabulary[term as usize].clone())
                .or_insert(0u64) += count as u64;
        }
    }
    tally
}

#[test]
fn toy_corpus_matches_brute_force_counter() {
    let records = vec![
        record(0, "ada", "green energy future for green energy"),
        record(1, "bob", "green energy now"),
        record(2, "cyd", "the future is green energy"),
    ];
    let stopwords = HashSet::new();
    let (corpus, _) = build_session_corpus(&records, 1, 1, &stopwords).unwrap();
    assert_eq!(corpus_tally(&corpus), brute_force_tally(&records));
    assert_eq!(corpus.n_docs(), 3);
}

/// Records over a tiny vocabulary so bigrams repeat across speakers.
fn arb_records() -> impl Strategy<Value = Vec<SpeechRecord>> {
    let word = prop::sample::select(vec!["tax", "war", "farm", "oil", "vote"]);
    let text = prop::collection::vec(word, 0..8).prop_map(|ws| ws.join(" "));
    let speech = (prop::sample::select(vec!["a", "b", "c", "dd"]), text);
    prop::collection::vec(speech, 1..24).prop_map(|items| {
        items
            .into_iter()
            .enumerate()
            .map(|(i, (speaker, text))| record(i, speaker, &text))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// With thresholds (1,1), total count mass equals the bigram count of
    /// the raw texts.
    #[test]
    fn count_conservation(records in arb_records()) {
        let stopwords = HashSet::new();
        let expected: u64 = brute_force_tally(&records).values().sum();
        match build_session_corpus(&records, 1, 1, &stopwords) {
            Ok((corpus, _)) => {
                prop_assert_eq!(corpus.counts.total(), expected);
                prop_assert_eq!(corpus_tally(&corpus), brute_force_tally(&records));
            }
            Err(_) => prop_assert_eq!(expected, 0),
        }
    }

    /// Rebuilding from the retained speakers' records reproduces the
    /// corpus, and the support thresholds hold after the fixed point.
    #[test]
    fn filter_fixed_point(records in arb_records(),
                          min_speeches in 1usize..4,
                          min_speakers in 1usize..4) {
        let stopwords = HashSet::new();
        let Ok((corpus, _)) = build_session_corpus(&records, min_speeches, min_speakers, &stopwords)
        else {
            return Ok(());
        };

        // column support: every term used by >= min_speakers retained speakers
        for term in 0..corpus.n_terms() {
            let users: HashSet<u32> = corpus
                .counts
                .rows
                .iter()
                .zip(&corpus.doc_speaker)
                .filter(|(row, _)| row.iter().any(|&(t, _)| t as usize == term))
                .map(|(_, &s)| s)
                .collect();
            prop_assert!(users.len() >= min_speakers);
        }
        // speaker support on raw speeches
        for speaker in &corpus.speakers {
            let raw = records.iter().filter(|r| r.speaker_id == speaker.id).count();
            prop_assert!(raw >= min_speeches);
        }

        // idempotence over the retained speakers' records
        let retained: HashSet<&str> = corpus.speakers.iter().map(|s| s.id.as_str()).collect();
        let again: Vec<SpeechRecord> = records
            .iter()
            .filter(|r| retained.contains(r.speaker_id.as_str()))
            .cloned()
            .collect();
        let (rebuilt, _) = build_session_corpus(&again, min_speeches, min_speakers, &stopwords)
            .expect("retained records cannot produce an empty corpus");
        prop_assert_eq!(rebuilt, corpus);
    }

    /// Tokens never contain digits, punctuation, or uppercase.
    #[test]
    fn tokenize_output_is_clean(text in "\\PC{0,80}") {
        let stopwords: HashSet<String> = ["the".to_string()].into_iter().collect();
        let tokens = tokenize(&text, &stopwords);
        for t in &tokens {
            prop_assert!(!t.is_empty());
            prop_assert!(t.chars().all(|c| !c.is_numeric() && !c.is_whitespace()));
            prop_assert!(t.chars().all(|c| c.is_alphabetic()));
            // lowercased: some alphabetic code points have no lowercase
            // mapping, so assert idempotence rather than case class
            prop_assert_eq!(t.clone(), t.to_lowercase());
            prop_assert_ne!(t.as_str(), "the");
        }
        let n = tokens.len();
        prop_assert_eq!(extract_bigrams(&tokens).len(), n.saturating_sub(1));
    }
}
