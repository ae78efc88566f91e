//! Speech ingestion and per-session document-term matrices.
//!
//! Speeches are tokenized into lowercase words (punctuation mapped to
//! whitespace, digits deleted), stopwords dropped, and consecutive word
//! pairs joined into bigram terms. A session corpus keeps only speakers
//! with at least `min_speeches` speeches and bigrams used by at least
//! `min_speakers` distinct retained speakers, iterating the two filters to
//! a fixed point. Speeches whose retained-term counts are all zero are
//! dropped from the matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimal English stopword list shipped with the binary. A custom list
/// (one token per line) can be supplied through the CLI.
pub const DEFAULT_STOPWORDS: &str = include_str!("data/stopwords_en.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate speech_id {speech_id:?} in session {session}")]
    DuplicateSpeechId { session: u32, speech_id: String },
    #[error("session {session}: no speech survives filtering")]
    EmptyCorpus { session: u32 },
    #[error("speech record has session {session}, expected {expected}")]
    MixedSessions { session: u32, expected: u32 },
}

/// Party affiliation of a speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    D,
    R,
    I,
    #[serde(other)]
    Other,
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::D => write!(f, "D"),
            Party::R => write!(f, "R"),
            Party::I => write!(f, "I"),
            Party::Other => write!(f, "other"),
        }
    }
}

impl std::str::FromStr for Party {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "D" => Party::D,
            "R" => Party::R,
            "I" => Party::I,
            _ => Party::Other,
        })
    }
}

/// One speech as it appears in the input file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeechRecord {
    pub speech_id: String,
    pub session: u32,
    pub speaker_id: String,
    pub speaker_name: String,
    pub party: Party,
    pub text: String,
}

/// A speaker retained in a session corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub name: String,
    pub party: Party,
}

/// Row-compressed sparse matrix of non-negative integer counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCounts {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Per row: (column, count) pairs sorted by column, counts > 0.
    pub rows: Vec<Vec<(u32, u32)>>,
}

impl SparseCounts {
    pub fn row(&self, i: usize) -> &[(u32, u32)] {
        &self.rows[i]
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|&(_, c)| c as u64)
            .sum()
    }

    pub fn to_dense(&self) -> ndarray::Array2<f64> {
        let mut m = ndarray::Array2::zeros((self.n_rows, self.n_cols));
        for (i, row) in self.rows.iter().enumerate() {
            for &(v, c) in row {
                m[[i, v as usize]] = c as f64;
            }
        }
        m
    }
}

/// Document-term matrix for one session, with speaker metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCorpus {
    pub session: u32,
    /// Retained bigrams, unique and lexicographically sorted.
    pub vocabulary: Vec<String>,
    pub counts: SparseCounts,
    /// Row index -> index into `speakers`.
    pub doc_speaker: Vec<u32>,
    /// Retained speakers sorted by id.
    pub speakers: Vec<Speaker>,
}

impl SessionCorpus {
    pub fn n_docs(&self) -> usize {
        self.counts.n_rows
    }

    pub fn n_terms(&self) -> usize {
        self.counts.n_cols
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_of_doc(&self, doc: usize) -> &Speaker {
        &self.speakers[self.doc_speaker[doc] as usize]
    }

    /// Checks the structural invariants; used by tests and after loading
    /// corpora from disk.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.counts.n_rows != self.doc_speaker.len() {
            return Err("doc_speaker length != row count".into());
        }
        if self.counts.n_cols != self.vocabulary.len() {
            return Err("vocabulary length != column count".into());
        }
        if self.vocabulary.windows(2).any(|w| w[0] >= w[1]) {
            return Err("vocabulary not strictly sorted".into());
        }
        let mut col_support = vec![false; self.counts.n_cols];
        for (i, row) in self.counts.rows.iter().enumerate() {
            if row.is_empty() {
                return Err(format!("row {i} is all zero"));
            }
            for &(v, c) in row {
                if c == 0 {
                    return Err(format!("explicit zero count at ({i},{v})"));
                }
                col_support[v as usize] = true;
            }
        }
        if let Some(v) = col_support.iter().position(|&s| !s) {
            return Err(format!("column {v} has no nonzero entry"));
        }
        Ok(())
    }
}

/// Index mapping between two session vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabAlignment {
    /// New-vocabulary index -> previous-vocabulary index, for shared terms.
    pub carried: BTreeMap<usize, usize>,
    /// New-vocabulary indices absent from the previous vocabulary.
    pub added: BTreeSet<usize>,
    /// Previous-vocabulary indices absent from the new vocabulary.
    pub dropped: BTreeSet<usize>,
}

/// Lowercases, maps punctuation and symbols to spaces, deletes digits, and
/// splits on whitespace, dropping stopwords. Token order is preserved.
pub fn tokenize(text: &str, stopwords: &HashSet<String>) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_numeric() {
            // deleted, not split on
        } else if ch.is_alphabetic() {
            for lc in ch.to_lowercase() {
                cleaned.push(lc);
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned
        .split_whitespace()
        .filter(|t| !stopwords.contains(*t))
        .map(str::to_owned)
        .collect()
}

/// Joins consecutive token pairs with a single space.
pub fn extract_bigrams(tokens: &[String]) -> Vec<String> {
    tokens
        .windows(2)
        .map(|w| format!("{} {}", w[0], w[1]))
        .collect()
}

/// Parses a stopword list, one token per line; blank lines ignored.
pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Filtering summary produced alongside a session corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterSummary {
    pub session: u32,
    pub speakers_before: usize,
    pub speakers_after: usize,
    pub speeches_before: usize,
    pub speeches_after: usize,
}

impl FilterSummary {
    pub fn avg_before(&self) -> f64 {
        self.speeches_before as f64 / self.speakers_before.max(1) as f64
    }
    pub fn avg_after(&self) -> f64 {
        self.speeches_after as f64 / self.speakers_after.max(1) as f64
    }
}

/// Builds the document-term matrix for one session.
///
/// Speakers with fewer than `min_speeches` speeches (counted on the raw
/// records, before any empty rows are dropped) are removed, then bigrams
/// used by fewer than `min_speakers` distinct retained speakers, and the
/// two filters alternate until neither changes anything. Rows left with no
/// retained bigram are dropped last.
pub fn build_session_corpus(
    records: &[SpeechRecord],
    min_speeches: usize,
    min_speakers: usize,
    stopwords: &HashSet<String>,
) -> Result<(SessionCorpus, FilterSummary), CorpusError> {
    assert!(min_speeches >= 1 && min_speakers >= 1);
    let session = records.first().map(|r| r.session).unwrap_or(0);
    for r in records {
        if r.session != session {
            return Err(CorpusError::MixedSessions {
                session: r.session,
                expected: session,
            });
        }
    }

    // Bigrams per speech, computed once.
    let speech_bigrams: Vec<Vec<String>> = records
        .iter()
        .map(|r| extract_bigrams(&tokenize(&r.text, stopwords)))
        .collect();

    let mut speech_count: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *speech_count.entry(r.speaker_id.as_str()).or_insert(0) += 1;
    }
    let speakers_before = speech_count.len();

    let mut retained_speakers: BTreeSet<&str> = speech_count
        .iter()
        .filter(|(_, &n)| n >= min_speeches)
        .map(|(&id, _)| id)
        .collect();
    let mut retained_bigrams: BTreeSet<&str> = BTreeSet::new();

    // Alternate the two filters to a fixed point. Speaker counts are based
    // on raw speeches, so in the current formulation the loop settles after
    // one round, but the termination condition is what the contract states.
    loop {
        let mut users: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for (r, bigrams) in records.iter().zip(&speech_bigrams) {
            if !retained_speakers.contains(r.speaker_id.as_str()) {
                continue;
            }
            for b in bigrams {
                users.entry(b.as_str()).or_default().insert(&r.speaker_id);
            }
        }
        let next_bigrams: BTreeSet<&str> = users
            .iter()
            .filter(|(_, u)| u.len() >= min_speakers)
            .map(|(&b, _)| b)
            .collect();

        let next_speakers: BTreeSet<&str> = speech_count
            .iter()
            .filter(|(_, &n)| n >= min_speeches)
            .map(|(&id, _)| id)
            .collect();

        if next_bigrams == retained_bigrams && next_speakers == retained_speakers {
            break;
        }
        retained_bigrams = next_bigrams;
        retained_speakers = next_speakers;
    }

    let vocabulary: Vec<String> = retained_bigrams.iter().map(|&b| b.to_owned()).collect();
    let vocab_index: HashMap<&str, u32> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), i as u32))
        .collect();

    // Deterministic speaker order: sorted by id, metadata from each
    // speaker's first record.
    let mut first_record: HashMap<&str, &SpeechRecord> = HashMap::new();
    for r in records {
        if retained_speakers.contains(r.speaker_id.as_str()) {
            first_record.entry(r.speaker_id.as_str()).or_insert(r);
        }
    }
    let mut speaker_list: Vec<Speaker> = Vec::new();
    let mut speaker_index: BTreeMap<&str, u32> = BTreeMap::new();
    for (rank, &id) in retained_speakers.iter().enumerate() {
        let rec = first_record[id];
        speaker_index.insert(id, rank as u32);
        speaker_list.push(Speaker {
            id: id.to_owned(),
            name: rec.speaker_name.clone(),
            party: rec.party,
        });
    }

    let mut rows: Vec<Vec<(u32, u32)>> = Vec::new();
    let mut doc_speaker: Vec<u32> = Vec::new();
    for (r, bigrams) in records.iter().zip(&speech_bigrams) {
        let Some(&spk) = speaker_index.get(r.speaker_id.as_str()) else {
            continue;
        };
        let mut tally: BTreeMap<u32, u32> = BTreeMap::new();
        for b in bigrams {
            if let Some(&v) = vocab_index.get(b.as_str()) {
                *tally.entry(v).or_insert(0) += 1;
            }
        }
        if tally.is_empty() {
            continue; // empty frequency count: row omitted
        }
        rows.push(tally.into_iter().collect());
        doc_speaker.push(spk);
    }

    if rows.is_empty() {
        return Err(CorpusError::EmptyCorpus { session });
    }

    let summary = FilterSummary {
        session,
        speakers_before,
        speakers_after: speaker_list.len(),
        speeches_before: records.len(),
        speeches_after: rows.len(),
    };
    let corpus = SessionCorpus {
        session,
        counts: SparseCounts {
            n_rows: rows.len(),
            n_cols: vocabulary.len(),
            rows,
        },
        vocabulary,
        doc_speaker,
        speakers: speaker_list,
    };
    debug_assert_eq!(corpus.check_invariants(), Ok(()));
    Ok((corpus, summary))
}

/// Index mapping between two sorted vocabularies: `carried` is the
/// intersection (new index -> previous index), `added` and `dropped` the
/// set differences.
pub fn align_vocabulary(prev: &[String], next: &[String]) -> VocabAlignment {
    let prev_index: HashMap<&str, usize> = prev
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut carried = BTreeMap::new();
    let mut added = BTreeSet::new();
    for (j, term) in next.iter().enumerate() {
        match prev_index.get(term.as_str()) {
            Some(&i) => {
                carried.insert(j, i);
            }
            None => {
                added.insert(j);
            }
        }
    }
    let carried_prev: HashSet<usize> = carried.values().copied().collect();
    let dropped = (0..prev.len())
        .filter(|i| !carried_prev.contains(i))
        .collect();
    VocabAlignment {
        carried,
        added,
        dropped,
    }
}

/// Reads a JSON-lines speech file and groups records by session, ascending.
///
/// Every line must be one JSON object with keys `speech_id`, `session`,
/// `speaker_id`, `speaker_name`, `party`, `text`. Line order is preserved
/// within each session.
pub fn load_corpus<R: BufRead>(reader: R) -> Result<BTreeMap<u32, Vec<SpeechRecord>>, CorpusError> {
    let mut by_session: BTreeMap<u32, Vec<SpeechRecord>> = BTreeMap::new();
    let mut seen: HashSet<(u32, String)> = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpeechRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if rec.session < 1 {
            return Err(CorpusError::Parse {
                line: lineno + 1,
                message: "session must be >= 1".into(),
            });
        }
        if !seen.insert((rec.session, rec.speech_id.clone())) {
            return Err(CorpusError::DuplicateSpeechId {
                session: rec.session,
                speech_id: rec.speech_id,
            });
        }
        by_session.entry(rec.session).or_default().push(rec);
    }
    Ok(by_session)
}

/// Convenience wrapper opening `path`.
pub fn load_corpus_file(path: &Path) -> Result<BTreeMap<u32, Vec<SpeechRecord>>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::Parse {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    load_corpus(std::io::BufReader::new(file))
}
