//! On-disk formats.
//!
//! Corpora persist as three plain files per session (vocabulary list,
//! `row,col,count` triplets, `row,speaker_id,party` rows). Fits, manifests,
//! truth, and metrics are JSON with every float printed at 17 significant
//! digits so a reload reproduces the exact bits. Every output starts with a
//! header carrying the artifact version and the config fingerprint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainResult;
use crate::corpus::{Party, SessionCorpus, SparseCounts, Speaker};
use crate::inference::{SessionFit, VariationalState};
use crate::model::SessionParams;
use crate::synth::{Scenario, SyntheticTruth};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> PersistError {
    PersistError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Provenance stamp written at the top of every output file.
#[derive(Debug, Clone, Copy)]
pub struct Stamp {
    pub config_hash: u64,
    pub seed: u64,
}

impl Stamp {
    pub fn header_line(&self) -> String {
        format!(
            "# tvtbip {VERSION} config={:016x} seed={}",
            self.config_hash, self.seed
        )
    }
}

/// serde_json formatter printing floats with 17 significant digits, enough
/// to reproduce any f64 exactly on reload.
struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

/// Serializes to JSON with the 17-significant-digit float format.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits);
    value.serialize(&mut ser).expect("JSON serialization");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    fs::write(path, to_json_string(value)).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Dense row-major matrix with explicit dims, the JSON form of every array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDto {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDto {
    pub fn from_array(a: &Array2<f64>) -> Self {
        MatrixDto {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, String> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Session corpus files
// ---------------------------------------------------------------------------

pub fn corpus_file_names(session: u32) -> (String, String, String) {
    (
        format!("session_{session:03}.vocab.txt"),
        format!("session_{session:03}.counts.csv"),
        format!("session_{session:03}.speakers.csv"),
    )
}

/// Writes the three corpus files for one session into `dir`.
pub fn write_session_corpus(
    dir: &Path,
    corpus: &SessionCorpus,
    stamp: &Stamp,
) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (vocab_name, counts_name, speakers_name) = corpus_file_names(corpus.session);

    let mut vocab = String::new();
    writeln!(vocab, "{}", stamp.header_line()).unwrap();
    for term in &corpus.vocabulary {
        writeln!(vocab, "{term}").unwrap();
    }
    let path = dir.join(vocab_name);
    fs::write(&path, vocab).map_err(io_err(&path))?;

    let mut counts = String::new();
    writeln!(counts, "{}", stamp.header_line()).unwrap();
    writeln!(counts, "row,col,count").unwrap();
    for (row, entries) in corpus.counts.rows.iter().enumerate() {
        for &(col, count) in entries {
            writeln!(counts, "{row},{col},{count}").unwrap();
        }
    }
    let path = dir.join(counts_name);
    fs::write(&path, counts).map_err(io_err(&path))?;

    let mut speakers = String::new();
    writeln!(speakers, "{}", stamp.header_line()).unwrap();
    writeln!(speakers, "row,speaker_id,party").unwrap();
    for (row, &spk) in corpus.doc_speaker.iter().enumerate() {
        let s = &corpus.speakers[spk as usize];
        writeln!(speakers, "{row},{},{}", s.id, s.party).unwrap();
    }
    let path = dir.join(speakers_name);
    fs::write(&path, speakers).map_err(io_err(&path))?;
    Ok(())
}

fn data_lines(path: &Path) -> Result<Vec<String>, PersistError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        lines.push(line);
    }
    Ok(lines)
}

/// Reads one session's corpus files back from `dir`.
pub fn read_session_corpus(dir: &Path, session: u32) -> Result<SessionCorpus, PersistError> {
    let (vocab_name, counts_name, speakers_name) = corpus_file_names(session);
    let vocabulary = data_lines(&dir.join(vocab_name))?;

    let speakers_path = dir.join(speakers_name);
    let mut row_speakers: Vec<(String, Party)> = Vec::new();
    for line in data_lines(&speakers_path)? {
        if line == "row,speaker_id,party" {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(format_err(&speakers_path, format!("bad row: {line}")));
        }
        let row: usize = parts[0]
            .parse()
            .map_err(|_| format_err(&speakers_path, format!("bad row index: {line}")))?;
        if row != row_speakers.len() {
            return Err(format_err(&speakers_path, "rows out of order"));
        }
        row_speakers.push((parts[1].to_owned(), parts[2].parse().unwrap()));
    }
    if row_speakers.is_empty() {
        return Err(format_err(&speakers_path, "no rows"));
    }

    let mut speaker_ids: Vec<(String, Party)> = row_speakers.clone();
    speaker_ids.sort();
    speaker_ids.dedup();
    let index: BTreeMap<&str, u32> = speaker_ids
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i as u32))
        .collect();
    let speakers: Vec<Speaker> = speaker_ids
        .iter()
        .map(|(id, party)| Speaker {
            id: id.clone(),
            name: id.clone(),
            party: *party,
        })
        .collect();
    let doc_speaker: Vec<u32> = row_speakers
        .iter()
        .map(|(id, _)| index[id.as_str()])
        .collect();

    let counts_path = dir.join(counts_name);
    let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); row_speakers.len()];
    for line in data_lines(&counts_path)? {
        if line == "row,col,count" {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(format_err(&counts_path, format!("bad triplet: {line}")));
        }
        let row: usize = parts[0]
            .parse()
            .map_err(|_| format_err(&counts_path, format!("bad triplet: {line}")))?;
        let col: u32 = parts[1]
            .parse()
            .map_err(|_| format_err(&counts_path, format!("bad triplet: {line}")))?;
        let count: u32 = parts[2]
            .parse()
            .map_err(|_| format_err(&counts_path, format!("bad triplet: {line}")))?;
        if row >= rows.len() || col as usize >= vocabulary.len() {
            return Err(format_err(
                &counts_path,
                format!("index out of range: {line}"),
            ));
        }
        rows[row].push((col, count));
    }
    let corpus = SessionCorpus {
        session,
        counts: SparseCounts {
            n_rows: rows.len(),
            n_cols: vocabulary.len(),
            rows,
        },
        vocabulary,
        doc_speaker,
        speakers,
    };
    corpus
        .check_invariants()
        .map_err(|m| format_err(&counts_path, m))?;
    Ok(corpus)
}

/// Sessions with corpus files present in `dir`, ascending.
pub fn list_corpus_sessions(dir: &Path) -> Result<Vec<u32>, PersistError> {
    let mut sessions = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name
            .strip_prefix("session_")
            .and_then(|r| r.strip_suffix(".vocab.txt"))
        {
            if let Ok(session) = rest.parse::<u32>() {
                sessions.push(session);
            }
        }
    }
    sessions.sort_unstable();
    Ok(sessions)
}

// ---------------------------------------------------------------------------
// Fit files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct FitFile {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub session: u32,
    pub n_docs: usize,
    pub n_topics: usize,
    pub n_terms: usize,
    pub n_speakers: usize,
    pub speakers: Vec<(String, Party)>,
    pub doc_topic_loc: MatrixDto,
    pub doc_topic_log_scale: MatrixDto,
    pub topic_term_loc: MatrixDto,
    pub topic_term_log_scale: MatrixDto,
    pub polarity_loc: MatrixDto,
    pub polarity_log_scale: MatrixDto,
    pub ideal_loc: Vec<f64>,
    pub ideal_log_scale: Vec<f64>,
    pub mean_doc_topic: MatrixDto,
    pub mean_topic_term: MatrixDto,
    pub mean_polarity: MatrixDto,
    pub mean_ideal: Vec<f64>,
    pub elbo_trace: Vec<(u64, f64)>,
    pub clamp_events: u64,
}

pub fn fit_file_name(session: u32) -> String {
    format!("session_{session:03}.fit.json")
}

pub fn write_session_fit(
    dir: &Path,
    corpus: &SessionCorpus,
    fit: &SessionFit,
    stamp: &Stamp,
) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file = FitFile {
        version: VERSION.to_owned(),
        config_hash: format!("{:016x}", stamp.config_hash),
        seed: stamp.seed,
        session: corpus.session,
        n_docs: corpus.n_docs(),
        n_topics: fit.params.n_topics(),
        n_terms: corpus.n_terms(),
        n_speakers: corpus.n_speakers(),
        speakers: corpus
            .speakers
            .iter()
            .map(|s| (s.id.clone(), s.party))
            .collect(),
        doc_topic_loc: MatrixDto::from_array(&fit.state.doc_topic_loc),
        doc_topic_log_scale: MatrixDto::from_array(&fit.state.doc_topic_log_scale),
        topic_term_loc: MatrixDto::from_array(&fit.state.topic_term_loc),
        topic_term_log_scale: MatrixDto::from_array(&fit.state.topic_term_log_scale),
        polarity_loc: MatrixDto::from_array(&fit.state.polarity_loc),
        polarity_log_scale: MatrixDto::from_array(&fit.state.polarity_log_scale),
        ideal_loc: fit.state.ideal_loc.to_vec(),
        ideal_log_scale: fit.state.ideal_log_scale.to_vec(),
        mean_doc_topic: MatrixDto::from_array(&fit.params.doc_topic),
        mean_topic_term: MatrixDto::from_array(&fit.params.topic_term),
        mean_polarity: MatrixDto::from_array(&fit.params.polarity),
        mean_ideal: fit.params.ideal.to_vec(),
        elbo_trace: fit.elbo_trace.clone(),
        clamp_events: fit.clamp_events,
    };
    let path = dir.join(fit_file_name(corpus.session));
    write_json(&path, &file)
}

pub fn read_session_fit(dir: &Path, session: u32) -> Result<(SessionFit, FitFile), PersistError> {
    let path = dir.join(fit_file_name(session));
    let file: FitFile = read_json(&path)?;
    let arr = |m: &MatrixDto| m.to_array().map_err(|e| format_err(&path, e));
    let state = VariationalState {
        doc_topic_loc: arr(&file.doc_topic_loc)?,
        doc_topic_log_scale: arr(&file.doc_topic_log_scale)?,
        topic_term_loc: arr(&file.topic_term_loc)?,
        topic_term_log_scale: arr(&file.topic_term_log_scale)?,
        polarity_loc: arr(&file.polarity_loc)?,
        polarity_log_scale: arr(&file.polarity_log_scale)?,
        ideal_loc: Array1::from_vec(file.ideal_loc.clone()),
        ideal_log_scale: Array1::from_vec(file.ideal_log_scale.clone()),
    };
    let params = SessionParams {
        doc_topic: arr(&file.mean_doc_topic)?,
        topic_term: arr(&file.mean_topic_term)?,
        polarity: arr(&file.mean_polarity)?,
        ideal: Array1::from_vec(file.mean_ideal.clone()),
    };
    Ok((
        SessionFit {
            state,
            params,
            elbo_trace: file.elbo_trace.clone(),
            clamp_events: file.clamp_events,
        },
        file,
    ))
}

// ---------------------------------------------------------------------------
// Chain manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestSession {
    pub session: u32,
    pub fit_file: String,
    pub n_docs: usize,
    pub n_terms: usize,
    pub n_speakers: usize,
    pub final_smoothed_elbo: Option<f64>,
    pub clamp_events: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestAlignment {
    pub from_session: u32,
    pub to_session: u32,
    pub carried: usize,
    pub added: usize,
    pub dropped: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub sessions: Vec<ManifestSession>,
    pub alignments: Vec<ManifestAlignment>,
}

pub fn write_manifest(
    dir: &Path,
    chain: &ChainResult,
    corpora: &[SessionCorpus],
    stamp: &Stamp,
) -> Result<(), PersistError> {
    let sessions = chain
        .fits
        .iter()
        .zip(corpora)
        .map(|(fit, corpus)| ManifestSession {
            session: corpus.session,
            fit_file: fit_file_name(corpus.session),
            n_docs: corpus.n_docs(),
            n_terms: corpus.n_terms(),
            n_speakers: corpus.n_speakers(),
            final_smoothed_elbo: fit.elbo_trace.last().map(|&(_, e)| e),
            clamp_events: fit.clamp_events,
        })
        .collect();
    let alignments = chain
        .alignments
        .iter()
        .enumerate()
        .map(|(i, a)| ManifestAlignment {
            from_session: chain.sessions[i],
            to_session: chain.sessions[i + 1],
            carried: a.carried.len(),
            added: a.added.len(),
            dropped: a.dropped.len(),
        })
        .collect();
    let manifest = Manifest {
        version: VERSION.to_owned(),
        config_hash: format!("{:016x}", stamp.config_hash),
        seed: stamp.seed,
        sessions,
        alignments,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, PersistError> {
    read_json(&dir.join("manifest.json"))
}

// ---------------------------------------------------------------------------
// Synthetic truth
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthSession {
    pub session: u32,
    pub doc_topic: MatrixDto,
    pub topic_term: MatrixDto,
    pub polarity: MatrixDto,
    pub ideal: Vec<f64>,
    pub party_of: Vec<Party>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub sessions: Vec<TruthSession>,
}

pub fn write_truth(dir: &Path, truth: &SyntheticTruth, stamp: &Stamp) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sessions = truth
        .params
        .iter()
        .zip(&truth.party_of)
        .enumerate()
        .map(|(i, (p, parties))| TruthSession {
            session: (i + 1) as u32,
            doc_topic: MatrixDto::from_array(&p.doc_topic),
            topic_term: MatrixDto::from_array(&p.topic_term),
            polarity: MatrixDto::from_array(&p.polarity),
            ideal: p.ideal.to_vec(),
            party_of: parties.clone(),
        })
        .collect();
    let file = TruthFile {
        version: VERSION.to_owned(),
        config_hash: format!("{:016x}", stamp.config_hash),
        seed: truth.seed,
        scenario: truth.scenario.clone(),
        sessions,
    };
    write_json(&dir.join("truth.json"), &file)
}

pub fn read_truth(dir: &Path) -> Result<SyntheticTruth, PersistError> {
    let path = dir.join("truth.json");
    let file: TruthFile = read_json(&path)?;
    let mut params = Vec::new();
    let mut party_of = Vec::new();
    for s in &file.sessions {
        params.push(SessionParams {
            doc_topic: s.doc_topic.to_array().map_err(|e| format_err(&path, e))?,
            topic_term: s.topic_term.to_array().map_err(|e| format_err(&path, e))?,
            polarity: s.polarity.to_array().map_err(|e| format_err(&path, e))?,
            ideal: Array1::from_vec(s.ideal.clone()),
        });
        party_of.push(s.party_of.clone());
    }
    Ok(SyntheticTruth {
        scenario: file.scenario,
        seed: file.seed,
        params,
        party_of,
    })
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

/// Writes a CSV with the provenance header, a column-name line, and rows.
pub fn write_csv(
    path: &Path,
    stamp: &Stamp,
    columns: &str,
    rows: &[String],
) -> Result<(), PersistError> {
    let mut out = String::new();
    writeln!(out, "{}", stamp.header_line()).unwrap();
    writeln!(out, "{columns}").unwrap();
    for row in rows {
        writeln!(out, "{row}").unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads an external score file: either `session,score` (a pre-aggregated
/// gap) or `session,speaker_id,score` (per speaker). Header lines with
/// non-numeric first field are skipped.
pub enum ExternalScores {
    Gap(BTreeMap<u32, f64>),
    PerSpeaker(Vec<(u32, String, f64)>),
}

pub fn read_external_scores(path: &Path) -> Result<ExternalScores, PersistError> {
    let mut gap = BTreeMap::new();
    let mut per_speaker = Vec::new();
    let mut width: Option<usize> = None;
    for line in data_lines(path)? {
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts[0].parse::<u32>().is_err() {
            continue; // header
        }
        let w = *width.get_or_insert(parts.len());
        if parts.len() != w {
            return Err(format_err(path, format!("inconsistent columns: {line}")));
        }
        match w {
            2 => {
                let session = parts[0].parse::<u32>().unwrap();
                let score: f64 = parts[1]
                    .parse()
                    .map_err(|_| format_err(path, format!("bad score: {line}")))?;
                gap.insert(session, score);
            }
            3 => {
                let session = parts[0].parse::<u32>().unwrap();
                let score: f64 = parts[2]
                    .parse()
                    .map_err(|_| format_err(path, format!("bad score: {line}")))?;
                per_speaker.push((session, parts[1].to_owned(), score));
            }
            _ => return Err(format_err(path, format!("expected 2 or 3 columns: {line}"))),
        }
    }
    match width {
        Some(2) => Ok(ExternalScores::Gap(gap)),
        Some(3) => Ok(ExternalScores::PerSpeaker(per_speaker)),
        _ => Err(format_err(path, "no score rows")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Party;

    #[test]
    fn json_floats_have_17_significant_digits() {
        let json = to_json_string(&vec![std::f64::consts::PI, 2.0, 1e-300]);
        assert!(json.contains("3.1415926535897931e0"));
        assert!(json.contains("2.0000000000000000e0"));
        assert!(json.contains("1.0000000000000000e-300"));
    }

    #[test]
    fn json_floats_roundtrip_exactly() {
        let values = vec![
            std::f64::consts::PI,
            -1.0 / 3.0,
            f64::MIN_POSITIVE,
            6.02214076e23,
            -0.0,
        ];
        let json = to_json_string(&values);
        let back: Vec<f64> = serde_json::from_str(&json).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SessionCorpus {
            session: 7,
            vocabulary: vec!["a b".into(), "c d".into()],
            counts: SparseCounts {
                n_rows: 2,
                n_cols: 2,
                rows: vec![vec![(0, 3)], vec![(0, 1), (1, 2)]],
            },
            doc_speaker: vec![1, 0],
            speakers: vec![
                Speaker {
                    id: "alice".into(),
                    name: "alice".into(),
                    party: Party::D,
                },
                Speaker {
                    id: "bob".into(),
                    name: "bob".into(),
                    party: Party::R,
                },
            ],
        };
        let stamp = Stamp {
            config_hash: 0xabc,
            seed: 5,
        };
        write_session_corpus(dir.path(), &corpus, &stamp).unwrap();
        let back = read_session_corpus(dir.path(), 7).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(list_corpus_sessions(dir.path()).unwrap(), vec![7]);
    }

    #[test]
    fn fit_roundtrip_is_bitwise() {
        use crate::inference::{posterior_means, SessionFit, VariationalState};
        let dir = tempfile::tempdir().unwrap();
        let corpus = SessionCorpus {
            session: 3,
            vocabulary: vec!["a b".into(), "c d".into(), "e f".into()],
            counts: SparseCounts {
                n_rows: 2,
                n_cols: 3,
                rows: vec![vec![(0, 1), (2, 4)], vec![(1, 2)]],
            },
            doc_speaker: vec![0, 1],
            speakers: vec![
                Speaker {
                    id: "a".into(),
                    name: "a".into(),
                    party: Party::D,
                },
                Speaker {
                    id: "b".into(),
                    name: "b".into(),
                    party: Party::I,
                },
            ],
        };
        let mut state = VariationalState::zeros(2, 2, 3, 2);
        // awkward values: thirds, tiny magnitudes, negatives
        for (i, block) in state.blocks_mut().into_iter().enumerate() {
            for (j, v) in block.iter_mut().enumerate() {
                *v = ((i + 1) as f64 / 3.0) * (-1f64).powi(j as i32) + 1e-13 * j as f64;
            }
        }
        let params = posterior_means(&state);
        let fit = SessionFit {
            state,
            params,
            elbo_trace: vec![(100, -1.0 / 3.0), (200, 0.125)],
            clamp_events: 7,
        };
        let stamp = Stamp {
            config_hash: 1,
            seed: 2,
        };
        write_session_fit(dir.path(), &corpus, &fit, &stamp).unwrap();
        let (back, file) = read_session_fit(dir.path(), 3).unwrap();
        assert_eq!(back.state, fit.state);
        assert_eq!(back.params, fit.params);
        assert_eq!(back.elbo_trace, fit.elbo_trace);
        assert_eq!(back.clamp_events, 7);
        assert_eq!(file.speakers.len(), 2);
    }

    #[test]
    fn external_scores_two_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, "session,score\n1,0.5\n2,0.75\n").unwrap();
        match read_external_scores(&path).unwrap() {
            ExternalScores::Gap(g) => {
                assert_eq!(g.len(), 2);
                assert_eq!(g[&2], 0.75);
            }
            _ => panic!("expected gap form"),
        }
    }

    #[test]
    fn external_scores_three_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, "session,speaker_id,score\n1,alice,-0.3\n").unwrap();
        match read_external_scores(&path).unwrap() {
            ExternalScores::PerSpeaker(rows) => {
                assert_eq!(rows, vec![(1, "alice".to_string(), -0.3)]);
            }
            _ => panic!("expected per-speaker form"),
        }
    }
}
