//! Synthetic corpora with known truth, and recovery scoring against it.
//!
//! The generator runs the model forward: topic weights and term intensities
//! from the sparse Gamma prior, polarity adjustments from the standard
//! normal, ideal points at `±gap/2` by party plus a little noise, counts
//! Poisson. Multi-session scenarios perturb the log intensities and the
//! polarities with i.i.d. drift noise while speakers persist, so chained
//! fits can be scored for orientation and topic stability.
//!
//! Scoring is deliberately invariant to the model's symmetries: topics are
//! matched greedily by cosine, ideal points and polarities are compared
//! only after a global sign alignment, and scales are never compared
//! directly (the likelihood is unchanged by rescaling a topic's weights
//! against its intensities).

#![allow(clippy::needless_range_loop)]

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{greedy_match, partisanship, pearson};
use crate::chain::ChainResult;
use crate::corpus::{Party, SessionCorpus, SparseCounts, Speaker};
use crate::model::SessionParams;

/// Standard deviation of speaker ideal points around their party center.
pub const IDEAL_NOISE_SD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Generation settings for one synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub n_topics: usize,
    pub n_terms: usize,
    pub n_docs: usize,
    pub n_speakers: usize,
    pub n_sessions: usize,
    /// Gap between the party centers on the latent scale (Δ).
    pub polarization: f64,
    /// Standard deviation of the per-session perturbation applied to log
    /// intensities and polarities.
    pub drift: f64,
    /// Gamma shape/rate for the positive blocks.
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl Scenario {
    /// Single-session recovery benchmark.
    pub fn standard() -> Self {
        Scenario {
            name: "standard".into(),
            n_topics: 3,
            n_terms: 200,
            n_docs: 400,
            n_speakers: 20,
            n_sessions: 1,
            polarization: 2.0,
            drift: 0.0,
            gamma_shape: 0.3,
            gamma_rate: 0.3,
        }
    }

    /// Two-session chain benchmark with mild topic drift.
    pub fn chain() -> Self {
        Scenario {
            name: "chain".into(),
            n_sessions: 2,
            drift: 0.05,
            ..Scenario::standard()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(Scenario::standard()),
            "chain" => Some(Scenario::chain()),
            _ => None,
        }
    }
}

/// Ground truth saved next to generated corpora.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub scenario: Scenario,
    pub seed: u64,
    /// Per session, aligned to that session's corpus (rows and columns that
    /// generated no counts are dropped from both).
    pub params: Vec<SessionParams>,
    /// Per session, party of each retained speaker (corpus speaker order).
    pub party_of: Vec<Vec<Party>>,
}

/// Draws one Poisson count row per document given session parameters.
/// Exposed so tests can check the count distribution against the rate.
pub fn draw_session_counts(
    params: &SessionParams,
    doc_speaker: &[u32],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(u32, u32)>> {
    let (n_docs, k) = params.doc_topic.dim();
    let v = params.topic_term.ncols();
    assert_eq!(n_docs, doc_speaker.len());
    let mut rows = Vec::with_capacity(n_docs);
    for doc in 0..n_docs {
        let x = params.ideal[doc_speaker[doc] as usize];
        let mut row = Vec::new();
        for term in 0..v {
            let mut rate = 0.0;
            for topic in 0..k {
                rate += params.doc_topic[[doc, topic]]
                    * params.topic_term[[topic, term]]
                    * (x * params.polarity[[topic, term]]).exp();
            }
            let count = Poisson::new(rate).map_or(0, |p| p.sample(rng) as u64) as u32;
            if count > 0 {
                row.push((term as u32, count));
            }
        }
        rows.push(row);
    }
    rows
}

fn synthetic_term_name(i: usize) -> String {
    format!("term{i:05} x")
}

fn synthetic_speaker_id(i: usize) -> String {
    format!("spk{i:04}")
}

/// Generates corpora and truth for a scenario. Reproducible from the seed.
pub fn generate_corpus(scenario: &Scenario, seed: u64) -> (Vec<SessionCorpus>, SyntheticTruth) {
    assert!(scenario.n_topics >= 1 && scenario.n_terms >= 1);
    assert!(scenario.n_docs >= 1 && scenario.n_speakers >= 1 && scenario.n_sessions >= 1);
    assert!(scenario.polarization >= 0.0 && scenario.drift >= 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = scenario.n_topics;
    let v = scenario.n_terms;
    let gamma = Gamma::new(scenario.gamma_shape, 1.0 / scenario.gamma_rate).unwrap();
    let ideal_noise = Normal::new(0.0, IDEAL_NOISE_SD).unwrap();

    // Alternate parties so both are populated for any speaker count >= 2.
    let parties: Vec<Party> = (0..scenario.n_speakers)
        .map(|s| if s % 2 == 0 { Party::D } else { Party::R })
        .collect();
    let centers: Vec<f64> = parties
        .iter()
        .map(|p| match p {
            Party::D => scenario.polarization / 2.0,
            _ => -scenario.polarization / 2.0,
        })
        .collect();

    // Full-vocabulary intensities persist across sessions with drift.
    let mut log_beta = Array2::from_shape_fn((k, v), |_| gamma.sample(&mut rng).max(1e-12).ln());
    let mut eta = Array2::from_shape_fn((k, v), |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });

    let mut corpora = Vec::with_capacity(scenario.n_sessions);
    let mut truth_params = Vec::with_capacity(scenario.n_sessions);
    let mut truth_parties = Vec::with_capacity(scenario.n_sessions);

    for session_idx in 0..scenario.n_sessions {
        if session_idx > 0 && scenario.drift > 0.0 {
            let drift = Normal::new(0.0, scenario.drift).unwrap();
            log_beta.mapv_inplace(|b| b + drift.sample(&mut rng));
            eta.mapv_inplace(|e| e + drift.sample(&mut rng));
        }
        let beta = log_beta.mapv(f64::exp);
        let theta =
            Array2::from_shape_fn((scenario.n_docs, k), |_| gamma.sample(&mut rng).max(1e-12));
        let ideal = Array1::from_shape_fn(scenario.n_speakers, |s| {
            centers[s] + ideal_noise.sample(&mut rng)
        });
        let doc_speaker: Vec<u32> = (0..scenario.n_docs)
            .map(|d| (d % scenario.n_speakers) as u32)
            .collect();
        let full = SessionParams {
            doc_topic: theta,
            topic_term: beta,
            polarity: eta.clone(),
            ideal,
        };
        let rows = draw_session_counts(&full, &doc_speaker, &mut rng);

        // Drop rows and columns that generated nothing, keeping the truth
        // aligned with the surviving corpus.
        let kept_docs: Vec<usize> = (0..scenario.n_docs)
            .filter(|&d| !rows[d].is_empty())
            .collect();
        let mut col_used = vec![false; v];
        for d in &kept_docs {
            for &(term, _) in &rows[*d] {
                col_used[term as usize] = true;
            }
        }
        let kept_terms: Vec<usize> = (0..v).filter(|&t| col_used[t]).collect();
        let col_map: std::collections::HashMap<usize, u32> = kept_terms
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new as u32))
            .collect();

        let kept_speakers: Vec<usize> = {
            let mut used = vec![false; scenario.n_speakers];
            for &d in &kept_docs {
                used[doc_speaker[d] as usize] = true;
            }
            (0..scenario.n_speakers).filter(|&s| used[s]).collect()
        };
        let speaker_map: std::collections::HashMap<usize, u32> = kept_speakers
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new as u32))
            .collect();

        let sparse_rows: Vec<Vec<(u32, u32)>> = kept_docs
            .iter()
            .map(|&d| {
                rows[d]
                    .iter()
                    .map(|&(term, count)| (col_map[&(term as usize)], count))
                    .collect()
            })
            .collect();
        let corpus = SessionCorpus {
            session: (session_idx + 1) as u32,
            vocabulary: kept_terms.iter().map(|&t| synthetic_term_name(t)).collect(),
            counts: SparseCounts {
                n_rows: kept_docs.len(),
                n_cols: kept_terms.len(),
                rows: sparse_rows,
            },
            doc_speaker: kept_docs
                .iter()
                .map(|&d| speaker_map[&(doc_speaker[d] as usize)])
                .collect(),
            speakers: kept_speakers
                .iter()
                .map(|&s| Speaker {
                    id: synthetic_speaker_id(s),
                    name: synthetic_speaker_id(s),
                    party: parties[s],
                })
                .collect(),
        };
        debug_assert_eq!(corpus.check_invariants(), Ok(()));

        let restricted = SessionParams {
            doc_topic: full.doc_topic.select(ndarray::Axis(0), &kept_docs),
            topic_term: full.topic_term.select(ndarray::Axis(1), &kept_terms),
            polarity: full.polarity.select(ndarray::Axis(1), &kept_terms),
            ideal: Array1::from_iter(kept_speakers.iter().map(|&s| full.ideal[s])),
        };
        truth_parties.push(kept_speakers.iter().map(|&s| parties[s]).collect());
        truth_params.push(restricted);
        corpora.push(corpus);
    }

    let truth = SyntheticTruth {
        scenario: scenario.clone(),
        seed,
        params: truth_params,
        party_of: truth_parties,
    };
    (corpora, truth)
}

/// Recovery metrics for one fitted session.
#[derive(Debug, Clone, Serialize)]
pub struct SessionRecovery {
    pub session: u32,
    /// Fitted topic matched to each true topic, by greedy cosine.
    pub topic_permutation: Vec<usize>,
    pub mean_topic_cosine: f64,
    /// Pearson correlation of ideal points after global sign alignment.
    pub ideal_correlation: f64,
    /// Whether the fitted scale had to be flipped to match the truth.
    pub sign_flipped: bool,
    /// |π̄_fit − Δ| / Δ; absent when the scenario has no polarization.
    pub partisanship_rel_error: Option<f64>,
    /// Mean matched cosine of sign-aligned polarity rows.
    pub polarity_cosine: f64,
}

/// Scores a fitted chain against the generating truth.
pub fn recovery_report(
    fit: &ChainResult,
    truth: &SyntheticTruth,
) -> Result<Vec<SessionRecovery>, SynthError> {
    if fit.fits.len() != truth.params.len() {
        return Err(SynthError::DimensionMismatch(format!(
            "{} fitted sessions vs {} truth sessions",
            fit.fits.len(),
            truth.params.len()
        )));
    }
    let mut out = Vec::with_capacity(fit.fits.len());
    for (idx, session_fit) in fit.fits.iter().enumerate() {
        let fitted = &session_fit.params;
        let true_params = &truth.params[idx];
        let parties = &truth.party_of[idx];
        let k = true_params.n_topics();
        if fitted.n_topics() != k
            || fitted.n_terms() != true_params.n_terms()
            || fitted.ideal.len() != true_params.ideal.len()
        {
            return Err(SynthError::DimensionMismatch(format!(
                "session index {idx}: fitted dims differ from truth"
            )));
        }

        // Topic matching: rows = true topics, columns = fitted topics.
        let mut sim = Array2::zeros((k, k));
        for t in 0..k {
            for f in 0..k {
                let a: Vec<f64> = true_params.topic_term.row(t).to_vec();
                let b: Vec<f64> = fitted.topic_term.row(f).to_vec();
                sim[[t, f]] = crate::analysis::cosine(&a, &b).unwrap_or(0.0);
            }
        }
        let perm = greedy_match(&sim);
        let mean_topic_cosine = (0..k).map(|t| sim[[t, perm[t]]]).sum::<f64>() / k as f64;

        // Sign alignment from the ideal points.
        let xs_true: Vec<f64> = true_params.ideal.to_vec();
        let xs_fit: Vec<f64> = fitted.ideal.to_vec();
        let raw_corr = pearson(&xs_fit, &xs_true);
        let sign_flipped = raw_corr < 0.0;
        let flip = if sign_flipped { -1.0 } else { 1.0 };
        let ideal_correlation = flip * raw_corr;

        // Polarity rows: matched topics, fitted row sign-aligned with x.
        let mut polarity_cosine = 0.0;
        for t in 0..k {
            let a: Vec<f64> = true_params.polarity.row(t).to_vec();
            let b: Vec<f64> = fitted
                .polarity
                .row(perm[t])
                .iter()
                .map(|&e| flip * e)
                .collect();
            polarity_cosine += crate::analysis::cosine(&a, &b).unwrap_or(0.0);
        }
        polarity_cosine /= k as f64;

        let partisanship_rel_error = if truth.scenario.polarization > 0.0 {
            let point = partisanship(fit.sessions[idx], &xs_fit, parties)
                .map_err(|e| SynthError::DimensionMismatch(e.to_string()))?;
            Some((point.pi_bar - truth.scenario.polarization).abs() / truth.scenario.polarization)
        } else {
            None
        };

        out.push(SessionRecovery {
            session: fit.sessions[idx],
            topic_permutation: perm,
            mean_topic_cosine,
            ideal_correlation,
            sign_flipped,
            partisanship_rel_error,
            polarity_cosine,
        });
    }
    Ok(out)
}
