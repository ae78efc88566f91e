//! Cross-session orchestration.
//!
//! Session 1 is initialized from an NMF factorization of its own counts.
//! Every later session starts from the previous session's posterior means:
//! carried terms inherit the previous intensity (logged) and polarity
//! locations; newly added terms start at the per-topic median intensity
//! and zero polarity; document weights come from an NMF solve against the
//! carried basis. Carrying the polarity forward keeps the latent scale
//! oriented the same way across sessions, so a speaker's sign does not
//! flip from one fit to the next. Ideal points are not carried; returning
//! speakers restart at the prior mean.

use ndarray::Array2;
use thiserror::Error;

use crate::corpus::{align_vocabulary, SessionCorpus, VocabAlignment};
use crate::derive_seed;
use crate::inference::{
    fit_session, init_variational, CarriedInit, FitConfig, InferenceError, SessionFit,
    VariationalState,
};
use crate::nmf::{nmf_factorize, nmf_transform, row_medians, NmfError};

/// Multiplicative-update rounds for the first session's factorization.
pub const NMF_FACTORIZE_ITERS: usize = 2000;
/// Rounds for fixed-basis solves in chained sessions.
pub const NMF_TRANSFORM_ITERS: usize = 500;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("previous fit has {prev} topics, config asks for {cfg}")]
    TopicCountMismatch { prev: usize, cfg: usize },
    #[error("session {session}: {source}")]
    Nmf {
        session: u32,
        #[source]
        source: NmfError,
    },
    #[error("session {session}: {source}")]
    Inference {
        session: u32,
        #[source]
        source: InferenceError,
    },
    #[error("chain needs at least one session")]
    Empty,
}

/// Fits for a sequence of sessions plus the vocabulary links between them.
#[derive(Debug)]
pub struct ChainResult {
    pub sessions: Vec<u32>,
    pub fits: Vec<SessionFit>,
    /// `alignments[i]` links the vocabularies of `sessions[i]` and
    /// `sessions[i + 1]`.
    pub alignments: Vec<VocabAlignment>,
}

/// Seeds for the NMF initialization and the variational fit of the i-th
/// session in a chain, both derived from the master seed.
pub fn session_seeds(master: u64, session_index: usize) -> (u64, u64) {
    (
        derive_seed(master, 2 * session_index as u64),
        derive_seed(master, 2 * session_index as u64 + 1),
    )
}

/// Builds the initial variational state for a session from the previous
/// session's fit.
///
/// Returns the state together with the vocabulary alignment used. The
/// previous posterior means feed three places: carried term-intensity
/// locations (logged), carried polarity locations, and the fixed basis of
/// the NMF solve that seeds the document weights.
pub fn carry_forward_init(
    prev_fit: &SessionFit,
    prev_vocab: &[String],
    next_corpus: &SessionCorpus,
    cfg: &FitConfig,
    nmf_seed: u64,
) -> Result<(VariationalState, VocabAlignment), ChainError> {
    let k = prev_fit.params.n_topics();
    if k != cfg.n_topics {
        return Err(ChainError::TopicCountMismatch {
            prev: k,
            cfg: cfg.n_topics,
        });
    }
    let alignment = align_vocabulary(prev_vocab, &next_corpus.vocabulary);
    let v_new = next_corpus.n_terms();
    let prev_beta = &prev_fit.params.topic_term;
    let prev_eta = &prev_fit.params.polarity;

    // Per-topic fill value for terms with no carried intensity: the median
    // of the carried means (all previous means if nothing carried).
    let medians: Vec<f64> = if alignment.carried.is_empty() {
        row_medians(prev_beta)
    } else {
        let carried_cols: Vec<usize> = alignment.carried.values().copied().collect();
        let sub = prev_beta.select(ndarray::Axis(1), &carried_cols);
        row_medians(&sub)
    };

    let mut basis = Array2::zeros((k, v_new));
    let mut polarity_loc = Array2::zeros((k, v_new));
    for term in 0..v_new {
        match alignment.carried.get(&term) {
            Some(&prev_term) => {
                for topic in 0..k {
                    basis[[topic, term]] = prev_beta[[topic, prev_term]];
                    polarity_loc[[topic, term]] = prev_eta[[topic, prev_term]];
                }
            }
            None => {
                for topic in 0..k {
                    basis[[topic, term]] = medians[topic];
                    // polarity stays at the prior mean zero
                }
            }
        }
    }

    let nmf_res = nmf_transform(&next_corpus.counts, &basis, NMF_TRANSFORM_ITERS, nmf_seed)
        .map_err(|source| ChainError::Nmf {
            session: next_corpus.session,
            source,
        })?;
    let carried = CarriedInit {
        topic_term_loc: basis.mapv(|b| b.max(f64::MIN_POSITIVE).ln()),
        polarity_loc,
    };
    let state = init_variational(next_corpus, cfg, &nmf_res, Some(&carried)).map_err(|source| {
        ChainError::Inference {
            session: next_corpus.session,
            source,
        }
    })?;
    Ok((state, alignment))
}

/// Fits every session in order, chaining initializations.
pub fn fit_chain(corpora: &[SessionCorpus], cfg: &FitConfig) -> Result<ChainResult, ChainError> {
    if corpora.is_empty() {
        return Err(ChainError::Empty);
    }
    let mut fits: Vec<SessionFit> = Vec::with_capacity(corpora.len());
    let mut alignments = Vec::new();
    for (index, corpus) in corpora.iter().enumerate() {
        let (nmf_seed, fit_seed) = session_seeds(cfg.seed, index);
        let session_cfg = FitConfig {
            seed: fit_seed,
            ..cfg.clone()
        };
        let state = if index == 0 {
            let nmf_res =
                nmf_factorize(&corpus.counts, cfg.n_topics, NMF_FACTORIZE_ITERS, nmf_seed)
                    .map_err(|source| ChainError::Nmf {
                        session: corpus.session,
                        source,
                    })?;
            init_variational(corpus, &session_cfg, &nmf_res, None).map_err(|source| {
                ChainError::Inference {
                    session: corpus.session,
                    source,
                }
            })?
        } else {
            let (state, alignment) = carry_forward_init(
                &fits[index - 1],
                &corpora[index - 1].vocabulary,
                corpus,
                cfg,
                nmf_seed,
            )?;
            alignments.push(alignment);
            state
        };
        log::info!(
            "chain: fitting session {} ({} docs)",
            corpus.session,
            corpus.n_docs()
        );
        let fit =
            fit_session(corpus, &session_cfg, state).map_err(|source| ChainError::Inference {
                session: corpus.session,
                source,
            })?;
        fits.push(fit);
    }
    Ok(ChainResult {
        sessions: corpora.iter().map(|c| c.session).collect(),
        fits,
        alignments,
    })
}

/// Stability of one chain link: how the fitted topics and the latent scale
/// of consecutive sessions relate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LinkConsistency {
    pub from_session: u32,
    pub to_session: u32,
    /// Greedy cosine assignment of next-session topics to previous ones.
    pub topic_permutation: Vec<usize>,
    pub identity_permutation: bool,
    pub mean_matched_cosine: f64,
    pub shared_speakers: usize,
    /// Pearson correlation of shared speakers' ideal points, if >= 2 shared.
    pub ideal_correlation: Option<f64>,
}

/// Compares consecutive fits: topic matching over the carried vocabulary
/// and ideal-point correlation over shared speakers.
pub fn consistency_report(chain: &ChainResult, corpora: &[SessionCorpus]) -> Vec<LinkConsistency> {
    use crate::analysis::{greedy_match, pearson};
    let mut links = Vec::new();
    for i in 0..chain.fits.len().saturating_sub(1) {
        let alignment = &chain.alignments[i];
        let prev = &chain.fits[i].params;
        let next = &chain.fits[i + 1].params;
        let k = prev.n_topics();

        // Restrict both intensity matrices to carried terms.
        let n_carried = alignment.carried.len();
        let mut sim = Array2::zeros((k, k));
        for a in 0..k {
            for b in 0..k {
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for (&new_term, &prev_term) in &alignment.carried {
                    let x = prev.topic_term[[a, prev_term]];
                    let y = next.topic_term[[b, new_term]];
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                sim[[a, b]] = if n_carried == 0 || na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na.sqrt() * nb.sqrt())
                };
            }
        }
        let perm = greedy_match(&sim);
        let mean_cos = (0..k).map(|a| sim[[a, perm[a]]]).sum::<f64>() / k as f64;

        // Shared speakers by id.
        let prev_ids: std::collections::HashMap<&str, usize> = corpora[i]
            .speakers
            .iter()
            .enumerate()
            .map(|(idx, s)| (s.id.as_str(), idx))
            .collect();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (idx, s) in corpora[i + 1].speakers.iter().enumerate() {
            if let Some(&pidx) = prev_ids.get(s.id.as_str()) {
                xs.push(prev.ideal[pidx]);
                ys.push(next.ideal[idx]);
            }
        }
        let ideal_correlation = (xs.len() >= 2).then(|| pearson(&xs, &ys));

        links.push(LinkConsistency {
            from_session: chain.sessions[i],
            to_session: chain.sessions[i + 1],
            identity_permutation: perm.iter().enumerate().all(|(a, &b)| a == b),
            topic_permutation: perm,
            mean_matched_cosine: mean_cos,
            shared_speakers: xs.len(),
            ideal_correlation,
        });
    }
    links
}
