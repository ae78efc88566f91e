//! Downstream quantities computed from fitted parameters.
//!
//! Everything here is plain arithmetic over posterior means: the aggregate
//! partisanship series with normal-approximation confidence bands, cosine
//! similarity of topics across sessions and across polarity, top-term
//! tables at a chosen ideal point, per-speaker five-number summaries, and
//! the correlation against an external score series.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Party, VocabAlignment};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no {0:?} speakers with ideal point estimates")]
    MissingParty(Party),
    #[error("restricted intensity row for topic {0} is all zero")]
    ZeroVector(usize),
    #[error("only {0} overlapping sessions, need at least 3")]
    InsufficientOverlap(usize),
}

/// Aggregate partisanship for one session.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PartisanshipPoint {
    pub session: u32,
    /// Absolute difference of party-mean ideal points.
    pub pi_bar: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_r: usize,
    pub n_d: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance; zero for a single observation, which collapses
/// that party's contribution to the confidence band.
fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Absolute difference of Republican and Democrat mean ideal points, with
/// an approximate 95% confidence interval from the two-sample standard
/// error of the difference. Independents are excluded.
pub fn partisanship(
    session: u32,
    ideal: &[f64],
    parties: &[Party],
) -> Result<PartisanshipPoint, AnalysisError> {
    assert_eq!(ideal.len(), parties.len());
    let collect = |p: Party| -> Vec<f64> {
        ideal
            .iter()
            .zip(parties)
            .filter(|(_, &q)| q == p)
            .map(|(&x, _)| x)
            .collect()
    };
    let rs = collect(Party::R);
    let ds = collect(Party::D);
    if rs.is_empty() {
        return Err(AnalysisError::MissingParty(Party::R));
    }
    if ds.is_empty() {
        return Err(AnalysisError::MissingParty(Party::D));
    }
    let pi_bar = (mean(&rs) - mean(&ds)).abs();
    let se =
        (sample_variance(&rs) / rs.len() as f64 + sample_variance(&ds) / ds.len() as f64).sqrt();
    Ok(PartisanshipPoint {
        session,
        pi_bar,
        ci_low: (pi_bar - 1.96 * se).max(0.0),
        ci_high: pi_bar + 1.96 * se,
        n_r: rs.len(),
        n_d: ds.len(),
    })
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Per-topic cosine similarity of term intensities across two consecutive
/// sessions, restricted to the carried vocabulary (cosine is undefined over
/// differing supports).
pub fn topic_stability(
    beta_prev: &Array2<f64>,
    beta_next: &Array2<f64>,
    alignment: &VocabAlignment,
) -> Result<Vec<f64>, AnalysisError> {
    let k = beta_prev.nrows();
    assert_eq!(k, beta_next.nrows());
    let mut out = Vec::with_capacity(k);
    for topic in 0..k {
        let mut prev = Vec::with_capacity(alignment.carried.len());
        let mut next = Vec::with_capacity(alignment.carried.len());
        for (&new_term, &prev_term) in &alignment.carried {
            prev.push(beta_prev[[topic, prev_term]]);
            next.push(beta_next[[topic, new_term]]);
        }
        out.push(cosine(&prev, &next).ok_or(AnalysisError::ZeroVector(topic))?);
    }
    Ok(out)
}

/// Term distribution of one topic for a speaker at the given ideal point:
/// `p_v ∝ beta_v * exp(x * eta_v)`, normalized to sum to one. An ideal
/// point of zero gives the neutral topic distribution.
pub fn polar_term_distribution(beta_k: &[f64], eta_k: &[f64], x: f64) -> Vec<f64> {
    assert_eq!(beta_k.len(), eta_k.len());
    let weights: Vec<f64> = beta_k
        .iter()
        .zip(eta_k)
        .map(|(&b, &e)| b * (x * e).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// The `n` highest-probability terms of a distribution, ties broken
/// lexicographically by term.
pub fn top_terms<'v>(
    probabilities: &[f64],
    vocabulary: &'v [String],
    n: usize,
) -> Vec<(&'v str, f64)> {
    assert_eq!(probabilities.len(), vocabulary.len());
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .partial_cmp(&probabilities[a])
            .unwrap()
            .then_with(|| vocabulary[a].cmp(&vocabulary[b]))
    });
    order
        .into_iter()
        .take(n)
        .map(|i| (vocabulary[i].as_str(), probabilities[i]))
        .collect()
}

/// Per-topic cosine similarity between the term compositions seen from the
/// two poles of the latent scale (ideal points +1 and -1).
pub fn polarity_discordance(beta: &Array2<f64>, eta: &Array2<f64>) -> Vec<f64> {
    assert_eq!(beta.dim(), eta.dim());
    (0..beta.nrows())
        .map(|topic| {
            let pos: Vec<f64> = beta
                .row(topic)
                .iter()
                .zip(eta.row(topic))
                .map(|(&b, &e)| b * e.exp())
                .collect();
            let neg: Vec<f64> = beta
                .row(topic)
                .iter()
                .zip(eta.row(topic))
                .map(|(&b, &e)| b * (-e).exp())
                .collect();
            // beta > 0 so both vectors are nonzero
            cosine(&pos, &neg).unwrap()
        })
        .collect()
}

/// Five-number summary plus mean, standard deviation, and session span for
/// one speaker's ideal points.
#[derive(Debug, Clone, Serialize)]
pub struct SpeakerSummary {
    pub speaker_id: String,
    pub party: Party,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    /// Omitted (None) when only one session is available.
    pub sd: Option<f64>,
    pub first_session: u32,
    pub last_session: u32,
    pub n_sessions: usize,
}

/// Linear-interpolation quantile (the R/NumPy default, type 7).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - h.floor()) * (sorted[hi] - sorted[lo])
}

/// Summarizes one speaker's per-session ideal points.
pub fn speaker_summary(
    speaker_id: &str,
    party: Party,
    by_session: &BTreeMap<u32, f64>,
) -> SpeakerSummary {
    assert!(!by_session.is_empty());
    let mut values: Vec<f64> = by_session.values().copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let sd = (n >= 2).then(|| sample_variance(&values).sqrt());
    SpeakerSummary {
        speaker_id: speaker_id.to_owned(),
        party,
        min: values[0],
        q1: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        mean: mean(&values),
        q3: quantile(&values, 0.75),
        max: values[n - 1],
        sd,
        first_session: *by_session.keys().next().unwrap(),
        last_session: *by_session.keys().next_back().unwrap(),
        n_sessions: n,
    }
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Standardizes a series to mean zero and unit sample standard deviation.
fn standardize(values: &[f64]) -> Vec<f64> {
    let m = mean(values);
    let sd = sample_variance(values).sqrt();
    values.iter().map(|&v| (v - m) / sd).collect()
}

/// Standardized `(session, fitted, external)` triples for plotting.
pub type StandardizedPairs = Vec<(u32, f64, f64)>;

/// Correlates the fitted partisanship series with an external score-gap
/// series over their overlapping sessions.
///
/// Both series are standardized over the overlap; returns the Pearson
/// correlation and the standardized `(session, fitted, external)` pairs for
/// plotting.
pub fn external_correlation(
    partisanship: &BTreeMap<u32, f64>,
    external: &BTreeMap<u32, f64>,
) -> Result<(f64, StandardizedPairs), AnalysisError> {
    let sessions: Vec<u32> = partisanship
        .keys()
        .filter(|s| external.contains_key(s))
        .copied()
        .collect();
    if sessions.len() < 3 {
        return Err(AnalysisError::InsufficientOverlap(sessions.len()));
    }
    let ours: Vec<f64> = sessions.iter().map(|s| partisanship[s]).collect();
    let theirs: Vec<f64> = sessions.iter().map(|s| external[s]).collect();
    let r = pearson(&ours, &theirs);
    let ours_std = standardize(&ours);
    let theirs_std = standardize(&theirs);
    let pairs = sessions
        .into_iter()
        .zip(ours_std.into_iter().zip(theirs_std))
        .map(|(s, (a, b))| (s, a, b))
        .collect();
    Ok((r, pairs))
}

/// Collapses per-speaker external scores into a per-session party gap:
/// mean Republican score minus mean Democrat score.
pub fn aggregate_external_by_party(
    scores: &[(u32, String, f64)],
    party_of: &BTreeMap<(u32, String), Party>,
) -> BTreeMap<u32, f64> {
    let mut by_session: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (session, speaker, score) in scores {
        let Some(party) = party_of.get(&(*session, speaker.clone())) else {
            continue;
        };
        let entry = by_session.entry(*session).or_default();
        match party {
            Party::R => entry.0.push(*score),
            Party::D => entry.1.push(*score),
            _ => {}
        }
    }
    by_session
        .into_iter()
        .filter(|(_, (rs, ds))| !rs.is_empty() && !ds.is_empty())
        .map(|(s, (rs, ds))| (s, mean(&rs) - mean(&ds)))
        .collect()
}

/// Greedy one-to-one assignment maximizing similarity: repeatedly takes the
/// largest entry of the matrix among unassigned rows and columns. Returns
/// the column matched to each row.
pub fn greedy_match(similarity: &Array2<f64>) -> Vec<usize> {
    let k = similarity.nrows();
    assert_eq!(k, similarity.ncols());
    let mut row_taken = vec![false; k];
    let mut col_taken = vec![false; k];
    let mut assignment = vec![0usize; k];
    for _ in 0..k {
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for r in 0..k {
            if row_taken[r] {
                continue;
            }
            for c in 0..k {
                if col_taken[c] {
                    continue;
                }
                if similarity[[r, c]] > best.2 {
                    best = (r, c, similarity[[r, c]]);
                }
            }
        }
        assignment[best.0] = best.1;
        row_taken[best.0] = true;
        col_taken[best.1] = true;
    }
    assignment
}
