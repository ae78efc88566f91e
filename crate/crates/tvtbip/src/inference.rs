//! Mean-field stochastic variational inference for one session.
//!
//! The variational family puts independent log-normals on the positive
//! blocks (document-topic weights, term intensities) and Gaussians on the
//! real blocks (polarity adjustments, ideal points). Every latent scalar
//! is sampled as `loc + exp(log_scale) * eps` with standard-normal noise,
//! so the Monte Carlo ELBO is a deterministic function of the noise and
//! pathwise gradients are exact. Entropy terms use their closed forms; the
//! likelihood and the per-document blocks of a mini-batch are rescaled by
//! `n_docs / batch_size` while global blocks enter every step unscaled.
//!
//! Optimization runs a fixed budget of Adam steps on the negated ELBO.
//! Convergence is monitored through a smoothed trace, not enforced.

// index-parallel loops over several same-shaped buffers
#![allow(clippy::needless_range_loop)]

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::corpus::SessionCorpus;
use crate::model::{PriorConfig, SessionParams, LN_2PI};
use crate::nmf::NmfResult;

/// Positivity floor applied before taking logarithms of NMF factors.
pub const INIT_POSITIVITY_FLOOR: f64 = 1e-6;
/// Initial log standard deviation for every variational factor.
pub const INIT_LOG_SCALE: f64 = -2.0;
/// `ideal * polarity` exp arguments are clamped to this magnitude during
/// optimization; each clamp is counted and reported with the fit.
pub const EXP_CLAMP: f64 = 50.0;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite ELBO contribution in {block} block")]
    NonFinite { block: &'static str },
    #[error("ELBO diverged at step {step}")]
    Diverged { step: u64 },
}

/// Mean-field variational parameters for one session.
///
/// `*_loc` and `*_log_scale` are the location and log standard deviation of
/// each factor; scales are `exp(log_scale)`, positive by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub doc_topic_loc: Array2<f64>,
    pub doc_topic_log_scale: Array2<f64>,
    pub topic_term_loc: Array2<f64>,
    pub topic_term_log_scale: Array2<f64>,
    pub polarity_loc: Array2<f64>,
    pub polarity_log_scale: Array2<f64>,
    pub ideal_loc: Array1<f64>,
    pub ideal_log_scale: Array1<f64>,
}

impl VariationalState {
    pub fn zeros(n_docs: usize, n_topics: usize, n_terms: usize, n_speakers: usize) -> Self {
        VariationalState {
            doc_topic_loc: Array2::zeros((n_docs, n_topics)),
            doc_topic_log_scale: Array2::zeros((n_docs, n_topics)),
            topic_term_loc: Array2::zeros((n_topics, n_terms)),
            topic_term_log_scale: Array2::zeros((n_topics, n_terms)),
            polarity_loc: Array2::zeros((n_topics, n_terms)),
            polarity_log_scale: Array2::zeros((n_topics, n_terms)),
            ideal_loc: Array1::zeros(n_speakers),
            ideal_log_scale: Array1::zeros(n_speakers),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (d, k) = self.doc_topic_loc.dim();
        let v = self.topic_term_loc.ncols();
        VariationalState::zeros(d, k, v, self.ideal_loc.len())
    }

    pub fn n_docs(&self) -> usize {
        self.doc_topic_loc.nrows()
    }

    pub fn n_topics(&self) -> usize {
        self.topic_term_loc.nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.topic_term_loc.ncols()
    }

    pub fn n_speakers(&self) -> usize {
        self.ideal_loc.len()
    }

    /// All eight parameter blocks as flat slices, in a fixed order.
    pub fn blocks(&self) -> [&[f64]; 8] {
        [
            self.doc_topic_loc.as_slice().unwrap(),
            self.doc_topic_log_scale.as_slice().unwrap(),
            self.topic_term_loc.as_slice().unwrap(),
            self.topic_term_log_scale.as_slice().unwrap(),
            self.polarity_loc.as_slice().unwrap(),
            self.polarity_log_scale.as_slice().unwrap(),
            self.ideal_loc.as_slice().unwrap(),
            self.ideal_log_scale.as_slice().unwrap(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.doc_topic_loc.as_slice_mut().unwrap(),
            self.doc_topic_log_scale.as_slice_mut().unwrap(),
            self.topic_term_loc.as_slice_mut().unwrap(),
            self.topic_term_log_scale.as_slice_mut().unwrap(),
            self.polarity_loc.as_slice_mut().unwrap(),
            self.polarity_log_scale.as_slice_mut().unwrap(),
            self.ideal_loc.as_slice_mut().unwrap(),
            self.ideal_log_scale.as_slice_mut().unwrap(),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Optimizer settings for one session fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_topics: usize,
    pub prior: PriorConfig,
    pub iters: u64,
    pub learning_rate: f64,
    /// Documents per stochastic gradient step; clamped to the corpus size.
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub elbo_log_every: u64,
    /// Worker threads for gradient reduction. Results are bitwise
    /// reproducible only with one worker (floating-point reduction order).
    pub workers: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_topics: 25,
            prior: PriorConfig::default(),
            iters: 300_000,
            learning_rate: 0.01,
            batch_size: 512,
            mc_samples: 1,
            seed: 0,
            elbo_log_every: 100,
            workers: 1,
        }
    }
}

/// Standard-normal driving noise, one draw per latent scalar.
///
/// `doc_topic` has one row per document of the batch being evaluated (in
/// batch order); the global blocks always cover the full session.
#[derive(Debug, Clone)]
pub struct LatentNoise {
    pub doc_topic: Array2<f64>,
    pub topic_term: Array2<f64>,
    pub polarity: Array2<f64>,
    pub ideal: Array1<f64>,
}

impl LatentNoise {
    /// All-zero noise: every factor evaluated at its location.
    pub fn zeros(batch_docs: usize, n_topics: usize, n_terms: usize, n_speakers: usize) -> Self {
        LatentNoise {
            doc_topic: Array2::zeros((batch_docs, n_topics)),
            topic_term: Array2::zeros((n_topics, n_terms)),
            polarity: Array2::zeros((n_topics, n_terms)),
            ideal: Array1::zeros(n_speakers),
        }
    }

    /// Fresh standard-normal draws. The fill order (doc_topic, topic_term,
    /// polarity, ideal; row-major) is part of the reproducibility contract.
    pub fn draw(
        rng: &mut ChaCha8Rng,
        batch_docs: usize,
        n_topics: usize,
        n_terms: usize,
        n_speakers: usize,
    ) -> Self {
        let mut std =
            |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        LatentNoise {
            doc_topic: Array2::from_shape_vec((batch_docs, n_topics), std(batch_docs * n_topics))
                .unwrap(),
            topic_term: Array2::from_shape_vec((n_topics, n_terms), std(n_topics * n_terms))
                .unwrap(),
            polarity: Array2::from_shape_vec((n_topics, n_terms), std(n_topics * n_terms)).unwrap(),
            ideal: Array1::from_vec(std(n_speakers)),
        }
    }
}

/// Fitted session: final variational state, posterior means, ELBO history.
#[derive(Debug, Clone)]
pub struct SessionFit {
    pub state: VariationalState,
    pub params: SessionParams,
    /// (step, exponentially smoothed ELBO estimate), every `elbo_log_every`.
    pub elbo_trace: Vec<(u64, f64)>,
    /// Times the `ideal * polarity` exp argument hit the clamp.
    pub clamp_events: u64,
}

/// Differential entropy of LogNormal(loc, exp(log_scale)²).
pub fn lognormal_entropy(loc: f64, log_scale: f64) -> f64 {
    loc + 0.5 * (LN_2PI + 1.0) + log_scale
}

/// Differential entropy of Normal(·, exp(log_scale)²).
pub fn normal_entropy(log_scale: f64) -> f64 {
    0.5 * (LN_2PI + 1.0) + log_scale
}

/// Builds the initial state from NMF factors.
///
/// Both factor matrices are floored at 1e-6 before taking logs. When
/// `carried` is supplied (sessions after the first) it replaces the term
/// intensity and polarity locations wholesale; otherwise polarity starts at
/// the prior mean zero. Ideal points always start at zero and every log
/// scale starts at -2.
pub fn init_variational(
    corpus: &SessionCorpus,
    cfg: &FitConfig,
    nmf: &NmfResult,
    carried: Option<&CarriedInit>,
) -> Result<VariationalState, InferenceError> {
    let (n_docs, n_terms) = (corpus.n_docs(), corpus.n_terms());
    let k = cfg.n_topics;
    if nmf.w.dim() != (n_docs, k) {
        return Err(InferenceError::DimensionMismatch(format!(
            "NMF W is {:?}, expected ({n_docs}, {k})",
            nmf.w.dim()
        )));
    }
    if nmf.h.dim() != (k, n_terms) {
        return Err(InferenceError::DimensionMismatch(format!(
            "NMF H is {:?}, expected ({k}, {n_terms})",
            nmf.h.dim()
        )));
    }
    let mut state = VariationalState::zeros(n_docs, k, n_terms, corpus.n_speakers());
    state.doc_topic_loc = nmf.w.mapv(|w| w.max(INIT_POSITIVITY_FLOOR).ln());
    match carried {
        Some(prev) => {
            if prev.topic_term_loc.dim() != (k, n_terms) || prev.polarity_loc.dim() != (k, n_terms)
            {
                return Err(InferenceError::DimensionMismatch(
                    "carried initialization shape differs from corpus".into(),
                ));
            }
            state.topic_term_loc = prev.topic_term_loc.clone();
            state.polarity_loc = prev.polarity_loc.clone();
        }
        None => {
            state.topic_term_loc = nmf.h.mapv(|h| h.max(INIT_POSITIVITY_FLOOR).ln());
            // polarity_loc stays zero
        }
    }
    state.doc_topic_log_scale.fill(INIT_LOG_SCALE);
    state.topic_term_log_scale.fill(INIT_LOG_SCALE);
    state.polarity_log_scale.fill(INIT_LOG_SCALE);
    state.ideal_log_scale.fill(INIT_LOG_SCALE);
    Ok(state)
}

/// Term-intensity and polarity locations carried over from the previous
/// session, already aligned to the new vocabulary (see the chain module).
#[derive(Debug, Clone)]
pub struct CarriedInit {
    /// K x terms, log of the carried/extended intensity means.
    pub topic_term_loc: Array2<f64>,
    /// K x terms.
    pub polarity_loc: Array2<f64>,
}

/// Transforms noise into parameter draws: `exp(loc + scale * eps)` for the
/// positive blocks, `loc + scale * eps` for the real blocks.
pub fn reparameterized_sample(state: &VariationalState, noise: &LatentNoise) -> SessionParams {
    let pos = |loc: &Array2<f64>, ls: &Array2<f64>, eps: &Array2<f64>| -> Array2<f64> {
        let mut out = loc.clone();
        ndarray::Zip::from(&mut out)
            .and(ls)
            .and(eps)
            .for_each(|o, &l, &e| *o = (*o + l.exp() * e).exp());
        out
    };
    let mut ideal = state.ideal_loc.clone();
    ndarray::Zip::from(&mut ideal)
        .and(&state.ideal_log_scale)
        .and(&noise.ideal)
        .for_each(|o, &l, &e| *o += l.exp() * e);
    let mut polarity = state.polarity_loc.clone();
    ndarray::Zip::from(&mut polarity)
        .and(&state.polarity_log_scale)
        .and(&noise.polarity)
        .for_each(|o, &l, &e| *o += l.exp() * e);
    SessionParams {
        doc_topic: pos(
            &state.doc_topic_loc,
            &state.doc_topic_log_scale,
            &noise.doc_topic,
        ),
        topic_term: pos(
            &state.topic_term_loc,
            &state.topic_term_log_scale,
            &noise.topic_term,
        ),
        polarity,
        ideal,
    }
}

/// Posterior means under the variational distribution:
/// `exp(loc + scale²/2)` for log-normal blocks, `loc` for normal blocks.
pub fn posterior_means(state: &VariationalState) -> SessionParams {
    let lognormal_mean = |loc: &Array2<f64>, ls: &Array2<f64>| -> Array2<f64> {
        let mut out = loc.clone();
        ndarray::Zip::from(&mut out)
            .and(ls)
            .for_each(|o, &l| *o = (*o + 0.5 * (2.0 * l).exp()).exp());
        out
    };
    SessionParams {
        doc_topic: lognormal_mean(&state.doc_topic_loc, &state.doc_topic_log_scale),
        topic_term: lognormal_mean(&state.topic_term_loc, &state.topic_term_log_scale),
        polarity: state.polarity_loc.clone(),
        ideal: state.ideal_loc.clone(),
    }
}

/// Result of one noise-driven evaluation of the stochastic objective.
struct Evaluation {
    elbo: f64,
    grad: Option<VariationalState>,
    clamp_events: u64,
}

/// Contributions of one speaker's batch documents to the evaluation.
struct SpeakerPartial {
    loglik: f64,
    /// (batch position, d loglik / d doc_topic) for this speaker's docs.
    doc_grads: Vec<(usize, Vec<f64>)>,
    term_grad: Option<Array2<f64>>,
    polarity_grad: Option<Array2<f64>>,
    ideal_grad: f64,
    speaker: usize,
    clamp_events: u64,
}

/// Likelihood terms and gradients for all batch documents of one speaker.
///
/// For speaker s with draw x, per term v and topic k the rate contribution
/// is `theta_ik * beta_kv * exp(clamp(x * eta_kv))`. Let r_iv = c_iv /
/// rate_iv (zero where c is zero); the per-speaker likelihood gradients
/// reduce to expressions in `P_kv = sum_i r_iv theta_ik` and
/// `T_k = sum_i theta_ik`, which keeps the inner loops linear in the
/// nonzero counts plus O(K * V) per speaker.
fn speaker_contribution(
    corpus: &SessionCorpus,
    batch: &[usize],
    params: &SessionParams,
    speaker: usize,
    doc_positions: &[usize],
    want_grad: bool,
) -> Result<SpeakerPartial, InferenceError> {
    let k = params.n_topics();
    let v = params.n_terms();
    let x = params.ideal[speaker];
    let beta = params.topic_term.as_slice().unwrap();
    let eta = params.polarity.as_slice().unwrap();

    // tilt[kv] = exp(clamp(x * eta)), rate_term[kv] = beta * tilt
    let mut tilt = vec![0.0; k * v];
    let mut rate_term = vec![0.0; k * v];
    let mut unclamped = vec![true; k * v];
    let mut clamp_events = 0u64;
    for i in 0..k * v {
        let mut arg = x * eta[i];
        if arg.abs() > EXP_CLAMP {
            arg = arg.clamp(-EXP_CLAMP, EXP_CLAMP);
            unclamped[i] = false;
            clamp_events += 1;
        }
        tilt[i] = arg.exp();
        rate_term[i] = beta[i] * tilt[i];
    }
    // total_rate[k] = sum_v rate_term[kv]
    let mut total_rate = vec![0.0; k];
    for topic in 0..k {
        total_rate[topic] = rate_term[topic * v..(topic + 1) * v].iter().sum();
    }

    let mut loglik = 0.0;
    let mut doc_grads = Vec::new();
    let mut p_acc = vec![0.0; k * v]; // P_kv
    let mut t_acc = vec![0.0; k]; // T_k
    for &pos in doc_positions {
        let doc = batch[pos];
        let theta_row = params.doc_topic.row(pos);
        let theta = theta_row.as_slice().unwrap();
        let mut doc_ll = 0.0;
        for topic in 0..k {
            doc_ll -= theta[topic] * total_rate[topic];
            t_acc[topic] += theta[topic];
        }
        let mut doc_grad = if want_grad {
            let mut g = vec![0.0; k];
            for topic in 0..k {
                g[topic] = -total_rate[topic];
            }
            g
        } else {
            Vec::new()
        };
        for &(term, count) in corpus.counts.row(doc) {
            let term = term as usize;
            let mut rate = 0.0;
            for topic in 0..k {
                rate += theta[topic] * rate_term[topic * v + term];
            }
            if !(rate.is_finite() && rate > 0.0) {
                return Err(InferenceError::NonFinite {
                    block: "likelihood",
                });
            }
            doc_ll += count as f64 * rate.ln();
            let ratio = count as f64 / rate;
            if want_grad {
                for topic in 0..k {
                    let idx = topic * v + term;
                    doc_grad[topic] += ratio * rate_term[idx];
                    p_acc[idx] += ratio * theta[topic];
                }
            }
        }
        loglik += doc_ll;
        if want_grad {
            doc_grads.push((pos, doc_grad));
        }
    }

    let (term_grad, polarity_grad, ideal_grad) = if want_grad {
        let mut g_beta = Array2::zeros((k, v));
        let mut g_eta = Array2::zeros((k, v));
        let mut g_x = 0.0;
        {
            let gb = g_beta.as_slice_mut().unwrap();
            let ge = g_eta.as_slice_mut().unwrap();
            for topic in 0..k {
                for term in 0..v {
                    let idx = topic * v + term;
                    let resid = p_acc[idx] - t_acc[topic];
                    gb[idx] = resid * tilt[idx];
                    if unclamped[idx] {
                        let through = resid * rate_term[idx];
                        ge[idx] = x * through;
                        g_x += through * eta[idx];
                    }
                }
            }
        }
        (Some(g_beta), Some(g_eta), g_x)
    } else {
        (None, None, 0.0)
    };

    Ok(SpeakerPartial {
        loglik,
        doc_grads,
        term_grad,
        polarity_grad,
        ideal_grad,
        speaker,
        clamp_events,
    })
}

/// Evaluates the stochastic ELBO (and optionally its pathwise gradient) for
/// one noise draw.
fn evaluate(
    state: &VariationalState,
    corpus: &SessionCorpus,
    batch: &[usize],
    cfg: &FitConfig,
    noise: &LatentNoise,
    want_grad: bool,
) -> Result<Evaluation, InferenceError> {
    let k = state.n_topics();
    let v = state.n_terms();
    let n_docs = corpus.n_docs();
    if state.n_docs() != n_docs || state.n_speakers() != corpus.n_speakers() {
        return Err(InferenceError::DimensionMismatch(
            "state shape differs from corpus".into(),
        ));
    }
    if corpus.n_terms() != v {
        return Err(InferenceError::DimensionMismatch(
            "state vocabulary differs from corpus".into(),
        ));
    }
    if batch.is_empty() || batch.iter().any(|&d| d >= n_docs) {
        return Err(InferenceError::DimensionMismatch(
            "batch must be a non-empty subset of document rows".into(),
        ));
    }
    if noise.doc_topic.nrows() != batch.len() {
        return Err(InferenceError::DimensionMismatch(
            "noise rows differ from batch size".into(),
        ));
    }
    let scale = n_docs as f64 / batch.len() as f64;
    let prior = &cfg.prior;
    let gamma_const = prior.gamma_shape * prior.gamma_rate.ln() - libm::lgamma(prior.gamma_shape);

    // Draw parameters. `params.doc_topic` row i corresponds to batch[i].
    let params = {
        let batch_state = BatchedDocState::new(state, batch);
        SessionParams {
            doc_topic: {
                let mut a = batch_state.loc.clone();
                ndarray::Zip::from(&mut a)
                    .and(&batch_state.log_scale)
                    .and(&noise.doc_topic)
                    .for_each(|o, &l, &e| *o = (*o + l.exp() * e).exp());
                a
            },
            topic_term: {
                let mut a = state.topic_term_loc.clone();
                ndarray::Zip::from(&mut a)
                    .and(&state.topic_term_log_scale)
                    .and(&noise.topic_term)
                    .for_each(|o, &l, &e| *o = (*o + l.exp() * e).exp());
                a
            },
            polarity: {
                let mut a = state.polarity_loc.clone();
                ndarray::Zip::from(&mut a)
                    .and(&state.polarity_log_scale)
                    .and(&noise.polarity)
                    .for_each(|o, &l, &e| *o += l.exp() * e);
                a
            },
            ideal: {
                let mut a = state.ideal_loc.clone();
                ndarray::Zip::from(&mut a)
                    .and(&state.ideal_log_scale)
                    .and(&noise.ideal)
                    .for_each(|o, &l, &e| *o += l.exp() * e);
                a
            },
        }
    };

    // Group batch positions by speaker for shared tilt tables.
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &doc) in batch.iter().enumerate() {
        by_speaker
            .entry(corpus.doc_speaker[doc] as usize)
            .or_default()
            .push(pos);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_speaker.into_iter().collect();

    let partials: Vec<SpeakerPartial> = if cfg.workers > 1 {
        groups
            .par_iter()
            .map(|(speaker, positions)| {
                speaker_contribution(corpus, batch, &params, *speaker, positions, want_grad)
            })
            .collect::<Result<_, _>>()?
    } else {
        groups
            .iter()
            .map(|(speaker, positions)| {
                speaker_contribution(corpus, batch, &params, *speaker, positions, want_grad)
            })
            .collect::<Result<_, _>>()?
    };

    let mut loglik = 0.0;
    let mut clamp_events = 0;
    for p in &partials {
        loglik += p.loglik;
        clamp_events += p.clamp_events;
    }

    // Local (per-document) prior and entropy, batch rows only.
    let mut local = 0.0;
    for (pos, _) in batch.iter().enumerate() {
        for topic in 0..k {
            let loc = state.doc_topic_loc[[batch[pos], topic]];
            let ls = state.doc_topic_log_scale[[batch[pos], topic]];
            let a = loc + ls.exp() * noise.doc_topic[[pos, topic]];
            let theta = params.doc_topic[[pos, topic]];
            local += gamma_const + (prior.gamma_shape - 1.0) * a - prior.gamma_rate * theta;
            local += lognormal_entropy(loc, ls);
        }
    }

    // Global blocks: prior at the draw, entropy in closed form.
    let mut global = 0.0;
    for ((&b, &loc), (&ls, &eps)) in params
        .topic_term
        .iter()
        .zip(state.topic_term_loc.iter())
        .zip(
            state
                .topic_term_log_scale
                .iter()
                .zip(noise.topic_term.iter()),
        )
    {
        let a = loc + ls.exp() * eps;
        global += gamma_const + (prior.gamma_shape - 1.0) * a - prior.gamma_rate * b;
        global += lognormal_entropy(loc, ls);
    }
    for (&e, &ls) in params.polarity.iter().zip(state.polarity_log_scale.iter()) {
        global += -0.5 * LN_2PI - 0.5 * e * e;
        global += normal_entropy(ls);
    }
    for (&x, &ls) in params.ideal.iter().zip(state.ideal_log_scale.iter()) {
        global += -0.5 * LN_2PI - 0.5 * x * x;
        global += normal_entropy(ls);
    }

    let elbo = scale * (loglik + local) + global;
    if !elbo.is_finite() {
        return Err(InferenceError::NonFinite { block: "elbo" });
    }

    let grad = if want_grad {
        let mut g = state.zeros_like();

        // Document-topic block: likelihood + Gamma prior + entropy, scaled.
        // Accumulated, not assigned: a batch may list a document twice, and
        // each occurrence samples its own noise row.
        for p in &partials {
            for (pos, doc_grad) in &p.doc_grads {
                let doc = batch[*pos];
                for topic in 0..k {
                    let theta = params.doc_topic[[*pos, topic]];
                    let ls = state.doc_topic_log_scale[[doc, topic]];
                    let d_a = doc_grad[topic] * theta + (prior.gamma_shape - 1.0)
                        - prior.gamma_rate * theta;
                    g.doc_topic_loc[[doc, topic]] += scale * (d_a + 1.0);
                    g.doc_topic_log_scale[[doc, topic]] +=
                        scale * (d_a * ls.exp() * noise.doc_topic[[*pos, topic]] + 1.0);
                }
            }
        }

        // Term-intensity block.
        let mut like_beta = Array2::zeros((k, v));
        let mut like_eta = Array2::zeros((k, v));
        for p in &partials {
            like_beta += p.term_grad.as_ref().unwrap();
            like_eta += p.polarity_grad.as_ref().unwrap();
        }
        ndarray::Zip::indexed(&mut g.topic_term_loc).for_each(|(topic, term), out| {
            let b = params.topic_term[[topic, term]];
            let d_a = scale * like_beta[[topic, term]] * b + (prior.gamma_shape - 1.0)
                - prior.gamma_rate * b;
            *out = d_a + 1.0;
        });
        ndarray::Zip::indexed(&mut g.topic_term_log_scale).for_each(|(topic, term), out| {
            let b = params.topic_term[[topic, term]];
            let d_a = scale * like_beta[[topic, term]] * b + (prior.gamma_shape - 1.0)
                - prior.gamma_rate * b;
            *out = d_a
                * state.topic_term_log_scale[[topic, term]].exp()
                * noise.topic_term[[topic, term]]
                + 1.0;
        });

        // Polarity block.
        ndarray::Zip::indexed(&mut g.polarity_loc).for_each(|(topic, term), out| {
            let e = params.polarity[[topic, term]];
            *out = scale * like_eta[[topic, term]] - e;
        });
        ndarray::Zip::indexed(&mut g.polarity_log_scale).for_each(|(topic, term), out| {
            let e = params.polarity[[topic, term]];
            let d_e = scale * like_eta[[topic, term]] - e;
            *out =
                d_e * state.polarity_log_scale[[topic, term]].exp() * noise.polarity[[topic, term]]
                    + 1.0;
        });

        // Ideal-point block: likelihood only for batch speakers, prior and
        // entropy for everyone.
        let mut like_x = vec![0.0; state.n_speakers()];
        for p in &partials {
            like_x[p.speaker] += p.ideal_grad;
        }
        for s in 0..state.n_speakers() {
            let x = params.ideal[s];
            let d_x = scale * like_x[s] - x;
            g.ideal_loc[s] = d_x;
            g.ideal_log_scale[s] = d_x * state.ideal_log_scale[s].exp() * noise.ideal[s] + 1.0;
        }

        if !g.is_finite() {
            return Err(InferenceError::NonFinite { block: "gradient" });
        }
        Some(g)
    } else {
        None
    };

    Ok(Evaluation {
        elbo,
        grad,
        clamp_events,
    })
}

/// Batch-row view of the per-document state blocks.
struct BatchedDocState {
    loc: Array2<f64>,
    log_scale: Array2<f64>,
}

impl BatchedDocState {
    fn new(state: &VariationalState, batch: &[usize]) -> Self {
        let k = state.n_topics();
        let mut loc = Array2::zeros((batch.len(), k));
        let mut log_scale = Array2::zeros((batch.len(), k));
        for (pos, &doc) in batch.iter().enumerate() {
            loc.row_mut(pos).assign(&state.doc_topic_loc.row(doc));
            log_scale
                .row_mut(pos)
                .assign(&state.doc_topic_log_scale.row(doc));
        }
        BatchedDocState { loc, log_scale }
    }
}

/// Monte Carlo ELBO for one explicit noise draw. Used directly by the
/// finite-difference and quadrature test oracles.
pub fn elbo_with_noise(
    state: &VariationalState,
    corpus: &SessionCorpus,
    batch: &[usize],
    cfg: &FitConfig,
    noise: &LatentNoise,
) -> Result<f64, InferenceError> {
    evaluate(state, corpus, batch, cfg, noise, false).map(|e| e.elbo)
}

/// Pathwise ELBO gradient for one explicit noise draw, together with the
/// ELBO value from the same draw.
pub fn elbo_gradient_with_noise(
    state: &VariationalState,
    corpus: &SessionCorpus,
    batch: &[usize],
    cfg: &FitConfig,
    noise: &LatentNoise,
) -> Result<(f64, VariationalState), InferenceError> {
    let eval = evaluate(state, corpus, batch, cfg, noise, true)?;
    Ok((eval.elbo, eval.grad.unwrap()))
}

/// Monte Carlo ELBO estimate averaged over `cfg.mc_samples` fresh draws.
pub fn elbo_estimate(
    state: &VariationalState,
    corpus: &SessionCorpus,
    batch: &[usize],
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, InferenceError> {
    let mut total = 0.0;
    for _ in 0..cfg.mc_samples.max(1) {
        let noise = LatentNoise::draw(
            rng,
            batch.len(),
            state.n_topics(),
            state.n_terms(),
            state.n_speakers(),
        );
        total += elbo_with_noise(state, corpus, batch, cfg, &noise)?;
    }
    Ok(total / cfg.mc_samples.max(1) as f64)
}

/// Monte Carlo ELBO gradient averaged over `cfg.mc_samples` fresh draws.
pub fn elbo_gradient(
    state: &VariationalState,
    corpus: &SessionCorpus,
    batch: &[usize],
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VariationalState, InferenceError> {
    let samples = cfg.mc_samples.max(1);
    let mut acc: Option<VariationalState> = None;
    for _ in 0..samples {
        let noise = LatentNoise::draw(
            rng,
            batch.len(),
            state.n_topics(),
            state.n_terms(),
            state.n_speakers(),
        );
        let (_, g) = elbo_gradient_with_noise(state, corpus, batch, cfg, &noise)?;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (dst, src) in a.blocks_mut().into_iter().zip(g.blocks()) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    let mut g = acc.unwrap();
    let inv = 1.0 / samples as f64;
    for block in g.blocks_mut() {
        for v in block.iter_mut() {
            *v *= inv;
        }
    }
    Ok(g)
}

/// Adam moment buffers, one pair per state block.
struct Adam {
    m: VariationalState,
    v: VariationalState,
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    fn new(shape: &VariationalState) -> Self {
        Adam {
            m: shape.zeros_like(),
            v: shape.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One ascent step along `grad`.
    fn update(&mut self, state: &mut VariationalState, grad: &VariationalState, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m_blocks = self.m.blocks_mut();
        let v_blocks = self.v.blocks_mut();
        let p_blocks = state.blocks_mut();
        let g_blocks = grad.blocks();
        for (((m, v), p), g) in m_blocks
            .into_iter()
            .zip(v_blocks)
            .zip(p_blocks)
            .zip(g_blocks)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] += lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Runs `cfg.iters` Adam steps of stochastic gradient ascent on the ELBO
/// from the given initial state.
///
/// Document batches are drawn uniformly without replacement each step. The
/// smoothed ELBO (exponential moving average, decay 0.99) is recorded every
/// `cfg.elbo_log_every` steps. The full iteration budget always runs;
/// convergence is reported, not enforced.
pub fn fit_session(
    corpus: &SessionCorpus,
    cfg: &FitConfig,
    init: VariationalState,
) -> Result<SessionFit, InferenceError> {
    let n_docs = corpus.n_docs();
    if init.n_docs() != n_docs
        || init.n_topics() != cfg.n_topics
        || init.n_terms() != corpus.n_terms()
        || init.n_speakers() != corpus.n_speakers()
    {
        return Err(InferenceError::DimensionMismatch(
            "initial state shape differs from corpus/config".into(),
        ));
    }
    let batch_size = cfg.batch_size.clamp(1, n_docs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init;
    let mut adam = Adam::new(&state);
    let mut ema: Option<f64> = None;
    let mut elbo_trace = Vec::new();
    let mut clamp_events = 0u64;

    let pool = (cfg.workers > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("worker pool")
    });

    let mut run = |state: &mut VariationalState,
                   adam: &mut Adam,
                   rng: &mut ChaCha8Rng|
     -> Result<(), InferenceError> {
        for step in 1..=cfg.iters {
            let batch: Vec<usize> = if batch_size >= n_docs {
                (0..n_docs).collect()
            } else {
                let mut idx = rand::seq::index::sample(rng, n_docs, batch_size).into_vec();
                idx.sort_unstable();
                idx
            };

            let samples = cfg.mc_samples.max(1);
            let mut value = 0.0;
            let mut grad: Option<VariationalState> = None;
            for _ in 0..samples {
                let noise = LatentNoise::draw(
                    rng,
                    batch.len(),
                    cfg.n_topics,
                    corpus.n_terms(),
                    corpus.n_speakers(),
                );
                let eval =
                    evaluate(state, corpus, &batch, cfg, &noise, true).map_err(|e| match e {
                        InferenceError::NonFinite { .. } => InferenceError::Diverged { step },
                        other => other,
                    })?;
                value += eval.elbo;
                clamp_events += eval.clamp_events;
                match &mut grad {
                    None => grad = Some(eval.grad.unwrap()),
                    Some(a) => {
                        let g = eval.grad.unwrap();
                        for (dst, src) in a.blocks_mut().into_iter().zip(g.blocks()) {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            value /= samples as f64;
            let mut grad = grad.unwrap();
            if samples > 1 {
                let inv = 1.0 / samples as f64;
                for block in grad.blocks_mut() {
                    for v in block.iter_mut() {
                        *v *= inv;
                    }
                }
            }

            if !value.is_finite() {
                return Err(InferenceError::Diverged { step });
            }
            adam.update(state, &grad, cfg.learning_rate);

            let smoothed = match ema {
                None => value,
                Some(prev) => 0.99 * prev + 0.01 * value,
            };
            ema = Some(smoothed);
            if cfg.elbo_log_every > 0 && step % cfg.elbo_log_every == 0 {
                elbo_trace.push((step, smoothed));
            }
        }
        Ok(())
    };

    match &pool {
        Some(pool) => pool.install(|| run(&mut state, &mut adam, &mut rng))?,
        None => run(&mut state, &mut adam, &mut rng)?,
    }

    if !state.is_finite() {
        return Err(InferenceError::Diverged { step: cfg.iters });
    }
    let params = posterior_means(&state);
    log::info!(
        "fit: session {} done, {} steps, {} clamp events, final smoothed ELBO {:?}",
        corpus.session,
        cfg.iters,
        clamp_events,
        elbo_trace.last()
    );
    Ok(SessionFit {
        state,
        params,
        elbo_trace,
        clamp_events,
    })
}
