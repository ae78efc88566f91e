//! The generative model for one session.
//!
//! A count matrix row (one speech) is Poisson with rate
//! `rate_v = Σ_k doc_topic_k · topic_term_kv · exp(ideal · polarity_kv)`:
//! non-negative topic weights times neutral term intensities, tilted up or
//! down by the speaker's position on the latent scale. With an ideal point
//! of zero the rate reduces to plain Poisson factorization.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// exp arguments above this are evaluated in log space per term.
const LOG_SPACE_THRESHOLD: f64 = 30.0;
/// exp arguments above this are a hard error: the rate is not representable.
const OVERFLOW_LIMIT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("exp argument {argument:.3} for term {term} exceeds {OVERFLOW_LIMIT}")]
    Overflow { term: usize, argument: f64 },
    #[error("non-finite rate at term {0}")]
    NonFiniteRate(usize),
    #[error("non-positive entry in {0}")]
    NonPositiveParam(&'static str),
}

/// Posterior-mean point estimates for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionParams {
    /// docs x K, strictly positive.
    pub doc_topic: Array2<f64>,
    /// K x terms, strictly positive; term intensities of the neutral topics.
    pub topic_term: Array2<f64>,
    /// K x terms; per-term ideological adjustments.
    pub polarity: Array2<f64>,
    /// One ideal point per speaker.
    pub ideal: Array1<f64>,
}

impl SessionParams {
    pub fn n_topics(&self) -> usize {
        self.topic_term.nrows()
    }

    pub fn n_terms(&self) -> usize {
        self.topic_term.ncols()
    }
}

/// Prior hyperparameters. Gamma shape/rate apply to both positive blocks;
/// the real-valued blocks always get standard normal priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        // Shape = rate gives prior mean 1; values below 1 induce sparsity.
        PriorConfig {
            gamma_shape: 0.3,
            gamma_rate: 0.3,
        }
    }
}

impl PriorConfig {
    /// Log density of Gamma(shape, rate) at `x > 0`.
    pub fn gamma_log_pdf(&self, x: f64) -> f64 {
        self.gamma_shape * self.gamma_rate.ln() - libm::lgamma(self.gamma_shape)
            + (self.gamma_shape - 1.0) * x.ln()
            - self.gamma_rate * x
    }
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// Log density of the standard normal at `x`.
pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * LN_2PI - 0.5 * x * x
}

/// Poisson rates for one speech over the whole vocabulary.
///
/// `doc_topic_row` are the speech's K topic weights, `ideal` the speaker's
/// position. Terms whose exp argument exceeds 700 are reported as overflow
/// rather than silently clamped.
pub fn poisson_rate(
    doc_topic_row: &[f64],
    topic_term: &Array2<f64>,
    polarity: &Array2<f64>,
    ideal: f64,
) -> Result<Array1<f64>, ModelError> {
    let (k, v) = topic_term.dim();
    if doc_topic_row.len() != k {
        return Err(ModelError::DimensionMismatch(format!(
            "doc_topic has {} topics, topic_term has {k}",
            doc_topic_row.len()
        )));
    }
    if polarity.dim() != (k, v) {
        return Err(ModelError::DimensionMismatch(
            "polarity shape differs from topic_term".into(),
        ));
    }
    if doc_topic_row.iter().any(|&t| t <= 0.0) {
        return Err(ModelError::NonPositiveParam("doc_topic"));
    }
    if topic_term.iter().any(|&b| b <= 0.0) {
        return Err(ModelError::NonPositiveParam("topic_term"));
    }

    let mut rates = Array1::zeros(v);
    for term in 0..v {
        let mut rate = 0.0;
        for topic in 0..k {
            let arg = ideal * polarity[[topic, term]];
            if arg > OVERFLOW_LIMIT {
                return Err(ModelError::Overflow {
                    term,
                    argument: arg,
                });
            }
            let weight = doc_topic_row[topic];
            let intensity = topic_term[[topic, term]];
            rate += if arg > LOG_SPACE_THRESHOLD {
                (weight.ln() + intensity.ln() + arg).exp()
            } else {
                weight * intensity * arg.exp()
            };
        }
        if !rate.is_finite() || rate <= 0.0 {
            return Err(ModelError::NonFiniteRate(term));
        }
        rates[term] = rate;
    }
    Ok(rates)
}

/// Poisson log likelihood of one count row, dropping the `ln(c!)` constant.
///
/// Returns `Σ_v c_v ln(rate_v) - rate_v`. Because the factorial term is
/// constant in the parameters, gradients and maximizers are unaffected, but
/// values are only comparable to other likelihoods computed the same way.
pub fn poisson_loglik(counts_row: &[(u32, u32)], rates: &Array1<f64>) -> Result<f64, ModelError> {
    let mut ll = 0.0;
    for (term, &rate) in rates.iter().enumerate() {
        if !rate.is_finite() || rate <= 0.0 {
            return Err(ModelError::NonFiniteRate(term));
        }
        ll -= rate;
    }
    for &(term, count) in counts_row {
        if term as usize >= rates.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "count column {term} out of range"
            )));
        }
        ll += count as f64 * rates[term as usize].ln();
    }
    Ok(ll)
}

/// Sum of log prior densities over all parameters: Gamma for the positive
/// blocks, standard normal for the real blocks.
pub fn log_prior(params: &SessionParams, prior: &PriorConfig) -> Result<f64, ModelError> {
    if params.doc_topic.iter().any(|&t| t <= 0.0) {
        return Err(ModelError::NonPositiveParam("doc_topic"));
    }
    if params.topic_term.iter().any(|&b| b <= 0.0) {
        return Err(ModelError::NonPositiveParam("topic_term"));
    }
    let mut lp = 0.0;
    for &t in params.doc_topic.iter() {
        lp += prior.gamma_log_pdf(t);
    }
    for &b in params.topic_term.iter() {
        lp += prior.gamma_log_pdf(b);
    }
    for &e in params.polarity.iter() {
        lp += std_normal_log_pdf(e);
    }
    for &x in params.ideal.iter() {
        lp += std_normal_log_pdf(x);
    }
    Ok(lp)
}
