//! Shared oracles and fixtures for the integration tests. Everything here
//! is independent of the library's computation paths: quadrature instead of
//! Monte Carlo, finite differences instead of analytic gradients, hash-map
//! tallies instead of the corpus builder.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use tvtbip::corpus::{Party, SessionCorpus, SparseCounts, Speaker};
use tvtbip::inference::{elbo_with_noise, FitConfig, LatentNoise, VariationalState};

/// Nodes and weights for n-point Gauss-Hermite quadrature with weight
/// `exp(-u^2)`: Newton iteration on the orthonormal Hermite recurrence with
/// the classical asymptotic starting guesses.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}

/// `E[f(Z)]` for standard normal Z by Gauss-Hermite quadrature.
pub fn gh_expect_1d(nodes: &[f64], weights: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    nodes
        .iter()
        .zip(weights)
        .map(|(&u, &w)| w * f(std::f64::consts::SQRT_2 * u))
        .sum::<f64>()
        * inv_sqrt_pi
}

/// `E[f(Z1, Z2, Z3, Z4)]` for four independent standard normals.
pub fn gh_expect_4d(nodes: &[f64], weights: &[f64], f: impl Fn(f64, f64, f64, f64) -> f64) -> f64 {
    let s = std::f64::consts::SQRT_2;
    let norm = std::f64::consts::PI.powi(-2);
    let mut total = 0.0;
    for (&ua, &wa) in nodes.iter().zip(weights) {
        for (&ub, &wb) in nodes.iter().zip(weights) {
            for (&uc, &wc) in nodes.iter().zip(weights) {
                for (&ud, &wd) in nodes.iter().zip(weights) {
                    total += wa * wb * wc * wd * f(s * ua, s * ub, s * uc, s * ud);
                }
            }
        }
    }
    total * norm
}

/// Central finite differences of the noise-fixed ELBO, coordinate by
/// coordinate over all eight parameter blocks.
pub fn finite_difference_gradient(
    state: &VariationalState,
    corpus: &SessionCorpus,
    batch: &[usize],
    cfg: &FitConfig,
    noise: &LatentNoise,
    step: f64,
) -> VariationalState {
    let mut grad = state.zeros_like();
    for block in 0..8 {
        let len = state.blocks()[block].len();
        for i in 0..len {
            let mut plus = state.clone();
            plus.blocks_mut()[block][i] += step;
            let mut minus = state.clone();
            minus.blocks_mut()[block][i] -= step;
            let f_plus = elbo_with_noise(&plus, corpus, batch, cfg, noise).unwrap();
            let f_minus = elbo_with_noise(&minus, corpus, batch, cfg, noise).unwrap();
            grad.blocks_mut()[block][i] = (f_plus - f_minus) / (2.0 * step);
        }
    }
    grad
}

/// Largest relative disagreement between two gradients. Coordinates where
/// both sides are below `floor` in magnitude count as exact agreement.
pub fn max_relative_error(a: &VariationalState, b: &VariationalState, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ba, bb) in a.blocks().into_iter().zip(b.blocks()) {
        for (&x, &y) in ba.iter().zip(bb) {
            if x.abs() < floor && y.abs() < floor {
                continue;
            }
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()));
        }
    }
    worst
}

/// Full ELBO of a single-topic instance by dense Gauss-Hermite quadrature:
/// 4D tensor quadrature per likelihood cell, 1D quadrature for every prior
/// and entropy term. No reparameterization, no closed forms, no code shared
/// with the implementation under test.
pub fn quadrature_elbo_1topic(
    corpus: &SessionCorpus,
    state: &VariationalState,
    cfg: &FitConfig,
) -> f64 {
    use statrs::distribution::{Continuous, LogNormal, Normal};
    assert_eq!(state.n_topics(), 1, "oracle is specialized to one topic");
    let (nodes, weights) = gauss_hermite(24);
    let shape = cfg.prior.gamma_shape;
    let rate = cfg.prior.gamma_rate;
    let gamma_const = shape * rate.ln() - statrs::function::gamma::ln_gamma(shape);

    let n_docs = corpus.n_docs();
    let n_terms = corpus.n_terms();
    let mut dense = vec![vec![0u32; n_terms]; n_docs];
    for (doc, row) in corpus.counts.rows.iter().enumerate() {
        for &(term, count) in row {
            dense[doc][term as usize] = count;
        }
    }

    let mut elbo = 0.0;
    // E[c ln(rate) - rate] per cell over (theta_i, beta_v, eta_v, x_s)
    for doc in 0..n_docs {
        let speaker = corpus.doc_speaker[doc] as usize;
        for term in 0..n_terms {
            let c = dense[doc][term] as f64;
            let mt = state.doc_topic_loc[[doc, 0]];
            let st = state.doc_topic_log_scale[[doc, 0]].exp();
            let mb = state.topic_term_loc[[0, term]];
            let sb = state.topic_term_log_scale[[0, term]].exp();
            let me = state.polarity_loc[[0, term]];
            let se = state.polarity_log_scale[[0, term]].exp();
            let mx = state.ideal_loc[speaker];
            let sx = state.ideal_log_scale[speaker].exp();
            elbo += gh_expect_4d(&nodes, &weights, |zt, zb, ze, zx| {
                let theta = (mt + st * zt).exp();
                let beta = (mb + sb * zb).exp();
                let eta = me + se * ze;
                let x = mx + sx * zx;
                let lambda = theta * beta * (x * eta).exp();
                c * lambda.ln() - lambda
            });
        }
    }

    // E[log p(theta)], E[log p(beta)] under the log-normal factors
    let gamma_term = |loc: f64, log_scale: f64| -> f64 {
        let s = log_scale.exp();
        gh_expect_1d(&nodes, &weights, |z| {
            let v = (loc + s * z).exp();
            gamma_const + (shape - 1.0) * v.ln() - rate * v
        })
    };
    for doc in 0..n_docs {
        elbo += gamma_term(
            state.doc_topic_loc[[doc, 0]],
            state.doc_topic_log_scale[[doc, 0]],
        );
    }
    for term in 0..n_terms {
        elbo += gamma_term(
            state.topic_term_loc[[0, term]],
            state.topic_term_log_scale[[0, term]],
        );
    }

    // E[log p(eta)], E[log p(x)] under the normal factors
    let ln_2pi = tvtbip::model::LN_2PI;
    let normal_term = |loc: f64, log_scale: f64| -> f64 {
        let s = log_scale.exp();
        gh_expect_1d(&nodes, &weights, |z| {
            let v = loc + s * z;
            -0.5 * ln_2pi - 0.5 * v * v
        })
    };
    for term in 0..n_terms {
        elbo += normal_term(
            state.polarity_loc[[0, term]],
            state.polarity_log_scale[[0, term]],
        );
    }
    for s in 0..corpus.n_speakers() {
        elbo += normal_term(state.ideal_loc[s], state.ideal_log_scale[s]);
    }

    // -E[log q] by quadrature against the density itself
    let lognormal_entropy_q = |loc: f64, log_scale: f64| -> f64 {
        let s = log_scale.exp();
        let q = LogNormal::new(loc, s).unwrap();
        gh_expect_1d(&nodes, &weights, |z| -q.ln_pdf((loc + s * z).exp()))
    };
    let normal_entropy_q = |loc: f64, log_scale: f64| -> f64 {
        let s = log_scale.exp();
        let q = Normal::new(loc, s).unwrap();
        gh_expect_1d(&nodes, &weights, |z| -q.ln_pdf(loc + s * z))
    };
    for doc in 0..n_docs {
        elbo += lognormal_entropy_q(
            state.doc_topic_loc[[doc, 0]],
            state.doc_topic_log_scale[[doc, 0]],
        );
    }
    for term in 0..n_terms {
        elbo += lognormal_entropy_q(
            state.topic_term_loc[[0, term]],
            state.topic_term_log_scale[[0, term]],
        );
        elbo += normal_entropy_q(
            state.polarity_loc[[0, term]],
            state.polarity_log_scale[[0, term]],
        );
    }
    for s in 0..corpus.n_speakers() {
        elbo += normal_entropy_q(state.ideal_loc[s], state.ideal_log_scale[s]);
    }
    elbo
}

pub fn speaker(id: &str, party: Party) -> Speaker {
    Speaker {
        id: id.into(),
        name: id.to_uppercase(),
        party,
    }
}

/// Hand-built corpus: rows of (term, count) pairs plus a speaker per row.
pub fn corpus_from_rows(
    session: u32,
    n_terms: usize,
    rows: Vec<Vec<(u32, u32)>>,
    doc_speaker: Vec<u32>,
    speakers: Vec<Speaker>,
) -> SessionCorpus {
    let vocabulary = (0..n_terms).map(|t| format!("term{t:03} x")).collect();
    let corpus = SessionCorpus {
        session,
        vocabulary,
        counts: SparseCounts {
            n_rows: rows.len(),
            n_cols: n_terms,
            rows,
        },
        doc_speaker,
        speakers,
    };
    assert_eq!(corpus.check_invariants(), Ok(()));
    corpus
}

/// A state with varied locations and log scales, deterministic in `seed`.
pub fn varied_state(
    n_docs: usize,
    n_topics: usize,
    n_terms: usize,
    n_speakers: usize,
    seed: u64,
) -> VariationalState {
    let mut state = VariationalState::zeros(n_docs, n_topics, n_terms, n_speakers);
    let mut counter = seed;
    let mut next = || {
        counter = tvtbip::derive_seed(counter, 1);
        (counter % 2000) as f64 / 1000.0 - 1.0 // in [-1, 1)
    };
    for block in state.blocks_mut() {
        for v in block.iter_mut() {
            *v = 0.4 * next();
        }
    }
    // keep scales tight so exp moments stay well-behaved
    let [_, dls, _, tls, _, pls, _, ils] = state.blocks_mut();
    for block in [dls, tls, pls, ils] {
        for v in block.iter_mut() {
            *v = -2.0 + 0.3 * (*v);
        }
    }
    state
}

/// One pass/fail line per acceptance criterion.
pub fn report_criterion(number: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {number:2} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}
