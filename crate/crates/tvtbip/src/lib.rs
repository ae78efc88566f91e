//! Time-varying text-based ideal point model.
//!
//! Fits a Poisson factorization topic model whose term rates are modulated
//! by per-speaker ideal points, one session at a time, with each session's
//! variational parameters initialized from the previous session's posterior
//! means so that topics and the latent ideological scale stay aligned over
//! time. The pipeline runs from raw speech records to plot-ready CSV:
//!
//! 1. [`corpus`] — tokenize speeches into bigrams and build per-session
//!    sparse document-term matrices under speaker/term support filters.
//! 2. [`nmf`] — non-negative matrix factorization used to seed the
//!    variational means.
//! 3. [`model`] — the generative model: Poisson rates, likelihood, priors.
//! 4. [`inference`] — mean-field stochastic variational inference with
//!    reparameterized gradients and Adam.
//! 5. [`chain`] — cross-session orchestration with vocabulary alignment.
//! 6. [`analysis`] — partisanship series, topic stability, polarity-split
//!    term tables, speaker summaries, external-score correlation.
//! 7. [`synth`] — synthetic corpora with known truth plus recovery scoring.

pub mod analysis;
pub mod chain;
pub mod cli;
pub mod corpus;
pub mod inference;
pub mod model;
pub mod nmf;
pub mod persist;
pub mod synth;

/// Derives an independent child seed from a master seed and a stream index.
///
/// SplitMix64 over `master ^ (stream * odd constant)`; every consumer of
/// randomness (NMF init, per-session fits, synthetic generation) gets its
/// own stream so adding one consumer never perturbs the others.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across platforms and builds, unlike the
/// stdlib hasher. Used to stamp outputs with a config fingerprint.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
