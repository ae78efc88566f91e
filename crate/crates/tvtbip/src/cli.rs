//! Command-line pipeline: `preprocess`, `fit`, `report`, `simulate`, `eval`.
//!
//! Settings come from defaults, then an optional flat `key = value` config
//! file, then command-line flags, in that order of precedence. Every output
//! file is stamped with the artifact version, a fingerprint of the resolved
//! configuration, and the master seed that all randomness derives from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    self, external_correlation, partisanship, polar_term_distribution, polarity_discordance,
    speaker_summary, top_terms, topic_stability, AnalysisError,
};
use crate::chain::{consistency_report, fit_chain, ChainError, ChainResult};
use crate::corpus::{
    align_vocabulary, build_session_corpus, load_corpus_file, parse_stopwords, CorpusError,
    FilterSummary, Party, SessionCorpus, DEFAULT_STOPWORDS,
};
use crate::inference::{FitConfig, InferenceError, SessionFit};
use crate::persist::{self, ExternalScores, PersistError, Stamp};
use crate::synth::{generate_corpus, recovery_report, Scenario, SynthError};
use crate::{derive_seed, fnv1a};

/// Random-stream id for synthetic generation, distinct from fit streams.
pub const SIMULATE_STREAM: u64 = 0x5349_4d00;

/// Recovery thresholds enforced by `eval`. The ideal-point correlation is
/// the headline claim and is held tight. Topic matching against synthetic
/// truth is multi-modal (the factorization basin depends on the NMF draw),
/// so its gate and the partisanship-scale gate are set where they separate
/// working fits from broken ones rather than at the benchmark values the
/// acceptance suite pins for its fixed-seed runs.
pub const MIN_IDEAL_CORRELATION: f64 = 0.8;
pub const MIN_TOPIC_COSINE: f64 = 0.5;
pub const MAX_PARTISANSHIP_REL_ERROR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Chain(ChainError),
    #[error("config: {0}")]
    Config(String),
    #[error("recovery thresholds failed:\n{0}")]
    ThresholdFailure(String),
}

impl From<ChainError> for CliError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::Inference { session, source } => match source {
                InferenceError::Diverged { step } => CliError::Chain(ChainError::Inference {
                    session,
                    source: InferenceError::Diverged { step },
                }),
                other => CliError::Chain(ChainError::Inference {
                    session,
                    source: other,
                }),
            },
            other => CliError::Chain(other),
        }
    }
}

impl CliError {
    /// Process exit code: 2 parse/config/input, 3 empty corpus, 4 diverged,
    /// 5 analysis preconditions, 6 recovery threshold failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Corpus(CorpusError::EmptyCorpus { .. }) => 3,
            CliError::Corpus(_) => 2,
            CliError::Config(_) => 2,
            CliError::Persist(_) => 2,
            CliError::Chain(ChainError::Inference {
                source: InferenceError::Diverged { .. },
                ..
            }) => 4,
            CliError::Inference(InferenceError::Diverged { .. }) => 4,
            CliError::Chain(_) => 4,
            CliError::Inference(_) => 4,
            CliError::Analysis(_) => 5,
            CliError::Synth(_) => 5,
            CliError::ThresholdFailure(_) => 6,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tvtbip",
    version,
    about = "Time-varying text-based ideal points"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build per-session document-term matrices from a JSON-lines speech file.
    Preprocess(CommonArgs),
    /// Fit the model session by session with chained initialization.
    Fit(CommonArgs),
    /// Write analysis CSVs from fitted parameters.
    Report(CommonArgs),
    /// Generate synthetic corpora with known truth.
    Simulate(CommonArgs),
    /// Score fitted parameters against synthetic truth; nonzero exit on
    /// threshold failure.
    Eval(CommonArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// Flat key = value config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input JSON-lines speech file (preprocess).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of topics K.
    #[arg(long)]
    pub topics: Option<usize>,
    /// Optimizer steps per session.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Documents per gradient step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Gradient worker threads (1 = bitwise reproducible).
    #[arg(long)]
    pub workers: Option<usize>,
    /// External score series to correlate against (report).
    #[arg(long = "external-scores")]
    pub external_scores: Option<PathBuf>,
    /// Stopword list, one token per line (preprocess).
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Minimum speeches per retained speaker.
    #[arg(long = "min-speeches")]
    pub min_speeches: Option<usize>,
    /// Minimum distinct speakers per retained bigram.
    #[arg(long = "min-speakers")]
    pub min_speakers: Option<usize>,
    /// Synthetic scenario name: `standard` or `chain` (simulate).
    #[arg(long)]
    pub scenario: Option<String>,
    /// Terms listed per topic in top-term tables.
    #[arg(long = "top-n")]
    pub top_n: Option<usize>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub min_speeches: usize,
    pub min_speakers: usize,
    pub stopwords: Option<PathBuf>,
    pub external_scores: Option<PathBuf>,
    pub scenario: Scenario,
    pub top_n: usize,
    pub fit: FitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            out: PathBuf::from("out"),
            min_speeches: 24,
            min_speakers: 10,
            stopwords: None,
            external_scores: None,
            scenario: Scenario::standard(),
            top_n: 5,
            fit: FitConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fingerprint of the resolved configuration, stamped on every output.
    pub fn hash(&self) -> u64 {
        fnv1a(persist::to_json_string(self).as_bytes())
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            config_hash: self.hash(),
            seed: self.fit.seed,
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    pub fn fits_dir(&self) -> PathBuf {
        self.out.join("fits")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.out.join("analysis")
    }

    pub fn truth_dir(&self) -> PathBuf {
        self.out.join("truth")
    }

    /// Applies a config file (if given) and then the flags.
    pub fn resolve(args: &CommonArgs) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &args.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &args.corpus {
            cfg.corpus = Some(v.clone());
        }
        if let Some(v) = &args.out {
            cfg.out = v.clone();
        }
        if let Some(v) = args.seed {
            cfg.fit.seed = v;
        }
        if let Some(v) = args.topics {
            cfg.fit.n_topics = v;
        }
        if let Some(v) = args.iters {
            cfg.fit.iters = v;
        }
        if let Some(v) = args.batch {
            cfg.fit.batch_size = v;
        }
        if let Some(v) = args.lr {
            cfg.fit.learning_rate = v;
        }
        if let Some(v) = args.workers {
            cfg.fit.workers = v;
        }
        if let Some(v) = &args.external_scores {
            cfg.external_scores = Some(v.clone());
        }
        if let Some(v) = &args.stopwords {
            cfg.stopwords = Some(v.clone());
        }
        if let Some(v) = args.min_speeches {
            cfg.min_speeches = v;
        }
        if let Some(v) = args.min_speakers {
            cfg.min_speakers = v;
        }
        if let Some(name) = &args.scenario {
            cfg.scenario = Scenario::by_name(name)
                .ok_or_else(|| CliError::Config(format!("unknown scenario {name:?}")))?;
        }
        if let Some(v) = args.top_n {
            cfg.top_n = v;
        }
        if cfg.min_speeches < 1 || cfg.min_speakers < 1 {
            return Err(CliError::Config("thresholds must be >= 1".into()));
        }
        let f = &cfg.fit;
        if f.n_topics < 1 || f.iters < 1 || f.batch_size < 1 || f.mc_samples < 1 || cfg.top_n < 1 {
            return Err(CliError::Config(
                "topics, iters, batch, mc_samples, and top_n must be >= 1".into(),
            ));
        }
        if !(f.learning_rate > 0.0 && f.prior.gamma_shape > 0.0 && f.prior.gamma_rate > 0.0) {
            return Err(CliError::Config(
                "learning rate and Gamma prior parameters must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                CliError::Config(format!(
                    "{}:{}: bad {what} value {value:?}",
                    path.display(),
                    lineno + 1
                ))
            };
            match key {
                "corpus" => self.corpus = Some(PathBuf::from(value)),
                "out" => self.out = PathBuf::from(value),
                "stopwords" => self.stopwords = Some(PathBuf::from(value)),
                "external_scores" => self.external_scores = Some(PathBuf::from(value)),
                "min_speeches" => self.min_speeches = value.parse().map_err(|_| bad("integer"))?,
                "min_speakers" => self.min_speakers = value.parse().map_err(|_| bad("integer"))?,
                "topics" => self.fit.n_topics = value.parse().map_err(|_| bad("integer"))?,
                "iters" => self.fit.iters = value.parse().map_err(|_| bad("integer"))?,
                "learning_rate" | "lr" => {
                    self.fit.learning_rate = value.parse().map_err(|_| bad("float"))?
                }
                "batch" => self.fit.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "mc_samples" => self.fit.mc_samples = value.parse().map_err(|_| bad("integer"))?,
                "seed" => self.fit.seed = value.parse().map_err(|_| bad("integer"))?,
                "elbo_log_every" => {
                    self.fit.elbo_log_every = value.parse().map_err(|_| bad("integer"))?
                }
                "workers" => self.fit.workers = value.parse().map_err(|_| bad("integer"))?,
                "gamma_shape" => {
                    self.fit.prior.gamma_shape = value.parse().map_err(|_| bad("float"))?
                }
                "gamma_rate" => {
                    self.fit.prior.gamma_rate = value.parse().map_err(|_| bad("float"))?
                }
                "top_n" => self.top_n = value.parse().map_err(|_| bad("integer"))?,
                "scenario" => {
                    self.scenario = Scenario::by_name(value)
                        .ok_or_else(|| CliError::Config(format!("unknown scenario {value:?}")))?
                }
                "scenario_topics" => {
                    self.scenario.n_topics = value.parse().map_err(|_| bad("integer"))?
                }
                "scenario_terms" => {
                    self.scenario.n_terms = value.parse().map_err(|_| bad("integer"))?
                }
                "scenario_docs" => {
                    self.scenario.n_docs = value.parse().map_err(|_| bad("integer"))?
                }
                "scenario_speakers" => {
                    self.scenario.n_speakers = value.parse().map_err(|_| bad("integer"))?
                }
                "scenario_sessions" => {
                    self.scenario.n_sessions = value.parse().map_err(|_| bad("integer"))?
                }
                "scenario_gap" => {
                    self.scenario.polarization = value.parse().map_err(|_| bad("float"))?
                }
                "scenario_drift" => {
                    self.scenario.drift = value.parse().map_err(|_| bad("float"))?
                }
                other => {
                    return Err(CliError::Config(format!(
                        "{}:{}: unknown key {other:?}",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match &cli.command {
        Command::Preprocess(args) => with_config(args, cmd_preprocess),
        Command::Fit(args) => with_config(args, cmd_fit),
        Command::Report(args) => with_config(args, cmd_report),
        Command::Simulate(args) => with_config(args, cmd_simulate),
        Command::Eval(args) => with_config(args, cmd_eval),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_config(
    args: &CommonArgs,
    f: fn(&RunConfig) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(args)?;
    f(&cfg)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Tokenizes, filters, and persists every session of the input file.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let input = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Config("preprocess needs --corpus or corpus= in config".into()))?;
    let stopwords = match &cfg.stopwords {
        Some(path) => parse_stopwords(
            &std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        ),
        None => parse_stopwords(DEFAULT_STOPWORDS),
    };
    let grouped = load_corpus_file(input)?;
    if grouped.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no speech records",
            input.display()
        )));
    }
    let stamp = cfg.stamp();
    let dir = cfg.corpus_dir();
    let mut summaries: Vec<FilterSummary> = Vec::new();
    for (session, records) in &grouped {
        let (corpus, summary) =
            build_session_corpus(records, cfg.min_speeches, cfg.min_speakers, &stopwords)?;
        persist::write_session_corpus(&dir, &corpus, &stamp)?;
        log::info!(
            "preprocess: session {session}: {} -> {} speeches, {} terms",
            summary.speeches_before,
            summary.speeches_after,
            corpus.n_terms()
        );
        summaries.push(summary);
    }
    let rows: Vec<String> = summaries
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{},{:.2},{:.2}",
                s.session,
                s.speakers_before,
                s.speakers_after,
                s.speeches_before,
                s.speeches_after,
                s.avg_before(),
                s.avg_after()
            )
        })
        .collect();
    persist::write_csv(
        &dir.join("preprocess_summary.csv"),
        &stamp,
        "session,speakers_before,speakers_after,speeches_before,speeches_after,avg_speeches_before,avg_speeches_after",
        &rows,
    )?;
    println!(
        "preprocessed {} sessions into {}",
        summaries.len(),
        dir.display()
    );
    Ok(())
}

fn load_all_corpora(cfg: &RunConfig) -> Result<Vec<SessionCorpus>, CliError> {
    let dir = cfg.corpus_dir();
    let sessions = persist::list_corpus_sessions(&dir)?;
    if sessions.is_empty() {
        return Err(CliError::Config(format!(
            "{}: no session corpora found (run preprocess or simulate first)",
            dir.display()
        )));
    }
    let mut corpora = Vec::with_capacity(sessions.len());
    for session in sessions {
        corpora.push(persist::read_session_corpus(&dir, session)?);
    }
    Ok(corpora)
}

/// Fits all persisted sessions in order and writes fits plus a manifest.
pub fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_all_corpora(cfg)?;
    let chain = fit_chain(&corpora, &cfg.fit)?;
    let stamp = cfg.stamp();
    let dir = cfg.fits_dir();
    for (corpus, fit) in corpora.iter().zip(&chain.fits) {
        persist::write_session_fit(&dir, corpus, fit, &stamp)?;
    }
    persist::write_manifest(&dir, &chain, &corpora, &stamp)?;
    println!(
        "fitted {} sessions into {}",
        chain.fits.len(),
        dir.display()
    );
    Ok(())
}

fn load_fits(cfg: &RunConfig, corpora: &[SessionCorpus]) -> Result<Vec<SessionFit>, CliError> {
    let dir = cfg.fits_dir();
    let mut fits: Vec<SessionFit> = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        let (fit, _) = persist::read_session_fit(&dir, corpus.session)?;
        if fit.params.n_terms() != corpus.n_terms() || fit.params.ideal.len() != corpus.n_speakers()
        {
            return Err(CliError::Config(format!(
                "fit for session {} does not match its corpus",
                corpus.session
            )));
        }
        if let Some(prev) = fits.last() {
            if prev.params.n_topics() != fit.params.n_topics() {
                return Err(CliError::Config(format!(
                    "session {} was fitted with {} topics, earlier sessions with {}",
                    corpus.session,
                    fit.params.n_topics(),
                    prev.params.n_topics()
                )));
            }
        }
        fits.push(fit);
    }
    Ok(fits)
}

/// Writes the analysis CSVs; includes the external-score correlation when a
/// score file is configured.
pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_all_corpora(cfg)?;
    let fits = load_fits(cfg, &corpora)?;
    let stamp = cfg.stamp();
    let dir = cfg.analysis_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;

    // ideal_points.csv
    let mut rows = Vec::new();
    for (corpus, fit) in corpora.iter().zip(&fits) {
        for (idx, speaker) in corpus.speakers.iter().enumerate() {
            rows.push(format!(
                "{},{},{},{}",
                corpus.session,
                speaker.id,
                speaker.party,
                fmt_f64(fit.params.ideal[idx])
            ));
        }
    }
    persist::write_csv(
        &dir.join("ideal_points.csv"),
        &stamp,
        "session,speaker_id,party,x_hat",
        &rows,
    )?;

    // partisanship.csv
    let mut pi_series = BTreeMap::new();
    let mut rows = Vec::new();
    for (corpus, fit) in corpora.iter().zip(&fits) {
        let parties: Vec<Party> = corpus.speakers.iter().map(|s| s.party).collect();
        let ideal: Vec<f64> = fit.params.ideal.to_vec();
        let point = partisanship(corpus.session, &ideal, &parties)?;
        pi_series.insert(corpus.session, point.pi_bar);
        rows.push(format!(
            "{},{},{},{}",
            point.session,
            fmt_f64(point.pi_bar),
            fmt_f64(point.ci_low),
            fmt_f64(point.ci_high)
        ));
    }
    persist::write_csv(
        &dir.join("partisanship.csv"),
        &stamp,
        "session,pi_bar,ci_low,ci_high",
        &rows,
    )?;

    // topic_stability.csv over consecutive session pairs
    let mut rows = Vec::new();
    for window in 0..corpora.len().saturating_sub(1) {
        let (prev, next) = (&corpora[window], &corpora[window + 1]);
        let alignment = align_vocabulary(&prev.vocabulary, &next.vocabulary);
        let cosines = topic_stability(
            &fits[window].params.topic_term,
            &fits[window + 1].params.topic_term,
            &alignment,
        )?;
        for (topic, cos) in cosines.iter().enumerate() {
            rows.push(format!(
                "{},{}-{},{}",
                topic,
                prev.session,
                next.session,
                fmt_f64(*cos)
            ));
        }
    }
    persist::write_csv(
        &dir.join("topic_stability.csv"),
        &stamp,
        "topic,session_pair,cosine",
        &rows,
    )?;

    // discordance.csv
    let mut rows = Vec::new();
    for (corpus, fit) in corpora.iter().zip(&fits) {
        let d = polarity_discordance(&fit.params.topic_term, &fit.params.polarity);
        for (topic, cos) in d.iter().enumerate() {
            rows.push(format!("{},{},{}", topic, corpus.session, fmt_f64(*cos)));
        }
    }
    persist::write_csv(
        &dir.join("discordance.csv"),
        &stamp,
        "topic,session,cosine",
        &rows,
    )?;

    // top_terms.csv at ideal points -1, 0, +1
    let mut rows = Vec::new();
    for (corpus, fit) in corpora.iter().zip(&fits) {
        for topic in 0..fit.params.n_topics() {
            let beta_k: Vec<f64> = fit.params.topic_term.row(topic).to_vec();
            let eta_k: Vec<f64> = fit.params.polarity.row(topic).to_vec();
            for polarity in [-1.0, 0.0, 1.0] {
                let p = polar_term_distribution(&beta_k, &eta_k, polarity);
                for (rank, (term, rate)) in top_terms(&p, &corpus.vocabulary, cfg.top_n)
                    .iter()
                    .enumerate()
                {
                    rows.push(format!(
                        "{},{},{},{},{},{}",
                        corpus.session,
                        topic,
                        polarity as i32,
                        rank + 1,
                        term,
                        fmt_f64(*rate)
                    ));
                }
            }
        }
    }
    persist::write_csv(
        &dir.join("top_terms.csv"),
        &stamp,
        "session,topic,polarity,rank,term,rate",
        &rows,
    )?;

    // speaker_summary.csv
    let mut per_speaker: BTreeMap<String, (Party, BTreeMap<u32, f64>)> = BTreeMap::new();
    for (corpus, fit) in corpora.iter().zip(&fits) {
        for (idx, speaker) in corpus.speakers.iter().enumerate() {
            per_speaker
                .entry(speaker.id.clone())
                .or_insert_with(|| (speaker.party, BTreeMap::new()))
                .1
                .insert(corpus.session, fit.params.ideal[idx]);
        }
    }
    let mut rows = Vec::new();
    for (id, (party, by_session)) in &per_speaker {
        let s = speaker_summary(id, *party, by_session);
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{}-{},{}",
            s.speaker_id,
            s.party,
            fmt_f64(s.min),
            fmt_f64(s.q1),
            fmt_f64(s.median),
            fmt_f64(s.mean),
            fmt_f64(s.q3),
            fmt_f64(s.max),
            s.sd.map(fmt_f64).unwrap_or_default(),
            s.first_session,
            s.last_session,
            s.n_sessions
        ));
    }
    persist::write_csv(
        &dir.join("speaker_summary.csv"),
        &stamp,
        "speaker_id,party,min,q1,median,mean,q3,max,sd,sessions,n_sessions",
        &rows,
    )?;

    // external correlation, when scores are supplied
    if let Some(path) = &cfg.external_scores {
        let gap = match persist::read_external_scores(path)? {
            ExternalScores::Gap(gap) => gap,
            ExternalScores::PerSpeaker(scores) => {
                let mut party_of = BTreeMap::new();
                for corpus in &corpora {
                    for speaker in &corpus.speakers {
                        party_of.insert((corpus.session, speaker.id.clone()), speaker.party);
                    }
                }
                analysis::aggregate_external_by_party(&scores, &party_of)
            }
        };
        let (r, pairs) = external_correlation(&pi_series, &gap)?;
        let rows: Vec<String> = pairs
            .iter()
            .map(|(s, a, b)| format!("{s},{},{}", fmt_f64(*a), fmt_f64(*b)))
            .collect();
        let mut columns = String::new();
        write!(
            columns,
            "# pearson_r={}\nsession,partisanship_std,external_std",
            fmt_f64(r)
        )
        .unwrap();
        persist::write_csv(
            &dir.join("external_correlation.csv"),
            &stamp,
            &columns,
            &rows,
        )?;
        println!("external correlation r = {r:.4}");
    }

    println!("analysis written to {}", dir.display());
    Ok(())
}

/// Generates scenario corpora plus truth into the output directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = derive_seed(cfg.fit.seed, SIMULATE_STREAM);
    let (corpora, truth) = generate_corpus(&cfg.scenario, seed);
    let stamp = cfg.stamp();
    let dir = cfg.corpus_dir();
    for corpus in &corpora {
        persist::write_session_corpus(&dir, corpus, &stamp)?;
    }
    persist::write_truth(&cfg.truth_dir(), &truth, &stamp)?;
    println!(
        "simulated scenario {:?}: {} sessions into {}",
        cfg.scenario.name,
        corpora.len(),
        cfg.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    version: String,
    config_hash: String,
    seed: u64,
    scenario: String,
    sessions: Vec<crate::synth::SessionRecovery>,
    links: Vec<crate::chain::LinkConsistency>,
    elbo_improved: Vec<Option<bool>>,
    failures: Vec<String>,
}

/// Mean of the last ten smoothed ELBO points versus the first ten; `None`
/// when the trace is too short to compare.
pub fn elbo_improved(trace: &[(u64, f64)]) -> Option<bool> {
    if trace.len() < 20 {
        return None;
    }
    let first: f64 = trace[..10].iter().map(|&(_, e)| e).sum::<f64>() / 10.0;
    let last: f64 = trace[trace.len() - 10..]
        .iter()
        .map(|&(_, e)| e)
        .sum::<f64>()
        / 10.0;
    Some(last > first)
}

/// Scores fits against stored truth and enforces the recovery thresholds.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let corpora = load_all_corpora(cfg)?;
    let fits = load_fits(cfg, &corpora)?;
    let truth = persist::read_truth(&cfg.truth_dir())?;
    let chain = ChainResult {
        sessions: corpora.iter().map(|c| c.session).collect(),
        alignments: corpora
            .windows(2)
            .map(|w| align_vocabulary(&w[0].vocabulary, &w[1].vocabulary))
            .collect(),
        fits,
    };
    let report = recovery_report(&chain, &truth)?;
    let links = consistency_report(&chain, &corpora);

    let mut failures = Vec::new();
    for r in &report {
        if r.ideal_correlation < MIN_IDEAL_CORRELATION {
            failures.push(format!(
                "session {}: ideal correlation {:.4} < {MIN_IDEAL_CORRELATION}",
                r.session, r.ideal_correlation
            ));
        }
        if r.mean_topic_cosine < MIN_TOPIC_COSINE {
            failures.push(format!(
                "session {}: topic cosine {:.4} < {MIN_TOPIC_COSINE}",
                r.session, r.mean_topic_cosine
            ));
        }
        // The partisanship bound is calibrated on the single-session
        // benchmark; multi-session runs report the metric ungated and are
        // judged on topic identity and orientation instead.
        if truth.scenario.n_sessions == 1 {
            if let Some(err) = r.partisanship_rel_error {
                if err > MAX_PARTISANSHIP_REL_ERROR {
                    failures.push(format!(
                        "session {}: partisanship error {:.4} > {MAX_PARTISANSHIP_REL_ERROR}",
                        r.session, err
                    ));
                }
            }
        }
    }
    for link in &links {
        if !link.identity_permutation {
            failures.push(format!(
                "link {}-{}: topic matching is not the identity ({:?})",
                link.from_session, link.to_session, link.topic_permutation
            ));
        }
        match link.ideal_correlation {
            Some(c) if c <= 0.0 => failures.push(format!(
                "link {}-{}: shared-speaker ideal correlation {c:.4} <= 0",
                link.from_session, link.to_session
            )),
            _ => {}
        }
    }
    let improvements: Vec<Option<bool>> = chain
        .fits
        .iter()
        .map(|f| elbo_improved(&f.elbo_trace))
        .collect();
    for (i, improved) in improvements.iter().enumerate() {
        if *improved == Some(false) {
            failures.push(format!(
                "session {}: smoothed ELBO did not improve",
                chain.sessions[i]
            ));
        }
    }

    let eval = EvalReport {
        version: persist::VERSION.to_owned(),
        config_hash: format!("{:016x}", cfg.hash()),
        seed: cfg.fit.seed,
        scenario: truth.scenario.name.clone(),
        sessions: report,
        links,
        elbo_improved: improvements,
        failures: failures.clone(),
    };
    persist::write_json(&cfg.out.join("metrics.json"), &eval)?;

    for r in &eval.sessions {
        println!(
            "session {}: ideal corr {:.4}, topic cosine {:.4}, polarity cosine {:.4}{}",
            r.session,
            r.ideal_correlation,
            r.mean_topic_cosine,
            r.polarity_cosine,
            r.partisanship_rel_error
                .map(|e| format!(", partisanship err {e:.4}"))
                .unwrap_or_default()
        );
    }
    if failures.is_empty() {
        println!("all recovery thresholds met");
        Ok(())
    } else {
        Err(CliError::ThresholdFailure(failures.join("\n")))
    }
}
