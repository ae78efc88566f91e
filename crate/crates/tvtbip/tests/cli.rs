//! End-to-end runs of the `tvtbip` binary: the preprocess/fit/report
//! pipeline on a toy corpus, the simulate/eval loop, and the documented
//! exit codes.

mod support;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tvtbip::corpus::Party;
use tvtbip::inference::{posterior_means, SessionFit, VariationalState};
use tvtbip::persist::{self, Stamp};
use tvtbip::synth::{generate_corpus, Scenario};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tvtbip")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn tvtbip")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Three sessions, two speakers per party, heavily overlapping vocabulary.
fn toy_jsonl(path: &Path) {
    let mut lines = Vec::new();
    let phrases = [
        "tax reform budget plan today",
        "war budget spending freeze now",
        "tax reform spending freeze votes",
        "war budget tax reform deal",
    ];
    for session in 1..=3u32 {
        for (s, (speaker, party)) in [("alice", "D"), ("ada", "D"), ("bob", "R"), ("burt", "R")]
            .iter()
            .enumerate()
        {
            for i in 0..3 {
                let text = phrases[(s + i + session as usize) % phrases.len()];
                lines.push(format!(
                    r#"{{"speech_id":"{session}-{speaker}-{i}","session":{session},"speaker_id":"{speaker}","speaker_name":"{speaker}","party":"{party}","text":"{text}"}}"#
                ));
            }
        }
    }
    std::fs::write(path, lines.join("\n")).unwrap();
}

fn read_data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(str::to_owned)
        .collect()
}

#[test]
fn preprocess_fit_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("speeches.jsonl");
    toy_jsonl(&input);
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();

    // thresholds (1,1): nothing is filtered, after equals before
    let output = run(&[
        "preprocess",
        "--corpus",
        input.to_str().unwrap(),
        "--out",
        out_str,
        "--min-speeches",
        "1",
        "--min-speakers",
        "1",
    ]);
    assert_exit(&output, 0);
    let summary = read_data_rows(&out.join("corpus").join("preprocess_summary.csv"));
    assert_eq!(
        summary[0],
        "session,speakers_before,speakers_after,speeches_before,speeches_after,avg_speeches_before,avg_speeches_after"
    );
    assert_eq!(summary.len(), 4); // header + 3 sessions
    for row in &summary[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], cols[2], "speakers unchanged at (1,1)");
        assert_eq!(cols[3], cols[4], "speeches unchanged at (1,1)");
    }

    let output = run(&[
        "fit", "--out", out_str, "--seed", "3", "--topics", "2", "--iters", "400", "--batch", "12",
    ]);
    assert_exit(&output, 0);
    let manifest = persist::read_manifest(&out.join("fits")).unwrap();
    assert_eq!(manifest.sessions.len(), 3);
    assert_eq!(manifest.alignments.len(), 2);

    let output = run(&["report", "--out", out_str]);
    assert_exit(&output, 0);
    let analysis = out.join("analysis");
    let partisanship = read_data_rows(&analysis.join("partisanship.csv"));
    assert_eq!(partisanship[0], "session,pi_bar,ci_low,ci_high");
    assert_eq!(partisanship.len(), 4); // header + one row per session
    assert!(!analysis.join("external_correlation.csv").exists());

    let ideal = read_data_rows(&analysis.join("ideal_points.csv"));
    assert_eq!(ideal.len(), 1 + 3 * 4); // header + 4 speakers x 3 sessions
    assert!(read_data_rows(&analysis.join("top_terms.csv")).len() > 1);
    assert!(read_data_rows(&analysis.join("speaker_summary.csv")).len() == 1 + 4);
    // two session pairs of stability rows, 2 topics each
    assert_eq!(
        read_data_rows(&analysis.join("topic_stability.csv")).len(),
        1 + 4
    );

    // affine external scores give correlation exactly 1
    let mut scores = vec!["session,score".to_string()];
    for row in &partisanship[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        let pi: f64 = cols[1].parse().unwrap();
        scores.push(format!("{},{}", cols[0], 2.0 * pi + 5.0));
    }
    let scores_path = dir.path().join("scores.csv");
    std::fs::write(&scores_path, scores.join("\n")).unwrap();
    let output = run(&[
        "report",
        "--out",
        out_str,
        "--external-scores",
        scores_path.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let corr_file = std::fs::read_to_string(analysis.join("external_correlation.csv")).unwrap();
    let r_line = corr_file
        .lines()
        .find(|l| l.starts_with("# pearson_r="))
        .expect("correlation header");
    let r: f64 = r_line.trim_start_matches("# pearson_r=").parse().unwrap();
    assert!((r - 1.0).abs() < 1e-9, "r = {r}");
}

#[test]
fn preprocess_missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "preprocess",
        "--corpus",
        dir.path().join("nope.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&output, 2);
}

#[test]
fn preprocess_malformed_line_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, "{ not json }\n").unwrap();
    let output = run(&[
        "preprocess",
        "--corpus",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&output, 2);
    assert!(String::from_utf8_lossy(&output.stderr).contains("line 1"));
}

#[test]
fn preprocess_overfiltered_corpus_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tiny.jsonl");
    std::fs::write(
        &input,
        r#"{"speech_id":"1","session":1,"speaker_id":"a","speaker_name":"A","party":"D","text":"hello world"}"#,
    )
    .unwrap();
    let output = run(&[
        "preprocess",
        "--corpus",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        // defaults: min_speeches 24, min_speakers 10
    ]);
    assert_exit(&output, 3);
}

#[test]
fn report_with_single_party_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("oneparty.jsonl");
    let mut lines = Vec::new();
    for i in 0..4 {
        lines.push(format!(
            r#"{{"speech_id":"{i}","session":1,"speaker_id":"d{i}","speaker_name":"D{i}","party":"D","text":"tax reform budget plan"}}"#
        ));
    }
    std::fs::write(&input, lines.join("\n")).unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert_exit(
        &run(&[
            "preprocess",
            "--corpus",
            input.to_str().unwrap(),
            "--out",
            out_str,
            "--min-speeches",
            "1",
            "--min-speakers",
            "1",
        ]),
        0,
    );
    assert_exit(
        &run(&[
            "fit", "--out", out_str, "--topics", "1", "--iters", "50", "--batch", "4",
        ]),
        0,
    );
    let output = run(&["report", "--out", out_str]);
    assert_exit(&output, 5);
}

/// Writes fit files whose posterior means are the truth itself.
fn inject_truth_as_fit(out: &Path, scenario: &Scenario, seed: u64) -> PathBuf {
    let corpus_dir = out.join("corpus");
    let sessions = persist::list_corpus_sessions(&corpus_dir).unwrap();
    let truth = persist::read_truth(&out.join("truth")).unwrap();
    let fits_dir = out.join("fits");
    let stamp = Stamp {
        config_hash: 0,
        seed,
    };
    let _ = scenario;
    for (idx, session) in sessions.iter().enumerate() {
        let corpus = persist::read_session_corpus(&corpus_dir, *session).unwrap();
        let p = &truth.params[idx];
        let (d, k) = p.doc_topic.dim();
        let mut state = VariationalState::zeros(d, k, p.topic_term.ncols(), p.ideal.len());
        state.doc_topic_loc = p.doc_topic.mapv(f64::ln);
        state.topic_term_loc = p.topic_term.mapv(f64::ln);
        state.polarity_loc = p.polarity.clone();
        state.ideal_loc = p.ideal.clone();
        state.doc_topic_log_scale.fill(-30.0);
        state.topic_term_log_scale.fill(-30.0);
        state.polarity_log_scale.fill(-30.0);
        state.ideal_log_scale.fill(-30.0);
        let params = posterior_means(&state);
        // a trace long enough for the improvement check, strictly rising
        let elbo_trace: Vec<(u64, f64)> = (1..=25u64).map(|i| (i * 100, i as f64)).collect();
        let fit = SessionFit {
            state,
            params,
            elbo_trace,
            clamp_events: 0,
        };
        persist::write_session_fit(&fits_dir, &corpus, &fit, &stamp).unwrap();
    }
    fits_dir
}

#[test]
fn eval_with_injected_truth_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert_exit(
        &run(&[
            "simulate",
            "--out",
            out_str,
            "--seed",
            "11",
            "--scenario",
            "chain",
        ]),
        0,
    );
    inject_truth_as_fit(&out, &Scenario::chain(), 11);
    let output = run(&["eval", "--out", out_str]);
    assert_exit(&output, 0);
    let metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"failures\":[]"));
}

#[test]
fn eval_with_poor_fit_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert_exit(
        &run(&[
            "simulate",
            "--out",
            out_str,
            "--seed",
            "13",
            "--scenario",
            "standard",
        ]),
        0,
    );
    // 20 steps cannot recover anything
    assert_exit(
        &run(&[
            "fit", "--out", out_str, "--seed", "13", "--topics", "3", "--iters", "20", "--batch",
            "16",
        ]),
        0,
    );
    let output = run(&["eval", "--out", out_str]);
    assert_exit(&output, 6);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("recovery thresholds failed"), "{stderr}");
}

#[test]
fn simulate_zero_polarization_skips_partisanship_metric() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    let config = dir.path().join("flat.conf");
    std::fs::write(
        &config,
        "scenario = standard\nscenario_gap = 0\nscenario_terms = 40\nscenario_docs = 60\nscenario_speakers = 6\n",
    )
    .unwrap();
    assert_exit(
        &run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_str,
            "--seed",
            "17",
        ]),
        0,
    );
    inject_truth_as_fit(&out, &Scenario::standard(), 17);
    let output = run(&["eval", "--out", out_str]);
    assert_exit(&output, 0);
    let metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"partisanship_rel_error\":null"));
}

#[test]
fn standard_scenario_full_pipeline_exits_0() {
    // simulate, fit at the benchmark settings, eval: thresholds met
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert_exit(
        &run(&[
            "simulate",
            "--out",
            out_str,
            "--seed",
            "7",
            "--scenario",
            "standard",
        ]),
        0,
    );
    assert_exit(
        &run(&[
            "fit", "--out", out_str, "--seed", "7", "--topics", "3", "--iters", "20000", "--batch",
            "64",
        ]),
        0,
    );
    let output = run(&["eval", "--out", out_str]);
    assert_exit(&output, 0);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("all recovery thresholds met"), "{stdout}");
}

#[test]
fn simulated_corpora_satisfy_invariants_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_str = out.to_str().unwrap();
    assert_exit(
        &run(&[
            "simulate",
            "--out",
            out_str,
            "--seed",
            "29",
            "--scenario",
            "chain",
        ]),
        0,
    );
    let corpus_dir = out.join("corpus");
    let sessions = persist::list_corpus_sessions(&corpus_dir).unwrap();
    assert_eq!(sessions, vec![1, 2]);
    let (corpora, truth) = generate_corpus(
        &Scenario::chain(),
        tvtbip::derive_seed(29, tvtbip::cli::SIMULATE_STREAM),
    );
    for session in sessions {
        let corpus = persist::read_session_corpus(&corpus_dir, session).unwrap();
        assert_eq!(corpus.check_invariants(), Ok(()));
        assert_eq!(corpus, corpora[(session - 1) as usize]);
        let both_parties = corpus.speakers.iter().any(|s| s.party == Party::D)
            && corpus.speakers.iter().any(|s| s.party == Party::R);
        assert!(both_parties);
    }
    assert_eq!(truth.params.len(), 2);
}
