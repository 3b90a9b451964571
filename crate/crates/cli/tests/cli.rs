//! End-to-end tests of the `brmap` binary: every subcommand, every exit
//! code, and determinism of randomized runs under a fixed seed.

use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn brmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brmap"))
        .args(args)
        .output()
        .expect("the binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_str(&stdout_of(out)).expect("stdout is one JSON document")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout_of(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn support_of(report: &Value) -> Vec<u64> {
    report["support"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect()
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[test]
fn estimate_turns_scores_into_balanced_measures() {
    let out = brmap(&["estimate", fixture("roi_basic.txt").to_str().unwrap()]);
    assert_success(&out);
    let text = stdout_of(&out);
    assert!(text.starts_with("brmap-measures v1"));
    // Scores (3, 1, 0) and (0, 1, 3) with unit mass split 3/4 : 1/4 : 0.
    assert!(text.contains("0.0 1.0 0.0 0.75"));
    assert!(text.contains("1.0 0.0 0.0 0.25"));
    assert!(text.contains("2.0 0.0 0.0 0.75"));
    assert!(text.contains("relative-mismatch 0.0"));
    assert!(text.contains("pass true"));
}

#[test]
fn estimate_rejects_all_zero_scores() {
    let out = brmap(&["estimate", fixture("roi_zero_stim.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = json_of(&out);
    assert_eq!(err["kind"], "input");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn estimate_integrates_time_series_windows() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = dir.path().join("measures.txt");
    let out = brmap(&[
        "estimate",
        fixture("ramp_timeseries.txt").to_str().unwrap(),
        "--stim-window",
        "0",
        "1",
        "--react-window",
        "0",
        "1",
        "--out",
        artifact.to_str().unwrap(),
    ]);
    assert_success(&out);
    let report = json_of(&out);
    assert_eq!(report["n_rois"], 2);
    assert_eq!(report["balanced"], true);
    assert_eq!(report["total_source"].as_f64().unwrap(), 1.0);
    // Window integrals 0.5 and 1 normalize to masses 1/3 and 2/3.
    let text = std::fs::read_to_string(&artifact).unwrap();
    let masses: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("0.0 ") || l.starts_with("1.0 "))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(masses.len(), 4, "two atoms per measure in {text}");
    for (mass, expected) in masses.iter().zip([1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]) {
        assert!((mass - expected).abs() <= 1e-12, "mass {mass} vs {expected}");
    }
}

#[test]
fn estimate_requires_windows_for_time_series() {
    let out = brmap(&["estimate", fixture("ramp_timeseries.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json_of(&out)["kind"], "input");
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

#[test]
fn solve_prefers_merging_at_low_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = brmap(&[
        "solve",
        fixture("yv.txt").to_str().unwrap(),
        "--alpha",
        "0.5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let report = json_of(&out);
    assert!((report["energy"].as_f64().unwrap() - 3.0).abs() <= 1e-9);
    assert_eq!(support_of(&report), vec![0, 1, 2]);
    assert_eq!(report["certificate"]["kind"], "global-forest-optimum");

    // The relay vertex aggregates both sources before the trunk hop.
    let dot = std::fs::read_to_string(dir.path().join("support.dot")).unwrap();
    for edge in ["v0 -> v2", "v1 -> v2", "v2 -> v3"] {
        assert!(dot.contains(edge), "missing {edge} in {dot}");
    }
    assert!(!dot.contains("v0 -> v3"));

    let svg = std::fs::read_to_string(dir.path().join("support.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);

    let tsv = std::fs::read_to_string(dir.path().join("edges.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 6);

    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(saved["instance_hash"], report["instance_hash"]);
}

#[test]
fn solve_prefers_direct_shipping_at_high_alpha() {
    let out = brmap(&["solve", fixture("yv.txt").to_str().unwrap(), "--alpha", "0.95"]);
    assert_success(&out);
    let report = json_of(&out);
    assert_eq!(support_of(&report), vec![3, 4]);
    let expected = 2.0 * 5f64.sqrt() * 0.5f64.powf(0.95);
    assert!((report["energy"].as_f64().unwrap() - expected).abs() <= 1e-9);
}

#[test]
fn solve_flags_unroutable_supply() {
    let out = brmap(&["solve", fixture("infeasible.txt").to_str().unwrap(), "--alpha", "0.5"]);
    assert_eq!(out.status.code(), Some(3));
    let err = json_of(&out);
    assert_eq!(err["kind"], "infeasible");
    let witness: Vec<u64> =
        err["witness"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert!(witness.contains(&2), "the starved sink must be named: {witness:?}");
}

#[test]
fn local_search_agrees_with_the_oracle_and_is_deterministic() {
    let path = fixture("yv.txt");
    let args = [
        "solve",
        path.to_str().unwrap(),
        "--alpha",
        "0.5",
        "--local",
        "--seed",
        "3",
        "--restarts",
        "8",
    ];
    let first = brmap(&args);
    assert_success(&first);
    let report = json_of(&first);
    assert_eq!(report["config"]["method"], "local-search");
    assert_eq!(report["config"]["seed"], 3);
    assert!((report["energy"].as_f64().unwrap() - 3.0).abs() <= 1e-9);
    assert_eq!(support_of(&report), vec![0, 1, 2]);

    let second = brmap(&args);
    // Full reports match except the wall-clock field.
    let mut a = json_of(&first);
    let mut b = json_of(&second);
    a["runtime_ms"] = 0.into();
    b["runtime_ms"] = 0.into();
    assert_eq!(a, b);
}

#[test]
fn solve_requires_an_exponent_from_somewhere() {
    // yv.txt has no [solver] alpha and none is passed.
    let out = brmap(&["solve", fixture("yv.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    // diamond.txt carries alpha 0.5 in [solver], so it solves without flags.
    let out = brmap(&["solve", fixture("diamond.txt").to_str().unwrap()]);
    assert_success(&out);
    let report = json_of(&out);
    assert_eq!(support_of(&report), vec![0, 1]);
    assert!((report["energy"].as_f64().unwrap() - 2.0).abs() <= 1e-9);
}

// ---------------------------------------------------------------------------
// bridge
// ---------------------------------------------------------------------------

#[test]
fn bridge_matches_the_scalar_closed_form() {
    let path = fixture("scalar_bridge.txt");
    let args =
        ["bridge", path.to_str().unwrap(), "--mc-paths", "2000", "--mc-seed", "7"];
    let out = brmap(&args);
    assert_success(&out);
    let report = json_of(&out);

    // Minimum effort to shift a stationary unit-leak mean by one in unit
    // time: 1 / (1 - e^-2), hit within the discretization's 1%.
    let exact = 1.0 / (1.0 - (-2.0f64).exp());
    let total = report["total_cost"].as_f64().unwrap();
    assert!((total - exact).abs() <= 0.01 * exact, "total {total} vs {exact}");

    // Matched stationary covariances: no feedback is needed at all.
    assert!(report["covariance_cost"].as_f64().unwrap() <= 1e-12);
    assert!(report["terminal_error"].as_f64().unwrap() <= 1e-4);

    // The sampled relative entropy agrees with the control effort.
    let z = report["monte_carlo"]["z_score"].as_f64().unwrap();
    assert!(z.abs() <= 3.5, "z-score {z}");

    let again = brmap(&args);
    let mut a = json_of(&out);
    let mut b = json_of(&again);
    a["runtime_ms"] = 0.into();
    b["runtime_ms"] = 0.into();
    assert_eq!(a, b, "fixed seeds must reproduce bit-identical reports");
}

#[test]
fn bridge_steers_the_solved_network() {
    let out = brmap(&["bridge", fixture("yv_dynamics.txt").to_str().unwrap()]);
    assert_success(&out);
    let report = json_of(&out);
    assert_eq!(report["dimension"], 4);
    // The implicit solve picks the merged tree at alpha = 0.5.
    let flow: Vec<f64> =
        report["flow"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(flow, vec![0.5, 0.5, 1.0, 0.0, 0.0]);
    assert!(report["terminal_error"].as_f64().unwrap() <= 1e-4);
    assert!(report["total_cost"].as_f64().unwrap() > 0.0);
}

#[test]
fn bridge_rejects_instances_without_marginals() {
    let out = brmap(&["bridge", fixture("yv.txt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json_of(&out)["kind"], "input");
}

#[test]
fn bridge_accepts_an_explicit_flow() {
    // Hand it the direct "V" routing instead of the solved "Y".
    let out = brmap(&[
        "bridge",
        fixture("yv_dynamics.txt").to_str().unwrap(),
        "--flow",
        "0,0,0,0.5,0.5",
    ]);
    assert_success(&out);
    let report = json_of(&out);
    let flow: Vec<f64> =
        report["flow"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(flow, vec![0.0, 0.0, 0.0, 0.5, 0.5]);
    assert!(report["terminal_error"].as_f64().unwrap() <= 1e-4);

    // A flow violating the divergence is refused up front.
    let out = brmap(&[
        "bridge",
        fixture("yv_dynamics.txt").to_str().unwrap(),
        "--flow",
        "1,0,0,0,0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

// ---------------------------------------------------------------------------
// hybrid
// ---------------------------------------------------------------------------

#[test]
fn hybrid_sweep_switches_support_and_writes_the_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let out = brmap(&[
        "hybrid",
        fixture("tie_dynamics.txt").to_str().unwrap(),
        "--lambda-grid",
        "0,0.25,1",
        "--seed",
        "7",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let report = json_of(&out);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);

    // Pure geometry ties; the lexicographically smaller route wins.
    assert_eq!(rows[0]["support"], serde_json::json!([0, 1]));
    // Any positive weight steers towards the route the dynamics prefer.
    assert_eq!(rows[1]["support"], serde_json::json!([2, 3]));
    assert_eq!(rows[2]["support"], serde_json::json!([2, 3]));
    assert_eq!(report["distinct_supports"], 2);

    // Totals grow with lambda (a minimum of affine functions does).
    let totals: Vec<f64> = rows.iter().map(|r| r["total"].as_f64().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{totals:?}");

    let tsv = std::fs::read_to_string(dir.path().join("envelope.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.starts_with("lambda\tsupport\tgeometric\tdynamic\ttotal"));

    let dot0 = std::fs::read_to_string(dir.path().join("support_0.dot")).unwrap();
    let dot2 = std::fs::read_to_string(dir.path().join("support_2.dot")).unwrap();
    assert!(dot0.contains("v0 -> v1"));
    assert!(dot2.contains("v0 -> v2"));
}

#[test]
fn hybrid_rejects_negative_weights() {
    let out = brmap(&[
        "hybrid",
        fixture("tie_dynamics.txt").to_str().unwrap(),
        "--lambda-grid",
        "0,-1",
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

// ---------------------------------------------------------------------------
// cost-eval
// ---------------------------------------------------------------------------

#[test]
fn cost_eval_prices_points_and_edges() {
    let dir = tempfile::tempdir().unwrap();
    let instance = dir.path().join("priced.txt");
    std::fs::write(
        &instance,
        "brmap-instance v1\n[domain]\ndim 2\nlo 0 0\nhi 2 2\n\n[vertices]\n0 0 0\n1 2 0\n\n\
         [edges]\n0 1 beta 1\n\n[divergence]\n0 1\n1 -1\n\n[cost-field]\nconstant 2\n",
    )
    .unwrap();

    let out = brmap(&[
        "cost-eval",
        instance.to_str().unwrap(),
        "--point",
        "1,1",
        "--tangent",
        "1,0",
        "--edge",
        "0,0 ; 2,0",
        "--n-sub",
        "4",
    ]);
    assert_success(&out);
    let report = json_of(&out);
    assert_eq!(report["value"].as_f64().unwrap(), 2.0);
    // Constant 2 along a length-2 segment.
    assert!((report["edge_cost"].as_f64().unwrap() - 4.0).abs() <= 1e-12);
    assert_eq!(report["n_sub"], 4);

    // A field is mandatory for this command.
    let out = brmap(&["cost-eval", fixture("yv.txt").to_str().unwrap(), "--edge", "0,0 ; 1,0"]);
    assert_eq!(out.status.code(), Some(2));
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[test]
fn validate_fingerprints_are_stable_across_round_trips() {
    for name in
        ["yv.txt", "yv_dynamics.txt", "diamond.txt", "tie_dynamics.txt", "scalar_bridge.txt"]
    {
        let path = fixture(name);
        let out = brmap(&["validate", path.to_str().unwrap()]);
        assert_success(&out);
        let hash = json_of(&out)["instance_hash"].as_str().unwrap().to_string();

        let canon = brmap(&["validate", path.to_str().unwrap(), "--emit-canonical"]);
        assert_success(&canon);
        let dir = tempfile::tempdir().unwrap();
        let rewritten = dir.path().join("canon.txt");
        std::fs::write(&rewritten, stdout_of(&canon)).unwrap();

        let again = brmap(&["validate", rewritten.to_str().unwrap()]);
        assert_success(&again);
        assert_eq!(
            json_of(&again)["instance_hash"].as_str().unwrap(),
            hash,
            "canonical round trip must preserve the fingerprint of {name}"
        );
    }
}

#[test]
fn validate_lints_structural_problems() {
    let out = brmap(&["validate", fixture("infeasible.txt").to_str().unwrap()]);
    assert_success(&out);
    let report = json_of(&out);
    assert_eq!(report["feasible"], false);
    assert!(!report["witness"].as_array().unwrap().is_empty());
    let warnings = report["warnings"].as_array().unwrap();
    assert!(
        warnings.iter().any(|w| w.as_str().unwrap().contains("vertex 2")),
        "the edgeless terminal should be flagged: {warnings:?}"
    );

    let out = brmap(&["validate", fixture("yv.txt").to_str().unwrap()]);
    let report = json_of(&out);
    assert_eq!(report["feasible"], true);
    assert!(report.get("warnings").is_none(), "clean instances carry no warnings");
}

#[test]
fn malformed_instances_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "brmap-instance v1\n[domain]\ndim 2\nlo 0 0\nhi 1 1\nbogus\n").unwrap();
    let out = brmap(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = json_of(&out);
    assert_eq!(err["kind"], "input");
    assert!(err["error"].as_str().unwrap().contains("line 6"));
}
