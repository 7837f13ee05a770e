use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use storesim::basket::ClusterReport;
use storesim::layout::load_layout;
use storesim::sim::{run, SimConfig, SimSummary};
use storesim::stats::{min_samples, Population, SampleSizeParams};
use storesim::torus::{embed, TorusGeometry, TorusPoint};

fn fixture(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn storesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storesim")).args(args).output().unwrap()
}

fn text(o: &Output) -> (i32, String, String) {
    (
        o.status.code().unwrap(),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn samplesize_variants_agree_with_the_library() {
    let (code, out, _) = text(&storesim(&["samplesize", "--z", "1.96", "--sigma", "200", "--halfwidth", "50"]));
    assert_eq!(code, 0);
    assert!(out.contains("61.4656 → 62"), "{out}");

    let (code, out, _) = text(&storesim(&["samplesize", "--alpha", "0.05", "--sigma", "200", "--halfwidth", "50"]));
    assert_eq!(code, 0);
    assert!(out.contains("→ 62"), "{out}");

    let (code, out, _) = text(&storesim(&["samplesize", "--range", "1200", "--z", "1.96", "--halfwidth", "50"]));
    assert_eq!(code, 0);
    assert!(out.trim_end().ends_with("→ 62"), "{out}");

    let o = storesim(&["--json", "samplesize", "--z", "1.96", "--sigma", "200", "--halfwidth", "50", "--population", "1000"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let lib = min_samples(&SampleSizeParams::new(1.96, 200.0, 50.0, Population::Finite(1000)).unwrap()).unwrap();
    assert_eq!(v["n_raw"].as_f64().unwrap(), lib.n_raw);
    assert_eq!(v["n"].as_u64().unwrap(), lib.n);
}

#[test]
fn samplesize_rejects_bad_input() {
    let (code, _, err) = text(&storesim(&["samplesize", "--z", "1.96", "--halfwidth", "50"]));
    assert_eq!(code, 1);
    assert!(err.contains("--sigma") || err.contains("spread"), "{err}");
    let (code, _, err) = text(&storesim(&["samplesize", "--z", "-1", "--sigma", "1", "--halfwidth", "1"]));
    assert_eq!(code, 1, "{err}");
    let (code, _, err) = text(&storesim(&["samplesize", "--alpha", "0.05", "--z", "3", "--sigma", "1", "--halfwidth", "1"]));
    assert_eq!(code, 1);
    assert!(err.contains("inconsistent"), "{err}");
}

#[test]
fn simulate_writes_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"agents_total": 12}"#).unwrap();
    let out = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let o = storesim(&[
            "simulate", "--layout", &fixture("grid_3x3.layout.json"), "--config", path_str(&cfg), "--seed", seed, "--out",
            path_str(&p),
        ]);
        let (code, stdout, _) = text(&o);
        assert_eq!(code, 0);
        assert!(stdout.starts_with("sim "), "{stdout}");
        std::fs::read(p).unwrap()
    };
    let a = out("a.jsonl", "3");
    assert_eq!(a, out("b.jsonl", "3"));
    assert_ne!(a, out("c.jsonl", "4"));
}

#[test]
fn simulate_json_matches_library_run() {
    let o = storesim(&["--json", "simulate", "--layout", &fixture("grid_3x3.layout.json"), "--seed", "5"]);
    let (code, out, _) = text(&o);
    assert_eq!(code, 0);
    let s: SimSummary = serde_json::from_str(out.trim()).unwrap();
    let lib = run(&load_layout(fixture("grid_3x3.layout.json")).unwrap(), SimConfig { seed: 5, ..Default::default() }).unwrap();
    assert_eq!(s, lib.summary);
}

#[test]
fn simulate_errors() {
    let (code, _, err) = text(&storesim(&["simulate", "--layout", "no/such/layout.json"]));
    assert_eq!(code, 1);
    assert!(err.contains("layout not found: no/such/layout.json"), "{err}");

    let (code, _, err) = text(&storesim(&["simulate", "--layout", &fixture("offgraph.layout.json")]));
    assert_eq!(code, 1);
    assert!(err.contains("off-graph"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"agent_count": 3}"#).unwrap();
    let (code, _, err) = text(&storesim(&["simulate", "--layout", &fixture("grid_3x3.layout.json"), "--config", path_str(&cfg)]));
    assert_eq!(code, 1);
    assert!(err.contains("agent_count"), "{err}");
}

#[test]
fn inert_features_warn_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"agents_total": 2, "features": {"shoplift": true, "use_trolley": true}}"#).unwrap();
    let (code, out, err) = text(&storesim(&["simulate", "--layout", &fixture("grid_3x3.layout.json"), "--config", path_str(&cfg)]));
    assert_eq!(code, 0);
    assert!(err.contains("shoplift") && err.contains("use_trolley"), "{err}");
    assert!(!out.contains("warning"));
}

#[test]
fn torus_subcommands() {
    let (code, out, _) = text(&storesim(&["torus", "rotation", "--p", "3", "--q", "7"]));
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "alpha=3/7 recurrent period=7");

    let golden = ((5f64.sqrt() - 1.0) / 2.0).to_string();
    let (_, out, _) = text(&storesim(&["torus", "rotation", "--alpha", &golden]));
    assert!(out.contains("dense"), "{out}");

    let o = storesim(&["--json", "torus", "embed", "--theta", "0.7", "--phi", "-2", "--major", "3", "--minor", "1"]);
    let p: [f64; 3] = serde_json::from_slice(&o.stdout).unwrap();
    let want = embed(&TorusGeometry::new(3.0, 1.0).unwrap(), &TorusPoint::from_angles(0.7, -2.0));
    assert_eq!(p, want);

    let (code, out, _) = text(&storesim(&["torus", "flow", "--flow", "0,0,1,0.5", "--t1", "1", "--dt", "0.25"]));
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 6);
    assert!(out.starts_with("t,theta,phi,x,y,z"));

    let (code, out, _) = text(&storesim(&[
        "torus", "intersections", "--a", "0,0,1,0", "--b", "0,0,0,1", "--t1", "13", "--radius", "0.2",
    ]));
    assert_eq!(code, 0);
    assert!(out.starts_with("intersections 3"), "{out}");

    let (code, _, _) = text(&storesim(&["torus", "rotation", "--p", "1", "--q", "0"]));
    assert_eq!(code, 1);
}

#[test]
fn cluster_recovers_the_two_populations() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("clusters.json");
    let (code, out, err) = text(&storesim(&[
        "cluster", "--transactions", &fixture("baskets.csv"), "--layout", &fixture("grid_3x3.layout.json"), "--k", "2",
        "--seed", "1", "--out", path_str(&report_path),
    ]));
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("k=2"));
    let report = ClusterReport::load(&report_path).unwrap();
    assert_eq!(report.clusters.len(), 2);
    for c in &report.clusters {
        // the fixture's first 40 customers shop bays 1-2, the rest bays 4-5
        let low = c.member_customers.iter().filter(|m| m[1..].parse::<u32>().unwrap() < 40).count();
        assert!(low == 0 || low == c.member_customers.len(), "impure cluster {c:?}");
        assert_eq!(c.member_customers.len(), 40);
        assert_eq!(c.bay_sequence.len(), 2);
    }

    let (code, out, _) = text(&storesim(&[
        "cluster", "--transactions", &fixture("baskets.csv"), "--k-range", "1..4", "--out", path_str(&report_path),
    ]));
    assert_eq!(code, 0);
    assert!(out.starts_with("k=2"), "{out}");

    let (code, _, _) = text(&storesim(&["cluster", "--transactions", &fixture("baskets.csv"), "--out", path_str(&report_path)]));
    assert_eq!(code, 1);
}

#[test]
fn clustered_report_drives_a_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("clusters.json");
    let o = storesim(&[
        "cluster", "--transactions", &fixture("baskets.csv"), "--layout", &fixture("grid_3x3.layout.json"), "--k", "2",
        "--out", path_str(&report_path),
    ]);
    assert!(o.status.success());
    let cfg = dir.path().join("cfg.json");
    let body = serde_json::json!({
        "agents_total": 10,
        "bays_per_agent": 3,
        "trajectory_source": {"clustered": report_path},
    });
    std::fs::write(&cfg, body.to_string()).unwrap();
    let o = storesim(&["--json", "simulate", "--layout", &fixture("grid_3x3.layout.json"), "--config", path_str(&cfg)]);
    let (code, out, err) = text(&o);
    assert_eq!(code, 0, "{err}");
    let s: SimSummary = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(s.despawned, 10);
    assert_eq!(s.location_visits.values().sum::<u64>(), 30);
}

fn manifest(dir: &Path, grid: serde_json::Value, replicates: u32) -> PathBuf {
    let m = serde_json::json!({
        "experiment_id": "cli-test",
        "layout": fixture("grid_3x3.layout.json"),
        "grid": grid,
        "replicates": replicates,
        "base_seed": 1,
        "parallelism": 2,
        "sink": "sink",
    });
    let p = dir.join("manifest.json");
    std::fs::write(&p, m.to_string()).unwrap();
    p
}

#[test]
fn experiment_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), serde_json::json!({"agents_total": [4, 6]}), 2);
    let (code, out, err) = text(&storesim(&["experiment", "--manifest", path_str(&m)]));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("sims 4 failed 0"), "{out}");
    assert!(err.contains("sims done 4/4"), "{err}");

    let sink = dir.path().join("sink");
    let merged = dir.path().join("merged.jsonl");
    let (code, out, _) = text(&storesim(&["analyze", "--sink", path_str(&sink), "--merged", path_str(&merged)]));
    assert_eq!(code, 0);
    assert!(out.contains("orphans 0"), "{out}");
    let lines = std::fs::read_to_string(&merged).unwrap();
    assert!(lines.lines().all(|l| l.contains("\"experiment_id\":\"cli-test\"")));

    // a stray file in a job directory is reported and flips the exit code
    let stray = sink.join("cli-test/job-0000/00000000-0000-0000-0000-000000000000.jsonl");
    std::fs::write(&stray, "{\"sim_id\":\"00000000-0000-0000-0000-000000000000\",\"error\":\"x\"}\n").unwrap();
    let (code, out, _) = text(&storesim(&["analyze", "--sink", path_str(&sink.join("cli-test"))]));
    assert_eq!(code, 2);
    assert!(out.contains("orphans 1"), "{out}");
}

#[test]
fn experiment_partial_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // six bays per agent on a five-bay layout fails inside the simulation
    let m = manifest(dir.path(), serde_json::json!({"bays_per_agent": [2, 6], "agents_total": [3]}), 1);
    let (code, out, _) = text(&storesim(&["experiment", "--manifest", path_str(&m), "--parallelism", "1"]));
    assert_eq!(code, 2);
    assert!(out.contains("failed 1"), "{out}");
}

#[test]
fn experiment_fatal_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), serde_json::json!({"no_such_param": [1]}), 1);
    let (code, _, err) = text(&storesim(&["experiment", "--manifest", path_str(&m)]));
    assert_eq!(code, 1);
    assert!(err.contains("no_such_param"), "{err}");
    let (code, _, _) = text(&storesim(&["experiment", "--manifest", "missing.json"]));
    assert_eq!(code, 1);
}

#[test]
fn analyze_on_empty_sink() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = text(&storesim(&["analyze", "--sink", path_str(dir.path())]));
    assert_eq!(code, 1);
    assert!(err.contains("no records"), "{err}");
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        vec!["simulate"],
        vec!["experiment"],
        vec!["cluster"],
        vec!["samplesize"],
        vec!["torus"],
        vec!["torus", "rotation"],
        vec!["torus", "embed"],
        vec!["torus", "flow"],
        vec!["torus", "intersections"],
        vec!["analyze"],
    ] {
        let mut args = sub.clone();
        args.push("--help");
        let (code, out, _) = text(&storesim(&args));
        assert_eq!(code, 0, "{sub:?}");
        assert!(out.contains("Usage"), "{sub:?}");
    }
    let (code, _, err) = text(&storesim(&["simulate", "--layout", "x", "--frobnicate"]));
    assert_eq!(code, 1);
    assert!(err.contains("--frobnicate"));
}
