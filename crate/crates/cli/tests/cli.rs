use std::fs;
use std::path::Path;

use gmm_ddpm_cli::config::{parse_config, ExperimentConfig, Mode};
use gmm_ddpm_cli::fit::FitSummary;
use gmm_ddpm_cli::{parse_seeds, run_cli};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["gmm-ddpm"];
    argv.extend_from_slice(args);
    run_cli(argv)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// A fast two-stage config.
const SMALL: &str = r#"{
  "mixture": {"symmetric_norm": {"d": 4, "norm": 1.5}},
  "data": {"n": 4000},
  "stages": [
    {"t": "auto", "eta": 0.05, "steps": 200, "batch_size": 2000},
    {"t": 0.1, "eta": 0.05, "steps": 50, "batch_size": 4000}
  ]
}"#;

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["fit", "two_stage", "--out", o, "--bogus"]), 2);
    assert_eq!(run(&["fit", "nope", "--out", o]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["verify", "--check", "nope", "--out", o]), 2);
    assert_eq!(run(&["fit", "two_stage", "--seeds", "3..1", "--out", o]), 2);
    assert_eq!(run(&["fit", "two_stage", "--threads", "0", "--out", o]), 2);
    assert!(!out.exists());
}

#[test]
fn bad_configs_name_the_field() {
    let e = parse_config(
        r#"{"stages": [{"t": 0.1, "eta": 0.05, "stpes": 3, "batch_size": 10}]}"#,
        "c.json",
    )
    .unwrap_err();
    assert!(
        e.field.contains("stages[0]") && e.message.contains("stpes"),
        "{e}"
    );
    let e = parse_config(
        "{\n  \"seeds\": [0],\n  \"data\": {\"n\": \"many\"}\n}",
        "c.json",
    )
    .unwrap_err();
    assert_eq!(e.field, "data.n");
    assert_eq!(e.line, 3);
    assert!(e.to_string().starts_with("c.json:3:"), "{e}");
    let e = parse_config(r#"{"seeds": []}"#, "c.json").unwrap_err();
    assert_eq!(e.field, "seeds");
    let e = parse_config(r#"{"mixture": {"separated": {"k": 2, "d": 2}}}"#, "c.json").unwrap_err();
    assert!(e.message.contains("separation"), "{e}");
    let e = parse_config(
        r#"{"data": {"file": "/no/such/data_s{seed}.mxs"}}"#,
        "c.json",
    )
    .unwrap_err();
    assert_eq!(e.field, "data.file");
    assert!(parse_config("{", "c.json").is_err());

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write(tmp.path(), "bad.json", r#"{"algorithm": "two_stages"}"#);
    assert_eq!(
        run(&[
            "fit",
            "two_stage",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
    assert!(!out.exists());
}

#[test]
fn resolved_config_records_defaults_and_round_trips() {
    let cfg = parse_config("{}", "x").unwrap().resolve(Mode::Fit).unwrap();
    let json = cfg.to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["stages"][0]["t"], "auto");
    assert_eq!(v["stages"][0]["eta"], 1.0 / 20.0);
    assert_eq!(v["stages"][1]["eta"], 0.05);
    assert_eq!(v["stages"][1]["t"], 0.1);
    assert_eq!(v["mode"], "fit");
    let again = parse_config(&json, "resolved")
        .unwrap()
        .resolve(Mode::Fit)
        .unwrap();
    assert_eq!(again.to_json(), json);

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let c = write(tmp.path(), "c.json", SMALL);
    assert_eq!(
        run(&[
            "fit",
            "two_stage",
            "--config",
            &c,
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let echoed = fs::read_to_string(out.join("config.resolved.json")).unwrap();
    let out2 = tmp.path().join("o2");
    let c2 = write(tmp.path(), "c2.json", &echoed);
    assert_eq!(
        run(&[
            "fit",
            "two_stage",
            "--config",
            &c2,
            "--out",
            out2.to_str().unwrap()
        ]),
        0
    );
    let echoed2 = fs::read_to_string(out2.join("config.resolved.json")).unwrap();
    assert_eq!(echoed.replace("/o\"", "/o2\""), echoed2);
}

#[test]
fn projected_and_warm_start_defaults() {
    let mut cfg = ExperimentConfig::default();
    cfg.algorithm = gmm_ddpm_cli::config::Algorithm::Projected;
    cfg.data.n = 500_000;
    let r = cfg.resolve(Mode::Fit).unwrap();
    assert_eq!(r.stages.len(), 1);
    assert!(
        (serde_json::to_value(r.stages[0].t)
            .unwrap()
            .as_f64()
            .unwrap()
            - 2f64.ln())
        .abs()
            < 1e-15
    );
    assert_eq!(r.stages[0].batch_size, 500_000);
    let c = parse_config(r#"{"algorithm": "warm_start_k", "mixture": {"separated": {"k": 4, "d": 8, "separation": 6}}}"#, "x")
        .unwrap()
        .resolve(Mode::Fit)
        .unwrap();
    assert_eq!(c.stages[0].eta, 8.0 / 3.0);
}

#[test]
fn seed_lists() {
    assert_eq!(parse_seeds("0,1, 5").unwrap(), vec![0, 1, 5]);
    assert_eq!(parse_seeds("2..5,9").unwrap(), vec![2, 3, 4, 9]);
    assert!(parse_seeds("").is_err());
    assert!(parse_seeds("a").is_err());
}

#[test]
fn verify_single_check_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    assert_eq!(
        run(&["verify", "--check", "stein", "--out", out.to_str().unwrap()]),
        0
    );
    let text = fs::read_to_string(out.join("checks.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 20);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["check"], "stein");
        assert_eq!(v["outcome"], "pass");
    }
}

#[test]
fn verify_reports_failed_checks_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    // the exact-gradient surrogate case fails
    assert_eq!(
        run(&[
            "verify",
            "--check",
            "power_deviation",
            "--out",
            out.to_str().unwrap()
        ]),
        1
    );
    // controls that report their expected outcome are fine
    assert_eq!(
        run(&[
            "verify",
            "--check",
            "cross_weights",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = fs::read_to_string(out.join("checks.jsonl")).unwrap();
    let control: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(control["expected"], "fail");
    assert_eq!(control["outcome"], "fail");
    assert_eq!(control["ok"], true);
    assert_eq!(control["passed"], false);
}

#[test]
fn gen_then_fit_matches_in_memory_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write(tmp.path(), "c.json", SMALL);
    let g = tmp.path().join("g");
    assert_eq!(
        run(&[
            "gen",
            "--config",
            &c,
            "--seeds",
            "0,1",
            "--out",
            g.to_str().unwrap()
        ]),
        0
    );
    assert!(g.join("data_s0.mxs").exists() && g.join("data_s1.mxs").exists());

    let with_files = SMALL.replacen(
        "\"data\": {\"n\": 4000}",
        &format!(
            "\"data\": {{\"file\": \"{}\"}}",
            g.join("data_s{seed}.mxs").to_str().unwrap()
        ),
        1,
    );
    let with_files = with_files.replacen(
        "\"mixture\": {\"symmetric_norm\": {\"d\": 4, \"norm\": 1.5}}",
        &format!(
            "\"mixture\": {{\"file\": {{\"path\": \"{}\"}}}}",
            g.join("truth.json").to_str().unwrap()
        ),
        1,
    );
    let cf = write(tmp.path(), "files.json", &with_files);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(
        run(&[
            "fit",
            "two_stage",
            "--config",
            &cf,
            "--seeds",
            "0,1",
            "--out",
            a.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        run(&[
            "fit",
            "two_stage",
            "--config",
            &c,
            "--seeds",
            "0,1",
            "--out",
            b.to_str().unwrap()
        ]),
        0
    );
    let sa: FitSummary =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let sb: FitSummary =
        serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(sa.seeds.len(), 2);
    assert!(sa.seeds.iter().all(|s| s.final_distance < 0.3));
    for seed in [0, 1] {
        let t = fs::read_to_string(a.join(format!("trajectory_s{seed}.jsonl"))).unwrap();
        assert_eq!(t.lines().count(), 250);
    }
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write(tmp.path(), "c.json", SMALL);
    let dirs: Vec<_> = ["t1a", "t1b", "t3"]
        .iter()
        .map(|d| tmp.path().join(d))
        .collect();
    for (d, threads) in dirs.iter().zip(["1", "1", "3"]) {
        assert_eq!(
            run(&[
                "fit",
                "two_stage",
                "--config",
                &c,
                "--seeds",
                "0..3",
                "--threads",
                threads,
                "--out",
                d.to_str().unwrap()
            ]),
            0
        );
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(&dirs[0], "summary.json"),
        read(&dirs[1], "summary.json")
    );
    assert_eq!(
        read(&dirs[0], "trajectory_s2.jsonl"),
        read(&dirs[1], "trajectory_s2.jsonl")
    );
    assert_eq!(
        read(&dirs[0], "summary.json"),
        read(&dirs[2], "summary.json")
    );
}

#[test]
fn bench_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "data": {"n": 2000},
      "bench": {"cells": [{"d": 2, "norm": 2.0, "n": 2000}, {"d": 3, "norm": 3.0, "n": 3000}]},
      "baseline": {"steps": 20}
    }"#;
    let c = write(tmp.path(), "c.json", cfg);
    let out = tmp.path().join("b");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["report", "--out", o]), 2);
    assert_eq!(
        run(&["bench", "--config", &c, "--seeds", "0,1", "--out", o]),
        0
    );
    let mut rdr = csv::Reader::from_path(out.join("bench.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(run(&["fit", "power_iter", "--config", &c, "--out", o]), 0);
    assert_eq!(run(&["report", "--out", o]), 0);
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("## Fit: power_iter") && md.contains("## Bench"));
}

#[test]
fn algorithm_and_truth_must_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write(
        tmp.path(),
        "c.json",
        r#"{"mixture": {"separated": {"k": 3, "d": 3, "separation": 6}}, "data": {"n": 500}}"#,
    );
    let out = tmp.path().join("o");
    assert_eq!(
        run(&[
            "fit",
            "two_stage",
            "--config",
            &c,
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
    assert_eq!(
        run(&["fit", "em", "--config", &c, "--out", out.to_str().unwrap()]),
        0
    );
}
