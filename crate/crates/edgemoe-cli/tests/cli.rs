//! End-to-end checks of the `edgemoe` binary: exit codes, output files,
//! and reproducibility of identical invocations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgemoe::{MoEConfig, TokenTrace};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgemoe"))
        .args(args)
        .output()
        .expect("spawning the edgemoe binary")
}

fn assert_exit(out: &Output, code: i32, ctx: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{ctx}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("config-{seed}.json"));
    let cfg = MoEConfig::toy_default(seed);
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn gen_powerlaw(dir: &Path, cfg: &Path, tokens: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("trace-{seed}.jsonl"));
    let t = tokens.to_string();
    let s = seed.to_string();
    let run = run(&[
        "gen-trace",
        "--config", cfg.to_str().unwrap(),
        "--mode", "powerlaw",
        "--tokens", &t,
        "--seed", &s,
        "--out", out.to_str().unwrap(),
    ]);
    assert_exit(&run, 0, "gen-trace powerlaw");
    out
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_from_trace_to_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let trace = gen_powerlaw(dir.path(), &cfg, 2_000, 3);
    assert_eq!(TokenTrace::read(&trace).unwrap().decode_token_count(), 2_000);

    let plan = dir.path().join("plan.json");
    let heat = dir.path().join("heatmap.json");
    let out = run(&[
        "plan",
        "--config", cfg.to_str().unwrap(),
        "--loss", "0.02",
        "--out", plan.to_str().unwrap(),
        "--heatmap-out", heat.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "plan");
    assert!(heat.exists());
    let plan_doc = read_json(&plan);
    assert_eq!(plan_doc["p_loss"].as_f64(), Some(0.02));
    assert!(plan_doc["measured_loss"].as_f64().unwrap() <= 0.02 + 1e-9);
    assert!(plan_doc["total_bytes"].as_u64().unwrap() < 2_003_136);

    let profile = dir.path().join("profile.json");
    let out = run(&[
        "build-predictor",
        "--trace", trace.to_str().unwrap(),
        "--history", "2",
        "--out", profile.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "build-predictor");

    let cache = dir.path().join("cache.json");
    let out = run(&[
        "eval-cache",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--policy", "edgemoe",
        "--slots", "6",
        "--out", cache.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "eval-cache");
    let cache_doc = read_json(&cache);
    assert_eq!(cache_doc["policy"].as_str(), Some("edgemoe"));
    assert_eq!(cache_doc["slots"].as_u64(), Some(6));
    assert_eq!(cache_doc["decode_tokens"].as_u64(), Some(2_000));
    let ratio = cache_doc["hit_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ratio), "hit ratio {ratio}");

    let sim = dir.path().join("sim.json");
    let events = dir.path().join("events.csv");
    let out = run(&[
        "simulate",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--engine", "edgemoe",
        "--plan", plan.to_str().unwrap(),
        "--predictor", profile.to_str().unwrap(),
        "--slots", "8",
        "--event-log", events.to_str().unwrap(),
        "--out", sim.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "simulate edgemoe");
    let sim_doc = read_json(&sim);
    assert_eq!(sim_doc["report"]["engine"].as_str(), Some("edgemoe"));
    assert!(sim_doc["report"]["tpot_seconds"].as_f64().unwrap() > 0.0);
    let peak = sim_doc["report"]["peak_resident_bytes"].as_u64().unwrap();
    assert!(peak <= sim_doc["budget_bytes"].as_u64().unwrap());
    let csv = std::fs::read_to_string(&events).unwrap();
    assert!(csv.starts_with("time,resource,event,expert\n"));
    assert!(csv.lines().count() > 1);

    let cmp = dir.path().join("compare.json");
    let out = run(&[
        "compare",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--plan", plan.to_str().unwrap(),
        "--predictor", profile.to_str().unwrap(),
        "--out", cmp.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "compare all");
    assert!(String::from_utf8_lossy(&out.stdout).contains("speedup vs io_exp"));
    let cmp_doc = read_json(&cmp);
    let reports = cmp_doc["reports"].as_array().unwrap();
    let names: Vec<&str> =
        reports.iter().map(|r| r["engine"].as_str().unwrap()).collect();
    assert_eq!(names, ["io_free", "io_exp", "io_qexp", "edgemoe"]);
    let tpot = |name: &str| {
        reports
            .iter()
            .find(|r| r["engine"] == name)
            .unwrap()["tpot_seconds"]
            .as_f64()
            .unwrap()
    };
    for name in ["io_exp", "io_qexp", "edgemoe"] {
        assert!(tpot("io_free") <= tpot(name) + 1e-12, "io_free slower than {name}");
    }
    assert!(cmp_doc["speedup_vs_io_exp"]["edgemoe"].as_f64().unwrap() > 0.0);
    assert!(cmp_doc["speedup_vs_io_free"]["edgemoe"].as_f64().unwrap() <= 1.0 + 1e-12);
}

#[test]
fn powerlaw_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let a = gen_powerlaw(dir.path(), &cfg, 500, 9);
    let b = dir.path().join("again.jsonl");
    let out = run(&[
        "gen-trace",
        "--config", cfg.to_str().unwrap(),
        "--mode", "powerlaw",
        "--tokens", "500",
        "--seed", "9",
        "--out", b.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "gen-trace rerun");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn markov_gen_writes_ground_truth_beside_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let trace = dir.path().join("chain.jsonl");
    let out = run(&[
        "gen-trace",
        "--config", cfg.to_str().unwrap(),
        "--mode", "markov",
        "--tokens", "1000",
        "--seed", "4",
        "--out", trace.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "gen-trace markov");
    let truth = read_json(&dir.path().join("chain.truth.json"));
    let initial = truth["initial"].as_array().unwrap();
    assert_eq!(initial.len(), 8);
    let sum: f64 = initial.iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn no_timestamp_makes_reports_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let trace = gen_powerlaw(dir.path(), &cfg, 500, 1);

    let eval = |out: &Path, no_ts: bool| {
        let mut args = vec![
            "eval-cache",
            "--trace", trace.to_str().unwrap(),
            "--config", cfg.to_str().unwrap(),
            "--policy", "lru",
            "--slots", "4",
            "--out", out.to_str().unwrap(),
        ];
        if no_ts {
            args.push("--no-timestamp");
        }
        assert_exit(&run(&args), 0, "eval-cache");
    };

    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let stamped = dir.path().join("stamped.json");
    eval(&a, true);
    eval(&b, true);
    eval(&stamped, false);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(read_json(&a).get("generated_at").is_none());
    assert!(read_json(&stamped)["generated_at"].is_string());
}

#[test]
fn unknown_mode_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let out = run(&[
        "gen-trace",
        "--config", cfg.to_str().unwrap(),
        "--mode", "sinusoid",
        "--out", dir.path().join("x.jsonl").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "unknown mode");
}

#[test]
fn loss_outside_unit_interval_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let out = run(&[
        "plan",
        "--config", cfg.to_str().unwrap(),
        "--loss", "1.5",
        "--out", dir.path().join("plan.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "loss out of range");
    assert!(stderr(&out).contains("--loss"));
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "plan",
        "--config", dir.path().join("absent.json").to_str().unwrap(),
        "--loss", "0.1",
        "--out", dir.path().join("plan.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "missing config");
}

#[test]
fn zero_loss_plans_at_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let plan = dir.path().join("plan.json");
    let out = run(&[
        "plan",
        "--config", cfg.to_str().unwrap(),
        "--loss", "0",
        "--out", plan.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "plan at zero loss");
    let doc = read_json(&plan);
    assert!(doc["measured_loss"].as_f64().unwrap() <= 0.0);
    assert!(doc["total_bytes"].as_u64().unwrap() <= 2_003_136);
}

#[test]
fn edgemoe_engine_requires_plan_and_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let trace = gen_powerlaw(dir.path(), &cfg, 200, 2);
    let sim = dir.path().join("sim.json");

    let out = run(&[
        "simulate",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--engine", "edgemoe",
        "--out", sim.to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "edgemoe without plan");
    assert!(stderr(&out).contains("requires --plan"));

    // The predictor check fires before the plan file is opened.
    let out = run(&[
        "simulate",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--engine", "edgemoe",
        "--plan", dir.path().join("absent-plan.json").to_str().unwrap(),
        "--out", sim.to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "edgemoe without predictor");
    assert!(stderr(&out).contains("requires --predictor"));
}

#[test]
fn infeasible_budget_is_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let trace = gen_powerlaw(dir.path(), &cfg, 200, 6);
    let out = run(&[
        "simulate",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
        "--engine", "io-exp",
        "--budget-mb", "0.01",
        "--out", dir.path().join("sim.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 3, "budget below required bytes");
}

#[test]
fn trace_from_different_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = write_config(dir.path(), 0);
    let cfg_b = write_config(dir.path(), 1);
    let trace = gen_powerlaw(dir.path(), &cfg_a, 200, 8);
    let out = run(&[
        "simulate",
        "--trace", trace.to_str().unwrap(),
        "--config", cfg_b.to_str().unwrap(),
        "--engine", "io-free",
        "--out", dir.path().join("sim.json").to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "trace digest mismatch");
    assert!(stderr(&out).contains("different config"));
}
