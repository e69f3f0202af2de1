use std::path::Path;
use std::process::{Command, Output};

fn diffprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, budget: &str) -> String {
    config_with_samples(dir, budget, 64)
}

fn config_with_samples(dir: &Path, budget: &str, train: usize) -> String {
    let text = format!(
        "seed = 1\n\
         [model]\nbuiltin = \"resnet6_synth\"\n\
         [data]\nkind = \"synth\"\ntrain = {train}\nval = 32\n\
         [budget]\n{budget}\n\
         [train]\nepochs = 1\n"
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn analyze_prints_exact_bytes_and_both_kilobyte_units() {
    let out = diffprune(&["analyze", "--builtin", "vgg16_cifar"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("metric,value,kb,kib\n"), "{text}");
    assert!(
        text.contains("pmu_precise_bytes,131072,131.072,128.000"),
        "{text}"
    );
    assert!(text.contains("\nbottleneck,"), "{text}");
}

#[test]
fn analyze_accepts_a_width_file() {
    let dir = tempfile::tempdir().unwrap();
    let pi = dir.path().join("pi.json");
    std::fs::write(&pi, "[0.5, 0.5, 0.5, 0.5]").unwrap();
    let full = diffprune(&["analyze", "--builtin", "resnet6_synth", "--json"]);
    let half = diffprune(&[
        "analyze",
        "--builtin",
        "resnet6_synth",
        "--json",
        "--pi",
        pi.to_str().unwrap(),
    ]);
    let macs = |o: &Output| {
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["macs"].as_u64().unwrap()
    };
    assert!(macs(&half) < macs(&full));
}

#[test]
fn missed_budget_exits_with_two() {
    // One epoch of two steps never reaches the first width update.
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "macs = \"50%\"");
    let out_dir = dir.path().join("run");
    let out = diffprune(&["prune", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    for f in [
        "checkpoint.json",
        "pruned.spec",
        "telemetry.csv",
        "summary.json",
        "layers.csv",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn unreachable_budget_is_an_error_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pmu = 1");
    let out = diffprune(&[
        "prune",
        &cfg,
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget unreachable"));
}

#[test]
fn unknown_config_keys_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "macs = \"50%\"\nflops = 3");
    let out = diffprune(&["train", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flops"));
}

#[test]
fn report_on_an_empty_run_directory_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report");
    let out = diffprune(&[
        "report",
        dir.path().to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(report.join("pmu.csv")).unwrap(),
        "step,pmu_precise,pmu_imprecise\n"
    );
}

#[test]
fn exported_spec_reproduces_the_final_telemetry_row() {
    let dir = tempfile::tempdir().unwrap();
    // 80 steps: three width updates.
    let cfg = config_with_samples(dir.path(), "macs = \"90%\"", 2560);
    let run = dir.path().join("run");
    diffprune(&["prune", &cfg, "--seed", "3", "--out", run.to_str().unwrap()]);
    let export = dir.path().join("export");
    let out = diffprune(&[
        "export",
        run.join("checkpoint.json").to_str().unwrap(),
        "--out",
        export.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let spec = diffprune(&[
        "analyze",
        "--model",
        export.join("pruned.spec").to_str().unwrap(),
        "--json",
    ]);
    let a: serde_json::Value = serde_json::from_slice(&spec.stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(a["macs"], summary["usage"]["macs"]);
    assert_eq!(a["size_bytes"], summary["usage"]["size_bytes"]);
    assert_eq!(a["pmu_precise_bytes"], summary["usage"]["pmu_bytes"]);

    let telemetry = std::fs::read_to_string(run.join("telemetry.csv")).unwrap();
    let header: Vec<&str> = telemetry.lines().next().unwrap().split(',').collect();
    let last: Vec<&str> = telemetry.lines().last().unwrap().split(',').collect();
    assert!(telemetry.lines().count() > 1, "no width updates recorded");
    let col = |name: &str| {
        last[header.iter().position(|h| *h == name).unwrap()]
            .parse::<u64>()
            .unwrap()
    };
    assert_eq!(a["macs"].as_u64(), Some(col("macs")));
    assert_eq!(a["size_bytes"].as_u64(), Some(col("size_bytes")));
    assert_eq!(a["pmu_precise_bytes"].as_u64(), Some(col("pmu_precise")));
}
