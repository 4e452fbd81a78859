use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use iceot::artifacts::{mask_timing, Manifest, MANIFEST};
use iceot::{execute, Command, RunConfig, EXIT_RUN_FAILURE, EXIT_USAGE};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_iceot");

/// Small budgets so every command finishes in seconds.
fn tiny(out: &Path) -> RunConfig {
    let doc = serde_json::json!({
        "seed": 11,
        "output_dir": out,
        "data": {"days": 2},
        "fit_surface": {"n_train": 200, "n_test": 50, "train": {"max_epochs": 3}},
        "surrogate": {"sequence_length": 4, "model_dim": 8, "ff_dim": 16,
                      "train": {"max_epochs": 2}},
        "sweep": {"train": {"max_epochs": 2, "patience": 2}},
        "mpc": {"problem": {"horizon": 2, "solver": {"max_iterations": 4}},
                "closed_loop": {"warmup_steps": 8, "steps": 6}},
        "bench": {"max_iterations": 2, "closed_loop": {"warmup_steps": 8, "steps": 2}},
        "convexity": {"probes": 30, "days": 2, "train": {"max_epochs": 1}}
    });
    RunConfig::from_json(&doc.to_string()).unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn fit_surface_writes_report_grid_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("out"));
    let path = write_config(tmp.path(), &cfg);
    let st = Proc::new(BIN)
        .args(["fit-surface", "--function", "f3", "--arch", "iceot", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(0));
    let dir = tmp.path().join("out/fit-surface/f3-ic-eot");
    assert_eq!(csv_rows(&dir.join("grid.csv")), 1681);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("fit_report.json")).unwrap()).unwrap();
    for k in [
        "function",
        "architecture",
        "test_mse",
        "r2",
        "training_time_seconds",
        "mean_epoch_time_seconds",
        "epochs",
        "failure",
    ] {
        assert!(report.get(k).is_some(), "missing {k}");
    }
    let m = manifest(&dir);
    assert_eq!(m.command, "fit-surface");
    assert_eq!(m.seed, 11);
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.config, cfg);
    for a in &m.artifacts {
        assert!(dir.join(a).is_file(), "{a} listed but missing");
    }
}

fn stderr_of(args: &[&str]) -> (Option<i32>, String) {
    let o = Proc::new(BIN).args(args).output().unwrap();
    (o.status.code(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn missing_config_flag_is_a_usage_error_naming_it() {
    let (code, err) = stderr_of(&["fit-surface", "--function", "f1", "--arch", "iceot"]);
    assert_eq!(code, Some(EXIT_USAGE));
    assert!(err.contains("--config"), "{err}");
    let (code, err) = stderr_of(&["gen-data"]);
    assert_eq!(code, Some(EXIT_USAGE));
    assert!(err.contains("--config"), "{err}");
}

#[test]
fn bad_arguments_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &tiny(&tmp.path().join("out")));
    let p = path.to_str().unwrap();
    for args in [
        vec!["fit-surface", "--function", "f4", "--arch", "iceot", "--config", p],
        vec!["fit-surface", "--function", "f1", "--arch", "gru", "--config", p],
        vec!["gen-data", "--config", p, "--jobs", "0"],
        vec!["gen-data", "--config", "/nonexistent/config.json"],
        vec!["no-such-command"],
    ] {
        let (code, _) = stderr_of(&args);
        assert_eq!(code, Some(EXIT_USAGE), "{args:?}");
    }
    assert_eq!(stderr_of(&["--help"]).0, Some(0));
}

#[test]
fn unknown_config_key_is_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.json");
    std::fs::write(&path, r#"{"train": {"architectures": ["ic-eot"], "learning_rte": 0.1}}"#).unwrap();
    let (code, err) = stderr_of(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code, Some(EXIT_USAGE));
    assert!(err.contains("learning_rte"), "{err}");
}

#[test]
fn diverged_training_exits_with_run_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("out"));
    cfg.fit_surface.train.learning_rate = 1e300;
    cfg.fit_surface.train.max_epochs = 20;
    let path = write_config(tmp.path(), &cfg);
    let o = Proc::new(BIN)
        .args(["fit-surface", "--function", "f1", "--arch", "iclstm", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_RUN_FAILURE));
    let m = manifest(&tmp.path().join("out/fit-surface/f1-ic-lstm"));
    assert_eq!(m.status, "failed");
}

#[test]
fn stability_sweep_default_grid_writes_ten_telemetry_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let out = execute(Command::StabilitySweep, &cfg, 4).unwrap();
    let telemetry: Vec<&String> = out.manifest.artifacts.iter().filter(|a| a.starts_with("telemetry_")).collect();
    assert_eq!(telemetry.len(), 10);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.dir.join("sweep_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 10);
    let header = std::fs::read_to_string(out.dir.join(telemetry[0])).unwrap();
    assert!(header.starts_with("epoch,train_loss,val_loss,max_grad_norm,wall_time_s\n"));
}

#[test]
fn bench_default_horizons_give_eight_rows_per_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let out = execute(Command::BenchSolver, &cfg, 4).unwrap();
    let mut r = csv::Reader::from_path(out.dir.join("bench.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["model", "horizon", "mean_time_s", "std_time_s", "bill_eur", "degree_hours"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    for model in ["ic-eot", "ic-lstm"] {
        let h: Vec<usize> = rows.iter().filter(|r| &r[0] == model).map(|r| r[1].parse().unwrap()).collect();
        assert_eq!(h, vec![4, 8, 12, 16, 20, 24, 28, 32], "{model}");
    }
}

#[test]
fn mpc_summary_matches_a_recomputation_from_the_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let out = execute(Command::MpcRun, &cfg, 1).unwrap();
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.dir.join("mpc_summary.json")).unwrap()).unwrap();
    for (file, bill_key, dh_key) in [
        ("trajectory_mpc.csv", "bill_eur", "degree_hours"),
        ("trajectory_baseline.csv", "baseline_bill_eur", "baseline_degree_hours"),
    ] {
        let mut r = csv::Reader::from_path(out.dir.join(file)).unwrap();
        let names: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        let col = |n: &str| -> Vec<f64> {
            let j = names.iter().position(|x| x == n).unwrap();
            rows.iter().map(|r| r[j].parse().unwrap()).collect()
        };
        let bill: f64 = col("energy_kwh").iter().zip(col("price")).map(|(e, p)| e * p).sum();
        let mut dh = 0.0;
        for z in 1..=8 {
            for t in col(&format!("z{z}")) {
                dh += (cfg.mpc.problem.t_min - t).max(t - cfg.mpc.problem.t_max).max(0.0) * 0.25;
            }
        }
        assert!((bill - s[bill_key].as_f64().unwrap()).abs() < 1e-9, "{file}");
        assert!((dh - s[dh_key].as_f64().unwrap()).abs() < 1e-9, "{file}");
        assert_eq!(col("energy_kwh").len(), cfg.mpc.closed_loop.steps);
    }
}

#[test]
fn select_features_reads_a_csv_table() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("t.csv");
    let mut text = String::from("a,a_copy,noise,y\n");
    for i in 0..300 {
        let a = (i as f64 * 0.37).sin();
        let noise = ((i * 7919) % 101) as f64 / 101.0;
        text.push_str(&format!("{a},{},{noise},{}\n", 2.0 * a + 0.001, a * a + a));
    }
    std::fs::write(&table, text).unwrap();
    let mut cfg = tiny(&tmp.path().join("out"));
    cfg.selection.input = Some(table);
    cfg.selection.targets = vec!["y".into()];
    cfg.selection.config.mandatory = vec!["a".into()];
    cfg.selection.config.mi_retain_fraction = 1.0;
    let out = execute(Command::SelectFeatures, &cfg, 1).unwrap();
    let md = std::fs::read_to_string(out.dir.join("dropped_features.md")).unwrap();
    assert!(md.starts_with("| Dropped Feature | Reason (Correlated with) |"));
    assert!(md.contains("| a_copy | a (ρ=1.000) |"), "{md}");
    let sel = std::fs::read_to_string(out.dir.join("selected_features.csv")).unwrap();
    assert_eq!(sel, "feature\na\nnoise\n");
}

#[test]
fn rerun_from_embedded_config_reproduces_csv_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("first"));
    for cmd in [
        Command::GenData,
        Command::SelectFeatures,
        Command::Train,
        Command::MpcRun,
        Command::VerifyConvexity,
    ] {
        let a = execute(cmd, &cfg, 1).unwrap();
        let mut again = manifest(&a.dir).config;
        again.output_dir = tmp.path().join("second");
        let b = execute(cmd, &again, 1).unwrap();
        assert_eq!(a.manifest.artifacts, b.manifest.artifacts);
        assert_eq!(a.manifest.config_hash, cfg.hash());
        for name in a.manifest.artifacts.iter().filter(|n| n.ends_with(".csv")) {
            assert_eq!(
                mask_timing(&a.dir.join(name)).unwrap(),
                mask_timing(&b.dir.join(name)).unwrap(),
                "{} {name}",
                cmd.name()
            );
        }
    }
}

#[test]
fn sweep_results_do_not_depend_on_job_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut one = tiny(&tmp.path().join("one"));
    one.sweep.lengths = vec![5, 15];
    let mut three = one.clone();
    three.output_dir = tmp.path().join("three");
    let a = execute(Command::StabilitySweep, &one, 1).unwrap();
    let b = execute(Command::StabilitySweep, &three, 3).unwrap();
    assert_eq!(a.manifest.artifacts, b.manifest.artifacts);
    for name in a.manifest.artifacts.iter().filter(|n| n.ends_with(".csv")) {
        assert_eq!(mask_timing(&a.dir.join(name)).unwrap(), mask_timing(&b.dir.join(name)).unwrap(), "{name}");
    }
}
