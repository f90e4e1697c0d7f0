use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsilo::config::ExperimentConfig;
use fedsilo::fed::Checkpoint;
use fedsilo::Method;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedsilo"));
    c.env_remove("FEDSILO_OUT");
    c
}

fn small(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    };
    cfg.hyper_params.rounds = 8;
    cfg.hyper_params.local_steps = 4;
    cfg.eval_every = 4;
    cfg.partition_plan.samples_per_class = 20;
    cfg.partition_plan.val_samples_per_class = 10;
    cfg.partition_plan.eval_samples_per_class = 10;
    cfg
}

fn write_cfg(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml_string()).unwrap();
    p
}

fn stdout_path(out: &Output) -> PathBuf {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8_lossy(&out.stdout).lines().last().unwrap().trim())
}

fn run_cmd(config: &Path, out: &Path) -> Output {
    bin()
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn run_writes_r_rows_per_party_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Method::PfmFv);
    let config = write_cfg(tmp.path(), "c.toml", &cfg);
    let a = stdout_path(&run_cmd(&config, &tmp.path().join("a")));
    let b = stdout_path(&run_cmd(&config, &tmp.path().join("b")));
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    for party in 0..3 {
        let rows = metrics
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1) == Some(&party.to_string()))
            .count();
        assert_eq!(rows, 8);
    }
    for f in ["metrics.csv", "fv_trace.csv", "events.log", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("schema.txt").exists() && a.join("timing.csv").exists());
    let copied = fs::read_to_string(a.join("config.toml")).unwrap();
    let reparsed = ExperimentConfig::from_toml_str(&copied).unwrap();
    assert_eq!(reparsed.hyper_params, cfg.hyper_params);
}

#[test]
fn out_root_comes_from_env_when_flag_is_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_cfg(tmp.path(), "c.toml", &small(Method::Fedavg));
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .env("FEDSILO_OUT", tmp.path().join("env-root"))
        .output()
        .unwrap();
    let dir = stdout_path(&out);
    assert!(dir.starts_with(tmp.path().join("env-root")));
}

#[test]
fn invalid_smooth_rate_names_field_and_range() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::PfmFv);
    cfg.fv_params.smooth_rate = 0.0;
    let config = write_cfg(tmp.path(), "c.toml", &cfg);
    let out = run_cmd(&config, tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fv_params.smooth_rate") && err.contains("(0, 1]"), "{err}");
}

#[test]
fn unknown_key_and_missing_file_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let text = small(Method::Pfm).to_toml_string().replace("[seeds]", "[seeds]\nbatchng = 3");
    let config = tmp.path().join("bad.toml");
    fs::write(&config, text).unwrap();
    let out = run_cmd(&config, tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchng"));

    let out = run_cmd(&tmp.path().join("nope.toml"), tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn seed_override_changes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_cfg(tmp.path(), "c.toml", &small(Method::Fedavg));
    let plain = stdout_path(&run_cmd(&config, tmp.path()));
    let out = bin()
        .args(["run", "--seed-override", "17", "--threads", "2", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    let seeded = stdout_path(&out);
    assert_ne!(plain, seeded);
    let cfg = ExperimentConfig::from_toml_str(&fs::read_to_string(seeded.join("config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.seeds, fedsilo::config::Seeds::from_master(17));
}

#[test]
fn init_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ref.toml");
    assert!(bin().arg("init-config").arg(&path).status().unwrap().success());
    let text = fs::read_to_string(&path).unwrap();
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.to_toml_string(), text);
    for key in ["momentum = 0.9", "epsilon = 0.001", "smooth_rate = 0.01", "moving_rate = 0.01", "candidates = 3"] {
        assert!(text.contains(key), "{key}");
    }
    assert!(tmp.path().join("schema.txt").exists());
}

fn gridsearch(config: &Path, checkpoint: &Path, resolution: usize) -> Output {
    bin()
        .args(["gridsearch", "--config"])
        .arg(config)
        .arg("--checkpoint")
        .arg(checkpoint)
        .args(["--resolution", &resolution.to_string()])
        .output()
        .unwrap()
}

#[test]
fn gridsearch_over_a_run_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_cfg(tmp.path(), "c.toml", &small(Method::Fedavg));
    let dir = stdout_path(&run_cmd(&config, tmp.path()));
    let out = gridsearch(&config, &dir.join("checkpoint.bin"), 2);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("grid-2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("w0,w1,w2,score_0,score_1,score_2,total"));
}

#[test]
fn identical_backbones_give_a_constant_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_cfg(tmp.path(), "c.toml", &small(Method::Fedavg));
    let dir = stdout_path(&run_cmd(&config, tmp.path()));
    let mut cp = Checkpoint::read(&mut fs::read(dir.join("checkpoint.bin")).unwrap().as_slice()).unwrap();
    let shared = cp.trainers[0].theta.clone();
    for t in &mut cp.trainers {
        t.theta = shared.clone();
    }
    let same = tmp.path().join("same.bin");
    let mut buf = Vec::new();
    cp.write(&mut buf).unwrap();
    fs::write(&same, buf).unwrap();
    assert!(gridsearch(&config, &same, 4).status.success());
    let csv = fs::read_to_string(tmp.path().join("grid-4.csv")).unwrap();
    let totals: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(totals.len(), 15);
    assert!(totals.iter().all(|t| *t == totals[0]));
}

#[test]
fn gridsearch_rejects_non_three_party_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::Fedavg);
    cfg.partition_plan.num_parties = 2;
    cfg.partition_plan.classes_per_party = vec![4, 4];
    cfg.partition_plan.party_sample_scale = vec![1.0, 1.0];
    let config = write_cfg(tmp.path(), "c.toml", &cfg);
    let dir = stdout_path(&run_cmd(&config, tmp.path()));
    let out = gridsearch(&config, &dir.join("checkpoint.bin"), 2);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("3-party"));
}

#[test]
fn gradcheck_passes_and_detects_injected_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_cfg(tmp.path(), "c.toml", &ExperimentConfig::default());
    let ok = bin().args(["gradcheck", "--config"]).arg(&config).output().unwrap();
    assert!(ok.status.success());
    let report = String::from_utf8_lossy(&ok.stdout);
    assert!(report.contains("fd_step") && report.contains("1e-5") && report.contains("pass"), "{report}");
    let bad = bin()
        .args(["gradcheck", "--inject-gradient-error", "1e-3", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn compare_prints_one_row_per_method_and_shard() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_cfg(tmp.path(), "c.toml", &small(Method::Pfm));
    let out = bin()
        .args(["compare", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    let dir = stdout_path(&out);
    let csv = fs::read_to_string(dir.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5 * 3);
    for r in rows.iter().filter(|r| r.starts_with("centralized,")) {
        assert_eq!(r.rsplit(',').next().unwrap(), "0");
    }
    for m in Method::ALL {
        assert!(dir.join(m.name()).join("metrics.csv").exists());
    }
}
