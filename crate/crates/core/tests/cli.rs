use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtgc::analysis::MetricTrace;
use mtgc::config::{load_config, parse_config, DataSource, StepSize, TopologySpec};
use mtgc::engine::CorrectionMode;

fn mtgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtgc")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn standard() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/standard.toml")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = "seeds = [1, 2]\n[task]\ndim = 3\n[topology]\ngroups = 2\nclients_per_group = 2\n[train]\ngamma = 0.05\nrounds = 4\ngroup_rounds = 2\nlocal_steps = 2\n[metrics]\nthreshold = 1e-1\n";

fn only_subdir(dir: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.pop().unwrap()
}

#[test]
fn standard_config_matches_golden() {
    let spec = load_config(standard()).unwrap();
    assert_eq!(spec.to_toml(), include_str!("data/standard.canonical.toml"));
    assert_eq!(spec.spec_hash(), "d84b9fef99ba1a2f");
    assert_eq!(
        spec.topology,
        TopologySpec::TwoLevel {
            clients_per_group: vec![4; 4]
        }
    );
    assert_eq!(spec.train.gamma, StepSize::Auto);
    assert_eq!(
        (spec.train.rounds, spec.train.group_rounds, spec.train.local_steps),
        (100, 5, 5)
    );
    assert_eq!(spec.train.mode, CorrectionMode::Full);
    let DataSource::Synthetic(s) = &spec.task.source else {
        panic!("synthetic source expected")
    };
    assert_eq!((s.dim, s.seed), (10, 1));
}

#[test]
fn run_writes_the_output_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("runs");
    let out = mtgc(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_subdir(&out_dir);
    let hash = run.file_name().unwrap().to_str().unwrap().to_string();
    assert_eq!(hash, parse_config(SMALL).unwrap().spec_hash());
    for seed in ["1", "2"] {
        let trace = MetricTrace::read_csv(run.join(seed).join("metrics.csv")).unwrap();
        assert_eq!(trace.records.len(), 4 * 2 + 1);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["spec_hash"], hash.as_str());
    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(summary.lines().count() >= 2, "{summary}");
    assert_eq!(
        parse_config(&fs::read_to_string(run.join("config.toml")).unwrap())
            .unwrap()
            .spec_hash(),
        hash
    );
}

#[test]
fn seed_override_and_rerun_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = mtgc(&[
            "run",
            "--config",
            &cfg,
            "--seed",
            "9",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        let run = only_subdir(&out_dir);
        assert!(!run.join("1").exists());
        csvs.push(fs::read(run.join("9/metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn config_errors_exit_1_with_positions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[train]\nrounds = 3\nmode = \"fast\"\n");
    let out = mtgc(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.gamma") && err.contains("fast"), "{err}");
    assert!(err.contains("3:"), "{err}");
    assert_eq!(code(&mtgc(&["validate", "--config", &cfg])), 1);
    assert_eq!(code(&mtgc(&["run", "--bogus"])), 1);
}

#[test]
fn missing_files_exit_3() {
    assert_eq!(code(&mtgc(&["run", "--config", "/nonexistent/x.toml"])), 3);
    assert_eq!(code(&mtgc(&["compare", "/nonexistent/metrics.csv"])), 3);
}

#[test]
fn divergence_exits_2_and_records_status() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("gamma = 0.05", "gamma = 50.0")
        .replace("rounds = 4", "rounds = 200");
    let cfg = write(dir.path(), "hot.toml", &text);
    let out_dir = dir.path().join("runs");
    let out = mtgc(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_subdir(&out_dir);
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"diverged\""), "{manifest}");
    assert!(run.join("1/metrics.csv").exists());
}

#[test]
fn validate_reports_hash_and_sweep_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        &format!("{SMALL}[sweep]\nlocal_steps = [1, 2]\nmode = [\"full\", \"none\"]\n"),
    );
    let out = mtgc(&["validate", "--config", &cfg]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sweep: 4 cells"), "{text}");
    // a sweep table is rejected by `run`
    assert_eq!(code(&mtgc(&["run", "--config", &cfg])), 1);
}

#[test]
fn sweep_writes_ranked_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        &format!("{SMALL}[sweep]\nmode = [\"full\", \"none\"]\n"),
    );
    let out_dir = dir.path().join("runs");
    let out = mtgc(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dirs: Vec<PathBuf> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
    let sweep = dirs
        .iter()
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("sweep-"))
        .unwrap();
    let summary = fs::read_to_string(sweep.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
    assert_eq!(dirs.len(), 3);
}

#[test]
fn compare_reports_speedups() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for mode in ["none", "full"] {
        let cfg = write(
            dir.path(),
            &format!("{mode}.toml"),
            &SMALL.replace("rounds = 4", &format!("rounds = 30\nmode = \"{mode}\"")),
        );
        let out_dir = dir.path().join(mode);
        assert_eq!(
            code(&mtgc(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()])),
            0
        );
        paths.push(
            only_subdir(&out_dir)
                .join("1/metrics.csv")
                .to_str()
                .unwrap()
                .to_string(),
        );
    }
    let out = mtgc(&[
        "compare",
        &paths[0],
        &paths[1],
        "--label",
        "hfedavg",
        "--label",
        "mtgc",
        "--threshold",
        "1e-2",
        "--csv",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("hfedavg") && text.contains("mtgc"), "{text}");
    let table = mtgc(&["compare", &paths[0], &paths[1], "--threshold", "1e-2"]);
    assert_eq!(code(&table), 0);
}

#[test]
fn oracle_prints_reference_values() {
    let out = mtgc(&["oracle"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("stepsize_bound(L=1,E=1,H=1) = 2.5e-2"), "{text}");
    assert!(text.contains("lipschitz(A=diag(2,1)) = 4e0"), "{text}");
    assert!(text.contains("multilevel_m2_deviation = 0e0"), "{text}");
}

#[test]
fn multilevel_run_writes_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[task]\ndim = 3\nlevel_shifts = [1.0, 1.0, 1.0]\n[topology]\nfanouts = [2, 2, 2]\nperiods = [8, 4, 2]\n[train]\ngamma = 0.02\nrounds = 3\n";
    let cfg = write(dir.path(), "tree.toml", text);
    let out_dir = dir.path().join("runs");
    let out = mtgc(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_subdir(&out_dir);
    let events = fs::read_to_string(run.join("0/events.csv")).unwrap();
    assert!(events.starts_with("r,level,node_path\n1,3,0.0\n"), "{events}");
    assert!(events.contains("23,1,root"), "{events}");
}
