//! Integration, verifiers and the command line, end to end.
mod common;

use std::fs;
use std::path::Path;

use polarflow::cli::main_with_args;
use polarflow::flow::{
    continue_trajectory, integrate, read_trajectory, read_trajectory_table, setup, write_artifacts,
    InitScheme, InitSpec, IntegratorConfig, ModelKind, ModelSpec, Trajectory,
};
use polarflow::theory::{verify_onehot_limit, verify_ratio_bound, verify_sink_formation, SinkMode};

fn run(kind: ModelKind, reduced: bool, scheme: InitScheme, p: usize, seed: u64, config: IntegratorConfig) -> Trajectory {
    let s = setup(&ModelSpec { kind, reduced }, &InitSpec::new(scheme, p, seed)).unwrap();
    integrate(&s.field, &s.x0, &config).map_err(|e| e.error).unwrap()
}

fn logistic(p: usize, seed: u64, config: IntegratorConfig) -> Trajectory {
    run(ModelKind::Logistic, false, InitScheme::Assumption1, p, seed, config)
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("polarflow").chain(args.iter().copied()))
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn reduced_ratio_bound_holds_across_seeds() {
    for seed in 0..20 {
        let p = 2 + (seed as usize % 7);
        let traj = run(ModelKind::Logistic, true, InitScheme::Assumption1, p, seed, IntegratorConfig::geometric(1e4));
        let r = verify_ratio_bound(&traj).unwrap();
        assert!(r.passed, "seed {seed}: {:?}", r.witnesses);
    }
}

#[test]
fn halving_rtol_stays_within_tolerance() {
    let (rtol, atol) = (1e-8, 1e-10);
    let a = logistic(4, 3, IntegratorConfig::geometric(100.0).with_rtol(rtol));
    let b = logistic(4, 3, IntegratorConfig::geometric(100.0).with_rtol(rtol / 2.0));
    for (x, y) in a.last().state.iter().zip(&b.last().state) {
        assert!((x - y).abs() < 10.0 * (atol + rtol * x.abs()), "{x} vs {y}");
    }
}

#[test]
fn integration_is_deterministic() {
    let c = IntegratorConfig::geometric(1e3);
    assert_eq!(logistic(5, 11, c), logistic(5, 11, c));
}

#[test]
fn continuation_matches_a_single_run() {
    let c = IntegratorConfig::geometric(10.0);
    let head = logistic(4, 2, c);
    let joined = continue_trajectory(&head, 90.0).map_err(|e| e.error).unwrap();
    let direct = logistic(4, 2, IntegratorConfig::geometric(100.0));
    assert_eq!(joined.t_end(), 100.0);
    assert_eq!(&joined.samples[..head.samples.len()], &head.samples[..]);
    for (x, y) in joined.last().state.iter().zip(&direct.last().state) {
        assert!((x - y).abs() < 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn artifacts_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let traj = logistic(3, 0, IntegratorConfig::geometric(1e3));
    let paths = write_artifacts(&traj, None, dir.path().join("run")).unwrap();
    let back = read_trajectory(&paths.csv).unwrap();
    assert_eq!(back.field, traj.field);
    assert_eq!(back.samples.len(), traj.samples.len());
    for (x, y) in back.samples.iter().zip(&traj.samples) {
        assert_eq!(x.t, y.t);
        assert_eq!(x.state, y.state);
        assert_eq!(x.int_gamma, y.int_gamma);
    }
}

#[test]
fn single_row_sink_is_the_one_hot_limit() {
    let kind = ModelKind::MultiRow { rows: 1, d: 4 };
    let traj = run(kind, false, InitScheme::Assumption1, 4, 5, IntegratorConfig::geometric(1e4));
    let sink = verify_sink_formation(&traj, 0.05, SinkMode::PerRowArgmax).unwrap();
    let onehot = verify_onehot_limit(&traj, 0.05).unwrap();
    assert_eq!(sink.get("min_row_sink_mass"), Some(traj.last().max_sigma));
    assert_eq!(sink.passed, traj.last().max_sigma > 0.95);
    assert!(onehot.passed, "{:?}", onehot.witnesses);
}

#[test]
fn multirow_rows_share_a_sink() {
    let kind = ModelKind::MultiRow { rows: 5, d: 6 };
    let traj = run(kind, false, InitScheme::Assumption1, 6, 0, IntegratorConfig::geometric(1e5));
    let by_row = verify_sink_formation(&traj, 0.05, SinkMode::PerRowArgmax).unwrap();
    assert!(by_row.passed, "{:?}", by_row.witnesses);
}

#[test]
fn exit_status_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_arg(dir.path());
    assert_eq!(cli(&["run", "--experiment", "logistic", "--no-such-flag"]), 2);
    assert_eq!(cli(&["--out", out, "run", "--experiment", "logistic", "--verifiers", "bogus"]), 2);
    assert_eq!(cli(&["--out", out, "run", "--experiment", "logistic", "--p", "1"]), 2);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "experiment = \"logistic\"\n[model]\nwidth = 3\n").unwrap();
    assert_eq!(cli(&["--config", path_arg(&cfg), "--out", out, "run"]), 2);
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn exit_status_for_failed_verifier() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--out", path_arg(dir.path()), "--seeds", "0", "--t-end", "10",
        "run", "--experiment", "regression", "--verifiers", "onehot",
    ];
    assert_eq!(cli(&args), 1);
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["status"], 1);
    assert_eq!(agg["pass_counts"]["onehot"]["passed"], 0);
}

#[test]
fn exit_status_for_integrator_failure() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--out", path_arg(dir.path()), "--seeds", "0",
        "run", "--experiment", "general-norm", "--f", "identity", "--logit-offset", "0",
    ];
    assert_eq!(cli(&args), 3);
}

#[test]
fn config_file_drives_a_run_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "experiment = \"logistic\"\nseeds = [0, 1]\nt_end = 1000.0\n\n[model]\np = 3\n\n[verify]\nverifiers = [\"order\", \"repulsion\"]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&["--config", path_arg(&cfg), "--out", path_arg(&out), "--seeds", "4", "run"]), 0);
    let table = read_trajectory_table(out.join("logistic_seed4.csv")).unwrap();
    assert_eq!(table.p, 3);
    assert!(!out.join("logistic_seed0.csv").exists());
    assert!(out.join("logistic_seed4.order.json").exists());
}

#[test]
fn stored_trajectories_can_be_verified_and_exported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let run_args = [
        "--out", path_arg(&out), "--seeds", "0,1", "--t-end", "1000",
        "run", "--experiment", "logistic", "--p", "2", "--verifiers", "order,repulsion,lyapunov",
    ];
    assert_eq!(cli(&run_args), 0);
    let csv0 = out.join("logistic_seed0.csv");
    let csv1 = out.join("logistic_seed1.csv");
    let checked = dir.path().join("checked");
    assert_eq!(
        cli(&["--out", path_arg(&checked), "verify", path_arg(&csv0), path_arg(&csv1), "--verifiers", "lyapunov"]),
        0
    );
    assert!(checked.join("logistic_seed1.lyapunov.json").exists());

    let fig = dir.path().join("fig.csv");
    assert_eq!(cli(&["emit-figure-data", path_arg(&csv0), path_arg(&csv1), "--output", path_arg(&fig)]), 0);
    let samples: usize = [&csv0, &csv1].iter().map(|c| read_trajectory_table(c).unwrap().rows.len()).sum();
    let mut reader = csv::Reader::from_path(&fig).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["seed", "t", "series", "index", "value"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), samples * (3 * 2 + 4));
    // every value is the stored one, digit for digit
    let first = read_trajectory_table(&csv0).unwrap();
    let sigma1: Vec<f64> = rows
        .iter()
        .filter(|r| &r[0] == "0" && &r[2] == "sigma" && &r[3] == "1")
        .map(|r| r[4].parse().unwrap())
        .collect();
    let col = first.column("sigma_1").unwrap();
    assert_eq!(sigma1, first.rows.iter().map(|r| r[col]).collect::<Vec<_>>());

    let other = dir.path().join("p3");
    let p3 = [
        "--out", path_arg(&other), "--seeds", "0", "--t-end", "10",
        "run", "--experiment", "logistic", "--p", "3", "--verifiers", "order",
    ];
    assert_eq!(cli(&p3), 0);
    let csv_p3 = other.join("logistic_seed0.csv");
    let mixed = [
        "emit-figure-data", path_arg(&csv0), path_arg(&csv_p3),
        "--output", path_arg(&fig),
    ];
    assert_eq!(cli(&mixed), 2);
}

#[test]
fn one_hot_tensor_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    // [L=1][H=2][S=1][Q=4][K=3], all mass on key 0
    let row = "[1.0, 0.0, 0.0]";
    let head = format!("[[{row}, {row}, {row}, {row}]]");
    let tensor = format!("[[{head}, {head}]]");
    let path = dir.path().join("attn.json");
    fs::write(&path, tensor).unwrap();
    let out = dir.path().join("scores");
    for metric in ["sparsity", "sink"] {
        let args = ["--out", path_arg(&out), "analyze", path_arg(&path), "--metric", metric, "--bos-key", "0"];
        assert_eq!(cli(&args), 0, "{metric}");
        let mut reader = csv::Reader::from_path(out.join(format!("attn.{metric}.csv"))).unwrap();
        let scores: Vec<f64> = reader.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
        assert_eq!(scores, vec![1.0, 1.0], "{metric}");
    }
}
