//! Contract tests for the command-line surface: configuration resolution,
//! record round-trips, emission formats, exit codes, and byte-level
//! determinism of output files.

use std::fs;
use std::path::PathBuf;
use std::process::Command as Proc;

use bnblind_cli::{
    emit_csv, emit_json, parse_args, records_from_results, run_code, run_experiment, run_verify,
    CliError, Command, ExperimentName, OutputFormat, ResultRecord, RunConfig, OUT_DIR_ENV,
};
use bnblind_core::{Mode, NormKind};

fn small(cmd: Command) -> RunConfig {
    RunConfig {
        command: cmd,
        seed: 42,
        dims: 4,
        batch: 8,
        trials: 2,
        bn_depth: Some(2),
        norm: NormKind::Bn,
        mode: Mode::Train,
        epsilon: 0.0,
        format: OutputFormat::Csv,
        output_path: None,
    }
}

#[test]
fn defaults_resolve_as_documented() {
    let cfg = parse_args(["bnblind", "experiment", "table1"]).expect("defaults parse");
    assert_eq!(cfg.command, Command::Experiment(ExperimentName::Table1));
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.dims, 8);
    assert_eq!(cfg.batch, 128);
    assert_eq!(cfg.trials, 100);
    assert_eq!(cfg.bn_depth, None);
    assert_eq!(cfg.norm, NormKind::Bn);
    assert_eq!(cfg.mode, Mode::Train);
    assert_eq!(cfg.epsilon, 0.0);
    assert_eq!(cfg.format, OutputFormat::Csv);
    assert_eq!(cfg.output_path, None);
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"seed": 7, "trials": 3, "norm": "ln"}"#).expect("write config");
    let p = path.to_str().expect("utf8 path");

    let from_file = parse_args(["bnblind", "verify", "--config", p]).expect("file parse");
    assert_eq!(from_file.seed, 7, "file value beats the default");
    assert_eq!(from_file.trials, 3);
    assert_eq!(from_file.norm, NormKind::Ln);
    assert_eq!(from_file.dims, 8, "untouched keys keep their defaults");

    let with_flag =
        parse_args(["bnblind", "verify", "--config", p, "--seed", "9"]).expect("flag parse");
    assert_eq!(with_flag.seed, 9, "explicit flag beats the file");
    assert_eq!(with_flag.trials, 3, "file still fills unflagged keys");
}

#[test]
fn malformed_config_or_unknown_keys_are_usage_errors() {
    let dir = tempfile::tempdir().expect("tempdir");
    let bad_key = dir.path().join("bad_key.json");
    fs::write(&bad_key, r#"{"sede": 1}"#).expect("write");
    let err = parse_args(["bnblind", "verify", "--config", bad_key.to_str().unwrap()])
        .expect_err("unknown key rejected");
    assert_eq!(err.code(), 2, "unknown config key is a usage error: {}", err.message());

    let not_json = dir.path().join("not.json");
    fs::write(&not_json, "seed = 7").expect("write");
    let err = parse_args(["bnblind", "verify", "--config", not_json.to_str().unwrap()])
        .expect_err("malformed file rejected");
    assert_eq!(err.code(), 2);

    let missing = dir.path().join("absent.json");
    let err = parse_args(["bnblind", "verify", "--config", missing.to_str().unwrap()])
        .expect_err("missing file rejected");
    assert_eq!(err.code(), 3, "unreadable config file is an I/O error");
}

#[test]
fn validation_rejects_out_of_range_values() {
    let cases: [&[&str]; 5] = [
        &["bnblind", "verify", "--dims", "1"],
        &["bnblind", "verify", "--batch", "1"],
        &["bnblind", "verify", "--trials", "0"],
        &["bnblind", "experiment", "table3", "--bn-depth", "4"],
        &["bnblind", "verify", "--epsilon", "-1.0"],
    ];
    for args in cases {
        let err = parse_args(args.iter().copied()).expect_err("out-of-range value rejected");
        assert_eq!(err.code(), 2, "{args:?} → {}", err.message());
        assert!(matches!(err, CliError::Usage(_)));
    }
}

fn sample_records() -> Vec<ResultRecord> {
    vec![
        ResultRecord {
            experiment: "table1".to_string(),
            metric: "dgrad_0".to_string(),
            mean: 2.85e-7,
            std: 0.0,
            trials: 1000,
            seed: 42,
            passed: true,
        },
        ResultRecord {
            experiment: "table4".to_string(),
            metric: "odd,\"name\"".to_string(),
            mean: -1.0 / 3.0,
            std: 1.25e-300,
            trials: 7,
            seed: 9,
            passed: false,
        },
    ]
}

#[test]
fn csv_records_round_trip_including_short_floats() {
    let records = sample_records();
    let mut buf = Vec::new();
    emit_csv(&mut buf, &records).expect("emit");
    let text = String::from_utf8(buf.clone()).expect("utf8");
    assert!(
        text.contains("2.85e-7"),
        "floats use shortest round-trip rendering, got:\n{text}"
    );
    assert!(!text.contains('\r'), "line endings are bare LF");
    assert!(
        text.contains("\"odd,\"\"name\"\"\""),
        "embedded commas and quotes are quoted per RFC 4180:\n{text}"
    );

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(buf.as_slice());
    let back: Vec<ResultRecord> =
        reader.deserialize().collect::<Result<_, _>>().expect("parse back");
    assert_eq!(back, records, "record → CSV → record is lossless");
}

#[test]
fn json_records_round_trip() {
    let records = sample_records();
    let mut buf = Vec::new();
    emit_json(&mut buf, &records).expect("emit");
    let back: Vec<ResultRecord> = serde_json::from_slice(&buf).expect("parse back");
    assert_eq!(back, records, "record → JSON → record is lossless");
    let value: serde_json::Value = serde_json::from_slice(&buf).expect("generic parse");
    assert!(value.is_array(), "top level is a JSON array of objects");
}

#[test]
fn empty_emission_is_header_only_and_empty_array() {
    let mut csv_buf = Vec::new();
    emit_csv(&mut csv_buf, &[]).expect("emit");
    assert_eq!(
        String::from_utf8(csv_buf).unwrap(),
        "experiment,metric,mean,std,trials,seed,passed\n"
    );

    let mut json_buf = Vec::new();
    emit_json(&mut json_buf, &[]).expect("emit");
    assert_eq!(String::from_utf8(json_buf).unwrap(), "[]\n");
}

#[test]
fn verify_records_cover_the_assertion_families() {
    let cfg = small(Command::Verify);
    let (records, all_passed) = run_verify(&cfg).expect("verify runs");
    assert!(all_passed, "the theorem suite holds on random instances");
    let metrics: Vec<&str> = records.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(
        metrics,
        [
            "zero_assertion_max_norm",
            "nonzero_assertion_min_norm",
            "fd_residual_max",
            "closed_form_residual_max",
            "gamma_grad_norm_max"
        ]
    );
    assert!(records.iter().all(|r| r.passed));
    assert!(records[0].mean <= 1e-8, "zero norms stay under the assertion tolerance");
}

#[test]
fn table1_emits_exactly_four_rows() {
    let cfg = small(Command::Experiment(ExperimentName::Table1));
    let records = run_experiment(&cfg, ExperimentName::Table1).expect("table1 runs");
    assert_eq!(records.len(), 4);
    let metrics: Vec<&str> = records.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(metrics, ["dgrad_0", "dgrad_1", "dgrad_2", "dgrad_3"]);
    assert!(records.iter().all(|r| r.experiment == "table1" && r.seed == 42));
}

#[test]
fn records_from_results_preserves_order_and_verdicts() {
    let cfg = small(Command::Experiment(ExperimentName::SigmoidDecay));
    let results = bnblind_core::experiments::experiment_sigmoid_decay(cfg.seed).expect("runs");
    let records = records_from_results("sigmoid-decay", &results, cfg.seed);
    assert_eq!(records.len(), results.len());
    for (record, result) in records.iter().zip(&results) {
        assert_eq!(record.metric, result.name);
        assert_eq!(record.mean, result.mean);
        assert_eq!(record.std, result.std);
        assert_eq!(record.passed, result.passed());
        assert_eq!(record.experiment, "sigmoid-decay");
    }
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path_a = dir.path().join("a.csv");
    let path_b = dir.path().join("b.csv");
    for (path, label) in [(&path_a, "first"), (&path_b, "second")] {
        let code = run_code([
            "bnblind",
            "experiment",
            "table4",
            "--dims",
            "4",
            "--batch",
            "8",
            "--trials",
            "2",
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{label} table4 run succeeds");
    }
    let a = fs::read(&path_a).expect("read a");
    let b = fs::read(&path_b).expect("read b");
    assert_eq!(a, b, "identical command + config + seed ⇒ identical bytes");
    assert!(!a.is_empty());

    let path_j1 = dir.path().join("s1.json");
    let path_j2 = dir.path().join("s2.json");
    for path in [&path_j1, &path_j2] {
        let code = run_code([
            "bnblind",
            "experiment",
            "sigmoid-decay",
            "--format",
            "json",
            "--output",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    assert_eq!(fs::read(&path_j1).unwrap(), fs::read(&path_j2).unwrap());
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_eq!(run_code(["bnblind", "verify", "--trials", "0"]), 2, "usage error");
    assert_eq!(
        run_code([
            "bnblind",
            "experiment",
            "sigmoid-decay",
            "--output",
            "/nonexistent-dir/out.csv",
        ]),
        3,
        "unwritable output path is an I/O error"
    );
    let dir = tempfile::tempdir().expect("tempdir");
    let ok = dir.path().join("ok.csv");
    assert_eq!(
        run_code(["bnblind", "experiment", "sigmoid-decay", "--output", ok.to_str().unwrap()]),
        0,
        "passing experiment exits 0"
    );
}

#[test]
fn output_dir_env_var_prefixes_relative_output_paths() {
    let dir = tempfile::tempdir().expect("tempdir");
    std::env::set_var(OUT_DIR_ENV, dir.path());
    let code = run_code(["bnblind", "experiment", "sigmoid-decay", "--output", "rel.csv"]);
    std::env::remove_var(OUT_DIR_ENV);
    assert_eq!(code, 0);
    let expected = dir.path().join("rel.csv");
    assert!(expected.is_file(), "relative path lands inside the override directory");
    let text = fs::read_to_string(expected).expect("read");
    assert!(text.starts_with("experiment,metric,mean,std,trials,seed,passed\n"));
}

#[test]
fn binary_matches_the_library_exit_codes() {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_bnblind"));
    let bad = Proc::new(&exe).args(["frobnicate"]).output().expect("spawn");
    assert_eq!(bad.status.code(), Some(2), "unknown subcommand exits 2");
    assert!(!bad.stderr.is_empty(), "usage message lands on the diagnostic stream");

    let version = Proc::new(&exe).args(["--version"]).output().expect("spawn");
    assert_eq!(version.status.code(), Some(0), "--version exits 0");
    assert!(String::from_utf8_lossy(&version.stdout).contains("bnblind"));

    let help = Proc::new(&exe).args(["--help"]).output().expect("spawn");
    assert_eq!(help.status.code(), Some(0), "--help exits 0");
}
