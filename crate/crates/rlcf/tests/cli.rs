//! End-to-end tests of the `rlcf` binary: subcommands, config layering,
//! exit codes (0 success, 1 config error, 2 runtime failure), and the report
//! charts.

use std::path::Path;
use std::process::Command;

fn rlcf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rlcf"))
}

fn small_args(dir: &Path) -> Vec<String> {
    [
        ("--seed", "4"),
        ("--classes", "6"),
        ("--d_in", "16"),
        ("--d_tok", "8"),
        ("--target_samples", "60"),
        ("--source_eval_samples", "60"),
        ("--retrieval_items", "12"),
        ("--caption_samples", "12"),
        ("--student_pairs", "10"),
        ("--scorer_pairs", "20"),
        ("--scorer_shift_pairs", "6"),
        ("--epochs", "10"),
        ("--n_views", "8"),
    ]
    .iter()
    .flat_map(|(k, v)| [k.to_string(), v.to_string()])
    .chain([
        "--bench_dir".to_string(),
        dir.join("bench").display().to_string(),
        "--ckpt_dir".to_string(),
        dir.join("ckpt").display().to_string(),
        "--out_dir".to_string(),
        dir.join("out").display().to_string(),
    ])
    .collect()
}

#[test]
fn missing_seed_is_config_error_exit_1() {
    let out = rlcf().args(["run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seed"), "stderr: {stderr}");
}

#[test]
fn unknown_key_is_config_error_exit_1() {
    let out = rlcf()
        .args(["run", "--seed", "1", "--bogus_knob", "7"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoints_are_runtime_failure_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run".to_string()];
    args.extend(small_args(dir.path()));
    // generate the benchmark but not the checkpoints; auto-pretraining off
    let mut gen_args = vec!["genbench".to_string()];
    gen_args.extend(small_args(dir.path()));
    assert_eq!(rlcf().args(&gen_args).output().unwrap().status.code(), Some(0));

    let out = rlcf().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pretrain"), "actionable message expected: {stderr}");
}

#[test]
fn full_flow_genbench_pretrain_run_report() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["genbench", "pretrain"] {
        let mut args = vec![sub.to_string()];
        args.extend(small_args(dir.path()));
        let out = rlcf().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    let mut args = vec!["run".to_string()];
    args.extend(small_args(dir.path()));
    args.extend(["--objectives".to_string(), "none,rlcf".to_string()]);
    let out = rlcf().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/results.txt").is_file());
    assert!(dir.path().join("out/traces/rlcf.jsonl").is_file());

    // sweep over steps, then a report with charts
    let mut args = vec!["sweep".to_string()];
    args.extend(small_args(dir.path()));
    args.extend([
        "--sweep_steps".to_string(),
        "1,2,3".to_string(),
        "--target_samples".to_string(),
        "30".to_string(),
    ]);
    let out = rlcf().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut args = vec!["report".to_string()];
    args.extend(small_args(dir.path()));
    args.extend(["--charts".to_string(), "true".to_string()]);
    let out = rlcf().args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/report_summary.txt").is_file());
    let acc_svg = dir.path().join("out/accuracy_vs_steps.svg");
    let ece_svg = dir.path().join("out/ece_vs_steps.svg");
    assert!(acc_svg.is_file() && ece_svg.is_file());
    let svg = std::fs::read_to_string(&acc_svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn config_file_plus_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(
        &cfg_path,
        "# tiny experiment\nseed = 4\nclasses = 6\nd_in = 16\nd_tok = 8\n\
         target_samples = 20\nsource_eval_samples = 20\nretrieval_items = 12\n\
         caption_samples = 12\nstudent_pairs = 8\nscorer_pairs = 8\n\
         scorer_shift_pairs = 4\nepochs = 5\nn_views = 4\nobjectives = none\n\
         pretrain_if_missing = true\n",
    )
    .unwrap();
    let out = rlcf()
        .args([
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--bench_dir",
            dir.path().join("b").to_str().unwrap(),
            "--ckpt_dir",
            dir.path().join("c").to_str().unwrap(),
            "--out_dir",
            dir.path().join("o").to_str().unwrap(),
            "--target_samples",
            "12",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // the flag override (12 samples) must win over the file (20)
    let results = std::fs::read_to_string(dir.path().join("o/results.txt")).unwrap();
    assert!(results.contains("none") && results.contains("  12 "), "{results}");
}
