use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ternatraj_cli::commands::parse_metrics_csv;
use ternatraj_cli::{CliError, RunConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ternatraj"));
    c.env_remove("TERNATRAJ_OUT_ROOT");
    c
}

fn run(root: &Path, args: &[&str]) -> Output {
    bin().arg("--out-root").arg(root).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small, fast settings shared by the pipeline tests.
const FAST: &[&str] = &[
    "--set",
    "data.synth_agents=3",
    "--set",
    "data.precision=0",
    "--set",
    "tokenizer.vocab_size=60",
    "--set",
    "model.d_model=16",
    "--set",
    "model.d_ff=32",
    "--set",
    "model.n_heads=2",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.max_steps=6",
    "--set",
    "train.lr=1e-3",
];

fn tokenizer(root: &Path) -> PathBuf {
    let mut args = vec!["tokenizer-train", "--out", "tok"];
    args.extend_from_slice(FAST);
    ok(&run(root, &args));
    root.join("tok/vocab.txt")
}

#[test]
fn config_round_trips_through_text() {
    let mut c = RunConfig::default();
    c.set("train.lr", "3e-4").unwrap();
    c.set("sweep.modes", "none, weight").unwrap();
    c.set("train.max_steps", "17").unwrap();
    let mut back = RunConfig::default();
    back.apply_text(&c.to_text(), "resolved").unwrap();
    assert_eq!(back, c);
}

#[test]
fn config_rejects_unknown_and_bad_values() {
    let mut c = RunConfig::default();
    assert!(matches!(c.set("train.learning_rate", "1"), Err(CliError::UnknownKey(_))));
    assert!(matches!(c.set("train.lr", "fast"), Err(CliError::BadValue { .. })));
    assert!(matches!(c.set("quant.mode", "ternary"), Err(CliError::BadValue { .. })));
    let e = c.apply_text("# comment\n\ntrain.lr = 1e-3\nmodel.width = 3\n", "f.conf").unwrap_err();
    assert!(matches!(e, CliError::Config { line: 4, .. }), "{e}");
    let e = c.apply_text("train.lr = 1\ntrain.lr = 2\n", "f.conf").unwrap_err();
    assert!(e.to_string().contains("duplicate"));
    assert!(c.apply_text("just words\n", "f.conf").is_err());
}

#[test]
fn example_config_file_parses() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run.conf");
    let c = RunConfig::load(&p).unwrap();
    c.validate().unwrap();
    assert_eq!(c.precision, 2);
    assert_eq!(c.sweep_lrs, vec![1e-4, 2e-4, 4e-4]);
}

#[test]
fn help_lists_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for s in ["tokenizer-train", "train", "eval", "sweep", "bench", "export", "report", "TERNATRAJ_OUT_ROOT"] {
        assert!(text.contains(s), "{s} missing from help:\n{text}");
    }
}

#[test]
fn errors_have_distinct_exit_codes_and_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bad_key = run(root, &["tokenizer-train", "--set", "bogus.key=1"]);
    let missing = run(root, &["train", "--vocab", "/nonexistent/vocab.txt"]);
    let conf = root.join("bad.conf");
    std::fs::write(&conf, "train.lr = 1e-3\nmodel.width = 3\n").unwrap();
    let bad_file = run(root, &["tokenizer-train", "--config", conf.to_str().unwrap()]);
    let codes: Vec<i32> = [&bad_key, &missing, &bad_file].iter().map(|o| o.status.code().unwrap()).collect();
    assert_eq!(codes, vec![3, 4, 3]);
    for o in [&bad_key, &missing, &bad_file] {
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error kind="), "{err}");
    }
    assert!(String::from_utf8_lossy(&missing.stderr).contains("kind=missing_file"));

    // Shape mismatch: a checkpoint whose vocabulary is smaller than the
    // tokenizer's ids.
    let vocab = tokenizer(root);
    let mut args = vec!["train", "--vocab", vocab.to_str().unwrap(), "--out", "t"];
    args.extend_from_slice(FAST);
    ok(&run(root, &args));
    let ck = root.join("t/checkpoint.ttc");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&ck, bytes).unwrap();
    let corrupt = run(root, &["export", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(corrupt.status.code(), Some(7), "{}", String::from_utf8_lossy(&corrupt.stderr));
}

#[test]
fn unknown_scene_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["tokenizer-train", "--scene", "atlantis"]);
    assert_eq!(out.status.code(), Some(9));
    assert!(String::from_utf8_lossy(&out.stderr).contains("atlantis"));
}

#[test]
fn oracle_eval_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--oracle", "--set", "eval.k=3", "--set", "data.synth_agents=3"]);
    ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    let rows = parse_metrics_csv(&csv, "metrics.csv").unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!((r.ade, r.fde, r.failure_rate), (0.0, 0.0, 0.0), "{r:?}");
        assert_eq!(r.variant, "oracle");
    }
    let avg = csv.lines().find(|l| l.starts_with("AVG,")).unwrap();
    assert!(avg.starts_with("AVG,oracle,0.0000,0.0000,"), "{avg}");

    // Against itself as baseline every delta is zero.
    let base = dir.path().join("eval/metrics.csv");
    let out = run(
        dir.path(),
        &["eval", "--oracle", "--set", "eval.k=3", "--set", "data.synth_agents=3", "--out", "eval2", "--baseline", base.to_str().unwrap()],
    );
    ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("eval2/metrics.csv")).unwrap();
    assert!(csv.starts_with("scene,variant,ADE,FDE,failure_rate,samples,dADE,dFDE\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",+0.0000,+0.0000")), "{csv}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let vocab = tokenizer(root);
    let train = |out: &str, seed: &str| {
        let mut args = vec!["train", "--vocab", vocab.to_str().unwrap(), "--seed", seed, "--out", out];
        args.extend_from_slice(FAST);
        ok(&run(root, &args));
        (
            std::fs::read(root.join(out).join("train_log.csv")).unwrap(),
            std::fs::read(root.join(out).join("checkpoint.ttc")).unwrap(),
        )
    };
    let a = train("a", "7");
    let b = train("b", "7");
    let c = train("c", "8");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    let resolved = std::fs::read_to_string(root.join("a/config.resolved.txt")).unwrap();
    assert!(resolved.contains("train.seed = 7"));
    assert!(resolved.contains("train.max_steps = 6"));
    // The resolved file is itself a valid config.
    RunConfig::load(&root.join("a/config.resolved.txt")).unwrap();
}

#[test]
fn out_root_env_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let vocab = tokenizer(root);
    for mode in ["none", "weight", "activ"] {
        let mut args = vec!["train", "--vocab", vocab.to_str().unwrap(), "--mode", mode, "--out", mode];
        args.extend_from_slice(FAST);
        let out = bin().env("TERNATRAJ_OUT_ROOT", root).args(&args).output().unwrap();
        ok(&out);
        assert!(root.join(mode).join("train_log.csv").exists());
    }
    let runs: Vec<String> = ["none", "weight", "activ"].iter().map(|m| root.join(m).display().to_string()).collect();
    let mut args = vec!["report"];
    for r in &runs {
        args.push("--run");
        args.push(r);
    }
    let out = run(root, &args);
    ok(&out);
    let txt = std::fs::read_to_string(root.join("report/report.txt")).unwrap();
    assert!(txt.contains("Ordering weight <= none < activ:"), "{txt}");
    let csv = std::fs::read_to_string(root.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for m in ["none", "weight", "activ"] {
        assert!(csv.contains(&format!(",{m},0,6,")), "{csv}");
    }
}
