//! The `frameflow` binary and its file formats.

use std::path::Path;
use std::process::Command;

use frameflow::cli::config::RunConfig;
use frameflow::cli::{
    exit_code, parse_m_range, parse_values, CHECKPOINT_FILE, LOSS_FILE, MANIFEST_FILE, SUMMARY_FILE,
};
use frameflow::Error;
use proptest::prelude::*;

const TINY: &str = "\
dataset = plane4d
m = 3
train_points = 40
test_points = 20
eval_points = 5
epochs = 2
batch_size = 20
hidden = 6,6
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_frameflow"));
    c.env("FRAMEFLOW_THREADS", "1");
    c
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, out: &Path) -> i32 {
    bin()
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn train_writes_outputs_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    assert_eq!(train(&cfg, &out), 0);
    for f in [CHECKPOINT_FILE, LOSS_FILE, MANIFEST_FILE, SUMMARY_FILE] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["threads"], 1);
    let report = dir.path().join("report.json");
    let code = bin()
        .args(["eval", "--checkpoint"])
        .arg(out.join(CHECKPOINT_FILE))
        .args([
            "--dataset",
            "plane4d",
            "--test-points",
            "10",
            "--eval-points",
            "3",
            "--report",
        ])
        .arg(&report)
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(0));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(r.is_object());
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train(&cfg, &a), 0);
    assert_eq!(train(&cfg, &b), 0);
    let read = |p: &Path| std::fs::read(p.join(LOSS_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    let ck = |p: &Path| std::fs::read(p.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck(&a), ck(&b));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [
        ("m = 2\n", "dataset"),
        ("dataset = sphere\nm = 2\nwidth = 3\n", "width"),
        ("dataset = sphere\nm = 2\nm = 3\n", "m"),
        ("dataset = sphere\nm = 2\nbatch_size = 0\n", "batch_size"),
    ] {
        let cfg = write_config(dir.path(), text);
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("x"))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{text}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains(&format!("`{field}`")), "{stderr}");
    }
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args([
            "eval",
            "--checkpoint",
            "/nonexistent",
            "--dataset",
            "sphere",
            "--report",
            "r.json",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_by_error_kind() {
    assert_eq!(
        exit_code(&Error::Config {
            field: "m".into(),
            message: "bad".into()
        }),
        2
    );
    assert_eq!(
        exit_code(&Error::Domain {
            value: -1.0,
            domain: "[0, 1]"
        }),
        2
    );
    assert_eq!(
        exit_code(&Error::Divergence {
            step: 3,
            total: 1e9
        }),
        3
    );
    assert_eq!(exit_code(&Error::StepBudget { steps: 10 }), 3);
    assert_eq!(exit_code(&Error::Contract("x".into())), 1);
}

#[test]
fn range_and_value_lists() {
    assert_eq!(parse_m_range("1..4").unwrap(), vec![1, 2, 3, 4]);
    assert_eq!(parse_m_range("2,5").unwrap(), vec![2, 5]);
    assert!(parse_m_range("4..1").is_err());
    assert_eq!(parse_values("1e-4,0.5,1").unwrap(), vec![1e-4, 0.5, 1.0]);
    assert!(parse_values("a,1").is_err());
}

#[test]
fn keys_lists_every_key() {
    let out = bin().arg("keys").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for (k, _) in frameflow::cli::config::KEYS {
        assert!(text.contains(k), "{k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rendered_config_parses_back(
        m in 1usize..4,
        seed in 0u64..1_000_000,
        alpha in 0.0f64..10.0,
        lr in 1e-5f64..1e-1,
        dataset in prop::sample::select(vec!["plane4d", "sphere", "torus", "swiss_roll", "paraboloid"]),
    ) {
        let text = format!("dataset = {dataset}\nm = {m}\nseed = {seed}\nalpha = {alpha:?}\nlr_start = {lr:?}\n");
        let a = RunConfig::parse(&text).unwrap();
        let b = RunConfig::parse(&a.render()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.train_config().unwrap(), b.train_config().unwrap());
    }
}
