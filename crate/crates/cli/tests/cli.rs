use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const SMALL_TRAINING: [&str; 6] = [
    "--set",
    "offline.epochs=1",
    "--set",
    "offline.corpus_sequences=2",
    "--set",
    "offline.corpus_frames=5",
];

fn uct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = uct(args);
    assert!(
        out.status.success(),
        "uct {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small model and a short synthetic suite shared by the tests below.
struct Fixture {
    _dir: TempDir,
    model: PathBuf,
    suite: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train");
        let mut args = vec!["pretrain", "--out", path(&train)];
        args.extend(SMALL_TRAINING);
        ok(&args);
        let suite = dir.path().join("suite");
        ok(&[
            "synth",
            "--set",
            "suite.sequences=2",
            "--frames",
            "10",
            "--out",
            path(&suite),
        ]);
        Fixture {
            model: train.join("model.bin"),
            suite,
            _dir: dir,
        }
    })
}

#[test]
fn track_writes_one_record_per_frame() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    ok(&[
        "synth",
        "--set",
        "suite.sequences=1",
        "--frames",
        "3",
        "--out",
        path(&seq),
    ]);
    let seq_dir = seq.join("synth00");
    let out = dir.path().join("track");
    ok(&[
        "track",
        "--sequence",
        path(&seq_dir),
        "--model",
        path(&f.model),
        "--annotate",
        "--out",
        path(&out),
    ]);
    let text = fs::read_to_string(out.join("records.txt")).unwrap();
    let records = uct::tracker::parse_records(&text).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(text.lines().count(), 3);
    for k in 1..=3 {
        assert!(out.join("frames").join(format!("{k:04}.png")).is_file());
    }
}

#[test]
fn gradcheck_passes_on_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", path(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3);
    let reports: Vec<uct::gradcheck::SuiteReport> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        assert!(r.instances >= 50);
        assert!(r.max_relative_error < 1e-4, "{}: {}", r.name, r.max_relative_error);
    }
}

#[test]
fn ablate_table_lists_every_variant() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "ablate",
        "--sequences",
        path(&f.suite),
        "--model",
        path(&f.model),
        "--workers",
        "1",
        "--out",
        path(dir.path()),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut lines = stdout.lines();
    let header = lines.next().unwrap();
    for col in ["variant", "auc", "precision_at_20", "fps"] {
        assert!(header.contains(col), "header {header}");
    }
    let names: Vec<&str> = lines.map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["full", "no_offline", "no_pnr", "no_scale", "mulres_scale", "lite"]);
    let table = fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 7);
    for file in ["results.json", "timing.json", "precision.svg", "success.svg", "config.toml", "run.log"] {
        assert!(dir.path().join(file).is_file(), "{file} missing");
    }
    assert!(dir.path().join("records/lite/synth00.txt").is_file());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = uct(&["gradcheck", "--set", "tracker.bogus=1", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "{stderr}");
    assert!(stderr.contains("beta_pnr"), "valid keys not listed: {stderr}");

    let file = dir.path().join("bad.toml");
    fs::write(&file, "[offline]\nepoch = 3\n").unwrap();
    let out = uct(&["gradcheck", "--config", path(&file), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uct(&["eval", "--variant", "nonsense", "--out", path(dir.path())]).status.code(), Some(1));
    assert_eq!(uct(&["frobnicate"]).status.code(), Some(1));
    let missing = dir.path().join("missing");
    let out = uct(&[
        "track",
        "--sequence",
        path(&missing),
        "--model",
        path(&fixture().model),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&[
        "eval",
        "--sequences",
        path(&f.suite),
        "--model",
        path(&f.model),
        "--set",
        "tracker.beta_pnr=0.6",
        "--seed",
        "3",
        "--workers",
        "1",
        "--out",
        path(&first),
    ]);
    let echo = first.join("config.toml");
    let text = fs::read_to_string(&echo).unwrap();
    let cfg = uct::Config::from_toml_str(&text).unwrap();
    assert_eq!(cfg.tracker.beta_pnr, 0.6);
    assert_eq!(cfg.seed, 3);
    let second = dir.path().join("second");
    ok(&[
        "eval",
        "--sequences",
        path(&f.suite),
        "--model",
        path(&f.model),
        "--config",
        path(&echo),
        "--workers",
        "1",
        "--out",
        path(&second),
    ]);
    for file in ["results.json", "config.toml"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn pretraining_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["pretrain", "--seed", "5", "--out", path(&out)];
        args.extend(SMALL_TRAINING);
        ok(&args);
        (fs::read(out.join("model.bin")).unwrap(), fs::read(out.join("pretrain.json")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let model = uct::model::Model::load(&dir.path().join("a/model.bin")).unwrap();
    assert_eq!(model.stack.layers.len(), 2);
}
