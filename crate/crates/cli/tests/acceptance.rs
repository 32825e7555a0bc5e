//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//! Tests share one pretrained model and run one at a time so that the
//! timing checks are not skewed by each other.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use uct::dataset::{corpus_specs, generate_all, generate_synthetic, occlusion_scenario, suite_specs, zoom_scenario};
use uct::eval::{center_error, curves, iou, run_ope, AblationVariant, OpeOptions, OpeResult, OpeTracker, UctRunner};
use uct::model::{initial_model, pretrain, Model};
use uct::regression::OfflineReport;
use uct::tensor::{map_stats, xcorr2d_valid};
use uct::tracker::{pnr, should_update, Tracker, UpdateHistory};
use uct::{Config, DenseMap};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_INSTANCES: usize = 50;
const GRAD_SECONDS: f64 = 60.0;
const XCORR_TOLERANCE: f64 = 1e-9;
const XCORR_INSTANCES: usize = 100;
const XCORR_SECONDS: f64 = 10.0;
const OCCLUSION_MEAN_ERROR: f64 = 4.0;
const OCCLUDED_UPDATE_RATE: f64 = 0.3;
const VISIBLE_UPDATE_RATE: f64 = 0.7;
const OCCLUSION_SECONDS: f64 = 120.0;
const ZOOM_FACTOR: f64 = 1.02;
const ZOOM_FRAMES: usize = 20;
const ZOOM_TOLERANCE: f64 = 0.10;
const MULRES_AUC_BAND: f64 = 0.05;
const LOSS_REDUCTION: f64 = 0.5;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

struct Trained {
    model: Model,
    report: OfflineReport,
    _dir: TempDir,
    path: PathBuf,
}

fn config() -> Config {
    Config::desk_defaults()
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let cfg = config();
        let corpus = generate_all(&corpus_specs(&cfg.offline)).unwrap();
        let (model, report) = pretrain(&corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        Trained {
            model,
            report,
            _dir: dir,
            path,
        }
    })
}

fn runner(variant: AblationVariant) -> UctRunner {
    let cfg = config();
    let untrained = initial_model(&cfg).unwrap().stack;
    UctRunner::for_variant(variant, &cfg.tracker, &trained().model.stack, &untrained)
}

#[test]
fn gradients_match_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let reports = uct::gradcheck::run_all(GRAD_INSTANCES, config().seed).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let names: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.2e} over {}", r.name, r.max_relative_error, r.instances))
        .collect();
    let pass = worst < GRAD_TOLERANCE && seconds < GRAD_SECONDS && reports.iter().all(|r| r.instances >= GRAD_INSTANCES);
    verdict("gradient check", pass, format!("{} in {seconds:.1}s", names.join(", ")));
}

fn nested_loops(x: &DenseMap, f: &DenseMap) -> Vec<f64> {
    let (oh, ow) = (x.height() - f.height() + 1, x.width() - f.width() + 1);
    let mut out = vec![0.0; oh * ow];
    for l in 0..x.channels() {
        for i in 0..oh {
            for j in 0..ow {
                for u in 0..f.height() {
                    for v in 0..f.width() {
                        out[i * ow + j] += x.get(l, i + u, j + v) * f.get(l, u, v);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn correlation_matches_oracle() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..XCORR_INSTANCES {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (fh, fw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let mut map = |c, h, w| {
            DenseMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = map(c, h, w);
        let f = map(c, fh, fw);
        let got = xcorr2d_valid(&x, &f).unwrap();
        for (a, b) in got.data().iter().zip(nested_loops(&x, &f)) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-12));
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    verdict(
        "correlation oracle",
        worst <= XCORR_TOLERANCE && seconds < XCORR_SECONDS,
        format!("max relative error {worst:.2e} over {XCORR_INSTANCES} instances in {seconds:.2}s"),
    );
}

#[test]
fn peak_ratio_and_threshold_examples() {
    let _guard = serial();
    let stats = |rows: &[&[f64]]| map_stats(&DenseMap::from_rows(rows)).unwrap();
    let peaked = pnr(&stats(&[&[1.0, 0.5], &[0.5, 0.5]]), 1e-6);
    let flat = pnr(&stats(&[&[0.3, 0.3], &[0.3, 0.3]]), 1e-6);
    let mut h = UpdateHistory::new(0);
    h.record(2.0, 0.5);
    let boundary = should_update(&mut h, 2.0, 0.5, 1.0, 1.0).unwrap();
    let mut h = UpdateHistory::new(0);
    h.record(2.0, 1.0);
    let weak = should_update(&mut h, 0.1, 100.0, 0.7, 0.7).unwrap();
    let mut h = UpdateHistory::new(0);
    h.record(2.0, 1.0);
    h.record(4.0, 1.0);
    let mean = h.means().unwrap().0;
    let pass = peaked == 1.0 && flat == 0.0 && boundary && !weak && mean == 3.0;
    verdict(
        "peak ratio and thresholds",
        pass,
        format!("pnr {peaked} and {flat}, boundary {boundary}, weak {weak}, mean {mean}"),
    );
}

#[test]
fn occlusion_sequence_is_tracked_without_bad_updates() {
    let _guard = serial();
    let r = runner(AblationVariant::Full);
    let spec = occlusion_scenario(config().suite.seed);
    let occlusion = spec.occlusion.unwrap();
    let seq = generate_synthetic(&spec).unwrap();
    let start = Instant::now();
    let records = r.run(&seq).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let errors: Vec<f64> = records
        .iter()
        .zip(&seq.annotations)
        .map(|(r, gt)| center_error(&r.bbox, gt))
        .collect();
    let overlaps: Vec<f64> = records.iter().zip(&seq.annotations).map(|(r, gt)| iou(&r.bbox, gt)).collect();
    let c = curves(&errors, &overlaps).unwrap();
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let (mut hidden, mut hidden_updates, mut visible, mut visible_updates) = (0, 0, 0, 0);
    for rec in &records[1..] {
        if (occlusion.start..=occlusion.end).contains(&rec.frame_index) {
            hidden += 1;
            hidden_updates += rec.updated as usize;
        } else {
            visible += 1;
            visible_updates += rec.updated as usize;
        }
    }
    let hidden_rate = hidden_updates as f64 / hidden as f64;
    let visible_rate = visible_updates as f64 / visible as f64;
    let pass = seq.len() == 100
        && mean_error < OCCLUSION_MEAN_ERROR
        && c.precision_at_20 == 1.0
        && hidden_rate < OCCLUDED_UPDATE_RATE
        && visible_rate > VISIBLE_UPDATE_RATE
        && seconds < OCCLUSION_SECONDS;
    verdict(
        "occlusion tracking",
        pass,
        format!(
            "mean error {mean_error:.2}px, precision@20 {:.3}, updates {hidden_updates}/{hidden} occluded vs {visible_updates}/{visible} visible, {seconds:.1}s",
            c.precision_at_20
        ),
    );
}

#[test]
fn zoom_is_recovered_by_the_scale_filter() {
    let _guard = serial();
    let seq = generate_synthetic(&zoom_scenario(config().suite.seed, ZOOM_FACTOR, ZOOM_FRAMES)).unwrap();
    let full = runner(AblationVariant::Full).run(&seq).unwrap();
    let fixed = runner(AblationVariant::NoScale).run(&seq).unwrap();
    let (first, last) = (seq.annotations[0], seq.annotations[ZOOM_FRAMES - 1]);
    let estimated = full[ZOOM_FRAMES - 1].bbox.w / first.w;
    let expected = ZOOM_FACTOR.powi(ZOOM_FRAMES as i32 - 1);
    let rel = (estimated - expected).abs() / expected;
    let iou_full = iou(&full[ZOOM_FRAMES - 1].bbox, &last);
    let iou_fixed = iou(&fixed[ZOOM_FRAMES - 1].bbox, &last);
    verdict(
        "scale recovery",
        seq.len() == ZOOM_FRAMES && rel <= ZOOM_TOLERANCE && iou_fixed < iou_full,
        format!(
            "cumulative scale {estimated:.4} vs {expected:.4} ({:.1}% off), final IoU full {iou_full:.3} vs no_scale {iou_fixed:.3}",
            100.0 * rel
        ),
    );
}

#[test]
fn ablation_ordering_holds() {
    let _guard = serial();
    let cfg = config();
    let seqs = generate_all(&suite_specs(&cfg.suite)).unwrap();
    let run = |v: AblationVariant| -> OpeResult { run_ope(v.name(), &seqs, &runner(v), OpeOptions::default()).unwrap() };
    let full = run(AblationVariant::Full);
    let auc = |r: &OpeResult| r.aggregate.as_ref().unwrap().auc;
    let mut lines = vec![format!("full {:.4} ({:.0} fps)", auc(&full), full.fps())];
    let mut pass = full.failures.is_empty() && seqs.len() == 12;
    for v in [AblationVariant::NoPnr, AblationVariant::NoScale, AblationVariant::NoOffline] {
        let r = run(v);
        pass &= r.failures.is_empty() && auc(&full) - auc(&r) >= 0.0;
        lines.push(format!("{} {:.4}", v.name(), auc(&r)));
    }
    let mulres = run(AblationVariant::MulresScale);
    pass &= (auc(&mulres) - auc(&full)).abs() <= MULRES_AUC_BAND && full.fps() > mulres.fps();
    lines.push(format!("mulres_scale {:.4} ({:.0} fps)", auc(&mulres), mulres.fps()));
    verdict("ablation ordering", pass, lines.join(", "));
}

fn uct_bin(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_uct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn result_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !matches!(p.file_name().and_then(|n| n.to_str()), Some("timing.json" | "run.log")) {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn ablate_runs_are_byte_identical() {
    let _guard = serial();
    let model = &trained().path;
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        uct_bin(&[
            "ablate",
            "--model",
            model.to_str().unwrap(),
            "--seed",
            "0",
            "--workers",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        result_files(&out)
    };
    let (a, b) = (run("a"), run("b"));
    let same = a == b;
    let has_results = a.iter().any(|(p, _)| p == Path::new("results.json"));
    verdict(
        "determinism",
        same && has_results && a.len() > 6,
        format!("{} result files compared, identical: {same}", a.len()),
    );
}

#[test]
fn metric_conventions() {
    let _guard = serial();
    let a = curves(&[5.0, 15.0, 25.0], &[0.5, 0.5, 0.5]).unwrap();
    let b = curves(&[0.0; 4], &[0.5; 4]).unwrap();
    let pass = a.precision_at_20 == 2.0 / 3.0 && b.auc == 10.0 / 21.0;
    verdict(
        "metric conventions",
        pass,
        format!("precision@20 {} and auc {}", a.precision_at_20, b.auc),
    );
}

#[test]
fn offline_training_sharpens_the_first_frame_response() {
    let _guard = serial();
    let t = trained();
    let losses = &t.report.epoch_losses;
    let ratio = losses.last().unwrap() / losses.first().unwrap();
    let cfg = config();
    let held_out = generate_synthetic(&suite_specs(&cfg.suite)[0]).unwrap();
    let first_pnr = |stack| {
        let tracker = Tracker::init(&held_out.frame(0).unwrap(), held_out.annotations[0], stack, &cfg.tracker).unwrap();
        tracker.history().pnr_values[0]
    };
    let pretrained = first_pnr(&t.model.stack);
    let untrained = first_pnr(&initial_model(&cfg).unwrap().stack);
    verdict(
        "offline training efficacy",
        ratio <= LOSS_REDUCTION && untrained < pretrained,
        format!(
            "epoch loss {:.4} -> {:.4} (ratio {ratio:.3}), first-frame pnr untrained {untrained:.3} vs pretrained {pretrained:.3}",
            losses.first().unwrap(),
            losses.last().unwrap()
        ),
    );
}
