use std::fs;

use proptest::prelude::*;
use uct::dataset::{generate_all, suite_specs, BBox, Sequence};
use uct::eval::{
    curves, emit_report, iou, run_ope, success_threshold, GroundTruthStub, OpeOptions, OpeTracker, Pooling, Report,
    StaticStub, UctRunner, PRECISION_POINTS, RESULTS_FILE, SUCCESS_POINTS,
};
use uct::model::initial_model;
use uct::tracker::{parse_records, FrameRecord};
use uct::{Config, Error, Result, SuiteConfig};

fn bbox() -> impl Strategy<Value = BBox> {
    (-20.0f64..100.0, -20.0f64..100.0, 0.5f64..80.0, 0.5f64..80.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn suite(sequences: usize, frames: usize) -> Vec<Sequence> {
    generate_all(&suite_specs(&SuiteConfig {
        sequences,
        frames,
        ..SuiteConfig::desk_defaults()
    }))
    .unwrap()
}

proptest! {
    #[test]
    fn iou_properties(a in bbox(), b in bbox()) {
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!(v <= a.area().min(b.area()) / a.area().max(b.area()) + 1e-12);
    }

    #[test]
    fn curves_are_monotone_with_auc_as_grid_mean(
        frames in prop::collection::vec((0.0f64..80.0, 0.0f64..=1.0), 1..60),
    ) {
        let (errors, overlaps): (Vec<f64>, Vec<f64>) = frames.into_iter().unzip();
        let c = curves(&errors, &overlaps).unwrap();
        prop_assert_eq!(c.precision.len(), PRECISION_POINTS);
        prop_assert_eq!(c.success.len(), SUCCESS_POINTS);
        prop_assert!(c.precision.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.success.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(c.precision.iter().chain(&c.success).all(|v| (0.0..=1.0).contains(v)));
        let mean = c.success.iter().sum::<f64>() / SUCCESS_POINTS as f64;
        prop_assert!((c.auc - mean).abs() < 1e-12);
        prop_assert_eq!(c.precision_at_20, c.precision[20]);
    }
}

#[test]
fn curve_conventions() {
    let c = curves(&[5.0, 15.0, 25.0], &[0.5, 0.5, 0.5]).unwrap();
    assert_eq!(c.precision_at_20, 2.0 / 3.0);
    assert_eq!(c.auc, 10.0 / 21.0);
    let c = curves(&[0.0], &[1.0]).unwrap();
    assert_eq!(c.auc, 20.0 / 21.0);
    assert_eq!(success_threshold(20), 1.0);
    assert!(curves(&[], &[]).is_err());
    assert!(curves(&[1.0], &[]).is_err());
}

#[test]
fn stubs_bracket_the_scores() {
    let seqs = suite(3, 30);
    let perfect = run_ope("perfect", &seqs, &GroundTruthStub, OpeOptions::default()).unwrap();
    let agg = perfect.aggregate.unwrap();
    assert_eq!(agg.auc, 20.0 / 21.0);
    assert_eq!(agg.precision_at_20, 1.0);
    let still = run_ope("static", &seqs, &StaticStub, OpeOptions::default()).unwrap();
    assert!(still.aggregate.unwrap().precision_at_20 < 1.0);
}

struct Flaky;

impl OpeTracker for Flaky {
    fn run(&self, seq: &Sequence) -> Result<Vec<FrameRecord>> {
        if seq.name.ends_with('1') {
            return Err(Error::InvalidInput("flaky tracker".into()));
        }
        GroundTruthStub.run(seq)
    }
}

#[test]
fn failed_sequences_are_reported_and_excluded() {
    let seqs = suite(3, 10);
    let r = run_ope("flaky", &seqs, &Flaky, OpeOptions::default()).unwrap();
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.sequences.len(), 2);
    assert_eq!(r.aggregate.unwrap().auc, 20.0 / 21.0);
}

#[test]
fn pooling_modes_differ_only_in_weighting() {
    let seqs = suite(3, 20);
    let frames = run_ope("s", &seqs, &StaticStub, OpeOptions::default()).unwrap();
    let per_seq = run_ope(
        "s",
        &seqs,
        &StaticStub,
        OpeOptions {
            workers: 1,
            pooling: Pooling::Sequences,
        },
    )
    .unwrap();
    let mean: f64 = frames.sequences.iter().map(|s| s.curves.auc).sum::<f64>() / 3.0;
    assert!((per_seq.aggregate.unwrap().auc - mean).abs() < 1e-12);
}

#[test]
fn reports_round_trip_and_repeat_exactly() {
    let cfg = Config::desk_defaults();
    let model = initial_model(&cfg).unwrap();
    let seqs = suite(2, 12);
    let runner = UctRunner {
        cfg: cfg.tracker.clone(),
        stack: model.stack.clone(),
    };
    let run = || {
        vec![
            run_ope("full", &seqs, &runner, OpeOptions::default()).unwrap(),
            run_ope("perfect", &seqs, &GroundTruthStub, OpeOptions::default()).unwrap(),
        ]
    };
    let (a, b) = (run(), run());
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let report = emit_report(&a, da.path()).unwrap();
    emit_report(&b, db.path()).unwrap();
    assert_eq!(
        fs::read(da.path().join(RESULTS_FILE)).unwrap(),
        fs::read(db.path().join(RESULTS_FILE)).unwrap()
    );
    assert_eq!(Report::load(&da.path().join(RESULTS_FILE)).unwrap(), report);
    assert_eq!(report.schema_version, env!("CARGO_PKG_VERSION"));
    for plot in ["precision.svg", "success.svg"] {
        let svg = fs::read_to_string(da.path().join(plot)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
    let text = fs::read_to_string(da.path().join("records/full").join(format!("{}.txt", seqs[0].name))).unwrap();
    let records = parse_records(&text).unwrap();
    assert_eq!(records, a[0].sequences[0].records);
    assert!(emit_report(&[], da.path()).is_err());
}
