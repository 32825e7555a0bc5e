//! One-pass evaluation: precision and success curves, the ablation
//! variants, and report emission.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Extractor, ScaleMode, TrackerConfig};
use crate::dataset::{BBox, Sequence};
use crate::error::{Error, Result};
use crate::features::ConvStack;
use crate::tracker::{format_records, FrameRecord, Tracker};

/// Center-error thresholds 0..=50 px.
pub const PRECISION_POINTS: usize = 51;
/// Overlap thresholds 0, 0.05, .., 1.
pub const SUCCESS_POINTS: usize = 21;
pub const PRECISION_THRESHOLD: usize = 20;

/// Distance between box centers.
pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn success_threshold(k: usize) -> f64 {
    k as f64 / (SUCCESS_POINTS - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurves {
    /// Fraction of frames with center error `<= τ` for τ = 0..=50.
    pub precision: Vec<f64>,
    /// Fraction of frames with overlap `> θ` on the 21-point grid.
    pub success: Vec<f64>,
    pub precision_at_20: f64,
    /// Mean of the success points.
    pub auc: f64,
    /// Frames per second; kept out of result files, see the timing sidecar.
    #[serde(skip)]
    pub fps: f64,
}

impl EvalCurves {
    fn from_points(precision: Vec<f64>, success: Vec<f64>) -> Self {
        let auc = success.iter().sum::<f64>() / success.len() as f64;
        EvalCurves {
            precision_at_20: precision[PRECISION_THRESHOLD],
            precision,
            success,
            auc,
            fps: 0.0,
        }
    }

    /// Monotonicity and range of both curves.
    pub fn check(&self) -> Result<()> {
        let in_range = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if self.precision.len() != PRECISION_POINTS || self.success.len() != SUCCESS_POINTS {
            return Err(Error::invalid("curves have the wrong number of points"));
        }
        if !in_range(&self.precision) || !in_range(&self.success) {
            return Err(Error::invalid("curve values outside [0, 1]"));
        }
        if self.precision.windows(2).any(|w| w[1] < w[0]) || self.success.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("curves are not monotone"));
        }
        Ok(())
    }
}

/// Curves from per-frame center errors and overlaps.
pub fn curves(errors: &[f64], overlaps: &[f64]) -> Result<EvalCurves> {
    if errors.is_empty() || errors.len() != overlaps.len() {
        return Err(Error::invalid(format!(
            "curves need equal-length non-empty inputs, got {} errors and {} overlaps",
            errors.len(),
            overlaps.len()
        )));
    }
    let n = errors.len() as f64;
    let precision = (0..PRECISION_POINTS)
        .map(|t| errors.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect();
    let success = (0..SUCCESS_POINTS)
        .map(|k| overlaps.iter().filter(|&&o| o > success_threshold(k)).count() as f64 / n)
        .collect();
    let c = EvalCurves::from_points(precision, success);
    c.check()?;
    Ok(c)
}

/// Point-wise mean of several curves.
pub fn mean_curves(all: &[&EvalCurves]) -> Result<EvalCurves> {
    if all.is_empty() {
        return Err(Error::invalid("no curves to average"));
    }
    let n = all.len() as f64;
    let avg = |get: fn(&EvalCurves) -> &Vec<f64>, len: usize| -> Vec<f64> {
        (0..len).map(|i| all.iter().map(|c| get(c)[i]).sum::<f64>() / n).collect()
    };
    let c = EvalCurves::from_points(avg(|c| &c.precision, PRECISION_POINTS), avg(|c| &c.success, SUCCESS_POINTS));
    c.check()?;
    Ok(c)
}

/// The tracker and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Pretrained stack, PNR gating, scale filter.
    Full,
    /// The stack's random initialization in place of the pretrained weights.
    NoOffline,
    /// Updates gated on the response maximum alone.
    NoPnr,
    /// Fixed target size.
    NoScale,
    /// Exhaustive multi-resolution search instead of the scale filter.
    MulresScale,
    /// Grayscale pixel features and fixed size.
    Lite,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::NoOffline,
        AblationVariant::NoPnr,
        AblationVariant::NoScale,
        AblationVariant::MulresScale,
        AblationVariant::Lite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoOffline => "no_offline",
            AblationVariant::NoPnr => "no_pnr",
            AblationVariant::NoScale => "no_scale",
            AblationVariant::MulresScale => "mulres_scale",
            AblationVariant::Lite => "lite",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::invalid(format!("unknown variant `{name}`; expected one of {}", names.join(", ")))
        })
    }

    /// The variant's config delta applied to `base`.
    pub fn apply(self, base: &TrackerConfig) -> TrackerConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full | AblationVariant::NoOffline => {}
            AblationVariant::NoPnr => cfg.use_pnr = false,
            AblationVariant::NoScale => cfg.scale_mode = ScaleMode::None,
            AblationVariant::MulresScale => cfg.scale_mode = ScaleMode::Multires,
            AblationVariant::Lite => {
                cfg.extractor = Extractor::Raw;
                cfg.scale_mode = ScaleMode::None;
            }
        }
        cfg
    }

    /// Whether the variant runs on offline-trained stack weights.
    pub fn pretrained(self) -> bool {
        self != AblationVariant::NoOffline
    }
}

/// Anything that can be run once over a sequence from its first annotation.
pub trait OpeTracker: Sync {
    /// One record per annotated frame, starting with the initial frame.
    fn run(&self, seq: &Sequence) -> Result<Vec<FrameRecord>>;
}

/// The correlation tracker with a fixed config and stack.
#[derive(Clone, Debug)]
pub struct UctRunner {
    pub cfg: TrackerConfig,
    pub stack: ConvStack,
}

impl UctRunner {
    /// Runner for `variant`, choosing between the pretrained and the untrained stack.
    pub fn for_variant(variant: AblationVariant, base: &TrackerConfig, pretrained: &ConvStack, untrained: &ConvStack) -> Self {
        UctRunner {
            cfg: variant.apply(base),
            stack: if variant.pretrained() { pretrained } else { untrained }.clone(),
        }
    }
}

impl OpeTracker for UctRunner {
    fn run(&self, seq: &Sequence) -> Result<Vec<FrameRecord>> {
        let n = seq.annotated_len();
        if n == 0 {
            return Err(Error::invalid(format!("sequence {} has no annotations", seq.name)));
        }
        let mut tracker = Tracker::init(&seq.frame(0)?, seq.annotations[0], &self.stack, &self.cfg)?;
        let mut records = Vec::with_capacity(n);
        let first = FrameRecord::from_state(0, tracker.state());
        records.push(FrameRecord {
            bbox: seq.annotations[0],
            ..first
        });
        for t in 1..n {
            let state = tracker.step(&seq.frame(t)?)?;
            records.push(FrameRecord::from_state(t, &state));
        }
        Ok(records)
    }
}

/// Reports the ground truth.
pub struct GroundTruthStub;

impl OpeTracker for GroundTruthStub {
    fn run(&self, seq: &Sequence) -> Result<Vec<FrameRecord>> {
        Ok(seq.annotations[..seq.annotated_len()]
            .iter()
            .enumerate()
            .map(|(t, &bbox)| FrameRecord {
                frame_index: t,
                bbox,
                score: 1.0,
                pnr: 0.0,
                updated: false,
            })
            .collect())
    }
}

/// Never moves from the initial box.
pub struct StaticStub;

impl OpeTracker for StaticStub {
    fn run(&self, seq: &Sequence) -> Result<Vec<FrameRecord>> {
        let first = *seq
            .annotations
            .first()
            .ok_or_else(|| Error::invalid(format!("sequence {} has no annotations", seq.name)))?;
        Ok((0..seq.annotated_len())
            .map(|t| FrameRecord {
                frame_index: t,
                bbox: first,
                score: 0.0,
                pnr: 0.0,
                updated: false,
            })
            .collect())
    }
}

/// How per-frame results combine into the aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every frame of every sequence weighs the same.
    #[default]
    Frames,
    /// Curves are computed per sequence and then averaged.
    Sequences,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub name: String,
    pub curves: EvalCurves,
    pub records: Vec<FrameRecord>,
    pub errors: Vec<f64>,
    pub overlaps: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFailure {
    pub sequence: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeResult {
    pub variant: String,
    pub pooling: Pooling,
    /// Successful sequences sorted by name.
    pub sequences: Vec<SequenceResult>,
    pub failures: Vec<SequenceFailure>,
    /// `None` when every sequence failed.
    pub aggregate: Option<EvalCurves>,
}

impl OpeResult {
    pub fn fps(&self) -> f64 {
        self.aggregate.as_ref().map_or(0.0, |c| c.fps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OpeOptions {
    /// Worker threads; sequences are distributed over them.
    pub workers: usize,
    pub pooling: Pooling,
}

impl Default for OpeOptions {
    fn default() -> Self {
        OpeOptions {
            workers: 1,
            pooling: Pooling::Frames,
        }
    }
}

fn score_sequence(seq: &Sequence, tracker: &dyn OpeTracker) -> Result<SequenceResult> {
    let start = Instant::now();
    let records = tracker.run(seq)?;
    let seconds = start.elapsed().as_secs_f64();
    if records.len() != seq.annotated_len() {
        return Err(Error::invalid(format!(
            "tracker produced {} records for {} annotated frames",
            records.len(),
            seq.annotated_len()
        )));
    }
    let (errors, overlaps): (Vec<f64>, Vec<f64>) = records
        .iter()
        .zip(&seq.annotations)
        .map(|(r, gt)| (center_error(&r.bbox, gt), iou(&r.bbox, gt)))
        .unzip();
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("tracker produced a non-finite box"));
    }
    let mut c = curves(&errors, &overlaps)?;
    c.fps = records.len() as f64 / seconds.max(1e-9);
    Ok(SequenceResult {
        name: seq.name.clone(),
        curves: c,
        records,
        errors,
        overlaps,
        seconds,
    })
}

/// Run `tracker` once over every sequence. Sequences that fail are listed
/// in `failures` and left out of the aggregate.
pub fn run_ope(variant: &str, sequences: &[Sequence], tracker: &dyn OpeTracker, opts: OpeOptions) -> Result<OpeResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start workers: {e}")))?;
    let outcomes: Vec<(String, Result<SequenceResult>)> = pool.install(|| {
        sequences
            .par_iter()
            .map(|seq| (seq.name.clone(), score_sequence(seq, tracker)))
            .collect()
    });
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (name, outcome) in outcomes {
        match outcome {
            Ok(r) => done.push(r),
            Err(e) => {
                log::warn!("{variant}: sequence {name} failed: {e}");
                failures.push(SequenceFailure {
                    sequence: name,
                    error: e.to_string(),
                });
            }
        }
    }
    done.sort_by(|a, b| a.name.cmp(&b.name));
    failures.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    let aggregate = if done.is_empty() {
        None
    } else {
        let mut c = match opts.pooling {
            Pooling::Frames => {
                let errors: Vec<f64> = done.iter().flat_map(|r| r.errors.iter().copied()).collect();
                let overlaps: Vec<f64> = done.iter().flat_map(|r| r.overlaps.iter().copied()).collect();
                curves(&errors, &overlaps)?
            }
            Pooling::Sequences => mean_curves(&done.iter().map(|r| &r.curves).collect::<Vec<_>>())?,
        };
        let frames: usize = done.iter().map(|r| r.records.len()).sum();
        let seconds: f64 = done.iter().map(|r| r.seconds).sum();
        c.fps = frames as f64 / seconds.max(1e-9);
        Some(c)
    };
    Ok(OpeResult {
        variant: variant.to_string(),
        pooling: opts.pooling,
        sequences: done,
        failures,
        aggregate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub name: String,
    pub frames: usize,
    pub curves: EvalCurves,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub aggregate: Option<EvalCurves>,
    pub sequences: Vec<SequenceSummary>,
    pub failures: Vec<SequenceFailure>,
}

/// Contents of `results.json`. Holds no timing, so repeated runs with the
/// same seed produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub pooling: Pooling,
    pub variants: Vec<VariantReport>,
}

impl Report {
    pub fn new(results: &[OpeResult]) -> Self {
        let strip = |c: &EvalCurves| EvalCurves { fps: 0.0, ..c.clone() };
        Report {
            schema_version: env!("CARGO_PKG_VERSION").to_string(),
            pooling: results.first().map(|r| r.pooling).unwrap_or_default(),
            variants: results
                .iter()
                .map(|r| VariantReport {
                    name: r.variant.clone(),
                    aggregate: r.aggregate.as_ref().map(strip),
                    sequences: r
                        .sequences
                        .iter()
                        .map(|s| SequenceSummary {
                            name: s.name.clone(),
                            frames: s.records.len(),
                            curves: strip(&s.curves),
                        })
                        .collect(),
                    failures: r.failures.clone(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub variant: String,
    pub frames: usize,
    pub seconds: f64,
    pub fps: f64,
}

pub const RESULTS_FILE: &str = "results.json";
pub const TIMING_FILE: &str = "timing.json";
pub const TABLE_FILE: &str = "ablation.txt";
pub const PRECISION_PLOT: &str = "precision.svg";
pub const SUCCESS_PLOT: &str = "success.svg";
pub const RECORDS_DIR: &str = "records";

/// Plain-text comparison table: variant, auc, precision@20 and optionally fps.
pub fn format_table(results: &[OpeResult], with_fps: bool) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<14}{:>8}{:>18}", "variant", "auc", "precision_at_20");
    if with_fps {
        let _ = write!(out, "{:>10}", "fps");
    }
    out.push('\n');
    for r in results {
        let (auc, p20) = r.aggregate.as_ref().map_or((f64::NAN, f64::NAN), |c| (c.auc, c.precision_at_20));
        let _ = write!(out, "{:<14}{:>8.4}{:>18.4}", r.variant, auc, p20);
        if with_fps {
            let _ = write!(out, "{:>10.1}", r.fps());
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Standalone SVG with one polyline per series over `xs`.
pub fn plot_svg(title: &str, x_label: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, top, pw, ph) = (480.0, 360.0, 56.0, 32.0, 300.0, 280.0);
    let (x0, x1) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let sx = |x: f64| left + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * pw;
    let sy = |y: f64| top + (1.0 - y) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, left + pw / 2.0);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, sy(v) + 4.0);
        let xv = x0 + v * (x1 - x0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv}</text>"#, sx(xv), top + ph + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, left + pw / 2.0, top + ph + 28.0);
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-variant="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 12.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            left + pw + 10.0,
            left + pw + 28.0,
            left + pw + 32.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write results, timing sidecar, comparison table, curve plots and
/// per-frame records under `dir`.
pub fn emit_report(results: &[OpeResult], dir: &Path) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::invalid("nothing to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = Report::new(results);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
    write(&dir.join(RESULTS_FILE), &(json + "\n"))?;

    let timing: Vec<Timing> = results
        .iter()
        .map(|r| Timing {
            variant: r.variant.clone(),
            frames: r.sequences.iter().map(|s| s.records.len()).sum(),
            seconds: r.sequences.iter().map(|s| s.seconds).sum(),
            fps: r.fps(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&timing).map_err(|e| Error::invalid(e.to_string()))?;
    write(&dir.join(TIMING_FILE), &(json + "\n"))?;
    write(&dir.join(TABLE_FILE), &format_table(results, false))?;

    let scored: Vec<&OpeResult> = results.iter().filter(|r| r.aggregate.is_some()).collect();
    let series = |get: fn(&EvalCurves) -> &Vec<f64>| -> Vec<(String, Vec<f64>)> {
        scored
            .iter()
            .map(|r| (r.variant.clone(), get(r.aggregate.as_ref().expect("filtered")).clone()))
            .collect()
    };
    let px: Vec<f64> = (0..PRECISION_POINTS).map(|t| t as f64).collect();
    let sxs: Vec<f64> = (0..SUCCESS_POINTS).map(success_threshold).collect();
    write(
        &dir.join(PRECISION_PLOT),
        &plot_svg("Precision", "center error threshold (px)", &px, &series(|c| &c.precision)),
    )?;
    write(
        &dir.join(SUCCESS_PLOT),
        &plot_svg("Success", "overlap threshold", &sxs, &series(|c| &c.success)),
    )?;

    for r in results {
        let sub = dir.join(RECORDS_DIR).join(&r.variant);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for s in &r.sequences {
            write(&sub.join(format!("{}.txt", s.name)), &format_records(&s.records))?;
        }
    }
    Ok(report)
}
