//! The online tracker: one forward pass per frame, peak-to-noise gating of
//! model updates against running averages, and scale handling.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use crate::config::{Extractor, ScaleMode, TrackerConfig};
use crate::dataset::BBox;
use crate::error::{Error, Result};
use crate::features::{to_gray, ConvStack};
use crate::pipeline::{FeaturePipeline, SearchWindow};
use crate::regression::{train_first_frame, update_one_step, FilterBank, FitReport, SolverParams, TrainSample};
use crate::scale::{
    build_scale_samples, estimate_from_samples, estimate_scale_multires, train_scale_filter, update_scale_filter,
    ScaleFilter,
};
use crate::tensor::{map_stats, parabolic_offset, DenseMap, MapStats};

/// Target estimate after a frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetState {
    pub center: (f64, f64),
    pub size: (f64, f64),
    /// Response maximum.
    pub score: f64,
    pub pnr: f64,
    /// Whether the model was updated on this frame.
    pub updated: bool,
    /// Whether the center had to be pulled back inside the image.
    pub clamped: bool,
}

impl TargetState {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.center, self.size)
    }
}

/// One line of tracker output: `frame_index,x,y,w,h,score,pnr,updated`,
/// with the box as top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub bbox: BBox,
    pub score: f64,
    pub pnr: f64,
    pub updated: bool,
}

impl FrameRecord {
    pub fn from_state(frame_index: usize, state: &TargetState) -> Self {
        FrameRecord {
            frame_index,
            bbox: state.bbox(),
            score: state.score,
            pnr: state.pnr,
            updated: state.updated,
        }
    }

    pub fn to_line(&self) -> String {
        let b = &self.bbox;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.frame_index, b.x, b.y, b.w, b.h, self.score, self.pnr, self.updated as u8
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(Error::invalid(format!("record needs 8 fields, got {}: {line:?}", fields.len())));
        }
        let real = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::invalid(format!("bad number {:?} in record {line:?}", fields[i])))
        };
        let frame_index = fields[0]
            .parse()
            .map_err(|_| Error::invalid(format!("bad frame index in record {line:?}")))?;
        let updated = match fields[7] {
            "0" => false,
            "1" => true,
            other => return Err(Error::invalid(format!("updated flag must be 0 or 1, got {other:?}"))),
        };
        Ok(FrameRecord {
            frame_index,
            bbox: BBox::new(real(1)?, real(2)?, real(3)?, real(4)?),
            score: real(5)?,
            pnr: real(6)?,
            updated,
        })
    }
}

/// Records joined one per line, newline terminated.
pub fn format_records(records: &[FrameRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_records(text: &str) -> Result<Vec<FrameRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(FrameRecord::parse_line).collect()
}

/// Per-frame PNR and response maxima seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateHistory {
    pub pnr_values: Vec<f64>,
    pub rmax_values: Vec<f64>,
    /// Average over only the most recent `window` frames; 0 averages everything.
    pub window: usize,
}

impl UpdateHistory {
    pub fn new(window: usize) -> Self {
        UpdateHistory {
            window,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pnr_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pnr_values.is_empty()
    }

    pub fn record(&mut self, pnr: f64, rmax: f64) {
        self.pnr_values.push(pnr);
        self.rmax_values.push(rmax);
    }

    fn recent(&self, values: &[f64]) -> f64 {
        let start = if self.window == 0 {
            0
        } else {
            values.len().saturating_sub(self.window)
        };
        let tail = &values[start..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Threshold bases: means of the recorded PNR and response maxima.
    pub fn means(&self) -> Option<(f64, f64)> {
        if self.is_empty() {
            return None;
        }
        Some((self.recent(&self.pnr_values), self.recent(&self.rmax_values)))
    }
}

/// `(max − min) / max(mean_excluding_max, ε)`.
pub fn pnr(stats: &MapStats, epsilon: f64) -> f64 {
    (stats.max_value - stats.min_value) / stats.mean_excluding_max.max(epsilon)
}

/// Compare against the averages of the frames seen before this one, then
/// record this frame's values whatever the verdict.
pub fn should_update(history: &mut UpdateHistory, pnr_t: f64, rmax_t: f64, beta_pnr: f64, beta_rmax: f64) -> Result<bool> {
    let (mp, mr) = history
        .means()
        .ok_or_else(|| Error::invalid("update history is empty; the first frame must seed it"))?;
    let verdict = pnr_t >= beta_pnr * mp && rmax_t >= beta_rmax * mr;
    history.record(pnr_t, rmax_t);
    Ok(verdict)
}

/// Quadratic peak refinement per axis; zero on the map border or when the
/// fit is not concave.
pub fn subpixel_refine(map: &DenseMap, peak: (usize, usize)) -> (f64, f64) {
    let (h, w) = (map.height(), map.width());
    let (i, j) = peak;
    if i == 0 || j == 0 || i + 1 >= h || j + 1 >= w {
        return (0.0, 0.0);
    }
    let v = |r: usize, c: usize| map.get(0, r, c);
    (
        parabolic_offset(v(i - 1, j), v(i, j), v(i + 1, j)),
        parabolic_offset(v(i, j - 1), v(i, j), v(i, j + 1)),
    )
}

/// Image coordinates (x, y) of a real-valued response cell (row, col).
pub fn map_to_image(pipeline: &FeaturePipeline, window: &SearchWindow, peak: (f64, f64)) -> (f64, f64) {
    pipeline.map_to_image(window, peak)
}

/// Smallest target side the tracker will shrink to, in pixels.
const MIN_SIZE: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct Tracker {
    pub(crate) cfg: TrackerConfig,
    pub(crate) pipeline: FeaturePipeline,
    pub(crate) filter: FilterBank,
    pub(crate) scale: Option<ScaleFilter>,
    pub(crate) state: TargetState,
    pub(crate) history: UpdateHistory,
    pub(crate) frames: usize,
    pub(crate) first_fit: FitReport,
}

impl Tracker {
    /// Train on the annotated first frame. `stack` is ignored for raw-pixel
    /// features.
    pub fn init(image: &DenseMap, bbox: BBox, stack: &ConvStack, cfg: &TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        if !(bbox.w > 0.0 && bbox.h > 0.0) || !bbox.x.is_finite() || !bbox.y.is_finite() {
            return Err(Error::invalid(format!("initial box must have positive size: {bbox:?}")));
        }
        let stack = match cfg.extractor {
            Extractor::Stack => stack.clone(),
            Extractor::Raw => ConvStack::empty(),
        };
        let gray = to_gray(image)?;
        if bbox.right() <= 0.0 || bbox.bottom() <= 0.0 || bbox.x >= gray.width() as f64 || bbox.y >= gray.height() as f64 {
            return Err(Error::invalid(format!("initial box {bbox:?} lies outside the image")));
        }
        let pipeline = FeaturePipeline::new(stack, cfg)?;
        let center = bbox.center();
        let size = (bbox.w, bbox.h);
        let window = pipeline.search_window(center, size);
        let features = pipeline.features(&gray, &window)?;
        let label = pipeline.label(pipeline.image_to_response(&window, center))?;
        let sample = TrainSample::new(features, label);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (filter, first_fit) =
            train_first_frame(&sample, pipeline.filter_size(), &SolverParams::first_frame(cfg), &mut rng)?;

        let scale = if cfg.scale_mode == ScaleMode::Filter {
            let blank = ScaleFilter::from_config(pipeline.stack(), cfg)?;
            let samples = build_scale_samples(&gray, center, size, &blank, pipeline.stack())?;
            let (trained, _) = train_scale_filter(&samples, &blank, &scale_params(cfg))?;
            Some(trained)
        } else {
            None
        };

        let stats = map_stats(&filter.response(&sample.features)?)?;
        let p = pnr(&stats, cfg.pnr_epsilon);
        let mut history = UpdateHistory::new(cfg.history_window);
        history.record(p, stats.max_value);
        Ok(Tracker {
            cfg: cfg.clone(),
            pipeline,
            filter,
            scale,
            state: TargetState {
                center,
                size,
                score: stats.max_value,
                pnr: p,
                updated: true,
                clamped: false,
            },
            history,
            frames: 1,
            first_fit,
        })
    }

    pub fn state(&self) -> &TargetState {
        &self.state
    }

    pub fn history(&self) -> &UpdateHistory {
        &self.history
    }

    pub fn filter(&self) -> &FilterBank {
        &self.filter
    }

    pub fn scale_filter(&self) -> Option<&ScaleFilter> {
        self.scale.as_ref()
    }

    pub fn pipeline(&self) -> &FeaturePipeline {
        &self.pipeline
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Frames processed, counting the initialization frame.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn first_fit(&self) -> &FitReport {
        &self.first_fit
    }

    /// Response of the current filter on a search window at `center`, `size`.
    pub fn response_at(&self, image: &DenseMap, center: (f64, f64), size: (f64, f64)) -> Result<DenseMap> {
        let gray = to_gray(image)?;
        let window = self.pipeline.search_window(center, size);
        self.filter.response(&self.pipeline.features(&gray, &window)?)
    }

    pub fn step(&mut self, image: &DenseMap) -> Result<TargetState> {
        let gray = to_gray(image)?;
        let cfg = &self.cfg;
        let prev = self.state;

        let (window, features, response, multires) = if cfg.scale_mode == ScaleMode::Multires {
            let est = estimate_scale_multires(
                &gray,
                prev.center,
                prev.size,
                &self.pipeline,
                &self.filter,
                &cfg.multires_scales,
                cfg.multires_penalty,
            )?;
            (est.window, est.features, est.response, Some(est.multiplier))
        } else {
            let window = self.pipeline.search_window(prev.center, prev.size);
            let features = self.pipeline.features(&gray, &window)?;
            let response = self.filter.response(&features)?;
            (window, features, response, None)
        };

        let stats = map_stats(&response)?;
        let (di, dj) = if cfg.subpixel {
            subpixel_refine(&response, stats.max_pos)
        } else {
            (0.0, 0.0)
        };
        let peak = (stats.max_pos.0 as f64 + di, stats.max_pos.1 as f64 + dj);
        let mut center = self.pipeline.map_to_image(&window, peak);
        let p = pnr(&stats, cfg.pnr_epsilon);
        // Without the ratio criterion only the peak height gates updates.
        let beta_pnr = if cfg.use_pnr { cfg.beta_pnr } else { 0.0 };
        let update = should_update(&mut self.history, p, stats.max_value, beta_pnr, cfg.beta_rmax)?;

        let (w, h) = (gray.width() as f64, gray.height() as f64);
        let clamped = !(center.0 >= 0.0 && center.0 < w && center.1 >= 0.0 && center.1 < h);
        if clamped {
            center = (center.0.clamp(0.0, w - 1.0), center.1.clamp(0.0, h - 1.0));
        }

        let mut size = prev.size;
        if let Some(m) = multires.filter(|_| update || !cfg.gate_scale_estimation) {
            let m = 1.0 + cfg.multires_damping * (m - 1.0);
            size = (prev.size.0 * m, prev.size.1 * m);
        }
        if let Some(sf) = &self.scale {
            if update || !cfg.gate_scale_estimation {
                let samples = build_scale_samples(&gray, center, prev.size, sf, self.pipeline.stack())?;
                let est = estimate_from_samples(&samples, sf, cfg.subpixel, cfg.scale_clamp)?;
                size = (prev.size.0 * est.multiplier, prev.size.1 * est.multiplier);
                if update {
                    self.scale = Some(update_scale_filter(
                        &samples,
                        sf,
                        est.peak,
                        cfg.scale_update_lr,
                        cfg.scale_lambda,
                    )?);
                }
            }
        }
        size = (size.0.clamp(MIN_SIZE, w), size.1.clamp(MIN_SIZE, h));

        if update {
            let label = self.pipeline.label(self.pipeline.image_to_response(&window, center))?;
            let sample = TrainSample::new(features, label);
            self.filter = update_one_step(&sample, &self.filter, cfg.update_lr, cfg.update_lambda)?;
        }

        self.frames += 1;
        self.state = TargetState {
            center,
            size,
            score: stats.max_value,
            pnr: p,
            updated: update,
            clamped,
        };
        Ok(self.state)
    }
}

fn scale_params(cfg: &TrackerConfig) -> SolverParams {
    SolverParams {
        steps: cfg.first_frame_steps,
        learning_rate: cfg.scale_lr,
        lambda: cfg.scale_lambda,
        momentum: cfg.momentum,
        init_std: 0.0,
    }
}
