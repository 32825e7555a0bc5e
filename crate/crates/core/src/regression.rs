//! The regression head: filter bank, the L2 objective with ridge penalty,
//! its analytic gradients, momentum SGD, and the three training phases
//! (offline, first frame, one-step online update).
//!
//! Objective for one sample `(x, y)` and filters `f`:
//!
//! ```text
//! L = Σ_cells (R(x) − y)² + λ Σ f²,    R(x) = Σ_l x^l ⋆ f^l  (valid correlation)
//! ```

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{OfflineConfig, TrackerConfig};
use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::features::to_gray;
use crate::pipeline::FeaturePipeline;
use crate::tensor::{xcorr2d_filter_grad, xcorr2d_input_grad, xcorr2d_valid, DenseMap, Shape};

/// Correlation filters `f`, one channel per feature channel, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub f: DenseMap,
}

impl FilterBank {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FilterBank {
            f: DenseMap::zeros(channels, height, width),
        }
    }

    /// Zero-mean Gaussian initialization.
    pub fn random<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        if std == 0.0 {
            return Self::zeros(shape.channels, shape.height, shape.width);
        }
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.len()).map(|_| normal.sample(rng)).collect();
        FilterBank {
            f: DenseMap::from_vec(shape.channels, shape.height, shape.width, data).expect("sized from shape"),
        }
    }

    pub fn shape(&self) -> Shape {
        self.f.shape()
    }

    pub fn response(&self, x: &DenseMap) -> Result<DenseMap> {
        xcorr2d_valid(x, &self.f)
    }
}

/// Momentum SGD; weight decay is part of the gradient, not applied here.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<DenseMap>,
    pub momentum: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl SgdState {
    pub fn new(momentum: f64, learning_rate: f64, weight_decay: f64) -> Self {
        SgdState {
            velocity: Vec::new(),
            momentum,
            learning_rate,
            weight_decay,
        }
    }

    /// `v ← μ v − η g`, `p ← p + v`. Velocities start at zero on first use.
    pub fn step(&mut self, params: &mut [&mut DenseMap], grads: &[DenseMap]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} params", params.len()),
                format!("{} grads", grads.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| DenseMap::zeros(p.channels(), p.height(), p.width()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} velocities", self.velocity.len()),
                format!("{} params", params.len()),
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            p.same_shape("sgd_step", g)?;
            p.same_shape("sgd_step", v)?;
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv - self.learning_rate * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SgdState::step`].
pub fn sgd_step(params: &mut [&mut DenseMap], grads: &[DenseMap], state: &mut SgdState) -> Result<()> {
    state.step(params, grads)
}

/// Features `x` paired with a label sized to the valid-correlation output.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub features: DenseMap,
    pub label: DenseMap,
}

impl TrainSample {
    pub fn new(features: DenseMap, label: DenseMap) -> Self {
        TrainSample { features, label }
    }

    fn check(&self, f: &FilterBank) -> Result<()> {
        let x = self.features.shape();
        let fs = f.shape();
        if x.channels != fs.channels || fs.height > x.height || fs.width > x.width {
            return Err(Error::shape("regression sample", x, fs));
        }
        let expect = Shape::new(1, x.height - fs.height + 1, x.width - fs.width + 1);
        if self.label.shape() != expect {
            return Err(Error::shape("regression label", self.label.shape(), expect));
        }
        Ok(())
    }
}

/// Loss value together with gradients w.r.t. the filters and the features.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub filter: DenseMap,
    pub features: DenseMap,
}

pub fn loss(sample: &TrainSample, f: &FilterBank, lambda: f64) -> Result<f64> {
    sample.check(f)?;
    let r = f.response(&sample.features)?;
    let data: f64 = r
        .data()
        .iter()
        .zip(sample.label.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(data + lambda * f.f.sum_sq())
}

/// `∂L/∂f = 2 Σ (R − y) x + 2λ f`, and `∂L/∂x` as the transposed correlation
/// of the residual with `f`.
pub fn grad_filters(sample: &TrainSample, f: &FilterBank, lambda: f64) -> Result<Gradients> {
    let (loss, filter, residual) = filter_gradient(sample, f, lambda)?;
    let mut features = xcorr2d_input_grad(&residual, &f.f)?;
    features.scale(2.0);
    Ok(Gradients {
        loss,
        filter,
        features,
    })
}

/// Loss, filter gradient and residual, without the feature gradient.
fn filter_gradient(sample: &TrainSample, f: &FilterBank, lambda: f64) -> Result<(f64, DenseMap, DenseMap)> {
    sample.check(f)?;
    let r = f.response(&sample.features)?;
    let residual = r.sub(&sample.label)?;
    let loss = residual.sum_sq() + lambda * f.f.sum_sq();
    let mut g = xcorr2d_filter_grad(&sample.features, &residual, f.f.height(), f.f.width())?;
    g.scale(2.0);
    g.add_scaled(2.0 * lambda, &f.f)?;
    Ok((loss, g, residual))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub init_std: f64,
}

impl SolverParams {
    pub fn first_frame(cfg: &TrackerConfig) -> Self {
        SolverParams {
            steps: cfg.first_frame_steps,
            learning_rate: cfg.first_frame_lr,
            lambda: cfg.first_frame_lambda,
            momentum: cfg.momentum,
            init_std: cfg.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before each step, then the loss of the returned filters.
    pub losses: Vec<f64>,
}

/// Momentum SGD from `init`. Returns the lowest-loss iterate, so the final
/// loss never exceeds the initial one.
pub fn fit(sample: &TrainSample, init: FilterBank, params: &SolverParams, phase: &'static str) -> Result<(FilterBank, FitReport)> {
    let mut f = init;
    let mut sgd = SgdState::new(params.momentum, params.learning_rate, params.lambda);
    let mut losses = Vec::with_capacity(params.steps + 1);
    let mut best: Option<(f64, FilterBank)> = None;
    for step in 0..=params.steps {
        let (l, g, _) = filter_gradient(sample, &f, params.lambda)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                phase,
                location: format!("step {step}"),
                loss: l,
            });
        }
        losses.push(l);
        if best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, f.clone()));
        }
        if step < params.steps {
            sgd.step(&mut [&mut f.f], &[g])?;
        }
    }
    let (final_loss, f) = best.expect("at least one evaluation");
    Ok((
        f,
        FitReport {
            initial_loss: losses[0],
            final_loss,
            losses,
        },
    ))
}

/// Random zero-mean Gaussian initialization followed by momentum SGD.
pub fn train_first_frame<R: Rng + ?Sized>(
    sample: &TrainSample,
    filter_size: (usize, usize),
    params: &SolverParams,
    rng: &mut R,
) -> Result<(FilterBank, FitReport)> {
    let shape = Shape::new(sample.features.channels(), filter_size.0, filter_size.1);
    let init = FilterBank::random(shape, params.init_std, rng);
    fit(sample, init, params, "first-frame training")
}

/// One plain gradient step from zero velocity.
pub fn update_one_step(sample: &TrainSample, f: &FilterBank, learning_rate: f64, lambda: f64) -> Result<FilterBank> {
    let (l, g, _) = filter_gradient(sample, f, lambda)?;
    if !l.is_finite() {
        return Err(Error::Divergence {
            phase: "online update",
            location: "update step".into(),
            loss: l,
        });
    }
    let mut out = f.clone();
    out.f.add_scaled(-learning_rate, &g)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineReport {
    pub epoch_losses: Vec<f64>,
    pub samples_per_epoch: usize,
}

/// Loss and gradients of one sample through the whole pipeline, for the
/// stack weights and the filters jointly.
pub fn end_to_end_gradients(
    pipeline: &FeaturePipeline,
    input: &DenseMap,
    label: &DenseMap,
    f: &FilterBank,
    lambda: f64,
    decay_stack: bool,
) -> Result<(f64, Vec<DenseMap>, DenseMap)> {
    let sample = pipeline.sample_patch(input.clone())?;
    let train = TrainSample::new(sample.features.clone(), label.clone());
    let g = grad_filters(&train, f, lambda)?;
    let mut stack_grads = pipeline.stack_gradients(&sample, &g.features)?;
    let mut loss = g.loss;
    if decay_stack {
        for (gw, layer) in stack_grads.iter_mut().zip(&pipeline.stack().layers) {
            gw.add_scaled(2.0 * lambda, &layer.weights)?;
            loss += lambda * layer.weights.sum_sq();
        }
    }
    Ok((loss, stack_grads, g.filter))
}

/// Joint training of the feature stack and the filters on jittered crops
/// around every annotated frame of `corpus`.
pub fn offline_train(
    corpus: &[Sequence],
    pipeline: &mut FeaturePipeline,
    filter: &mut FilterBank,
    cfg: &OfflineConfig,
    momentum: f64,
) -> Result<OfflineReport> {
    let mut index: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.annotated_len()).map(move |t| (s, t)))
        .collect();
    if index.is_empty() {
        return Err(Error::invalid("offline training corpus is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter_t = Normal::new(0.0, cfg.translation_jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let jitter_s = Normal::new(0.0, cfg.scale_jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut sgd = SgdState::new(momentum, cfg.learning_rate, cfg.lambda);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let patch = pipeline.patch_size();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        index.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in index.chunks(batch).enumerate() {
            let mut grads: Option<Vec<DenseMap>> = None;
            for &(s, t) in chunk {
                let seq = &corpus[s];
                let gray = to_gray(&seq.frame(t)?)?;
                let gt = seq.annotations[t];
                let scale = jitter_s.sample(&mut rng).exp();
                let size = (gt.w * scale, gt.h * scale);
                let (cx, cy) = gt.center();
                let (ww, wh) = (pipeline.padding() * size.0, pipeline.padding() * size.1);
                let window = pipeline.search_window(
                    (cx + jitter_t.sample(&mut rng) * ww, cy + jitter_t.sample(&mut rng) * wh),
                    size,
                );
                let label = pipeline.label(pipeline.image_to_response(&window, (cx, cy)))?;
                let input = crate::features::crop_and_resize(&gray, window.region, (patch, patch))?.centered();
                let (loss, stack_grads, filter_grad) =
                    end_to_end_gradients(pipeline, &input, &label, filter, cfg.lambda, cfg.decay_stack)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        phase: "offline training",
                        location: format!("epoch {} batch {}", epoch + 1, b + 1),
                        loss,
                    });
                }
                total += loss;
                let mut g = vec![filter_grad];
                g.extend(stack_grads);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            a.add_scaled(1.0, v)?;
                        }
                    }
                }
            }
            let mut grads = grads.expect("chunks are non-empty");
            grads.iter_mut().for_each(|g| g.scale(1.0 / chunk.len() as f64));
            let mut params: Vec<&mut DenseMap> = vec![&mut filter.f];
            params.extend(pipeline.stack_mut().layers.iter_mut().map(|l| &mut l.weights));
            sgd.step(&mut params, &grads)?;
        }
        let mean = total / index.len() as f64;
        debug!("offline epoch {}: mean loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(OfflineReport {
        epoch_losses,
        samples_per_epoch: index.len(),
    })
}
