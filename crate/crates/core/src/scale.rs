//! Scale estimation: a pyramid of target-sized patches scored by a learned
//! 1-D correlation filter over the scale dimension, and the exhaustive
//! multi-resolution search it replaces.
//!
//! Samples form a `D × S` matrix `X` whose column `k` holds the features of
//! the patch scaled by `a^(k−c)`, `c = (S−1)/2`. With `T` filter taps `W`
//! (`D × T`, `T` odd, `h = (T−1)/2`) the response is the zero-padded 1-D
//! correlation
//!
//! ```text
//! r[k] = Σ_t W[:, t] · X[:, k + t − h]
//! ```
//!
//! With a single tap this scores every scale with one shared template, and
//! a pyramid shifted by `m` scales shifts the response by exactly `m`. Wider
//! filters see the zero padding and learn to favor the center column.

use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::features::{adaptive_mean_pool, crop_and_resize, normalize_energy, ConvStack, Region};
use crate::pipeline::{FeaturePipeline, SearchWindow};
use crate::regression::{FilterBank, FitReport, SgdState, SolverParams};
use crate::tensor::{map_stats, parabolic_offset, DenseMap};

/// Learned scale filter plus the pyramid layout it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFilter {
    /// `1 × D × T` taps.
    pub weights: DenseMap,
    /// Number of scales `S`.
    pub count: usize,
    pub factor: f64,
    /// Label sigma in taps.
    pub sigma: f64,
    /// Side of the square template every pyramid patch is resampled to.
    pub template: usize,
    /// Side of the pooling grid applied to the template features.
    pub pool: usize,
    pub trained: bool,
}

impl ScaleFilter {
    /// Zero filter sized for features of `stack` on `template`-pixel patches.
    pub fn new(stack: &ConvStack, layout: ScaleLayout) -> Result<Self> {
        let ScaleLayout {
            count,
            taps,
            factor,
            sigma,
            template,
            pool,
        } = layout;
        if count == 0 || count % 2 == 0 {
            return Err(Error::invalid(format!("scale count must be odd, got {count}")));
        }
        if taps == 0 || taps % 2 == 0 || taps > count {
            return Err(Error::invalid(format!("scale taps must be odd and at most {count}, got {taps}")));
        }
        if !(factor > 1.0) {
            return Err(Error::invalid(format!("scale factor must exceed 1, got {factor}")));
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("scale label sigma must be positive, got {sigma}")));
        }
        let dim = feature_dim(stack, template, pool)?;
        Ok(ScaleFilter {
            weights: DenseMap::zeros(1, dim, taps),
            count,
            factor,
            sigma,
            template,
            pool,
            trained: false,
        })
    }

    pub fn from_config(stack: &ConvStack, cfg: &TrackerConfig) -> Result<Self> {
        Self::new(
            stack,
            ScaleLayout {
                count: cfg.scale_count,
                taps: cfg.scale_taps,
                factor: cfg.scale_factor,
                sigma: cfg.scale_sigma_factor * cfg.scale_count as f64,
                template: cfg.scale_template,
                pool: cfg.scale_pool,
            },
        )
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn taps(&self) -> usize {
        self.weights.width()
    }

    pub fn dim(&self) -> usize {
        self.weights.height()
    }

    pub fn center(&self) -> usize {
        (self.count() - 1) / 2
    }

    /// Scale exponents in column order.
    pub fn exponents(&self) -> Vec<i32> {
        let c = self.center() as i32;
        (0..self.count() as i32).map(|k| k - c).collect()
    }

    /// 1-D Gaussian label over the columns, peaked at column `center`.
    pub fn label(&self, center: f64) -> Vec<f64> {
        (0..self.count())
            .map(|k| {
                let d = k as f64 - center;
                (-0.5 * d * d / (self.sigma * self.sigma)).exp()
            })
            .collect()
    }
}

/// Shape parameters of a [`ScaleFilter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleLayout {
    pub count: usize,
    pub taps: usize,
    pub factor: f64,
    /// Label sigma in scale steps.
    pub sigma: f64,
    pub template: usize,
    pub pool: usize,
}

/// Pooled grid side and flattened length of scale features.
fn pooled_side(stack: &ConvStack, template: usize, pool: usize) -> Result<(usize, usize)> {
    let (h, w) = stack.output_size(template, template).ok_or_else(|| {
        Error::invalid(format!("scale template {template}px too small for the feature stack"))
    })?;
    let channels = stack.output_channels(1);
    // keep at least as many dimensions as a 4x4 grid of 16 channels would give
    let side = pool.max(((256 / channels.max(1)) as f64).sqrt().floor() as usize);
    Ok((side.min(h).min(w).max(1), channels))
}

/// Length of one scale feature vector.
pub fn feature_dim(stack: &ConvStack, template: usize, pool: usize) -> Result<usize> {
    let (side, channels) = pooled_side(stack, template, pool)?;
    Ok(side * side * channels)
}

/// Pyramid features of one frame: column `k` belongs to exponent `exponents[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSampleSet {
    /// `1 × D × S`, normalized to unit energy as a whole.
    pub features: DenseMap,
    pub exponents: Vec<i32>,
    /// Exact patch size `a^n (W, H)` for each column.
    pub patch_sizes: Vec<(f64, f64)>,
    /// Patch size actually cropped, in whole pixels.
    pub pixel_sizes: Vec<(usize, usize)>,
}

impl ScaleSampleSet {
    pub fn count(&self) -> usize {
        self.features.width()
    }

    pub fn dim(&self) -> usize {
        self.features.height()
    }

    /// Feature vector of column `k`.
    pub fn row(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|d| self.features.get(0, d, k)).collect()
    }
}

/// Exact and rounded patch sizes `a^n (W, H)` for `n` in `exponents`.
pub fn pyramid_sizes(size: (f64, f64), factor: f64, exponents: &[i32]) -> Result<Vec<((f64, f64), (usize, usize))>> {
    exponents
        .iter()
        .map(|&n| {
            let s = factor.powi(n);
            let exact = (size.0 * s, size.1 * s);
            if !(exact.0 >= 1.0 && exact.1 >= 1.0) {
                return Err(Error::invalid(format!(
                    "scale exponent {n} gives a sub-pixel patch {:.3}x{:.3}",
                    exact.0, exact.1
                )));
            }
            let round = |v: f64| (v.round() as usize).max(2);
            Ok((exact, (round(exact.0), round(exact.1))))
        })
        .collect()
}

/// Crop the pyramid centered at `center` around a target of `size`.
pub fn build_scale_samples(
    gray: &DenseMap,
    center: (f64, f64),
    size: (f64, f64),
    filter: &ScaleFilter,
    stack: &ConvStack,
) -> Result<ScaleSampleSet> {
    let exponents = filter.exponents();
    let sizes = pyramid_sizes(size, filter.factor, &exponents)?;
    let (side, _) = pooled_side(stack, filter.template, filter.pool)?;
    let dim = feature_dim(stack, filter.template, filter.pool)?;
    if dim != filter.dim() {
        return Err(Error::shape("build_scale_samples", format!("{dim} features"), filter.weights.shape()));
    }
    let count = exponents.len();
    let mut x = DenseMap::zeros(1, dim, count);
    for (k, &(_, (pw, ph))) in sizes.iter().enumerate() {
        let region = Region::new(center.0, center.1, pw as f64, ph as f64);
        let patch = crop_and_resize(gray, region, (filter.template, filter.template))?.centered();
        let pooled = adaptive_mean_pool(&stack.extract(&patch)?, side, side)?;
        for (d, v) in pooled.data().iter().enumerate() {
            x.set(0, d, k, *v);
        }
    }
    Ok(ScaleSampleSet {
        features: normalize_energy(&x, 1.0),
        exponents,
        patch_sizes: sizes.iter().map(|s| s.0).collect(),
        pixel_sizes: sizes.iter().map(|s| s.1).collect(),
    })
}

fn check(samples: &ScaleSampleSet, filter: &ScaleFilter) -> Result<()> {
    if samples.dim() != filter.dim() || samples.count() != filter.count() {
        return Err(Error::shape("scale_response", samples.features.shape(), filter.weights.shape()));
    }
    Ok(())
}

/// Zero-padded 1-D correlation of the filter taps with the pyramid.
pub fn scale_response(samples: &ScaleSampleSet, filter: &ScaleFilter) -> Result<Vec<f64>> {
    check(samples, filter)?;
    Ok(correlate(&samples.features, &filter.weights))
}

fn correlate(x: &DenseMap, w: &DenseMap) -> Vec<f64> {
    let (d, s, taps) = (x.height(), x.width(), w.width());
    let h = (taps - 1) / 2;
    let mut r = vec![0.0; s];
    for row in 0..d {
        let xr = &x.data()[row * s..(row + 1) * s];
        let wr = &w.data()[row * taps..(row + 1) * taps];
        for (k, rk) in r.iter_mut().enumerate() {
            // taps t with 0 ≤ k + t − h < s
            let t0 = h.saturating_sub(k);
            let t1 = (s + h - k).min(taps);
            let mut acc = 0.0;
            for t in t0..t1 {
                acc += wr[t] * xr[k + t - h];
            }
            *rk += acc;
        }
    }
    r
}

/// Loss `Σ (r − y)² + λ ΣW²` and its gradient w.r.t. the taps.
pub fn scale_loss_and_grad(samples: &ScaleSampleSet, filter: &ScaleFilter, label: &[f64], lambda: f64) -> Result<(f64, DenseMap)> {
    check(samples, filter)?;
    if label.len() != filter.count() {
        return Err(Error::shape("scale label", label.len(), filter.count()));
    }
    let r = correlate(&samples.features, &filter.weights);
    let resid: Vec<f64> = r.iter().zip(label).map(|(a, b)| a - b).collect();
    let loss = resid.iter().map(|v| v * v).sum::<f64>() + lambda * filter.weights.sum_sq();
    let (d, s, taps) = (filter.dim(), filter.count(), filter.taps());
    let h = (taps - 1) / 2;
    let x = samples.features.data();
    let mut g = filter.weights.scaled(2.0 * lambda);
    let gd = g.data_mut();
    for row in 0..d {
        let xr = &x[row * s..(row + 1) * s];
        for t in 0..taps {
            let mut acc = 0.0;
            for (k, rk) in resid.iter().enumerate() {
                let j = k + t;
                if j >= h && j - h < s {
                    acc += rk * xr[j - h];
                }
            }
            gd[row * taps + t] += 2.0 * acc;
        }
    }
    Ok((loss, g))
}

/// Momentum SGD on the scale filter with a label centered on the unchanged
/// scale. Returns the lowest-loss iterate.
pub fn train_scale_filter(samples: &ScaleSampleSet, filter: &ScaleFilter, params: &SolverParams) -> Result<(ScaleFilter, FitReport)> {
    let label = filter.label(filter.center() as f64);
    let mut f = filter.clone();
    let mut sgd = SgdState::new(params.momentum, params.learning_rate, params.lambda);
    let mut losses = Vec::with_capacity(params.steps + 1);
    let mut best: Option<(f64, DenseMap)> = None;
    for step in 0..=params.steps {
        let (l, g) = scale_loss_and_grad(samples, &f, &label, params.lambda)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                phase: "scale filter training",
                location: format!("step {step}"),
                loss: l,
            });
        }
        losses.push(l);
        if best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, f.weights.clone()));
        }
        if step < params.steps {
            sgd.step(&mut [&mut f.weights], &[g])?;
        }
    }
    let (final_loss, w) = best.expect("at least one evaluation");
    f.weights = w;
    f.trained = true;
    Ok((
        f,
        FitReport {
            initial_loss: losses[0],
            final_loss,
            losses,
        },
    ))
}

/// One plain gradient step toward a label peaked at column `center`.
pub fn update_scale_filter(
    samples: &ScaleSampleSet,
    filter: &ScaleFilter,
    center: f64,
    learning_rate: f64,
    lambda: f64,
) -> Result<ScaleFilter> {
    let (l, g) = scale_loss_and_grad(samples, filter, &filter.label(center), lambda)?;
    if !l.is_finite() {
        return Err(Error::Divergence {
            phase: "scale update",
            location: "update step".into(),
            loss: l,
        });
    }
    let mut out = filter.clone();
    out.weights.add_scaled(-learning_rate, &g)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEstimate {
    pub multiplier: f64,
    /// Refined peak column.
    pub peak: f64,
    pub response: Vec<f64>,
}

/// Scale multiplier `a^(peak − c)` from a pyramid, clamped to `[1/clamp, clamp]`.
pub fn estimate_from_samples(samples: &ScaleSampleSet, filter: &ScaleFilter, subpixel: bool, clamp: f64) -> Result<ScaleEstimate> {
    if !filter.trained {
        return Err(Error::invalid("scale filter has not been trained"));
    }
    let response = scale_response(samples, filter)?;
    let c = filter.center();
    let mut best = c;
    for (k, v) in response.iter().enumerate() {
        // ties go to the column nearest the unchanged scale
        if *v > response[best] || (*v == response[best] && k.abs_diff(c) < best.abs_diff(c)) {
            best = k;
        }
    }
    let mut peak = best as f64;
    if subpixel && best > 0 && best + 1 < response.len() {
        peak += parabolic_offset(response[best - 1], response[best], response[best + 1]);
    }
    let raw = filter.factor.powf(peak - c as f64);
    Ok(ScaleEstimate {
        multiplier: clamp_multiplier(raw, clamp),
        peak,
        response,
    })
}

pub fn clamp_multiplier(m: f64, clamp: f64) -> f64 {
    m.clamp(1.0 / clamp, clamp)
}

/// Build the pyramid at `center` and estimate the scale change.
pub fn estimate_scale(
    gray: &DenseMap,
    center: (f64, f64),
    size: (f64, f64),
    filter: &ScaleFilter,
    stack: &ConvStack,
    subpixel: bool,
    clamp: f64,
) -> Result<(ScaleEstimate, ScaleSampleSet)> {
    if !filter.trained {
        return Err(Error::invalid("scale filter has not been trained"));
    }
    let samples = build_scale_samples(gray, center, size, filter, stack)?;
    Ok((estimate_from_samples(&samples, filter, subpixel, clamp)?, samples))
}

/// Winner of an exhaustive multi-resolution search.
#[derive(Clone, Debug)]
pub struct MultiresEstimate {
    pub multiplier: f64,
    pub window: SearchWindow,
    pub features: DenseMap,
    pub response: DenseMap,
}

/// Evaluate the translation filter on windows resized by each multiplier and
/// keep the one with the largest response maximum; ties go to the multiplier
/// closest to 1.
pub fn estimate_scale_multires(
    gray: &DenseMap,
    center: (f64, f64),
    size: (f64, f64),
    pipeline: &FeaturePipeline,
    filter: &FilterBank,
    scales: &[f64],
    penalty: f64,
) -> Result<MultiresEstimate> {
    if scales.is_empty() {
        return Err(Error::invalid("multi-resolution search needs at least one scale"));
    }
    let mut best: Option<(f64, MultiresEstimate)> = None;
    for &s in scales {
        let window = pipeline.search_window(center, (size.0 * s, size.1 * s));
        let features = pipeline.features(gray, &window)?;
        let response = filter.response(&features)?;
        let raw = map_stats(&response)?.max_value;
        let peak = if s == 1.0 { raw } else { raw - (1.0 - penalty) * raw.abs() };
        let better = match &best {
            None => true,
            Some((p, e)) => peak > *p || (peak == *p && s.ln().abs() < e.multiplier.ln().abs()),
        };
        if better {
            best = Some((
                peak,
                MultiresEstimate {
                    multiplier: s,
                    window,
                    features,
                    response,
                },
            ));
        }
    }
    Ok(best.expect("non-empty scales").1)
}
