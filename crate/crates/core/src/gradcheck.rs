//! Central finite-difference checks of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::TrackerConfig;
use crate::error::Result;
use crate::features::ConvStack;
use crate::pipeline::FeaturePipeline;
use crate::regression::{end_to_end_gradients, grad_filters, loss, FilterBank, TrainSample};
use crate::scale::{scale_loss_and_grad, ScaleFilter, ScaleSampleSet};
use crate::tensor::{DenseMap, Shape};

pub const EPSILON: f64 = 1e-5;

/// Instances whose rectifier inputs come closer to zero than this are
/// redrawn, since a stencil straddling the kink has no meaningful derivative.
pub const KINK_MARGIN: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` along every entry of `x`, compared with `grad`.
/// Returns the largest relative error.
pub fn check_entries<F>(x: &mut DenseMap, grad: &DenseMap, mut f: F) -> Result<f64>
where
    F: FnMut(&DenseMap) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + EPSILON;
        let up = f(x)?;
        x.data_mut()[i] = orig - EPSILON;
        let down = f(x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * EPSILON);
        worst = worst.max(relative_error(grad.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
}

fn normal_map<R: Rng>(rng: &mut R, shape: Shape, std: f64) -> DenseMap {
    let data = (0..shape.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    DenseMap::from_vec(shape.channels, shape.height, shape.width, data).expect("sized from shape")
}

/// Filter and feature gradients of the regression loss.
pub fn filter_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = rng.random_range(1..=4);
        let (fh, fw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let (h, w) = (fh + rng.random_range(0..=6), fw + rng.random_range(0..=6));
        let lambda = rng.random_range(0.0..0.5);
        let x = normal_map(&mut rng, Shape::new(c, h, w), 1.0);
        let y = normal_map(&mut rng, Shape::new(1, h - fh + 1, w - fw + 1), 1.0);
        let mut f = FilterBank {
            f: normal_map(&mut rng, Shape::new(c, fh, fw), 0.5),
        };
        let sample = TrainSample::new(x, y);
        let g = grad_filters(&sample, &f, lambda)?;
        let mut fm = f.f.clone();
        worst = worst.max(check_entries(&mut fm, &g.filter, |m| {
            f.f = m.clone();
            loss(&sample, &f, lambda)
        })?);
        f.f = fm;
        let mut xm = sample.features.clone();
        worst = worst.max(check_entries(&mut xm, &g.features, |m| {
            loss(&TrainSample::new(m.clone(), sample.label.clone()), &f, lambda)
        })?);
    }
    Ok(SuiteReport {
        name: "filter".into(),
        instances,
        max_relative_error: worst,
    })
}

/// Stack and filter gradients through crop features, Hann window and
/// energy normalization, with weight decay on both.
pub fn stack_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrackerConfig {
        patch_size: 24,
        ..TrackerConfig::desk_defaults()
    };
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let stack = ConvStack::random(1, &ConvStack::default_specs(), &mut rng)?;
        let pipeline = FeaturePipeline::new(stack, &cfg)?;
        let p = cfg.patch_size;
        let input = normal_map(&mut rng, Shape::new(1, p, p), 1.0);
        if pipeline.stack().min_abs_preactivation(&input)? < KINK_MARGIN {
            continue;
        }
        let (rh, rw) = pipeline.response_size();
        let center = (rng.random_range(0.0..rh as f64), rng.random_range(0.0..rw as f64));
        let label = pipeline.label(center)?;
        let (fh, fw) = pipeline.filter_size();
        let f = FilterBank {
            f: normal_map(&mut rng, Shape::new(pipeline.channels(), fh, fw), 0.5),
        };
        let lambda = rng.random_range(0.0..0.05);
        let (_, stack_grads, filter_grad) = end_to_end_gradients(&pipeline, &input, &label, &f, lambda, true)?;
        let eval = |pl: &FeaturePipeline, fb: &FilterBank| -> Result<f64> {
            Ok(end_to_end_gradients(pl, &input, &label, fb, lambda, true)?.0)
        };
        let mut fm = f.f.clone();
        worst = worst.max(check_entries(&mut fm, &filter_grad, |m| {
            eval(&pipeline, &FilterBank { f: m.clone() })
        })?);
        for (l, g) in stack_grads.iter().enumerate() {
            let mut wm = pipeline.stack().layers[l].weights.clone();
            let mut probe = pipeline.clone();
            worst = worst.max(check_entries(&mut wm, g, |m| {
                probe.stack_mut().layers[l].weights = m.clone();
                eval(&probe, &f)
            })?);
        }
        done += 1;
    }
    Ok(SuiteReport {
        name: "stack".into(),
        instances,
        max_relative_error: worst,
    })
}

/// Scale filter gradient, single-tap and multi-tap.
pub fn scale_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let count = 2 * rng.random_range(1..=8) + 1;
        let taps = 2 * rng.random_range(0..=(count - 1) / 2) + 1;
        let dim = rng.random_range(1..=12);
        let samples = ScaleSampleSet {
            features: normal_map(&mut rng, Shape::new(1, dim, count), 1.0),
            exponents: (0..count as i32).map(|k| k - (count as i32 - 1) / 2).collect(),
            patch_sizes: vec![(1.0, 1.0); count],
            pixel_sizes: vec![(2, 2); count],
        };
        let mut filter = ScaleFilter {
            weights: normal_map(&mut rng, Shape::new(1, dim, taps), 0.5),
            count,
            factor: 1.02,
            sigma: count as f64 / 16.0,
            template: 16,
            pool: 4,
            trained: true,
        };
        let label = filter.label(rng.random_range(0.0..count as f64));
        let lambda = rng.random_range(0.0..0.5);
        let (_, g) = scale_loss_and_grad(&samples, &filter, &label, lambda)?;
        let mut wm = filter.weights.clone();
        worst = worst.max(check_entries(&mut wm, &g, |m| {
            filter.weights = m.clone();
            Ok(scale_loss_and_grad(&samples, &filter, &label, lambda)?.0)
        })?);
    }
    Ok(SuiteReport {
        name: "scale".into(),
        instances,
        max_relative_error: worst,
    })
}

/// All suites with `instances` each.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        filter_suite(instances, seed)?,
        stack_suite(instances, seed.wrapping_add(1))?,
        scale_suite(instances, seed.wrapping_add(2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_suites_pass() {
        for r in run_all(3, 11).unwrap() {
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }
}
