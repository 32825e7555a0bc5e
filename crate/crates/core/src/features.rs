//! Patch preprocessing and the convolutional feature extractor.
//!
//! A [`ConvStack`] is a sequence of valid, strided cross-correlation layers
//! with optional rectifiers. The empty stack is the raw-channel extractor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMap, Shape};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Axis-aligned image region given by its center and size, in image pixels.
///
/// Pixel `p` covers the continuous interval `[p, p + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Region {
    pub fn new(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Region {
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.width / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.height / 2.0
    }
}

/// A resampled image crop with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: DenseMap,
    pub source_window: Region,
}

impl Patch {
    /// Pixels with the per-patch mean removed from every channel.
    pub fn centered(&self) -> DenseMap {
        let mut out = self.pixels.clone();
        for l in 0..out.channels() {
            let ch = out.channel_mut(l);
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            ch.iter_mut().for_each(|v| *v -= mean);
        }
        out
    }
}

/// Luminance conversion for 3-channel images; 1-channel input is returned as is.
pub fn to_gray(image: &DenseMap) -> Result<DenseMap> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => {
            let plane = image.height() * image.width();
            let mut out = DenseMap::zeros(1, image.height(), image.width());
            let dst = out.data_mut();
            for (l, w) in LUMA.iter().enumerate() {
                for (d, s) in dst.iter_mut().zip(image.channel(l)) {
                    *d += w * s;
                }
            }
            debug_assert_eq!(dst.len(), plane);
            Ok(out)
        }
        c => Err(Error::invalid(format!("images must have 1 or 3 channels, got {c}"))),
    }
}

/// Bilinear resampling of `window` into an `out_size` (rows, cols) patch.
///
/// Samples outside the image replicate the nearest edge pixel.
pub fn crop_and_resize(image: &DenseMap, window: Region, out_size: (usize, usize)) -> Result<Patch> {
    if image.is_empty() {
        return Err(Error::invalid("cannot crop an empty image"));
    }
    if !(window.width > 0.0 && window.height > 0.0) || !window.cx.is_finite() || !window.cy.is_finite() {
        return Err(Error::invalid(format!("crop window must have positive size: {window:?}")));
    }
    let (oh, ow) = out_size;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!("crop output size {oh}x{ow}")));
    }
    let (ih, iw) = (image.height(), image.width());
    let sx = window.width / ow as f64;
    let sy = window.height / oh as f64;
    let (x0, y0) = (window.left(), window.top());

    // Per-column and per-row sample taps: (index0, index1, weight1).
    let taps = |n_out: usize, origin: f64, step: f64, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|k| {
                // continuous coordinate of the sample, converted to pixel-index coordinates
                let p = (origin + (k as f64 + 0.5) * step - 0.5).clamp(0.0, (n_in - 1) as f64);
                let p0 = p.floor() as usize;
                let p1 = (p0 + 1).min(n_in - 1);
                (p0, p1, p - p0 as f64)
            })
            .collect()
    };
    let cols = taps(ow, x0, sx, iw);
    let rows = taps(oh, y0, sy, ih);

    let mut out = DenseMap::zeros(image.channels(), oh, ow);
    for l in 0..image.channels() {
        let src = image.channel(l);
        let dst = out.channel_mut(l);
        for (r, &(r0, r1, wr)) in rows.iter().enumerate() {
            let row0 = &src[r0 * iw..(r0 + 1) * iw];
            let row1 = &src[r1 * iw..(r1 + 1) * iw];
            for (c, &(c0, c1, wc)) in cols.iter().enumerate() {
                let top = row0[c0] + wc * (row0[c1] - row0[c0]);
                let bottom = row1[c0] + wc * (row1[c1] - row1[c0]);
                dst[r * ow + c] = top + wr * (bottom - top);
            }
        }
    }
    Ok(Patch {
        pixels: out,
        source_window: window,
    })
}

/// Multiply every channel of `features` by a single-channel `window`.
pub fn apply_window(features: &DenseMap, window: &DenseMap) -> Result<DenseMap> {
    if window.channels() != 1 || window.height() != features.height() || window.width() != features.width() {
        return Err(Error::shape("apply_window", features.shape(), window.shape()));
    }
    let mut out = features.clone();
    for l in 0..out.channels() {
        for (v, w) in out.channel_mut(l).iter_mut().zip(window.data()) {
            *v *= w;
        }
    }
    Ok(out)
}

/// Rescale `features` so that its squared norm equals `energy`. A zero map stays zero.
pub fn normalize_energy(features: &DenseMap, energy: f64) -> DenseMap {
    let norm = features.sum_sq().sqrt();
    if norm == 0.0 {
        return features.clone();
    }
    features.scaled(energy.sqrt() / norm)
}

/// Backward pass of [`normalize_energy`] given the pre-normalization input.
pub fn normalize_energy_backward(features: &DenseMap, energy: f64, upstream: &DenseMap) -> Result<DenseMap> {
    features.same_shape("normalize_energy_backward", upstream)?;
    let norm = features.sum_sq().sqrt();
    if norm == 0.0 {
        return Ok(DenseMap::zeros(features.channels(), features.height(), features.width()));
    }
    let unit = features.scaled(1.0 / norm);
    let along = unit.dot(upstream)?;
    let mut out = upstream.clone();
    out.add_scaled(-along, &unit)?;
    out.scale(energy.sqrt() / norm);
    Ok(out)
}

/// Mean-pool each channel onto a `(rows, cols)` grid of near-equal bins.
pub fn adaptive_mean_pool(features: &DenseMap, rows: usize, cols: usize) -> Result<DenseMap> {
    if rows == 0 || cols == 0 || rows > features.height() || cols > features.width() {
        return Err(Error::invalid(format!(
            "cannot pool {} onto {rows}x{cols}",
            features.shape()
        )));
    }
    let (h, w) = (features.height(), features.width());
    let bins = |k: usize, n_out: usize, n_in: usize| (k * n_in / n_out, ((k + 1) * n_in).div_ceil(n_out));
    let mut out = DenseMap::zeros(features.channels(), rows, cols);
    for l in 0..features.channels() {
        let src = features.channel(l);
        for r in 0..rows {
            let (r0, r1) = bins(r, rows, h);
            for c in 0..cols {
                let (c0, c1) = bins(c, cols, w);
                let mut acc = 0.0;
                for i in r0..r1 {
                    acc += src[i * w + c0..i * w + c1].iter().sum::<f64>();
                }
                out.set(l, r, c, acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    Ok(out)
}

/// Shape of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

/// Filter bank stored as a map with `out × in` channels (output-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weights: DenseMap,
    pub out_channels: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub relu: bool,
}

impl ConvLayer {
    pub fn new(weights: DenseMap, out_channels: usize, in_channels: usize, stride: usize, relu: bool) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || weights.channels() != out_channels * in_channels {
            return Err(Error::shape(
                "ConvLayer::new",
                weights.shape(),
                format!("{out_channels} out x {in_channels} in"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("layer stride must be positive"));
        }
        Ok(ConvLayer {
            weights,
            out_channels,
            in_channels,
            stride,
            relu,
        })
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.height(), self.weights.width())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        if h < kh || w < kw {
            return None;
        }
        Some(((h - kh) / self.stride + 1, (w - kw) / self.stride + 1))
    }

    /// Pre-activation output of the layer.
    fn correlate(&self, x: &DenseMap) -> Result<DenseMap> {
        let (oh, ow) = self
            .output_size(x.height(), x.width())
            .filter(|_| x.channels() == self.in_channels)
            .ok_or_else(|| Error::shape("conv layer", x.shape(), self.weights.shape()))?;
        let (kh, kw) = self.kernel();
        let s = self.stride;
        let xw = x.width();
        let mut out = DenseMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let dst = out.channel_mut(o);
            for c in 0..self.in_channels {
                let xs = x.channel(c);
                let ws = self.weights.channel(o * self.in_channels + c);
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = ws[u * kw + v];
                        for i in 0..oh {
                            let row = &xs[(s * i + u) * xw + v..];
                            let d = &mut dst[i * ow..(i + 1) * ow];
                            if s == 1 {
                                for (dv, xv) in d.iter_mut().zip(row) {
                                    *dv += wv * xv;
                                }
                            } else {
                                for (j, dv) in d.iter_mut().enumerate() {
                                    *dv += wv * row[s * j];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Weight and input gradients given the layer input and the gradient
    /// with respect to the pre-activation output.
    fn backward(&self, x: &DenseMap, g: &DenseMap) -> (DenseMap, DenseMap) {
        let (kh, kw) = self.kernel();
        let s = self.stride;
        let (oh, ow) = (g.height(), g.width());
        let xw = x.width();
        let mut gw = DenseMap::zeros(self.weights.channels(), kh, kw);
        let mut gx = DenseMap::zeros(x.channels(), x.height(), x.width());
        for o in 0..self.out_channels {
            let gs = g.channel(o);
            for c in 0..self.in_channels {
                let xs = x.channel(c);
                let ws = self.weights.channel(o * self.in_channels + c).to_vec();
                let gws = gw.channel_mut(o * self.in_channels + c);
                for u in 0..kh {
                    for v in 0..kw {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let row = &xs[(s * i + u) * xw + v..];
                            let gr = &gs[i * ow..(i + 1) * ow];
                            for (j, gv) in gr.iter().enumerate() {
                                acc += gv * row[s * j];
                            }
                        }
                        gws[u * kw + v] = acc;
                    }
                }
                let gxs = gx.channel_mut(c);
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = ws[u * kw + v];
                        for i in 0..oh {
                            let base = (s * i + u) * xw + v;
                            let gr = &gs[i * ow..(i + 1) * ow];
                            for (j, gv) in gr.iter().enumerate() {
                                gxs[base + s * j] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        (gw, gx)
    }
}

/// Ordered convolutional layers; the empty stack passes pixels through.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

/// Layer inputs and pre-activations recorded by a forward pass.
struct Trace {
    inputs: Vec<DenseMap>,
    pre: Vec<DenseMap>,
}

impl ConvStack {
    pub fn empty() -> Self {
        ConvStack { layers: Vec::new() }
    }

    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::shape(
                    "ConvStack::new",
                    format!("{} output channels", pair[0].out_channels),
                    format!("{} input channels", pair[1].in_channels),
                ));
            }
        }
        Ok(ConvStack { layers })
    }

    /// Zero-mean Gaussian initialization; rectified layers use `sqrt(2/fan_in)`,
    /// linear layers `sqrt(1/fan_in)`.
    pub fn random<R: Rng + ?Sized>(in_channels: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut c_in = in_channels;
        for spec in specs {
            if spec.filters == 0 || spec.kernel == 0 {
                return Err(Error::invalid(format!("degenerate layer spec {spec:?}")));
            }
            let fan_in = (c_in * spec.kernel * spec.kernel) as f64;
            let gain = if spec.relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            let n = spec.filters * c_in * spec.kernel * spec.kernel;
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            let weights = DenseMap::from_vec(spec.filters * c_in, spec.kernel, spec.kernel, data)?;
            layers.push(ConvLayer::new(weights, spec.filters, c_in, spec.stride, spec.relu)?);
            c_in = spec.filters;
        }
        ConvStack::new(layers)
    }

    /// 8 filters 3×3 stride 2 with rectifier, then 16 filters 3×3 stride 2 linear.
    pub fn default_specs() -> [LayerSpec; 2] {
        [
            LayerSpec {
                filters: 8,
                kernel: 3,
                stride: 2,
                relu: true,
            },
            LayerSpec {
                filters: 16,
                kernel: 3,
                stride: 2,
                relu: false,
            },
        ]
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Input-pixel index (row, col) of the center of output cell (0, 0).
    pub fn cell_offset(&self) -> (f64, f64) {
        let mut off = (0.0, 0.0);
        let mut stride = 1.0;
        for layer in &self.layers {
            let (kh, kw) = layer.kernel();
            off.0 += stride * (kh as f64 - 1.0) / 2.0;
            off.1 += stride * (kw as f64 - 1.0) / 2.0;
            stride *= layer.stride as f64;
        }
        off
    }

    pub fn output_channels(&self, in_channels: usize) -> usize {
        self.layers.last().map_or(in_channels, |l| l.out_channels)
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_channels)
    }

    /// Spatial output size for an input of `h × w`, or `None` if too small.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.layers
            .iter()
            .try_fold((h, w), |(h, w), layer| layer.output_size(h, w))
    }

    /// Smallest input (rows, cols) producing a 1×1 output.
    pub fn min_input_size(&self) -> (usize, usize) {
        self.layers.iter().rev().fold((1, 1), |(h, w), layer| {
            let (kh, kw) = layer.kernel();
            ((h - 1) * layer.stride + kh, (w - 1) * layer.stride + kw)
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    fn check_input(&self, input: &DenseMap) -> Result<()> {
        if let Some(c) = self.input_channels() {
            if c != input.channels() {
                return Err(Error::shape("extract", input.shape(), format!("{c} input channels")));
            }
        }
        if self.output_size(input.height(), input.width()).is_none() {
            let (mh, mw) = self.min_input_size();
            return Err(Error::invalid(format!(
                "patch {}x{} too small for the feature stack; need at least {mh}x{mw}",
                input.height(),
                input.width()
            )));
        }
        Ok(())
    }

    fn trace(&self, input: &DenseMap) -> Result<(DenseMap, Trace)> {
        self.check_input(input)?;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let pre = layer.correlate(&x)?;
            let post = if layer.relu { pre.map(|v| v.max(0.0)) } else { pre.clone() };
            trace.inputs.push(std::mem::replace(&mut x, post));
            trace.pre.push(pre);
        }
        Ok((x, trace))
    }

    /// Run every layer in order on `input`.
    pub fn extract(&self, input: &DenseMap) -> Result<DenseMap> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut y = layer.correlate(&x)?;
            if layer.relu {
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        Ok(x)
    }

    /// Exact weight gradients of `Σ upstream ⊙ extract(input)`, one per layer.
    ///
    /// The rectifier's derivative at exactly zero is taken as zero.
    pub fn backward(&self, input: &DenseMap, upstream: &DenseMap) -> Result<Vec<DenseMap>> {
        let (out, trace) = self.trace(input)?;
        if out.shape() != upstream.shape() {
            return Err(Error::shape("backward_stack", out.shape(), upstream.shape()));
        }
        let mut grads = vec![DenseMap::zeros(1, 1, 1); self.layers.len()];
        let mut g = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                for (gv, p) in g.data_mut().iter_mut().zip(trace.pre[k].data()) {
                    if *p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let (gw, gx) = layer.backward(&trace.inputs[k], &g);
            grads[k] = gw;
            g = gx;
        }
        Ok(grads)
    }

    /// Smallest |pre-activation| over all rectified cells, for detecting
    /// finite-difference stencils that straddle a kink.
    pub fn min_abs_preactivation(&self, input: &DenseMap) -> Result<f64> {
        let (_, trace) = self.trace(input)?;
        Ok(self
            .layers
            .iter()
            .zip(&trace.pre)
            .filter(|(l, _)| l.relu)
            .flat_map(|(_, p)| p.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// `w ← w + alpha · g` for every layer.
    pub fn add_scaled(&mut self, alpha: f64, grads: &[DenseMap]) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape(
                "ConvStack::add_scaled",
                format!("{} layers", self.layers.len()),
                format!("{} gradients", grads.len()),
            ));
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.weights.add_scaled(alpha, g)?;
        }
        Ok(())
    }

    pub fn weight_shapes(&self) -> Vec<Shape> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }
}

/// Free-function form of [`ConvStack::extract`].
pub fn extract(input: &DenseMap, stack: &ConvStack) -> Result<DenseMap> {
    stack.extract(input)
}

/// Free-function form of [`ConvStack::backward`].
pub fn backward_stack(stack: &ConvStack, input: &DenseMap, upstream: &DenseMap) -> Result<Vec<DenseMap>> {
    stack.backward(input, upstream)
}
