//! Dense multi-channel maps and the numerical kernels built on them.
//!
//! Storage is channel-major, then row-major: element `(l, i, j)` lives at
//! `(l * height + i) * width + j`. Correlation here never flips the kernel.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel/height/width triple of a [`DenseMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Multi-channel real-valued 2-D array in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let shape = Shape::new(channels, height, width);
        DenseMap {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(channels, height, width);
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty map shape {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape("DenseMap::from_vec", shape, format!("{} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value {bad} in map data")));
        }
        Ok(DenseMap { shape, data })
    }

    /// Single-channel map from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DenseMap {
            shape: Shape::new(1, height, width),
            data,
        }
    }

    /// Stack single-channel maps of equal size into one multi-channel map.
    pub fn stack_channels(planes: &[DenseMap]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("no channels to stack"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.height() != h || p.width() != w {
                return Err(Error::shape("stack_channels", first.shape, p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(DenseMap {
            shape: Shape::new(planes.iter().map(|p| p.channels()).sum(), h, w),
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn channels(&self) -> usize {
        self.shape.channels
    }
    pub fn height(&self) -> usize {
        self.shape.height
    }
    pub fn width(&self) -> usize {
        self.shape.width
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, l: usize, i: usize, j: usize) -> usize {
        debug_assert!(l < self.shape.channels && i < self.shape.height && j < self.shape.width);
        (l * self.shape.height + i) * self.shape.width + j
    }

    #[inline]
    pub fn get(&self, l: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(l, i, j)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, i: usize, j: usize, value: f64) {
        let k = self.index(l, i, j);
        self.data[k] = value;
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        let plane = self.shape.plane();
        &self.data[l * plane..(l + 1) * plane]
    }

    pub fn channel_mut(&mut self, l: usize) -> &mut [f64] {
        let plane = self.shape.plane();
        &mut self.data[l * plane..(l + 1) * plane]
    }

    /// Copy of channel `l` as a single-channel map.
    pub fn channel_map(&self, l: usize) -> DenseMap {
        DenseMap {
            shape: Shape::new(1, self.height(), self.width()),
            data: self.channel(l).to_vec(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &DenseMap) -> Result<f64> {
        self.same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> DenseMap {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &DenseMap) -> Result<()> {
        self.same_shape("add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &DenseMap) -> Result<DenseMap> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMap {
        DenseMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &DenseMap) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        Ok(())
    }
}

/// Valid cross-correlation summed over channels.
///
/// `out(i, j) = Σ_l Σ_{u,v} x(l, i+u, j+v) · f(l, u, v)`, with output size
/// `(x.h − f.h + 1) × (x.w − f.w + 1)`.
pub fn xcorr2d_valid(x: &DenseMap, f: &DenseMap) -> Result<DenseMap> {
    if x.channels() != f.channels() || f.height() > x.height() || f.width() > x.width() {
        return Err(Error::shape("xcorr2d_valid", x.shape(), f.shape()));
    }
    let (oh, ow) = (x.height() - f.height() + 1, x.width() - f.width() + 1);
    let mut out = DenseMap::zeros(1, oh, ow);
    let xw = x.width();
    for l in 0..x.channels() {
        let xs = x.channel(l);
        let fs = f.channel(l);
        for u in 0..f.height() {
            for v in 0..f.width() {
                let w = fs[u * f.width() + v];
                if w == 0.0 {
                    continue;
                }
                for i in 0..oh {
                    let src = &xs[(i + u) * xw + v..(i + u) * xw + v + ow];
                    let dst = &mut out.data[i * ow..(i + 1) * ow];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `Σ g ⊙ xcorr2d_valid(x, f)` with respect to `f`: for each
/// channel, the valid correlation of `x^l` with `g`.
pub fn xcorr2d_filter_grad(x: &DenseMap, g: &DenseMap, fh: usize, fw: usize) -> Result<DenseMap> {
    if g.channels() != 1
        || fh == 0
        || fw == 0
        || x.height() < fh
        || x.width() < fw
        || g.height() != x.height() - fh + 1
        || g.width() != x.width() - fw + 1
    {
        return Err(Error::shape("xcorr2d_filter_grad", x.shape(), g.shape()));
    }
    let (oh, ow) = (g.height(), g.width());
    let xw = x.width();
    let mut out = DenseMap::zeros(x.channels(), fh, fw);
    let gs = g.data();
    for l in 0..x.channels() {
        let xs = x.channel(l);
        let os = out.channel_mut(l);
        for u in 0..fh {
            for v in 0..fw {
                let mut acc = 0.0;
                for i in 0..oh {
                    let src = &xs[(i + u) * xw + v..(i + u) * xw + v + ow];
                    let gr = &gs[i * ow..(i + 1) * ow];
                    acc += src.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                }
                os[u * fw + v] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradient of `Σ g ⊙ xcorr2d_valid(x, f)` with respect to `x`: the
/// transposed (full) correlation of `g` with `f`.
pub fn xcorr2d_input_grad(g: &DenseMap, f: &DenseMap) -> Result<DenseMap> {
    if g.channels() != 1 {
        return Err(Error::shape("xcorr2d_input_grad", g.shape(), f.shape()));
    }
    let (oh, ow) = (g.height(), g.width());
    let (h, w) = (oh + f.height() - 1, ow + f.width() - 1);
    let mut out = DenseMap::zeros(f.channels(), h, w);
    let gs = g.data();
    for l in 0..f.channels() {
        let fs = f.channel(l);
        let os = out.channel_mut(l);
        for u in 0..f.height() {
            for v in 0..f.width() {
                let wv = fs[u * f.width() + v];
                if wv == 0.0 {
                    continue;
                }
                for i in 0..oh {
                    let dst = &mut os[(i + u) * w + v..(i + u) * w + v + ow];
                    let gr = &gs[i * ow..(i + 1) * ow];
                    for (d, s) in dst.iter_mut().zip(gr) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 1-D Hann window of length `n`; all ones for `n == 1`.
pub fn hann1d(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / denom).cos()))
        // cos(2π) is not exactly 1 in floating point
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

/// Outer product of 1-D Hann windows.
pub fn hann2d(height: usize, width: usize) -> Result<DenseMap> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("hann2d size {height}x{width}")));
    }
    let rows = hann1d(height);
    let cols = hann1d(width);
    let mut out = DenseMap::zeros(1, height, width);
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            out.set(0, i, j, r * c);
        }
    }
    // exact endpoints
    if height > 1 {
        for j in 0..width {
            out.set(0, 0, j, 0.0);
            out.set(0, height - 1, j, 0.0);
        }
    }
    if width > 1 {
        for i in 0..height {
            out.set(0, i, 0, 0.0);
            out.set(0, i, width - 1, 0.0);
        }
    }
    Ok(out)
}

/// Separable Gaussian label peaking at `center` (row, col) in cell units.
pub fn gaussian_label(
    height: usize,
    width: usize,
    center: (f64, f64),
    sigma: (f64, f64),
) -> Result<DenseMap> {
    if !(sigma.0 > 0.0 && sigma.1 > 0.0) {
        return Err(Error::invalid(format!("label sigma must be positive, got {sigma:?}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("label size {height}x{width}")));
    }
    if !(center.0.is_finite() && center.1.is_finite()) {
        return Err(Error::invalid(format!("label center {center:?}")));
    }
    let mut out = DenseMap::zeros(1, height, width);
    for i in 0..height {
        let dr = (i as f64 - center.0) / sigma.0;
        for j in 0..width {
            let dc = (j as f64 - center.1) / sigma.1;
            out.set(0, i, j, (-0.5 * (dr * dr + dc * dc)).exp());
        }
    }
    Ok(out)
}

/// Offset of the vertex of the parabola through `(−1, minus)`, `(0, center)`,
/// `(1, plus)`. Zero when the three values are not strictly concave.
pub fn parabolic_offset(minus: f64, center: f64, plus: f64) -> f64 {
    let denom = 2.0 * (minus - 2.0 * center + plus);
    if !(denom < 0.0) {
        return 0.0;
    }
    ((minus - plus) / denom).clamp(-0.5, 0.5)
}

/// Peak and background statistics of a response map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub max_value: f64,
    pub max_pos: (usize, usize),
    pub min_value: f64,
    pub mean_excluding_max: f64,
}

/// Statistics over a single-channel map; ties for the max go to the lowest
/// row-major index and exactly that one cell is excluded from the mean.
pub fn map_stats(r: &DenseMap) -> Result<MapStats> {
    if r.channels() != 1 {
        return Err(Error::invalid(format!("map_stats needs one channel, got {}", r.shape())));
    }
    if r.len() < 2 {
        return Err(Error::invalid("map_stats needs at least 2 cells"));
    }
    let data = r.data();
    let mut best = 0;
    let mut min = data[0];
    let mut total = 0.0;
    for (k, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = k;
        }
        min = min.min(v);
        total += v;
    }
    let max = data[best];
    Ok(MapStats {
        max_value: max,
        max_pos: (best / r.width(), best % r.width()),
        min_value: min,
        mean_excluding_max: (total - max) / (data.len() - 1) as f64,
    })
}
