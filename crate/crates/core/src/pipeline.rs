//! Search-window geometry and the sample pipeline shared by training and tracking:
//! crop → mean-subtract → extract → Hann window → energy normalization.

use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::features::{
    apply_window, crop_and_resize, normalize_energy, normalize_energy_backward, ConvStack, Region,
};
use crate::tensor::{gaussian_label, hann2d, DenseMap};

/// Placement of one search window in the image, plus the affine map from
/// response cells back to image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchWindow {
    pub region: Region,
    /// Continuous image coordinate of the patch's top-left corner (x, y).
    pub origin: (f64, f64),
    /// Image pixels per patch pixel (x, y).
    pub scale: (f64, f64),
}

/// A sample pushed through the pipeline, with what backprop needs.
#[derive(Clone, Debug)]
pub struct PipelineSample {
    /// Mean-subtracted patch fed to the stack.
    pub input: DenseMap,
    /// Windowed features before energy normalization.
    pub windowed: DenseMap,
    /// Final features `z`.
    pub features: DenseMap,
}

#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    stack: ConvStack,
    patch: usize,
    padding: f64,
    energy: f64,
    sigma_factor: f64,
    feature_size: (usize, usize),
    filter_size: (usize, usize),
    response_size: (usize, usize),
    stride: f64,
    offset: (f64, f64),
    hann: DenseMap,
}

impl FeaturePipeline {
    pub fn new(stack: ConvStack, cfg: &TrackerConfig) -> Result<Self> {
        if let Some(c) = stack.input_channels() {
            if c != 1 {
                return Err(Error::invalid(format!("feature stack must take 1 channel, takes {c}")));
            }
        }
        let patch = cfg.patch_size;
        let target_px = ((patch as f64) / cfg.padding_factor).round().max(1.0) as usize;
        if target_px > patch {
            return Err(Error::invalid("padding factor must be at least 1"));
        }
        let feature_size = stack
            .output_size(patch, patch)
            .ok_or_else(|| Error::invalid(format!("patch size {patch} too small for the stack")))?;
        let filter_size = stack.output_size(target_px, target_px).ok_or_else(|| {
            let (mh, mw) = stack.min_input_size();
            Error::invalid(format!(
                "target patch {target_px}px too small for the stack; need {mh}x{mw}"
            ))
        })?;
        let response_size = (
            feature_size.0 - filter_size.0 + 1,
            feature_size.1 - filter_size.1 + 1,
        );
        let stride = stack.total_stride() as f64;
        let offset = stack.cell_offset();
        let hann = hann2d(feature_size.0, feature_size.1)?;
        Ok(FeaturePipeline {
            stack,
            patch,
            padding: cfg.padding_factor,
            energy: cfg.feature_energy,
            sigma_factor: cfg.label_sigma_factor,
            feature_size,
            filter_size,
            response_size,
            stride,
            offset,
            hann,
        })
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut ConvStack {
        &mut self.stack
    }

    pub fn into_stack(self) -> ConvStack {
        self.stack
    }

    pub fn channels(&self) -> usize {
        self.stack.output_channels(1)
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn filter_size(&self) -> (usize, usize) {
        self.filter_size
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.feature_size
    }

    pub fn response_size(&self) -> (usize, usize) {
        self.response_size
    }

    pub fn padding(&self) -> f64 {
        self.padding
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    /// Response cell (row, col) at which a target centered in its window appears.
    pub fn response_center(&self) -> (f64, f64) {
        (
            (self.response_size.0 as f64 - 1.0) / 2.0,
            (self.response_size.1 as f64 - 1.0) / 2.0,
        )
    }

    /// Patch-pixel index (row, col) of the center of response cell (r, c).
    fn patch_coord(&self, r: f64, c: f64) -> (f64, f64) {
        let (fh, fw) = self.filter_size;
        (
            self.stride * (r + (fh as f64 - 1.0) / 2.0) + self.offset.0,
            self.stride * (c + (fw as f64 - 1.0) / 2.0) + self.offset.1,
        )
    }

    /// Window of `padding × size` placed so that `center` falls exactly on the
    /// response center.
    pub fn search_window(&self, center: (f64, f64), size: (f64, f64)) -> SearchWindow {
        let (ww, wh) = (self.padding * size.0, self.padding * size.1);
        let scale = (ww / self.patch as f64, wh / self.patch as f64);
        let (rc, cc) = self.response_center();
        let (pr, pc) = self.patch_coord(rc, cc);
        let origin = (center.0 - (pc + 0.5) * scale.0, center.1 - (pr + 0.5) * scale.1);
        SearchWindow {
            region: Region::new(origin.0 + ww / 2.0, origin.1 + wh / 2.0, ww, wh),
            origin,
            scale,
        }
    }

    /// Image coordinates (x, y) of response cell (row, col).
    pub fn map_to_image(&self, window: &SearchWindow, peak: (f64, f64)) -> (f64, f64) {
        let (pr, pc) = self.patch_coord(peak.0, peak.1);
        (
            window.origin.0 + (pc + 0.5) * window.scale.0,
            window.origin.1 + (pr + 0.5) * window.scale.1,
        )
    }

    /// Inverse of [`Self::map_to_image`].
    pub fn image_to_response(&self, window: &SearchWindow, point: (f64, f64)) -> (f64, f64) {
        let pc = (point.0 - window.origin.0) / window.scale.0 - 0.5;
        let pr = (point.1 - window.origin.1) / window.scale.1 - 0.5;
        let (fh, fw) = self.filter_size;
        (
            (pr - self.offset.0) / self.stride - (fh as f64 - 1.0) / 2.0,
            (pc - self.offset.1) / self.stride - (fw as f64 - 1.0) / 2.0,
        )
    }

    /// Gaussian label over the response grid centered at `center` (row, col).
    pub fn label(&self, center: (f64, f64)) -> Result<DenseMap> {
        let cells = self.patch as f64 / self.padding / self.stride;
        let sigma = self.sigma_factor * cells;
        gaussian_label(self.response_size.0, self.response_size.1, center, (sigma, sigma))
    }

    pub fn sample(&self, gray: &DenseMap, window: &SearchWindow) -> Result<PipelineSample> {
        let patch = crop_and_resize(gray, window.region, (self.patch, self.patch))?;
        self.sample_patch(patch.centered())
    }

    pub fn sample_patch(&self, input: DenseMap) -> Result<PipelineSample> {
        let raw = self.stack.extract(&input)?;
        let windowed = apply_window(&raw, &self.hann)?;
        let features = normalize_energy(&windowed, self.energy);
        Ok(PipelineSample {
            input,
            windowed,
            features,
        })
    }

    pub fn features(&self, gray: &DenseMap, window: &SearchWindow) -> Result<DenseMap> {
        Ok(self.sample(gray, window)?.features)
    }

    /// Per-layer stack gradients given `∂L/∂z` for a sample.
    pub fn stack_gradients(&self, sample: &PipelineSample, grad_features: &DenseMap) -> Result<Vec<DenseMap>> {
        let g_windowed = normalize_energy_backward(&sample.windowed, self.energy, grad_features)?;
        let g_raw = apply_window(&g_windowed, &self.hann)?;
        self.stack.backward(&sample.input, &g_raw)
    }
}
