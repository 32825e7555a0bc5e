//! Hyperparameters and the TOML configuration file.
//!
//! A config file may name a `preset` (`desk_defaults` or `paper_defaults`);
//! every other key overrides the preset. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature extractor feeds the regression head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    /// The trainable convolutional stack.
    Stack,
    /// Grayscale pixels, no convolution.
    Raw,
}

/// How target scale is handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// 1-D scale filter over the scale pyramid.
    Filter,
    /// Exhaustive evaluation of the translation filter at several resolutions.
    Multires,
    /// Fixed size.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub extractor: Extractor,
    /// Search window size as a multiple of the target size.
    pub padding_factor: f64,
    /// Side of the square patch the search window is resampled to.
    pub patch_size: usize,
    /// Squared norm every feature sample is rescaled to before regression.
    pub feature_energy: f64,
    /// Label sigma as a fraction of the target extent in feature cells.
    pub label_sigma_factor: f64,
    pub momentum: f64,
    pub init_std: f64,
    pub first_frame_steps: usize,
    pub first_frame_lr: f64,
    pub first_frame_lambda: f64,
    pub update_lr: f64,
    pub update_lambda: f64,
    /// Gate updates on PNR as well as the response maximum.
    pub use_pnr: bool,
    pub beta_pnr: f64,
    pub beta_rmax: f64,
    pub pnr_epsilon: f64,
    /// Number of past frames the update thresholds average over; 0 keeps all.
    pub history_window: usize,
    pub subpixel: bool,
    pub scale_mode: ScaleMode,
    pub scale_count: usize,
    pub scale_factor: f64,
    /// Width of the scale filter in scale steps; 1 shares one template.
    pub scale_taps: usize,
    pub scale_template: usize,
    /// Side of the pooling grid applied to scale features.
    pub scale_pool: usize,
    /// Scale label sigma as a fraction of `scale_count`.
    pub scale_sigma_factor: f64,
    /// Maximum per-frame scale change (and its inverse).
    pub scale_clamp: f64,
    pub scale_lr: f64,
    pub scale_update_lr: f64,
    pub scale_lambda: f64,
    /// Skip scale estimation on frames that fail the update gate.
    pub gate_scale_estimation: bool,
    pub multires_scales: Vec<f64>,
    /// Factor applied to the response maximum of every multiplier other than 1.
    pub multires_penalty: f64,
    /// Fraction of the selected multiplier's change applied per frame.
    pub multires_damping: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Apply the weight-decay term to the feature stack as well as the filters.
    pub decay_stack: bool,
    /// Std of the translation jitter as a fraction of the search window size.
    pub translation_jitter: f64,
    /// Std of the log-scale jitter.
    pub scale_jitter: f64,
    pub corpus_sequences: usize,
    pub corpus_frames: usize,
    /// Probability that a corpus sequence contains an occluder.
    pub corpus_occlusion_rate: f64,
    /// Samples averaged per SGD step.
    pub batch_size: usize,
    pub seed: u64,
}

/// Synthetic evaluation suite used by `eval` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub sequences: usize,
    pub frames: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub tracker: TrackerConfig,
    pub offline: OfflineConfig,
    pub suite: SuiteConfig,
}

impl TrackerConfig {
    pub fn desk_defaults() -> Self {
        let a: f64 = 1.02;
        TrackerConfig {
            extractor: Extractor::Stack,
            padding_factor: 2.0,
            patch_size: 64,
            feature_energy: 1.0,
            label_sigma_factor: 0.1,
            momentum: 0.9,
            init_std: 0.01,
            first_frame_steps: 50,
            first_frame_lr: 1e-3,
            first_frame_lambda: 0.01,
            update_lr: 1e-4,
            update_lambda: 0.005,
            use_pnr: true,
            beta_pnr: 0.7,
            beta_rmax: 0.7,
            pnr_epsilon: 1e-6,
            history_window: 0,
            subpixel: true,
            scale_mode: ScaleMode::Filter,
            scale_count: 33,
            scale_factor: a,
            scale_taps: 1,
            scale_template: 16,
            scale_pool: 4,
            scale_sigma_factor: 1.0 / 16.0,
            scale_clamp: a.powi(4),
            scale_lr: 1e-2,
            scale_update_lr: 2e-3,
            scale_lambda: 0.01,
            gate_scale_estimation: true,
            multires_scales: (-2..=2).map(|n| a.powi(n)).collect(),
            multires_penalty: 1.0,
            multires_damping: 0.5,
            seed: 0,
        }
    }

    pub fn paper_defaults() -> Self {
        TrackerConfig {
            patch_size: 224,
            first_frame_lr: 5e-7,
            update_lr: 1e-7,
            ..Self::desk_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("padding_factor", self.padding_factor),
            ("feature_energy", self.feature_energy),
            ("label_sigma_factor", self.label_sigma_factor),
            ("first_frame_lr", self.first_frame_lr),
            ("update_lr", self.update_lr),
            ("beta_pnr", self.beta_pnr),
            ("beta_rmax", self.beta_rmax),
            ("pnr_epsilon", self.pnr_epsilon),
            ("scale_sigma_factor", self.scale_sigma_factor),
            ("scale_lr", self.scale_lr),
            ("scale_update_lr", self.scale_update_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tracker.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("first_frame_lambda", self.first_frame_lambda),
            ("update_lambda", self.update_lambda),
            ("init_std", self.init_std),
            ("scale_lambda", self.scale_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tracker.{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("tracker.momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.scale_count == 0 || self.scale_count % 2 == 0 {
            return Err(Error::Config(format!(
                "tracker.scale_count must be odd, got {}",
                self.scale_count
            )));
        }
        if self.scale_taps % 2 == 0 || self.scale_taps > self.scale_count {
            return Err(Error::Config(format!(
                "tracker.scale_taps must be odd and at most scale_count, got {}",
                self.scale_taps
            )));
        }
        if !(self.scale_factor > 1.0) {
            return Err(Error::Config(format!(
                "tracker.scale_factor must exceed 1, got {}",
                self.scale_factor
            )));
        }
        if !(self.scale_clamp >= 1.0) {
            return Err(Error::Config(format!(
                "tracker.scale_clamp must be at least 1, got {}",
                self.scale_clamp
            )));
        }
        if self.patch_size < 2 || self.scale_template < 2 || self.scale_pool == 0 {
            return Err(Error::Config("patch, template and pool sizes must be positive".into()));
        }
        if !(self.multires_damping > 0.0 && self.multires_damping <= 1.0) {
            return Err(Error::Config("tracker.multires_damping must lie in (0, 1]".into()));
        }
        if !(self.multires_penalty > 0.0 && self.multires_penalty <= 1.0) {
            return Err(Error::Config("tracker.multires_penalty must lie in (0, 1]".into()));
        }
        if self.multires_scales.is_empty() || self.multires_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("tracker.multires_scales must be non-empty and positive".into()));
        }
        Ok(())
    }
}

impl OfflineConfig {
    pub fn desk_defaults() -> Self {
        OfflineConfig {
            epochs: 30,
            learning_rate: 5e-3,
            lambda: 0.005,
            decay_stack: false,
            translation_jitter: 0.05,
            scale_jitter: 0.03,
            corpus_sequences: 32,
            corpus_frames: 40,
            corpus_occlusion_rate: 0.5,
            batch_size: 1,
            seed: 7,
        }
    }

    pub fn paper_defaults() -> Self {
        OfflineConfig {
            learning_rate: 1e-5,
            decay_stack: true,
            ..Self::desk_defaults()
        }
    }
}

impl SuiteConfig {
    pub fn desk_defaults() -> Self {
        SuiteConfig {
            sequences: 12,
            frames: 60,
            canvas_width: 256,
            canvas_height: 192,
            seed: 2024,
        }
    }
}

impl Config {
    pub fn desk_defaults() -> Self {
        Config {
            seed: 0,
            tracker: TrackerConfig::desk_defaults(),
            offline: OfflineConfig::desk_defaults(),
            suite: SuiteConfig::desk_defaults(),
        }
    }

    pub fn paper_defaults() -> Self {
        Config {
            tracker: TrackerConfig::paper_defaults(),
            offline: OfflineConfig::paper_defaults(),
            ..Self::desk_defaults()
        }
    }

    /// Set the master seed and derive the tracker, offline and suite seeds
    /// from it. Master seed 0 reproduces the preset seeds.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.tracker.seed = seed;
        self.offline.seed = seed.wrapping_add(7);
        self.suite.seed = seed.wrapping_add(2024);
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk_defaults" | "desk" => Ok(Self::desk_defaults()),
            "paper_defaults" | "paper" => Ok(Self::paper_defaults()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; expected desk_defaults or paper_defaults"
            ))),
        }
    }

    /// Parse a config file, layering its keys over the named preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parse `text`, then apply `key.path=value` overrides in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match file.remove("preset") {
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => "desk_defaults".to_string(),
        };
        let mut merged = toml::Table::try_from(Self::preset(&preset)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        for ov in overrides {
            apply_override(&mut merged, ov)?;
        }
        let config: Config = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        self.to_toml_string()
            .and_then(|text| Self::from_toml_with_overrides(&text, overrides))
    }

    /// Fully expanded config, suitable for re-reading.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        if self.offline.batch_size == 0 {
            return Err(Error::Config("offline.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.offline.corpus_occlusion_rate) {
            return Err(Error::Config("offline.corpus_occlusion_rate must lie in [0, 1]".into()));
        }
        if self.offline.learning_rate < 0.0 || self.offline.lambda < 0.0 {
            return Err(Error::Config("offline rates must be non-negative".into()));
        }
        if self.suite.sequences == 0 || self.suite.frames == 0 {
            return Err(Error::Config("suite must have sequences and frames".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one item");
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    if !cur.contains_key(*last) {
        let mut valid: Vec<&str> = cur.keys().map(String::as_str).collect();
        valid.sort_unstable();
        return Err(Error::Config(format!(
            "unknown config key `{key}`; valid keys here: {}",
            valid.join(", ")
        )));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
