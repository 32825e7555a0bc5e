//! Binary model and tracker snapshots.
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//! The layout is described in `docs/FORMATS.md`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, TrackerConfig};
use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::features::{ConvLayer, ConvStack};
use crate::pipeline::FeaturePipeline;
use crate::regression::{offline_train, FilterBank, FitReport, OfflineReport};
use crate::scale::ScaleFilter;
use crate::tensor::DenseMap;
use crate::tracker::{TargetState, Tracker, UpdateHistory};

pub const MODEL_MAGIC: &[u8; 4] = b"UCTM";
pub const TRACKER_MAGIC: &[u8; 4] = b"UCTS";
pub const FORMAT_VERSION: u32 = 1;

/// Learned weights: feature stack, translation filters and optionally a
/// scale filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub stack: ConvStack,
    pub filter: FilterBank,
    pub scale: Option<ScaleFilter>,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u32(FORMAT_VERSION);
        self.write_body(&mut w);
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(MODEL_MAGIC)?;
        let model = Model::read_body(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }

    fn write_body(&self, w: &mut Writer) {
        w.u32(self.stack.layers.len() as u32);
        for layer in &self.stack.layers {
            w.u32(layer.out_channels as u32);
            w.u32(layer.in_channels as u32);
            w.u32(layer.stride as u32);
            w.u32(layer.relu as u32);
            w.map(&layer.weights);
        }
        w.map(&self.filter.f);
        match &self.scale {
            None => w.u32(0),
            Some(s) => {
                w.u32(1);
                w.u32(s.count as u32);
                w.u32(s.template as u32);
                w.u32(s.pool as u32);
                w.u32(s.trained as u32);
                w.f64(s.factor);
                w.f64(s.sigma);
                w.map(&s.weights);
            }
        }
    }

    fn read_body(r: &mut Reader) -> Result<Self> {
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let stride = r.u32()? as usize;
            let relu = r.flag()?;
            let weights = r.map()?;
            layers.push(ConvLayer::new(weights, out, inp, stride, relu)?);
        }
        let stack = ConvStack::new(layers)?;
        let filter = FilterBank { f: r.map()? };
        let scale = if r.flag()? {
            let count = r.u32()? as usize;
            let template = r.u32()? as usize;
            let pool = r.u32()? as usize;
            let trained = r.flag()?;
            let factor = r.f64()?;
            let sigma = r.f64()?;
            let weights = r.map()?;
            if weights.channels() != 1 || weights.width() > count || count == 0 {
                return Err(Error::Snapshot(format!("scale weights {} do not fit {count} scales", weights.shape())));
            }
            Some(ScaleFilter {
                weights,
                count,
                factor,
                sigma,
                template,
                pool,
                trained,
            })
        } else {
            None
        };
        Ok(Model { stack, filter, scale })
    }
}

/// Untrained weights: the default stack and filters drawn from the offline
/// seed. Offline training starts here; the `no_offline` variant tracks with it.
pub fn initial_model(cfg: &Config) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.offline.seed);
    let stack = ConvStack::random(1, &ConvStack::default_specs(), &mut rng)?;
    let pipeline = FeaturePipeline::new(stack, &cfg.tracker)?;
    let (fh, fw) = pipeline.filter_size();
    let filter = FilterBank::random(
        crate::Shape::new(pipeline.channels(), fh, fw),
        cfg.tracker.init_std,
        &mut rng,
    );
    Ok(Model {
        stack: pipeline.into_stack(),
        filter,
        scale: None,
    })
}

/// Jointly train the initial model's stack and filters on `corpus`.
pub fn pretrain(corpus: &[Sequence], cfg: &Config) -> Result<(Model, OfflineReport)> {
    let init = initial_model(cfg)?;
    let mut pipeline = FeaturePipeline::new(init.stack, &cfg.tracker)?;
    let mut filter = init.filter;
    let report = offline_train(corpus, &mut pipeline, &mut filter, &cfg.offline, cfg.tracker.momentum)?;
    Ok((
        Model {
            stack: pipeline.into_stack(),
            filter,
            scale: None,
        },
        report,
    ))
}

impl Tracker {
    /// Learned weights of this tracker.
    pub fn model(&self) -> Model {
        Model {
            stack: self.pipeline.stack().clone(),
            filter: self.filter.clone(),
            scale: self.scale.clone(),
        }
    }

    /// Complete tracker state: config, model, target state and history.
    pub fn snapshot(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(TRACKER_MAGIC);
        w.u32(FORMAT_VERSION);
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| Error::Snapshot(e.to_string()))?;
        w.u32(cfg.len() as u32);
        w.bytes(&cfg);
        self.model().write_body(&mut w);
        let s = &self.state;
        for v in [s.center.0, s.center.1, s.size.0, s.size.1, s.score, s.pnr] {
            w.f64(v);
        }
        w.u32(s.updated as u32);
        w.u32(s.clamped as u32);
        w.u32(self.history.window as u32);
        w.reals(&self.history.pnr_values);
        w.reals(&self.history.rmax_values);
        w.u32(self.frames as u32);
        w.reals(&self.first_fit.losses);
        w.f64(self.first_fit.initial_loss);
        w.f64(self.first_fit.final_loss);
        Ok(w.out)
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(TRACKER_MAGIC)?;
        let n = r.u32()? as usize;
        let cfg: TrackerConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::Snapshot(format!("config: {e}")))?;
        cfg.validate()?;
        let model = Model::read_body(&mut r)?;
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = r.f64()?;
        }
        let state = TargetState {
            center: (v[0], v[1]),
            size: (v[2], v[3]),
            score: v[4],
            pnr: v[5],
            updated: r.flag()?,
            clamped: r.flag()?,
        };
        let window = r.u32()? as usize;
        let history = UpdateHistory {
            pnr_values: r.reals()?,
            rmax_values: r.reals()?,
            window,
        };
        if history.pnr_values.len() != history.rmax_values.len() {
            return Err(Error::Snapshot("history lists differ in length".into()));
        }
        let frames = r.u32()? as usize;
        let losses = r.reals()?;
        let first_fit = FitReport {
            initial_loss: r.f64()?,
            final_loss: r.f64()?,
            losses,
        };
        r.finish()?;
        let pipeline = FeaturePipeline::new(model.stack, &cfg)?;
        let fs = pipeline.filter_size();
        let f = model.filter.f.shape();
        if (f.channels, f.height, f.width) != (pipeline.channels(), fs.0, fs.1) {
            return Err(Error::Snapshot(format!("filter {f} does not fit the pipeline")));
        }
        Ok(Tracker {
            cfg,
            pipeline,
            filter: model.filter,
            scale: model.scale,
            state,
            history,
            frames,
            first_fit,
        })
    }
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn reals(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn map(&mut self, m: &DenseMap) {
        self.u32(m.channels() as u32);
        self.u32(m.height() as u32);
        self.u32(m.width() as u32);
        m.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Snapshot(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Snapshot(format!("expected magic {}", String::from_utf8_lossy(magic))));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Snapshot(format!("bad flag {v} at byte {}", self.pos - 4))),
        }
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Snapshot(format!("list of {n} reals overruns the buffer")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn map(&mut self) -> Result<DenseMap> {
        let (c, h, w) = (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| Error::Snapshot(format!("map {c}x{h}x{w} overruns the buffer")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        DenseMap::from_vec(c, h, w, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Snapshot(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = ConvStack::random(1, &ConvStack::default_specs(), &mut rng).unwrap();
        let filter = FilterBank::random(Shape::new(16, 7, 7), 0.1, &mut rng);
        let scale = ScaleFilter {
            weights: DenseMap::filled(1, 5, 1, 0.25),
            count: 33,
            factor: 1.02,
            sigma: 1.5,
            template: 16,
            pool: 4,
            trained: true,
        };
        Model {
            stack,
            filter,
            scale: Some(scale),
        }
    }

    #[test]
    fn model_round_trip() {
        let m = sample_model();
        assert_eq!(Model::from_bytes(&m.to_bytes()).unwrap(), m);
        let bare = Model { scale: None, ..m };
        assert_eq!(Model::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample_model().to_bytes();
        assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Snapshot(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
    }
}
