//! Sequences: OTB-style directory loading, ground-truth parsing and the
//! synthetic sequence generator.
//!
//! Boxes are `(x, y, w, h)` with a top-left origin. Files use the OTB
//! 1-based convention; everything in memory is 0-based.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{OfflineConfig, SuiteConfig};
use crate::error::{Error, Result};
use crate::tensor::DenseMap;

const FRAME_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "pgm", "ppm", "pbm", "pnm", "bmp"];
pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(center: (f64, f64), size: (f64, f64)) -> Self {
        BBox::new(center.0 - size.0 / 2.0, center.1 - size.1 / 2.0, size.0, size.1)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }
}

/// Frames held either as files decoded on demand or as 8-bit grayscale rasters.
#[derive(Clone, Debug)]
pub enum Frames {
    Files(Vec<PathBuf>),
    Gray(Vec<GrayImage>),
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Frames,
    /// 0-based boxes for the leading frames; never longer than the frame list.
    pub annotations: Vec<BBox>,
    pub warnings: Vec<String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        match &self.frames {
            Frames::Files(f) => f.len(),
            Frames::Gray(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of leading frames that carry ground truth.
    pub fn annotated_len(&self) -> usize {
        self.annotations.len().min(self.len())
    }

    /// Decode frame `index` into a map of 1 or 3 channels with values in `[0, 1]`.
    pub fn frame(&self, index: usize) -> Result<DenseMap> {
        match &self.frames {
            Frames::Gray(f) => {
                let img = f
                    .get(index)
                    .ok_or_else(|| Error::invalid(format!("{}: no frame {index}", self.name)))?;
                Ok(gray_to_map(img))
            }
            Frames::Files(f) => {
                let path = f
                    .get(index)
                    .ok_or_else(|| Error::invalid(format!("{}: no frame {index}", self.name)))?;
                load_image(path)
            }
        }
    }

    /// Write `<dir>/img/NNNN.pgm` frames and a 1-based `groundtruth_rect.txt`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for k in 0..self.len() {
            let path = img_dir.join(format!("{:04}.pgm", k + 1));
            let gray = match &self.frames {
                Frames::Gray(f) => f[k].clone(),
                Frames::Files(_) => map_to_gray(&crate::features::to_gray(&self.frame(k)?)?),
            };
            gray.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        let gt = dir.join(GROUNDTRUTH_FILE);
        let one_based: Vec<BBox> = self.annotations.iter().map(|b| b.shifted(1.0, 1.0)).collect();
        fs::write(&gt, format_groundtruth(&one_based)).map_err(|e| Error::io(&gt, e))
    }
}

pub fn gray_to_map(img: &GrayImage) -> DenseMap {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&p| f64::from(p) / 255.0).collect();
    DenseMap::from_vec(1, h as usize, w as usize, data).expect("image buffer matches its dimensions")
}

pub fn map_to_gray(map: &DenseMap) -> GrayImage {
    GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([(map.get(0, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Write `frame` as an RGB PNG with each box outlined in its color.
pub fn save_annotated(frame: &DenseMap, boxes: &[(BBox, [u8; 3])], path: &Path) -> Result<()> {
    let gray = map_to_gray(&crate::features::to_gray(frame)?);
    let mut img = RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    let (w, h) = (img.width() as i64, img.height() as i64);
    for (b, color) in boxes {
        let (x0, y0) = (b.x.round() as i64, b.y.round() as i64);
        let (x1, y1) = (b.right().round() as i64 - 1, b.bottom().round() as i64 - 1);
        let mut put = |x: i64, y: i64| {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb(*color));
            }
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_image(path: &Path) -> Result<DenseMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("{}: empty image", path.display())));
    }
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) => {
            Ok(gray_to_map(&img.to_luma8()))
        }
        _ => {
            let rgb = img.to_rgb8();
            let plane = w * h;
            let mut data = vec![0.0; 3 * plane];
            for (k, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + k] = f64::from(px[c]) / 255.0;
                }
            }
            DenseMap::from_vec(3, h, w, data)
        }
    }
}

/// Parse ground-truth text: one box per line, values separated by commas,
/// tabs or spaces. Values are returned exactly as written.
pub fn parse_groundtruth(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(Error::GroundTruth {
                line: line_no,
                message: format!("expected 4 values, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| Error::GroundTruth {
                line: line_no,
                message: format!("not a number: `{field}`"),
            })?;
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        if !b.is_valid() {
            return Err(Error::GroundTruth {
                line: line_no,
                message: format!("box must have finite values and positive size: {line}"),
            });
        }
        boxes.push(b);
    }
    if boxes.is_empty() {
        return Err(Error::GroundTruth {
            line: 0,
            message: "no boxes found".into(),
        });
    }
    Ok(boxes)
}

pub fn format_groundtruth(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(out, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    out
}

/// Sort key: the first run of digits in the file stem, then the name.
fn numeric_key(path: &Path) -> (u64, String) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let digits: String = stem
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    (digits.parse().unwrap_or(u64::MAX), stem.to_string())
}

/// Load `<dir>/img/*` frames and `<dir>/groundtruth_rect.txt`.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut annotations: Vec<BBox> = parse_groundtruth(&text)?
        .into_iter()
        .map(|b| b.shifted(-1.0, -1.0))
        .collect();

    let img_dir = dir.join("img");
    let entries = fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut frames: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&img_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if FRAME_EXTENSIONS.contains(&ext.as_str()) {
            frames.push(path);
        }
    }
    if frames.is_empty() {
        return Err(Error::invalid(format!("{}: no frames found", img_dir.display())));
    }
    frames.sort_by_key(|p| numeric_key(p));

    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("sequence")
        .to_string();
    let mut warnings = Vec::new();
    if annotations.len() > frames.len() {
        warnings.push(format!(
            "{name}: {} boxes for {} frames; extra boxes dropped",
            annotations.len(),
            frames.len()
        ));
        annotations.truncate(frames.len());
    } else if annotations.len() < frames.len() {
        warnings.push(format!(
            "{name}: only {} of {} frames annotated",
            annotations.len(),
            frames.len()
        ));
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Sequence {
        name,
        frames: Frames::Files(frames),
        annotations,
        warnings,
    })
}

/// Occluder drawn over the object on frames `start..=end` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: usize,
    pub end: usize,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub canvas: (usize, usize),
    /// Object (width, height) on the first frame.
    pub object_size: (f64, f64),
    /// Object center on the first frame.
    pub start_center: (f64, f64),
    /// Per-frame translation (x, y) in pixels.
    pub velocity: (f64, f64),
    /// Per-frame size multiplier.
    pub zoom: f64,
    pub occlusion: Option<Occlusion>,
    /// Std of per-pixel noise added to every frame.
    pub noise: f64,
    pub seed: u64,
    pub frames: usize,
}

impl SynthSpec {
    /// Exact (unrounded) ground truth for frame `t`.
    pub fn box_at(&self, t: usize) -> BBox {
        let g = self.zoom.powi(t as i32);
        let c = (
            self.start_center.0 + t as f64 * self.velocity.0,
            self.start_center.1 + t as f64 * self.velocity.1,
        );
        BBox::from_center(c, (self.object_size.0 * g, self.object_size.1 * g))
    }
}

/// Value-noise texture: a random grid bilinearly interpolated.
struct Texture {
    grid: Vec<f64>,
    n: usize,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Self {
        Texture {
            grid: (0..n * n).map(|_| rng.random_range(lo..hi)).collect(),
            n,
        }
    }

    /// Sample at normalized coordinates `(u, v)` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let m = (self.n - 1) as f64;
        let (x, y) = (u.clamp(0.0, 1.0) * m, v.clamp(0.0, 1.0) * m);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.n - 1), (y0 + 1).min(self.n - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let g = |i: usize, j: usize| self.grid[j * self.n + i];
        let top = g(x0, y0) + fx * (g(x1, y0) - g(x0, y0));
        let bot = g(x0, y1) + fx * (g(x1, y1) - g(x0, y1));
        top + fy * (bot - top)
    }
}

/// Paint `tex` over `bbox` with anti-aliased edges and the given opacity.
fn paint(canvas: &mut [f64], width: usize, height: usize, bbox: &BBox, tex: &Texture, opacity: f64) {
    let x0 = bbox.x.floor().max(0.0) as usize;
    let y0 = bbox.y.floor().max(0.0) as usize;
    let x1 = (bbox.right().ceil().max(0.0) as usize).min(width);
    let y1 = (bbox.bottom().ceil().max(0.0) as usize).min(height);
    for py in y0..y1 {
        let cov_y = (bbox.bottom().min(py as f64 + 1.0) - bbox.y.max(py as f64)).clamp(0.0, 1.0);
        let v = (py as f64 + 0.5 - bbox.y) / bbox.h;
        for px in x0..x1 {
            let cov_x = (bbox.right().min(px as f64 + 1.0) - bbox.x.max(px as f64)).clamp(0.0, 1.0);
            let alpha = opacity * cov_x * cov_y;
            if alpha <= 0.0 {
                continue;
            }
            let u = (px as f64 + 0.5 - bbox.x) / bbox.w;
            let dst = &mut canvas[py * width + px];
            *dst = (1.0 - alpha) * *dst + alpha * tex.at(u, v);
        }
    }
}

/// A static screen covering every object box of the occlusion interval.
fn occluder_box(spec: &SynthSpec, occ: &Occlusion) -> BBox {
    let (a, b) = (spec.box_at(occ.start), spec.box_at(occ.end));
    let (x0, y0) = (a.x.min(b.x), a.y.min(b.y));
    let (x1, y1) = (a.right().max(b.right()), a.bottom().max(b.bottom()));
    let margin = 0.1 * a.w.min(a.h);
    BBox::new(x0 - margin, y0 - margin, x1 - x0 + 2.0 * margin, y1 - y0 + 2.0 * margin)
}

fn inside(b: &BBox, canvas: (usize, usize)) -> bool {
    b.x >= 0.0 && b.y >= 0.0 && b.right() <= canvas.0 as f64 && b.bottom() <= canvas.1 as f64
}

/// Render a sequence with exact ground truth. Generation stops at the first
/// frame whose box would leave the canvas; the truncation is reported in
/// the sequence warnings.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Sequence> {
    if spec.frames == 0 {
        return Err(Error::invalid("synthetic sequence needs at least one frame"));
    }
    if !(spec.zoom > 0.0) {
        return Err(Error::invalid(format!("zoom must be positive, got {}", spec.zoom)));
    }
    let (cw, ch) = spec.canvas;
    if cw == 0 || ch == 0 || !(spec.object_size.0 > 0.0 && spec.object_size.1 > 0.0) {
        return Err(Error::invalid("canvas and object must have positive size"));
    }
    if !inside(&spec.box_at(0), spec.canvas) {
        return Err(Error::invalid(format!("{}: object starts outside the canvas", spec.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // the background is lower in contrast than objects
    let coarse = Texture::random(&mut rng, (cw.max(ch) / 16).max(2) + 1, 0.3, 0.7);
    let fine = Texture::random(&mut rng, (cw.max(ch) / 5).max(2) + 1, -0.06, 0.06);
    let object = Texture::random(&mut rng, 6, 0.0, 1.0);
    // occluders share the background statistics
    let occluder = Texture::random(&mut rng, 6, 0.3, 0.7);

    let mut background = vec![0.0; cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let (u, v) = ((x as f64 + 0.5) / cw as f64, (y as f64 + 0.5) / ch as f64);
            background[y * cw + x] = coarse.at(u, v) + fine.at(u, v);
        }
    }

    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("positive std"));
    let mut frames = Vec::with_capacity(spec.frames);
    let mut annotations = Vec::with_capacity(spec.frames);
    let mut warnings = Vec::new();
    for t in 0..spec.frames {
        let bbox = spec.box_at(t);
        if !inside(&bbox, spec.canvas) {
            warnings.push(format!(
                "{}: object leaves the canvas at frame {t}; truncated to {t} of {} frames",
                spec.name, spec.frames
            ));
            break;
        }
        let mut canvas = background.clone();
        paint(&mut canvas, cw, ch, &bbox, &object, 1.0);
        if let Some(occ) = spec.occlusion.filter(|o| (o.start..=o.end).contains(&t)) {
            paint(&mut canvas, cw, ch, &occluder_box(spec, &occ), &occluder, occ.opacity);
        }
        if let Some(n) = &noise {
            let mut frame_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((t as u64 + 1) << 32));
            canvas.iter_mut().for_each(|p| *p += n.sample(&mut frame_rng));
        }
        frames.push(GrayImage::from_fn(cw as u32, ch as u32, |x, y| {
            Luma([(canvas[y as usize * cw + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
        }));
        annotations.push(bbox);
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(Sequence {
        name: spec.name.clone(),
        frames: Frames::Gray(frames),
        annotations,
        warnings,
    })
}

/// Start center keeping the whole trajectory inside the canvas, or `None`.
fn feasible_start(
    rng: &mut ChaCha8Rng,
    canvas: (usize, usize),
    size: (f64, f64),
    velocity: (f64, f64),
    zoom: f64,
    frames: usize,
) -> Option<(f64, f64)> {
    let margin = 2.0;
    let mut lo = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut hi = (f64::INFINITY, f64::INFINITY);
    for t in 0..frames {
        let g = zoom.powi(t as i32);
        let (hw, hh) = (size.0 * g / 2.0, size.1 * g / 2.0);
        let (dx, dy) = (t as f64 * velocity.0, t as f64 * velocity.1);
        lo.0 = f64::max(lo.0, hw + margin - dx);
        lo.1 = f64::max(lo.1, hh + margin - dy);
        hi.0 = f64::min(hi.0, canvas.0 as f64 - margin - hw - dx);
        hi.1 = f64::min(hi.1, canvas.1 as f64 - margin - hh - dy);
    }
    (lo.0 <= hi.0 && lo.1 <= hi.1).then(|| {
        (
            if lo.0 < hi.0 { rng.random_range(lo.0..hi.0) } else { lo.0 },
            if lo.1 < hi.1 { rng.random_range(lo.1..hi.1) } else { lo.1 },
        )
    })
}

/// Randomized specs sharing a master seed.
fn random_specs(
    prefix: &str,
    count: usize,
    frames: usize,
    canvas: (usize, usize),
    occlusion_rate: f64,
    seed: u64,
) -> Vec<SynthSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let size = (rng.random_range(26.0..44.0), rng.random_range(26.0..44.0));
            let zoom = rng.random_range(0.99..1.012);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let mut speed = rng.random_range(0.5..2.5);
            let occlusion = (frames >= 20 && rng.random_bool(occlusion_rate)).then(|| {
                let len = rng.random_range(6..=10).min(frames / 3);
                let start = rng.random_range(frames / 3..frames - len - 1);
                Occlusion {
                    start,
                    end: start + len,
                    opacity: rng.random_range(0.6..0.85),
                }
            });
            let sub_seed = rng.random();
            let start = loop {
                let v = (speed * angle.cos(), speed * angle.sin());
                if let Some(s) = feasible_start(&mut rng, canvas, size, v, zoom, frames) {
                    break (s, v);
                }
                speed *= 0.5;
            };
            SynthSpec {
                name: format!("{prefix}{k:02}"),
                canvas,
                object_size: size,
                start_center: start.0,
                velocity: start.1,
                zoom,
                occlusion,
                noise: 0.02,
                seed: sub_seed,
                frames,
            }
        })
        .collect()
}

/// Evaluation suite for `eval`/`ablate`.
pub fn suite_specs(cfg: &SuiteConfig) -> Vec<SynthSpec> {
    random_specs(
        "synth",
        cfg.sequences,
        cfg.frames,
        (cfg.canvas_width, cfg.canvas_height),
        0.5,
        cfg.seed,
    )
}

/// Offline training corpus; uses its own seed so it never overlaps the suite.
pub fn corpus_specs(cfg: &OfflineConfig) -> Vec<SynthSpec> {
    random_specs(
        "train",
        cfg.corpus_sequences,
        cfg.corpus_frames,
        (160, 160),
        cfg.corpus_occlusion_rate,
        cfg.seed,
    )
}

pub fn generate_all(specs: &[SynthSpec]) -> Result<Vec<Sequence>> {
    specs.iter().map(generate_synthetic).collect()
}

/// 100 frames moving 2 px/frame with slow zoom, passing behind a near-opaque screen on frames 40–50.
pub fn occlusion_scenario(seed: u64) -> SynthSpec {
    SynthSpec {
        name: "occlusion".into(),
        canvas: (320, 200),
        object_size: (36.0, 36.0),
        start_center: (45.0, 100.0),
        velocity: (2.0, 0.0),
        zoom: 1.005,
        occlusion: Some(Occlusion {
            start: 40,
            end: 50,
            opacity: 0.85,
        }),
        noise: 0.02,
        seed,
        frames: 100,
    }
}

/// Static object growing by `zoom` per frame.
pub fn zoom_scenario(seed: u64, zoom: f64, frames: usize) -> SynthSpec {
    SynthSpec {
        name: "zoom".into(),
        canvas: (200, 200),
        object_size: (40.0, 40.0),
        start_center: (100.0, 100.0),
        velocity: (0.0, 0.0),
        zoom,
        occlusion: None,
        noise: 0.02,
        seed,
        frames,
    }
}
