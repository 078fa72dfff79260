//! Synthetic face data, augmentation with clean reconstruction targets, and annotation files.
//!
//! Annotation files list one record per image:
//!
//! ```text
//! <image path>\n
//! <box count>\n
//! <x1> <y1> <x2> <y2>[ <score>]\n   (box count lines)
//! ```
//!
//! Coordinates are written with two fractional digits, scores with six.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Faces at most this tall count as "small".
pub const SMALL_FACE_MAX: f64 = 16.0;
const CROP_RETRIES: usize = 10;
const PLACEMENT_ATTEMPTS: usize = 200;

/// A clean image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

/// A degraded network input, its boxes, and the clean reconstruction target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input_image: Tensor,
    pub gt_boxes: Vec<BBox>,
    pub sr_target: Tensor,
}

impl TrainSample {
    pub fn from_clean(sample: &Sample) -> Self {
        TrainSample {
            input_image: sample.image.clone(),
            gt_boxes: sample.boxes.clone(),
            sr_target: sample.image.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub blur_prob: f64,
    pub sigma_range: (f64, f64),
    pub jitter_prob: f64,
    /// Additive brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast gain drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    pub crop_prob: f64,
    /// Side of the square crop relative to the image side.
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            blur_prob: 0.5,
            sigma_range: (0.5, 2.5),
            jitter_prob: 0.5,
            brightness: 0.1,
            contrast: 0.2,
            crop_prob: 0.5,
            crop_scale: (0.7, 1.0),
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No randomness at all: every sample passes through untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            blur_prob: 0.0,
            jitter_prob: 0.0,
            crop_prob: 0.0,
            hflip_prob: 0.0,
            crop_scale: (1.0, 1.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("blur_prob", self.blur_prob),
            ("jitter_prob", self.jitter_prob),
            ("crop_prob", self.crop_prob),
            ("hflip_prob", self.hflip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} not in [0, 1]")));
            }
        }
        let (lo, hi) = self.sigma_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!("augment.sigma_range ({lo}, {hi}) invalid")));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("augment.crop_scale ({lo}, {hi}) invalid")));
        }
        if self.brightness < 0.0 || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("augment.brightness/contrast out of range".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian weights for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidValue(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur of every plane, reflect-padded.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let kernel = gaussian_kernel(sigma)?;
    if kernel.len() == 1 {
        return Ok(image.clone());
    }
    let r = (kernel.len() / 2) as i64;
    let [_, _, h, w] = image.shape();
    let mut out = image.clone();
    let mut tmp = vec![0.0; h * w];
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + reflect(x as i64 + k as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[reflect(y as i64 + k as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

pub fn hflip_image(image: &Tensor) -> Tensor {
    let w = image.w();
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

fn to_rgb32f(image: &Tensor) -> Rgb32FImage {
    let [_, _, h, w] = image.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| image.at(0, c, y, x) as f32))
    })
}

fn from_rgb32f(img: &Rgb32FImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, f64::from(px.0[c]));
        }
    }
    t
}

/// Crops the square `[x0, x0+side)×[y0, y0+side)` and resizes it back to the full side.
fn crop_resize(image: &Tensor, x0: u32, y0: u32, side: u32) -> Tensor {
    let full = image.w() as u32;
    let img = to_rgb32f(image);
    let cropped = imageops::crop_imm(&img, x0, y0, side, side).to_image();
    let resized = imageops::resize(&cropped, full, full, imageops::FilterType::Triangle);
    from_rgb32f(&resized).map(|v| v.clamp(0.0, 1.0))
}

/// Keeps boxes with at least half their area inside the crop, mapped to output pixels.
fn crop_boxes(boxes: &[BBox], x0: f64, y0: f64, side: f64, full: f64) -> Vec<BBox> {
    let window = BBox::new(x0, y0, x0 + side, y0 + side);
    let s = full / side;
    boxes
        .iter()
        .filter(|b| b.area() > 0.0 && b.intersection(&window) >= 0.5 * b.area())
        .map(|b| {
            let c = b.clip(x0 + side, y0 + side);
            BBox {
                x1: (c.x1.max(x0) - x0) * s,
                y1: (c.y1.max(y0) - y0) * s,
                x2: (c.x2 - x0) * s,
                y2: (c.y2 - y0) * s,
                ..*b
            }
        })
        .collect()
}

/// Random geometric transforms on both images and the boxes, then photometric
/// jitter and blur on the network input only.
pub fn augment<R: Rng>(sample: &TrainSample, cfg: &AugmentConfig, rng: &mut R) -> TrainSample {
    let mut input = sample.input_image.clone();
    let mut target = sample.sr_target.clone();
    let mut boxes = sample.gt_boxes.clone();
    let full = input.w() as f64;

    if rng.random_bool(cfg.crop_prob) {
        for _ in 0..CROP_RETRIES {
            let scale = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
            let side = ((scale * full).round() as u32).clamp(1, full as u32);
            let slack = full as u32 - side;
            let x0 = rng.random_range(0..=slack);
            let y0 = rng.random_range(0..=slack);
            let kept = crop_boxes(&boxes, x0 as f64, y0 as f64, side as f64, full);
            if !boxes.is_empty() && kept.is_empty() {
                continue;
            }
            if side != full as u32 {
                input = crop_resize(&input, x0, y0, side);
                target = crop_resize(&target, x0, y0, side);
                boxes = kept;
            }
            break;
        }
    }

    if rng.random_bool(cfg.hflip_prob) {
        input = hflip_image(&input);
        target = hflip_image(&target);
        boxes = boxes.into_iter().map(|b| b.hflip(full)).collect();
    }

    if rng.random_bool(cfg.jitter_prob) {
        let delta = rng.random_range(-cfg.brightness..=cfg.brightness);
        let gain = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        let mean = input.sum() / input.len() as f64;
        input = input.map(|v| ((v - mean) * gain + mean + delta).clamp(0.0, 1.0));
    }

    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.sigma_range.0..=cfg.sigma_range.1);
        input = gaussian_blur(&input, sigma).expect("sigma range validated non-negative");
    }

    TrainSample {
        input_image: input,
        gt_boxes: boxes,
        sr_target: target,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    /// Inclusive range of faces per image.
    pub faces_per_image: (usize, usize),
    /// Inclusive range of face heights in pixels.
    pub scale_range: (f64, f64),
    /// Fraction of faces drawn with height at most 16 px.
    pub small_fraction: f64,
    /// Featureless skin-colored and colored blobs per image.
    pub distractors: (usize, usize),
    /// Largest IoU allowed between two faces.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            image_size: 128,
            faces_per_image: (1, 4),
            scale_range: (8.0, 48.0),
            small_fraction: 0.5,
            distractors: (0, 3),
            max_overlap: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synth.n must be >= 1".into()));
        }
        if self.image_size == 0 || self.faces_per_image.0 > self.faces_per_image.1 {
            return Err(Error::Config("synth.image_size / faces_per_image invalid".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo >= 2.0 && lo <= hi && hi <= self.image_size as f64) {
            return Err(Error::Config(format!("synth.scale_range ({lo}, {hi}) invalid")));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return Err(Error::Config("synth.small_fraction not in [0, 1]".into()));
        }
        if self.small_fraction > 0.0 && lo > SMALL_FACE_MAX {
            return Err(Error::Config("synth.scale_range excludes small faces".into()));
        }
        if self.small_fraction < 1.0 && hi <= SMALL_FACE_MAX {
            return Err(Error::Config("synth.scale_range excludes large faces".into()));
        }
        Ok(())
    }
}

struct Canvas {
    size: usize,
    pixels: Vec<[f64; 3]>,
}

const SUPERSAMPLE: usize = 4;

impl Canvas {
    /// Paints an axis-aligned ellipse with 4×4 supersampled coverage.
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
        let x_lo = ((cx - rx).floor().max(0.0)) as usize;
        let x_hi = ((cx + rx).ceil() as usize).min(self.size);
        let y_lo = ((cy - ry).floor().max(0.0)) as usize;
        let y_hi = ((cy + ry).ceil() as usize).min(self.size);
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let dx = (px - cx) / rx;
                        let dy = (py - cy) / ry;
                        if dx * dx + dy * dy <= 1.0 {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / n;
                    let p = &mut self.pixels[y * self.size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let s = self.size;
        let mut t = Tensor::zeros([1, 3, s, s]);
        for (i, p) in self.pixels.iter().enumerate() {
            for c in 0..3 {
                t.set(0, c, i / s, i % s, p[c].clamp(0.0, 1.0));
            }
        }
        t
    }
}

fn skin_tone<R: Rng>(rng: &mut R) -> [f64; 3] {
    let base = rng.random_range(0.35..0.95);
    [base, base * rng.random_range(0.7..0.85), base * rng.random_range(0.5..0.7)]
}

fn background<R: Rng>(rng: &mut R, size: usize) -> Canvas {
    let a: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.05..0.6));
    let b: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.05..0.6));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(0.2..0.8);
    let amp = rng.random_range(0.0..0.08);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * dx + y as f64 * dy) / size as f64 + 1.0) / 2.0;
            let stripe = amp * ((x as f64 * dy - y as f64 * dx) * freq).sin();
            let noise = rng.random_range(-0.03..0.03);
            pixels.push([0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t + stripe + noise));
        }
    }
    Canvas { size, pixels }
}

/// Head ellipse with two eyes and a mouth, filling `face` exactly.
fn draw_face<R: Rng>(canvas: &mut Canvas, face: &BBox, rng: &mut R) {
    let skin = skin_tone(rng);
    let (cx, cy) = face.center();
    let (w, h) = (face.width(), face.height());
    canvas.ellipse(cx, cy, w / 2.0, h / 2.0, skin);
    let dark = [0, 1, 2].map(|c| skin[c] * rng.random_range(0.1..0.3));
    let eye_dx = w * rng.random_range(0.18..0.24);
    let eye_y = cy - h * rng.random_range(0.08..0.14);
    let eye_r = w * rng.random_range(0.07..0.1);
    canvas.ellipse(cx - eye_dx, eye_y, eye_r, eye_r * 0.8, dark);
    canvas.ellipse(cx + eye_dx, eye_y, eye_r, eye_r * 0.8, dark);
    let mouth = [0.55 * skin[0], 0.25 * skin[1], 0.25 * skin[2]];
    canvas.ellipse(cx, cy + h * 0.25, w * rng.random_range(0.14..0.2), h * 0.05, mouth);
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let mut canvas = background(&mut rng, size);

    let n_faces = rng.random_range(cfg.faces_per_image.0..=cfg.faces_per_image.1);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_faces);
    let (lo, hi) = cfg.scale_range;
    for _ in 0..n_faces {
        let small = rng.random_bool(cfg.small_fraction);
        let (h_lo, h_hi) = if small {
            (lo, hi.min(SMALL_FACE_MAX))
        } else {
            ((SMALL_FACE_MAX + 1.0).max(lo), hi)
        };
        let height = rng.random_range(h_lo..=h_hi).round();
        let width = (0.8 * height).round().max(2.0);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x1 = rng.random_range(0..=(size - width as usize)) as f64;
            let y1 = rng.random_range(0..=(size - height as usize)) as f64;
            let cand = BBox::new(x1, y1, x1 + width, y1 + height);
            if boxes.iter().all(|b| iou(b, &cand) <= cfg.max_overlap) {
                placed = Some(cand);
                break;
            }
        }
        let face = placed.ok_or_else(|| {
            Error::InfeasiblePlacement(format!(
                "image {index}: could not place a {width}x{height} face among {} others",
                boxes.len()
            ))
        })?;
        boxes.push(face);
    }

    let n_distractors = rng.random_range(cfg.distractors.0..=cfg.distractors.1);
    for _ in 0..n_distractors {
        let r = rng.random_range(lo / 2.0..=hi / 2.0);
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let color = if rng.random_bool(0.5) {
            skin_tone(&mut rng)
        } else {
            [0, 1, 2].map(|_| rng.random_range(0.0..1.0))
        };
        let blob = BBox::from_center(cx, cy, 2.0 * r, 2.0 * r);
        if boxes.iter().all(|b| b.intersection(&blob) == 0.0) {
            canvas.ellipse(cx, cy, r, r * rng.random_range(0.8..1.25), color);
        }
    }

    for face in &boxes {
        draw_face(&mut canvas, face, &mut rng);
    }
    Ok(Sample {
        image: canvas.into_tensor(),
        boxes,
    })
}

/// Procedurally rendered faces; identical output for identical configs.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.n).map(|i| generate_one(cfg, i)).collect()
}

pub fn is_small(b: &BBox) -> bool {
    b.height() <= SMALL_FACE_MAX
}

/// One record of an annotation or detection file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub path: String,
    pub boxes: Vec<BBox>,
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", r.path);
        let _ = writeln!(out, "{}", r.boxes.len());
        for b in &r.boxes {
            let _ = write!(out, "{:.2} {:.2} {:.2} {:.2}", b.x1, b.y1, b.x2, b.y2);
            if let Some(s) = b.score {
                let _ = write!(out, " {s:.6}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<AnnotationRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let path = lines[i].trim_end_matches('\r');
        if path.trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = lines
            .get(i + 1)
            .ok_or_else(|| err(i + 2, "missing box count".into()))?;
        let count: usize = count_line
            .trim()
            .parse()
            .map_err(|e| err(i + 2, format!("bad box count `{}`: {e}", count_line.trim())))?;
        let mut boxes = Vec::with_capacity(count);
        for k in 0..count {
            let ln = i + 2 + k;
            let line = lines.get(ln).ok_or_else(|| err(ln + 1, "missing box line".into()))?;
            let nums = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(ln + 1, format!("bad number: {e}")))?;
            let b = match nums.as_slice() {
                [x1, y1, x2, y2] => BBox::new(*x1, *y1, *x2, *y2),
                [x1, y1, x2, y2, s] => BBox::new(*x1, *y1, *x2, *y2).with_score(*s),
                _ => return Err(err(ln + 1, format!("expected 4 or 5 numbers, got {}", nums.len()))),
            };
            if !b.is_valid() {
                return Err(err(ln + 1, "box has x2 < x1 or y2 < y1".into()));
            }
            boxes.push(b);
        }
        records.push(AnnotationRecord {
            path: path.to_string(),
            boxes,
        });
        i += 2 + count;
    }
    Ok(records)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    fs::write(path, format_annotations(records)).map_err(|e| Error::io(path, e))
}

/// Writes an N=1, 3-channel image in `[0, 1]` as an 8-bit PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("PNG export needs 3 channels, got {c}")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|ch| (image.at(0, ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, f64::from(px.0[c]) / 255.0);
        }
    }
    Ok(t)
}

pub const ANNOTATION_FILE: &str = "annotations.txt";

/// Writes `images/NNNNN.png` plus an annotation file under `dir`.
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        save_png(&dir.join(&rel), &s.image)?;
        records.push(AnnotationRecord {
            path: rel,
            boxes: s.boxes.clone(),
        });
    }
    let ann = dir.join(ANNOTATION_FILE);
    write_annotations(&ann, &records)?;
    Ok(ann)
}

/// Loads a dataset written by [`export_dataset`] (or any file in the same format).
pub fn import_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ann = dir.join(ANNOTATION_FILE);
    read_annotations(&ann)?
        .into_iter()
        .map(|r| {
            Ok(Sample {
                image: load_png(&dir.join(&r.path))?,
                boxes: r.boxes,
            })
        })
        .collect()
}
