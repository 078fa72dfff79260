//! Python bindings. Images travel as flat row-major lists with an explicit
//! `(channels, height, width)` shape; boxes as `(x1, y1, x2, y2)` or
//! `(x1, y1, x2, y2, score)` tuples.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use srdet::anchors::{self, AnchorTag, BBox};
use srdet::config::ExperimentConfig;
use srdet::data::{self, SynthConfig};
use srdet::detector::{self, Mode};
use srdet::eval::{self, CostTable, DifficultyBands};
use srdet::losses::{self, FocalParams};
use srdet::tensor::Tensor;
use srdet::train::{self, Checkpoint, TrainConfig};
use srdet::Error;

type Box4 = (f64, f64, f64, f64);
type Box5 = (f64, f64, f64, f64, f64);
type Shape3 = (usize, usize, usize);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::Json(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn bbox(b: Box4) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

fn scored(b: Box5) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3).with_score(b.4)
}

fn tuple4(b: &BBox) -> Box4 {
    (b.x1, b.y1, b.x2, b.y2)
}

fn tuple5(b: &BBox) -> Box5 {
    (b.x1, b.y1, b.x2, b.y2, b.score.unwrap_or(0.0))
}

fn image(values: Vec<f64>, shape: Shape3) -> PyResult<Tensor> {
    Tensor::from_vec([1, shape.0, shape.1, shape.2], values).map_err(to_py)
}

fn mode(name: &str) -> PyResult<Mode> {
    match name {
        "train" => Ok(Mode::Train),
        "infer" => Ok(Mode::Infer),
        other => Err(PyValueError::new_err(format!("mode must be 'train' or 'infer', got {other:?}"))),
    }
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> f64 {
    anchors::iou(&bbox(a), &bbox(b))
}

#[pyfunction]
fn nms(dets: Vec<Box5>, iou_thresh: f64) -> Vec<Box5> {
    let boxes: Vec<BBox> = dets.into_iter().map(scored).collect();
    anchors::nms(&boxes, iou_thresh).iter().map(tuple5).collect()
}

#[pyfunction]
fn encode_box(anchor: Box4, gt: Box4) -> PyResult<[f64; 4]> {
    anchors::encode_box(&bbox(anchor), &bbox(gt)).map_err(to_py)
}

#[pyfunction]
fn decode_box(anchor: Box4, deltas: [f64; 4]) -> Box4 {
    tuple4(&anchors::decode_box(&bbox(anchor), deltas))
}

#[pyfunction]
fn generate_anchors(height: usize, width: usize, sizes: Vec<usize>, strides: Vec<usize>) -> PyResult<Vec<Box4>> {
    let set = anchors::generate_anchors(height, width, &sizes, &strides).map_err(to_py)?;
    Ok(set.boxes.iter().map(tuple4).collect())
}

/// Tags: 1 positive, 0 negative, -1 ignored.
#[pyfunction]
#[pyo3(signature = (probs, tags, alpha = 0.25, gamma = 2.0))]
fn focal_loss(probs: Vec<f64>, tags: Vec<i64>, alpha: f64, gamma: f64) -> PyResult<f64> {
    let tags: Vec<AnchorTag> = tags
        .into_iter()
        .map(|t| match t {
            1 => Ok(AnchorTag::Positive(0)),
            0 => Ok(AnchorTag::Negative),
            -1 => Ok(AnchorTag::Ignore),
            other => Err(PyValueError::new_err(format!("tag must be 1, 0 or -1, got {other}"))),
        })
        .collect::<PyResult<_>>()?;
    let params = FocalParams { alpha, gamma };
    params.validate().map_err(to_py)?;
    losses::focal_loss(&probs, &tags, &params).map_err(to_py)
}

#[pyfunction]
fn smooth_l1(pred: Vec<[f64; 4]>, target: Vec<[f64; 4]>) -> PyResult<f64> {
    losses::smooth_l1(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn sr_l1(recon: Vec<f64>, target: Vec<f64>, shape: Shape3) -> PyResult<f64> {
    losses::sr_l1(&image(recon, shape)?, &image(target, shape)?).map_err(to_py)
}

/// Returns `(l_focal, l_smooth, l_sr, phi, total)`.
#[pyfunction]
fn total_loss(l_focal: f64, l_smooth: f64, l_sr: f64, phi: f64) -> PyResult<(f64, f64, f64, f64, f64)> {
    let r = losses::total_loss(l_focal, l_smooth, l_sr, phi).map_err(to_py)?;
    Ok((r.l_focal, r.l_smooth, r.l_sr, r.phi, r.l_ef))
}

#[pyfunction]
fn gaussian_blur(values: Vec<f64>, shape: Shape3, sigma: f64) -> PyResult<Vec<f64>> {
    Ok(data::gaussian_blur(&image(values, shape)?, sigma).map_err(to_py)?.into_vec())
}

/// Returns `(ap, thresholds, precision, recall)`.
#[pyfunction]
#[pyo3(signature = (dets, gts, iou_thresh = 0.5))]
fn compute_ap(dets: Vec<Box5>, gts: Vec<Box4>, iou_thresh: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let d: Vec<BBox> = dets.into_iter().map(scored).collect();
    let g: Vec<BBox> = gts.into_iter().map(bbox).collect();
    let c = eval::compute_ap(&d, &g, iou_thresh);
    (c.ap, c.thresholds, c.precision, c.recall)
}

/// Returns index lists `(easy, medium, hard)`.
#[pyfunction]
#[pyo3(signature = (gts, easy_min = 24.0, medium_min = 16.5))]
fn partition_difficulty(gts: Vec<Box4>, easy_min: f64, medium_min: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let g: Vec<BBox> = gts.into_iter().map(bbox).collect();
    let p = eval::partition_difficulty(&g, &DifficultyBands { easy_min, medium_min });
    (p.easy, p.medium, p.hard)
}

#[pyfunction]
#[pyo3(signature = (history, current_lr, patience = 3, factor = 0.1, floor = 1e-8))]
fn lr_schedule_step(history: Vec<f64>, current_lr: f64, patience: usize, factor: f64, floor: f64) -> f64 {
    let cfg = TrainConfig {
        plateau_patience: patience,
        lr_factor: factor,
        lr_floor: floor,
        ..Default::default()
    };
    train::lr_schedule_step(&history, current_lr, &cfg)
}

/// Each sample is `(image_values, (channels, height, width), boxes)`.
#[pyfunction]
#[pyo3(signature = (n, image_size = 64, seed = 0, small_fraction = 0.5, faces_per_image = (1, 3), scale_range = (8.0, 32.0)))]
fn synth_dataset(
    n: usize,
    image_size: usize,
    seed: u64,
    small_fraction: f64,
    faces_per_image: (usize, usize),
    scale_range: (f64, f64),
) -> PyResult<Vec<(Vec<f64>, Shape3, Vec<Box4>)>> {
    let cfg = SynthConfig {
        n,
        image_size,
        seed,
        small_fraction,
        faces_per_image,
        scale_range,
        ..Default::default()
    };
    let samples = data::synth_dataset(&cfg).map_err(to_py)?;
    Ok(samples
        .into_iter()
        .map(|s| {
            let boxes = s.boxes.iter().map(tuple4).collect();
            let shape = (s.image.c(), s.image.h(), s.image.w());
            (s.image.into_vec(), shape, boxes)
        })
        .collect())
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(to_py)
}

/// A face detector, optionally carrying the training-only SR branch.
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: detector::Detector,
}

#[pymethods]
impl PyDetector {
    /// `config` is an experiment configuration in TOML; its `[model]` table is used.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => ExperimentConfig::from_toml(text).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        let inner = detector::Detector::new(&cfg.model, seed).map_err(to_py)?;
        Ok(PyDetector { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(std::path::Path::new(path)).map_err(to_py)?;
        Ok(PyDetector {
            inner: ck.detector().map_err(to_py)?,
        })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    #[getter]
    fn has_branch(&self) -> bool {
        self.inner.has_branch()
    }

    fn without_branch(&self) -> Self {
        PyDetector {
            inner: self.inner.without_branch(),
        }
    }

    #[pyo3(signature = (mode = "infer"))]
    fn param_count(&self, mode: &str) -> PyResult<usize> {
        Ok(eval::count_params(&self.inner, self::mode(mode)?))
    }

    #[pyo3(signature = (size, mode = "infer"))]
    fn macs(&self, size: usize, mode: &str) -> PyResult<u64> {
        eval::count_macs(&self.inner, self::mode(mode)?, size, &CostTable::default()).map_err(to_py)
    }

    #[pyo3(signature = (size, runs = 10))]
    fn fps(&self, size: usize, runs: usize) -> PyResult<(f64, f64)> {
        let r = eval::measure_fps(&self.inner, size, runs).map_err(to_py)?;
        Ok((r.mean, r.std))
    }

    #[pyo3(signature = (values, shape, score_thresh = 0.05, nms_thresh = 0.4))]
    fn detect(&self, values: Vec<f64>, shape: Shape3, score_thresh: f64, nms_thresh: f64) -> PyResult<Vec<Box5>> {
        let img = image(values, shape)?;
        let dets = self.inner.detect(&img, score_thresh, nms_thresh).map_err(to_py)?;
        Ok(dets[0].iter().map(tuple5).collect())
    }

    /// Reconstruction of the SR branch for one image, as flat values at input resolution.
    fn reconstruct(&self, values: Vec<f64>, shape: Shape3) -> PyResult<Option<Vec<f64>>> {
        let img = image(values, shape)?;
        let out = self.inner.model_forward(&img, Mode::Train).map_err(to_py)?;
        Ok(out.sr_image.map(Tensor::into_vec))
    }
}

#[pymodule]
fn srdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(encode_box, m)?)?;
    m.add_function(wrap_pyfunction!(decode_box, m)?)?;
    m.add_function(wrap_pyfunction!(generate_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_l1, m)?)?;
    m.add_function(wrap_pyfunction!(sr_l1, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_blur, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ap, m)?)?;
    m.add_function(wrap_pyfunction!(partition_difficulty, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule_step, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
