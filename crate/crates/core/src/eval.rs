//! Average precision, difficulty bands, parameter/MAC counting and FPS timing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox};
use crate::detector::{Detector, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, LayerCall};
use crate::params::ParamGroup;
use crate::tensor::Tensor;

/// Precision/recall staircase, one point per distinct score threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// Detections and ground truth of one image. `ignore[i]` marks gts that
/// neither count as positives nor penalize detections landing on them.
#[derive(Clone, Debug, Default)]
pub struct ImageEval<'a> {
    pub dets: &'a [BBox],
    pub gts: &'a [BBox],
    pub ignore: Option<&'a [bool]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

fn by_score_desc(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Greedy matching inside one image: each detection, in descending score order,
/// takes the unmatched counted gt with the highest IoU ≥ `iou_thresh`; failing
/// that, a detection on an ignored gt is dropped.
fn match_image(img: &ImageEval, iou_thresh: f64) -> Vec<Outcome> {
    let mut order: Vec<usize> = (0..img.dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (img.dets[a].score.unwrap_or(0.0), img.dets[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let ignored = |g: usize| img.ignore.is_some_and(|m| m[g]);
    let mut taken = vec![false; img.gts.len()];
    let mut outcome = vec![Outcome::Fp; img.dets.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in img.gts.iter().enumerate() {
            if taken[g] || ignored(g) {
                continue;
            }
            let v = iou(&img.dets[d], gt);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            outcome[d] = Outcome::Tp;
        } else if (0..img.gts.len()).any(|g| ignored(g) && iou(&img.dets[d], &img.gts[g]) >= iou_thresh) {
            outcome[d] = Outcome::Ignored;
        }
    }
    outcome
}

/// All-point interpolated area under a precision/recall staircase.
fn all_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut interp = precision.to_vec();
    for i in (0..interp.len().saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, &r) in interp.iter().zip(recall) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// AP pooled over several images.
///
/// With no counted ground truth the AP is 1.0 if no detection survives and
/// 0.0 otherwise.
pub fn compute_ap_multi(images: &[ImageEval], iou_thresh: f64) -> PRCurve {
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    let mut outcomes = Vec::with_capacity(images.len());
    let mut n_gt = 0;
    for (i, img) in images.iter().enumerate() {
        n_gt += (0..img.gts.len()).filter(|&g| !img.ignore.is_some_and(|m| m[g])).count();
        let o = match_image(img, iou_thresh);
        for (d, &out) in o.iter().enumerate() {
            if out != Outcome::Ignored {
                scored.push((img.dets[d].score.unwrap_or(0.0), i, d));
            }
        }
        outcomes.push(o);
    }
    scored.sort_by(by_score_desc);

    let mut curve = PRCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
        ap: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, i, d)) in scored.iter().enumerate() {
        match outcomes[i][d] {
            Outcome::Tp => tp += 1,
            _ => fp += 1,
        }
        let group_ends = scored.get(k + 1).is_none_or(|next| next.0 != score);
        if group_ends {
            curve.thresholds.push(score);
            curve.precision.push(tp as f64 / (tp + fp) as f64);
            curve.recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
        }
    }
    curve.ap = if n_gt == 0 {
        if scored.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        all_point_ap(&curve.precision, &curve.recall)
    };
    curve
}

/// AP of one image's detections against its ground truth.
pub fn compute_ap(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> PRCurve {
    compute_ap_multi(&[ImageEval { dets, gts, ignore: None }], iou_thresh)
}

/// Height floors (pixels) of the easy and medium bands; everything lower is hard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifficultyBands {
    pub easy_min: f64,
    pub medium_min: f64,
}

impl Default for DifficultyBands {
    /// Integer heights up to 16 px land in hard.
    fn default() -> Self {
        DifficultyBands {
            easy_min: 24.0,
            medium_min: 16.5,
        }
    }
}

impl DifficultyBands {
    pub fn validate(&self) -> Result<()> {
        if !(self.medium_min > 0.0 && self.medium_min <= self.easy_min) {
            return Err(Error::Config(format!(
                "eval.bands: need 0 < medium_min ({}) <= easy_min ({})",
                self.medium_min, self.easy_min
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Easy,
    Medium,
    Hard,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Easy, Subset::Medium, Subset::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Easy => "easy",
            Subset::Medium => "medium",
            Subset::Hard => "hard",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub easy: Vec<usize>,
    pub medium: Vec<usize>,
    pub hard: Vec<usize>,
}

impl Partition {
    pub fn get(&self, s: Subset) -> &[usize] {
        match s {
            Subset::Easy => &self.easy,
            Subset::Medium => &self.medium,
            Subset::Hard => &self.hard,
        }
    }
}

pub fn subset_of(b: &BBox, bands: &DifficultyBands) -> Subset {
    let h = b.height();
    if h >= bands.easy_min {
        Subset::Easy
    } else if h >= bands.medium_min {
        Subset::Medium
    } else {
        Subset::Hard
    }
}

/// Splits gt indices by box height. Degenerate boxes are not eligible.
pub fn partition_difficulty(gts: &[BBox], bands: &DifficultyBands) -> Partition {
    let mut p = Partition::default();
    for (i, b) in gts.iter().enumerate() {
        if b.area() <= 0.0 {
            continue;
        }
        match subset_of(b, bands) {
            Subset::Easy => p.easy.push(i),
            Subset::Medium => p.medium.push(i),
            Subset::Hard => p.hard.push(i),
        }
    }
    p
}

/// One row of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub subset: Subset,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
    #[serde(skip)]
    pub curve: Option<PRCurve>,
}

/// Per-subset AP. Ground truth outside the subset is ignored, so detections of
/// other-sized faces neither help nor hurt.
pub fn evaluate_subsets(
    dets: &[Vec<BBox>],
    gts: &[Vec<BBox>],
    bands: &DifficultyBands,
    iou_thresh: f64,
) -> Result<Vec<SubsetResult>> {
    if dets.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection lists vs {} ground-truth lists",
            dets.len(),
            gts.len()
        )));
    }
    let subsets: Vec<Vec<Subset>> = gts
        .iter()
        .map(|g| g.iter().map(|b| subset_of(b, bands)).collect())
        .collect();
    Subset::ALL
        .iter()
        .map(|&s| {
            let masks: Vec<Vec<bool>> = subsets
                .iter()
                .zip(gts)
                .map(|(tags, g)| tags.iter().zip(g).map(|(t, b)| *t != s || b.area() <= 0.0).collect())
                .collect();
            let images: Vec<ImageEval> = dets
                .iter()
                .zip(gts)
                .zip(&masks)
                .map(|((d, g), m)| ImageEval {
                    dets: d,
                    gts: g,
                    ignore: Some(m),
                })
                .collect();
            let curve = compute_ap_multi(&images, iou_thresh);
            let n_gt = masks.iter().flatten().filter(|&&ign| !ign).count();
            let n_ignored: usize = images
                .iter()
                .map(|img| {
                    match_image(img, iou_thresh)
                        .iter()
                        .filter(|&&o| o == Outcome::Ignored)
                        .count()
                })
                .sum();
            let n_det = dets.iter().map(Vec::len).sum::<usize>() - n_ignored;
            Ok(SubsetResult {
                subset: s,
                ap: curve.ap,
                n_gt,
                n_det,
                curve: Some(curve),
            })
        })
        .collect()
}

/// How one layer kind contributes multiply-accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacRule {
    /// `k² · C_in · C_out · H_out · W_out` per sample; bias adds nothing.
    Conv,
    /// One MAC per input element (pooling: a running sum).
    PerInputElement,
    /// One MAC per output element (gating: one multiply each).
    PerOutputElement,
    Free,
}

/// MAC rule per layer kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub rules: BTreeMap<String, MacRule>,
}

impl Default for CostTable {
    fn default() -> Self {
        let rules = [
            ("conv2d", MacRule::Conv),
            ("global_avg_pool", MacRule::PerInputElement),
            ("channel_scale", MacRule::PerOutputElement),
            ("add", MacRule::Free),
            ("relu", MacRule::Free),
            ("silu", MacRule::Free),
            ("sigmoid", MacRule::Free),
            ("clamp", MacRule::Free),
            ("pixel_shuffle", MacRule::Free),
            ("upsample_nearest", MacRule::Free),
        ]
        .into_iter()
        .map(|(k, r)| (k.to_string(), r))
        .collect();
        CostTable { rules }
    }
}

fn elems(shape: [usize; 4]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

/// Sum of MACs over an executed layer trace.
pub fn macs_of_trace(trace: &[LayerCall], table: &CostTable) -> Result<u64> {
    let mut total = 0u64;
    for call in trace {
        let rule = table
            .rules
            .get(call.kind)
            .ok_or_else(|| Error::UnsupportedLayer(call.kind.to_string()))?;
        total += match rule {
            MacRule::Conv => {
                let k = call.kernel.unwrap_or(1) as u64;
                let [n, cout, ho, wo] = call.output_shape.map(|d| d as u64);
                n * k * k * call.input_shape[1] as u64 * cout * ho * wo
            }
            MacRule::PerInputElement => elems(call.input_shape),
            MacRule::PerOutputElement => elems(call.output_shape),
            MacRule::Free => 0,
        };
    }
    Ok(total)
}

/// Learnable scalars used in `mode`. Inference excludes the SR branch.
pub fn count_params(model: &Detector, mode: Mode) -> usize {
    match mode {
        Mode::Infer => model.params().scalar_count(Some(ParamGroup::Detection)),
        Mode::Train => model.params().scalar_count(None),
    }
}

/// MACs of one forward of a single `size`×`size` image in `mode`.
pub fn count_macs(model: &Detector, mode: Mode, size: usize, table: &CostTable) -> Result<u64> {
    macs_of_trace(&model.layer_trace(mode, size)?, table)
}

/// Costs at one input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: usize,
    pub params_infer: usize,
    pub params_train: usize,
    pub macs_infer: u64,
    pub macs_train: u64,
    pub fps: Option<FpsReport>,
}

impl CostReport {
    pub fn branch_macs(&self) -> u64 {
        self.macs_train - self.macs_infer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Warmup runs executed before timing starts.
pub const FPS_WARMUP: usize = 5;

/// Frames per second of inference-mode forwards on a fixed random image.
///
/// Each timed run yields one FPS sample; the report holds their mean and
/// standard deviation. Timing is only meaningful when nothing else competes
/// for the CPU, so callers should not run other workloads concurrently.
pub fn measure_fps(model: &Detector, size: usize, runs: usize) -> Result<FpsReport> {
    if runs == 0 {
        return Err(Error::InvalidValue("fps runs must be >= 1".into()));
    }
    model.check_size(size)?;
    let c = model.config().pyramid.image_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::from_fn([1, c, size, size], |_| rng.random_range(0.0..1.0));
    let once = || -> Result<()> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let vars = model.forward_vars(&mut g, x, Mode::Infer)?;
        std::hint::black_box(&vars);
        Ok(())
    };
    for _ in 0..FPS_WARMUP {
        once()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        once()?;
        samples.push(1.0 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / runs as f64;
    Ok(FpsReport {
        runs,
        mean,
        std: var.sqrt(),
    })
}

pub fn cost_report(
    model: &Detector,
    size: usize,
    table: &CostTable,
    fps_runs: Option<usize>,
) -> Result<CostReport> {
    Ok(CostReport {
        input_size: size,
        params_infer: count_params(model, Mode::Infer),
        params_train: count_params(model, Mode::Train),
        macs_infer: count_macs(model, Mode::Infer, size, table)?,
        macs_train: count_macs(model, Mode::Train, size, table)?,
        fps: fps_runs.map(|r| measure_fps(model, size, r)).transpose()?,
    })
}

pub fn pr_csv(curve: &PRCurve) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for ((t, p), r) in curve.thresholds.iter().zip(&curve.precision).zip(&curve.recall) {
        let _ = writeln!(s, "{t},{p},{r}");
    }
    s
}

/// A polyline in data coordinates `[0,1]×[0,1]`.
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
    pub dashed: bool,
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 360;
const MARGIN: f32 = 30.0;

/// Renders series on a unit box with a light grid at tenths.
pub fn render_plot(series: &[Series]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (w, h) = (PLOT_W as f32 - 2.0 * MARGIN, PLOT_H as f32 - 2.0 * MARGIN);
    let to_px = |x: f64, y: f64| (MARGIN + x.clamp(0.0, 1.0) as f32 * w, MARGIN + (1.0 - y.clamp(0.0, 1.0) as f32) * h);
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let grid = Rgb([225, 225, 225]);
        draw_line_segment_mut(&mut img, to_px(t, 0.0), to_px(t, 1.0), grid);
        draw_line_segment_mut(&mut img, to_px(0.0, t), to_px(1.0, t), grid);
    }
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(MARGIN as i32, MARGIN as i32).of_size(w as u32 + 1, h as u32 + 1),
        Rgb([0, 0, 0]),
    );
    for s in series {
        for (k, pair) in s.points.windows(2).enumerate() {
            if s.dashed && k % 2 == 1 {
                continue;
            }
            draw_line_segment_mut(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), Rgb(s.color));
        }
    }
    img
}

/// Precision (y) against recall (x).
pub fn pr_plot(curve: &PRCurve) -> RgbImage {
    let mut points = vec![(0.0, curve.precision.first().copied().unwrap_or(0.0))];
    points.extend(curve.recall.iter().copied().zip(curve.precision.iter().copied()));
    render_plot(&[Series {
        points,
        color: [20, 60, 200],
        dashed: false,
    }])
}

pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn b(x: f64, y: f64, s: f64) -> BBox {
        BBox::new(x, y, x + 10.0, y + 10.0).with_score(s)
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [b(0.0, 0.0, 1.0), b(20.0, 0.0, 1.0)];
        assert_eq!(compute_ap(&gts, &gts, 0.5).ap, 1.0);
        assert_eq!(compute_ap(&[], &gts, 0.5).ap, 0.0);
        assert_eq!(compute_ap(&[], &[], 0.5).ap, 1.0);
        assert_eq!(compute_ap(&gts, &[], 0.5).ap, 0.0);
    }

    #[test]
    fn hand_staircase() {
        // Ranks: TP, TP, FP, TP over three gts.
        let gts = [b(0.0, 0.0, 1.0), b(20.0, 0.0, 1.0), b(40.0, 0.0, 1.0)];
        let dets = [b(0.0, 0.0, 0.9), b(20.0, 0.0, 0.8), b(60.0, 0.0, 0.5), b(40.0, 0.0, 0.2)];
        let c = compute_ap(&dets, &gts, 0.5);
        assert_eq!(c.recall, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_relative_eq!(c.precision[3], 0.75);
        assert_relative_eq!(c.ap, 2.0 / 3.0 + 0.75 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = [b(0.0, 0.0, 1.0)];
        let dets = [b(0.0, 0.0, 0.9), b(0.0, 0.0, 0.8)];
        let c = compute_ap(&dets, &gts, 0.5);
        assert_eq!(c.precision, vec![1.0, 0.5]);
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn ties_collapse_to_one_point() {
        let gts = [b(0.0, 0.0, 1.0), b(20.0, 0.0, 1.0)];
        let dets = [b(0.0, 0.0, 0.5), b(60.0, 0.0, 0.5), b(20.0, 0.0, 0.5)];
        let c = compute_ap(&dets, &gts, 0.5);
        assert_eq!(c.thresholds, vec![0.5]);
        assert_relative_eq!(c.ap, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn partition_examples() {
        let bands = DifficultyBands {
            easy_min: 40.0,
            medium_min: 20.0,
        };
        let gts = [
            BBox::new(0.0, 0.0, 10.0, 50.0),
            BBox::new(0.0, 0.0, 10.0, 25.0),
            BBox::new(0.0, 0.0, 10.0, 10.0),
        ];
        let p = partition_difficulty(&gts, &bands);
        assert_eq!((p.easy, p.medium, p.hard), (vec![0], vec![1], vec![2]));
        assert_eq!(partition_difficulty(&[], &bands), Partition::default());
        let tall = [BBox::new(0.0, 0.0, 5.0, 90.0), BBox::new(0.0, 0.0, 5.0, 41.0)];
        assert_eq!(partition_difficulty(&tall, &bands).easy, vec![0, 1]);
    }

    #[test]
    fn subsets_ignore_other_bands() {
        let bands = DifficultyBands {
            easy_min: 40.0,
            medium_min: 20.0,
        };
        let big = BBox::new(0.0, 0.0, 50.0, 50.0);
        let small = BBox::new(60.0, 60.0, 70.0, 70.0);
        let gts = vec![vec![big, small]];
        let dets = vec![vec![big.with_score(0.9)]];
        let res = evaluate_subsets(&dets, &gts, &bands, 0.5).unwrap();
        assert_eq!(res[0].ap, 1.0);
        assert_eq!(res[0].n_det, 1);
        assert_eq!(res[2].ap, 0.0);
        assert_eq!(res[2].n_gt, 1);
        assert_eq!(res[2].n_det, 0);
        assert_eq!(res[1].ap, 1.0);
    }

    #[test]
    fn conv_macs_formula() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 2, 8, 8]));
        let w = g.input(Tensor::zeros([4, 2, 3, 3]));
        g.conv2d(x, w, None, 1, 1);
        assert_eq!(macs_of_trace(&g.layer_trace(), &CostTable::default()).unwrap(), 4608);
    }

    #[test]
    fn unknown_kind_is_reported() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 2, 4, 4]));
        g.relu(x);
        let mut table = CostTable::default();
        table.rules.remove("relu");
        match macs_of_trace(&g.layer_trace(), &table) {
            Err(Error::UnsupportedLayer(k)) => assert_eq!(k, "relu"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_and_plot() {
        let gts = [b(0.0, 0.0, 1.0)];
        let c = compute_ap(&[b(0.0, 0.0, 0.7)], &gts, 0.5);
        assert_eq!(pr_csv(&c), "threshold,precision,recall\n0.7,1,1\n");
        let img = pr_plot(&c);
        assert_eq!(img.dimensions(), (PLOT_W, PLOT_H));
    }
}
