//! Anchor tiling, box geometry, anchor/ground-truth matching, box coding and NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest log size ratio accepted by [`decode_box`]; keeps `exp` finite.
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Axis-aligned box in pixel coordinates.
///
/// `score` is set for detections and `None` for annotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: Option<f64>,
    pub label: u32,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1,
            y1,
            x2,
            y2,
            score: None,
            label: 0,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn clip(mut self, width: f64, height: f64) -> Self {
        self.x1 = self.x1.clamp(0.0, width);
        self.x2 = self.x2.clamp(0.0, width);
        self.y1 = self.y1.clamp(0.0, height);
        self.y2 = self.y2.clamp(0.0, height);
        self
    }

    /// Mirror about the vertical axis of a `width`-wide image.
    pub fn hflip(mut self, width: f64) -> Self {
        let (x1, x2) = (width - self.x2, width - self.x1);
        self.x1 = x1;
        self.x2 = x2;
        self
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub stride: usize,
    pub base_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl AnchorLevel {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Square anchors in level order, row-major within each level.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Index of the first anchor of each level.
    pub fn level_offsets(&self) -> Vec<usize> {
        self.levels
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.len();
                Some(start)
            })
            .collect()
    }
}

/// Tiles one square anchor of side `sizes[k]` per cell of a `strides[k]` grid.
pub fn generate_anchors(
    image_h: usize,
    image_w: usize,
    sizes: &[usize],
    strides: &[usize],
) -> Result<AnchorSet> {
    if sizes.len() != strides.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} anchor sizes vs {} strides",
            sizes.len(),
            strides.len()
        )));
    }
    if let Some(&s) = strides.iter().find(|&&s| s == 0) {
        return Err(Error::InvalidGeometry(format!("stride {s}")));
    }
    if let Some(&max) = strides.iter().max() {
        if image_h % max != 0 || image_w % max != 0 || strides.iter().any(|s| max % s != 0) {
            return Err(Error::InvalidGeometry(format!(
                "image {image_h}x{image_w} not divisible by stride {max}"
            )));
        }
    }

    let mut levels = Vec::with_capacity(sizes.len());
    let mut boxes = Vec::new();
    for (&size, &stride) in sizes.iter().zip(strides) {
        let level = AnchorLevel {
            stride,
            base_size: size,
            grid_h: image_h / stride,
            grid_w: image_w / stride,
        };
        let s = stride as f64;
        for i in 0..level.grid_h {
            for j in 0..level.grid_w {
                let cx = s * (j as f64 + 0.5);
                let cy = s * (i as f64 + 0.5);
                boxes.push(BBox::from_center(cx, cy, size as f64, size as f64));
            }
        }
        levels.push(level);
    }
    Ok(AnchorSet { levels, boxes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorTag {
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorTag {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorTag::Positive(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<AnchorTag>,
    /// `(anchor index, encoded offsets)` for each positive anchor, ascending by index.
    pub regression_targets: Vec<(usize, [f64; 4])>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.regression_targets.len()
    }
}

/// Assigns each anchor to a ground truth, background, or "ignore".
///
/// An anchor is positive when its best IoU reaches `hi`; each ground truth
/// additionally claims its best still-unclaimed anchor so that no reachable
/// face goes without a positive.
pub fn match_anchors(anchors: &AnchorSet, gts: &[BBox], hi: f64, lo: f64) -> Result<MatchResult> {
    if lo > hi {
        return Err(Error::ThresholdOrder { lo, hi });
    }
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut per_gt: Vec<Vec<f64>> = Vec::with_capacity(gts.len());
    for (gi, gt) in gts.iter().enumerate() {
        let ious: Vec<f64> = anchors.boxes.iter().map(|a| iou(a, gt)).collect();
        for (ai, &v) in ious.iter().enumerate() {
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
        }
        per_gt.push(ious);
    }

    let mut assignment: Vec<AnchorTag> = (0..n)
        .map(|ai| {
            let v = best_iou[ai];
            if best_gt[ai] != usize::MAX && v >= hi {
                AnchorTag::Positive(best_gt[ai])
            } else if v < lo {
                AnchorTag::Negative
            } else {
                AnchorTag::Ignore
            }
        })
        .collect();

    let mut claimed = vec![false; n];
    for (gi, ious) in per_gt.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (ai, &v) in ious.iter().enumerate() {
            if v <= 0.0 || claimed[ai] {
                continue;
            }
            if best.is_none_or(|b| v > ious[b]) {
                best = Some(ai);
            }
        }
        if let Some(ai) = best {
            claimed[ai] = true;
            assignment[ai] = AnchorTag::Positive(gi);
        }
    }

    let regression_targets = assignment
        .iter()
        .enumerate()
        .filter_map(|(ai, tag)| match *tag {
            AnchorTag::Positive(gi) => Some((ai, anchors.boxes[ai], gts[gi])),
            _ => None,
        })
        .map(|(ai, anchor, gt)| encode_box(&anchor, &gt).map(|d| (ai, d)))
        .collect::<Result<Vec<_>>>()?;

    Ok(MatchResult {
        assignment,
        regression_targets,
    })
}

/// Center offsets normalized by anchor size, log size ratios.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::Encoding(format!("anchor has no area: {anchor:?}")));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::Encoding(format!("ground truth has no area: {gt:?}")));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ])
}

pub fn decode_box(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + deltas[0] * aw;
    let cy = acy + deltas[1] * ah;
    let w = aw * deltas[2].min(MAX_LOG_RATIO).exp();
    let h = ah * deltas[3].min(MAX_LOG_RATIO).exp();
    BBox {
        label: anchor.label,
        ..BBox::from_center(cx, cy, w, h)
    }
}

/// Greedy score-descending suppression; drops boxes whose IoU with a kept box exceeds `iou_thresh`.
pub fn nms(dets: &[BBox], iou_thresh: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (dets[a].score.unwrap_or(0.0), dets[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut keep: Vec<BBox> = Vec::new();
    for idx in order {
        let cand = &dets[idx];
        if keep.iter().all(|k| iou(k, cand) <= iou_thresh) {
            keep.push(*cand);
        }
    }
    keep
}
