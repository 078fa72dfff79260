//! Toy backbone, feature pyramid and shared heads, with the SR branch hanging off OP2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, generate_anchors, nms, AnchorSet, BBox};
use crate::error::{Error, Result};
use crate::graph::{Graph, LayerCall, Var};
use crate::params::{Conv, ConvSpec, ParamGroup, ParamStore};
use crate::sr_branch::{FeatureMap, SrBranch, SrBranchConfig, OP2_STRIDE};
use crate::tensor::Tensor;

/// Prior foreground probability used to initialize the classification bias.
const CLS_PRIOR: f64 = 0.01;
/// Candidates kept per image before NMS.
const PRE_NMS_TOP_K: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_size: usize,
    pub fpn_channels: usize,
    pub image_channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            levels: 6,
            base_channels: 16,
            input_size: 128,
            fpn_channels: 16,
            image_channels: 3,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid.levels must be >= 1".into()));
        }
        let unit = 1usize << (self.levels + 1);
        if self.input_size == 0 || self.input_size % unit != 0 {
            return Err(Error::Config(format!(
                "pyramid.input_size {} must be a positive multiple of 2^(levels+1) = {unit}",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.fpn_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("pyramid channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Strides 4, 8, 16, … one per level; level 0 is OP2.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|k| OP2_STRIDE << k).collect()
    }

    /// Anchor side per level: 16, 32, 64, … (four times the stride).
    pub fn anchor_sizes(&self) -> Vec<usize> {
        self.strides().iter().map(|s| 4 * s).collect()
    }

    /// Backbone width per level. Widths grow fastest at the coarse levels,
    /// where spatial extent is small, as in mobile backbones.
    pub fn backbone_widths(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|k| {
                let mult = if k < 4 { 1 << k } else { 8 + 4 * (k - 3) };
                self.base_channels * mult
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub pyramid: PyramidConfig,
    pub sr: SrBranchConfig,
    /// Build the SR branch at all. A detector without it is the plain baseline.
    pub sr_branch: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            pyramid: PyramidConfig::default(),
            sr: SrBranchConfig::default(),
            sr_branch: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.sr.validate()?;
        if self.sr.channels != self.pyramid.fpn_channels {
            return Err(Error::Config(format!(
                "sr.channels ({}) must equal pyramid.fpn_channels ({})",
                self.sr.channels, self.pyramid.fpn_channels
            )));
        }
        if self.sr.image_channels != self.pyramid.image_channels {
            return Err(Error::Config(
                "sr.image_channels must equal pyramid.image_channels".into(),
            ));
        }
        if self.sr.upscale != OP2_STRIDE {
            return Err(Error::Config(format!(
                "sr.upscale must be {OP2_STRIDE} to reconstruct at input resolution"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-level feature maps, finest (OP2) first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Tensor)>,
}

impl FeaturePyramid {
    pub fn op2(&self) -> &Tensor {
        &self.levels[0].1
    }
}

#[derive(Clone, Debug)]
pub struct DetectionOutputs {
    /// Foreground probability per level, N×1×h×w.
    pub cls_maps: Vec<Tensor>,
    /// Box offsets per level, N×4×h×w.
    pub reg_maps: Vec<Tensor>,
    /// Present only in training mode with the branch attached.
    pub sr_image: Option<Tensor>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    pub pyramid: Vec<FeatureMap>,
    pub cls: Vec<Var>,
    pub reg: Vec<Var>,
    pub sr: Option<Var>,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Vec<Conv>,
    expand: Conv,
    project: Conv,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    laterals: Vec<Conv>,
    smooth: Vec<Conv>,
    cls_head: [Conv; 2],
    reg_head: [Conv; 2],
    branch: Option<SrBranch>,
    anchors: AnchorSet,
}

impl Detector {
    /// Builds a detector. Detection-path weights come from one seeded stream and
    /// branch weights from another, so toggling the branch leaves the former unchanged.
    pub fn new(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let p = &cfg.pyramid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut store = ParamStore::new();
        let det = ParamGroup::Detection;
        let widths = p.backbone_widths();

        let mut stages = Vec::with_capacity(p.levels);
        let mut prev = p.image_channels;
        for (k, &w) in widths.iter().enumerate() {
            let down = if k == 0 {
                let stem_w = (w / 2).max(1);
                vec![
                    Conv::new(&mut store, "stem.0", det, ConvSpec::new(prev, stem_w, 3).stride(2), &mut rng),
                    Conv::new(&mut store, "stem.1", det, ConvSpec::new(stem_w, w, 3).stride(2), &mut rng),
                ]
            } else {
                vec![Conv::new(
                    &mut store,
                    &format!("stage{k}.down"),
                    det,
                    ConvSpec::new(prev, w, 3).stride(2),
                    &mut rng,
                )]
            };
            let expand = Conv::new(&mut store, &format!("stage{k}.expand"), det, ConvSpec::new(w, 2 * w, 3), &mut rng);
            let project =
                Conv::new(&mut store, &format!("stage{k}.project"), det, ConvSpec::new(2 * w, w, 1), &mut rng);
            stages.push(Stage { down, expand, project });
            prev = w;
        }

        let f = p.fpn_channels;
        let laterals = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| Conv::new(&mut store, &format!("fpn.lateral{k}"), det, ConvSpec::new(w, f, 1), &mut rng))
            .collect();
        let smooth = (0..p.levels)
            .map(|k| Conv::new(&mut store, &format!("fpn.smooth{k}"), det, ConvSpec::new(f, f, 3), &mut rng))
            .collect();
        let cls_head = [
            Conv::new(&mut store, "head.cls0", det, ConvSpec::new(f, f, 3), &mut rng),
            Conv::new(&mut store, "head.cls1", det, ConvSpec::new(f, 1, 3), &mut rng),
        ];
        cls_head[1].set_bias(&mut store, -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        let reg_head = [
            Conv::new(&mut store, "head.reg0", det, ConvSpec::new(f, f, 3), &mut rng),
            Conv::new(&mut store, "head.reg1", det, ConvSpec::new(f, 4, 3), &mut rng),
        ];
        // Small regression init keeps early decoded boxes near their anchors.
        for v in store.get_mut(reg_head[1].weight).data_mut() {
            *v *= 0.1;
        }

        let branch = if cfg.sr_branch {
            let mut branch_rng = ChaCha8Rng::seed_from_u64(seed);
            branch_rng.set_stream(1);
            Some(SrBranch::new(&mut store, &cfg.sr, &mut branch_rng)?)
        } else {
            None
        };

        let anchors = generate_anchors(p.input_size, p.input_size, &p.anchor_sizes(), &p.strides())?;
        Ok(Detector {
            cfg: cfg.clone(),
            store,
            stages,
            laterals,
            smooth,
            cls_head,
            reg_head,
            branch,
            anchors,
        })
    }

    /// Rebuilds a detector around stored weights, checking names and shapes.
    pub fn from_parts(cfg: &DetectorConfig, store: ParamStore) -> Result<Self> {
        let mut det = Detector::new(cfg, 0)?;
        if det.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                det.store.len(),
                store.len()
            )));
        }
        for ((_, want), (_, got)) in det.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.group != got.group {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        det.store = store;
        Ok(det)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn has_branch(&self) -> bool {
        self.branch.is_some()
    }

    pub fn branch(&self) -> Option<&SrBranch> {
        self.branch.as_ref()
    }

    /// A copy with the SR branch and its weights removed.
    pub fn without_branch(&self) -> Detector {
        let mut cfg = self.cfg.clone();
        cfg.sr_branch = false;
        let store = ParamStore::from_params(
            self.store
                .iter()
                .filter(|(_, p)| p.group == ParamGroup::Detection)
                .map(|(_, p)| p.clone())
                .collect(),
        );
        Detector::from_parts(&cfg, store).expect("detection parameters precede branch parameters")
    }

    pub fn input_size(&self) -> usize {
        self.cfg.pyramid.input_size
    }

    fn check_image(&self, image: &Tensor, size: Option<usize>) -> Result<()> {
        let s = size.unwrap_or(self.cfg.pyramid.input_size);
        let [_, c, h, w] = image.shape();
        if c != self.cfg.pyramid.image_channels || h != s || w != s {
            return Err(Error::ShapeMismatch(format!(
                "expected N×{}×{s}×{s} image, got {:?}",
                self.cfg.pyramid.image_channels,
                image.shape()
            )));
        }
        Ok(())
    }

    fn backbone(&self, g: &mut Graph, image: Var) -> Vec<FeatureMap> {
        let store = &self.store;
        let mut h = image;
        let mut feats = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for conv in &stage.down {
                h = conv.forward(g, store, h);
                h = g.silu(h);
            }
            let e = stage.expand.forward(g, store, h);
            let e = g.silu(e);
            let e = stage.project.forward(g, store, e);
            h = g.add(h, e);
            feats.push(h);
        }

        // Top-down pathway.
        let levels = feats.len();
        let mut merged: Vec<Option<Var>> = vec![None; levels];
        let mut above: Option<Var> = None;
        for k in (0..levels).rev() {
            let lat = self.laterals[k].forward(g, store, feats[k]);
            let m = match above {
                Some(a) => {
                    let up = g.upsample_nearest(a, 2);
                    g.add(lat, up)
                }
                None => lat,
            };
            merged[k] = Some(m);
            above = Some(m);
        }
        merged
            .into_iter()
            .enumerate()
            .map(|(k, m)| FeatureMap {
                var: self.smooth[k].forward(g, store, m.expect("every level merged")),
                stride: OP2_STRIDE << k,
            })
            .collect()
    }

    fn heads(&self, g: &mut Graph, pyramid: &[FeatureMap]) -> (Vec<Var>, Vec<Var>) {
        let store = &self.store;
        let mut cls = Vec::with_capacity(pyramid.len());
        let mut reg = Vec::with_capacity(pyramid.len());
        for fm in pyramid {
            let c = self.cls_head[0].forward(g, store, fm.var);
            let c = g.relu(c);
            let c = self.cls_head[1].forward(g, store, c);
            cls.push(g.sigmoid(c));
            let r = self.reg_head[0].forward(g, store, fm.var);
            let r = g.relu(r);
            reg.push(self.reg_head[1].forward(g, store, r));
        }
        (cls, reg)
    }

    /// Builds the forward pass on an existing graph. The image may be any
    /// size divisible by the coarsest stride.
    pub fn forward_vars(&self, g: &mut Graph, image: Var, mode: Mode) -> Result<ForwardVars> {
        let pyramid = self.backbone(g, image);
        let (cls, reg) = self.heads(g, &pyramid);
        let sr = match (mode, &self.branch) {
            (Mode::Train, Some(branch)) => Some(branch.forward(g, &self.store, pyramid[0])?),
            _ => None,
        };
        Ok(ForwardVars { pyramid, cls, reg, sr })
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_image(image, None)?;
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let levels = self
            .backbone(&mut g, x)
            .into_iter()
            .map(|fm| (fm.stride, g.value(fm.var).clone()))
            .collect();
        Ok(FeaturePyramid { levels })
    }

    pub fn heads_forward(&self, pyramid: &FeaturePyramid) -> DetectionOutputs {
        let mut g = Graph::new();
        let maps: Vec<FeatureMap> = pyramid
            .levels
            .iter()
            .map(|(stride, t)| FeatureMap {
                var: g.input(t.clone()),
                stride: *stride,
            })
            .collect();
        let (cls, reg) = self.heads(&mut g, &maps);
        DetectionOutputs {
            cls_maps: cls.iter().map(|&v| g.value(v).clone()).collect(),
            reg_maps: reg.iter().map(|&v| g.value(v).clone()).collect(),
            sr_image: None,
        }
    }

    pub fn model_forward(&self, image: &Tensor, mode: Mode) -> Result<DetectionOutputs> {
        self.check_image(image, None)?;
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let vars = self.forward_vars(&mut g, x, mode)?;
        Ok(DetectionOutputs {
            cls_maps: vars.cls.iter().map(|&v| g.value(v).clone()).collect(),
            reg_maps: vars.reg.iter().map(|&v| g.value(v).clone()).collect(),
            sr_image: vars.sr.map(|v| g.value(v).clone()),
        })
    }

    /// Square input sizes the pyramid can take: positive multiples of the coarsest stride.
    pub fn check_size(&self, size: usize) -> Result<()> {
        let coarsest = *self.cfg.pyramid.strides().last().expect("levels >= 1");
        if size == 0 || size % coarsest != 0 {
            return Err(Error::InvalidGeometry(format!(
                "input size {size} must be a multiple of {coarsest}"
            )));
        }
        Ok(())
    }

    /// Layers executed by one forward of a single `size`×`size` image.
    pub fn layer_trace(&self, mode: Mode, size: usize) -> Result<Vec<LayerCall>> {
        self.check_size(size)?;
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, self.cfg.pyramid.image_channels, size, size]));
        self.forward_vars(&mut g, x, mode)?;
        Ok(g.layer_trace())
    }

    /// Decoded, thresholded, NMS-filtered boxes for each image of the batch.
    pub fn detect(&self, images: &Tensor, score_thresh: f64, nms_thresh: f64) -> Result<Vec<Vec<BBox>>> {
        let out = self.model_forward(images, Mode::Infer)?;
        Ok((0..images.n())
            .map(|n| self.postprocess(&out, n, score_thresh, nms_thresh))
            .collect())
    }

    pub fn postprocess(&self, out: &DetectionOutputs, n: usize, score_thresh: f64, nms_thresh: f64) -> Vec<BBox> {
        let probs = gather_cls(out, n);
        let deltas = gather_reg(out, n);
        let size = self.cfg.pyramid.input_size as f64;
        let mut cands: Vec<(usize, f64)> = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > score_thresh)
            .map(|(i, &p)| (i, p))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(PRE_NMS_TOP_K);
        let boxes: Vec<BBox> = cands
            .into_iter()
            .map(|(i, p)| decode_box(&self.anchors.boxes[i], deltas[i]).clip(size, size).with_score(p))
            .filter(|b| b.area() > 0.0)
            .collect();
        nms(&boxes, nms_thresh)
    }
}

/// Per-anchor probabilities of sample `n`, in anchor order.
pub fn gather_cls(out: &DetectionOutputs, n: usize) -> Vec<f64> {
    out.cls_maps.iter().flat_map(|m| m.sample(n).iter().copied()).collect()
}

/// Per-anchor box offsets of sample `n`, in anchor order.
pub fn gather_reg(out: &DetectionOutputs, n: usize) -> Vec<[f64; 4]> {
    let mut deltas = Vec::new();
    for m in &out.reg_maps {
        let hw = m.h() * m.w();
        let s = m.sample(n);
        for i in 0..hw {
            deltas.push([s[i], s[hw + i], s[2 * hw + i], s[3 * hw + i]]);
        }
    }
    deltas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            pyramid: PyramidConfig {
                levels: 4,
                input_size: 64,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn image(size: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, size, size], |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn default_config_has_six_levels() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.pyramid.levels, 6);
        assert_eq!(cfg.pyramid.anchor_sizes(), vec![16, 32, 64, 128, 256, 512]);
        assert_eq!(cfg.pyramid.strides(), vec![4, 8, 16, 32, 64, 128]);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_input_size_rejected() {
        let mut cfg = DetectorConfig::default();
        cfg.pyramid.input_size = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn op2_is_a_quarter_of_the_input() {
        let det = Detector::new(&small_cfg(), 1).unwrap();
        let pyr = det.backbone_forward(&image(64, 1)).unwrap();
        assert_eq!(pyr.levels[0].0, 4);
        assert_eq!(pyr.op2().shape(), [1, 16, 16, 16]);
        let strides: Vec<_> = pyr.levels.iter().map(|l| l.0).collect();
        assert_eq!(strides, vec![4, 8, 16, 32]);
    }

    #[test]
    fn backbone_rejects_wrong_size() {
        let det = Detector::new(&small_cfg(), 1).unwrap();
        assert!(det.backbone_forward(&image(32, 1)).is_err());
    }

    #[test]
    fn heads_shapes_and_ranges() {
        let det = Detector::new(&small_cfg(), 2).unwrap();
        let pyr = det.backbone_forward(&image(64, 2)).unwrap();
        let out = det.heads_forward(&pyr);
        for (k, (c, r)) in out.cls_maps.iter().zip(&out.reg_maps).enumerate() {
            let side = 64 / (4 << k);
            assert_eq!(c.shape(), [1, 1, side, side]);
            assert_eq!(r.shape(), [1, 4, side, side]);
            assert!(c.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn train_mode_adds_reconstruction_only() {
        let det = Detector::new(&small_cfg(), 3).unwrap();
        let img = image(64, 3);
        let train = det.model_forward(&img, Mode::Train).unwrap();
        let infer = det.model_forward(&img, Mode::Infer).unwrap();
        assert_eq!(train.sr_image.as_ref().unwrap().shape(), [1, 3, 64, 64]);
        assert!(infer.sr_image.is_none());
        assert_eq!(train.cls_maps, infer.cls_maps);
        assert_eq!(train.reg_maps, infer.reg_maps);
    }

    #[test]
    fn forward_is_deterministic() {
        let img = image(64, 4);
        let a = Detector::new(&small_cfg(), 9).unwrap().model_forward(&img, Mode::Train).unwrap();
        let b = Detector::new(&small_cfg(), 9).unwrap().model_forward(&img, Mode::Train).unwrap();
        assert_eq!(a.cls_maps, b.cls_maps);
        assert_eq!(a.sr_image, b.sr_image);
    }

    #[test]
    fn branch_does_not_perturb_detection_weights() {
        let with = Detector::new(&small_cfg(), 5).unwrap();
        let mut cfg = small_cfg();
        cfg.sr_branch = false;
        let without = Detector::new(&cfg, 5).unwrap();
        let stripped = with.without_branch();
        assert_eq!(stripped.params(), without.params());
        assert_eq!(
            with.params().scalar_count(Some(ParamGroup::Detection)),
            without.params().scalar_count(None)
        );
    }

    #[test]
    fn detect_with_unreachable_threshold_is_empty() {
        let det = Detector::new(&small_cfg(), 6).unwrap();
        let boxes = det.detect(&image(64, 6), 1.0, 0.4).unwrap();
        assert!(boxes[0].is_empty());
    }
}
