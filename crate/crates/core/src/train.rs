//! AdamW training with a reduce-on-plateau schedule, checkpoints and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, AnchorTag};
use crate::data::{augment, AugmentConfig, Sample, TrainSample};
use crate::detector::{Detector, DetectorConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{focal_loss_with_grad, smooth_l1_with_grad, sr_l1_with_grad, total_loss, FocalParams, LossReport};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Environment variable naming the number of augmentation worker threads.
pub const WORKERS_ENV: &str = "SRFACE_NUM_WORKERS";

/// Relative decrease the monitored loss must achieve to count as progress.
const PLATEAU_REL_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_floor: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub phi: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub match_hi: f64,
    pub match_lo: f64,
    pub focal: FocalParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_floor: 1e-8,
            plateau_patience: 3,
            lr_factor: 0.1,
            batch_size: 4,
            epochs: 20,
            phi: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
            match_hi: 0.5,
            match_lo: 0.4,
            focal: FocalParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr0) {
            return bad(format!("train.lr_floor {} must be in (0, lr0 = {}]", self.lr_floor, self.lr0));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("train.lr_factor {} must be in (0, 1)", self.lr_factor));
        }
        if self.plateau_patience == 0 {
            return bad("train.plateau_patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return bad(format!("train.phi {} must be a finite value >= 0", self.phi));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.eps <= 0.0 {
            return bad("train.weight_decay, grad_clip must be >= 0 and eps > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("train.beta1/beta2 must be in [0, 1)".into());
        }
        if self.match_lo > self.match_hi {
            return bad(format!("train.match_lo {} > match_hi {}", self.match_lo, self.match_hi));
        }
        self.focal.validate().map_err(|e| Error::Config(format!("train.focal: {e}")))
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
    pub lr: f64,
    pub wall_time: f64,
}

/// Stall-counting state of the learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub best: Option<f64>,
    pub stall: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            lr: cfg.lr0,
            best: None,
            stall: 0,
        }
    }

    /// Feeds one epoch's monitored loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64, cfg: &TrainConfig) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - PLATEAU_REL_THRESHOLD * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= cfg.plateau_patience {
                self.lr = reduce(self.lr, cfg);
                self.stall = 0;
            }
        }
        self.lr
    }
}

fn reduce(lr: f64, cfg: &TrainConfig) -> f64 {
    let next = lr * cfg.lr_factor;
    // Within rounding of the floor counts as the floor.
    if next <= cfg.lr_floor * (1.0 + 1e-9) {
        cfg.lr_floor
    } else {
        next
    }
}

/// Learning rate after the last entry of `history`, replaying the stall counter
/// over the whole history. Empty history leaves the rate unchanged.
pub fn lr_schedule_step(history: &[f64], current_lr: f64, cfg: &TrainConfig) -> f64 {
    let mut sched = PlateauScheduler {
        lr: current_lr,
        best: None,
        stall: 0,
    };
    let Some((last, earlier)) = history.split_last() else {
        return current_lr;
    };
    for &loss in earlier {
        sched.step(loss, cfg);
    }
    // Reductions triggered earlier in the history already happened; only the
    // decision at the final entry applies to `current_lr`.
    sched.lr = current_lr;
    sched.step(*last, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One decoupled-weight-decay Adam update. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_ref().map(Tensor::data);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * (cfg.weight_decay * p[k] + mhat / (vhat.sqrt() + cfg.eps));
            }
        }
    }
}

/// Loss values and parameter gradients for one batch, without touching the weights.
pub fn batch_gradients(
    model: &Detector,
    batch: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidValue("empty training batch".into()));
    }
    let images = Tensor::stack(&batch.iter().map(|s| s.input_image.clone()).collect::<Vec<_>>())?;
    let size = model.input_size();
    if images.h() != size || images.w() != size {
        return Err(Error::ShapeMismatch(format!(
            "batch images are {}x{}, model expects {size}x{size}",
            images.h(),
            images.w()
        )));
    }
    let n = batch.len();
    let mut g = Graph::new();
    let x = g.input(images);
    let vars = model.forward_vars(&mut g, x, Mode::Train)?;

    let anchors = model.anchors();
    let level_sizes: Vec<usize> = vars.cls.iter().map(|&v| g.value(v).sample_len()).collect();

    let mut probs_all = Vec::with_capacity(n * anchors.len());
    let mut tags_all: Vec<AnchorTag> = Vec::with_capacity(n * anchors.len());
    let mut reg_pred = Vec::new();
    let mut reg_target = Vec::new();
    let mut reg_index = Vec::new();
    for (s, sample) in batch.iter().enumerate() {
        let m = match_anchors(anchors, &sample.gt_boxes, cfg.match_hi, cfg.match_lo)?;
        for &v in &vars.cls {
            probs_all.extend_from_slice(g.value(v).sample(s));
        }
        tags_all.extend(m.assignment);
        for (ai, target) in m.regression_targets {
            let (level, pos) = locate(&level_sizes, ai);
            let map = g.value(vars.reg[level]);
            let hw = map.h() * map.w();
            let d = map.sample(s);
            reg_pred.push([d[pos], d[hw + pos], d[2 * hw + pos], d[3 * hw + pos]]);
            reg_target.push(target);
            reg_index.push((s, level, pos));
        }
    }

    let (l_focal, focal_grad) = focal_loss_with_grad(&probs_all, &tags_all, &cfg.focal)?;
    let (l_smooth, smooth_grad) = smooth_l1_with_grad(&reg_pred, &reg_target)?;
    let (l_sr, sr_grad) = match vars.sr {
        Some(v) => {
            let target = Tensor::stack(&batch.iter().map(|s| s.sr_target.clone()).collect::<Vec<_>>())?;
            let (l, grad) = sr_l1_with_grad(g.value(v), &target)?;
            (l, Some((v, grad)))
        }
        None => (0.0, None),
    };
    let report = total_loss(l_focal, l_smooth, l_sr, cfg.phi)?;

    // Scatter per-anchor gradients back onto the head output maps.
    let mut seeds = Vec::new();
    let per_image = anchors.len();
    for (level, &v) in vars.cls.iter().enumerate() {
        let mut t = Tensor::zeros(g.value(v).shape());
        let offset: usize = level_sizes[..level].iter().sum();
        for s in 0..n {
            let base = s * per_image + offset;
            t.sample_mut(s).copy_from_slice(&focal_grad[base..base + level_sizes[level]]);
        }
        seeds.push((v, t));
    }
    let mut reg_seeds: Vec<Tensor> = vars.reg.iter().map(|&v| Tensor::zeros(g.value(v).shape())).collect();
    for (&(s, level, pos), grad) in reg_index.iter().zip(&smooth_grad) {
        let t = &mut reg_seeds[level];
        let hw = t.h() * t.w();
        let d = t.sample_mut(s);
        for k in 0..4 {
            d[k * hw + pos] += grad[k];
        }
    }
    seeds.extend(vars.reg.iter().copied().zip(reg_seeds));
    if let Some((v, mut grad)) = sr_grad {
        if cfg.phi > 0.0 {
            grad.scale(cfg.phi);
            seeds.push((v, grad));
        }
    }

    let grads = g.backward(seeds)?;
    let mut out: Vec<Option<Tensor>> = vec![None; model.params().len()];
    for (id, t) in grads.params() {
        out[id.index()] = Some(t.clone());
    }
    Ok((report, out))
}

/// Level and in-level position of anchor `ai` given per-level anchor counts.
fn locate(level_sizes: &[usize], mut ai: usize) -> (usize, usize) {
    for (level, &len) in level_sizes.iter().enumerate() {
        if ai < len {
            return (level, ai);
        }
        ai -= len;
    }
    panic!("anchor index beyond the last level");
}

pub fn global_grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Forward, losses, backward and one AdamW update. A non-finite loss or
/// gradient aborts before any weight changes.
pub fn train_step(
    model: &mut Detector,
    opt: &mut AdamW,
    batch: &[TrainSample],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (report, mut grads) = batch_gradients(model, batch, cfg)?;
    let norm = global_grad_norm(&grads);
    if !norm.is_finite() {
        return Err(Error::NaN(format!("gradient norm {norm}")));
    }
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let s = cfg.grad_clip / norm;
        for g in grads.iter_mut().flatten() {
            g.scale(s);
        }
    }
    let before = opt.clone();
    let saved = model.params().clone();
    opt.step(model.params_mut(), &grads, lr, cfg);
    if !model.params().is_finite() {
        *model.params_mut() = saved;
        *opt = before;
        return Err(Error::NaN("parameters after update".into()));
    }
    Ok(report)
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Epochs completed.
    pub epoch: usize,
    pub scheduler: PlateauScheduler,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: not valid JSON: {e}", path.display())))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: version {v}, expected {CHECKPOINT_VERSION}",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{}: missing version", path.display()))),
        }
        let ckpt: Checkpoint = serde_json::from_value(value)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.optimizer.m.len() != ckpt.params.len() || ckpt.optimizer.v.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "{}: optimizer state does not match parameter count",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    pub fn detector(&self) -> Result<Detector> {
        Detector::from_parts(&self.model, self.params.clone())
    }
}

/// Augmentation worker count from the environment, at least 1.
pub fn num_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Independent stream per (epoch, sample), so worker count never changes results.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a065_0000_0000);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Augments `indices` of `data` for `epoch`, spread over `workers` threads.
pub fn assemble_batch(
    data: &[Sample],
    indices: &[usize],
    epoch: usize,
    aug: &AugmentConfig,
    workers: usize,
) -> Vec<TrainSample> {
    let make = |&i: &usize| {
        let mut rng = sample_rng(aug.seed, epoch, i);
        augment(&TrainSample::from_clean(&data[i]), aug, &mut rng)
    };
    if workers <= 1 || indices.len() <= 1 {
        return indices.iter().map(make).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(make).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("augmentation worker panicked"))
            .collect()
    })
}

fn mean_report(reports: &[LossReport], phi: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        l_focal: sum(|r| r.l_focal),
        l_smooth: sum(|r| r.l_smooth),
        l_sr: sum(|r| r.l_sr),
        phi,
        l_ef: sum(|r| r.l_ef),
    }
}

/// Where and whether `fit` writes checkpoints and the epoch log.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: Detector,
    pub records: Vec<EpochRecord>,
    pub last: Checkpoint,
}

/// Trains `model` on `data` for `cfg.epochs` epochs, or continues from `resume`.
pub fn fit(
    model: Detector,
    data: &[Sample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    out: &FitOutput,
    resume: Option<Checkpoint>,
) -> Result<FitResult> {
    cfg.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidValue("training set is empty".into()));
    }
    let (mut model, mut opt, mut sched, mut history, start) = match resume {
        Some(ck) => {
            // Only the epoch budget may change between the original run and a resume.
            let same_train = TrainConfig {
                epochs: cfg.epochs,
                ..ck.train.clone()
            } == *cfg;
            if !same_train || ck.augment != *aug {
                return Err(Error::Checkpoint("resume config differs from checkpoint".into()));
            }
            let m = ck.detector()?;
            (m, ck.optimizer, ck.scheduler, ck.history, ck.epoch)
        }
        None => {
            let opt = AdamW::new(model.params());
            (model, opt, PlateauScheduler::new(cfg), Vec::new(), 0)
        }
    };
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let snapshot = |model: &Detector, opt: &AdamW, sched: &PlateauScheduler, history: &[EpochRecord], epoch| {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            train: cfg.clone(),
            augment: aug.clone(),
            params: model.params().clone(),
            optimizer: opt.clone(),
            epoch,
            scheduler: sched.clone(),
            history: history.to_vec(),
        }
    };

    let mut last = snapshot(&model, &opt, &sched, &history, start);
    if let Some(dir) = &out.dir {
        last.save(&dir.join(LAST_CHECKPOINT))?;
    }
    let mut best_loss = history.iter().map(|r| r.loss.l_ef).fold(f64::INFINITY, f64::min);
    let workers = num_workers();

    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = sched.lr;
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut reports = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
        for idx in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(data, idx, epoch, aug, workers);
            reports.push(train_step(&mut model, &mut opt, &batch, lr, cfg)?);
        }
        let loss = mean_report(&reports, cfg.phi);
        sched.step(loss.l_ef, cfg);
        let record = EpochRecord {
            epoch,
            loss,
            lr,
            wall_time: t0.elapsed().as_secs_f64(),
        };
        history.push(record.clone());
        last = snapshot(&model, &opt, &sched, &history, epoch + 1);
        if let Some(dir) = &out.dir {
            append_log(&dir.join(TRAIN_LOG), &record)?;
            last.save(&dir.join(LAST_CHECKPOINT))?;
            if record.loss.l_ef < best_loss {
                last.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        best_loss = best_loss.min(record.loss.l_ef);
    }

    Ok(FitResult {
        model,
        records: history,
        last,
    })
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_relative_eq!(lr_schedule_step(&[1.0; 4], 1e-4, &cfg), 1e-5, max_relative = 1e-12);
        assert_eq!(lr_schedule_step(&[1.0; 3], 1e-4, &cfg), 1e-4);
        assert_eq!(lr_schedule_step(&[4.0, 3.0, 2.0, 1.0, 0.5], 1e-4, &cfg), 1e-4);
        assert_eq!(lr_schedule_step(&[1.0; 4], 1e-8, &cfg), 1e-8);
        // The stall counter resets after a reduction.
        assert_eq!(lr_schedule_step(&[1.0; 5], 1e-5, &cfg), 1e-5);
        assert_eq!(lr_schedule_step(&[], 3e-4, &cfg), 3e-4);
    }

    #[test]
    fn tiny_improvement_counts_as_stall() {
        let cfg = TrainConfig::default();
        let hist = [1.0, 1.0 - 1e-6, 1.0 - 2e-6, 1.0 - 3e-6];
        assert_relative_eq!(lr_schedule_step(&hist, 1e-4, &cfg), 1e-5, max_relative = 1e-12);
    }

    #[test]
    fn validate_rejects() {
        let mut c = TrainConfig {
            lr_floor: 1e-3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig {
            lr_factor: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = TrainConfig {
            plateau_patience: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn locate_levels() {
        assert_eq!(locate(&[4, 2, 1], 0), (0, 0));
        assert_eq!(locate(&[4, 2, 1], 5), (1, 1));
        assert_eq!(locate(&[4, 2, 1], 6), (2, 0));
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let mut store = ParamStore::new();
        let id = store.add("w", crate::params::ParamGroup::Detection, Tensor::full([1, 1, 1, 2], 1.0));
        let mut opt = AdamW::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = Tensor::from_vec([1, 1, 1, 2], vec![0.5, -2.0]).unwrap();
        opt.step(&mut store, &[Some(g)], 0.1, &cfg);
        let p = store.get(id).data();
        assert_relative_eq!(p[0], 0.9, epsilon = 1e-6);
        assert_relative_eq!(p[1], 1.1, epsilon = 1e-6);
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = epoch_order(3, 0, 10);
        assert_eq!(a, epoch_order(3, 0, 10));
        assert_ne!(a, epoch_order(3, 1, 10));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }
}
