//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use srdet::anchors::{iou, AnchorTag, BBox};

/// Classic "take the best, delete its neighbours, repeat" suppression.
pub fn nms_oracle(dets: &[BBox], thr: f64) -> Vec<BBox> {
    let mut pool: Vec<(usize, BBox)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for k in 1..pool.len() {
            let (s, sb) = (pool[k].1.score.unwrap(), pool[best].1.score.unwrap());
            if s > sb || (s == sb && pool[k].0 < pool[best].0) {
                best = k;
            }
        }
        let (_, top) = pool.remove(best);
        pool.retain(|(_, b)| iou(&top, b) <= thr);
        kept.push(top);
    }
    kept
}

fn greedy_tp(dets: &[(usize, BBox)], gts: &[BBox], thr: f64) -> usize {
    let mut order: Vec<&(usize, BBox)> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.1.score
            .unwrap()
            .partial_cmp(&a.1.score.unwrap())
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for (_, d) in order {
        let mut pick: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(d, gt);
            if !used[g] && v >= thr && pick.map_or(true, |p| v > iou(d, &gts[p])) {
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            tp += 1;
        }
    }
    tp
}

/// AP by sweeping every distinct score threshold, re-matching from scratch each
/// time, then integrating the upper envelope of precision over recall.
pub fn ap_oracle(dets: &[BBox], gts: &[BBox], thr: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut scores: Vec<f64> = dets.iter().map(|d| d.score.unwrap()).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    let mut points = Vec::new();
    for t in scores {
        let subset: Vec<(usize, BBox)> = dets
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, d)| d.score.unwrap() >= t)
            .collect();
        let tp = greedy_tp(&subset, gts, thr);
        points.push((tp as f64 / gts.len() as f64, tp as f64 / subset.len() as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points
            .iter()
            .filter(|q| q.0 >= r)
            .map(|q| q.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

pub fn focal_oracle(probs: &[f64], tags: &[AnchorTag], alpha: f64, gamma: f64) -> f64 {
    let mut sum = 0.0;
    let mut pos = 0;
    for (p, t) in probs.iter().zip(tags) {
        let p = p.max(1e-6).min(1.0 - 1e-6);
        match t {
            AnchorTag::Positive(_) => {
                pos += 1;
                sum += -alpha * (1.0 - p).powf(gamma) * p.ln();
            }
            AnchorTag::Negative => sum += -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln(),
            AnchorTag::Ignore => {}
        }
    }
    sum / (pos.max(1) as f64)
}

pub fn smooth_l1_oracle(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for k in 0..4 {
            let d = (p[k] - t[k]).abs();
            sum += if d < 1.0 { d * d / 2.0 } else { d - 0.5 };
        }
    }
    sum / (pred.len().max(1) as f64)
}

pub fn l1_mean_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor for tiny gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Prints one acceptance verdict line and returns whether it passed.
pub fn verdict(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {id} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

pub mod grad {
    //! Finite-difference gradient checks, each returning the worst relative error.
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{central_diff, rel_err};
    use srdet::anchors::AnchorTag;
    use srdet::graph::{Graph, Var};
    use srdet::losses::{focal_loss, focal_loss_with_grad, smooth_l1, smooth_l1_with_grad, sr_l1, sr_l1_with_grad, FocalParams};
    use srdet::params::ParamStore;
    use srdet::sr_branch::{FeatureMap, SrBranch, SrBranchConfig};
    use srdet::tensor::Tensor;

    pub const H: f64 = 1e-6;
    // Attention weights see gradients near 1e-7, where a 1e-6 step is all roundoff.
    pub const PARAM_H: f64 = 1e-4;
    pub const TOL: f64 = 1e-3;

    pub fn focal() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = FocalParams::default();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let n = 12;
            let mut probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let tags: Vec<AnchorTag> = (0..n)
                .map(|i| match rng.random_range(0..3) {
                    0 => AnchorTag::Positive(i),
                    1 => AnchorTag::Negative,
                    _ => AnchorTag::Ignore,
                })
                .collect();
            let (_, grad) = focal_loss_with_grad(&probs, &tags, &params).unwrap();
            for i in 0..n {
                let fd = central_diff(&mut probs, i, H, |p| focal_loss(p, &tags, &params).unwrap());
                worst = worst.max(rel_err(grad[i], fd));
            }
        }
        worst
    }

    /// Inputs stay 0.01 away from the |x| = 1 kink.
    pub fn smooth_l1_check() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = 6;
        let target: Vec<[f64; 4]> = (0..rows).map(|_| [0.0; 4]).collect();
        let mut flat: Vec<f64> = (0..rows * 4)
            .map(|_| loop {
                let v: f64 = rng.random_range(-3.0..3.0);
                if (v.abs() - 1.0).abs() > 0.01 {
                    break v;
                }
            })
            .collect();
        let rowify = |f: &[f64]| f.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect::<Vec<_>>();
        let (_, grad) = smooth_l1_with_grad(&rowify(&flat), &target).unwrap();
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let fd = central_diff(&mut flat, i, H, |f| smooth_l1(&rowify(f), &target).unwrap());
            worst = worst.max(rel_err(grad[i / 4][i % 4], fd));
        }
        worst
    }

    pub fn sr_l1_check() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [2, 3, 4, 4];
        let target = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let mut recon = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let (_, grad) = sr_l1_with_grad(&recon, &target).unwrap();
        let data = recon.data_mut();
        let mut worst = 0.0f64;
        for i in 0..data.len() {
            let fd = central_diff(data, i, H, |d| sr_l1(&Tensor::from_vec(shape, d.to_vec()).unwrap(), &target).unwrap());
            worst = worst.max(rel_err(grad.data()[i], fd));
        }
        worst
    }

    fn tiny_branch() -> (SrBranch, ParamStore) {
        let cfg = SrBranchConfig {
            num_rg: 2,
            rcab_per_rg: 2,
            channels: 4,
            reduction: 2,
            upscale: 4,
            image_channels: 3,
        };
        let mut store = ParamStore::new();
        let branch = SrBranch::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // Shrink weights so the clamped output stays inside (0, 1).
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v *= 0.3;
            }
        }
        for conv in &branch.upsampler {
            conv.set_bias(&mut store, 0.5);
        }
        // The reconstruction conv starts near zero; at that scale upstream gradients drown in FD noise.
        let last = branch.upsampler.last().unwrap().weight;
        for v in store.get_mut(last).data_mut() {
            *v *= 30.0;
        }
        (branch, store)
    }

    /// Weighted sum of the branch output, so every output pixel contributes.
    fn objective(branch: &SrBranch, store: &ParamStore, op2: &Tensor, w: &Tensor) -> (f64, Graph, Var, Var) {
        let mut g = Graph::new();
        let x = g.input_tracked(op2.clone());
        let y = branch.forward(&mut g, store, FeatureMap { var: x, stride: 4 }).unwrap();
        let v = g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        (v, g, x, y)
    }

    /// Input gradient in full, plus three coordinates of every parameter tensor:
    /// covers attention, RCAB, group tails, fusion and the upsampler.
    pub fn sr_branch() -> f64 {
        let (branch, mut store) = tiny_branch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op2 = Tensor::from_fn([1, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let (_, g, x, y) = objective(&branch, &store, &op2, &Tensor::zeros([1, 3, 12, 12]));
        let out = g.value(y).clone();
        assert!(out.data().iter().all(|v| *v > 0.01 && *v < 0.99), "output touches the clamp");
        let w = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
        let grads = g.backward(vec![(y, w.clone())]).unwrap();

        let mut worst = 0.0f64;
        let gx = grads.get(x).unwrap().clone();
        let mut xin = op2.data().to_vec();
        for i in 0..xin.len() {
            let fd = central_diff(&mut xin, i, H, |d| {
                objective(&branch, &store, &Tensor::from_vec(op2.shape(), d.to_vec()).unwrap(), &w).0
            });
            worst = worst.max(rel_err(gx.data()[i], fd));
        }

        let ids: Vec<_> = store.ids().collect();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.param(id).unwrap().clone()).collect();
        for (k, &id) in ids.iter().enumerate() {
            let len = store.get(id).len();
            for j in [0, len / 2, len - 1] {
                let orig = store.get(id).data()[j];
                store.get_mut(id).data_mut()[j] = orig + PARAM_H;
                let up = objective(&branch, &store, &op2, &w).0;
                store.get_mut(id).data_mut()[j] = orig - PARAM_H;
                let down = objective(&branch, &store, &op2, &w).0;
                store.get_mut(id).data_mut()[j] = orig;
                worst = worst.max(rel_err(analytic[k].data()[j], (up - down) / (2.0 * PARAM_H)));
            }
        }
        worst
    }
}
