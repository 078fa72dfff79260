//! End-to-end acceptance run. Prints one verdict line per criterion; with
//! `SRDET_ACCEPTANCE_STRICT` set it also exits non-zero on any failure. Built
//! with `harness = false` so the lines show up in plain `cargo test` output.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{ap_oracle, focal_oracle, l1_mean_oracle, nms_oracle, smooth_l1_oracle, verdict};
use srdet::anchors::{decode_box, encode_box, nms, AnchorTag, BBox};
use srdet::cli::{cmd_cost, cmd_sweep_phi, cmd_synth};
use srdet::config::ExperimentConfig;
use srdet::data::{import_dataset, is_small, synth_dataset, AugmentConfig, SynthConfig};
use srdet::detector::{Detector, DetectorConfig, Mode, PyramidConfig};
use srdet::eval::{compute_ap, count_macs, count_params, macs_of_trace, CostTable};
use srdet::graph::Graph;
use srdet::losses::{focal_loss, smooth_l1, sr_l1, FocalParams};
use srdet::params::{Conv, ConvSpec, ParamGroup, ParamStore};
use srdet::sr_branch::SrBranchConfig;
use srdet::tensor::Tensor;
use srdet::train::{fit, lr_schedule_step, Checkpoint, FitOutput, PlateauScheduler, TrainConfig, LAST_CHECKPOINT};

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("desk config")
}

fn small_model() -> DetectorConfig {
    DetectorConfig {
        pyramid: PyramidConfig {
            levels: 4,
            base_channels: 8,
            input_size: 64,
            fpn_channels: 8,
            image_channels: 3,
        },
        sr: SrBranchConfig {
            channels: 8,
            reduction: 2,
            num_rg: 1,
            ..Default::default()
        },
        sr_branch: true,
    }
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    let w = rng.random_range(2.0..extent / 2.0);
    let h = rng.random_range(2.0..extent / 2.0);
    BBox::new(x, y, x + w, y + h)
}

fn loss_oracles() -> bool {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let params = FocalParams::default();
    let (mut focal_err, mut smooth_err, mut sr_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let tags: Vec<AnchorTag> = (0..n)
            .map(|i| match rng.random_range(0..3) {
                0 => AnchorTag::Positive(i),
                1 => AnchorTag::Negative,
                _ => AnchorTag::Ignore,
            })
            .collect();
        let got = focal_loss(&probs, &tags, &params).unwrap();
        focal_err = focal_err.max((got - focal_oracle(&probs, &tags, params.alpha, params.gamma)).abs());

        let rows = rng.random_range(1..20);
        let mut row = || [0; 4].map(|_| rng.random_range(-4.0..4.0));
        let pred: Vec<[f64; 4]> = (0..rows).map(|_| row()).collect();
        let target: Vec<[f64; 4]> = (0..rows).map(|_| row()).collect();
        smooth_err = smooth_err.max((smooth_l1(&pred, &target).unwrap() - smooth_l1_oracle(&pred, &target)).abs());

        let shape = [rng.random_range(1..3), 3, rng.random_range(1..9), rng.random_range(1..9)];
        let a = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let b = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        sr_err = sr_err.max((sr_l1(&a, &b).unwrap() - l1_mean_oracle(a.data(), b.data())).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let worst = focal_err.max(smooth_err).max(sr_err);
    verdict(
        1,
        "loss oracles",
        worst <= 1e-6 && secs < 10.0,
        &format!("max abs err focal {focal_err:.1e}, smooth-l1 {smooth_err:.1e}, sr-l1 {sr_err:.1e} over 1000 inputs each; {secs:.2}s"),
    )
}

fn gradient_checks() -> bool {
    let t0 = Instant::now();
    let errs = [
        ("focal", common::grad::focal()),
        ("smooth-l1", common::grad::smooth_l1_check()),
        ("sr-l1", common::grad::sr_l1_check()),
        ("sr branch", common::grad::sr_branch()),
    ];
    let secs = t0.elapsed().as_secs_f64();
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        2,
        "gradient checks",
        errs.iter().all(|(_, e)| *e < common::grad::TOL) && secs < 60.0,
        &format!("max rel err {}; {secs:.2}s", detail.join(", ")),
    )
}

fn detachment() -> bool {
    let cfg = ExperimentConfig::default().model;
    let with = Detector::new(&cfg, 3).unwrap();
    let never = Detector::new(&DetectorConfig { sr_branch: false, ..cfg.clone() }, 3).unwrap();
    let size = cfg.pyramid.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = Tensor::from_fn([1, 3, size, size], |_| rng.random_range(0.0..1.0));
    let train = with.model_forward(&img, Mode::Train).unwrap();
    let infer = with.model_forward(&img, Mode::Infer).unwrap();
    let bitwise = train.cls_maps == infer.cls_maps && train.reg_maps == infer.reg_maps;
    let table = CostTable::default();
    let macs_with = count_macs(&with, Mode::Infer, size, &table).unwrap();
    let macs_never = count_macs(&never, Mode::Infer, size, &table).unwrap();
    let params_equal = count_params(&with, Mode::Infer) == count_params(&never, Mode::Train);
    verdict(
        3,
        "branch detachment",
        bitwise && train.sr_image.is_some() && infer.sr_image.is_none() && macs_with == macs_never && params_equal,
        &format!("train/infer outputs bitwise equal: {bitwise}; infer MACs {macs_with} vs never-attached {macs_never}"),
    )
}

fn overhead() -> bool {
    let cfg = ExperimentConfig::default().model;
    let size = cfg.pyramid.input_size;
    let model = Detector::new(&cfg, 0).unwrap();
    let table = CostTable::default();
    let total = count_params(&model, Mode::Train);
    let branch = model.params().scalar_count(Some(ParamGroup::SrBranch));
    let share = branch as f64 / total as f64;
    let infer = count_macs(&model, Mode::Infer, size, &table).unwrap();
    let train = count_macs(&model, Mode::Train, size, &table).unwrap();

    // Micro-model: 3x3 conv 3->4 then 1x1 conv 4->2 on an 8x8 input.
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c1 = Conv::new(&mut store, "c1", ParamGroup::Detection, ConvSpec::new(3, 4, 3), &mut rng);
    let c2 = Conv::new(&mut store, "c2", ParamGroup::Detection, ConvSpec::new(4, 2, 1), &mut rng);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 3, 8, 8]));
    let h = c1.forward(&mut g, &store, x);
    let h = g.relu(h);
    c2.forward(&mut g, &store, h);
    let micro_macs = macs_of_trace(&g.layer_trace(), &table).unwrap();
    let hand_macs = (3 * 3 * 3 * 4 * 8 * 8 + 4 * 2 * 8 * 8) as u64;
    let hand_params = (3 * 3 * 3 * 4 + 4) + (4 * 2 + 2);
    let micro_ok = micro_macs == hand_macs && store.scalar_count(None) == hand_params;
    verdict(
        4,
        "overhead direction",
        share <= 0.03 && train > infer && micro_ok,
        &format!(
            "branch params {branch}/{total} = {:.2}%; MACs @{size} infer {infer}, train {train} (+{:.2}%); micro-model MACs {micro_macs} vs hand {hand_macs}",
            100.0 * share,
            100.0 * (train - infer) as f64 / infer as f64
        ),
    )
}

fn geometry_oracles() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut nms_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(0..=50);
        let dets: Vec<BBox> = (0..n)
            .map(|_| random_box(&mut rng, 60.0).with_score((rng.random_range(0..20) as f64) / 20.0))
            .collect();
        let thr = rng.random_range(0.1..0.9);
        if nms(&dets, thr) == nms_oracle(&dets, thr) {
            nms_ok += 1;
        }
    }
    let mut ap_ok = 0;
    for _ in 0..200 {
        let gts: Vec<BBox> = (0..rng.random_range(0..=10)).map(|_| random_box(&mut rng, 40.0)).collect();
        let mut dets: Vec<BBox> = (0..rng.random_range(0..=15))
            .map(|_| random_box(&mut rng, 40.0).with_score((rng.random_range(0..10) as f64) / 10.0))
            .collect();
        // Near-copies of some ground truths so true positives occur.
        for g in gts.iter().take(rng.random_range(0..=gts.len())) {
            dets.push(BBox::new(g.x1 + 0.5, g.y1, g.x2, g.y2 + 0.5).with_score((rng.random_range(0..10) as f64) / 10.0));
        }
        if (compute_ap(&dets, &gts, 0.5).ap - ap_oracle(&dets, &gts, 0.5)).abs() < 1e-12 {
            ap_ok += 1;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let anchor = BBox::from_center(rng.random_range(0.0..256.0), rng.random_range(0.0..256.0), 16.0, 16.0);
        let gt = random_box(&mut rng, 128.0);
        let back = decode_box(&anchor, encode_box(&anchor, &gt).unwrap());
        for (a, b) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        5,
        "geometry and metric oracles",
        nms_ok == 200 && ap_ok == 200 && worst <= 1e-5,
        &format!("nms {nms_ok}/200, ap {ap_ok}/200 match brute force; encode/decode max err {worst:.1e}"),
    )
}

fn phi_ablation(scratch: &Path) -> bool {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    let mut easy_ok = true;
    let mut data_ok = true;
    for seed in [1u64, 2, 3] {
        let cfg = desk_config().with_seed(seed);
        let train_dir = scratch.join(format!("train_{seed}"));
        let val_dir = scratch.join(format!("val_{seed}"));
        cmd_synth(&cfg, &train_dir).unwrap();
        let mut val_cfg = cfg.clone();
        val_cfg.synth.seed = 1000 + seed;
        cmd_synth(&val_cfg, &val_dir).unwrap();

        let train = import_dataset(&train_dir).unwrap();
        let faces: Vec<&BBox> = train.iter().flat_map(|s| &s.boxes).collect();
        let small = faces.iter().filter(|b| is_small(b)).count() as f64 / faces.len() as f64;
        data_ok &= train.len() >= 500 && small >= 0.5;

        let rows = cmd_sweep_phi(&cfg, &[0.0, 0.1], &train_dir, &val_dir, &scratch.join(format!("sweep_{seed}"))).unwrap();
        let (base, sr) = (&rows[0], &rows[1]);
        let (Some(h0), Some(h1), Some(e0), Some(e1)) = (base.hard, sr.hard, base.easy, sr.easy) else {
            lines.push(format!("seed {seed}: run failed ({}, {})", base.status, sr.status));
            easy_ok = false;
            continue;
        };
        if h1 >= h0 {
            wins += 1;
        }
        easy_ok &= e0 >= 0.5 && e1 >= 0.5;
        lines.push(format!(
            "seed {seed}: hard {h0:.3} -> {h1:.3}, easy {e0:.3} / {e1:.3}, small faces {:.0}% of {}",
            100.0 * small,
            faces.len()
        ));
    }
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    verdict(
        6,
        "desk phi ablation",
        wins >= 2 && easy_ok && data_ok && minutes <= 180.0,
        &format!("phi=0.1 hard >= phi=0 in {wins}/3 seeds; {}; {minutes:.1} min", lines.join("; ")),
    )
}

fn scheduler() -> bool {
    let cfg = TrainConfig { lr0: 1e-4, ..Default::default() };
    let mut sched = PlateauScheduler::new(&cfg);
    let mut trace = vec![sched.lr];
    for _ in 0..40 {
        trace.push(sched.step(1.0, &cfg));
    }
    let mut distinct = trace.clone();
    distinct.dedup();
    let expected_steps = [1e-4, 1e-5, 1e-6, 1e-7];
    let steps_ok = distinct.len() == 5
        && distinct.iter().zip(expected_steps).all(|(a, b)| (a - b).abs() <= 1e-12 * b)
        && *distinct.last().unwrap() == 1e-8
        && *trace.last().unwrap() == 1e-8;

    let mut sched = PlateauScheduler::new(&cfg);
    let improving: Vec<f64> = (0..40).map(|i| 0.99f64.powi(i)).collect();
    let never_reduced = improving.iter().all(|&l| sched.step(l, &cfg) == 1e-4);
    let replay = (1..improving.len()).all(|k| lr_schedule_step(&improving[..k], 1e-4, &cfg) == 1e-4);
    let stalled_replay = lr_schedule_step(&[1.0; 4], 1e-4, &cfg);
    verdict(
        7,
        "scheduler conformance",
        steps_ok && never_reduced && replay && (stalled_replay - 1e-5).abs() <= 1e-18,
        &format!("stalled trace visits {distinct:?}; improving trace keeps lr at 1e-4: {}", never_reduced && replay),
    )
}

fn fps_protocol() -> bool {
    let model = Detector::new(&small_model(), 0).unwrap();
    let rows = cmd_cost(&model, &[256, 512, 1024], Some(1000)).unwrap();
    let fps: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let f = r.fps.as_ref().unwrap();
            (f.mean, f.std / f.mean)
        })
        .collect();
    let trend = fps.windows(2).all(|w| w[1].0 <= w[0].0);
    let stable = fps.iter().all(|(_, cv)| *cv < 0.2);
    let detail: Vec<String> = rows
        .iter()
        .zip(&fps)
        .map(|(r, (m, cv))| format!("{}px {m:.1} fps (rel dev {:.1}%)", r.input_size, 100.0 * cv))
        .collect();
    verdict(8, "fps protocol", trend && stable, &format!("1000 runs each: {}", detail.join(", ")))
}

fn determinism(scratch: &Path) -> bool {
    let data = synth_dataset(&SynthConfig {
        n: 8,
        image_size: 64,
        faces_per_image: (1, 2),
        scale_range: (8.0, 32.0),
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr0: 1e-3,
        seed: 4,
        ..Default::default()
    };
    let aug = AugmentConfig::default();
    let run = |dir: Option<PathBuf>, cfg: &TrainConfig| {
        fit(Detector::new(&small_model(), 4).unwrap(), &data, cfg, &aug, &FitOutput { dir }, None).unwrap()
    };
    let a = run(None, &cfg);
    let b = run(None, &cfg);
    let stream = |r: &srdet::train::FitResult| r.records.iter().map(|e| (e.loss.clone(), e.lr)).collect::<Vec<_>>();
    let reproducible = stream(&a) == stream(&b) && a.model.params() == b.model.params();

    let part = scratch.join("resume");
    run(Some(part.clone()), &TrainConfig { epochs: 1, ..cfg.clone() });
    let ck = Checkpoint::load(&part.join(LAST_CHECKPOINT)).unwrap();
    let resumed = fit(ck.detector().unwrap(), &data, &cfg, &aug, &FitOutput { dir: Some(part) }, Some(ck)).unwrap();
    let resume_ok = stream(&resumed) == stream(&a) && resumed.model.params() == a.model.params();
    verdict(
        9,
        "determinism and resume",
        reproducible && resume_ok,
        &format!("identical epoch-loss streams: {reproducible}; resume after epoch 1 matches uninterrupted run: {resume_ok}"),
    )
}

fn main() {
    // `cargo test -- --list` and filters probe test binaries; this one has a single run.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let scratch = tempfile::tempdir().unwrap();
    let results = [
        loss_oracles(),
        gradient_checks(),
        detachment(),
        overhead(),
        geometry_oracles(),
        phi_ablation(scratch.path()),
        scheduler(),
        fps_protocol(),
        determinism(scratch.path()),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    // The desk ablation is an experiment, not a unit check; only gate on it when asked.
    if passed != results.len() && std::env::var_os("SRDET_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
