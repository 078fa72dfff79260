//! Command implementations and argument parsing for the `srdet` binary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::config::{EvalConfig, ExperimentConfig};
use crate::data::{
    export_dataset, import_dataset, is_small, read_annotations, synth_dataset, write_annotations, AnnotationRecord,
    Sample, ANNOTATION_FILE,
};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{
    cost_report, evaluate_subsets, pr_csv, pr_plot, render_plot, save_image, write_text, CostReport, CostTable,
    Series, Subset, SubsetResult,
};
use crate::tensor::Tensor;
use crate::train::{fit, Checkpoint, FitOutput, FitResult, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const RESULTS_FILE: &str = "results.json";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COST_FILE: &str = "cost.json";

/// Exit code for an error: 1 for bad input caught before compute, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "srdet", version, about = "Face detection with a training-only super-resolution branch")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    Synth(SynthArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a detections file) on a dataset directory.
    Eval(EvalArgs),
    /// Train and evaluate once per phi value.
    SweepPhi(SweepArgs),
    /// Parameter, MAC and FPS table.
    Cost(CostArgs),
    /// Print the default configuration.
    PrintConfig,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding the annotation file.
    #[arg(long)]
    pub data: PathBuf,
    /// Weight of the reconstruction loss.
    #[arg(long)]
    pub phi: Option<f64>,
    /// Train the plain detector without the SR branch.
    #[arg(long)]
    pub no_sr_branch: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "dets_file")]
    pub checkpoint: Option<PathBuf>,
    /// Score precomputed detections instead of running a model.
    #[arg(long)]
    pub dets_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset; defaults to the training set.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = vec![0.0, 0.01, 0.1, 1.0])]
    pub values: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub common: Common,
    /// Take the model from a checkpoint instead of the configuration.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Timed forwards per input size.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Input side in pixels; repeatable.
    #[arg(long = "input-size")]
    pub input_sizes: Vec<usize>,
    /// Build the model without the SR branch.
    #[arg(long)]
    pub no_sr_branch: bool,
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: usize,
    pub faces: usize,
    pub small_faces: usize,
    pub annotation_file: PathBuf,
}

pub fn cmd_synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let samples = synth_dataset(&cfg.synth)?;
    let annotation_file = export_dataset(out_dir, &samples)?;
    let faces = samples.iter().map(|s| s.boxes.len()).sum();
    let small_faces = samples.iter().flat_map(|s| &s.boxes).filter(|b| is_small(b)).count();
    Ok(SynthSummary {
        images: samples.len(),
        faces,
        small_faces,
        annotation_file,
    })
}

fn load_dataset(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    let data = import_dataset(dir)?;
    if data.is_empty() {
        return Err(Error::InvalidValue(format!("{}: dataset has no images", dir.display())));
    }
    for (i, s) in data.iter().enumerate() {
        if s.image.h() != size || s.image.w() != size {
            return Err(Error::ShapeMismatch(format!(
                "{}: image {i} is {}x{}, model input is {size}x{size}",
                dir.display(),
                s.image.w(),
                s.image.h()
            )));
        }
    }
    Ok(data)
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitResult> {
    cfg.validate()?;
    let data = load_dataset(data_dir, cfg.model.pyramid.input_size)?;
    let model = Detector::new(&cfg.model, cfg.train.seed)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        if ck.model != cfg.model {
            return Err(Error::Checkpoint("resume checkpoint was built from a different model config".into()));
        }
    }
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml()?)?;
    fit(
        model,
        &data,
        &cfg.train,
        &cfg.augment,
        &FitOutput {
            dir: Some(out_dir.to_path_buf()),
        },
        resume,
    )
}

/// Detections per sample, in dataset order.
pub fn run_detector(model: &Detector, data: &[Sample], eval: &EvalConfig) -> Result<Vec<Vec<BBox>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(8) {
        let images = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        out.extend(model.detect(&images, eval.score_thresh, eval.nms_thresh)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subsets: Vec<SubsetResult>,
}

impl EvalReport {
    pub fn ap(&self, s: Subset) -> f64 {
        self.subsets.iter().find(|r| r.subset == s).map_or(0.0, |r| r.ap)
    }
}

/// Scores detections against a dataset and writes results, PR CSVs and plots.
pub fn evaluate_and_write(
    dets: &[Vec<BBox>],
    data: &[Sample],
    records: &[AnnotationRecord],
    eval: &EvalConfig,
    out_dir: &Path,
) -> Result<EvalReport> {
    let gts: Vec<Vec<BBox>> = data.iter().map(|s| s.boxes.clone()).collect();
    let subsets = evaluate_subsets(dets, &gts, &eval.bands, eval.iou_thresh)?;
    ensure_dir(out_dir)?;
    for r in &subsets {
        if let Some(curve) = &r.curve {
            write_text(&out_dir.join(format!("pr_{}.csv", r.subset.name())), &pr_csv(curve))?;
            save_image(&out_dir.join(format!("pr_{}.png", r.subset.name())), &pr_plot(curve))?;
        }
    }
    let det_records: Vec<AnnotationRecord> = records
        .iter()
        .zip(dets)
        .map(|(r, d)| AnnotationRecord {
            path: r.path.clone(),
            boxes: d.clone(),
        })
        .collect();
    write_annotations(&out_dir.join(DETECTIONS_FILE), &det_records)?;
    let report = EvalReport { subsets };
    write_text(&out_dir.join(RESULTS_FILE), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    dets_file: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    cfg.eval.validate()?;
    let records = read_annotations(&data_dir.join(ANNOTATION_FILE))?;
    let dets = match (dets_file, checkpoint) {
        (Some(path), _) => {
            let data = import_dataset(data_dir)?;
            let mut by_path: HashMap<String, Vec<BBox>> =
                read_annotations(path)?.into_iter().map(|r| (r.path, r.boxes)).collect();
            let dets = records
                .iter()
                .map(|r| by_path.remove(&r.path).unwrap_or_default())
                .collect::<Vec<_>>();
            return evaluate_and_write(&dets, &data, &records, &cfg.eval, out_dir);
        }
        (None, Some(ck)) => {
            let model = Checkpoint::load(ck)?.detector()?;
            let data = load_dataset(data_dir, model.input_size())?;
            (run_detector(&model, &data, &cfg.eval)?, data)
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --dets-file".into())),
    };
    evaluate_and_write(&dets.0, &dets.1, &records, &cfg.eval, out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub phi: f64,
    pub easy: Option<f64>,
    pub medium: Option<f64>,
    pub hard: Option<f64>,
    pub status: String,
}

/// Trains one model per φ with a shared seed and evaluates each. A failing
/// value yields a failed row; the sweep carries on.
pub fn cmd_sweep_phi(
    cfg: &ExperimentConfig,
    values: &[f64],
    data_dir: &Path,
    eval_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.len() < 2 {
        return Err(Error::Config("sweep needs at least two phi values".into()));
    }
    let mut phis = values.to_vec();
    phis.sort_by(f64::total_cmp);
    ensure_dir(out_dir)?;
    let mut rows = Vec::with_capacity(phis.len());
    for &phi in &phis {
        let run_dir = out_dir.join(format!("phi_{phi}"));
        let mut c = cfg.clone();
        c.train.phi = phi;
        let outcome = cmd_train(&c, data_dir, &run_dir, None).and_then(|_| {
            cmd_eval(
                &c,
                Some(&run_dir.join(LAST_CHECKPOINT)),
                None,
                eval_dir,
                &run_dir.join("eval"),
            )
        });
        rows.push(match outcome {
            Ok(rep) => SweepRow {
                phi,
                easy: Some(rep.ap(Subset::Easy)),
                medium: Some(rep.ap(Subset::Medium)),
                hard: Some(rep.ap(Subset::Hard)),
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                phi,
                easy: None,
                medium: None,
                hard: None,
                status: format!("failed: {e}"),
            },
        });
    }
    write_text(&out_dir.join(SWEEP_FILE), &sweep_csv(&rows))?;
    write_text(&out_dir.join("sweep.json"), &serde_json::to_string_pretty(&rows)?)?;
    save_image(&out_dir.join("sweep.png"), &sweep_plot(&rows))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut s = String::from("phi,easy,medium,hard,status\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.phi,
            fmt(r.easy),
            fmt(r.medium),
            fmt(r.hard),
            r.status.replace(',', ";")
        );
    }
    s
}

/// AP against φ (x spread evenly by rank), one line per subset; the φ = 0
/// hard-subset AP is drawn as a dashed horizontal baseline.
pub fn sweep_plot(rows: &[SweepRow]) -> image::RgbImage {
    let x = |i: usize| if rows.len() > 1 { i as f64 / (rows.len() - 1) as f64 } else { 0.5 };
    let colors = [[30, 140, 60], [220, 140, 20], [200, 30, 30]];
    let mut series: Vec<Series> = [|r: &SweepRow| r.easy, |r: &SweepRow| r.medium, |r: &SweepRow| r.hard]
        .iter()
        .zip(colors)
        .map(|(get, color)| Series {
            points: rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| get(r).map(|v| (x(i), v)))
                .collect(),
            color,
            dashed: false,
        })
        .collect();
    if let Some(base) = rows.iter().find(|r| r.phi == 0.0).and_then(|r| r.hard) {
        series.push(Series {
            points: (0..=20).map(|k| (k as f64 / 20.0, base)).collect(),
            color: [90, 90, 90],
            dashed: true,
        });
    }
    render_plot(&series)
}

pub fn cmd_cost(model: &Detector, input_sizes: &[usize], runs: Option<usize>) -> Result<Vec<CostReport>> {
    if input_sizes.is_empty() {
        return Err(Error::Config("cost needs at least one input size".into()));
    }
    let table = CostTable::default();
    input_sizes.iter().map(|&s| cost_report(model, s, &table, runs)).collect()
}

pub fn cost_table_text(rows: &[CostReport]) -> String {
    let mut s = String::from("size  params_infer  params_train  macs_infer  macs_train  branch_macs  fps_mean  fps_std\n");
    for r in rows {
        let (m, sd) = r.fps.as_ref().map_or((f64::NAN, f64::NAN), |f| (f.mean, f.std));
        let _ = writeln!(
            s,
            "{:>4}  {:>12}  {:>12}  {:>10}  {:>10}  {:>11}  {:>8.2}  {:>7.2}",
            r.input_size,
            r.params_infer,
            r.params_train,
            r.macs_infer,
            r.macs_train,
            r.branch_macs(),
            m,
            sd
        );
    }
    s
}

/// Runs a parsed command line, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrintConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
        }
        Command::Synth(a) => {
            let cfg = load_config(&a.common)?;
            let s = cmd_synth(&cfg, &a.common.out)?;
            println!(
                "wrote {} images, {} faces ({} small) to {}",
                s.images,
                s.faces,
                s.small_faces,
                s.annotation_file.display()
            );
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.common)?;
            if let Some(phi) = a.phi {
                cfg.train.phi = phi;
            }
            if a.no_sr_branch {
                cfg.model.sr_branch = false;
            }
            cfg.validate()?;
            let res = cmd_train(&cfg, &a.data, &a.common.out, a.resume.as_deref())?;
            for r in &res.records {
                println!(
                    "epoch {:>3}  loss {:.5}  focal {:.5}  smooth {:.5}  sr {:.5}  lr {:.1e}  {:.1}s",
                    r.epoch, r.loss.l_ef, r.loss.l_focal, r.loss.l_smooth, r.loss.l_sr, r.lr, r.wall_time
                );
            }
            println!(
                "checkpoints: {} and {}",
                a.common.out.join(LAST_CHECKPOINT).display(),
                a.common.out.join(BEST_CHECKPOINT).display()
            );
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.common)?;
            let rep = cmd_eval(
                &cfg,
                a.checkpoint.as_deref(),
                a.dets_file.as_deref(),
                &a.data,
                &a.common.out,
            )?;
            println!("subset  ap        n_gt  n_det");
            for r in &rep.subsets {
                println!("{:<6}  {:.6}  {:>4}  {:>5}", r.subset.name(), r.ap, r.n_gt, r.n_det);
            }
        }
        Command::SweepPhi(a) => {
            let cfg = load_config(&a.common)?;
            let eval_dir = a.eval_data.clone().unwrap_or_else(|| a.data.clone());
            let rows = cmd_sweep_phi(&cfg, &a.values, &a.data, &eval_dir, &a.common.out)?;
            print!("{}", sweep_csv(&rows));
        }
        Command::Cost(a) => {
            let mut cfg = load_config(&a.common)?;
            if a.no_sr_branch {
                cfg.model.sr_branch = false;
            }
            let model = match &a.checkpoint {
                Some(p) => Checkpoint::load(p)?.detector()?,
                None => Detector::new(&cfg.model, cfg.train.seed)?,
            };
            let sizes = if a.input_sizes.is_empty() {
                cfg.eval.input_sizes.clone()
            } else {
                a.input_sizes.clone()
            };
            let runs = a.runs.unwrap_or(cfg.eval.fps_runs);
            let rows = cmd_cost(&model, &sizes, Some(runs))?;
            ensure_dir(&a.common.out)?;
            write_text(&a.common.out.join(COST_FILE), &serde_json::to_string_pretty(&rows)?)?;
            print!("{}", cost_table_text(&rows));
        }
    }
    Ok(())
}
