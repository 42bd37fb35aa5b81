//! The `logomr` command line: cohort generation, training, evaluation,
//! saliency export and benchmarking.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_planes, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{bench, bootstrap_ci, c_index, count_flops, horizon_auc, write_metrics_csv, MetricReport, SurvivalPoint};
use crate::model_io::{load_model, save_model};
use crate::multiplane::{ensemble, mip_project, resample_weights, saliency_map, write_pgm, RiskModel};
use crate::risk::{cumulative_risk, ExamRecord};
use crate::synthcohort::{generate_cohort, read_manifest, resolve_volume_path, split_cohort, write_manifest};
use crate::trainer::{train, train_triplane, write_train_log, Dataset, TrainConfig};
use crate::volume::{Plane, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_UNDEFINED_METRIC: i32 = 5;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Csv { .. } | Error::Format { .. } => EXIT_IO,
        Error::Training(_) | Error::Numeric { .. } | Error::Uninformative => EXIT_TRAINING,
        Error::UndefinedMetric(_) => EXIT_UNDEFINED_METRIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "logomr", version, about = "Slice-sequence breast MRI risk models")]
pub struct Cli {
    /// Worker threads; 1 keeps every command bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort with manifest and patient-level splits.
    Generate(GenerateArgs),
    /// Train a single-plane or tri-plane model.
    Train(TrainArgs),
    /// Score a split and report c-index and horizon AUCs with bootstrap intervals.
    Eval(EvalArgs),
    /// Export the rank-1 saliency of a tri-plane model.
    Saliency(SaliencyArgs),
    /// Print analytic FLOPs and measured volumes per second.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.csv and val.csv.
    #[arg(long)]
    pub cohort: PathBuf,
    /// axial, coronal, sagittal or all; overrides `planes` in the config.
    #[arg(long)]
    pub plane: Option<String>,
    /// Output directory for model.lgmm and the training logs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Repeat to average the predictions of several models.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for metrics.csv and predictions.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out_volume: PathBuf,
    /// Prefix for the PGM projections and the attention CSV.
    #[arg(long)]
    pub out_mip_prefix: String,
    #[arg(long, default_value_t = 95.0)]
    pub threshold_pct: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a, cli.threads),
        Command::Eval(a) => cmd_eval(a),
        Command::Saliency(a) => cmd_saliency(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.cohort.seed = seed;
    }
    let records = generate_cohort(&cfg.cohort, &args.out)?;
    let splits = split_cohort(&records, &cfg.split, cfg.cohort.seed)?;
    for (name, split) in SPLIT_NAMES.iter().zip(&splits) {
        write_manifest(args.out.join(format!("{name}.csv")), split)?;
    }
    log::info!(
        "wrote {} exams ({} / {} / {} train / val / test) to {}",
        records.len(),
        splits[0].len(),
        splits[1].len(),
        splits[2].len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, threads: usize) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = &args.plane {
        cfg.planes = parse_planes(p)?;
    }
    let train_cfg = TrainConfig {
        threads,
        ..cfg.train.clone()
    };
    let model_cfg = &cfg.model;
    let train_set = Dataset::load(args.cohort.join("train.csv"), model_cfg.target_dims)?;
    let val_set = Dataset::load(args.cohort.join("val.csv"), model_cfg.target_dims)?;
    create_dir(&args.out)?;
    let model = match cfg.planes[..] {
        [plane] => {
            let outcome = train(model_cfg, plane, &train_cfg, &train_set, &val_set)?;
            write_train_log(args.out.join("train_log.csv"), &outcome.log)?;
            RiskModel::Single(outcome.model)
        }
        [_, _, _] => {
            let outcome = train_triplane(model_cfg, &train_cfg, &train_set, &val_set)?;
            for (plane, log) in &outcome.logs {
                write_train_log(args.out.join(format!("train_log_{plane}.csv")), log)?;
            }
            RiskModel::Tri(outcome.model)
        }
        _ => {
            return Err(Error::config(format!(
                "train one plane or all three, not {:?}",
                cfg.planes
            )))
        }
    };
    save_model(&model, args.out.join("model.lgmm"))
}

/// Ensemble probability vectors for every exam of a manifest.
pub fn predict_manifest(models: &[RiskModel], manifest: &Path) -> Result<(Vec<ExamRecord>, Vec<Vec<f64>>)> {
    let records = read_manifest(manifest)?;
    let mut preds = Vec::with_capacity(records.len());
    for r in &records {
        let volume = Volume::load(resolve_volume_path(manifest, r))?;
        let ps = models.iter().map(|m| m.predict(&volume)).collect::<Result<Vec<_>>>()?;
        preds.push(ensemble(&ps)?);
    }
    Ok((records, preds))
}

/// C-index and per-horizon AUC rows with bootstrap intervals.
pub fn evaluate(records: &[ExamRecord], preds: &[Vec<f64>], horizons: usize, resamples: usize, seed: u64) -> Result<Vec<MetricReport>> {
    let risks: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| (1..=horizons).map(|m| cumulative_risk(p, m)).collect())
        .collect::<Result<_>>()?;
    let points: Vec<SurvivalPoint> = records
        .iter()
        .zip(&risks)
        .map(|(r, risk)| SurvivalPoint::from_record(r, risk[horizons - 1]))
        .collect();
    let mut reports = vec![bootstrap_ci("cindex", None, records.len(), resamples, seed, |idx| {
        c_index(&idx.iter().map(|&i| points[i]).collect::<Vec<_>>())
    })?];
    for m in 1..=horizons {
        reports.push(bootstrap_ci("auc", Some(m), records.len(), resamples, seed, |idx| {
            let recs: Vec<ExamRecord> = idx.iter().map(|&i| records[i].clone()).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| risks[i][m - 1]).collect();
            horizon_auc(&recs, &scores, m)
        })?);
    }
    Ok(reports)
}

pub fn write_predictions(path: &Path, records: &[ExamRecord], preds: &[Vec<f64>], horizons: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["exam_id".to_string()];
    header.extend((1..=horizons + 1).map(|t| format!("p_{t}")));
    header.extend((1..=horizons).map(|m| format!("risk_{m}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (r, p) in records.iter().zip(preds) {
        let mut row = vec![r.exam_id.clone()];
        row.extend(p.iter().map(|v| v.to_string()));
        for m in 1..=horizons {
            row.push(cumulative_risk(p, m)?.to_string());
        }
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !SPLIT_NAMES.contains(&args.split.as_str()) {
        return Err(Error::config(format!("unknown split `{}` (train, val or test)", args.split)));
    }
    let models = args.models.iter().map(load_model).collect::<Result<Vec<_>>>()?;
    let horizons = models[0].config().horizons;
    if models.iter().any(|m| m.config().horizons != horizons) {
        return Err(Error::config("ensembled models disagree on the number of horizons"));
    }
    let (records, preds) = predict_manifest(&models, &args.cohort.join(format!("{}.csv", args.split)))?;
    create_dir(&args.out)?;
    write_predictions(&args.out.join("predictions.csv"), &records, &preds, horizons)?;
    let reports = evaluate(&records, &preds, horizons, args.bootstrap, args.seed)?;
    write_metrics_csv(args.out.join("metrics.csv"), &reports)
}

/// Value at the given percentile (nearest rank).
fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn cmd_saliency(args: &SaliencyArgs) -> Result<()> {
    if !(0.0..=100.0).contains(&args.threshold_pct) {
        return Err(Error::config("--threshold-pct must lie in [0, 100]"));
    }
    let RiskModel::Tri(model) = load_model(&args.model)? else {
        return Err(Error::config(
            "saliency needs a tri-plane model (train with --plane all): one attention vector per axis",
        ));
    };
    let volume = Volume::load(&args.volume)?;
    let out = model.forward(&volume)?;
    let dims = volume.dims();
    let weights: Vec<Vec<f64>> = Plane::ALL
        .iter()
        .map(|&p| resample_weights(out.alpha(p), dims[p.axis()]))
        .collect::<Result<_>>()?;
    let saliency = saliency_map(&weights[0], &weights[1], &weights[2], dims)?;
    saliency.as_volume().save(&args.out_volume)?;

    let cut = percentile(saliency.as_volume().voxels(), args.threshold_pct);
    let mask = Volume::new(
        dims,
        saliency
            .as_volume()
            .voxels()
            .iter()
            .map(|&v| if v >= cut { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let prefix = &args.out_mip_prefix;
    for plane in Plane::ALL {
        let axis = plane.axis();
        write_pgm(&mip_project(&volume, axis)?, format!("{prefix}input_{plane}.pgm"))?;
        write_pgm(&mip_project(saliency.as_volume(), axis)?, format!("{prefix}saliency_{plane}.pgm"))?;
        write_pgm(&mip_project(&mask, axis)?, format!("{prefix}mask_{plane}.pgm"))?;
    }
    let path = PathBuf::from(format!("{prefix}alpha.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["plane", "index", "weight"]).map_err(|e| Error::csv(&path, e))?;
    for plane in Plane::ALL {
        for (i, a) in out.alpha(plane).iter().enumerate() {
            w.write_record([plane.name().to_string(), i.to_string(), a.to_string()])
                .map_err(|e| Error::csv(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// `planes,flops,fps` for one model and volume.
pub fn bench_row(model: &RiskModel, volume: &Volume, reps: usize) -> Result<String> {
    let cfg = model.config();
    let planes = model.planes();
    let flops: u64 = planes.iter().map(|&p| count_flops(cfg, cfg.target_dims, p)).sum();
    let result = bench(reps, || model.predict(volume).map(|_| ()))?;
    let names: Vec<&str> = planes.iter().map(|p| p.name()).collect();
    Ok(format!("{},{flops},{:.6}", names.join("+"), result.fps))
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let volume = Volume::load(&args.volume)?;
    println!("{}", bench_row(&model, &volume, args.reps)?);
    Ok(())
}
