//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::data::{
    load_dataset, load_eval_set, load_masks, parse_config, Dataset, EvalSet, Provenance,
    RunConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{metrics_csv, Confusion, StageCounts};
use crate::net::ModelParams;
use crate::report::{label_stage, prediction_stage, PipelineReport, RunDir, StageSummary};
use crate::synth::{synthesize, NoiseSpec};
use crate::train::{correct_dataset, run_pipeline, train};

pub const THREADS_ENV: &str = "LABELMEND_THREADS";

#[derive(Debug, Parser)]
#[command(name = "labelmend", version, about = "Pseudo-label correction for segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with noisy pseudo labels.
    Synth(SynthArgs),
    /// Train the initial model on the pseudo labels (round 0).
    Train(TrainArgs),
    /// Estimate confidence with a trained model and correct the labels.
    Correct(CorrectArgs),
    /// Train a fresh model on corrected labels.
    Retrain(RetrainArgs),
    /// Score a label directory or a model against ground truth.
    Eval(EvalArgs),
    /// Train, correct and retrain end to end.
    Pipeline(PipelineArgs),
    /// Run the pipeline once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Run the full pipeline and its single-module ablations.
    Ablate(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    /// Held-out images written to `<out>/test/`.
    #[arg(long, default_value_t = 0)]
    pub n_test: usize,
    /// `HxW`, both multiples of 4.
    #[arg(long, default_value = "32x32")]
    pub size: String,
    #[arg(long, default_value_t = 0.5)]
    pub severity: f64,
    #[arg(long, default_value_t = 0.3)]
    pub severe_frac: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Run name; outputs go to `<runs-root>/<run>/`.
    #[arg(long)]
    pub run: String,
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Train on these masks instead of `<data>/labels/`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Masks to correct; defaults to `<data>/labels/`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Overrides the config tau.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub round: usize,
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub labels: PathBuf,
    /// The model is initialized with seed `seed + round`.
    #[arg(long, default_value_t = 1)]
    pub round: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with `images/` and `ground_truth/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub candidates: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value = "candidate")]
    pub stage: String,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Beta,
    #[value(name = "num_passes")]
    NumPasses,
    Tau,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

/// Parses `HxW` with both sides positive multiples of 4.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size {s:?}: expected HxW with multiples of 4"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config { .. } => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Correct(a) => cmd_correct(&a),
        Command::Retrain(a) => cmd_retrain(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Pipeline(a) => cmd_pipeline(&a.run).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Ablate(a) => cmd_ablate(&a.run),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let (h, w) = parse_size(&a.size)?;
    if a.n == 0 {
        return Err(Error::InvalidArgument("--n must be >= 1".into()));
    }
    let noise = NoiseSpec {
        severity: a.severity,
        severe_fraction: a.severe_frac,
        ..NoiseSpec::default()
    };
    let data = synthesize::<f64>(a.n, a.n_test, h, w, &noise, a.seed)?;
    data.write(&a.out)?;
    info!("wrote {} training and {} test images to {}", a.n, a.n_test, a.out.display());
    Ok(())
}

/// Loaded inputs shared by the run-producing commands.
struct Inputs {
    config: RunConfig,
    dataset: Dataset<f64>,
    test: Option<EvalSet<f64>>,
    dir: RunDir,
}

fn load_inputs(a: &RunArgs) -> Result<Inputs> {
    let mut config = parse_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let dataset = load_dataset(&a.data, config.k)?;
    let test = load_test_split(&a.data, config.k)?;
    let dir = RunDir::create(a.runs_root.join(&a.run))?;
    Ok(Inputs {
        config,
        dataset,
        test,
        dir,
    })
}

/// `<data>/test/` when present.
pub fn load_test_split(data: &Path, k: usize) -> Result<Option<EvalSet<f64>>> {
    let dir = data.join("test");
    if dir.join("images").is_dir() {
        Ok(Some(load_eval_set(&dir, k)?))
    } else {
        warn!("{} has no test split; prediction stages are skipped", data.display());
        Ok(None)
    }
}

fn ids(dataset: &Dataset<f64>) -> Vec<&str> {
    dataset.ids().collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let inp = load_inputs(&a.run)?;
    let labels = match &a.labels {
        Some(dir) => load_masks(dir, inp.dataset.ids(), inp.config.k, Provenance::Pseudo)?,
        None => inp.dataset.pseudo_labels(),
    };
    inp.dir.write_config(&inp.config)?;
    let (model, history) = train(&inp.dataset, &labels, &inp.config, inp.config.seed)?;
    inp.dir.write_model(0, &model)?;
    inp.dir.write_history(0, &history)?;
    let mut stages = Vec::new();
    stages.extend(label_stage("pseudo", &labels, &inp.dataset)?);
    if let Some(test) = &inp.test {
        stages.push(prediction_stage("pred_noisy", &model, test)?);
    }
    inp.dir.write_metrics(&stages)
}

pub fn cmd_correct(a: &CorrectArgs) -> Result<()> {
    let mut inp = load_inputs(&a.run)?;
    if let Some(tau) = a.tau {
        inp.config.tau = tau;
        inp.config.validate(&a.run.config)?;
    }
    let model = ModelParams::<f64>::load(&a.model)?;
    let labels = match &a.labels {
        Some(dir) => load_masks(dir, inp.dataset.ids(), inp.config.k, Provenance::Corrected)?,
        None => inp.dataset.pseudo_labels(),
    };
    inp.dir.write_config(&inp.config)?;
    let round = correct_dataset(&inp.dataset, &labels, &model, &inp.config, a.round)?;
    let ids = ids(&inp.dataset);
    inp.dir.write_confidence(&ids, &round.confidence)?;
    inp.dir.write_corrected(&ids, &round.labels)?;
    inp.dir.write_corrections(&round.logs)?;
    let mut stages = Vec::new();
    stages.extend(label_stage("pseudo", &labels, &inp.dataset)?);
    stages.extend(label_stage("corrected", &round.labels, &inp.dataset)?);
    inp.dir.write_metrics(&stages)
}

pub fn cmd_retrain(a: &RetrainArgs) -> Result<()> {
    let inp = load_inputs(&a.run)?;
    let labels = load_masks(&a.labels, inp.dataset.ids(), inp.config.k, Provenance::Corrected)?;
    inp.dir.write_config(&inp.config)?;
    let seed = inp.config.seed.wrapping_add(a.round as u64);
    let (model, history) = train(&inp.dataset, &labels, &inp.config, seed)?;
    inp.dir.write_model(a.round, &model)?;
    inp.dir.write_history(a.round, &history)?;
    let mut stages = Vec::new();
    stages.extend(label_stage("corrected", &labels, &inp.dataset)?);
    if let Some(test) = &inp.test {
        stages.push(prediction_stage("pred_corrected", &model, test)?);
    }
    inp.dir.write_metrics(&stages)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let stage = match (&a.candidates, &a.model) {
        (Some(dir), _) => {
            let eval = load_eval_set::<f64>(&a.data, a.k)?;
            let cands = load_masks(dir, eval.ids.iter().map(String::as_str), a.k, Provenance::Pseudo)?;
            StageCounts {
                stage: a.stage.clone(),
                confusion: Confusion::from_pairs(a.k, cands.iter().zip(&eval.ground_truth))?,
            }
        }
        (None, Some(path)) => {
            let model = ModelParams::<f64>::load(path)?;
            let eval = load_eval_set::<f64>(&a.data, model.classes())?;
            prediction_stage(&a.stage, &model, &eval)?
        }
        (None, None) => {
            return Err(Error::InvalidArgument("need --candidates or --model".into()))
        }
    };
    let table = metrics_csv(&[stage]);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::write(out, &table).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

/// Runs the whole pipeline and writes every artifact into `dir`.
pub fn execute_pipeline(
    dataset: &Dataset<f64>,
    test: Option<&EvalSet<f64>>,
    config: &RunConfig,
    dir: &RunDir,
) -> Result<PipelineReport> {
    dir.write_config(config)?;
    let run = run_pipeline(dataset, config)?;
    let mut timings = run.timings.clone();
    for t in &run.trainings {
        dir.write_model(t.round, &t.model)?;
        dir.write_history(t.round, &t.history)?;
    }
    let ids = ids(dataset);
    if let Some(last) = run.corrections.last() {
        dir.write_confidence(&ids, &last.confidence)?;
        dir.write_corrected(&ids, &last.labels)?;
        dir.write_corrections(run.corrections.iter().flat_map(|c| &c.logs))?;
    }

    let mut stages = Vec::new();
    stages.extend(label_stage("pseudo", &dataset.pseudo_labels(), dataset)?);
    if let Some(labels) = run.final_labels() {
        stages.extend(label_stage("corrected", labels, dataset)?);
    }
    if let Some(test) = test {
        stages.push(prediction_stage("pred_noisy", run.initial_model(), test)?);
        if run.trainings.len() > 1 {
            stages.push(prediction_stage("pred_corrected", run.final_model(), test)?);
        }
        if config.train_clean {
            let gt: Vec<_> = dataset
                .ground_truth()
                .ok_or_else(|| {
                    Error::InvalidArgument("train_clean needs ground truth for every image".into())
                })?
                .into_iter()
                .cloned()
                .collect();
            let clock = Instant::now();
            let (model, history) = train(dataset, &gt, config, config.seed)?;
            timings.push(("train_clean".into(), clock.elapsed().as_secs_f64()));
            model.save(dir.path().join("model_clean.bin"))?;
            fs::write(dir.path().join("history_clean.csv"), history.to_csv()?)
                .map_err(|e| Error::io(dir.path(), e))?;
            stages.push(prediction_stage("pred_clean", &model, test)?);
        }
    }
    dir.write_metrics(&stages)?;
    for (stage, secs) in &timings {
        info!("{stage}: {secs:.1}s");
    }
    let report = PipelineReport {
        seed: config.seed,
        config: config.clone(),
        stages: stages.iter().map(StageSummary::from).collect(),
        timings,
    };
    dir.write_report(&report)?;
    Ok(report)
}

pub fn cmd_pipeline(a: &RunArgs) -> Result<PipelineReport> {
    let inp = load_inputs(a)?;
    execute_pipeline(&inp.dataset, inp.test.as_ref(), &inp.config, &inp.dir)
}

/// Stage scoring the model a pipeline ends with.
fn final_prediction(report: &PipelineReport) -> Result<&StageSummary> {
    report
        .stage("pred_corrected")
        .or_else(|| report.stage("pred_noisy"))
        .ok_or_else(|| Error::InvalidArgument("scoring needs a test split under <data>/test/".into()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.2}"))
}

fn score_rows(label: &str, stage: &StageSummary, out: &mut String) {
    for c in &stage.classes {
        out.push_str(&format!(
            "{label},{},{},{}\n",
            c.class,
            fmt_opt(c.score.map(|s| s.accuracy)),
            fmt_opt(c.score.map(|s| s.dice)),
        ));
    }
}

fn apply_sweep_value(config: &mut RunConfig, param: SweepParam, raw: &str) -> Result<()> {
    let bad = || Error::InvalidArgument(format!("bad sweep value {raw:?}"));
    match param {
        SweepParam::Beta => config.beta = raw.trim().parse().map_err(|_| bad())?,
        SweepParam::NumPasses => config.num_passes = raw.trim().parse().map_err(|_| bad())?,
        SweepParam::Tau => config.tau = raw.trim().parse().map_err(|_| bad())?,
    }
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let inp = load_inputs(&a.run)?;
    let name = match a.param {
        SweepParam::Beta => "beta",
        SweepParam::NumPasses => "num_passes",
        SweepParam::Tau => "tau",
    };
    // validate every value before spending time on training
    let configs: Vec<(String, RunConfig)> = a
        .values
        .iter()
        .map(|raw| {
            let mut config = inp.config.clone();
            apply_sweep_value(&mut config, a.param, raw)?;
            config.validate(&a.run.config)?;
            Ok((raw.trim().to_owned(), config))
        })
        .collect::<Result<_>>()?;
    let mut out = String::from("value,class,acc,dice\n");
    for (value, config) in &configs {
        info!("sweep {name} = {value}");
        let dir = RunDir::create(inp.dir.path().join(format!("{name}_{value}")))?;
        let report = execute_pipeline(&inp.dataset, inp.test.as_ref(), config, &dir)?;
        score_rows(value, final_prediction(&report)?, &mut out);
    }
    let path = inp.dir.path().join("sweep.csv");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

pub const ABLATIONS: [&str; 4] = ["full", "wo_pixel_weights", "wo_image_weights", "wo_retraining"];

/// Full pipeline plus the pixel- and image-weight ablations. The
/// no-retraining row is the full run's round-0 model.
pub fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let inp = load_inputs(a)?;
    let variants = [
        ("full", inp.config.clone()),
        (
            "wo_pixel_weights",
            RunConfig {
                ablate_pixel_weights: true,
                ..inp.config.clone()
            },
        ),
        (
            "wo_image_weights",
            RunConfig {
                ablate_image_weights: true,
                ..inp.config.clone()
            },
        ),
    ];
    let mut out = String::from("configuration,class,acc,dice\n");
    let mut initial = None;
    for (name, config) in &variants {
        info!("ablation {name}");
        let dir = RunDir::create(inp.dir.path().join(name))?;
        let report = execute_pipeline(&inp.dataset, inp.test.as_ref(), config, &dir)?;
        score_rows(name, final_prediction(&report)?, &mut out);
        if *name == "full" {
            initial = report.stage("pred_noisy").cloned();
        }
    }
    let initial = initial
        .ok_or_else(|| Error::InvalidArgument("ablation needs a test split under <data>/test/".into()))?;
    score_rows("wo_retraining", &initial, &mut out);
    let path = inp.dir.path().join("ablation.csv");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}
