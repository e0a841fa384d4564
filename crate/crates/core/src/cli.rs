//! Command-line front end. [`run_cli`] is what the `delayformer` binary
//! calls; it never panics on bad input and maps outcomes to exit codes
//! (0 success, 1 runtime failure, 2 usage error).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::embed::{MultivariateSeries, WindowPair};
use crate::io::{
    format_csv, load_checkpoint, load_csv, save_checkpoint, save_csv, select_channels, write_atomic, Checkpoint,
    RunConfig,
};
use crate::lorenz::{generate, LorenzConfig, NoiseMode};
use crate::model::{forward, ModelConfig};
use crate::pipeline::{
    evaluate, evaluate_predictions, fine_tune, model_gradcheck, persistence_baseline, split_series, train, EvalReport,
    NormalizerStats, RidgeBaseline, SplitRatios, TrainConfig, TrainingHistory,
};
use crate::tensor::GradcheckOptions;

#[derive(Parser, Debug)]
#[command(name = "delayformer", version, about = "Delay-embedding transformer forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the coupled Lorenz system and write it as CSV.
    GenerateLorenz(GenerateArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Score a checkpoint and the reference baselines on a test split.
    Evaluate(EvaluateArgs),
    /// Forecast the steps following a window CSV.
    Predict(PredictArgs),
    /// Warm-start a checkpoint on new data.
    Finetune(FinetuneArgs),
    /// Compare backward gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for every random draw of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Recorded in the outputs; all runs are single-threaded and
    /// reproducible for a fixed seed.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Measurement,
    Process,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// LorenzConfig JSON; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subsystems: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    record_stride: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Gaussian noise strength.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum)]
    noise_mode: Option<NoiseArg>,
    #[arg(long)]
    time_varying: bool,
    #[arg(long)]
    as_printed: bool,
    #[command(flatten)]
    common: Common,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated channel names or indices to keep.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    /// Overrides the generator noise strength of a Lorenz data section.
    #[arg(long)]
    noise: Option<f64>,
    /// Switches a Lorenz data section to the time-varying regime.
    #[arg(long)]
    time_varying: bool,
    #[command(flatten)]
    common: Common,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series CSV; the test split is scored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    /// Train/val/test ratios.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
    split: Vec<f64>,
    /// Candidate ridge penalties, chosen on the validation split.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-1, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6])]
    ridge_lambda: Vec<f64>,
    /// Window stride for the ridge training set.
    #[arg(long, default_value_t = 1)]
    ridge_stride: usize,
    #[command(flatten)]
    common: Common,
    /// Metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV whose last `W_in` rows form the input window.
    #[arg(long)]
    window: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Forecast CSV, one row per future step.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series CSV to adapt to.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration supplying training settings, and the data when
    /// `--data` is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Share of the training windows used, in [0, 1].
    #[arg(long)]
    fraction: f64,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    #[command(flatten)]
    common: Common,
    /// New checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of parameters compared.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[command(flatten)]
    common: Common,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::GenerateLorenz(a) => cmd_generate(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Finetune(a) => cmd_finetune(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
    }
    Ok(0)
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut cfg: LorenzConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => LorenzConfig::default(),
    };
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                cfg.$field = v;
            }
        };
    }
    set!(n_subsystems, a.subsystems);
    set!(n_points, a.points);
    set!(dt, a.dt);
    set!(record_stride, a.record_stride);
    set!(gamma, a.gamma);
    set!(sigma, a.sigma);
    set!(noise_strength, a.noise);
    set!(seed, a.common.seed);
    if let Some(mode) = a.noise_mode {
        cfg.noise_mode = match mode {
            NoiseArg::Measurement => NoiseMode::Measurement,
            NoiseArg::Process => NoiseMode::Process,
        };
    }
    cfg.time_varying |= a.time_varying;
    cfg.as_printed |= a.as_printed;
    let series = generate(&cfg)?;
    save_csv(&series, &a.out)?;
    Ok(())
}

fn history_csv(history: &TrainingHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in &history.epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    out
}

fn report_row(name: &str, report: &EvalReport) -> anyhow::Result<Value> {
    let mut row = serde_json::to_value(report)?;
    row.as_object_mut()
        .expect("report serializes to an object")
        .insert("model".into(), json!(name));
    Ok(row)
}

fn persistence_report(windows: &[WindowPair], stats: &NormalizerStats) -> anyhow::Result<EvalReport> {
    let horizon = windows.first().map_or(0, |w| w.target.shape()[1]);
    let preds = windows
        .iter()
        .map(|w| persistence_baseline(&w.input, horizon))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_predictions(&preds, windows, stats)?)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut rc = RunConfig::load(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new("")).to_path_buf();
    if let Some(seed) = a.common.seed {
        rc.model.seed = seed;
        rc.train.seed = seed;
        if let Some(l) = rc.data.lorenz.as_mut() {
            l.seed = seed;
        }
    }
    if a.channels.is_some() {
        rc.data.channels = a.channels;
    }
    if a.noise.is_some() || a.time_varying {
        let Some(l) = rc.data.lorenz.as_mut() else {
            bail!("--noise and --time-varying need a \"lorenz\" data section");
        };
        if let Some(n) = a.noise {
            l.noise_strength = n;
        }
        l.time_varying |= a.time_varying;
    }
    if let Some(out) = a.out {
        rc.output = out;
    }
    let series = rc.data.load(&base)?;
    let model = rc.model.resolve(series.n_channels())?;
    let outcome = train(&model, &series, &rc.train)?;

    let out_dir = &rc.output;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt = Checkpoint {
        params: outcome.params,
        stats: outcome.stats,
    };
    save_checkpoint(&ckpt, &out_dir.join("checkpoint.dlfm"))?;
    write_atomic(&out_dir.join("history.csv"), history_csv(&outcome.history).as_bytes())?;

    let (_, _, test) = split_series(&series, &rc.train.split)?;
    let test_windows = normalized_windows(&test, &ckpt.stats, &model, 1)?;
    let metrics = json!({
        "deterministic": a.common.deterministic,
        "config": rc,
        "best_epoch": outcome.history.best_epoch,
        "best_val_loss": outcome.history.best_val_loss,
        "steps": outcome.history.steps,
        "rows": [
            report_row("delayformer", &evaluate(&ckpt.params, &test_windows, &ckpt.stats)?)?,
            report_row("persistence", &persistence_report(&test_windows, &ckpt.stats)?)?,
        ],
    });
    write_json(&out_dir.join("metrics.json"), &metrics)?;
    write_atomic(&out_dir.join("config.json"), rc.to_json()?.as_bytes())?;
    Ok(())
}

fn normalized_windows(
    series: &MultivariateSeries,
    stats: &NormalizerStats,
    model: &ModelConfig,
    stride: usize,
) -> anyhow::Result<Vec<WindowPair>> {
    Ok(crate::embed::make_windows(
        &stats.apply(series)?,
        model.w_in,
        model.horizon,
        stride,
    )?)
}

/// Reorders `series` to the checkpoint's channel order when the names
/// match, after applying an explicit `--channels` selection.
fn align_channels(
    series: MultivariateSeries,
    selection: Option<&[String]>,
    stats: &NormalizerStats,
) -> anyhow::Result<MultivariateSeries> {
    let series = match selection {
        Some(sel) => select_channels(&series, sel)?,
        None => series,
    };
    let by_name: Option<Vec<usize>> = stats.channel_names.iter().map(|n| series.channel_index(n)).collect();
    match by_name {
        Some(idx) if series.n_channels() != idx.len() || idx.iter().enumerate().any(|(i, &j)| i != j) => {
            Ok(series.select_channels(&idx)?)
        }
        _ => Ok(series),
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.params.config.clone();
    let series = align_channels(load_csv(&a.data)?, a.channels.as_deref(), &ckpt.stats)?;
    if series.n_channels() != model.n_channels {
        bail!(
            "checkpoint expects {} channels, data has {}",
            model.n_channels,
            series.n_channels()
        );
    }
    let ratios = SplitRatios {
        train: a.split[0],
        val: a.split[1],
        test: a.split[2],
    };
    let (train_s, val_s, test_s) = split_series(&series, &ratios)?;
    let stats = &ckpt.stats;
    let test = normalized_windows(&test_s, stats, &model, 1)?;
    let train_w = normalized_windows(&train_s, stats, &model, a.ridge_stride)?;
    let val_w = normalized_windows(&val_s, stats, &model, 1)?;
    if test.is_empty() || train_w.is_empty() || val_w.is_empty() {
        bail!(
            "series of length {} is too short for every split to hold a window",
            series.len()
        );
    }
    let ridge = RidgeBaseline::fit_select(&train_w, &val_w, &a.ridge_lambda)?;
    let ridge_preds = test
        .iter()
        .map(|w| ridge.predict(&w.input))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ridge_row = report_row("ridge", &evaluate_predictions(&ridge_preds, &test, stats)?)?;
    ridge_row["lambda"] = json!(ridge.lambda);
    let metrics = json!({
        "deterministic": a.common.deterministic,
        "data": a.data,
        "split": ratios,
        "rows": [
            report_row("delayformer", &evaluate(&ckpt.params, &test, stats)?)?,
            report_row("persistence", &persistence_report(&test, stats)?)?,
            ridge_row,
        ],
    });
    write_json(&a.out, &metrics)
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = &ckpt.params.config;
    let series = align_channels(load_csv(&a.window)?, None, &ckpt.stats)?;
    if series.n_channels() != cfg.n_channels || series.len() < cfg.w_in {
        bail!(
            "window needs {} channels and at least {} rows, got {} and {}",
            cfg.n_channels,
            cfg.w_in,
            series.n_channels(),
            series.len()
        );
    }
    let window = ckpt
        .stats
        .apply(&series.slice_time(series.len() - cfg.w_in, series.len())?)?;
    let batch = window.values().clone().reshape(&[1, cfg.n_channels, cfg.w_in])?;
    let pred = forward(&batch, &ckpt.params)?.reshape(&[cfg.n_channels, cfg.horizon])?;
    let pred = ckpt.stats.invert_tensor(&pred)?;
    let forecast = MultivariateSeries::new(pred, ckpt.stats.channel_names.clone(), series.dt())?;
    write_atomic(&a.out, format_csv(&forecast).as_bytes())?;
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let rc = a.config.as_deref().map(RunConfig::load).transpose()?;
    let mut tc = rc
        .as_ref()
        .map(|r| r.train.clone())
        .unwrap_or_else(TrainConfig::default);
    if let Some(seed) = a.common.seed {
        tc.seed = seed;
    }
    let series = match (&a.data, &rc) {
        (Some(path), _) => load_csv(path)?,
        (None, Some(rc)) => {
            let base = a.config.as_deref().and_then(Path::parent).unwrap_or(Path::new(""));
            rc.data.load(base)?
        }
        (None, None) => bail!("finetune needs --data or --config"),
    };
    let series = align_channels(series, a.channels.as_deref(), &ckpt.stats)?;
    let outcome = fine_tune(&ckpt, &series, a.fraction, &tc)?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    let summary = json!({
        "deterministic": a.common.deterministic,
        "fraction": a.fraction,
        "windows_used": outcome.windows_used,
        "heads_reinitialized": outcome.heads_reinitialized,
        "zero_shot_val_loss": outcome.zero_shot_val_loss,
        "best_val_loss": outcome.history.as_ref().map(|h| h.best_val_loss),
    });
    println!("{summary}");
    Ok(())
}

/// The tiny model used by `gradcheck`.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_channels: 2,
        w_in: 12,
        horizon: 4,
        embed_dim: 5,
        p1: 4,
        p2: 5,
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        seed: 0,
    }
}

/// `gradcheck` passes below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let opts = GradcheckOptions {
        h: a.h,
        samples: Some(a.samples),
        seed: a.common.seed.unwrap_or(0),
        ..Default::default()
    };
    let report = model_gradcheck(&gradcheck_config(), 2, &opts)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "{}",
        json!({
            "max_rel_error": report.max_rel_error,
            "checked": report.checked,
            "tolerance": GRADCHECK_TOLERANCE,
            "pass": pass,
        })
    );
    Ok(if pass { 0 } else { 1 })
}
