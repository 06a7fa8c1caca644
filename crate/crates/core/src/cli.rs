//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::benchmark_scaling;
use crate::checkpoint::Checkpoint;
use crate::config::{apply_variant, ModelConfig, Variant};
use crate::data::{
    self, chronological_split, load_csv, make_windows, synth_generate, write_atomic, write_csv_atomic,
    CsvOptions, RawSeries, SynthKind, Windowed,
};
use crate::error::{Error, Result};
use crate::model::{AsgMamba, ForwardOptions};
use crate::tensor::Tensor;
use crate::train::{self, evaluate, evaluate_naive, Metrics, TrainRun};

#[derive(Parser, Debug)]
#[command(name = "asgmamba", version, about = "Spectrally gated multi-scale SSM forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a CSV and write checkpoint, metrics and loss trace.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Forecast the horizon after the last look-back window of a CSV.
    Forecast(ForecastArgs),
    /// Time forward passes over increasing look-back lengths.
    Bench(BenchArgs),
    /// Write a synthetic series.
    Synth(SynthArgs),
    /// Train every ablation variant and write one metrics row each.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds to run.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Per-patch gate CSV for the test split.
    #[arg(long)]
    pub gate_dump: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot CSV (step, truth, prediction) for one test window and variate.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub variate: usize,
    #[arg(long, default_value_t = 0)]
    pub window: usize,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "384,768,1536")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long = "snr-db", default_value_t = 10.0, allow_hyphen_values = true)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// Exit status for an error: 1 usage, 2 data, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Forecast(a) => cmd_forecast(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Resolved train invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub config: ModelConfig,
    pub data: PathBuf,
    pub variant: Variant,
    pub seed: u64,
    pub seeds: usize,
}

impl RunSpec {
    /// Model keys followed by the run keys; loadable with `--config`.
    pub fn manifest(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("data = {}\n", self.data.display()));
        s.push_str(&format!("variant = {}\n", self.variant.name()));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("seeds = {}\n", self.seeds));
        s
    }
}

#[derive(Default)]
struct RunKeys {
    data: Option<PathBuf>,
    variant: Option<String>,
    seed: Option<u64>,
    seeds: Option<usize>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {v:?}")))
}

/// Defaults, then the config file, then `--set` overrides.
fn resolve_config(args: &ConfigArgs) -> Result<(ModelConfig, RunKeys)> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        pairs.extend(crate::config::parse_kv(&text)?);
    }
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = ModelConfig::default();
    let mut keys = RunKeys::default();
    for (k, v) in pairs {
        match k.as_str() {
            "data" => keys.data = Some(PathBuf::from(v)),
            "variant" => keys.variant = Some(v),
            "seed" => keys.seed = Some(parse_num(&k, &v)?),
            "seeds" => keys.seeds = Some(parse_num(&k, &v)?),
            _ => cfg.set(&k, &v)?,
        }
    }
    Ok((cfg, keys))
}

fn load_series(path: &Path) -> Result<RawSeries> {
    load_csv(path, CsvOptions::default())
}

fn windows_for(series: &RawSeries, cfg: &ModelConfig) -> Result<Windowed> {
    let ranges = chronological_split(series.len(), &cfg.train.split)?;
    make_windows(series, &ranges, cfg.lookback, cfg.horizon)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

const METRICS_HEADER: [&str; 6] = ["dataset", "horizon", "variant", "seed", "mse", "mae"];

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn metrics_row(dataset: &str, horizon: usize, variant: &str, seed: u64, m: &Metrics) -> Vec<String> {
    vec![
        dataset.to_string(),
        horizon.to_string(),
        variant.to_string(),
        seed.to_string(),
        m.mse.to_string(),
        m.mae.to_string(),
    ]
}

/// Trains one seed and scores it on the test split.
pub fn train_and_evaluate(
    config: &ModelConfig,
    windows: &Windowed,
    seed: u64,
) -> Result<(AsgMamba, TrainRun, Metrics)> {
    let mut model = AsgMamba::new(config.clone(), seed)?;
    let run = train::train(&mut model, &windows.train, &windows.val, seed)?;
    let metrics = evaluate(&model, &windows.test)?;
    Ok((model, run, metrics))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut cfg, keys) = resolve_config(&a.cfg)?;
    if let Some(t) = a.horizon {
        cfg.horizon = t;
    }
    let data = a
        .data
        .or(keys.data)
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let variant: Variant = a
        .variant
        .or(keys.variant)
        .unwrap_or_else(|| "full".into())
        .parse()?;
    let seed = a.seed.or(keys.seed).unwrap_or(0);
    let seeds = a.seeds.or(keys.seeds).unwrap_or(1).max(1);
    let series = load_series(&data)?;
    cfg.variates = series.variates();
    cfg = apply_variant(&cfg, variant);
    cfg.validate()?;
    let spec = RunSpec {
        config: cfg,
        data,
        variant,
        seed,
        seeds,
    };
    std::fs::create_dir_all(&a.out)?;
    write_atomic(a.out.join("manifest.txt"), spec.manifest().as_bytes())?;
    let windows = windows_for(&series, &spec.config)?;
    let naive = evaluate_naive(&windows.test)?;
    let name = dataset_name(&spec.data);
    let mut rows = Vec::new();
    for k in 0..seeds as u64 {
        let s = seed + k;
        let (model, run, metrics) = train_and_evaluate(&spec.config, &windows, s)?;
        println!(
            "{name} T={} variant={} seed={s}: mse {:.6} mae {:.6} (naive mse {:.6} mae {:.6})",
            spec.config.horizon,
            variant.name(),
            metrics.mse,
            metrics.mae,
            naive.mse,
            naive.mae
        );
        rows.push(metrics_row(&name, spec.config.horizon, variant.name(), s, &metrics));
        let loss_rows: Vec<Vec<String>> = run
            .epochs
            .iter()
            .map(|e| vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])
            .collect();
        write_csv_atomic(
            a.out.join(format!("loss_seed{s}.csv")),
            &header(&["epoch", "train_loss", "val_loss"]),
            &loss_rows,
        )?;
        let ckpt_name = if k == 0 {
            "checkpoint.asgm".to_string()
        } else {
            format!("checkpoint_seed{s}.asgm")
        };
        let ckpt = Checkpoint {
            model,
            scaler: Some(windows.train.scaler.clone()),
        };
        ckpt.save(a.out.join(ckpt_name))?;
        if k == 0 {
            if let Some(path) = &a.gate_dump {
                write_gate_dump(path, &ckpt.model, &windows.test, 64)?;
            }
        }
    }
    write_csv_atomic(a.out.join("metrics.csv"), &header(&METRICS_HEADER), &rows)
}

/// One row per patch of every branch for the first `max_windows` test
/// windows: branch, window, variate, patch index, band shares, mean gate.
pub fn write_gate_dump(path: &Path, model: &AsgMamba, ds: &data::WindowedDataset, max_windows: usize) -> Result<()> {
    let k = model.config.k_freq;
    let mut cols = vec!["branch".to_string(), "window".into(), "variate".into(), "patch_index".into()];
    if k == 3 {
        cols.extend(["low", "mid", "high"].map(String::from));
    } else {
        cols.extend((0..k).map(|i| format!("band{i}")));
    }
    cols.push("mean_gate".into());
    let m = ds.variates();
    let idx: Vec<usize> = (0..ds.len().min(max_windows)).collect();
    let mut rows = Vec::new();
    for chunk in idx.chunks(train::EVAL_BATCH) {
        let (x, _) = ds.batch(chunk);
        let opts = ForwardOptions {
            trace: true,
            ..ForwardOptions::eval()
        };
        let (_, traces, variates) = model.predict_traced(&x, opts)?;
        for tr in &traces {
            for (row, g) in tr.mean_gate().iter().enumerate() {
                let seq = row / tr.count;
                let mut r = vec![
                    tr.patch.to_string(),
                    chunk[seq / m].to_string(),
                    variates[seq].to_string(),
                    (row % tr.count).to_string(),
                ];
                r.extend(tr.descriptors.row(row).iter().map(|v| v.to_string()));
                r.push(g.to_string());
                rows.push(r);
            }
        }
    }
    write_csv_atomic(path, &cols, &rows)
}

/// `(step, truth, prediction)` rows for one variate of `[T, M]` tensors.
pub fn plot_rows(pred: &Tensor, truth: &Tensor, variate: usize) -> Result<Vec<(usize, f64, f64)>> {
    if pred.shape() != truth.shape() || pred.rank() != 2 {
        return Err(Error::shape("plot", pred.shape(), truth.shape()));
    }
    let m = pred.shape()[1];
    if variate >= m {
        return Err(Error::invalid(
            "plot",
            format!("variate {variate} out of range for {m} variates"),
        ));
    }
    Ok((0..pred.shape()[0])
        .map(|t| (t, truth.at(&[t, variate]), pred.at(&[t, variate])))
        .collect())
}

pub fn emit_plot_data(pred: &Tensor, truth: &Tensor, variate: usize, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = plot_rows(pred, truth, variate)?
        .into_iter()
        .map(|(s, t, p)| vec![s.to_string(), t.to_string(), p.to_string()])
        .collect();
    write_csv_atomic(path, &header(&["step", "truth", "prediction"]), &rows)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ckpt.model.config;
    if let Some(t) = a.horizon {
        if t != cfg.horizon {
            return Err(Error::Config(format!(
                "checkpoint forecasts {} steps, --horizon is {t}",
                cfg.horizon
            )));
        }
    }
    let series = load_series(&a.data)?;
    if series.variates() != cfg.variates {
        return Err(Error::Data(format!(
            "checkpoint expects {} variates, data has {}",
            cfg.variates,
            series.variates()
        )));
    }
    let windows = windows_for(&series, cfg)?;
    let metrics = evaluate(&ckpt.model, &windows.test)?;
    let naive = evaluate_naive(&windows.test)?;
    println!(
        "test mse {:.6} mae {:.6} (naive mse {:.6} mae {:.6}, {} windows)",
        metrics.mse, metrics.mae, naive.mse, naive.mae, metrics.windows
    );
    if let Some((rmse, rmae)) = metrics.raw {
        println!("raw-scale mse {rmse:.6} mae {rmae:.6}");
    }
    if let Some(out) = &a.out {
        let row = metrics_row(&dataset_name(&a.data), cfg.horizon, "checkpoint", 0, &metrics);
        write_csv_atomic(out, &header(&METRICS_HEADER), &[row])?;
    }
    if let Some(plot) = &a.plot {
        let ds = &windows.test;
        if a.window >= ds.len() {
            return Err(Error::Config(format!(
                "window {} out of range for {} test windows",
                a.window,
                ds.len()
            )));
        }
        let (x, y) = ds.batch(&[a.window]);
        let (t, m) = (cfg.horizon, cfg.variates);
        let pred = ckpt.model.predict(&x)?.reshape(vec![t, m])?;
        let truth = y.reshape(vec![t, m])?;
        emit_plot_data(&pred, &truth, a.variate, plot).map_err(|e| match e {
            Error::InvalidArgument { msg, .. } => Error::Config(msg),
            e => e,
        })?;
    }
    Ok(())
}

fn cmd_forecast(a: ForecastArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ckpt.model.config;
    let series = load_series(&a.data)?;
    if series.variates() != cfg.variates {
        return Err(Error::Data(format!(
            "checkpoint expects {} variates, data has {}",
            cfg.variates,
            series.variates()
        )));
    }
    if series.len() < cfg.lookback {
        return Err(Error::Data(format!(
            "forecast needs {} rows, data has {}",
            cfg.lookback,
            series.len()
        )));
    }
    let scaler = match &ckpt.scaler {
        Some(s) => s.clone(),
        None => windows_for(&series, cfg)?.train.scaler,
    };
    let window = series.slice(series.len() - cfg.lookback..series.len());
    let mut x = window.into_data();
    scaler.transform(&mut x);
    let x = Tensor::new(vec![1, cfg.lookback, cfg.variates], x)?;
    let mut y = ckpt.model.predict(&x)?.into_data();
    scaler.inverse(&mut y);
    let rows: Vec<Vec<String>> = y
        .chunks(cfg.variates)
        .map(|r| r.iter().map(|v| v.to_string()).collect())
        .collect();
    write_csv_atomic(&a.out, &series.names, &rows)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (cfg, _) = resolve_config(&a.cfg)?;
    let rows = benchmark_scaling(&cfg, &a.lengths, a.reps, a.batch, a.seed)?;
    let fmt_opt = |v: Option<f64>| v.map(|r| format!("{r:.4}")).unwrap_or_default();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.lookback.to_string(),
                format!("{:.4}", r.median_ms),
                r.peak_bytes.to_string(),
                fmt_opt(r.time_ratio),
                fmt_opt(r.peak_ratio),
            ]
        })
        .collect();
    let cols = header(&["lookback", "median_ms", "peak_bytes", "time_ratio", "peak_ratio"]);
    match &a.out {
        Some(path) => write_csv_atomic(path, &cols, &table)?,
        None => {
            println!("{}", cols.join(","));
            for r in &table {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let kind: SynthKind = a.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let series = synth_generate(kind, a.length, a.channels, a.snr_db, a.seed)?;
    data::write_series(&a.out, &series)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (mut cfg, keys) = resolve_config(&a.cfg)?;
    if let Some(t) = a.horizon {
        cfg.horizon = t;
    }
    let seed = a.seed.or(keys.seed).unwrap_or(0);
    let series = load_series(&a.data)?;
    cfg.variates = series.variates();
    let name = dataset_name(&a.data);
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let vc = apply_variant(&cfg, v);
        vc.validate()?;
        let windows = windows_for(&series, &vc)?;
        let (_, _, metrics) = train_and_evaluate(&vc, &windows, seed)?;
        println!("{name} {}: mse {:.6} mae {:.6}", v.name(), metrics.mse, metrics.mae);
        rows.push(metrics_row(&name, vc.horizon, v.name(), seed, &metrics));
    }
    write_csv_atomic(&a.out, &header(&METRICS_HEADER), &rows)
}
