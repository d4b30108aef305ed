//! `lmkan` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 non-finite loss,
//! 4 fusion precondition, 1 anything else (I/O, bad model file).

mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lmkan::bench::{bench_model, BenchReport, DEFAULT_TIMED, DEFAULT_WARMUP};
use lmkan::cost::param_ratio_vs_linear;
use lmkan::io::{load_model, save_model, DType};
use lmkan::training::{evaluate_mse, make_teacher, run_distill, sweep_grid_resolution, HistoryRow};
use lmkan::{Block, Model};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Fusion(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Fusion(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Fusion(m) => write!(f, "fusion precondition: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<lmkan::Error> for CliError {
    fn from(e: lmkan::Error) -> Self {
        use lmkan::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::NonFinite { .. } => CliError::Numeric(msg),
            E::Fusion(_) | E::UnsupportedMode(_) | E::BatchNorm(_) => CliError::Fusion(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "lmkan", version, about = "Train, fuse, inspect and benchmark lmKAN models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Distil a student from the configured random teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean squared error of a saved model against the configured teacher.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Inference throughput at one or more batch sizes.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1024")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = DEFAULT_TIMED)]
        timed: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutputFormat,
    },
    /// Absorb preconditioning branches, gamma and batch norms into the coefficients.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DTypeArg,
    },
    /// Per-layer shapes, parameter counts and costs.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Final MSE of the configured lmKAN student at several grid resolutions.
    SweepGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,12,40")]
        grids: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F64,
    F32,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F64 => DType::F64,
            DTypeArg::F32 => DType::F32,
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LMKAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("LMKAN_THREADS: expected a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli.command));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("lmkan: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<u8, CliError> {
    match cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            model,
            config,
            samples,
            seed,
        } => cmd_eval(&model, &config, samples, seed),
        Command::Bench {
            model,
            batch,
            warmup,
            timed,
            seed,
            format,
        } => cmd_bench(&model, &batch, warmup, timed, seed, format),
        Command::Fuse { input, output, dtype } => cmd_fuse(&input, &output, dtype.into()),
        Command::Inspect { model, json } => cmd_inspect(&model, json),
        Command::SweepGrid { config, grids } => cmd_sweep(&config, &grids),
    }
}

fn cmd_train(path: &Path) -> Result<u8, CliError> {
    let cfg = RunConfig::load(path)?;
    let out = run_distill(&cfg.distill_config())?;
    save_model(&out.model, &cfg.io.model_out, cfg.io.dtype)?;
    let mut w = BufWriter::new(File::create(&cfg.io.history_csv)?);
    HistoryRow::write_csv(&out.history, &mut w)?;
    w.flush()?;
    println!("steps {}", out.history.len());
    println!("model {}", cfg.io.model_out.display());
    println!("history {}", cfg.io.history_csv.display());
    println!("final_mse {:e}", out.final_mse);
    Ok(0)
}

fn cmd_eval(model: &Path, config: &Path, samples: Option<usize>, seed: Option<u64>) -> Result<u8, CliError> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(model)?;
    let teacher = make_teacher(&cfg.teacher_spec())?;
    let mse = evaluate_mse(
        &model,
        &teacher,
        samples.unwrap_or(cfg.io.eval_samples),
        seed.unwrap_or(cfg.io.eval_seed),
    )?;
    println!("mse {mse:e}");
    Ok(0)
}

fn cmd_bench(
    path: &Path,
    batches: &[usize],
    warmup: usize,
    timed: usize,
    seed: u64,
    format: OutputFormat,
) -> Result<u8, CliError> {
    if batches.iter().any(|&b| b == 0) {
        return Err(CliError::Config("batch: sizes must be positive".into()));
    }
    if timed == 0 {
        return Err(CliError::Config("timed: at least one timed run is needed".into()));
    }
    let model = load_model(path)?;
    let reports = batches
        .iter()
        .map(|&b| bench_model(&model, b, warmup, timed, seed))
        .collect::<Result<Vec<BenchReport>, _>>()?;
    match format {
        OutputFormat::Csv => {
            println!("{}", BenchReport::CSV_HEADER);
            for r in &reports {
                println!("{}", r.to_csv());
            }
        }
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                threads: usize,
                reports: &'a [BenchReport],
            }
            let out = Out {
                threads: rayon::current_num_threads(),
                reports: &reports,
            };
            println!("{}", serde_json::to_string_pretty(&out).map_err(|e| CliError::Other(e.to_string()))?);
        }
    }
    Ok(0)
}

fn cmd_fuse(input: &Path, output: &Path, dtype: DType) -> Result<u8, CliError> {
    let model = load_model(input)?;
    let before = model.main_term_flops();
    let (fused, report) = model.fuse()?;
    save_model(&fused, output, dtype)?;
    println!("flops_before {before}");
    println!("flops_after {}", fused.main_term_flops());
    if !report.unfused_relu_last.is_empty() {
        eprintln!(
            "lmkan: warning: relu_last blocks {:?} keep their ReLU branch; only gamma and batch norm were absorbed",
            report.unfused_relu_last
        );
        return Err(CliError::Fusion(format!(
            "{} relu_last block(s) cannot be fused into pure lookup layers",
            report.unfused_relu_last.len()
        )));
    }
    Ok(0)
}

#[derive(Serialize)]
struct LayerRow {
    index: usize,
    kind: &'static str,
    n_in: usize,
    n_out: usize,
    grid: Option<usize>,
    gamma: Option<f64>,
    precond: Option<String>,
    params: usize,
    flops: u64,
    param_ratio_vs_linear: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    layers: Vec<LayerRow>,
    total_params: usize,
    total_flops: u64,
    fused: bool,
}

fn summarize(model: &Model) -> Summary {
    let mut layers = Vec::new();
    for (index, b) in model.blocks().iter().enumerate() {
        let single = Model::new(vec![b.clone()]).expect("single block");
        let row = match b {
            Block::Norm(bn) => LayerRow {
                index,
                kind: "norm",
                n_in: bn.dim(),
                n_out: bn.dim(),
                grid: None,
                gamma: None,
                precond: None,
                params: single.param_count(),
                flops: 0,
                param_ratio_vs_linear: None,
            },
            Block::LmKan { block, .. } => LayerRow {
                index,
                kind: "lmkan",
                n_in: block.n_in(),
                n_out: block.n_out(),
                grid: Some(block.layer.grid().intervals()),
                gamma: Some(block.layer.gamma()),
                precond: Some(block.mode().to_string()),
                params: single.param_count(),
                flops: single.main_term_flops(),
                param_ratio_vs_linear: Some(param_ratio_vs_linear(block.layer.grid().intervals())),
            },
            Block::Dense { linear, .. } => LayerRow {
                index,
                kind: "dense",
                n_in: linear.n_in(),
                n_out: linear.n_out(),
                grid: None,
                gamma: None,
                precond: None,
                params: single.param_count(),
                flops: single.main_term_flops(),
                param_ratio_vs_linear: None,
            },
        };
        layers.push(row);
    }
    Summary {
        layers,
        total_params: model.param_count(),
        total_flops: model.main_term_flops(),
        fused: model.is_lmkan() && model.is_fused(),
    }
}

fn cmd_inspect(path: &Path, json: bool) -> Result<u8, CliError> {
    let s = summarize(&load_model(path)?);
    if json {
        println!("{}", serde_json::to_string_pretty(&s).map_err(|e| CliError::Other(e.to_string()))?);
        return Ok(0);
    }
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    println!("layer  kind   n_in  n_out  G    gamma     precond     params      flops  ratio");
    for l in &s.layers {
        println!(
            "{:<6} {:<6} {:>5} {:>6} {:<4} {:<9} {:<11} {:>6} {:>10}  {}",
            l.index,
            l.kind,
            l.n_in,
            l.n_out,
            opt(l.grid.map(|g| g.to_string())),
            opt(l.gamma.map(|g| format!("{g}"))),
            opt(l.precond.clone()),
            l.params,
            l.flops,
            opt(l.param_ratio_vs_linear.map(|r| format!("{r}")))
        );
    }
    println!("total_params {}", s.total_params);
    println!("total_flops {}", s.total_flops);
    Ok(0)
}

fn cmd_sweep(path: &Path, grids: &[usize]) -> Result<u8, CliError> {
    let cfg = RunConfig::load(path)?;
    let rows = sweep_grid_resolution(&cfg.distill_config(), grids)?;
    let mut code = 0;
    println!("G,final_mse");
    for row in rows {
        match row.result {
            Ok(mse) => println!("{},{mse:e}", row.grid),
            Err(e) => {
                println!("{},error", row.grid);
                let e = CliError::from(e);
                eprintln!("lmkan: G={}: {e}", row.grid);
                if code == 0 {
                    code = e.code();
                }
            }
        }
    }
    Ok(code)
}
