use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use higenet::ablation::{format_table, run_ablation, AblationConfig};
use higenet::bench::{bench_attention, write_csv, BenchConfig, BenchKernel};
use higenet::config::RunConfig;
use higenet::csv_io::load_csv;
use higenet::pipeline::{load_and_prepare, run_eval, run_predict, run_train, CHECKPOINT_FILE};
use higenet::{Error, Result};
use higenet_core::model::Variant;

#[derive(Parser)]
#[command(name = "higenet", version, about = "Long-sequence time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured variant (none, M0..M5, full).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, test and write checkpoint, history.json and metrics.json.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to <out>/checkpoint.hgnt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast consecutive test rows and write forecast.csv.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First test row to forecast.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 288)]
        steps: usize,
    },
    /// Attention kernel microbenchmark; writes bench.csv.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16, 32, 64])]
        batches: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512, 768, 1024])]
        seq_lens: Vec<usize>,
        /// Comma-separated subset of canonical, prob_sparse, neural_sparse.
        #[arg(long, value_delimiter = ',')]
        kernels: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Train every variant at every horizon; writes ablation.json and ablation.txt.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
        /// Defaults to all eight.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Print parameter names, shapes and counts of a checkpoint as JSON.
    InspectCheckpoint { path: PathBuf },
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(v) = &args.variant {
        cfg.model.variant = parse_variant(v)?;
        cfg.variant = Some(v.clone());
    }
    Ok(cfg)
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::from_name(name).ok_or_else(|| Error::Config(format!("unknown variant `{name}`")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let prepared = load_and_prepare(&cfg)?;
            let outcome = run_train(&cfg, &prepared, &args.out)?;
            println!("{}", serde_json::to_string(&outcome.test)?);
        }
        Command::Eval { run, checkpoint } => {
            let cfg = load_config(&run)?;
            let prepared = load_and_prepare(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| run.out.join(CHECKPOINT_FILE));
            let m = run_eval(&cfg, &prepared, &ckpt, &run.out)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Predict {
            run,
            checkpoint,
            start,
            steps,
        } => {
            let cfg = load_config(&run)?;
            let prepared = load_and_prepare(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| run.out.join(CHECKPOINT_FILE));
            let rows = run_predict(&cfg, &prepared, &ckpt, &run.out, start, steps)?;
            println!("{} rows written to {}", rows.len(), run.out.join("forecast.csv").display());
        }
        Command::Bench {
            batches,
            seq_lens,
            kernels,
            repeats,
            warmup,
            seed,
            out,
        } => {
            let kernels = if kernels.is_empty() {
                BenchKernel::ALL.to_vec()
            } else {
                kernels
                    .iter()
                    .map(|k| BenchKernel::parse(k).ok_or_else(|| Error::Config(format!("unknown kernel `{k}`"))))
                    .collect::<Result<_>>()?
            };
            let cfg = BenchConfig {
                kernels,
                batches,
                seq_lens,
                repeats,
                warmup,
                seed,
                ..BenchConfig::default()
            };
            let records = bench_attention(&cfg, |r| {
                let status = r.failed.as_deref().unwrap_or("ok");
                eprintln!(
                    "{:<13} batch={:<3} L={:<5} median={:>12}ns dots={:<12} {status}",
                    r.kernel.name(),
                    r.batch,
                    r.seq_len,
                    r.median_ns,
                    r.dot_products
                );
            });
            let mut buf = Vec::new();
            write_csv(&mut buf, &records)?;
            write_text(&out, &String::from_utf8_lossy(&buf))?;
        }
        Command::Ablate {
            config,
            out,
            horizons,
            variants,
        } => {
            let run = RunConfig::load(&config)?;
            let frame = load_csv(&run.dataset.path, run.dataset.schema, run.dataset.target.as_deref())?;
            let mut cfg = AblationConfig::new(run.model, run.train);
            cfg.horizons = horizons;
            cfg.preprocessing = run.preprocessing;
            cfg.task = run.dataset.task;
            cfg.eval_windows = run.eval.windows;
            if !variants.is_empty() {
                cfg.variants = variants.iter().map(|v| parse_variant(v)).collect::<Result<_>>()?;
            }
            let rows = run_ablation(&cfg, &frame, |r| {
                eprintln!("{} h={} {}", r.variant, r.horizon, r.status);
            })?;
            write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
            let table = format_table(&rows);
            write_text(&out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::InspectCheckpoint { path } => {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let store = higenet_core::checkpoint::decode(&bytes)?;
            let params: Vec<serde_json::Value> = store
                .iter()
                .map(|(n, t)| serde_json::json!({ "name": n, "shape": t.shape(), "numel": t.len() }))
                .collect();
            let summary = serde_json::json!({ "tensors": store.len(), "parameters": store.numel(), "params": params });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
