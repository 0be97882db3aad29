use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use permnm::permlearn::{LayerSelection, Mode};
use permnm::pipeline::{
    cli_bench_permutation, cli_compare, cli_prune, generate_fixture, with_thread_pool, FixtureKind, Precision,
    RunConfig,
};
use permnm::{Error, Metric, NmConfig};

#[derive(Parser)]
#[command(name = "permnm", version, about = "Learned channel permutations for N:M pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn permutations, fold them and export the pruned model.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare identity, heuristic, learned and oracle permutations.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time index gather against dense permutation matmul.
    Bench {
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
    },
    /// Write synthetic fixtures.
    Generate {
        #[command(subcommand)]
        kind: GenerateKind,
    },
}

#[derive(Subcommand)]
enum GenerateKind {
    /// Gaussian MLP, e.g. `--dims 16,8,4`.
    Mlp {
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian calibration activations.
    Calib {
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        features: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search for a layer where score-maximizing permutation hurts output.
    Fig1Search {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value = "2:4")]
    nm: NmConfig,
    #[arg(long, default_value = "wanda")]
    metric: Metric,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    tau_start: f64,
    #[arg(long, default_value_t = 0.1)]
    tau_end: f64,
    #[arg(long, default_value = "layerwise")]
    mode: Mode,
    /// `all`, `last:K` or comma-separated layer names.
    #[arg(long, default_value = "all")]
    partial_layers: LayerSelection,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    precision: Precision,
}

impl From<RunArgs> for RunConfig {
    fn from(a: RunArgs) -> Self {
        RunConfig {
            model: a.model,
            calib: a.calib,
            nm: a.nm,
            metric: a.metric,
            block_size: a.block_size,
            steps: a.steps,
            lr: a.lr,
            sinkhorn_iters: a.sinkhorn_iters,
            tau_start: a.tau_start,
            tau_end: a.tau_end,
            mode: a.mode,
            partial_layers: a.partial_layers,
            seed: a.seed,
            precision: a.precision,
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prune { run, out } => {
            let art = cli_prune(&run.into(), &out)?;
            println!("{}", art.report.to_json()?);
            eprintln!("wrote {}", out.display());
        }
        Command::Compare { run, out } => {
            let report = cli_compare(&run.into())?;
            match out {
                Some(p) => report.write_to(p)?,
                None => println!("{}", report.to_json()?),
            }
        }
        Command::Bench { n, rows, iterations } => {
            let r = cli_bench_permutation(n, rows, iterations)?;
            log::info!("gather {} ns, dense {} ns", r.gather_median_ns, r.dense_median_ns);
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Generate { kind } => {
            let (kind, seed, out) = match kind {
                GenerateKind::Mlp { dims, seed, out } => (FixtureKind::Mlp { dims }, seed, out),
                GenerateKind::Calib {
                    samples,
                    features,
                    seed,
                    out,
                } => (FixtureKind::Calibration { samples, features }, seed, out),
                GenerateKind::Fig1Search { seed, out } => (FixtureKind::Fig1Search, seed, out),
            };
            for p in generate_fixture(&kind, seed, out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match with_thread_pool(|| run(cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({"error": e.code(), "message": e.to_string()});
            eprintln!("{msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
