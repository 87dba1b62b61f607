use std::path::PathBuf;
use std::process::exit;

use clap::{Args, Parser, Subcommand};

use ago::cli::{
    cmd_fuse_analyze, cmd_partition, cmd_pipeline, cmd_stats, cmd_tune, parse_tile,
    resolve_params, CliError, FuseConfig, PartitionConfig, PipelineCliConfig, TuneCliConfig,
};
use ago::tuner::{CostConfig, SearchSpace};

#[derive(Parser)]
#[command(
    name = "ago",
    version,
    about = "Constraint-free graph partitioning, fusion analysis, and schedule tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WeightArgs {
    /// Weight model slope.
    #[arg(long = "weight-c", default_value_t = 1.0)]
    weight_c: f64,
    /// Weight model bias.
    #[arg(long = "weight-b", default_value_t = 0.0)]
    weight_b: f64,
    /// Fit (c, b) from a budget CSV instead (rows: budget,EXTxEXT,...).
    #[arg(long = "fit-csv")]
    fit_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Simulated cache size in lines.
    #[arg(long = "cache-lines", default_value_t = 512)]
    cache_lines: usize,
    /// Elements per cache line.
    #[arg(long = "line-elems", default_value_t = 8)]
    line_elems: usize,
    /// Weight of the multiply-accumulate term.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Weight of the cache-miss term.
    #[arg(long, default_value_t = 16.0)]
    beta: f64,
    /// Disable intensive fusion in the search space.
    #[arg(long = "no-intensive")]
    no_intensive: bool,
    /// Disable conventional fusion in the search space.
    #[arg(long = "no-conventional")]
    no_conventional: bool,
}

impl CostArgs {
    fn cost(&self) -> Result<CostConfig, CliError> {
        if self.cache_lines == 0 || self.line_elems == 0 {
            return Err(CliError::Usage(
                "cache geometry must be positive".to_string(),
            ));
        }
        Ok(CostConfig {
            cache_lines: self.cache_lines,
            line_elems: self.line_elems,
            alpha: self.alpha,
            beta: self.beta,
        })
    }

    fn space(&self) -> SearchSpace {
        SearchSpace {
            allow_conventional: !self.no_conventional,
            allow_intensive: !self.no_intensive,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Partition a graph (clustering vs the single-complex-op baseline).
    Partition {
        /// Graph document (JSON).
        input: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
        /// Maximum subgraph weight Td.
        #[arg(long, default_value_t = 1000.0)]
        threshold: f64,
        /// Cap on complex operators per subgraph.
        #[arg(long = "max-complex")]
        max_complex: Option<usize>,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Print partition statistics without writing files.
    Stats {
        input: PathBuf,
        #[arg(long, default_value_t = 1000.0)]
        threshold: f64,
        #[arg(long = "max-complex")]
        max_complex: Option<usize>,
        #[command(flatten)]
        weights: WeightArgs,
    },
    /// Per-pair fusion verdicts, trip counts, and redundancy ratios.
    FuseAnalyze {
        input: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
        /// Downstream boundary tile, e.g. "o=1,h=1,w=16" (default all-ones).
        #[arg(long)]
        tile: Option<String>,
    },
    /// Tune the whole graph as one subgraph.
    Tune {
        input: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, env = "AGO_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Partition, divide-and-conquer tune every subgraph, emit a report.
    Pipeline {
        input: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1000.0)]
        threshold: f64,
        /// Weight threshold for the Split stage.
        #[arg(long = "mini-threshold", default_value_t = 500.0)]
        mini_threshold: f64,
        #[arg(long = "mini-budget", default_value_t = 100)]
        mini_budget: usize,
        #[arg(long = "join-budget", default_value_t = 100)]
        join_budget: usize,
        /// Stabilization window (trials).
        #[arg(long, default_value_t = 16)]
        window: usize,
        /// Stabilization threshold on relative best-cost improvement.
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, env = "AGO_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long = "max-complex")]
        max_complex: Option<usize>,
        #[command(flatten)]
        weights: WeightArgs,
        #[command(flatten)]
        cost: CostArgs,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Partition {
            input,
            out_dir,
            threshold,
            max_complex,
            weights,
        } => cmd_partition(&PartitionConfig {
            input,
            out_dir,
            threshold,
            max_complex,
            params: resolve_params(weights.weight_c, weights.weight_b, weights.fit_csv.as_deref())?,
        }),
        Command::Stats {
            input,
            threshold,
            max_complex,
            weights,
        } => cmd_stats(&PartitionConfig {
            input,
            out_dir: None,
            threshold,
            max_complex,
            params: resolve_params(weights.weight_c, weights.weight_b, weights.fit_csv.as_deref())?,
        }),
        Command::FuseAnalyze {
            input,
            out_dir,
            tile,
        } => cmd_fuse_analyze(&FuseConfig {
            input,
            out_dir,
            tile: tile.as_deref().map(parse_tile).transpose()?,
        }),
        Command::Tune {
            input,
            out_dir,
            budget,
            seed,
            cost,
        } => cmd_tune(&TuneCliConfig {
            input,
            out_dir,
            budget,
            seed,
            cost: cost.cost()?,
            space: cost.space(),
        }),
        Command::Pipeline {
            input,
            out_dir,
            threshold,
            mini_threshold,
            mini_budget,
            join_budget,
            window,
            epsilon,
            seed,
            max_complex,
            weights,
            cost,
        } => cmd_pipeline(&PipelineCliConfig {
            input,
            out_dir,
            threshold,
            mini_threshold,
            mini_budget,
            join_budget,
            window,
            epsilon,
            seed,
            max_complex,
            params: resolve_params(weights.weight_c, weights.weight_b, weights.fit_csv.as_deref())?,
            cost: cost.cost()?,
            space: cost.space(),
        }),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            exit(1);
        }
    };
    match run(cli) {
        Ok(output) => print!("{output}"),
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.code());
        }
    }
}
