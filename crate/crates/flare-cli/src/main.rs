use clap::{Parser, Subcommand};
use flare_cli::commands;
use std::path::PathBuf;

/// Latent-token attention toolkit: generate synthetic PDE data, train and
/// evaluate models, probe communication spectra, benchmark mixer scaling.
#[derive(Parser)]
#[command(
    name = "flare",
    version,
    after_help = "Exit codes: 0 success, 2 validation error, 3 runtime error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Darcy-flow dataset (train/test split plus sidecar).
    GenData {
        /// Output directory for train.pcf, test.pcf and train.meta.json.
        #[arg(long)]
        out: PathBuf,
        /// Grid resolution g; each sample has g*g points.
        #[arg(long, default_value_t = 32)]
        grid: usize,
        /// Training samples.
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        /// Test samples.
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        /// Base seed; sample i uses seed+i, the test split continues after.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite files in a non-empty output directory.
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Train a model; writes run.csv, final.flck and resolved.json.
    Train {
        /// JSON config file with flat dotted keys (see docs/config.md).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.pcf and test.pcf.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Stop once this many epochs are done (resume later to continue).
        #[arg(long)]
        stop_after: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override both model.seed and train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Config override as key=value; repeatable, wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint; prints JSON {mean_rel_l2, per_sample}.
    Eval {
        /// Checkpoint file (.flck).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding train.pcf and test.pcf.
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Eigenvalues of each head's token-communication operator at one block.
    Spectra {
        /// Checkpoint file (.flck).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding train.pcf and test.pcf.
        #[arg(long)]
        data: PathBuf,
        /// Which split to read the probe sample from.
        #[arg(long, default_value = "test")]
        split: String,
        /// Sample index within the split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Block index to probe.
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Relative eigenvalue threshold for the effective-rank summary.
        #[arg(long, default_value_t = 1e-6)]
        tau: f64,
        /// Cross-check eigenvalues against the dense oracle (slower).
        #[arg(long, default_value_t = false)]
        check: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time mixer forward+backward across token counts; prints CSV.
    Bench {
        /// Mixer to measure: "flare" or "vanilla".
        #[arg(long, default_value = "flare")]
        mixer: String,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',', default_value = "4096,8192,16384")]
        n: Vec<usize>,
        /// Latent tokens (flare only; recorded in the CSV either way).
        #[arg(long, default_value_t = 64)]
        m: usize,
        /// Feature width.
        #[arg(long, default_value_t = 64)]
        c: usize,
        /// Attention heads.
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Timed repetitions per point (after one warm-up).
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Worker threads; keep 1 for clean scaling exponents.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Seed for the random inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { out, grid, n_train, n_test, seed, force } => {
            commands::cmd_gen_data(out, *grid, *n_train, *n_test, *seed, *force)
        }
        Command::Train { config, data, out, stop_after, resume, seed, set } => {
            commands::cmd_train(&commands::TrainArgs {
                config: config.clone(),
                data: data.clone(),
                out: out.clone(),
                stop_after: *stop_after,
                resume: resume.clone(),
                seed: *seed,
                overrides: set.clone(),
            })
        }
        Command::Eval { checkpoint, data, split } => commands::cmd_eval(checkpoint, data, split),
        Command::Spectra { checkpoint, data, split, sample, block, tau, check, out } => {
            commands::cmd_spectra(
                checkpoint,
                data,
                split,
                *sample,
                *block,
                *tau,
                *check,
                out.as_deref(),
            )
        }
        Command::Bench { mixer, n, m, c, heads, reps, threads, seed, out } => {
            commands::cmd_bench(mixer, n, *m, *c, *heads, *reps, *threads, *seed, out.as_deref())
        }
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
