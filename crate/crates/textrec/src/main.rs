//! `textrec` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use textrec::cli::{
    cmd_compare, cmd_evaluate, cmd_ingest, cmd_recommend, cmd_split, cmd_train, DatasetKind,
    RunConfig,
};
use textrec::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "textrec",
    version,
    about = "Generative sequential recommendation: ingest, train, recommend, evaluate"
)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed recorded in every artifact manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for the command's artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw interaction files into a catalog + sequences + split bundle.
    Ingest {
        /// Dataset kind: movielens or amazon.
        #[arg(long)]
        kind: Option<String>,
        /// MovieLens ratings.csv.
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// MovieLens movies.csv.
        #[arg(long)]
        movies: Option<PathBuf>,
        /// Amazon reviews JSON-lines.
        #[arg(long)]
        reviews: Option<PathBuf>,
        /// Amazon metadata JSON-lines.
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Abort on the first malformed row instead of skipping.
        #[arg(long)]
        strict: bool,
        /// Emit one training example per history prefix.
        #[arg(long)]
        sliding_window: bool,
        /// Minimum interactions per kept user.
        #[arg(long)]
        min_seq_len: Option<usize>,
    },
    /// Re-split an existing sequences file leave-one-out.
    Split {
        /// Path to a sequences.jsonl file.
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long)]
        sliding_window: bool,
    },
    /// Train the tokenizer and model on a dataset bundle.
    Train {
        /// Directory holding the ingested bundle.
        #[arg(long)]
        bundle: PathBuf,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Run at most this many epochs in this invocation.
        #[arg(long)]
        epoch_limit: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        warmup_steps: Option<u64>,
        #[arg(long)]
        adapters_only: bool,
    },
    /// Generate constrained top-k recommendations for the held-out split.
    Recommend {
        #[arg(long)]
        bundle: PathBuf,
        /// Directory with best.ckpt and tokenizer.json (a train output dir).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        beam_width: Option<usize>,
        /// Score the validation split instead of the test split.
        #[arg(long)]
        valid: bool,
    },
    /// Score a predictions file with HR@k and NDCG@k.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated cutoffs, e.g. 5,10.
        #[arg(long, default_value = "5,10")]
        ks: String,
        #[arg(long, default_value = "")]
        dataset_name: String,
        #[arg(long, default_value = "")]
        model_name: String,
    },
    /// Render a side-by-side table of several report.json files.
    Compare {
        /// report.json files to compare.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn required_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::config("--out <DIR> is required"))
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    match cli.command {
        Command::Ingest {
            kind,
            ratings,
            movies,
            reviews,
            metadata,
            strict,
            sliding_window,
            min_seq_len,
        } => {
            let mut config = config;
            if let Some(kind) = kind {
                config.data.kind = Some(kind.parse::<DatasetKind>()?);
            }
            config.data.ratings = ratings.or(config.data.ratings);
            config.data.movies = movies.or(config.data.movies);
            config.data.reviews = reviews.or(config.data.reviews);
            config.data.metadata = metadata.or(config.data.metadata);
            config.data.strict |= strict;
            config.data.sliding_window |= sliding_window;
            if let Some(n) = min_seq_len {
                config.data.min_sequence_length = n;
            }
            cmd_ingest(&config, &required_out(cli.out)?)
        }
        Command::Split {
            sequences,
            sliding_window,
        } => {
            let mut config = config;
            config.data.sliding_window |= sliding_window;
            cmd_split(&config, &sequences, &required_out(cli.out)?)
        }
        Command::Train {
            bundle,
            resume,
            epoch_limit,
            epochs,
            batch_size,
            peak_lr,
            warmup_steps,
            adapters_only,
        } => {
            let mut config = config;
            if let Some(v) = epochs {
                config.train.epochs = v;
            }
            if let Some(v) = batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = peak_lr {
                config.train.peak_lr = v;
            }
            if let Some(v) = warmup_steps {
                config.train.warmup_steps = v;
            }
            config.train.adapters_only |= adapters_only;
            cmd_train(&config, &bundle, &required_out(cli.out)?, resume, epoch_limit)
        }
        Command::Recommend {
            bundle,
            model,
            k,
            beam_width,
            valid,
        } => {
            let mut config = config;
            if let Some(v) = k {
                config.decode.k = v;
                config.decode.beam_width = config.decode.beam_width.max(2 * v).max(20);
            }
            if let Some(v) = beam_width {
                config.decode.beam_width = v;
            }
            cmd_recommend(&config, &bundle, &model, &required_out(cli.out)?, valid)
        }
        Command::Evaluate {
            predictions,
            bundle,
            ks,
            dataset_name,
            model_name,
        } => {
            let ks: Vec<usize> = ks
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad k value '{s}'")))
                })
                .collect::<Result<_>>()?;
            cmd_evaluate(
                &config,
                &predictions,
                &bundle,
                &required_out(cli.out)?,
                &ks,
                &dataset_name,
                &model_name,
            )
        }
        Command::Compare { reports } => cmd_compare(&config, &reports, &required_out(cli.out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap handles --help/--version as "errors" with successful exit
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
