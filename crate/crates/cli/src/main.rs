//! `distillab`: generate synthetic corpora, train contrastive teachers,
//! distill students with logit shuffling and ensemble averaging, iterate
//! self-training rounds, and measure everything.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::Settings;

#[derive(Parser)]
#[command(name = "distillab", version, about)]
struct Cli {
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base RNG seed; overrides DLAB_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct TrainFlags {
    /// Directory holding train.txt, test.txt, dev-pairs.tsv, test-pairs.tsv.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Optimizer steps; defaults to one epoch over the training corpus.
    #[arg(long)]
    steps: Option<usize>,
    /// Separate seed for parameter initialization, so several runs can share
    /// one starting point while their training randomness differs.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    dim_token: Option<usize>,
    #[arg(long)]
    dim_hidden: Option<usize>,
    #[arg(long)]
    dim_output: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Hash-tokenizer vocabulary size; must match the generated data.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl TrainFlags {
    fn overlay(&self, s: &mut Settings) {
        s.steps = self.steps.or(s.steps);
        s.init_seed = self.init_seed.or(s.init_seed);
        s.learning_rate = self.learning_rate.or(s.learning_rate);
        s.eval_interval = self.eval_interval.or(s.eval_interval);
        s.batch_size = self.batch_size.or(s.batch_size);
        s.tau = self.tau.or(s.tau);
        s.dim_token = self.dim_token.or(s.dim_token);
        s.dim_hidden = self.dim_hidden.or(s.dim_hidden);
        s.dim_output = self.dim_output.or(s.dim_output);
        s.dropout = self.dropout.or(s.dropout);
        s.vocab = self.vocab.or(s.vocab);
        s.max_len = self.max_len.or(s.max_len);
    }
}

#[derive(Args, Default)]
struct DistillFlags {
    /// Distillation weight in the combined objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Student softmax temperature of the distillation term.
    #[arg(long)]
    tau_s: Option<f64>,
    /// Teacher softmax temperature of the distillation term.
    #[arg(long)]
    tau_t: Option<f64>,
    /// Teacher logit shuffle: none | group-p | rank-interval.
    #[arg(long)]
    shuffle_mode: Option<String>,
    /// Cumulative-probability group width for group-p.
    #[arg(long)]
    p: Option<f64>,
    /// Lowest shuffled rank (1-based) for rank-interval.
    #[arg(long)]
    lo: Option<usize>,
    /// Highest shuffled rank (inclusive) for rank-interval.
    #[arg(long)]
    hi: Option<usize>,
    /// Teacher-inference fan-out per step.
    #[arg(long)]
    threads: Option<usize>,
}

impl DistillFlags {
    fn overlay(&self, s: &mut Settings) {
        s.lambda = self.lambda.or(s.lambda);
        s.tau_s = self.tau_s.or(s.tau_s);
        s.tau_t = self.tau_t.or(s.tau_t);
        s.shuffle_mode = self.shuffle_mode.clone().or(s.shuffle_mode.take());
        s.p = self.p.or(s.p);
        s.lo = self.lo.or(s.lo);
        s.hi = self.hi.or(s.hi);
        s.threads = self.threads.or(s.threads);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpus splits and scored sentence pairs.
    GenData {
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        topics: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        dev_pairs: Option<usize>,
        #[arg(long)]
        test_pairs: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Topic mixture sharpness; smaller is sharper.
        #[arg(long)]
        concentration: Option<f64>,
    },
    /// Step 1: train a contrastive teacher.
    TrainTeacher {
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Step 2: distill a student from teacher checkpoints.
    Distill {
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        distill: DistillFlags,
        /// Teacher checkpoint paths (comma-separated or repeated).
        #[arg(long, required = true, value_delimiter = ',')]
        teachers: Vec<PathBuf>,
    },
    /// Step 3: iterative rounds where students become teachers.
    SelfTrain {
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        distill: DistillFlags,
        /// Distillation rounds after the initial teacher round.
        #[arg(long)]
        rounds: Option<usize>,
        /// Teacher ensemble size per round.
        #[arg(long)]
        ensemble_size: Option<usize>,
    },
    /// Spearman of a checkpoint against a scored pair file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Full diagnostics report for a checkpoint over the data splits.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Optional teacher checkpoints for ensemble diagnostics.
        #[arg(long, value_delimiter = ',')]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// One-knob-at-a-time ablation over p, lambda, and temperatures.
    Sweep {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        ensemble_size: Option<usize>,
        /// Comma-separated group widths; defaults to the reference grid.
        #[arg(long)]
        p_grid: Option<String>,
        #[arg(long)]
        lambda_grid: Option<String>,
        #[arg(long)]
        tau_grid: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    commands::ensure_usable_out(&cli.out)?;
    let mut flags = Settings {
        seed: cli.seed,
        ..Settings::default()
    };
    match &cli.command {
        Command::GenData {
            vocab,
            topics,
            train_size,
            test_size,
            dev_pairs,
            test_pairs,
            min_len,
            max_len,
            concentration,
        } => {
            flags.vocab = *vocab;
            flags.topics = *topics;
            flags.train_size = *train_size;
            flags.test_size = *test_size;
            flags.dev_pairs = *dev_pairs;
            flags.test_pairs = *test_pairs;
            flags.min_len = *min_len;
            flags.max_len = *max_len;
            flags.concentration = *concentration;
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            commands::gen_data(&cli.out, &settings)
        }
        Command::TrainTeacher { train } => {
            train.overlay(&mut flags);
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            commands::train_teacher_cmd(&cli.out, &settings, &train.data)
        }
        Command::Distill {
            train,
            distill,
            teachers,
        } => {
            train.overlay(&mut flags);
            distill.overlay(&mut flags);
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            commands::distill_cmd(&cli.out, &settings, &train.data, teachers)
        }
        Command::SelfTrain {
            train,
            distill,
            rounds,
            ensemble_size,
        } => {
            train.overlay(&mut flags);
            distill.overlay(&mut flags);
            flags.rounds = rounds.or(flags.rounds);
            flags.ensemble_size = ensemble_size.or(flags.ensemble_size);
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            commands::self_train_cmd(&cli.out, &settings, &train.data)
        }
        Command::Evaluate {
            checkpoint,
            pairs,
            max_len,
        } => {
            flags.max_len = *max_len;
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            commands::evaluate_cmd(&cli.out, &settings, checkpoint, pairs)
        }
        Command::Diagnose {
            checkpoint,
            data,
            teachers,
            top_k,
            batch_size,
            max_len,
        } => {
            flags.top_k = *top_k;
            flags.batch_size = *batch_size;
            flags.max_len = *max_len;
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            commands::diagnose_cmd(&cli.out, &settings, checkpoint, data, teachers)
        }
        Command::Sweep {
            train,
            threads,
            ensemble_size,
            p_grid,
            lambda_grid,
            tau_grid,
        } => {
            train.overlay(&mut flags);
            flags.threads = threads.or(flags.threads);
            flags.ensemble_size = ensemble_size.or(flags.ensemble_size);
            let settings = config::resolve(cli.config.as_deref(), &flags)?;
            let mut grids = commands::SweepGrids::default();
            if let Some(raw) = p_grid {
                grids.p = commands::parse_grid(raw)?;
            }
            if let Some(raw) = lambda_grid {
                grids.lambda = commands::parse_grid(raw)?;
            }
            if let Some(raw) = tau_grid {
                grids.tau = commands::parse_grid(raw)?;
            }
            commands::sweep_cmd(&cli.out, &settings, &train.data, &grids)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
