//! Flat key=value configuration with strict precedence: command-line flags
//! override the DLAB_SEED environment variable, which overrides the config
//! file, which overrides built-in defaults. Unknown keys are rejected so a
//! typo never silently falls back to a default.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use distillab_core::data::GeneratorConfig;
use distillab_core::encoder::EncoderDims;
use distillab_core::logit_transform::ShuffleMode;
use distillab_core::training::TrainConfig;

/// Every tunable the config file may carry; None means "not set here".
#[derive(Debug, Default, Clone)]
pub struct Settings {
    pub seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub eval_interval: Option<usize>,
    pub batch_size: Option<usize>,
    pub ensemble_size: Option<usize>,
    pub rounds: Option<usize>,
    pub threads: Option<usize>,
    pub tau: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_t: Option<f64>,
    pub lambda: Option<f64>,
    pub p: Option<f64>,
    pub shuffle_mode: Option<String>,
    pub lo: Option<usize>,
    pub hi: Option<usize>,
    pub dim_token: Option<usize>,
    pub dim_hidden: Option<usize>,
    pub dim_output: Option<usize>,
    pub dropout: Option<f64>,
    pub vocab: Option<usize>,
    pub topics: Option<usize>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub dev_pairs: Option<usize>,
    pub test_pairs: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub concentration: Option<f64>,
    pub top_k: Option<usize>,
}

fn parse_into<T: std::str::FromStr>(slot: &mut Option<T>, key: &str, value: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    match value.parse() {
        Ok(v) => {
            *slot = Some(v);
            Ok(())
        }
        Err(e) => bail!("config key {key}: cannot parse {value:?}: {e}"),
    }
}

impl Settings {
    /// Sets one key; later assignments win over earlier ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => parse_into(&mut self.seed, key, value),
            "init-seed" => parse_into(&mut self.init_seed, key, value),
            "steps" => parse_into(&mut self.steps, key, value),
            "learning-rate" => parse_into(&mut self.learning_rate, key, value),
            "eval-interval" => parse_into(&mut self.eval_interval, key, value),
            "batch-size" => parse_into(&mut self.batch_size, key, value),
            "ensemble-size" => parse_into(&mut self.ensemble_size, key, value),
            "rounds" => parse_into(&mut self.rounds, key, value),
            "threads" => parse_into(&mut self.threads, key, value),
            "tau" => parse_into(&mut self.tau, key, value),
            "tau-s" => parse_into(&mut self.tau_s, key, value),
            "tau-t" => parse_into(&mut self.tau_t, key, value),
            "lambda" => parse_into(&mut self.lambda, key, value),
            "p" => parse_into(&mut self.p, key, value),
            "shuffle-mode" => {
                self.shuffle_mode = Some(value.to_string());
                Ok(())
            }
            "lo" => parse_into(&mut self.lo, key, value),
            "hi" => parse_into(&mut self.hi, key, value),
            "dim-token" => parse_into(&mut self.dim_token, key, value),
            "dim-hidden" => parse_into(&mut self.dim_hidden, key, value),
            "dim-output" => parse_into(&mut self.dim_output, key, value),
            "dropout" => parse_into(&mut self.dropout, key, value),
            "vocab" => parse_into(&mut self.vocab, key, value),
            "topics" => parse_into(&mut self.topics, key, value),
            "train-size" => parse_into(&mut self.train_size, key, value),
            "test-size" => parse_into(&mut self.test_size, key, value),
            "dev-pairs" => parse_into(&mut self.dev_pairs, key, value),
            "test-pairs" => parse_into(&mut self.test_pairs, key, value),
            "min-len" => parse_into(&mut self.min_len, key, value),
            "max-len" => parse_into(&mut self.max_len, key, value),
            "concentration" => parse_into(&mut self.concentration, key, value),
            "top-k" => parse_into(&mut self.top_k, key, value),
            other => bail!("unknown config key {other:?}"),
        }
    }

    /// Parses `key = value` lines; `#` comments and blank lines allowed.
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut settings = Settings::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got {raw:?}", idx + 1))?;
            settings
                .set(key.trim(), value.trim())
                .with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(settings)
    }

    /// Applies a higher-precedence layer on top of this one.
    pub fn overlay(&mut self, over: &Settings) {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if over.$field.is_some() { self.$field = over.$field.clone(); })*
            };
        }
        take!(
            seed,
            init_seed,
            steps,
            learning_rate,
            eval_interval,
            batch_size,
            ensemble_size,
            rounds,
            threads,
            tau,
            tau_s,
            tau_t,
            lambda,
            p,
            shuffle_mode,
            lo,
            hi,
            dim_token,
            dim_hidden,
            dim_output,
            dropout,
            vocab,
            topics,
            train_size,
            test_size,
            dev_pairs,
            test_pairs,
            min_len,
            max_len,
            concentration,
            top_k,
        );
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(1)
    }

    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or(1)
    }

    /// Agreement-diagnostic restriction size; the reference protocol uses
    /// the top 12 logits per row.
    pub fn top_k(&self) -> usize {
        self.top_k.unwrap_or(12)
    }

    pub fn shuffle(&self) -> Result<ShuffleMode> {
        match self.shuffle_mode.as_deref().unwrap_or("none") {
            "none" => Ok(ShuffleMode::None),
            "group-p" => Ok(ShuffleMode::GroupP),
            "rank-interval" => {
                let lo = self.lo.context("shuffle-mode rank-interval needs lo")?;
                let hi = self.hi.context("shuffle-mode rank-interval needs hi")?;
                Ok(ShuffleMode::RankInterval { lo, hi })
            }
            other => bail!("unknown shuffle-mode {other:?} (none | group-p | rank-interval)"),
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        let defaults = GeneratorConfig::default();
        GeneratorConfig {
            topics: self.topics.unwrap_or(defaults.topics),
            vocab: self.vocab.unwrap_or(defaults.vocab),
            train_sentences: self.train_size.unwrap_or(defaults.train_sentences),
            test_sentences: self.test_size.unwrap_or(defaults.test_sentences),
            dev_pairs: self.dev_pairs.unwrap_or(defaults.dev_pairs),
            test_pairs: self.test_pairs.unwrap_or(defaults.test_pairs),
            min_sentence_len: self.min_len.unwrap_or(defaults.min_sentence_len),
            max_sentence_len: self.max_len.unwrap_or(defaults.max_sentence_len),
            topic_concentration: self.concentration.unwrap_or(defaults.topic_concentration),
            seed: self.seed(),
        }
    }

    /// Training configuration; `default_steps` is the one-epoch step count
    /// derived from the loaded corpus when no explicit steps were given.
    pub fn train(&self, default_steps: usize) -> Result<TrainConfig> {
        let base = TrainConfig::default();
        let mut cfg = TrainConfig {
            steps: self.steps.unwrap_or(default_steps),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            eval_interval: self.eval_interval.unwrap_or(base.eval_interval),
            seed: self.seed(),
            init_seed: self.init_seed,
            shuffle: self.shuffle()?,
            ensemble_size: self.ensemble_size.unwrap_or(base.ensemble_size),
            dims: EncoderDims::new(
                self.dim_token.unwrap_or(base.dims.token),
                self.dim_hidden.unwrap_or(base.dims.hidden),
                self.dim_output.unwrap_or(base.dims.output),
            ),
            dropout: self.dropout.unwrap_or(base.dropout),
            ..base
        };
        cfg.distill.tau = self.tau.unwrap_or(cfg.distill.tau);
        cfg.distill.tau_s = self.tau_s.unwrap_or(cfg.distill.tau_s);
        cfg.distill.tau_t = self.tau_t.unwrap_or(cfg.distill.tau_t);
        cfg.distill.lambda = self.lambda.unwrap_or(cfg.distill.lambda);
        cfg.distill.p = self.p.unwrap_or(cfg.distill.p);
        cfg.distill.batch_size = self.batch_size.unwrap_or(cfg.distill.batch_size);
        cfg.distill.rounds = self.rounds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved key=value lines in a fixed order, for the manifest.
    pub fn manifest_lines(&self) -> String {
        let gen = self.generator();
        let train = self.train(self.steps.unwrap_or(0)).ok();
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("seed", self.seed().to_string());
        line(
            "init-seed",
            self.init_seed.map_or("none".to_string(), |s| s.to_string()),
        );
        match &train {
            Some(t) => {
                line("steps", t.steps.to_string());
                line("learning-rate", t.learning_rate.to_string());
                line("eval-interval", t.eval_interval.to_string());
                line("batch-size", t.distill.batch_size.to_string());
                line("ensemble-size", t.ensemble_size.to_string());
                line("rounds", t.distill.rounds.to_string());
                line("threads", self.threads().to_string());
                line("tau", t.distill.tau.to_string());
                line("tau-s", t.distill.tau_s.to_string());
                line("tau-t", t.distill.tau_t.to_string());
                line("lambda", t.distill.lambda.to_string());
                line("p", t.distill.p.to_string());
                line(
                    "shuffle-mode",
                    match t.shuffle {
                        ShuffleMode::None => "none".to_string(),
                        ShuffleMode::GroupP => "group-p".to_string(),
                        ShuffleMode::RankInterval { lo, hi } => {
                            format!("rank-interval {lo} {hi}")
                        }
                    },
                );
                line("dim-token", t.dims.token.to_string());
                line("dim-hidden", t.dims.hidden.to_string());
                line("dim-output", t.dims.output.to_string());
                line("dropout", t.dropout.to_string());
            }
            None => line("train-config", "invalid".to_string()),
        }
        line("vocab", gen.vocab.to_string());
        line("topics", gen.topics.to_string());
        line("train-size", gen.train_sentences.to_string());
        line("test-size", gen.test_sentences.to_string());
        line("dev-pairs", gen.dev_pairs.to_string());
        line("test-pairs", gen.test_pairs.to_string());
        line("min-len", gen.min_sentence_len.to_string());
        line("max-len", gen.max_sentence_len.to_string());
        line("concentration", gen.topic_concentration.to_string());
        line("top-k", self.top_k().to_string());
        out
    }
}

/// Builds the effective settings: file, then DLAB_SEED, then flags.
pub fn resolve(config_path: Option<&Path>, flags: &Settings) -> Result<Settings> {
    let mut settings = match config_path {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    if let Ok(raw) = std::env::var("DLAB_SEED") {
        let seed: u64 = raw
            .parse()
            .with_context(|| format!("DLAB_SEED {raw:?} is not an unsigned integer"))?;
        settings.seed = Some(seed);
    }
    settings.overlay(flags);
    Ok(settings)
}
