//! Subcommand implementations. Every run resolves its configuration, echoes
//! it to `manifest.txt` in the output directory, then computes and writes
//! its artifacts under fixed names.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use distillab_core::data::{
    generate_corpus, load_corpus, load_sts, write_corpus, write_pairs, Corpus, ScoredPair,
    SplitTag, TokenLexicon, MAX_SEQ_LEN,
};
use distillab_core::diagnostics::{
    cross_teacher_spearman, differential_entropy, ensemble_eval, first_vs_second_order_stats,
    gaussian_kl, loss_gap_report, sharpness_curve, sts_spearman, teacher_variability,
    DiagnosticsReport, SharpnessCurve, SharpnessInput,
};
use distillab_core::encoder::SentenceBatch;
use distillab_core::logit_transform::TeacherEnsemble;
use distillab_core::numeric::RngStream;
use distillab_core::training::{
    distill_student, load_checkpoint, save_checkpoint, self_train, train_teacher,
    write_metrics_csv, Checkpoint, TrainConfig, TrainRun,
};

use crate::config::Settings;

/// Diagnostics cap: how many train batches feed the distribution fits.
const DIAGNOSTIC_BATCHES: usize = 20;

pub struct LoadedData {
    pub train: Corpus,
    pub test: Corpus,
    pub dev_pairs: Vec<ScoredPair>,
    pub test_pairs: Vec<ScoredPair>,
}

pub fn load_data(dir: &Path, vocab: usize, max_len: usize) -> Result<LoadedData> {
    let file = |name: &str| dir.join(name);
    Ok(LoadedData {
        train: load_corpus(&file("train.txt"), vocab, max_len, SplitTag::Train)
            .with_context(|| format!("loading {}", file("train.txt").display()))?,
        test: load_corpus(&file("test.txt"), vocab, max_len, SplitTag::Test)
            .with_context(|| format!("loading {}", file("test.txt").display()))?,
        dev_pairs: load_sts(&file("dev-pairs.tsv"), vocab, max_len)
            .with_context(|| format!("loading {}", file("dev-pairs.tsv").display()))?,
        test_pairs: load_sts(&file("test-pairs.tsv"), vocab, max_len)
            .with_context(|| format!("loading {}", file("test-pairs.tsv").display()))?,
    })
}

fn write_manifest(out: &Path, command: &str, settings: &Settings) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let path = out.join("manifest.txt");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "command {command}")?;
    w.write_all(settings.manifest_lines().as_bytes())?;
    Ok(())
}

fn write_metrics(out: &Path, run: &TrainRun) -> Result<()> {
    let mut w = BufWriter::new(File::create(out.join("metrics.csv"))?);
    write_metrics_csv(&run.metrics, &mut w)?;
    Ok(())
}

fn checkpoint_path(out: &Path, round: usize) -> PathBuf {
    out.join(format!("checkpoint-r{round}.bin"))
}

pub fn gen_data(out: &Path, settings: &Settings) -> Result<()> {
    write_manifest(out, "gen-data", settings)?;
    let cfg = settings.generator();
    let data = generate_corpus(&cfg)?;
    let lexicon = TokenLexicon::new(cfg.vocab);
    let mut w = BufWriter::new(File::create(out.join("train.txt"))?);
    write_corpus(&data.train, &lexicon, &mut w)?;
    let mut w = BufWriter::new(File::create(out.join("test.txt"))?);
    write_corpus(&data.test, &lexicon, &mut w)?;
    let mut w = BufWriter::new(File::create(out.join("dev-pairs.tsv"))?);
    write_pairs(&data.dev_pairs, &lexicon, &mut w)?;
    let mut w = BufWriter::new(File::create(out.join("test-pairs.tsv"))?);
    write_pairs(&data.test_pairs, &lexicon, &mut w)?;
    println!(
        "wrote {} train / {} test sentences, {} dev / {} test pairs to {}",
        data.train.len(),
        data.test.len(),
        data.dev_pairs.len(),
        data.test_pairs.len(),
        out.display()
    );
    Ok(())
}

/// Resolves the train config against the loaded corpus (one epoch when no
/// explicit step count is set) and manifests the effective settings.
fn resolve_train(
    out: &Path,
    command: &str,
    settings: &Settings,
    corpus: &Corpus,
) -> Result<TrainConfig> {
    let batch = settings.batch_size.unwrap_or(64);
    let one_epoch = TrainConfig::one_epoch_steps(corpus, batch);
    let cfg = settings.train(one_epoch)?;
    let mut effective = settings.clone();
    effective.steps = Some(cfg.steps);
    write_manifest(out, command, &effective)?;
    Ok(cfg)
}

pub fn train_teacher_cmd(out: &Path, settings: &Settings, data_dir: &Path) -> Result<()> {
    let vocab = settings.vocab.unwrap_or(2000);
    let max_len = settings.max_len.unwrap_or(MAX_SEQ_LEN);
    let data = load_data(data_dir, vocab, max_len)?;
    let cfg = resolve_train(out, "train-teacher", settings, &data.train)?;
    let run = train_teacher(&data.train, &data.dev_pairs, &cfg)?;
    write_metrics(out, &run)?;
    save_checkpoint(&run.checkpoint, &checkpoint_path(out, 0))?;
    println!(
        "teacher: best dev spearman {} at step {}",
        run.checkpoint.dev_score, run.checkpoint.step
    );
    Ok(())
}

fn load_teachers(paths: &[PathBuf]) -> Result<(TeacherEnsemble, usize)> {
    ensure!(!paths.is_empty(), "need at least one teacher checkpoint");
    let mut checkpoints = Vec::with_capacity(paths.len());
    for path in paths {
        checkpoints
            .push(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?);
    }
    let max_round = checkpoints.iter().map(|c| c.round).max().unwrap_or(0);
    let ensemble = TeacherEnsemble::new(checkpoints.into_iter().map(|c| c.params).collect())?;
    Ok((ensemble, max_round))
}

pub fn distill_cmd(
    out: &Path,
    settings: &Settings,
    data_dir: &Path,
    teacher_paths: &[PathBuf],
) -> Result<()> {
    let vocab = settings.vocab.unwrap_or(2000);
    let max_len = settings.max_len.unwrap_or(MAX_SEQ_LEN);
    let data = load_data(data_dir, vocab, max_len)?;
    let cfg = resolve_train(out, "distill", settings, &data.train)?;
    let (teachers, teacher_round) = load_teachers(teacher_paths)?;
    let round = teacher_round + 1;
    let run = distill_student(
        &data.train,
        &data.dev_pairs,
        &teachers,
        &cfg,
        settings.threads(),
        round,
    )?;
    write_metrics(out, &run)?;
    save_checkpoint(&run.checkpoint, &checkpoint_path(out, round))?;
    println!(
        "student (round {round}): best dev spearman {} at step {}",
        run.checkpoint.dev_score, run.checkpoint.step
    );
    Ok(())
}

pub fn self_train_cmd(out: &Path, settings: &Settings, data_dir: &Path) -> Result<()> {
    let vocab = settings.vocab.unwrap_or(2000);
    let max_len = settings.max_len.unwrap_or(MAX_SEQ_LEN);
    let data = load_data(data_dir, vocab, max_len)?;
    let cfg = resolve_train(out, "self-train", settings, &data.train)?;
    let rounds = settings.rounds();
    let run = self_train(
        &data.train,
        &data.dev_pairs,
        &cfg,
        rounds,
        settings.threads(),
        None,
    )?;
    for checkpoint in &run.primary {
        save_checkpoint(checkpoint, &checkpoint_path(out, checkpoint.round))?;
        println!(
            "round {}: best dev spearman {} at step {}",
            checkpoint.round, checkpoint.dev_score, checkpoint.step
        );
    }
    let final_run = run
        .member_runs
        .last()
        .and_then(|members| members.first())
        .context("self-train produced no runs")?;
    write_metrics(out, final_run)?;
    Ok(())
}

pub fn evaluate_cmd(
    out: &Path,
    settings: &Settings,
    checkpoint: &Path,
    pairs: &Path,
) -> Result<()> {
    write_manifest(out, "evaluate", settings)?;
    let loaded =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let max_len = settings.max_len.unwrap_or(MAX_SEQ_LEN);
    let scored = load_sts(pairs, loaded.params.vocab_size(), max_len)?;
    let rho = sts_spearman(&loaded.params, &scored)?;
    println!("spearman {rho}");
    Ok(())
}

/// Sequential drop-last batches over a corpus, capped for diagnostics.
fn diagnostic_batches(corpus: &Corpus, batch_size: usize) -> Result<Vec<SentenceBatch>> {
    let count = (corpus.len() / batch_size).min(DIAGNOSTIC_BATCHES);
    ensure!(
        count >= 2,
        "corpus of {} sentences gives fewer than 2 batches of {batch_size}",
        corpus.len()
    );
    (0..count)
        .map(|b| {
            Ok(SentenceBatch::new(
                corpus.sentences()[b * batch_size..(b + 1) * batch_size].to_vec(),
            )?)
        })
        .collect()
}

pub fn diagnose_cmd(
    out: &Path,
    settings: &Settings,
    checkpoint_path_arg: &Path,
    data_dir: &Path,
    teacher_paths: &[PathBuf],
) -> Result<()> {
    write_manifest(out, "diagnose", settings)?;
    let model: Checkpoint = load_checkpoint(checkpoint_path_arg)
        .with_context(|| format!("loading {}", checkpoint_path_arg.display()))?;
    let vocab = model.params.vocab_size();
    let max_len = settings.max_len.unwrap_or(MAX_SEQ_LEN);
    let data = load_data(data_dir, vocab, max_len)?;
    let batch_size = settings.batch_size.unwrap_or(64);
    let batches = diagnostic_batches(&data.train, batch_size)?;

    let stats = first_vs_second_order_stats(&model.params, &batches, &data.test_pairs)?;
    let mut report = DiagnosticsReport {
        kl_first: Some(gaussian_kl(&stats.first_train, &stats.first_test)?),
        kl_second: Some(gaussian_kl(&stats.second_train, &stats.second_test)?),
        stats: Some(stats),
        ..DiagnosticsReport::default()
    };
    report.sharpness.push(SharpnessCurve {
        label: "train-in-batch".into(),
        values: sharpness_curve(&model.params, SharpnessInput::InBatch(&batches[0]))?,
    });
    report.sharpness.push(SharpnessCurve {
        label: "test-pairs".into(),
        values: sharpness_curve(&model.params, SharpnessInput::TestPairs(&data.test_pairs))?,
    });
    report.extra.push((
        "sts_spearman".into(),
        "dev".into(),
        sts_spearman(&model.params, &data.dev_pairs)?,
    ));
    report.extra.push((
        "sts_spearman".into(),
        "test".into(),
        sts_spearman(&model.params, &data.test_pairs)?,
    ));

    if !teacher_paths.is_empty() {
        let (teachers, _) = load_teachers(teacher_paths)?;
        let cfg = settings.train(0)?;
        let (train_loss, test_loss) = loss_gap_report(
            &model.params,
            &teachers,
            &data.train,
            &data.test,
            &cfg.distill,
        )?;
        report
            .loss_gap
            .push(("ensemble".into(), train_loss, test_loss));
        report.extra.push((
            "ensemble_eval".into(),
            "test".into(),
            ensemble_eval(&teachers, &data.test_pairs)?,
        ));
        if teachers.len() >= 2 {
            let top_k = settings.top_k().min(batch_size - 1);
            report.cross_teacher_spearman =
                Some(cross_teacher_spearman(&teachers, &batches, top_k)?);
            let (first_std, second_std) = teacher_variability(&teachers, &batches)?;
            if first_std > 0.0 {
                report.entropy_first = Some(differential_entropy(first_std)?);
            }
            if second_std > 0.0 {
                report.entropy_second = Some(differential_entropy(second_std)?);
            }
        } else {
            eprintln!("warning: cross-teacher diagnostics need >= 2 teachers, skipping");
        }
    }

    let mut w = BufWriter::new(File::create(out.join("report.csv"))?);
    report.write_csv(&mut w)?;
    let mut w = BufWriter::new(File::create(out.join("sharpness.csv"))?);
    report.write_sharpness_csv(&mut w)?;
    println!("wrote report.csv and sharpness.csv to {}", out.display());
    Ok(())
}

/// The reference one-knob-at-a-time ablation grids.
const P_GRID: [f64; 5] = [0.05, 0.08, 0.1, 0.12, 0.15];
const LAMBDA_GRID: [f64; 5] = [0.1, 0.2, 0.5, 1.0, 2.0];
const TAU_GRID: [f64; 3] = [0.05, 0.02, 0.01];

pub struct SweepGrids {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Default for SweepGrids {
    fn default() -> Self {
        SweepGrids {
            p: P_GRID.to_vec(),
            lambda: LAMBDA_GRID.to_vec(),
            tau: TAU_GRID.to_vec(),
        }
    }
}

pub fn parse_grid(raw: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = raw
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("grid {raw:?} is not a comma-separated list of reals"))?;
    ensure!(!values.is_empty(), "grid cannot be empty");
    Ok(values)
}

pub fn sweep_cmd(
    out: &Path,
    settings: &Settings,
    data_dir: &Path,
    grids: &SweepGrids,
) -> Result<()> {
    let vocab = settings.vocab.unwrap_or(2000);
    let max_len = settings.max_len.unwrap_or(MAX_SEQ_LEN);
    let data = load_data(data_dir, vocab, max_len)?;
    let base = resolve_train(out, "sweep", settings, &data.train)?;

    let seed_root = RngStream::from_seed(base.seed).split_label("sweep-teacher");
    let mut teacher_params = Vec::with_capacity(base.ensemble_size);
    for member in 0..base.ensemble_size {
        let mut cfg = base.clone();
        cfg.seed = seed_root.split(member as u64).next_u64();
        cfg.shuffle = distillab_core::logit_transform::ShuffleMode::None;
        let run = train_teacher(&data.train, &data.dev_pairs, &cfg)?;
        println!(
            "teacher {member}: dev spearman {} at step {}",
            run.checkpoint.dev_score, run.checkpoint.step
        );
        teacher_params.push(run.checkpoint.params);
    }
    let teachers = TeacherEnsemble::new(teacher_params)?;

    // One knob varies per run; everything else stays at the resolved base.
    let mut runs: Vec<(f64, f64, f64, f64)> = Vec::new();
    for &p in &grids.p {
        runs.push((
            p,
            base.distill.lambda,
            base.distill.tau_s,
            base.distill.tau_t,
        ));
    }
    for &lambda in &grids.lambda {
        runs.push((
            base.distill.p,
            lambda,
            base.distill.tau_s,
            base.distill.tau_t,
        ));
    }
    for &tau_s in &grids.tau {
        for &tau_t in &grids.tau {
            runs.push((base.distill.p, base.distill.lambda, tau_s, tau_t));
        }
    }

    let mut w = BufWriter::new(File::create(out.join("sweep.csv"))?);
    writeln!(w, "p,lambda,tau_s,tau_t,dev_spearman,test_spearman")?;
    for (p, lambda, tau_s, tau_t) in runs {
        let mut cfg = base.clone();
        cfg.shuffle = distillab_core::logit_transform::ShuffleMode::GroupP;
        cfg.distill.p = p;
        cfg.distill.lambda = lambda;
        cfg.distill.tau_s = tau_s;
        cfg.distill.tau_t = tau_t;
        let run = distill_student(
            &data.train,
            &data.dev_pairs,
            &teachers,
            &cfg,
            settings.threads(),
            1,
        )?;
        let test_rho = sts_spearman(&run.checkpoint.params, &data.test_pairs)?;
        writeln!(
            w,
            "{p},{lambda},{tau_s},{tau_t},{},{test_rho}",
            run.checkpoint.dev_score
        )?;
    }
    println!("wrote sweep.csv to {}", out.display());
    Ok(())
}

pub fn ensure_usable_out(out: &Path) -> Result<()> {
    if out.exists() && !out.is_dir() {
        bail!("--out {} exists and is not a directory", out.display());
    }
    Ok(())
}
