//! The three-step pipeline: contrastive teacher training, student
//! distillation against an averaged (optionally shuffled) teacher ensemble,
//! and iterative rounds where each round's students become the next round's
//! teachers. Also the Adam optimizer, checkpoint selection and persistence,
//! and the metrics log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{batch_iter, Corpus, ScoredPair};
use crate::diagnostics::sts_spearman;
use crate::encoder::{
    build_forward, init_params, EncodeMode, EncoderDims, EncoderParams, SentenceBatch,
    DEFAULT_DIMS, DEFAULT_DROPOUT,
};
use crate::error::{Error, Result};
use crate::logit_transform::{
    apply_shuffle, average_teachers, average_teachers_parallel, ShuffleMode, TeacherEnsemble,
};
use crate::numeric::{Graph, Matrix, RngStream};
use crate::objectives::{
    contrastive_loss_node, distill_loss_node, similarity_node, teacher_weights, DistillConfig,
};
use crate::Real;

const CHECKPOINT_HEADER: &str = "distillab-checkpoint 1";

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::parameter(
                    name,
                    format!("must be in [0, 1), got {v}"),
                ));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::parameter("epsilon", "must be > 0"));
        }
        Ok(())
    }
}

/// First/second moment accumulators, one pair per encoder field in
/// declaration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams, cfg: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params
            .fields()
            .iter()
            .map(|(_, f)| Matrix::zeros(f.rows(), f.cols()))
            .collect();
        AdamState {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update: `p -= lr * mhat / (sqrt(vhat) + eps)`.
    pub fn apply(
        &mut self,
        params: &mut EncoderParams,
        grads: &[Matrix],
        learning_rate: Real,
    ) -> Result<()> {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.epsilon;
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        for (f, (_, param)) in params.fields_mut().into_iter().enumerate() {
            let g = &grads[f];
            if !g.same_shape(param) {
                return Err(Error::Contract(format!(
                    "gradient {f} shape {}x{} does not match parameter {}x{}",
                    g.rows(),
                    g.cols(),
                    param.rows(),
                    param.cols()
                )));
            }
            self.m[f] = self.m[f].scale(b1).add(&g.scale(1.0 - b1))?;
            self.v[f] = self.v[f].scale(b2).add(&g.hadamard(g)?.scale(1.0 - b2))?;
            let mhat = self.m[f].scale(1.0 / corr1);
            let vhat = self.v[f].scale(1.0 / corr2);
            let denom_inv = vhat.map(|x| 1.0 / (x.sqrt() + eps));
            let update = mhat.hadamard(&denom_inv)?.scale(learning_rate);
            *param = param.sub(&update)?;
        }
        Ok(())
    }
}

/// Full configuration of one training run (teacher or student).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Optimizer updates to run; 0 evaluates the initialization only.
    pub steps: usize,
    pub learning_rate: Real,
    /// Dev evaluations happen every this many steps (and at the final step).
    pub eval_interval: usize,
    pub adam: AdamConfig,
    pub distill: DistillConfig,
    pub seed: u64,
    /// When set, parameter initialization draws from this seed instead of
    /// `seed`, so ensemble members can share one starting point while their
    /// dropout, batching, and shuffle streams still differ. Mirrors several
    /// finetuning runs branching off a single pretrained checkpoint.
    pub init_seed: Option<u64>,
    pub shuffle: ShuffleMode,
    /// Teacher ensemble size M used by self-training rounds.
    pub ensemble_size: usize,
    pub dims: EncoderDims,
    pub dropout: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 0,
            learning_rate: 1e-3,
            eval_interval: 125,
            adam: AdamConfig::default(),
            distill: DistillConfig::default(),
            seed: 0,
            init_seed: None,
            shuffle: ShuffleMode::None,
            ensemble_size: 4,
            dims: DEFAULT_DIMS,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval < 1 {
            return Err(Error::parameter("eval_interval", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::parameter(
                "learning_rate",
                format!("must be a positive finite real, got {}", self.learning_rate),
            ));
        }
        if self.ensemble_size < 1 {
            return Err(Error::parameter("ensemble_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::parameter(
                "dropout",
                format!("must be in [0, 1), got {}", self.dropout),
            ));
        }
        self.adam.validate()?;
        self.distill.validate()
    }

    /// Drop-last step count of a single pass over the corpus.
    pub fn one_epoch_steps(corpus: &Corpus, batch_size: usize) -> usize {
        corpus.len() / batch_size
    }
}

/// A selected model state with its provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: EncoderParams,
    /// Self-training round that produced this model (0 = teacher).
    pub round: usize,
    /// Dev Spearman at the selection step.
    pub dev_score: Real,
    pub step: usize,
}

/// One metrics-log row. The step-0 row carries only the untrained dev
/// score; update rows always carry losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub cl_loss: Option<Real>,
    pub distill_loss: Option<Real>,
    pub total_loss: Option<Real>,
    pub dev_spearman: Option<Real>,
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Best-dev checkpoint (ties resolved to the earliest step).
    pub checkpoint: Checkpoint,
    /// (step, dev score) at every evaluation, in step order.
    pub history: Vec<(usize, Real)>,
    pub metrics: Vec<MetricsRow>,
}

/// `step,cl_loss,distill_loss,total_loss,dev_spearman` CSV; absent cells
/// stay empty. Float formatting is Rust's shortest round-trip form, so
/// identical runs produce identical bytes.
pub fn write_metrics_csv(rows: &[MetricsRow], w: &mut impl Write) -> Result<()> {
    let cell = |v: Option<Real>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "step,cl_loss,distill_loss,total_loss,dev_spearman")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step,
            cell(r.cl_loss),
            cell(r.distill_loss),
            cell(r.total_loss),
            cell(r.dev_spearman)
        )?;
    }
    Ok(())
}

/// Step with the maximum dev score; ties go to the earliest step.
pub fn select_checkpoint(history: &[(usize, Real)]) -> Result<usize> {
    let mut iter = history.iter();
    let mut best = *iter
        .next()
        .ok_or_else(|| Error::Input("cannot select from an empty history".into()))?;
    for &(step, score) in iter {
        if score > best.1 {
            best = (step, score);
        }
    }
    Ok(best.0)
}

/// Errors raised while computing one step almost always mean the
/// parameters left the finite range; tag them with the step index.
fn locate(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::Training {
            step: step as u64,
            message: format!("non-finite {what}"),
        },
        other => other,
    }
}

fn run(
    corpus: &Corpus,
    dev_pairs: &[ScoredPair],
    cfg: &TrainConfig,
    teachers: Option<&TeacherEnsemble>,
    threads: usize,
    round: usize,
) -> Result<TrainRun> {
    cfg.validate()?;
    let n = cfg.distill.batch_size;
    if let Some(ensemble) = teachers {
        let teacher = &ensemble.members()[0];
        if teacher.dims().output != cfg.dims.output {
            return Err(Error::Ensemble(format!(
                "teacher output dimension {} does not match student {}",
                teacher.dims().output,
                cfg.dims.output
            )));
        }
        if teacher.vocab_size() != corpus.vocab_size() {
            return Err(Error::Ensemble(format!(
                "teacher vocab {} does not match corpus vocab {}",
                teacher.vocab_size(),
                corpus.vocab_size()
            )));
        }
    }

    let root = RngStream::from_seed(cfg.seed);
    let init_seed = RngStream::from_seed(cfg.init_seed.unwrap_or(cfg.seed))
        .split_label("init")
        .next_u64();
    let mut params = init_params(corpus.vocab_size(), cfg.dims, cfg.dropout, init_seed)?;
    let dropout_root = root.split_label("dropout");
    let shuffle_root = root.split_label("shuffle");
    let mut adam = AdamState::new(&params, cfg.adam);

    let initial_score = sts_spearman(&params, dev_pairs)?;
    let mut history = vec![(0usize, initial_score)];
    let mut best = Checkpoint {
        params: params.clone(),
        round,
        dev_score: initial_score,
        step: 0,
    };
    let mut metrics = vec![MetricsRow {
        step: 0,
        cl_loss: None,
        distill_loss: None,
        total_loss: None,
        dev_spearman: Some(initial_score),
    }];

    let steps_per_epoch = corpus.len() / n;
    if cfg.steps > 0 && steps_per_epoch == 0 {
        return Err(Error::Input(format!(
            "corpus of {} sentences cannot fill a batch of {n}",
            corpus.len()
        )));
    }
    let mut batches: Vec<SentenceBatch> = Vec::new();
    for s in 0..cfg.steps {
        let step_num = s + 1;
        if s % steps_per_epoch == 0 {
            batches = batch_iter(corpus, n, cfg.seed, (s / steps_per_epoch) as u64)?;
        }
        let batch = &batches[s % steps_per_epoch];
        let mut pair_stream = dropout_root.split(s as u64);
        let seed_a = pair_stream.next_u64();
        let seed_b = pair_stream.next_u64();

        let mut g = Graph::new();
        let step_result = (|| -> Result<(Real, Real, Real, Vec<Matrix>)> {
            let v1 = build_forward(
                &mut g,
                &params,
                batch,
                EncodeMode::Train {
                    dropout_seed: seed_a,
                },
            )?;
            let v2 = build_forward(
                &mut g,
                &params,
                batch,
                EncodeMode::Train {
                    dropout_seed: seed_b,
                },
            )?;
            let logits = similarity_node(&mut g, v1.output, v2.output)?;
            let cl = contrastive_loss_node(&mut g, logits, cfg.distill.tau)?;
            // With lambda = 0 the distillation branch never enters the tape,
            // so the trajectory is bit-identical to plain teacher training.
            let (loss, distill_value) = match teachers {
                Some(ensemble) if cfg.distill.lambda > 0.0 => {
                    let averaged = average_teachers_parallel(ensemble, batch, threads)?;
                    let shuffled = apply_shuffle(
                        &averaged,
                        cfg.shuffle,
                        cfg.distill.p,
                        &shuffle_root.split(s as u64),
                    )?;
                    let q = teacher_weights(&shuffled, cfg.distill.tau_t)?;
                    let kd = distill_loss_node(&mut g, logits, &q, cfg.distill.tau_s)?;
                    let scaled = g.scale(kd, cfg.distill.lambda)?;
                    (g.add(cl, scaled)?, g.value(kd).get(0, 0))
                }
                _ => (cl, 0.0),
            };
            let cl_value = g.value(cl).get(0, 0);
            let total_value = g.value(loss).get(0, 0);
            if !total_value.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let grad_map = g.backward(loss)?;
            let ids1 = v1.param_ids();
            let ids2 = v2.param_ids();
            let mut grads = Vec::with_capacity(5);
            for f in 0..5 {
                let shape = params.fields()[f].1;
                let zero = || Matrix::zeros(shape.rows(), shape.cols());
                let g1 = grad_map.get(&ids1[f]).cloned().unwrap_or_else(zero);
                let g2 = grad_map.get(&ids2[f]).cloned().unwrap_or_else(zero);
                grads.push(g1.add(&g2)?);
            }
            Ok((cl_value, distill_value, total_value, grads))
        })();
        let (cl_value, distill_value, total_value, grads) =
            step_result.map_err(|e| locate(step_num, e))?;

        adam.apply(&mut params, &grads, cfg.learning_rate)
            .map_err(|e| locate(step_num, e))?;
        params.validate().map_err(|e| locate(step_num, e))?;

        let dev = if step_num % cfg.eval_interval == 0 || step_num == cfg.steps {
            let score = sts_spearman(&params, dev_pairs).map_err(|e| locate(step_num, e))?;
            history.push((step_num, score));
            if score > best.dev_score {
                best = Checkpoint {
                    params: params.clone(),
                    round,
                    dev_score: score,
                    step: step_num,
                };
            }
            Some(score)
        } else {
            None
        };
        metrics.push(MetricsRow {
            step: step_num,
            cl_loss: Some(cl_value),
            distill_loss: Some(distill_value),
            total_loss: Some(total_value),
            dev_spearman: dev,
        });
    }

    debug_assert_eq!(select_checkpoint(&history)?, best.step);
    Ok(TrainRun {
        checkpoint: best,
        history,
        metrics,
    })
}

/// Contrastive-only training; returns the best-dev checkpoint at round 0.
pub fn train_teacher(
    corpus: &Corpus,
    dev_pairs: &[ScoredPair],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    run(corpus, dev_pairs, cfg, None, 1, 0)
}

/// From-scratch student trained on the combined contrastive plus
/// distillation objective against the given teachers. `threads` bounds the
/// teacher-inference fan-out per step; `round` tags the checkpoint.
pub fn distill_student(
    corpus: &Corpus,
    dev_pairs: &[ScoredPair],
    teachers: &TeacherEnsemble,
    cfg: &TrainConfig,
    threads: usize,
    round: usize,
) -> Result<TrainRun> {
    run(corpus, dev_pairs, cfg, Some(teachers), threads, round)
}

/// Probe logits recorded at each round boundary to witness the handoff:
/// the ensemble consumed by round r+1 must produce exactly the logits the
/// round-r checkpoints produced.
#[derive(Debug, Clone)]
pub struct HandoffRecord {
    /// Per completed round, averaged probe logits of its checkpoint ensemble.
    pub produced: Vec<Matrix>,
    /// Per distillation round, averaged probe logits of the teacher ensemble
    /// it consumed; `consumed[r]` feeds round r+1.
    pub consumed: Vec<Matrix>,
}

/// Output of an iterative self-training run.
#[derive(Debug, Clone)]
pub struct SelfTrainRun {
    /// All member runs per round; `member_runs[0]` are the teachers.
    pub member_runs: Vec<Vec<TrainRun>>,
    /// Member-0 checkpoint per round: `[teacher, round-1 student, ...]`.
    pub primary: Vec<Checkpoint>,
    pub handoff: Option<HandoffRecord>,
}

/// Round 0 trains `ensemble_size` teachers on member-split seeds; each
/// later round distills fresh students against the previous round's
/// checkpoints. `probe` optionally records handoff logits.
pub fn self_train(
    corpus: &Corpus,
    dev_pairs: &[ScoredPair],
    cfg: &TrainConfig,
    rounds: usize,
    threads: usize,
    probe: Option<&SentenceBatch>,
) -> Result<SelfTrainRun> {
    if rounds < 1 {
        return Err(Error::parameter("rounds", "must be >= 1"));
    }
    cfg.validate()?;
    let seed_root = RngStream::from_seed(cfg.seed).split_label("round");
    let member_cfg = |round: usize, member: usize| {
        let mut derived = cfg.clone();
        derived.seed = seed_root
            .split(round as u64)
            .split(member as u64)
            .next_u64();
        derived
    };

    let mut produced = Vec::new();
    let mut consumed = Vec::new();
    let record = |ensemble: &TeacherEnsemble, sink: &mut Vec<Matrix>| -> Result<()> {
        if let Some(batch) = probe {
            sink.push(average_teachers(ensemble, batch)?.into_values());
        }
        Ok(())
    };

    let mut member_runs: Vec<Vec<TrainRun>> = Vec::with_capacity(rounds + 1);
    let teachers: Vec<TrainRun> = (0..cfg.ensemble_size)
        .map(|m| train_teacher(corpus, dev_pairs, &member_cfg(0, m)))
        .collect::<Result<_>>()?;
    let round_ensemble = |runs: &[TrainRun]| {
        TeacherEnsemble::new(runs.iter().map(|r| r.checkpoint.params.clone()).collect())
    };
    record(&round_ensemble(&teachers)?, &mut produced)?;
    member_runs.push(teachers);

    for r in 1..=rounds {
        let ensemble = round_ensemble(&member_runs[r - 1])?;
        record(&ensemble, &mut consumed)?;
        let students: Vec<TrainRun> = (0..cfg.ensemble_size)
            .map(|m| distill_student(corpus, dev_pairs, &ensemble, &member_cfg(r, m), threads, r))
            .collect::<Result<_>>()?;
        record(&round_ensemble(&students)?, &mut produced)?;
        member_runs.push(students);
    }

    let primary = member_runs
        .iter()
        .map(|runs| runs[0].checkpoint.clone())
        .collect();
    let handoff = probe.map(|_| HandoffRecord { produced, consumed });
    Ok(SelfTrainRun {
        member_runs,
        primary,
        handoff,
    })
}

/// Writes a checkpoint: a plain-text manifest (metadata plus field names
/// and shapes) terminated by an `end` line, followed by the field matrices
/// in declaration order.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.params.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    writeln!(w, "round {}", checkpoint.round)?;
    writeln!(w, "step {}", checkpoint.step)?;
    writeln!(w, "dev-score {}", checkpoint.dev_score)?;
    writeln!(w, "dropout-rate {}", checkpoint.params.dropout_rate)?;
    let dims = checkpoint.params.dims();
    writeln!(w, "dims {} {} {}", dims.token, dims.hidden, dims.output)?;
    writeln!(w, "vocab {}", checkpoint.params.vocab_size())?;
    for (name, field) in checkpoint.params.fields() {
        writeln!(w, "field {name} {} {}", field.rows(), field.cols())?;
    }
    writeln!(w, "end")?;
    for (_, field) in checkpoint.params.fields() {
        field.write_to(&mut w)?;
    }
    Ok(())
}

fn manifest_error(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

fn parse_values<T: std::str::FromStr>(rest: &str, key: &str, want: usize) -> Result<Vec<T>> {
    let parts: Vec<T> = rest
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| manifest_error(format!("malformed {key} line: {rest:?}")))?;
    if parts.len() != want {
        return Err(manifest_error(format!(
            "{key} expects {want} values, got {}",
            parts.len()
        )));
    }
    Ok(parts)
}

/// Reads a checkpoint written by [`save_checkpoint`], validating the
/// manifest against the stored matrices.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_HEADER {
        return Err(manifest_error(format!(
            "unrecognized header {:?}",
            line.trim_end()
        )));
    }
    let mut round = None;
    let mut step = None;
    let mut dev_score = None;
    let mut dropout = None;
    let mut dims = None;
    let mut vocab = None;
    let mut field_shapes: Vec<(String, usize, usize)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(manifest_error("manifest ended without an end line"));
        }
        let trimmed = line.trim_end();
        if trimmed == "end" {
            break;
        }
        let (key, rest) = trimmed
            .split_once(' ')
            .ok_or_else(|| manifest_error(format!("malformed line {trimmed:?}")))?;
        match key {
            "round" => round = Some(parse_values::<usize>(rest, key, 1)?[0]),
            "step" => step = Some(parse_values::<usize>(rest, key, 1)?[0]),
            "dev-score" => dev_score = Some(parse_values::<Real>(rest, key, 1)?[0]),
            "dropout-rate" => dropout = Some(parse_values::<Real>(rest, key, 1)?[0]),
            "dims" => {
                let d = parse_values::<usize>(rest, key, 3)?;
                dims = Some(EncoderDims::new(d[0], d[1], d[2]));
            }
            "vocab" => vocab = Some(parse_values::<usize>(rest, key, 1)?[0]),
            "field" => {
                let (name, shape) = rest
                    .split_once(' ')
                    .ok_or_else(|| manifest_error(format!("malformed field line {rest:?}")))?;
                let s = parse_values::<usize>(shape, key, 2)?;
                field_shapes.push((name.to_string(), s[0], s[1]));
            }
            other => return Err(manifest_error(format!("unknown manifest key {other:?}"))),
        }
    }
    let missing = |key: &'static str| move || manifest_error(format!("missing {key}"));
    let round = round.ok_or_else(missing("round"))?;
    let step = step.ok_or_else(missing("step"))?;
    let dev_score = dev_score.ok_or_else(missing("dev-score"))?;
    let dropout = dropout.ok_or_else(missing("dropout-rate"))?;
    let dims = dims.ok_or_else(missing("dims"))?;
    let vocab = vocab.ok_or_else(missing("vocab"))?;

    let mut matrices = Vec::with_capacity(field_shapes.len());
    for (name, rows, cols) in &field_shapes {
        let m = Matrix::read_from(&mut r)?;
        if m.rows() != *rows || m.cols() != *cols {
            return Err(manifest_error(format!(
                "field {name} manifest shape {rows}x{cols} does not match stored {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        matrices.push(m);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(manifest_error("trailing bytes after the last field"));
    }

    let names: Vec<&str> = field_shapes.iter().map(|(n, _, _)| n.as_str()).collect();
    if names
        != [
            "embedding",
            "hidden_weight",
            "hidden_bias",
            "head_weight",
            "head_bias",
        ]
    {
        return Err(manifest_error(format!("unexpected field list {names:?}")));
    }
    let mut it = matrices.into_iter();
    let params = EncoderParams {
        embedding: it.next().unwrap(),
        hidden_weight: it.next().unwrap(),
        hidden_bias: it.next().unwrap(),
        head_weight: it.next().unwrap(),
        head_bias: it.next().unwrap(),
        dropout_rate: dropout,
    };
    params.validate()?;
    if params.vocab_size() != vocab || params.dims() != dims {
        return Err(manifest_error(
            "stored matrices disagree with the manifest dims or vocab".to_string(),
        ));
    }
    Ok(Checkpoint {
        params,
        round,
        dev_score,
        step,
    })
}
