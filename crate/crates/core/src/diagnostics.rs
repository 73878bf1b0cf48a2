//! Measurement side of the laboratory: logit sharpness curves, Gaussian
//! first/second-order statistics with KL and differential entropy, teacher
//! agreement, rank-correlation evaluation, distillation loss gaps, and the
//! inference-time ensemble baseline.

use std::io::Write;

use crate::data::{Corpus, ScoredPair};
use crate::encoder::{encode_with_mode, EncodeMode, EncoderParams, SentenceBatch};
use crate::error::{Error, Result};
use crate::logit_transform::{average_teachers, member_logits, TeacherEnsemble};
use crate::objectives::{distill_loss, DistillConfig, LogitMatrix, LogitSource};
use crate::Real;

/// Bin count of the histogram KL sensitivity check.
const HISTOGRAM_BINS: usize = 64;

/// Sample mean and standard deviation of one population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStats {
    pub mean: Real,
    pub std: Real,
    pub n: usize,
}

impl GaussianStats {
    /// Fits mean and (n-1)-normalized standard deviation. Degenerate
    /// populations (fewer than 2 samples, zero spread) are rejected: they
    /// carry no distributional information.
    pub fn fit(samples: &[Real]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Diagnostic(format!(
                "need at least 2 samples to fit, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("statistics input".into()));
        }
        let n = samples.len() as Real;
        let mean = samples.iter().sum::<Real>() / n;
        let var = samples
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<Real>()
            / (n - 1.0);
        let std = var.sqrt();
        if std == 0.0 {
            return Err(Error::Diagnostic("population has zero spread".into()));
        }
        Ok(GaussianStats {
            mean,
            std,
            n: samples.len(),
        })
    }
}

/// `KL(N(a) || N(b))` for Gaussians fit from (mean, std).
pub fn gaussian_kl(a: &GaussianStats, b: &GaussianStats) -> Result<Real> {
    if !(a.std > 0.0) || !(b.std > 0.0) {
        return Err(Error::parameter("std", "must be > 0 for KL"));
    }
    let var_ratio = (a.std * a.std + (a.mean - b.mean) * (a.mean - b.mean)) / (2.0 * b.std * b.std);
    Ok((b.std / a.std).ln() + var_ratio - 0.5)
}

/// Differential entropy of a Gaussian with the given standard deviation:
/// `ln(std) + ln(2*pi*e)/2`.
pub fn differential_entropy(std: Real) -> Result<Real> {
    if !(std > 0.0) {
        return Err(Error::parameter("std", format!("must be > 0, got {std}")));
    }
    Ok(std.ln() + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
}

/// Histogram KL between two samples (64 equal-width bins over the combined
/// range, add-one smoothing); sensitivity check for the Gaussian fit.
pub fn histogram_kl(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Diagnostic(
            "histogram KL needs >= 2 samples per side".into(),
        ));
    }
    let all = a.iter().chain(b);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in all {
        if !v.is_finite() {
            return Err(Error::NonFinite("histogram input".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Err(Error::Diagnostic("histogram range is empty".into()));
    }
    let width = (hi - lo) / HISTOGRAM_BINS as Real;
    let bin_of = |v: Real| (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
    let mut counts_a = vec![1.0; HISTOGRAM_BINS];
    let mut counts_b = vec![1.0; HISTOGRAM_BINS];
    for &v in a {
        counts_a[bin_of(v)] += 1.0;
    }
    for &v in b {
        counts_b[bin_of(v)] += 1.0;
    }
    let za: Real = counts_a.iter().sum();
    let zb: Real = counts_b.iter().sum();
    let mut kl = 0.0;
    for i in 0..HISTOGRAM_BINS {
        let pa = counts_a[i] / za;
        let pb = counts_b[i] / zb;
        kl += pa * (pa / pb).ln();
    }
    Ok(kl)
}

/// Average ranks (1-based) with ties sharing the mean of their rank run.
fn average_ranks(values: &[Real]) -> Vec<Real> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as Real / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling. A constant
/// sequence has no ranking and is rejected.
pub fn spearman(xs: &[Real], ys: &[Real]) -> Result<Real> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Diagnostic(format!(
            "rank correlation needs two equal sequences of >= 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as Real;
    let mx = rx.iter().sum::<Real>() / n;
    let my = ry.iter().sum::<Real>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Diagnostic(
            "constant predictions have no rank correlation".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn eval_embeddings(model: &EncoderParams, batch: &SentenceBatch) -> Result<crate::numeric::Matrix> {
    Ok(encode_with_mode(model, batch, EncodeMode::Eval)?.view)
}

/// Evaluation-mode (head-free) cosine similarity per scored pair.
pub fn pair_scores(model: &EncoderParams, pairs: &[ScoredPair]) -> Result<Vec<Real>> {
    if pairs.is_empty() {
        return Err(Error::Input("no pairs to score".into()));
    }
    let batch_a = SentenceBatch::new(pairs.iter().map(|p| p.sentence_a.clone()).collect())?;
    let batch_b = SentenceBatch::new(pairs.iter().map(|p| p.sentence_b.clone()).collect())?;
    let ea = eval_embeddings(model, &batch_a)?;
    let eb = eval_embeddings(model, &batch_b)?;
    let mut scores = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        let mut dot = 0.0;
        for d in 0..ea.cols() {
            dot += ea.get(i, d) * eb.get(i, d);
        }
        scores.push(dot);
    }
    Ok(scores)
}

/// What a sharpness curve ranges over.
pub enum SharpnessInput<'a> {
    /// All unordered in-batch sentence pairs.
    InBatch(&'a SentenceBatch),
    /// The given scored pairs.
    TestPairs(&'a [ScoredPair]),
}

/// Cosine logits of the selected pair population, sorted descending.
pub fn sharpness_curve(model: &EncoderParams, input: SharpnessInput<'_>) -> Result<Vec<Real>> {
    let mut logits = match input {
        SharpnessInput::InBatch(batch) => {
            if batch.len() < 2 {
                return Err(Error::Input(
                    "in-batch sharpness needs >= 2 sentences".into(),
                ));
            }
            let e = eval_embeddings(model, batch)?;
            let mut out = Vec::with_capacity(batch.len() * (batch.len() - 1) / 2);
            for i in 0..batch.len() {
                for j in (i + 1)..batch.len() {
                    let mut dot = 0.0;
                    for d in 0..e.cols() {
                        dot += e.get(i, d) * e.get(j, d);
                    }
                    out.push(dot);
                }
            }
            out
        }
        SharpnessInput::TestPairs(pairs) => {
            if pairs.len() < 2 {
                return Err(Error::Input("pair sharpness needs >= 2 pairs".into()));
            }
            pair_scores(model, pairs)?
        }
    };
    logits.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(logits)
}

/// Gaussian fits of the first-order variable (per-sentence mean over
/// embedding dimensions) and the second-order variable (cosine logits) on
/// train batches and test pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstSecondStats {
    pub first_train: GaussianStats,
    pub first_test: GaussianStats,
    pub second_train: GaussianStats,
    pub second_test: GaussianStats,
}

pub fn first_vs_second_order_stats(
    model: &EncoderParams,
    train_batches: &[SentenceBatch],
    test_pairs: &[ScoredPair],
) -> Result<FirstSecondStats> {
    if train_batches.len() < 2 || test_pairs.len() < 2 {
        return Err(Error::Input(
            "need >= 2 train batches and >= 2 test pairs for distribution stats".into(),
        ));
    }
    let mut first_train = Vec::new();
    let mut second_train = Vec::new();
    for batch in train_batches {
        let e = eval_embeddings(model, batch)?;
        for i in 0..e.rows() {
            let mean = e.row(i).iter().sum::<Real>() / e.cols() as Real;
            first_train.push(mean);
        }
        for i in 0..e.rows() {
            for j in (i + 1)..e.rows() {
                let mut dot = 0.0;
                for d in 0..e.cols() {
                    dot += e.get(i, d) * e.get(j, d);
                }
                second_train.push(dot);
            }
        }
    }

    let mut first_test = Vec::new();
    let batch_a = SentenceBatch::new(test_pairs.iter().map(|p| p.sentence_a.clone()).collect())?;
    let batch_b = SentenceBatch::new(test_pairs.iter().map(|p| p.sentence_b.clone()).collect())?;
    for batch in [&batch_a, &batch_b] {
        let e = eval_embeddings(model, batch)?;
        for i in 0..e.rows() {
            first_test.push(e.row(i).iter().sum::<Real>() / e.cols() as Real);
        }
    }
    let second_test = pair_scores(model, test_pairs)?;

    Ok(FirstSecondStats {
        first_train: GaussianStats::fit(&first_train)?,
        first_test: GaussianStats::fit(&first_test)?,
        second_train: GaussianStats::fit(&second_train)?,
        second_test: GaussianStats::fit(&second_test)?,
    })
}

/// Rank agreement of two logit rows restricted to the first row's top-k
/// positions (descending value, ties by position).
pub fn ranked_agreement(row_a: &[Real], row_b: &[Real], top_k: usize) -> Result<Real> {
    if row_a.len() != row_b.len() {
        return Err(Error::parameter("rows", "length mismatch"));
    }
    if top_k < 2 || top_k > row_a.len() {
        return Err(Error::parameter(
            "top_k",
            format!("need 2 <= k <= {}, got {top_k}", row_a.len()),
        ));
    }
    let mut order: Vec<usize> = (0..row_a.len()).collect();
    order.sort_by(|&a, &b| row_a[b].partial_cmp(&row_a[a]).unwrap());
    let positions = &order[..top_k];
    let xs: Vec<Real> = positions.iter().map(|&p| row_a[p]).collect();
    let ys: Vec<Real> = positions.iter().map(|&p| row_b[p]).collect();
    spearman(&xs, &ys)
}

/// Mean rank agreement between every ordered teacher pair over every batch
/// row, each comparison restricted to the first teacher's top-k logits.
pub fn cross_teacher_spearman(
    ensemble: &TeacherEnsemble,
    batches: &[SentenceBatch],
    top_k: usize,
) -> Result<Real> {
    if ensemble.len() < 2 {
        return Err(Error::Ensemble(
            "cross-teacher agreement needs at least 2 members".into(),
        ));
    }
    if batches.is_empty() {
        return Err(Error::Input("no batches".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let logits: Vec<LogitMatrix> = ensemble
            .members()
            .iter()
            .enumerate()
            .map(|(i, m)| member_logits(m, batch, i))
            .collect::<Result<_>>()?;
        let n = batch.len();
        if top_k > n - 1 {
            return Err(Error::parameter(
                "top_k",
                format!("k = {top_k} exceeds row length {}", n - 1),
            ));
        }
        for a in 0..ensemble.len() {
            for b in 0..ensemble.len() {
                if a == b {
                    continue;
                }
                for i in 0..n {
                    let ra = logits[a].off_diagonal_row(i);
                    let rb = logits[b].off_diagonal_row(i);
                    total += ranked_agreement(&ra, &rb, top_k)?;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as Real)
}

/// Mean across-member standard deviation of the first-order variable
/// (per-sentence embedding mean) and the second-order variable (in-batch
/// cosine logits), averaged over all items in the batches. Identical
/// members legitimately give zero spread, so callers decide whether a zero
/// is usable (differential entropy is not defined there).
pub fn teacher_variability(
    ensemble: &TeacherEnsemble,
    batches: &[SentenceBatch],
) -> Result<(Real, Real)> {
    if ensemble.len() < 2 {
        return Err(Error::Ensemble(
            "variability needs at least 2 members".into(),
        ));
    }
    if batches.is_empty() {
        return Err(Error::Input("no batches".into()));
    }
    let m = ensemble.len() as Real;
    let spread = |values: &[Real]| {
        let mean = values.iter().sum::<Real>() / m;
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (m - 1.0)).sqrt()
    };
    let mut first_total = 0.0;
    let mut first_count = 0usize;
    let mut second_total = 0.0;
    let mut second_count = 0usize;
    for batch in batches {
        let views: Vec<crate::numeric::Matrix> = ensemble
            .members()
            .iter()
            .map(|member| eval_embeddings(member, batch))
            .collect::<Result<_>>()?;
        let n = batch.len();
        let dims = views[0].cols();
        for i in 0..n {
            let per_member: Vec<Real> = views
                .iter()
                .map(|e| e.row(i).iter().sum::<Real>() / dims as Real)
                .collect();
            first_total += spread(&per_member);
            first_count += 1;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let per_member: Vec<Real> = views
                    .iter()
                    .map(|e| (0..dims).map(|d| e.get(i, d) * e.get(j, d)).sum::<Real>())
                    .collect();
                second_total += spread(&per_member);
                second_count += 1;
            }
        }
    }
    Ok((
        first_total / first_count as Real,
        second_total / second_count as Real,
    ))
}

/// Spearman between head-free model similarities and gold scores; the
/// checkpoint-selection metric.
pub fn sts_spearman(model: &EncoderParams, pairs: &[ScoredPair]) -> Result<Real> {
    if pairs.len() < 3 {
        return Err(Error::Input(format!(
            "need >= 3 scored pairs, got {}",
            pairs.len()
        )));
    }
    let predictions = pair_scores(model, pairs)?;
    let golds: Vec<Real> = pairs.iter().map(|p| p.gold_score).collect();
    spearman(&predictions, &golds)
}

/// Per-group mean Spearman between a student's pair scores and reference
/// models' pair scores. Empty groups yield `None` so callers can warn.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCorrelationReport {
    pub self_teacher: Option<Real>,
    pub other_teachers: Option<Real>,
    pub other_students: Option<Real>,
}

pub fn model_correlation_report(
    student: &EncoderParams,
    self_teacher: &[EncoderParams],
    other_teachers: &[EncoderParams],
    other_students: &[EncoderParams],
    dev_pairs: &[ScoredPair],
) -> Result<ModelCorrelationReport> {
    let student_scores = pair_scores(student, dev_pairs)?;
    let group_mean = |group: &[EncoderParams]| -> Result<Option<Real>> {
        if group.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for member in group {
            let scores = pair_scores(member, dev_pairs)?;
            total += spearman(&student_scores, &scores)?;
        }
        Ok(Some(total / group.len() as Real))
    };
    Ok(ModelCorrelationReport {
        self_teacher: group_mean(self_teacher)?,
        other_teachers: group_mean(other_teachers)?,
        other_students: group_mean(other_students)?,
    })
}

/// Sequential drop-last batches in corpus order; evaluation never shuffles.
fn eval_batches(corpus: &Corpus, n: usize) -> Result<Vec<SentenceBatch>> {
    if corpus.len() < n {
        return Err(Error::Input(format!(
            "split of {} sentences cannot fill a batch of {n}",
            corpus.len()
        )));
    }
    (0..corpus.len() / n)
        .map(|b| SentenceBatch::new(corpus.sentences()[b * n..(b + 1) * n].to_vec()))
        .collect()
}

/// Mean distillation loss of the student against untransformed averaged
/// teacher logits on a split, both sides using deterministic passes.
fn split_distill_loss(
    student: &EncoderParams,
    teachers: &TeacherEnsemble,
    corpus: &Corpus,
    cfg: &DistillConfig,
) -> Result<Real> {
    let batches = eval_batches(corpus, cfg.batch_size)?;
    let mut total = 0.0;
    for batch in &batches {
        let teacher_logits = average_teachers(teachers, batch)?;
        let student_view = encode_with_mode(student, batch, EncodeMode::Deterministic)?;
        let student_logits = crate::objectives::similarity_logits(
            &student_view,
            &student_view,
            LogitSource::Student,
        )?;
        total += distill_loss(&student_logits, &teacher_logits, cfg.tau_s, cfg.tau_t)?;
    }
    Ok(total / batches.len() as Real)
}

/// (train, test) distillation loss of a student against its teachers; the
/// spread between the two is the overfitting signature.
pub fn loss_gap_report(
    student: &EncoderParams,
    teachers: &TeacherEnsemble,
    train: &Corpus,
    test: &Corpus,
    cfg: &DistillConfig,
) -> Result<(Real, Real)> {
    cfg.validate()?;
    Ok((
        split_distill_loss(student, teachers, train, cfg)?,
        split_distill_loss(student, teachers, test, cfg)?,
    ))
}

/// Inference-time ensemble baseline: per pair, the mean of member cosine
/// similarities, scored by Spearman against gold.
pub fn ensemble_eval(teachers: &TeacherEnsemble, pairs: &[ScoredPair]) -> Result<Real> {
    if pairs.len() < 3 {
        return Err(Error::Input(format!(
            "need >= 3 scored pairs, got {}",
            pairs.len()
        )));
    }
    let mut mean_scores = vec![0.0; pairs.len()];
    for member in teachers.members() {
        let scores = pair_scores(member, pairs)?;
        for (acc, s) in mean_scores.iter_mut().zip(scores) {
            *acc += s;
        }
    }
    for s in &mut mean_scores {
        *s /= teachers.len() as Real;
    }
    let golds: Vec<Real> = pairs.iter().map(|p| p.gold_score).collect();
    spearman(&mean_scores, &golds)
}

/// One labeled sharpness curve, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessCurve {
    pub label: String,
    pub values: Vec<Real>,
}

/// Assembled diagnostics; every value finite, every curve sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsReport {
    pub stats: Option<FirstSecondStats>,
    pub kl_first: Option<Real>,
    pub kl_second: Option<Real>,
    pub entropy_first: Option<Real>,
    pub entropy_second: Option<Real>,
    pub cross_teacher_spearman: Option<Real>,
    /// (method label, train loss, test loss).
    pub loss_gap: Vec<(String, Real, Real)>,
    pub sharpness: Vec<SharpnessCurve>,
    /// (name, split, value) rows not covered by the typed fields.
    pub extra: Vec<(String, String, Real)>,
}

impl DiagnosticsReport {
    pub fn validate(&self) -> Result<()> {
        for curve in &self.sharpness {
            for w in curve.values.windows(2) {
                if w[1] > w[0] {
                    return Err(Error::Diagnostic(format!(
                        "sharpness curve {} is not sorted descending",
                        curve.label
                    )));
                }
            }
        }
        let all_finite = self
            .kl_first
            .iter()
            .chain(&self.kl_second)
            .chain(&self.entropy_first)
            .chain(&self.entropy_second)
            .chain(&self.cross_teacher_spearman)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("diagnostics report".into()));
        }
        Ok(())
    }

    /// (name, split, value) rows for the report CSV.
    pub fn rows(&self) -> Vec<(String, String, Real)> {
        let mut rows = Vec::new();
        if let Some(s) = &self.stats {
            for (name, split, stat) in [
                ("first_order_mean", "train", s.first_train),
                ("first_order_mean", "test", s.first_test),
                ("second_order_mean", "train", s.second_train),
                ("second_order_mean", "test", s.second_test),
            ] {
                rows.push((name.to_string(), split.to_string(), stat.mean));
                rows.push((name.replace("mean", "std"), split.to_string(), stat.std));
            }
        }
        for (name, v) in [
            ("kl_first_order", self.kl_first),
            ("kl_second_order", self.kl_second),
            ("diff_entropy_first_order", self.entropy_first),
            ("diff_entropy_second_order", self.entropy_second),
            ("cross_teacher_spearman", self.cross_teacher_spearman),
        ] {
            if let Some(v) = v {
                rows.push((name.to_string(), "all".to_string(), v));
            }
        }
        for (method, train, test) in &self.loss_gap {
            rows.push((
                format!("distill_loss_{method}"),
                "train".to_string(),
                *train,
            ));
            rows.push((format!("distill_loss_{method}"), "test".to_string(), *test));
            rows.push((
                format!("distill_gap_{method}"),
                "all".to_string(),
                test - train,
            ));
        }
        rows.extend(self.extra.iter().cloned());
        rows
    }

    /// `name,split,value` CSV.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        writeln!(w, "name,split,value")?;
        for (name, split, value) in self.rows() {
            writeln!(w, "{name},{split},{value}")?;
        }
        Ok(())
    }

    /// `rank,logit,label` CSV of all sharpness curves.
    pub fn write_sharpness_csv(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        writeln!(w, "rank,logit,label")?;
        for curve in &self.sharpness {
            for (rank, v) in curve.values.iter().enumerate() {
                writeln!(w, "{},{},{}", rank + 1, v, curve.label)?;
            }
        }
        Ok(())
    }
}
