//! Variance remedies applied to teacher logits before distillation: shuffling
//! within cumulative-probability groups, shuffling a fixed descending-rank
//! interval, and mean-pooling an ensemble of teachers.
//!
//! All transforms are pure given an explicit random stream, and averaging is
//! combined in member-index order so threaded and sequential execution give
//! bit-identical results.

use std::io::{Read, Write};

use crate::encoder::{encode_with_mode, EncodeMode, EncoderParams, SentenceBatch};
use crate::error::{Error, Result};
use crate::numeric::{softmax_row, Matrix, RngStream};
use crate::objectives::{similarity_logits, LogitMatrix, LogitSource};
use crate::Real;

/// Slack on the cosine range of row entries, matching the logit matrix.
const ROW_RANGE_TOL: Real = 1e-9;

/// Absorbs float noise when a cumulative value lands exactly on a group
/// boundary.
const GROUP_BOUNDARY_EPS: Real = 1e-12;

/// One off-diagonal row of teacher logits, remembering which row it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow {
    values: Vec<Real>,
    origin_index: usize,
}

impl LogitRow {
    pub fn new(values: Vec<Real>, origin_index: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::parameter("values", "logit row must be non-empty"));
        }
        for (j, &v) in values.iter().enumerate() {
            if !(-1.0 - ROW_RANGE_TOL..=1.0 + ROW_RANGE_TOL).contains(&v) {
                return Err(Error::parameter(
                    "values",
                    format!("entry {j} = {v} outside the cosine range [-1, 1]"),
                ));
            }
        }
        Ok(LogitRow {
            values,
            origin_index,
        })
    }

    /// Row `i` of a logit matrix with the diagonal entry removed.
    pub fn from_matrix(matrix: &LogitMatrix, i: usize) -> Result<Self> {
        LogitRow::new(matrix.off_diagonal_row(i), i)
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn origin_index(&self) -> usize {
        self.origin_index
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-position sorted-cumulative values and group membership of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    cumulative: Vec<Real>,
    group_ids: Vec<usize>,
}

impl GroupAssignment {
    /// Groups a row by its sorted cumulative probabilities at width `p`.
    /// Positions whose cumulative values fall in the same interval
    /// ((k)p, (k+1)p] share a group; ids are relabeled contiguous from 0.
    pub fn compute(row: &LogitRow, p: Real) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::parameter("p", format!("must be in (0, 1], got {p}")));
        }
        let cumulative = sorted_cumulative(row)?;
        // ceil(G/p) - 1, evaluated as floor((G - eps)/p) so a value sitting
        // exactly on a boundary (k+1)p stays in group k despite float noise.
        let raw: Vec<usize> = cumulative
            .iter()
            .map(|&g| ((g - GROUP_BOUNDARY_EPS) / p).floor().max(0.0) as usize)
            .collect();
        let mut distinct: Vec<usize> = raw.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let group_ids = raw
            .iter()
            .map(|id| distinct.binary_search(id).unwrap())
            .collect();
        Ok(GroupAssignment {
            cumulative,
            group_ids,
        })
    }

    pub fn cumulative(&self) -> &[Real] {
        &self.cumulative
    }

    pub fn group_ids(&self) -> &[usize] {
        &self.group_ids
    }

    pub fn group_count(&self) -> usize {
        self.group_ids.iter().max().map_or(0, |&m| m + 1)
    }

    /// Positions of each group, ascending within a group.
    pub fn group_positions(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.group_count()];
        for (pos, &g) in self.group_ids.iter().enumerate() {
            groups[g].push(pos);
        }
        groups
    }
}

/// Per position j, the total softmax probability (temperature 1) of all
/// entries valued at or above entry j. Exactly equal entries receive exactly
/// equal cumulative values: probabilities are accumulated per distinct value
/// class, never per position.
pub fn sorted_cumulative(row: &LogitRow) -> Result<Vec<Real>> {
    let probs = softmax_row(row.values(), 1.0)?;
    // Distinct values, descending. Bit-equal logits form one class.
    let mut classes: Vec<Real> = row.values().to_vec();
    classes.sort_by(|a, b| b.partial_cmp(a).unwrap());
    classes.dedup();

    let mut cumulative_by_class = Vec::with_capacity(classes.len());
    let mut running = 0.0;
    for &class_value in &classes {
        for (j, &v) in row.values().iter().enumerate() {
            if v == class_value {
                running += probs[j];
            }
        }
        cumulative_by_class.push(running.min(1.0));
    }

    Ok(row
        .values()
        .iter()
        .map(|v| {
            let class = classes.iter().position(|c| c == v).unwrap();
            cumulative_by_class[class]
        })
        .collect())
}

/// Uniformly permutes the row's values within each cumulative-probability
/// group; values in different groups never exchange positions.
pub fn group_p_shuffle(row: &LogitRow, p: Real, stream: &mut RngStream) -> Result<LogitRow> {
    let assignment = GroupAssignment::compute(row, p)?;
    let mut values = row.values().to_vec();
    for positions in assignment.group_positions() {
        shuffle_positions(&mut values, &positions, stream);
    }
    LogitRow::new(values, row.origin_index())
}

/// Permutes the values holding descending-value ranks `lo..=hi` (1-based)
/// among their positions; everything else stays fixed. Ties take ranks in
/// position order.
pub fn rank_interval_shuffle(
    row: &LogitRow,
    lo: usize,
    hi: usize,
    stream: &mut RngStream,
) -> Result<LogitRow> {
    if lo < 1 || lo > hi || hi > row.len() {
        return Err(Error::parameter(
            "ranks",
            format!("need 1 <= lo <= hi <= {}, got lo={lo} hi={hi}", row.len()),
        ));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable sort by value descending keeps ties in position order.
    order.sort_by(|&a, &b| row.values()[b].partial_cmp(&row.values()[a]).unwrap());
    let mut positions: Vec<usize> = order[lo - 1..hi].to_vec();
    positions.sort_unstable();

    let mut values = row.values().to_vec();
    shuffle_positions(&mut values, &positions, stream);
    LogitRow::new(values, row.origin_index())
}

/// Fisher-Yates over the values sitting at `positions` (ascending).
fn shuffle_positions(values: &mut [Real], positions: &[usize], stream: &mut RngStream) {
    let mut group: Vec<Real> = positions.iter().map(|&p| values[p]).collect();
    stream.shuffle(&mut group);
    for (&p, v) in positions.iter().zip(group) {
        values[p] = v;
    }
}

/// Which teacher-logit shuffle a training run applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShuffleMode {
    None,
    /// Cumulative-probability groups of width `p` (taken from the run config).
    GroupP,
    /// Fixed descending-rank interval, 1-based inclusive.
    RankInterval {
        lo: usize,
        hi: usize,
    },
}

/// Applies the configured shuffle to every off-diagonal row of a teacher
/// matrix, one child stream per row index. The diagonal never moves.
pub fn apply_shuffle(
    teacher: &LogitMatrix,
    mode: ShuffleMode,
    p: Real,
    stream: &RngStream,
) -> Result<LogitMatrix> {
    if matches!(mode, ShuffleMode::None) {
        return Ok(teacher.clone());
    }
    let n = teacher.n();
    let mut values = teacher.values().clone();
    for i in 0..n {
        let row = LogitRow::from_matrix(teacher, i)?;
        let mut row_stream = stream.split(i as u64);
        let shuffled = match mode {
            ShuffleMode::None => unreachable!(),
            ShuffleMode::GroupP => group_p_shuffle(&row, p, &mut row_stream)?,
            ShuffleMode::RankInterval { lo, hi } => {
                rank_interval_shuffle(&row, lo, hi, &mut row_stream)?
            }
        };
        let mut k = 0;
        for j in 0..n {
            if j != i {
                values.set(i, j, shuffled.values()[k]);
                k += 1;
            }
        }
    }
    LogitMatrix::new(values, teacher.source())
}

/// A homogeneous set of teacher checkpoints whose logits are comparable.
#[derive(Debug, Clone)]
pub struct TeacherEnsemble {
    members: Vec<EncoderParams>,
}

impl TeacherEnsemble {
    pub fn new(members: Vec<EncoderParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Ensemble("ensemble needs at least one member".into()));
        }
        let dims = members[0].dims();
        let vocab = members[0].vocab_size();
        for (m, member) in members.iter().enumerate() {
            member.validate()?;
            if member.dims() != dims || member.vocab_size() != vocab {
                return Err(Error::Ensemble(format!(
                    "member {m} has incompatible shape: dims {:?} vocab {} vs dims {:?} vocab {vocab}",
                    member.dims(),
                    member.vocab_size(),
                    dims
                )));
            }
        }
        Ok(TeacherEnsemble { members })
    }

    pub fn members(&self) -> &[EncoderParams] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// One member's deterministic-pass similarity logits.
pub fn member_logits(
    member: &EncoderParams,
    batch: &SentenceBatch,
    index: usize,
) -> Result<LogitMatrix> {
    let view = encode_with_mode(member, batch, EncodeMode::Deterministic)?;
    similarity_logits(&view, &view, LogitSource::Teacher(index))
}

/// Entry-wise mean of logit matrices, summed in slice order.
pub fn mean_logits(matrices: &[Matrix]) -> Result<Matrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Ensemble("cannot average zero logit matrices".into()))?;
    let mut sum = first.clone();
    for m in &matrices[1..] {
        if !m.same_shape(first) {
            return Err(Error::Ensemble(format!(
                "logit shapes differ: {}x{} vs {}x{}",
                m.rows(),
                m.cols(),
                first.rows(),
                first.cols()
            )));
        }
        sum = sum.add(m)?;
    }
    Ok(sum.scale(1.0 / matrices.len() as Real))
}

/// Mean of all members' raw cosine logits over one batch; temperature
/// scaling happens later, in the distillation softmax.
pub fn average_teachers(ensemble: &TeacherEnsemble, batch: &SentenceBatch) -> Result<LogitMatrix> {
    average_teachers_parallel(ensemble, batch, 1)
}

/// Same result as [`average_teachers`] with member inference fanned out over
/// up to `threads` workers; reduction stays in member-index order, so the
/// output is bit-identical to the sequential path.
pub fn average_teachers_parallel(
    ensemble: &TeacherEnsemble,
    batch: &SentenceBatch,
    threads: usize,
) -> Result<LogitMatrix> {
    let m = ensemble.len();
    let per_member: Vec<Matrix> = if threads <= 1 || m == 1 {
        let mut out = Vec::with_capacity(m);
        for (i, member) in ensemble.members().iter().enumerate() {
            out.push(member_logits(member, batch, i)?.into_values());
        }
        out
    } else {
        let workers = threads.min(m);
        let mut slots: Vec<Option<Result<Matrix>>> = (0..m).map(|_| None).collect();
        let slot_chunks: Vec<&mut [Option<Result<Matrix>>]> = {
            // Round-robin would split ownership; contiguous chunks keep the
            // borrow checker happy and the reduction order is fixed anyway.
            let chunk = m.div_ceil(workers);
            slots.chunks_mut(chunk).collect()
        };
        std::thread::scope(|scope| {
            let chunk = m.div_ceil(workers);
            for (w, slot_chunk) in slot_chunks.into_iter().enumerate() {
                let start = w * chunk;
                let members = ensemble.members();
                scope.spawn(move || {
                    for (offset, slot) in slot_chunk.iter_mut().enumerate() {
                        let idx = start + offset;
                        *slot = Some(
                            member_logits(&members[idx], batch, idx).map(LogitMatrix::into_values),
                        );
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(m);
        for slot in slots {
            out.push(slot.expect("worker filled every slot")?);
        }
        out
    };
    LogitMatrix::new(mean_logits(&per_member)?, LogitSource::Averaged)
}

/// Writes the interop logit dump: N, M, batch id as little-endian u64,
/// then each member's N x N row-major 64-bit floats.
pub fn write_logit_dump(w: &mut impl Write, batch_id: u64, members: &[Matrix]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Ensemble("logit dump needs at least one member".into()))?;
    let n = first.rows();
    for m in members {
        if m.rows() != n || m.cols() != n {
            return Err(Error::Ensemble(
                "logit dump members must share an NxN shape".into(),
            ));
        }
    }
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(members.len() as u64).to_le_bytes())?;
    w.write_all(&batch_id.to_le_bytes())?;
    for m in members {
        for &v in m.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads one logit dump written by [`write_logit_dump`].
pub fn read_logit_dump(r: &mut impl Read) -> Result<(u64, Vec<Matrix>)> {
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let n = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let m = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let batch_id = u64::from_le_bytes(buf8);
    if n == 0 || m == 0 || n.saturating_mul(n).saturating_mul(m) > (1 << 28) {
        return Err(Error::Format {
            what: "logit dump",
            message: format!("implausible header: N = {n}, M = {m}"),
        });
    }
    let mut members = Vec::with_capacity(m);
    for _ in 0..m {
        let mut values = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            r.read_exact(&mut buf8)?;
            values.push(f64::from_le_bytes(buf8));
        }
        members.push(Matrix::new(n, n, values)?);
    }
    Ok((batch_id, members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderDims};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn row(values: &[Real]) -> LogitRow {
        LogitRow::new(values.to_vec(), 0).unwrap()
    }

    #[test]
    fn cumulative_saturates_on_all_ties() {
        let g = sorted_cumulative(&row(&[0.3, 0.3, 0.3, 0.3])).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cumulative_hand_oracle() {
        // softmax([ln2, 0]) = [2/3, 1/3]; cumulative = [2/3, 1].
        let g = sorted_cumulative(&row(&[2.0f64.ln() - 1.0, -1.0])).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-12, "{g:?}");
        assert!((g[1] - 1.0).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn top_rank_cumulative_equals_own_probability() {
        let r = row(&[0.9, 0.1, -0.4, 0.3]);
        let probs = softmax_row(r.values(), 1.0).unwrap();
        let g = sorted_cumulative(&r).unwrap();
        assert!((g[0] - probs[0]).abs() < 1e-12);
    }

    // softmax([ln4, ln2, 0, 0]) = [0.5, 0.25, 0.125, 0.125], so the
    // cumulative values are [0.5, 0.75, 1, 1]. The logits are shifted by -1
    // to sit inside the cosine range; softmax is shift-invariant.
    fn quarters_row() -> LogitRow {
        row(&[4.0f64.ln() - 1.0, 2.0f64.ln() - 1.0, -1.0, -1.0])
    }

    #[test]
    fn quarters_row_grouping_at_half() {
        let a = GroupAssignment::compute(&quarters_row(), 0.5).unwrap();
        let g = a.cumulative();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] - 0.75).abs() < 1e-12);
        assert!((g[2] - 1.0).abs() < 1e-12);
        assert!((g[3] - 1.0).abs() < 1e-12);
        // (0, 0.5] holds the top logit; (0.5, 1] holds the other three.
        assert_eq!(a.group_ids(), &[0, 1, 1, 1]);
    }

    #[test]
    fn quarters_row_shuffle_reaches_all_six_arrangements() {
        // Group 1 = positions {1, 2, 3}: 3! arrangements of the top logit's
        // complement; position 0 must never move.
        let r = quarters_row();
        let mut seen = HashSet::new();
        for seed in 0..200u64 {
            let mut stream = RngStream::from_seed(seed);
            let s = group_p_shuffle(&r, 0.5, &mut stream).unwrap();
            assert_eq!(s.values()[0], r.values()[0], "top logit moved");
            let key: Vec<u64> = s.values()[1..].iter().map(|v| v.to_bits()).collect();
            seen.insert(key);
        }
        // Two tied values are indistinguishable: 3 distinct observable
        // arrangements of [ln2, 0, 0].
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn full_width_group_is_a_global_permutation() {
        let r = row(&[0.9, -0.2, 0.4, 0.05, -0.8]);
        let mut stream = RngStream::from_seed(11);
        let mut saw_change = false;
        for _ in 0..20 {
            let s = group_p_shuffle(&r, 1.0, &mut stream).unwrap();
            let mut a: Vec<u64> = s.values().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = r.values().iter().map(|v| v.to_bits()).collect();
            if s.values() != r.values() {
                saw_change = true;
            }
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b, "multiset changed");
        }
        assert!(saw_change);
    }

    #[test]
    fn singleton_row_is_fixed() {
        let r = row(&[0.4]);
        let mut stream = RngStream::from_seed(5);
        assert_eq!(group_p_shuffle(&r, 0.3, &mut stream).unwrap(), r);
    }

    #[test]
    fn p_below_min_probability_is_identity() {
        let r = row(&[0.9, 0.1, -0.4, 0.3, -0.9]);
        let min_prob = softmax_row(r.values(), 1.0)
            .unwrap()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let mut stream = RngStream::from_seed(17);
        for _ in 0..50 {
            let s = group_p_shuffle(&r, min_prob * 0.9, &mut stream).unwrap();
            assert_eq!(s, r);
        }
    }

    #[test]
    fn group_p_rejects_bad_p() {
        let r = row(&[0.1, 0.2]);
        let mut stream = RngStream::from_seed(0);
        assert!(group_p_shuffle(&r, 0.0, &mut stream).is_err());
        assert!(group_p_shuffle(&r, 1.5, &mut stream).is_err());
    }

    #[test]
    fn equal_logits_always_share_a_group() {
        let r = row(&[0.25, -0.1, 0.25, 0.6, -0.1]);
        let a = GroupAssignment::compute(&r, 0.17).unwrap();
        let ids = a.group_ids();
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[1], ids[4]);
        assert_eq!(a.cumulative()[0], a.cumulative()[2]);
    }

    #[test]
    fn rank_interval_identity_on_single_rank() {
        let r = row(&[0.5, -0.5, 0.2]);
        let mut stream = RngStream::from_seed(1);
        assert_eq!(rank_interval_shuffle(&r, 2, 2, &mut stream).unwrap(), r);
    }

    #[test]
    fn rank_interval_bounds_are_validated() {
        let r = row(&[0.5, -0.5, 0.2]);
        let mut stream = RngStream::from_seed(1);
        assert!(rank_interval_shuffle(&r, 0, 2, &mut stream).is_err());
        assert!(rank_interval_shuffle(&r, 3, 2, &mut stream).is_err());
        assert!(rank_interval_shuffle(&r, 1, 4, &mut stream).is_err());
    }

    #[test]
    fn rank_interval_only_touches_selected_ranks() {
        let mut stream = RngStream::from_seed(23);
        let mut base = RngStream::from_seed(99);
        for _ in 0..50 {
            let values: Vec<Real> = (0..20).map(|_| base.uniform(-1.0, 1.0)).collect();
            let r = LogitRow::new(values.clone(), 3).unwrap();
            let s = rank_interval_shuffle(&r, 5, 9, &mut stream).unwrap();

            // Brute-force the positions of ranks 5..=9 (descending values).
            let mut order: Vec<usize> = (0..20).collect();
            order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
            let inside: HashSet<usize> = order[4..9].iter().copied().collect();
            for (pos, (shuffled, original)) in s.values().iter().zip(&values).enumerate() {
                if !inside.contains(&pos) {
                    assert_eq!(shuffled.to_bits(), original.to_bits());
                }
            }
            let mut a: Vec<u64> = s.values().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sixty_three_element_top_twelve() {
        let mut base = RngStream::from_seed(7);
        let values: Vec<Real> = (0..63).map(|_| base.uniform(-1.0, 1.0)).collect();
        let r = LogitRow::new(values.clone(), 0).unwrap();
        let mut stream = RngStream::from_seed(31);
        let s = rank_interval_shuffle(&r, 1, 12, &mut stream).unwrap();

        let mut order: Vec<usize> = (0..63).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
        let top: HashSet<usize> = order[..12].iter().copied().collect();
        for (pos, (shuffled, original)) in s.values().iter().zip(&values).enumerate() {
            if !top.contains(&pos) {
                assert_eq!(shuffled, original);
            }
        }
        let mut a = s.values().to_vec();
        let mut b = values.clone();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
    }

    fn tiny_batch() -> SentenceBatch {
        SentenceBatch::new(vec![vec![0, 1], vec![2, 3], vec![4, 5, 6]]).unwrap()
    }

    fn member(seed: u64) -> EncoderParams {
        init_params(10, EncoderDims::new(6, 8, 4), 0.1, seed).unwrap()
    }

    #[test]
    fn single_member_average_is_identity() {
        let ensemble = TeacherEnsemble::new(vec![member(1)]).unwrap();
        let batch = tiny_batch();
        let avg = average_teachers(&ensemble, &batch).unwrap();
        let single = member_logits(&ensemble.members()[0], &batch, 0).unwrap();
        assert_eq!(avg.values(), single.values());
    }

    #[test]
    fn mean_logits_hand_oracle() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let mean = mean_logits(&[a, b]).unwrap();
        assert_eq!(mean.values(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_logits_is_order_invariant_and_linear() {
        let mut stream = RngStream::from_seed(3);
        let mats: Vec<Matrix> = (0..4)
            .map(|_| {
                Matrix::new(3, 3, (0..9).map(|_| stream.uniform(-1.0, 1.0)).collect()).unwrap()
            })
            .collect();
        let forward = mean_logits(&mats).unwrap();
        let reversed: Vec<Matrix> = mats.iter().rev().cloned().collect();
        let backward = mean_logits(&reversed).unwrap();
        for (a, b) in forward.values().iter().zip(backward.values()) {
            assert!((a - b).abs() < 1e-12);
        }

        let scaled: Vec<Matrix> = mats.iter().map(|m| m.scale(2.0)).collect();
        let mean_scaled = mean_logits(&scaled).unwrap();
        for (a, b) in mean_scaled.values().iter().zip(forward.values()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn threaded_average_is_bit_identical() {
        let ensemble = TeacherEnsemble::new((0..5).map(member).collect::<Vec<_>>()).unwrap();
        let batch = tiny_batch();
        let sequential = average_teachers(&ensemble, &batch).unwrap();
        for threads in [2, 3, 5, 8] {
            let parallel = average_teachers_parallel(&ensemble, &batch, threads).unwrap();
            assert_eq!(parallel.values(), sequential.values(), "threads={threads}");
        }
    }

    #[test]
    fn incompatible_member_is_rejected() {
        let odd = init_params(10, EncoderDims::new(6, 8, 5), 0.1, 9).unwrap();
        let err = TeacherEnsemble::new(vec![member(1), odd]).unwrap_err();
        assert!(matches!(err, Error::Ensemble(_)));
    }

    #[test]
    fn averaged_variance_shrinks_with_member_count() {
        // Synthetic members: shared base logits plus independent noise.
        // The M-average's deviation shrinks like 1/sqrt(M).
        let mut stream = RngStream::from_seed(42);
        let sigma = 0.05;
        let mut mean_abs_dev = |m: usize| -> Real {
            let mut acc = 0.0;
            let trials = 400;
            for _ in 0..trials {
                let base: Vec<Real> = (0..9).map(|_| stream.uniform(-0.5, 0.5)).collect();
                let members: Vec<Matrix> = (0..m)
                    .map(|_| {
                        let noisy: Vec<Real> =
                            base.iter().map(|&v| v + sigma * stream.normal()).collect();
                        Matrix::new(3, 3, noisy).unwrap()
                    })
                    .collect();
                let avg = mean_logits(&members).unwrap();
                let base_m = Matrix::new(3, 3, base).unwrap();
                acc += avg.sub(&base_m).unwrap().frobenius_norm();
            }
            acc / trials as Real
        };
        let dev1 = mean_abs_dev(1);
        let dev16 = mean_abs_dev(16);
        let ratio = dev1 / dev16;
        assert!((ratio - 4.0).abs() < 0.6, "deviation ratio {ratio}");
    }

    #[test]
    fn apply_shuffle_keeps_diagonal_and_multisets() {
        let mut stream = RngStream::from_seed(8);
        let values: Vec<Real> = (0..16).map(|_| stream.uniform(-1.0, 1.0)).collect();
        let teacher =
            LogitMatrix::new(Matrix::new(4, 4, values).unwrap(), LogitSource::Teacher(0)).unwrap();
        let root = RngStream::from_seed(77);
        let shuffled = apply_shuffle(&teacher, ShuffleMode::GroupP, 0.5, &root).unwrap();
        for i in 0..4 {
            assert_eq!(
                shuffled.values().get(i, i),
                teacher.values().get(i, i),
                "diagonal moved"
            );
            let mut a = teacher.off_diagonal_row(i);
            let mut b = shuffled.off_diagonal_row(i);
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(a, b);
        }
        let none = apply_shuffle(&teacher, ShuffleMode::None, 0.5, &root).unwrap();
        assert_eq!(none.values(), teacher.values());
    }

    #[test]
    fn logit_dump_round_trips() {
        let a = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        let b = Matrix::from_rows(&[vec![-0.1, -0.2], vec![-0.3, -0.4]]).unwrap();
        let mut buf = Vec::new();
        write_logit_dump(&mut buf, 99, &[a.clone(), b.clone()]).unwrap();
        let (batch_id, members) = read_logit_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(batch_id, 99);
        assert_eq!(members, vec![a, b]);
    }

    proptest! {
        #[test]
        fn shuffle_preserves_multiset_and_groups(
            seed in any::<u64>(),
            shuffle_seed in any::<u64>(),
            len in 2usize..24,
            p in 0.05f64..1.0,
        ) {
            let mut stream = RngStream::from_seed(seed);
            let values: Vec<Real> = (0..len).map(|_| stream.uniform(-1.0, 1.0)).collect();
            let r = LogitRow::new(values.clone(), 0).unwrap();
            let assignment = GroupAssignment::compute(&r, p).unwrap();
            let mut shuffle_stream = RngStream::from_seed(shuffle_seed);
            let s = group_p_shuffle(&r, p, &mut shuffle_stream).unwrap();

            // Multiset preserved.
            let mut a: Vec<u64> = s.values().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);

            // Each group's position set maps onto itself.
            for positions in assignment.group_positions() {
                let mut before: Vec<u64> =
                    positions.iter().map(|&pvar| values[pvar].to_bits()).collect();
                let mut after: Vec<u64> =
                    positions.iter().map(|&pvar| s.values()[pvar].to_bits()).collect();
                before.sort_unstable();
                after.sort_unstable();
                prop_assert_eq!(before, after);
            }
        }

        #[test]
        fn cumulative_values_are_sorted_consistently(
            seed in any::<u64>(),
            len in 1usize..24,
        ) {
            let mut stream = RngStream::from_seed(seed);
            let values: Vec<Real> = (0..len).map(|_| stream.uniform(-1.0, 1.0)).collect();
            let r = LogitRow::new(values.clone(), 0).unwrap();
            let g = sorted_cumulative(&r).unwrap();
            let max = g.iter().fold(0.0f64, |m, &v| m.max(v));
            prop_assert!((max - 1.0).abs() < 1e-9);
            for (i, &gi) in g.iter().enumerate() {
                prop_assert!(gi > 0.0);
                for (j, &gj) in g.iter().enumerate() {
                    // Larger logit = smaller cumulative value; ties equal.
                    if values[i] > values[j] {
                        prop_assert!(gi < gj);
                    }
                    if values[i] == values[j] {
                        prop_assert_eq!(gi, gj);
                    }
                }
            }
        }
    }
}
