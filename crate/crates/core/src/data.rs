//! Synthetic topic corpora with ground-truth pair scores, plain-text and TSV
//! ingestion, and deterministic drop-last batching.
//!
//! Sentences are drawn from latent topic mixtures; the gold score of a pair
//! is the cosine of the two mixtures rescaled to [0, 5], so an encoder that
//! recovers topic structure scores well on rank correlation by construction.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::encoder::SentenceBatch;
use crate::error::{Error, Result};
use crate::numeric::{softmax_row, RngStream};
use crate::Real;

/// Hard cap on sentence length, matching the ingestion default.
pub const MAX_SEQ_LEN: usize = 32;

/// Probability mass a topic leaks uniformly over the whole vocabulary.
const TOPIC_SMOOTHING: Real = 0.05;

/// Resample budget per sentence slot and per pair partner before generation
/// gives up.
const MAX_ATTEMPTS: usize = 500;

/// Minimum share of pairs demanded in each unit-width score bucket.
const MIN_BUCKET_SHARE: Real = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Dev => write!(f, "dev"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// A tokenized sentence collection backed by one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sentences: Vec<Vec<usize>>,
    vocab_size: usize,
    split: SplitTag,
}

impl Corpus {
    /// Validates token ids against `vocab_size` and lengths against
    /// `[1, max_seq_len]`.
    pub fn new(
        sentences: Vec<Vec<usize>>,
        vocab_size: usize,
        split: SplitTag,
        max_seq_len: usize,
    ) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() || s.len() > max_seq_len {
                return Err(Error::Input(format!(
                    "sentence {i} has length {}, expected 1..={max_seq_len}",
                    s.len()
                )));
            }
            for &tok in s {
                if tok >= vocab_size {
                    return Err(Error::Input(format!(
                        "sentence {i} holds token id {tok} >= vocab size {vocab_size}"
                    )));
                }
            }
        }
        Ok(Corpus {
            sentences,
            vocab_size,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Vec<usize>] {
        &self.sentences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }
}

/// Two tokenized sentences with a ground-truth similarity in [0, 5].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub sentence_a: Vec<usize>,
    pub sentence_b: Vec<usize>,
    pub gold_score: Real,
}

/// Knobs for the synthetic generator. `topic_concentration` is the softmax
/// temperature of the latent mixtures: small values give near-one-hot topic
/// usage, large values flatten every mixture toward uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub topics: usize,
    pub vocab: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub topic_concentration: Real,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            topics: 16,
            vocab: 2000,
            train_sentences: 10_000,
            test_sentences: 1_000,
            dev_pairs: 1_000,
            test_pairs: 1_000,
            min_sentence_len: 4,
            max_sentence_len: 12,
            topic_concentration: 0.3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::parameter("topics", "need at least 2 topics"));
        }
        if self.vocab < self.topics {
            return Err(Error::parameter(
                "vocab",
                format!("vocab {} must be >= topics {}", self.vocab, self.topics),
            ));
        }
        if self.min_sentence_len < 1
            || self.max_sentence_len < self.min_sentence_len
            || self.max_sentence_len > MAX_SEQ_LEN
        {
            return Err(Error::parameter(
                "sentence length range",
                format!(
                    "need 1 <= min <= max <= {MAX_SEQ_LEN}, got [{}, {}]",
                    self.min_sentence_len, self.max_sentence_len
                ),
            ));
        }
        if !(self.topic_concentration > 0.0) {
            return Err(Error::parameter(
                "topic_concentration",
                "must be a positive real",
            ));
        }
        if self.train_sentences == 0 {
            return Err(Error::parameter("train_sentences", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything one generator run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Corpus,
    pub test: Corpus,
    pub dev_pairs: Vec<ScoredPair>,
    pub test_pairs: Vec<ScoredPair>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Maps a surface token to its id bucket.
pub fn hash_token(token: &str, vocab_size: usize) -> usize {
    (fnv1a(token.as_bytes()) % vocab_size as u64) as usize
}

/// Deterministic surface forms for token ids: `strings[id]` hashes back to
/// `id` under [`hash_token`], so written corpora reload to identical ids.
#[derive(Debug, Clone)]
pub struct TokenLexicon {
    vocab_size: usize,
    strings: Vec<String>,
}

impl TokenLexicon {
    pub fn new(vocab_size: usize) -> Self {
        let mut strings: Vec<Option<String>> = vec![None; vocab_size];
        let mut remaining = vocab_size;
        let mut candidate = 0u64;
        while remaining > 0 {
            let s = format!("t{candidate}");
            let id = hash_token(&s, vocab_size);
            if strings[id].is_none() {
                strings[id] = Some(s);
                remaining -= 1;
            }
            candidate += 1;
        }
        TokenLexicon {
            vocab_size,
            strings: strings.into_iter().map(Option::unwrap).collect(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.strings[id]
    }

    pub fn render(&self, sentence: &[usize]) -> String {
        sentence
            .iter()
            .map(|&id| self.surface(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn cosine(a: &[Real], b: &[Real]) -> Real {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Gold score of two latent mixtures: cosine rescaled to [0, 5]. Rank
/// correlation between gold and cosine is exactly 1 because the map is
/// strictly monotone.
pub fn mixture_similarity_score(a: &[Real], b: &[Real]) -> Result<Real> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Generation(format!(
            "mixture lengths differ or are empty: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Generation(
            "mixtures must be non-negative and finite".into(),
        ));
    }
    let na: Real = a.iter().map(|v| v * v).sum();
    let nb: Real = b.iter().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Generation("zero mixture has no direction".into()));
    }
    Ok(5.0 * cosine(a, b))
}

/// Gumbel-softmax draw over `k` topics at the configured temperature.
fn sample_mixture(stream: &mut RngStream, k: usize, temperature: Real) -> Result<Vec<Real>> {
    let gumbels: Vec<Real> = (0..k)
        .map(|_| {
            let u = stream.next_f64().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect();
    softmax_row(&gumbels, temperature)
}

fn sample_categorical(stream: &mut RngStream, probs: &[Real]) -> usize {
    let u = stream.next_f64();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct TopicModel {
    topics: usize,
    vocab: usize,
}

impl TopicModel {
    /// Tokens [k*V/K, (k+1)*V/K) form topic k's block; a small uniform
    /// leak keeps every token reachable from every topic.
    fn sample_token(&self, stream: &mut RngStream, topic: usize) -> usize {
        if stream.bernoulli(TOPIC_SMOOTHING) {
            return stream.gen_range(self.vocab);
        }
        let start = topic * self.vocab / self.topics;
        let end = (topic + 1) * self.vocab / self.topics;
        start + stream.gen_range(end - start)
    }

    fn sample_sentence(
        &self,
        stream: &mut RngStream,
        mixture: &[Real],
        min_len: usize,
        max_len: usize,
    ) -> Vec<usize> {
        let len = min_len + stream.gen_range(max_len - min_len + 1);
        (0..len)
            .map(|_| {
                let topic = sample_categorical(stream, mixture);
                self.sample_token(stream, topic)
            })
            .collect()
    }
}

fn sample_distinct_sentence(
    model: &TopicModel,
    stream: &mut RngStream,
    mixture: &[Real],
    cfg: &GeneratorConfig,
    seen: &mut HashSet<Vec<usize>>,
) -> Result<Vec<usize>> {
    for _ in 0..MAX_ATTEMPTS {
        let s = model.sample_sentence(stream, mixture, cfg.min_sentence_len, cfg.max_sentence_len);
        if seen.insert(s.clone()) {
            return Ok(s);
        }
    }
    Err(Error::Generation(format!(
        "could not draw a fresh sentence after {MAX_ATTEMPTS} attempts; \
         requested counts exhaust the distinct-sentence budget, use a larger \
         vocab or longer sentences"
    )))
}

fn blend(a: &[Real], c: &[Real], t: Real) -> Vec<Real> {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| (1.0 - t) * x + t * y)
        .collect()
}

/// Draws one pair whose gold score lands in `bucket` (unit-width buckets of
/// [0, 5]). The second mixture is a convex blend between the anchor and a
/// far partner, bisected until the cosine hits the bucket target.
fn build_pair_mixtures(
    stream: &mut RngStream,
    cfg: &GeneratorConfig,
    bucket: usize,
) -> Result<(Vec<Real>, Vec<Real>, Real)> {
    let margin = 0.01;
    let lo = bucket as Real / 5.0 + margin;
    let hi = (bucket + 1) as Real / 5.0 - margin;
    let target = stream.uniform(lo, hi);

    let w_a = sample_mixture(stream, cfg.topics, cfg.topic_concentration)?;
    let mut partner = None;
    for _ in 0..MAX_ATTEMPTS {
        let w_c = sample_mixture(stream, cfg.topics, cfg.topic_concentration)?;
        if cosine(&w_a, &w_c) <= target {
            partner = Some(w_c);
            break;
        }
    }
    let w_c = partner.ok_or_else(|| {
        Error::Generation(format!(
            "no mixture pair reached similarity <= {target:.3} for score bucket \
             [{bucket}, {}) after {MAX_ATTEMPTS} attempts; generate more pairs or \
             use a sharper (smaller) topic-concentration",
            bucket + 1
        ))
    })?;

    // cos(w_a, blend(t)) falls monotonically from 1 to cos(w_a, w_c).
    let (mut t_lo, mut t_hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (t_lo + t_hi);
        if cosine(&w_a, &blend(&w_a, &w_c, mid)) > target {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    let w_b = blend(&w_a, &w_c, t_hi);
    let gold = mixture_similarity_score(&w_a, &w_b)?;
    Ok((w_a, w_b, gold))
}

fn generate_pairs(
    model: &TopicModel,
    stream: &mut RngStream,
    cfg: &GeneratorConfig,
    count: usize,
    seen: &mut HashSet<Vec<usize>>,
) -> Result<Vec<ScoredPair>> {
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let bucket = i % 5;
        let (w_a, w_b, gold) = build_pair_mixtures(stream, cfg, bucket)?;
        let sentence_a = sample_distinct_sentence(model, stream, &w_a, cfg, seen)?;
        let sentence_b = sample_distinct_sentence(model, stream, &w_b, cfg, seen)?;
        pairs.push(ScoredPair {
            sentence_a,
            sentence_b,
            gold_score: gold,
        });
    }
    Ok(pairs)
}

fn check_bucket_coverage(pairs: &[ScoredPair]) -> Result<()> {
    let mut counts = [0usize; 5];
    for p in pairs {
        let b = (p.gold_score.floor() as usize).min(4);
        counts[b] += 1;
    }
    let need = (MIN_BUCKET_SHARE * pairs.len() as Real).floor() as usize;
    for (b, &c) in counts.iter().enumerate() {
        if c < need {
            return Err(Error::Generation(format!(
                "score bucket [{b}, {}) holds {c} of {} pairs, below the {:.0}% floor; \
                 generate more pairs",
                b + 1,
                pairs.len(),
                MIN_BUCKET_SHARE * 100.0
            )));
        }
    }
    Ok(())
}

/// Generates train/test corpora plus scored dev/test pairs, all disjoint in
/// sentence identity and fully determined by `cfg.seed`.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let model = TopicModel {
        topics: cfg.topics,
        vocab: cfg.vocab,
    };
    let root = RngStream::from_seed(cfg.seed).split_label("generator");
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    let mut corpus_sentences = |label: &str, count: usize| -> Result<Vec<Vec<usize>>> {
        let mut stream = root.split_label(label);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mixture = sample_mixture(&mut stream, cfg.topics, cfg.topic_concentration)?;
            out.push(sample_distinct_sentence(
                &model,
                &mut stream,
                &mixture,
                cfg,
                &mut seen,
            )?);
        }
        Ok(out)
    };

    let train_sentences = corpus_sentences("corpus-train", cfg.train_sentences)?;
    let test_sentences = corpus_sentences("corpus-test", cfg.test_sentences)?;

    let mut dev_stream = root.split_label("pairs-dev");
    let dev_pairs = generate_pairs(&model, &mut dev_stream, cfg, cfg.dev_pairs, &mut seen)?;
    let mut test_stream = root.split_label("pairs-test");
    let test_pairs = generate_pairs(&model, &mut test_stream, cfg, cfg.test_pairs, &mut seen)?;

    check_bucket_coverage(&dev_pairs)?;
    check_bucket_coverage(&test_pairs)?;

    Ok(GeneratedData {
        train: Corpus::new(
            train_sentences,
            cfg.vocab,
            SplitTag::Train,
            cfg.max_sentence_len,
        )?,
        test: Corpus::new(
            test_sentences,
            cfg.vocab,
            SplitTag::Test,
            cfg.max_sentence_len,
        )?,
        dev_pairs,
        test_pairs,
    })
}

/// Writes one sentence per line using the lexicon's surface forms.
pub fn write_corpus(corpus: &Corpus, lexicon: &TokenLexicon, w: &mut impl Write) -> Result<()> {
    for s in corpus.sentences() {
        writeln!(w, "{}", lexicon.render(s))?;
    }
    Ok(())
}

/// Writes `score<TAB>sentence1<TAB>sentence2` rows.
pub fn write_pairs(pairs: &[ScoredPair], lexicon: &TokenLexicon, w: &mut impl Write) -> Result<()> {
    for p in pairs {
        writeln!(
            w,
            "{:.6}\t{}\t{}",
            p.gold_score,
            lexicon.render(&p.sentence_a),
            lexicon.render(&p.sentence_b)
        )?;
    }
    Ok(())
}

fn tokenize(line: &str, vocab_size: usize, max_seq_len: usize) -> Vec<usize> {
    line.split_whitespace()
        .take(max_seq_len)
        .map(|t| hash_token(t, vocab_size))
        .collect()
}

/// Loads a one-sentence-per-line corpus with hash tokenization into
/// `vocab_size` buckets and truncation to `max_seq_len`. Blank lines are
/// skipped.
pub fn load_corpus(
    path: &Path,
    vocab_size: usize,
    max_seq_len: usize,
    split: SplitTag,
) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    let sentences: Vec<Vec<usize>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(l, vocab_size, max_seq_len))
        .collect();
    if sentences.is_empty() {
        return Err(Error::Input(format!(
            "corpus file {} holds no sentences",
            path.display()
        )));
    }
    Corpus::new(sentences, vocab_size, split, max_seq_len)
}

/// Loads `score<TAB>sentence1<TAB>sentence2` rows; scores must lie in [0, 5].
pub fn load_sts(path: &Path, vocab_size: usize, max_seq_len: usize) -> Result<Vec<ScoredPair>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, got {}", parts.len()),
            });
        }
        let score: Real = parts[0].trim().parse().map_err(|e| Error::Parse {
            line: lineno,
            message: format!("bad score {:?}: {e}", parts[0]),
        })?;
        if !(0.0..=5.0).contains(&score) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("score {score} outside [0, 5]"),
            });
        }
        let sentence_a = tokenize(parts[1], vocab_size, max_seq_len);
        let sentence_b = tokenize(parts[2], vocab_size, max_seq_len);
        if sentence_a.is_empty() || sentence_b.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty sentence".into(),
            });
        }
        pairs.push(ScoredPair {
            sentence_a,
            sentence_b,
            gold_score: score,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Input(format!(
            "pair file {} holds no rows",
            path.display()
        )));
    }
    Ok(pairs)
}

/// One epoch of drop-last batches over a seeded uniform shuffle. The shuffle
/// stream is split per epoch, so epochs reorder independently while the
/// whole schedule stays a pure function of (seed, epoch).
pub fn batch_iter(corpus: &Corpus, n: usize, seed: u64, epoch: u64) -> Result<Vec<SentenceBatch>> {
    if n < 2 {
        return Err(Error::parameter(
            "n",
            format!("batch size must be >= 2, got {n}"),
        ));
    }
    if n > corpus.len() {
        return Err(Error::Input(format!(
            "batch size {n} exceeds corpus size {}",
            corpus.len()
        )));
    }
    let mut stream = RngStream::from_seed(seed).split_label("batch").split(epoch);
    let order = stream.permutation(corpus.len());
    let batches = corpus.len() / n;
    let mut out = Vec::with_capacity(batches);
    for b in 0..batches {
        let sentences = order[b * n..(b + 1) * n]
            .iter()
            .map(|&i| corpus.sentences()[i].clone())
            .collect();
        out.push(SentenceBatch::new(sentences)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            topics: 8,
            vocab: 200,
            train_sentences: 300,
            test_sentences: 60,
            dev_pairs: 40,
            test_pairs: 40,
            min_sentence_len: 4,
            max_sentence_len: 10,
            topic_concentration: 0.3,
            seed: 42,
        }
    }

    #[test]
    fn identical_mixtures_score_five() {
        let w = vec![0.25, 0.25, 0.25, 0.25];
        assert!((mixture_similarity_score(&w, &w).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_mixtures_score_zero() {
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        assert_eq!(mixture_similarity_score(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_cfg();
        assert_eq!(
            generate_corpus(&cfg).unwrap(),
            generate_corpus(&cfg).unwrap()
        );
        let mut other = cfg;
        other.seed = 43;
        assert_ne!(
            generate_corpus(&other).unwrap(),
            generate_corpus(&tiny_cfg()).unwrap()
        );
    }

    #[test]
    fn generated_data_meets_contracts() {
        let cfg = tiny_cfg();
        let data = generate_corpus(&cfg).unwrap();
        assert_eq!(data.train.len(), cfg.train_sentences);
        assert_eq!(data.test.len(), cfg.test_sentences);
        assert_eq!(data.dev_pairs.len(), cfg.dev_pairs);

        for p in data.dev_pairs.iter().chain(&data.test_pairs) {
            assert!((0.0..=5.0).contains(&p.gold_score));
            for s in [&p.sentence_a, &p.sentence_b] {
                assert!((cfg.min_sentence_len..=cfg.max_sentence_len).contains(&s.len()));
                assert!(s.iter().all(|&t| t < cfg.vocab));
            }
        }

        // Buckets: round-robin construction puts ~20% in each.
        let mut counts = [0usize; 5];
        for p in &data.dev_pairs {
            counts[(p.gold_score.floor() as usize).min(4)] += 1;
        }
        for &c in &counts {
            assert!(c >= cfg.dev_pairs / 10, "bucket counts {counts:?}");
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let data = generate_corpus(&tiny_cfg()).unwrap();
        let mut all: Vec<&Vec<usize>> = Vec::new();
        all.extend(data.train.sentences());
        all.extend(data.test.sentences());
        for p in data.dev_pairs.iter().chain(&data.test_pairs) {
            all.push(&p.sentence_a);
            all.push(&p.sentence_b);
        }
        let unique: HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn flat_mixtures_make_low_buckets_infeasible() {
        let mut cfg = tiny_cfg();
        cfg.topic_concentration = 50.0;
        let err = generate_corpus(&cfg).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err:?}");
    }

    #[test]
    fn lexicon_round_trips_token_ids() {
        let lex = TokenLexicon::new(200);
        for id in 0..200 {
            assert_eq!(hash_token(lex.surface(id), 200), id);
        }
    }

    #[test]
    fn written_corpus_reloads_identically() {
        let cfg = tiny_cfg();
        let data = generate_corpus(&cfg).unwrap();
        let lex = TokenLexicon::new(cfg.vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.txt");
        let mut buf = Vec::new();
        write_corpus(&data.train, &lex, &mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let loaded = load_corpus(&path, cfg.vocab, MAX_SEQ_LEN, SplitTag::Train).unwrap();
        assert_eq!(loaded.sentences(), data.train.sentences());
    }

    #[test]
    fn written_pairs_reload_with_scores() {
        let cfg = tiny_cfg();
        let data = generate_corpus(&cfg).unwrap();
        let lex = TokenLexicon::new(cfg.vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.tsv");
        let mut buf = Vec::new();
        write_pairs(&data.dev_pairs, &lex, &mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let loaded = load_sts(&path, cfg.vocab, MAX_SEQ_LEN).unwrap();
        assert_eq!(loaded.len(), data.dev_pairs.len());
        for (l, orig) in loaded.iter().zip(&data.dev_pairs) {
            assert_eq!(l.sentence_a, orig.sentence_a);
            assert_eq!(l.sentence_b, orig.sentence_b);
            assert!((l.gold_score - orig.gold_score).abs() < 1e-5);
        }
    }

    #[test]
    fn load_corpus_counts_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let long_line = (0..40)
            .map(|i| format!("tok{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        std::fs::write(&path, format!("a b c\n\n{long_line}\n  \nx y\n")).unwrap();
        let c = load_corpus(&path, 100, 32, SplitTag::Train).unwrap();
        // 5 lines, 2 blank: 3 sentences survive.
        assert_eq!(c.len(), 3);
        assert_eq!(c.sentences()[0].len(), 3);
        assert_eq!(c.sentences()[1].len(), 32);
        assert_eq!(c.sentences()[2].len(), 2);
    }

    #[test]
    fn load_corpus_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "\n\n").unwrap();
        assert!(matches!(
            load_corpus(&path, 100, 32, SplitTag::Train),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn load_corpus_missing_file_is_io_error() {
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/x.txt"), 100, 32, SplitTag::Train),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn load_sts_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        std::fs::write(&path, "5.0\ta b\ta b\n").unwrap();
        let pairs = load_sts(&path, 100, 32).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].gold_score, 5.0);
        assert_eq!(pairs[0].sentence_a, pairs[0].sentence_b);

        std::fs::write(&path, "2.0\ta\tb\n6.1\tx\ty\n").unwrap();
        match load_sts(&path, 100, 32).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("6.1"), "{message}");
            }
            other => panic!("expected Parse, got {other:?}"),
        }

        std::fs::write(&path, "2.0\tonly one field\n").unwrap();
        assert!(matches!(
            load_sts(&path, 100, 32),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn load_sts_preserves_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let mut text = String::new();
        for i in 0..100 {
            text.push_str(&format!("{:.2}\ts{i}\tz{i}\n", (i % 6) as f64 * 0.8));
        }
        std::fs::write(&path, text).unwrap();
        let pairs = load_sts(&path, 1000, 32).unwrap();
        assert_eq!(pairs.len(), 100);
        for (i, p) in pairs.iter().enumerate() {
            assert!((p.gold_score - (i % 6) as f64 * 0.8).abs() < 1e-9);
        }
    }

    fn corpus_of(n: usize) -> Corpus {
        let sentences = (0..n).map(|i| vec![i % 50, (i / 50) % 50]).collect();
        Corpus::new(sentences, 50, SplitTag::Train, 32).unwrap()
    }

    #[test]
    fn batching_drops_last_partial() {
        let c = corpus_of(130);
        let batches = batch_iter(&c, 64, 1, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 64));
    }

    #[test]
    fn batching_is_deterministic_and_duplicate_free() {
        let c = corpus_of(130);
        let a = batch_iter(&c, 64, 1, 0).unwrap();
        let b = batch_iter(&c, 64, 1, 0).unwrap();
        assert_eq!(a, b);
        let other_epoch = batch_iter(&c, 64, 1, 1).unwrap();
        assert_ne!(a, other_epoch);

        let mut seen = HashSet::new();
        for batch in &a {
            for s in batch.sentences() {
                assert!(seen.insert(s.clone()), "sentence emitted twice");
            }
        }
        assert_eq!(seen.len(), 128);
    }

    #[test]
    fn batching_rejects_bad_sizes() {
        let c = corpus_of(10);
        assert!(matches!(
            batch_iter(&c, 1, 0, 0),
            Err(Error::Parameter { .. })
        ));
        assert!(matches!(batch_iter(&c, 11, 0, 0), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn batches_partition_a_prefix_of_the_shuffle(
            len in 4usize..200,
            n in 2usize..32,
            seed in any::<u64>(),
        ) {
            prop_assume!(n <= len);
            let c = corpus_of(len);
            let batches = batch_iter(&c, n, seed, 0).unwrap();
            prop_assert_eq!(batches.len(), len / n);
            let mut emitted = 0usize;
            for b in &batches {
                prop_assert_eq!(b.len(), n);
                emitted += b.len();
            }
            prop_assert_eq!(emitted, (len / n) * n);
        }

        #[test]
        fn lexicon_round_trips_for_any_vocab(v in 1usize..400) {
            let lex = TokenLexicon::new(v);
            for id in (0..v).step_by(1 + v / 17) {
                prop_assert_eq!(hash_token(lex.surface(id), v), id);
            }
        }
    }
}
