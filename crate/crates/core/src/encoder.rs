//! Toy sentence encoder: embedding lookup, mean pooling, one tanh hidden
//! layer, and a linear projection head. Dropout gives two stochastic views
//! of the same batch, which form the positive pairs for contrastive training.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, NodeId, RngStream};
use crate::Real;

/// Layer widths: token embedding, hidden layer, projection head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub token: usize,
    pub hidden: usize,
    pub output: usize,
}

impl EncoderDims {
    pub fn new(token: usize, hidden: usize, output: usize) -> Self {
        EncoderDims {
            token,
            hidden,
            output,
        }
    }
}

/// Default widths; small enough to train in seconds, large enough to show
/// the variance effects the diagnostics look for.
pub const DEFAULT_DIMS: EncoderDims = EncoderDims {
    token: 32,
    hidden: 64,
    output: 32,
};

/// Default dropout rate for the two injection points.
pub const DEFAULT_DROPOUT: Real = 0.1;

/// All trainable state of one encoder. Biases are kept as single-row
/// matrices so the optimizer treats every field uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Matrix,
    pub hidden_weight: Matrix,
    pub hidden_bias: Matrix,
    pub head_weight: Matrix,
    pub head_bias: Matrix,
    pub dropout_rate: Real,
}

impl EncoderParams {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            token: self.embedding.cols(),
            hidden: self.hidden_weight.cols(),
            output: self.head_weight.cols(),
        }
    }

    /// Stable (name, matrix) listing; optimizer state, checkpoints and
    /// gradient maps all rely on this order.
    pub fn fields(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("embedding", &self.embedding),
            ("hidden_weight", &self.hidden_weight),
            ("hidden_bias", &self.hidden_bias),
            ("head_weight", &self.head_weight),
            ("head_bias", &self.head_bias),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Matrix); 5] {
        [
            ("embedding", &mut self.embedding),
            ("hidden_weight", &mut self.hidden_weight),
            ("hidden_bias", &mut self.hidden_bias),
            ("head_weight", &mut self.head_weight),
            ("head_bias", &mut self.head_bias),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.hidden_weight.rows() != d.token {
            return Err(Error::parameter(
                "hidden_weight",
                format!(
                    "expected {} rows, got {}",
                    d.token,
                    self.hidden_weight.rows()
                ),
            ));
        }
        if self.hidden_bias.rows() != 1 || self.hidden_bias.cols() != d.hidden {
            return Err(Error::parameter("hidden_bias", "must be 1 x hidden"));
        }
        if self.head_weight.rows() != d.hidden {
            return Err(Error::parameter(
                "head_weight",
                format!(
                    "expected {} rows, got {}",
                    d.hidden,
                    self.head_weight.rows()
                ),
            ));
        }
        if self.head_bias.rows() != 1 || self.head_bias.cols() != d.output {
            return Err(Error::parameter("head_bias", "must be 1 x output"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::parameter(
                "dropout_rate",
                format!("must be in [0, 1), got {}", self.dropout_rate),
            ));
        }
        Ok(())
    }
}

/// One batch of tokenized sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceBatch {
    sentences: Vec<Vec<usize>>,
}

impl SentenceBatch {
    pub fn new(sentences: Vec<Vec<usize>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Input("batch has no sentences".into()));
        }
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Input(format!("sentence {i} is empty")));
            }
        }
        Ok(SentenceBatch { sentences })
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
}

/// One stochastic (or deterministic) forward pass over a batch; rows are
/// unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub view: Matrix,
    pub dropout_seed: u64,
}

/// Forward-pass variant.
#[derive(Debug, Clone, Copy)]
pub enum EncodeMode {
    /// Dropout active at both injection points, projection head applied.
    Train { dropout_seed: u64 },
    /// Projection head applied but dropout off: the stable geometry used
    /// when a frozen teacher produces distillation logits.
    Deterministic,
    /// No dropout and no projection head; embeddings come straight from the
    /// normalized hidden layer, mirroring head-free evaluation.
    Eval,
}

/// Handles to the parameter leaves of one encoder forward pass, in field
/// order, plus the normalized output.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub embedding: NodeId,
    pub hidden_weight: NodeId,
    pub hidden_bias: NodeId,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
    pub output: NodeId,
}

impl EncoderNodes {
    /// Parameter node ids in the same order as [`EncoderParams::fields`].
    pub fn param_ids(&self) -> [NodeId; 5] {
        [
            self.embedding,
            self.hidden_weight,
            self.hidden_bias,
            self.head_weight,
            self.head_bias,
        ]
    }
}

/// Initializes all parameters uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)],
/// where fan_in is the input width of the consuming layer (the token width
/// for the embedding table).
pub fn init_params(
    vocab: usize,
    dims: EncoderDims,
    dropout: Real,
    seed: u64,
) -> Result<EncoderParams> {
    if vocab == 0 || dims.token == 0 || dims.hidden == 0 || dims.output == 0 {
        return Err(Error::parameter("dims", "vocab and all dims must be >= 1"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::parameter(
            "dropout",
            format!("must be in [0, 1), got {dropout}"),
        ));
    }
    let root = RngStream::from_seed(seed).split_label("init");
    let fill = |label: &str, rows: usize, cols: usize, fan_in: usize| {
        let mut stream = root.split_label(label);
        let bound = 1.0 / (fan_in as Real).sqrt();
        let values: Vec<Real> = (0..rows * cols)
            .map(|_| stream.uniform(-bound, bound))
            .collect();
        Matrix::new(rows, cols, values)
    };
    Ok(EncoderParams {
        embedding: fill("embedding", vocab, dims.token, dims.token)?,
        hidden_weight: fill("hidden-weight", dims.token, dims.hidden, dims.token)?,
        hidden_bias: fill("hidden-bias", 1, dims.hidden, dims.token)?,
        head_weight: fill("head-weight", dims.hidden, dims.output, dims.hidden)?,
        head_bias: fill("head-bias", 1, dims.output, dims.hidden)?,
        dropout_rate: dropout,
    })
}

fn pooling_matrix(batch: &SentenceBatch, vocab: usize) -> Result<Matrix> {
    let n = batch.len();
    let mut p = Matrix::zeros(n, vocab);
    for (i, sentence) in batch.sentences().iter().enumerate() {
        let weight = 1.0 / sentence.len() as Real;
        for (j, &tok) in sentence.iter().enumerate() {
            if tok >= vocab {
                return Err(Error::Input(format!(
                    "token id {tok} out of vocabulary (size {vocab}) at sentence {i}, position {j}"
                )));
            }
            p.set(i, tok, p.get(i, tok) + weight);
        }
    }
    Ok(p)
}

/// Inverted-dropout mask: entries are 0 (dropped) or 1/(1-rate).
fn dropout_mask(stream: &mut RngStream, rows: usize, cols: usize, rate: Real) -> Matrix {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if stream.bernoulli(keep) {
                m.set(r, c, scale);
            }
        }
    }
    m
}

/// Appends one encoder forward pass to `graph` and returns the parameter
/// leaves plus the normalized output node. Loss heads build on top of this.
pub fn build_forward(
    graph: &mut Graph,
    params: &EncoderParams,
    batch: &SentenceBatch,
    mode: EncodeMode,
) -> Result<EncoderNodes> {
    params.validate()?;
    let vocab = params.vocab_size();
    let dims = params.dims();
    let n = batch.len();

    let embedding = graph.input(params.embedding.clone());
    let hidden_weight = graph.input(params.hidden_weight.clone());
    let hidden_bias = graph.input(params.hidden_bias.clone());
    let head_weight = graph.input(params.head_weight.clone());
    let head_bias = graph.input(params.head_bias.clone());

    let pool = graph.constant(pooling_matrix(batch, vocab)?);
    let mut x = graph.matmul(pool, embedding)?;

    // Dropout masks only enter the tape when they can differ from identity,
    // so a rate-0 training pass is bit-identical to a deterministic one.
    let mut mask_stream = match mode {
        EncodeMode::Train { dropout_seed } if params.dropout_rate > 0.0 => {
            Some(RngStream::from_seed(dropout_seed).split_label("dropout"))
        }
        _ => None,
    };
    if let Some(stream) = mask_stream.as_mut() {
        let mut pool_stream = stream.split_label("pool");
        let mask = graph.constant(dropout_mask(
            &mut pool_stream,
            n,
            dims.token,
            params.dropout_rate,
        ));
        x = graph.mul(x, mask)?;
    }

    let pre = graph.matmul(x, hidden_weight)?;
    let pre = graph.add(pre, hidden_bias)?;
    let mut hidden = graph.tanh(pre)?;

    let output = if matches!(mode, EncodeMode::Eval) {
        graph.row_normalize(hidden)?
    } else {
        if let Some(stream) = mask_stream.as_mut() {
            let mut head_stream = stream.split_label("head");
            let mask = graph.constant(dropout_mask(
                &mut head_stream,
                n,
                dims.hidden,
                params.dropout_rate,
            ));
            hidden = graph.mul(hidden, mask)?;
        }
        let proj = graph.matmul(hidden, head_weight)?;
        let proj = graph.add(proj, head_bias)?;
        graph.row_normalize(proj)?
    };

    Ok(EncoderNodes {
        embedding,
        hidden_weight,
        hidden_bias,
        head_weight,
        head_bias,
        output,
    })
}

/// One forward pass outside any surrounding graph. Runs the same tape code
/// as training, so pure and differentiated routes agree bitwise.
pub fn encode_with_mode(
    params: &EncoderParams,
    batch: &SentenceBatch,
    mode: EncodeMode,
) -> Result<EmbeddingBatch> {
    let mut graph = Graph::new();
    let nodes = build_forward(&mut graph, params, batch, mode)?;
    let seed = match mode {
        EncodeMode::Train { dropout_seed } => dropout_seed,
        _ => 0,
    };
    Ok(EmbeddingBatch {
        view: graph.value(nodes.output).clone(),
        dropout_seed: seed,
    })
}

/// Boolean-flag forward pass: training flag on means dropout plus head,
/// off means the deterministic head-free evaluation path.
pub fn encode(
    params: &EncoderParams,
    batch: &SentenceBatch,
    dropout_seed: u64,
    train_mode: bool,
) -> Result<EmbeddingBatch> {
    let mode = if train_mode {
        EncodeMode::Train { dropout_seed }
    } else {
        EncodeMode::Eval
    };
    encode_with_mode(params, batch, mode)
}

/// Derives two independent dropout seeds from `seed` for the two views of a
/// positive pair.
pub fn pair_seeds(seed: u64) -> (u64, u64) {
    let mut stream = RngStream::from_seed(seed).split_label("pair");
    (stream.next_u64(), stream.next_u64())
}

/// Two training-mode passes over the same batch with independent dropout
/// streams; the first view supplies the anchors, the second the positives.
pub fn encode_pair(
    params: &EncoderParams,
    batch: &SentenceBatch,
    seed: u64,
) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    let (seed_a, seed_b) = pair_seeds(seed);
    let a = encode_with_mode(
        params,
        batch,
        EncodeMode::Train {
            dropout_seed: seed_a,
        },
    )?;
    let b = encode_with_mode(
        params,
        batch,
        EncodeMode::Train {
            dropout_seed: seed_b,
        },
    )?;
    Ok((a, b))
}
