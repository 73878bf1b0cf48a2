//! Finite-difference validation of every differentiated composition the
//! trainer uses: the two-view encoder forward (with and without dropout in
//! the tape), the contrastive loss, the distillation loss against a fixed
//! target distribution, and their weighted combination.

use distillab_core::encoder::{
    build_forward, init_params, EncodeMode, EncoderDims, EncoderParams, SentenceBatch,
};
use distillab_core::numeric::{finite_diff_check, Evaluation, Graph, Matrix, RngStream};
use distillab_core::objectives::{contrastive_loss_node, distill_loss_node, similarity_node};
use distillab_core::Real;

const FD_STEP: Real = 1e-5;
const FD_TOLERANCE: Real = 1e-4;

struct Instance {
    vocab: usize,
    dims: EncoderDims,
    dropout: Real,
    batch: SentenceBatch,
    seed_a: u64,
    seed_b: u64,
    tau: Real,
    lambda: Real,
    tau_s: Real,
    /// Row-stochastic N x (N-1) distillation target; fixed across the
    /// finite-difference perturbations.
    teacher_q: Option<Matrix>,
    eval_mode: bool,
}

fn random_instance(index: u64) -> Instance {
    let mut rng = RngStream::from_seed(0x6AD5).split(index);
    let vocab = 10;
    let n = 2 + rng.gen_range(3);
    let dims = EncoderDims::new(
        2 + rng.gen_range(3),
        3 + rng.gen_range(3),
        2 + rng.gen_range(2),
    );
    let batch = SentenceBatch::new(
        (0..n)
            .map(|_| {
                (0..2 + rng.gen_range(3))
                    .map(|_| rng.gen_range(vocab))
                    .collect()
            })
            .collect(),
    )
    .unwrap();
    // Temperatures stay >= 0.2 so the softmax stays well conditioned at the
    // finite-difference step size.
    let tau = [0.2, 0.5, 1.0][rng.gen_range(3)];
    let family = index % 3;
    let teacher_q = if family == 0 {
        None
    } else {
        let mut q = Matrix::zeros(n, n - 1);
        for i in 0..n {
            let raw: Vec<Real> = (0..n - 1).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let row = distillab_core::numeric::softmax_row(&raw, 1.0).unwrap();
            q.row_mut(i).copy_from_slice(&row);
        }
        Some(q)
    };
    Instance {
        vocab,
        dims,
        dropout: if family == 2 { 0.1 } else { 0.0 },
        batch,
        seed_a: rng.next_u64(),
        seed_b: rng.next_u64(),
        tau,
        lambda: [0.5, 1.0][rng.gen_range(2)],
        tau_s: [0.3, 0.6][rng.gen_range(2)],
        teacher_q,
        eval_mode: family == 0 && index.is_multiple_of(2),
    }
}

fn rebuild_params(fields: &[Matrix], dropout: Real) -> EncoderParams {
    EncoderParams {
        embedding: fields[0].clone(),
        hidden_weight: fields[1].clone(),
        hidden_bias: fields[2].clone(),
        head_weight: fields[3].clone(),
        head_bias: fields[4].clone(),
        dropout_rate: dropout,
    }
}

fn evaluate(instance: &Instance, fields: &[Matrix]) -> distillab_core::Result<Evaluation> {
    let params = rebuild_params(fields, instance.dropout);
    let mut g = Graph::new();
    let (mode_a, mode_b) = if instance.eval_mode {
        (EncodeMode::Eval, EncodeMode::Eval)
    } else {
        (
            EncodeMode::Train {
                dropout_seed: instance.seed_a,
            },
            EncodeMode::Train {
                dropout_seed: instance.seed_b,
            },
        )
    };
    let v1 = build_forward(&mut g, &params, &instance.batch, mode_a)?;
    let v2 = build_forward(&mut g, &params, &instance.batch, mode_b)?;
    let logits = similarity_node(&mut g, v1.output, v2.output)?;
    let cl = contrastive_loss_node(&mut g, logits, instance.tau)?;
    let loss = match &instance.teacher_q {
        Some(q) => {
            let kd = distill_loss_node(&mut g, logits, q, instance.tau_s)?;
            let scaled = g.scale(kd, instance.lambda)?;
            g.add(cl, scaled)?
        }
        None => cl,
    };
    let value = g.value(loss).get(0, 0);
    let grad_map = g.backward(loss)?;
    let ids1 = v1.param_ids();
    let ids2 = v2.param_ids();
    let mut gradients = Vec::with_capacity(5);
    for f in 0..5 {
        let zero = || Matrix::zeros(fields[f].rows(), fields[f].cols());
        let g1 = grad_map.get(&ids1[f]).cloned().unwrap_or_else(zero);
        let g2 = grad_map.get(&ids2[f]).cloned().unwrap_or_else(zero);
        gradients.push(g1.add(&g2)?);
    }
    Ok(Evaluation { value, gradients })
}

#[test]
fn hundred_random_compositions_pass_finite_difference() {
    let mut worst: Real = 0.0;
    let mut worst_index = 0;
    for index in 0..100u64 {
        let instance = random_instance(index);
        let init_seed = RngStream::from_seed(0xF00D).split(index).next_u64();
        let params =
            init_params(instance.vocab, instance.dims, instance.dropout, init_seed).expect("init");
        let fields: Vec<Matrix> = params.fields().iter().map(|(_, m)| (*m).clone()).collect();
        let err = finite_diff_check(|f| evaluate(&instance, f), &fields, FD_STEP)
            .unwrap_or_else(|e| panic!("instance {index}: {e}"));
        if err > worst {
            worst = err;
            worst_index = index;
        }
        assert!(
            err <= FD_TOLERANCE,
            "instance {index}: relative error {err} exceeds {FD_TOLERANCE}"
        );
    }
    println!("worst relative error {worst} at instance {worst_index}");
}
