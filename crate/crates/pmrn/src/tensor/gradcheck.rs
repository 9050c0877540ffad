//! Central-difference verification of every graph op.
//!
//! Each op kind carries default input shapes; the checker scalarizes the op
//! output through a fixed random projection, computes analytic gradients via
//! [`Graph::backward`], and compares them against central differences
//! element by element. Failures are reported, never thrown.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorId};
use crate::error::Result;

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvBlock,
    BiasAdd,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    GlobalAvgPool,
    GlobalMaxPool,
    ChannelMean,
    Concat,
    Reshape,
    Transpose,
    Select,
    CosineSim,
    Sum,
    Mean,
    MaskFilter,
    NllMean,
    InterleaveRows,
    RowCosine,
    /// One program that routes data through every op kind above.
    Composite,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OpKind::Conv2d { stride, pad } => write!(f, "conv2d(s{stride},p{pad})"),
            other => write!(f, "{}", format!("{other:?}").to_lowercase()),
        }
    }
}

/// Every kind with its default shapes; the composite comes last.
pub fn all_op_kinds() -> Vec<OpKind> {
    vec![
        OpKind::MatMul,
        OpKind::Conv2d { stride: 1, pad: 0 },
        OpKind::Conv2d { stride: 2, pad: 1 },
        OpKind::ConvBlock,
        OpKind::BiasAdd,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::GlobalAvgPool,
        OpKind::GlobalMaxPool,
        OpKind::ChannelMean,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Select,
        OpKind::CosineSim,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MaskFilter,
        OpKind::NllMean,
        OpKind::InterleaveRows,
        OpKind::RowCosine,
        OpKind::Composite,
    ]
}

impl OpKind {
    pub fn default_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            OpKind::MatMul => vec![vec![3, 4], vec![4, 2]],
            OpKind::Conv2d { .. } => vec![vec![1, 3, 5, 5], vec![2, 3, 3, 3]],
            OpKind::ConvBlock => vec![vec![2, 3, 6, 6], vec![4, 3, 3, 3], vec![4]],
            OpKind::BiasAdd => vec![vec![2, 3, 4, 4], vec![3]],
            OpKind::Add | OpKind::Sub | OpKind::Mul => vec![vec![3, 5], vec![3, 5]],
            OpKind::CosineSim => vec![vec![8], vec![8]],
            OpKind::Softmax | OpKind::LogSoftmax => vec![vec![7]],
            OpKind::GlobalAvgPool | OpKind::GlobalMaxPool | OpKind::ChannelMean => {
                vec![vec![2, 3, 4, 4]]
            }
            OpKind::Concat => vec![vec![2, 3], vec![2, 2]],
            OpKind::MaskFilter => vec![vec![3, 4, 4], vec![2, 4, 4]],
            OpKind::NllMean => vec![vec![3, 4]],
            OpKind::InterleaveRows => vec![vec![5], vec![5]],
            OpKind::RowCosine => vec![vec![3, 6], vec![3, 6]],
            OpKind::Composite => vec![
                vec![2, 3, 6, 6], // images
                vec![2, 3, 3, 3], // conv weights
                vec![2],          // bias
                vec![2, 2],       // projection
            ],
            _ => vec![vec![3, 4]],
        }
    }

    /// Builds the op over leaf ids and returns its output node.
    fn build(&self, g: &mut Graph, ids: &[TensorId]) -> Result<TensorId> {
        match self {
            OpKind::MatMul => g.matmul(ids[0], ids[1]),
            OpKind::Conv2d { stride, pad } => g.conv2d(ids[0], ids[1], *stride, *pad),
            OpKind::ConvBlock => g.conv_block(ids[0], ids[1], ids[2], 2, 1),
            OpKind::BiasAdd => g.bias_add(ids[0], ids[1]),
            OpKind::Add => g.add(ids[0], ids[1]),
            OpKind::Sub => g.sub(ids[0], ids[1]),
            OpKind::Mul => g.mul(ids[0], ids[1]),
            OpKind::Scale => g.scale(ids[0], 1.7),
            OpKind::Relu => g.relu(ids[0]),
            OpKind::Sigmoid => g.sigmoid(ids[0]),
            OpKind::Exp => g.exp(ids[0]),
            OpKind::Log => g.log(ids[0]),
            OpKind::Softmax => {
                let axis = g.value(ids[0]).shape().len() - 1;
                g.softmax(ids[0], axis)
            }
            OpKind::LogSoftmax => {
                let axis = g.value(ids[0]).shape().len() - 1;
                g.log_softmax(ids[0], axis)
            }
            OpKind::GlobalAvgPool => g.global_avg_pool(ids[0]),
            OpKind::GlobalMaxPool => g.global_max_pool(ids[0]),
            OpKind::ChannelMean => g.channel_mean(ids[0]),
            OpKind::Concat => {
                let axis = g.value(ids[0]).shape().len() - 1;
                g.concat(ids, axis)
            }
            OpKind::Reshape => {
                let n = g.value(ids[0]).numel();
                g.reshape(ids[0], &[n])
            }
            OpKind::Transpose => g.transpose(ids[0]),
            OpKind::Select => g.select(ids[0], 1),
            OpKind::CosineSim => g.cosine_sim(ids[0], ids[1]),
            OpKind::Sum => g.sum(ids[0]),
            OpKind::Mean => g.mean(ids[0]),
            OpKind::MaskFilter => g.mask_filter(ids[0], ids[1]),
            OpKind::InterleaveRows => g.interleave_rows(ids[0], ids[1]),
            OpKind::RowCosine => g.row_cosine(ids[0], ids[1]),
            OpKind::NllMean => {
                let rows = g.value(ids[0]).shape()[0];
                let cols = g.value(ids[0]).shape()[1];
                let labels: Vec<usize> = (0..rows).map(|i| (i * 2 + 1) % cols).collect();
                let lsm = g.log_softmax(ids[0], 1)?;
                g.nll_mean(lsm, &labels)
            }
            OpKind::Composite => build_composite(g, ids),
        }
    }

    /// Per-kind input conditioning keeps samples away from kinks
    /// (relu at 0, log at 0, pooling ties).
    fn condition(&self, which: usize, v: f64, index: usize) -> f64 {
        match self {
            OpKind::Log => 0.5 + (v + 1.0) * 0.5,
            OpKind::Relu => {
                if v.abs() < 0.05 {
                    v + 0.1 * if v < 0.0 { -1.0 } else { 1.0 }
                } else {
                    v
                }
            }
            OpKind::GlobalMaxPool => v + index as f64 * 1e-3,
            OpKind::Composite if which == 0 => v + 0.2,
            _ => v,
        }
    }
}

/// Touches every op kind once; gradient flows into all four leaves.
fn build_composite(g: &mut Graph, ids: &[TensorId]) -> Result<TensorId> {
    let conv = g.conv2d(ids[0], ids[1], 2, 1)?;
    let biased = g.bias_add(conv, ids[2])?;
    let act = g.relu(biased)?; // [2,2,3,3]
    let gap = g.global_avg_pool(act)?; // [2,2]
    let gmp = g.global_max_pool(act)?; // [2,2]
    let proj = g.matmul(gap, ids[3])?; // [2,2]
    let projt = g.transpose(proj)?;
    let mixed = g.add(proj, projt)?;
    let probs = g.softmax(mixed, 1)?;
    let logp = g.log_softmax(mixed, 1)?;
    let nll = g.nll_mean(logp, &[0, 1])?;

    let img = g.select(act, 0)?; // [2,3,3]
    let cm = g.channel_mean(img)?; // [3,3]
    let cm1 = g.reshape(cm, &[1, 3, 3])?;
    let mask = g.sigmoid(cm1)?;
    let prim = g.mask_filter(img, mask)?; // [1,2,3,3]
    let nodes = g.global_avg_pool(prim)?; // [1,2]
    let n0 = g.select(nodes, 0)?; // [2]
    let q0 = g.select(gap, 0)?; // [2]
    let cos = g.cosine_sim(n0, q0)?;

    let shifted = g.exp(cos)?;
    let squashed = g.sigmoid(shifted)?;
    let logv = g.log(squashed)?;

    let flat_p = g.reshape(probs, &[4])?;
    let flat_g = g.reshape(gmp, &[4])?;
    let joined = g.concat(&[flat_p, flat_g], 0)?;
    let diff = g.sub(flat_p, flat_g)?;
    let prod = g.mul(diff, flat_p)?;

    let s1 = g.sum(prod)?;
    let s2 = g.mean(joined)?;
    let s3 = g.scale(logv, 0.5)?;
    let t1 = g.add(s1, s2)?;
    let t2 = g.add(t1, s3)?;
    let t3 = g.add(t2, nll)?;
    g.add(t3, cos)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

fn make_inputs(kind: OpKind, shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .enumerate()
        .map(|(which, shape)| {
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|i| kind.condition(which, rng.random_range(-1.0..1.0), i))
                .collect();
            Tensor::new(shape.clone(), data).expect("input shape")
        })
        .collect()
}

fn projected_loss(kind: OpKind, inputs: &[Tensor], proj: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = kind.build(&mut g, &ids)?;
    let r = g.constant(Tensor::new(g.value(out).shape().to_vec(), proj.to_vec())?);
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients against central differences for one op kind.
pub fn grad_check(kind: OpKind, shapes: &[Vec<usize>], seed: u64, tol: f64) -> GradCheckReport {
    let inputs = make_inputs(kind, shapes, seed);

    // Forward once to size the projection vector.
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        match kind.build(&mut g, &ids) {
            Ok(out) => g.value(out).shape().to_vec(),
            Err(e) => {
                return GradCheckReport {
                    op: format!("{kind} ({e})"),
                    max_rel_err: f64::INFINITY,
                    pass: false,
                }
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let proj: Vec<f64> = (0..out_shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    // Analytic gradients.
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = kind.build(&mut g, &ids).expect("forward succeeded above");
        let r = g.constant(Tensor::new(out_shape.clone(), proj.clone()).expect("proj"));
        let weighted = g.mul(out, r).expect("projection");
        let loss = g.sum(weighted).expect("loss");
        match g.backward(loss) {
            Ok(grads) => ids
                .iter()
                .zip(&inputs)
                .map(|(&id, t)| grads.or_zeros(id, t.shape()))
                .collect(),
            Err(e) => {
                return GradCheckReport {
                    op: format!("{kind} ({e})"),
                    max_rel_err: f64::INFINITY,
                    pass: false,
                }
            }
        }
    };

    // Central differences, element by element.
    let mut max_rel_err: f64 = 0.0;
    let mut perturbed = inputs.clone();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + FD_STEP;
            let up = projected_loss(kind, &perturbed, &proj);
            perturbed[i].data_mut()[j] = orig - FD_STEP;
            let down = projected_loss(kind, &perturbed, &proj);
            perturbed[i].data_mut()[j] = orig;
            let (up, down) = match (up, down) {
                (Ok(u), Ok(d)) => (u, d),
                _ => {
                    return GradCheckReport {
                        op: format!("{kind} (perturbed forward failed)"),
                        max_rel_err: f64::INFINITY,
                        pass: false,
                    }
                }
            };
            let fd = (up - down) / (2.0 * FD_STEP);
            max_rel_err = max_rel_err.max(relative_error(analytic[i].data()[j], fd));
        }
    }

    GradCheckReport {
        op: kind.to_string(),
        max_rel_err,
        pass: max_rel_err < tol,
    }
}

/// [`grad_check`] with the kind's default shapes.
pub fn grad_check_default(kind: OpKind, seed: u64, tol: f64) -> GradCheckReport {
    grad_check(kind, &kind.default_shapes(), seed, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_matches_finite_differences() {
        let r = grad_check(OpKind::Softmax, &[vec![7]], 0, 1e-4);
        assert!(r.pass, "{}: {}", r.op, r.max_rel_err);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let r = grad_check(
            OpKind::Conv2d { stride: 1, pad: 0 },
            &[vec![1, 3, 5, 5], vec![2, 3, 3, 3]],
            1,
            1e-4,
        );
        assert!(r.pass, "{}: {}", r.op, r.max_rel_err);
    }

    #[test]
    fn cosine_matches_finite_differences() {
        let r = grad_check(OpKind::CosineSim, &[vec![8], vec![8]], 2, 1e-4);
        assert!(r.pass, "{}: {}", r.op, r.max_rel_err);
    }

    #[test]
    fn composite_matches_finite_differences() {
        for seed in 0..3 {
            let r = grad_check_default(OpKind::Composite, seed, 1e-4);
            assert!(r.pass, "seed {seed}: {}: {}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn every_kind_passes_across_seeds() {
        for kind in all_op_kinds() {
            for seed in 0..3 {
                let r = grad_check_default(kind, seed, 1e-4);
                assert!(r.pass, "{} seed {seed}: {}", r.op, r.max_rel_err);
            }
        }
    }
}
