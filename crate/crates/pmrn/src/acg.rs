//! Adaptive channel grouping: turn a feature map into k primitive masks
//! and k filtered primitive tensors.
//!
//! Each grouping head is a two-layer bottleneck over the pooled feature
//! vector producing one weight per channel; the weighted channel sum is
//! squashed into a spatial mask, and the feature map is filtered by each
//! mask to form the primitives. A diversity penalty keeps the heads from
//! collapsing onto one region.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{he_uniform, lecun_uniform, ParamSet};
use crate::tensor::{Graph, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AcgConfig {
    /// Number of grouping heads (primitives per image).
    pub k: usize,
    /// Bottleneck reduction of the head MLP.
    pub reduction: usize,
}

impl Default for AcgConfig {
    fn default() -> Self {
        AcgConfig { k: 4, reduction: 4 }
    }
}

pub struct HeadNodes {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub struct AcgNodes {
    pub heads: Vec<HeadNodes>,
}

pub fn param_name(head: usize, part: &str) -> String {
    format!("acg.head{head}.{part}")
}

pub fn init_acg_into(
    params: &mut ParamSet,
    channels: usize,
    cfg: AcgConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if cfg.k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 grouping heads, got {}", cfg.k)));
    }
    if cfg.reduction == 0 || channels % cfg.reduction != 0 {
        return Err(Error::InvalidConfig(format!(
            "channels {channels} not divisible by reduction {}",
            cfg.reduction
        )));
    }
    let hidden = channels / cfg.reduction;
    for i in 0..cfg.k {
        params.insert(param_name(i, "fc1.weight"), he_uniform(rng, &[channels, hidden], channels));
        params.insert(param_name(i, "fc1.bias"), Tensor::zeros(&[hidden]));
        params.insert(param_name(i, "fc2.weight"), lecun_uniform(rng, &[hidden, channels], hidden));
        params.insert(param_name(i, "fc2.bias"), Tensor::zeros(&[channels]));
    }
    Ok(())
}

pub fn bind_acg(g: &mut Graph, params: &ParamSet, k: usize, trainable: bool) -> Result<AcgNodes> {
    let mut heads = Vec::with_capacity(k);
    for i in 0..k {
        let fetch = |part: &str| -> Result<&Tensor> {
            params
                .get(&param_name(i, part))
                .ok_or_else(|| Error::InvalidConfig(format!("missing {}", param_name(i, part))))
        };
        heads.push(HeadNodes {
            w1: g.leaf(fetch("fc1.weight")?.clone(), trainable),
            b1: g.leaf(fetch("fc1.bias")?.clone(), trainable),
            w2: g.leaf(fetch("fc2.weight")?.clone(), trainable),
            b2: g.leaf(fetch("fc2.bias")?.clone(), trainable),
        });
    }
    Ok(AcgNodes { heads })
}

/// Per-head channel weights from a pooled feature vector `[1,C]` → `[k,C]`.
/// Raw two-layer output, no squashing: the mask sigmoid normalizes later.
pub fn channel_weights(g: &mut Graph, acg: &AcgNodes, pooled: TensorId) -> Result<TensorId> {
    let shape = g.value(pooled).shape().to_vec();
    let expected = g.value(acg.heads[0].w1).shape()[0];
    if shape.len() != 2 || shape[0] != 1 || shape[1] != expected {
        return Err(Error::ShapeMismatch {
            op: "channel_weights",
            lhs: shape,
            rhs: vec![1, expected],
        });
    }
    let mut rows = Vec::with_capacity(acg.heads.len());
    for head in &acg.heads {
        let h = g.matmul(pooled, head.w1)?;
        let h = g.bias_add(h, head.b1)?;
        let h = g.relu(h)?;
        let d = g.matmul(h, head.w2)?;
        let d = g.bias_add(d, head.b2)?;
        rows.push(d);
    }
    g.concat(&rows, 0)
}

/// Masks from channel weights: `m[i] = sigmoid(Σ_c d[i,c] · channel_c)`.
/// f is `[C,H,W]`, d is `[k,C]`; result `[k,H,W]`, all values in (0,1).
pub fn primitive_masks(g: &mut Graph, f: TensorId, d: TensorId) -> Result<TensorId> {
    let fs = g.value(f).shape().to_vec();
    let ds = g.value(d).shape().to_vec();
    if fs.len() != 3 || ds.len() != 2 || ds[1] != fs[0] {
        return Err(Error::ShapeMismatch {
            op: "primitive_masks",
            lhs: fs,
            rhs: ds,
        });
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let flat = g.reshape(f, &[c, h * w])?;
    let weighted = g.matmul(d, flat)?;
    let squashed = g.sigmoid(weighted)?;
    g.reshape(squashed, &[ds[0], h, w])
}

/// Filters the feature map by every mask: `p[i] = f ⊗ m[i]`, shape `[k,C,H,W]`.
pub fn filter_primitives(g: &mut Graph, f: TensorId, masks: TensorId) -> Result<TensorId> {
    g.mask_filter(f, masks)
}

/// Sum of pairwise cosine similarities among pooled primitives (both
/// orders), for one image. `pooled` is `[k,C]`.
pub fn diversity_loss(g: &mut Graph, pooled: TensorId) -> Result<TensorId> {
    let shape = g.value(pooled).shape().to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::InvalidShape {
            op: "diversity_loss",
            shape,
            msg: "expected [k,C] with k >= 2".into(),
        });
    }
    let k = shape[0];
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let row = g.select(pooled, i)?;
        let norm = g.value(row).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm {
                what: format!("pooled primitive {i}"),
            });
        }
        rows.push(row);
    }
    let mut acc: Option<TensorId> = None;
    for i in 0..k {
        for j in i + 1..k {
            let c = g.cosine_sim(rows[i], rows[j])?;
            acc = Some(match acc {
                Some(a) => g.add(a, c)?,
                None => c,
            });
        }
    }
    // Unordered pairs counted once above; both orders contribute.
    g.scale(acc.expect("k >= 2"), 2.0)
}
