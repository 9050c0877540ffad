//! Primitive-level classification: prototypes, pair maps, task weights,
//! weighted cosine similarity, and the episode's cross-entropy loss.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{lecun_uniform, ParamSet};
use crate::tensor::{Graph, Tensor, TensorId};

pub struct TswNodes {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn param_name(part: &str) -> String {
    format!("tsw.{part}")
}

/// Two chained projection layers mapping the 2k pair-map channels down to
/// one weight per primitive pair; the squashing happens once, outside.
pub fn init_tsw_into(params: &mut ParamSet, k: usize, rng: &mut ChaCha8Rng) {
    let a = 2 * k;
    params.insert(param_name("fc1.weight"), lecun_uniform(rng, &[a, k], a));
    params.insert(param_name("fc1.bias"), Tensor::zeros(&[k]));
    params.insert(param_name("fc2.weight"), lecun_uniform(rng, &[k, k], k));
    params.insert(param_name("fc2.bias"), Tensor::zeros(&[k]));
}

pub fn bind_tsw(g: &mut Graph, params: &ParamSet, trainable: bool) -> Result<TswNodes> {
    let mut fetch = |part: &str| -> Result<Tensor> {
        params
            .get(&param_name(part))
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("missing {}", param_name(part))))
    };
    let (w1, b1, w2, b2) = (
        fetch("fc1.weight")?,
        fetch("fc1.bias")?,
        fetch("fc2.weight")?,
        fetch("fc2.bias")?,
    );
    Ok(TswNodes {
        w1: g.leaf(w1, trainable),
        b1: g.leaf(b1, trainable),
        w2: g.leaf(w2, trainable),
        b2: g.leaf(b2, trainable),
    })
}

/// Elementwise mean of same-shaped tensors (class prototypes).
pub fn average_tensors(g: &mut Graph, items: &[TensorId]) -> Result<TensorId> {
    let Some((&first, rest)) = items.split_first() else {
        return Err(Error::InvalidConfig("cannot average an empty class".into()));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / items.len() as f64)
}

/// Interleaves query and prototype maps `[k,H,W]` into `[2k,H,W]` in
/// (q₁,s₁,q₂,s₂,…) order.
pub fn pair_maps(g: &mut Graph, query_maps: TensorId, proto_maps: TensorId) -> Result<TensorId> {
    let qs = g.value(query_maps).shape().to_vec();
    let ps = g.value(proto_maps).shape().to_vec();
    if qs != ps || qs.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "pair_maps",
            lhs: qs,
            rhs: ps,
        });
    }
    let (k, h, w) = (qs[0], qs[1], qs[2]);
    let mut parts = Vec::with_capacity(2 * k);
    for i in 0..k {
        for &src in &[query_maps, proto_maps] {
            let m = g.select(src, i)?;
            parts.push(g.reshape(m, &[1, h, w])?);
        }
    }
    g.concat(&parts, 0)
}

/// Weights for a batch of pooled pair statistics: rows of `avg_stats` and
/// `max_stats` are `[2k]` interleaved (q,s) channel summaries, one row per
/// (query, class) pair. Returns `[P,k]` weights in (0,1) via
/// `sigmoid(γ(avg) + γ(max))` with shared γ.
pub fn task_weights_batch(
    g: &mut Graph,
    avg_stats: TensorId,
    max_stats: TensorId,
    tsw: &TswNodes,
) -> Result<TensorId> {
    let a = g.value(tsw.w1).shape()[0];
    for id in [avg_stats, max_stats] {
        let shape = g.value(id).shape().to_vec();
        if shape.len() != 2 || shape[1] != a {
            return Err(Error::ShapeMismatch {
                op: "task_weights",
                lhs: shape,
                rhs: vec![0, a],
            });
        }
    }
    let gamma = |g: &mut Graph, x: TensorId| -> Result<TensorId> {
        let h = g.matmul(x, tsw.w1)?;
        let h = g.bias_add(h, tsw.b1)?;
        let out = g.matmul(h, tsw.w2)?;
        g.bias_add(out, tsw.b2)
    };
    let ga = gamma(g, avg_stats)?;
    let gm = gamma(g, max_stats)?;
    let summed = g.add(ga, gm)?;
    g.sigmoid(summed)
}

/// One weight in (0,1) per primitive pair from a stacked pair-map tensor
/// `[2k,H,W]`.
pub fn task_weights(g: &mut Graph, fa: TensorId, tsw: &TswNodes) -> Result<TensorId> {
    let shape = g.value(fa).shape().to_vec();
    let a = g.value(tsw.w1).shape()[0];
    if shape.len() != 3 || shape[0] != a {
        return Err(Error::ShapeMismatch {
            op: "task_weights",
            lhs: shape,
            rhs: vec![a, 0, 0],
        });
    }
    let avg = g.global_avg_pool(fa)?;
    let avg = g.reshape(avg, &[1, a])?;
    let max = g.global_max_pool(fa)?;
    let max = g.reshape(max, &[1, a])?;
    task_weights_batch(g, avg, max, tsw)
}

/// Weighted sum of per-primitive cosine similarities between query and
/// prototype node rows `[k,C]`. `weights` of `None` is exactly the
/// unweighted sum.
pub fn similarity(
    g: &mut Graph,
    query_nodes: TensorId,
    proto_nodes: TensorId,
    weights: Option<TensorId>,
) -> Result<TensorId> {
    let qs = g.value(query_nodes).shape().to_vec();
    let ps = g.value(proto_nodes).shape().to_vec();
    if qs != ps || qs.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            lhs: qs,
            rhs: ps,
        });
    }
    let (k, c) = (qs[0], qs[1]);
    for (side, id) in [("query", query_nodes), ("prototype", proto_nodes)] {
        let data = g.value(id).data();
        for i in 0..k {
            let norm = data[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::ZeroNorm {
                    what: format!("{side} primitive {i}"),
                });
            }
        }
    }
    let stacked = g.row_cosine(query_nodes, proto_nodes)?;
    match weights {
        Some(w) => {
            let flat = g.reshape(w, &[k])?;
            let weighted = g.mul(stacked, flat)?;
            g.sum(weighted)
        }
        None => g.sum(stacked),
    }
}

/// Cross-entropy over class similarities: softmax rows of `[Nq,N]` logits.
pub fn episode_loss(g: &mut Graph, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let logp = g.log_softmax(logits, 1)?;
    g.nll_mean(logp, labels)
}

/// Combined objective: classification + λ·diversity + α·pretext.
pub fn total_loss(
    g: &mut Graph,
    l_cls: TensorId,
    l_div: Option<TensorId>,
    l_ssl: Option<TensorId>,
    lambda: f64,
    alpha: f64,
) -> Result<TensorId> {
    let mut total = l_cls;
    if let Some(div) = l_div {
        let scaled = g.scale(div, lambda)?;
        total = g.add(total, scaled)?;
    }
    if let Some(ssl) = l_ssl {
        let scaled = g.scale(ssl, alpha)?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}
