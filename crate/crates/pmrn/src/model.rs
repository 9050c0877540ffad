//! Whole-model assembly: one episode's forward pass through every enabled
//! module, producing the combined loss and the query logits.

use rand_chacha::ChaCha8Rng;

use crate::acg::{self, AcgConfig, AcgNodes, HeadNodes};
use crate::backbone::{self, BackboneConfig, BackboneNodes};
use crate::crn::{self, CrnConfig, CrnNodes};
use crate::data::{augment, DatasetSplit, Episode};
use crate::error::{Error, Result};
use crate::jigsaw::{self, JigsawBatch, JigsawHeadNodes};
use crate::metric::{self, TswNodes};
use crate::params::{rng_for, ParamSet};
use crate::tensor::{Graph, Tensor, TensorId};

/// Module switches. The graph-reasoning and weighting stages consume
/// primitives, so they require the grouping stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub ssj: bool,
    pub acg: bool,
    pub crn: bool,
    pub tsw: bool,
}

impl Toggles {
    pub fn full() -> Self {
        Toggles { ssj: true, acg: true, crn: true, tsw: true }
    }

    /// Plain pooled-cosine classifier.
    pub fn baseline() -> Self {
        Toggles { ssj: false, acg: false, crn: false, tsw: false }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.crn || self.tsw) && !self.acg {
            return Err(Error::InvalidConfig(
                "graph reasoning and task weighting need channel grouping enabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub acg: AcgConfig,
    pub crn: CrnConfig,
    pub n_perm: usize,
    pub toggles: Toggles,
}

impl ModelConfig {
    pub fn for_side(side: usize, k_primitives: usize, toggles: Toggles) -> Self {
        let backbone = BackboneConfig::for_side(side);
        let channels = backbone.out_channels();
        ModelConfig {
            backbone,
            acg: AcgConfig { k: k_primitives, reduction: 4 },
            crn: CrnConfig::for_channels(channels),
            n_perm: jigsaw::DEFAULT_PERMS,
            toggles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.toggles.validate()
    }
}

/// Fresh parameters for every enabled module, drawn from one seeded stream
/// in a fixed module order.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0);
    let mut params = ParamSet::new();
    backbone::init_backbone_into(&mut params, &cfg.backbone, &mut rng);
    let channels = cfg.backbone.out_channels();
    if cfg.toggles.acg {
        acg::init_acg_into(&mut params, channels, cfg.acg, &mut rng)?;
    }
    if cfg.toggles.crn {
        crn::init_crn_into(&mut params, channels, cfg.crn, &mut rng)?;
    }
    if cfg.toggles.tsw {
        metric::init_tsw_into(&mut params, cfg.acg.k, &mut rng);
    }
    if cfg.toggles.ssj {
        jigsaw::init_jigsaw_into(&mut params, channels, cfg.n_perm, &mut rng);
    }
    Ok(params)
}

/// Graph handles for all bound parameters plus the name map used to pull
/// named gradients back out after a backward pass.
pub struct ModelBinding {
    pub names: Vec<(String, TensorId)>,
    pub backbone: BackboneNodes,
    pub acg: Option<AcgNodes>,
    pub crn: Option<CrnNodes>,
    pub tsw: Option<TswNodes>,
    pub jigsaw: Option<JigsawHeadNodes>,
}

struct Binder<'a, 'g> {
    g: &'g mut Graph,
    params: &'a ParamSet,
    trainable: bool,
    names: Vec<(String, TensorId)>,
}

impl Binder<'_, '_> {
    fn leaf(&mut self, name: String) -> Result<TensorId> {
        let t = self
            .params
            .get(&name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))?;
        let id = self.g.leaf(t.clone(), self.trainable);
        self.names.push((name, id));
        Ok(id)
    }
}

pub fn bind_model(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &ModelConfig,
    trainable: bool,
) -> Result<ModelBinding> {
    let mut b = Binder { g, params, trainable, names: Vec::new() };

    let mut stages = Vec::new();
    for i in 0..cfg.backbone.stages.len() {
        let w = b.leaf(BackboneConfig::weight_name(i))?;
        let bias = b.leaf(BackboneConfig::bias_name(i))?;
        stages.push((w, bias));
    }
    let backbone = BackboneNodes {
        stages,
        strides: cfg.backbone.stages.iter().map(|s| s.stride).collect(),
    };

    let acg_nodes = if cfg.toggles.acg {
        let mut heads = Vec::with_capacity(cfg.acg.k);
        for i in 0..cfg.acg.k {
            heads.push(HeadNodes {
                w1: b.leaf(acg::param_name(i, "fc1.weight"))?,
                b1: b.leaf(acg::param_name(i, "fc1.bias"))?,
                w2: b.leaf(acg::param_name(i, "fc2.weight"))?,
                b2: b.leaf(acg::param_name(i, "fc2.bias"))?,
            });
        }
        Some(AcgNodes { heads })
    } else {
        None
    };

    let crn_nodes = if cfg.toggles.crn {
        let theta = b.leaf(crn::theta_name().to_string())?;
        let phi = b.leaf(crn::phi_name().to_string())?;
        let mut omegas = Vec::with_capacity(cfg.crn.layers);
        for l in 0..cfg.crn.layers {
            omegas.push(b.leaf(crn::omega_name(l))?);
        }
        Some(CrnNodes { theta, phi, omegas })
    } else {
        None
    };

    let tsw_nodes = if cfg.toggles.tsw {
        Some(TswNodes {
            w1: b.leaf(metric::param_name("fc1.weight"))?,
            b1: b.leaf(metric::param_name("fc1.bias"))?,
            w2: b.leaf(metric::param_name("fc2.weight"))?,
            b2: b.leaf(metric::param_name("fc2.bias"))?,
        })
    } else {
        None
    };

    let jigsaw_nodes = if cfg.toggles.ssj {
        Some(JigsawHeadNodes {
            weight: b.leaf(jigsaw::head_weight_name().to_string())?,
            bias: b.leaf(jigsaw::head_bias_name().to_string())?,
        })
    } else {
        None
    };

    Ok(ModelBinding {
        names: b.names,
        backbone,
        acg: acg_nodes,
        crn: crn_nodes,
        tsw: tsw_nodes,
        jigsaw: jigsaw_nodes,
    })
}

/// Episode images prepared as tensors: one batch for feature extraction,
/// the raw per-image tensors for the jigsaw task.
pub struct EpisodeTensors {
    /// `[NK+NM, 3, S, S]`, support rows first, label-major within each set.
    pub batch: Tensor,
    /// Unaugmented per-image tensors, same order as `batch` rows.
    pub raw: Vec<Tensor>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
}

/// Resolves sampled indices into pixel tensors; optional training
/// augmentation applies to the batch but never to `raw`.
pub fn episode_tensors(
    split: &DatasetSplit,
    episode: &Episode,
    mut augment_rng: Option<&mut ChaCha8Rng>,
) -> EpisodeTensors {
    let side = split.classes[episode.classes[0]].1[0].side;
    let total = episode.support.len() + episode.query.len();
    let mut batch = Vec::with_capacity(total * 3 * side * side);
    let mut raw = Vec::with_capacity(total);
    let mut support_labels = Vec::with_capacity(episode.support.len());
    let mut query_labels = Vec::with_capacity(episode.query.len());
    for (samples, labels) in [
        (&episode.support, &mut support_labels),
        (&episode.query, &mut query_labels),
    ] {
        for &(label, img_idx) in samples.iter() {
            let class_pos = episode.classes[label];
            let tensor = split.classes[class_pos].1[img_idx].to_tensor();
            let fed = match augment_rng.as_deref_mut() {
                Some(rng) => augment(&tensor, rng),
                None => tensor.clone(),
            };
            batch.extend_from_slice(fed.data());
            raw.push(tensor);
            labels.push(label);
        }
    }
    let n_way = episode.class_ids.len();
    let k_shot = episode.support.len() / n_way;
    EpisodeTensors {
        batch: Tensor::new(vec![total, 3, side, side], batch).expect("episode batch"),
        raw,
        support_labels,
        query_labels,
        n_way,
        k_shot,
    }
}

/// Whether auxiliary losses are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct EpisodeOutputs {
    pub total: TensorId,
    pub l_cls: TensorId,
    pub l_div: Option<TensorId>,
    pub l_ssl: Option<TensorId>,
    /// `[N·M, N]` similarity logits.
    pub logits: TensorId,
    /// Logits of the jigsaw head when the pretext task ran.
    pub jigsaw_logits: Option<TensorId>,
}

/// Per-image primitive quantities flowing into the metric.
struct ImageRepr {
    /// `[k,C]` node rows after optional graph refinement.
    refined: TensorId,
    /// `[k,C,H,W]` primitive tensors (grouping path only).
    primitives: Option<TensorId>,
    /// Pooled pair-map statistics `[k]` (weighting path only). Averaging
    /// and maxing each primitive map up front is bit-identical to pooling
    /// the stacked per-pair tensor, and does the spatial work once per
    /// image instead of once per (query, class) pair.
    map_avg: Option<TensorId>,
    map_max: Option<TensorId>,
}

/// Builds the full episode graph: features, primitives, refinement,
/// prototypes, weighted similarities, and the combined loss.
pub fn forward_episode(
    g: &mut Graph,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    ep: &EpisodeTensors,
    jigsaw_batch: Option<&JigsawBatch>,
    lambda: f64,
    alpha: f64,
    mode: Mode,
) -> Result<EpisodeOutputs> {
    let n = ep.n_way;
    let k = ep.k_shot;
    let n_support = n * k;
    let n_query = ep.query_labels.len();
    let total = n_support + n_query;

    let images = g.constant(ep.batch.clone());
    let feats = backbone::extract_features(g, &binding.backbone, &cfg.backbone, images)?;
    let pooled_all = g.global_avg_pool(feats)?; // [B,C]
    let channels = g.value(pooled_all).shape()[1];

    let want_maps = cfg.toggles.tsw;
    let compute_div = cfg.toggles.acg && mode == Mode::Train;

    let mut reprs = Vec::with_capacity(total);
    let mut div_sum: Option<TensorId> = None;
    for i in 0..total {
        let repr = if let Some(acg_nodes) = &binding.acg {
            let f_i = g.select(feats, i)?;
            let pooled = g.select(pooled_all, i)?;
            let pooled = g.reshape(pooled, &[1, channels])?;
            let weights = acg::channel_weights(g, acg_nodes, pooled)?;
            let masks = acg::primitive_masks(g, f_i, weights)?;
            let prims = acg::filter_primitives(g, f_i, masks)?;
            let nodes = crn::node_embeddings(g, prims)?;
            if compute_div {
                let d = acg::diversity_loss(g, nodes)?;
                div_sum = Some(match div_sum {
                    Some(acc) => g.add(acc, d)?,
                    None => d,
                });
            }
            let refined = match &binding.crn {
                Some(crn_nodes) => crn::reason(g, nodes, crn_nodes)?,
                None => nodes,
            };
            let (map_avg, map_max) = if want_maps {
                let maps = g.channel_mean(prims)?;
                (Some(g.global_avg_pool(maps)?), Some(g.global_max_pool(maps)?))
            } else {
                (None, None)
            };
            ImageRepr {
                refined,
                primitives: Some(prims),
                map_avg,
                map_max,
            }
        } else {
            // Pooled-feature path: a single whole-image "primitive".
            let pooled = g.select(pooled_all, i)?;
            let refined = g.reshape(pooled, &[1, channels])?;
            ImageRepr {
                refined,
                primitives: None,
                map_avg: None,
                map_max: None,
            }
        };
        reprs.push(repr);
    }

    let l_div = match div_sum {
        Some(acc) => Some(g.scale(acc, 1.0 / total as f64)?),
        None => None,
    };

    // Class prototypes from the refined support rows (and, for the
    // weighting path, from the raw primitive tensors).
    let mut proto_nodes = Vec::with_capacity(n);
    let mut proto_map_stats: Vec<Option<(TensorId, TensorId)>> = Vec::with_capacity(n);
    for c in 0..n {
        let members: Vec<usize> = (0..n_support).filter(|i| ep.support_labels[*i] == c).collect();
        if members.is_empty() {
            return Err(Error::Dataset(format!("episode class {c} has no support samples")));
        }
        let refined: Vec<TensorId> = members.iter().map(|&i| reprs[i].refined).collect();
        proto_nodes.push(metric::average_tensors(g, &refined)?);
        if want_maps {
            let prims: Vec<TensorId> = members
                .iter()
                .map(|&i| reprs[i].primitives.expect("grouping path"))
                .collect();
            let proto_prim = metric::average_tensors(g, &prims)?;
            let maps = g.channel_mean(proto_prim)?;
            proto_map_stats.push(Some((g.global_avg_pool(maps)?, g.global_max_pool(maps)?)));
        } else {
            proto_map_stats.push(None);
        }
    }

    // All (query, class) pair weights in one batched generator pass.
    let pair_weights: Option<TensorId> = match &binding.tsw {
        Some(tsw) => {
            let mut avg_rows = Vec::with_capacity(n_query * n);
            let mut max_rows = Vec::with_capacity(n_query * n);
            for q in 0..n_query {
                let repr = &reprs[n_support + q];
                let (q_avg, q_max) = (
                    repr.map_avg.expect("weighting path"),
                    repr.map_max.expect("weighting path"),
                );
                for stats in proto_map_stats.iter().take(n) {
                    let (s_avg, s_max) = stats.expect("weighting path");
                    avg_rows.push(g.interleave_rows(q_avg, s_avg)?);
                    max_rows.push(g.interleave_rows(q_max, s_max)?);
                }
            }
            let avg_stats = g.concat(&avg_rows, 0)?;
            let max_stats = g.concat(&max_rows, 0)?;
            Some(metric::task_weights_batch(g, avg_stats, max_stats, tsw)?)
        }
        None => None,
    };

    // Similarity matrix, one weighted cell per (query, class).
    let mut rows = Vec::with_capacity(n_query);
    for q in 0..n_query {
        let repr = &reprs[n_support + q];
        let mut cells = Vec::with_capacity(n);
        for (c, &proto) in proto_nodes.iter().enumerate() {
            let weights = match pair_weights {
                Some(all) => Some(g.select(all, q * n + c)?),
                None => None,
            };
            cells.push(metric::similarity(g, repr.refined, proto, weights)?);
        }
        let row = g.concat(&cells, 0)?;
        rows.push(g.reshape(row, &[1, n])?);
    }
    let logits = g.concat(&rows, 0)?;
    let l_cls = metric::episode_loss(g, logits, &ep.query_labels)?;

    let (l_ssl, jigsaw_logits) = match (&binding.jigsaw, jigsaw_batch) {
        (Some(head), Some(batch)) if mode == Mode::Train => {
            let (loss, jlogits) = jigsaw::ssl_loss(g, &binding.backbone, head, batch)?;
            (Some(loss), Some(jlogits))
        }
        _ => (None, None),
    };

    let total_loss = metric::total_loss(g, l_cls, l_div, l_ssl, lambda, alpha)?;
    Ok(EpisodeOutputs {
        total: total_loss,
        l_cls,
        l_div,
        l_ssl,
        logits,
        jigsaw_logits,
    })
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let n = logits.shape()[1];
    let mut correct = 0usize;
    for (row, &label) in logits.data().chunks(n).zip(labels) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Masks for one image under the current parameters: `[k,H,W]` probabilities.
pub fn masks_for_image(
    params: &ParamSet,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<Tensor> {
    if !cfg.toggles.acg {
        return Err(Error::InvalidConfig("mask dump needs channel grouping enabled".into()));
    }
    let mut g = Graph::new();
    let binding = bind_model(&mut g, params, cfg, false)?;
    let batch = {
        let mut data = Vec::with_capacity(image.numel());
        data.extend_from_slice(image.data());
        let s = image.shape()[1];
        Tensor::new(vec![1, 3, s, s], data)?
    };
    let images = g.constant(batch);
    let feats = backbone::extract_features(&mut g, &binding.backbone, &cfg.backbone, images)?;
    let f = g.select(feats, 0)?;
    let pooled_all = g.global_avg_pool(feats)?;
    let pooled = g.select(pooled_all, 0)?;
    let channels = g.value(pooled).shape()[0];
    let pooled = g.reshape(pooled, &[1, channels])?;
    let acg_nodes = binding.acg.as_ref().expect("grouping enabled");
    let weights = acg::channel_weights(&mut g, acg_nodes, pooled)?;
    let masks = acg::primitive_masks(&mut g, f, weights)?;
    Ok(g.value(masks).clone())
}
