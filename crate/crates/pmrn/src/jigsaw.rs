//! Jigsaw pretext task: shuffle image patches, predict which shuffle.
//!
//! The permutation vocabulary is a greedy max-min-Hamming subset of all 9!
//! orderings, so any two classes differ in many patch positions. Training
//! on it pushes the backbone toward channels that respond to object parts
//! rather than global layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{conv_stack, BackboneNodes};
use crate::error::{Error, Result};
use crate::params::{lecun_uniform, ParamSet};
use crate::tensor::{Graph, Tensor, TensorId};

pub const GRID: usize = 3;
pub const PATCHES: usize = GRID * GRID;
pub const DEFAULT_PERMS: usize = 35;

/// Number of positions where two patch orderings disagree.
pub fn hamming(a: &[u8; PATCHES], b: &[u8; PATCHES]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationTable {
    perms: Vec<[u8; PATCHES]>,
}

impl PermutationTable {
    pub fn n_perm(&self) -> usize {
        self.perms.len()
    }

    pub fn get(&self, index: usize) -> &[u8; PATCHES] {
        &self.perms[index]
    }

    pub fn perms(&self) -> &[[u8; PATCHES]] {
        &self.perms
    }

    /// Exhaustive pairwise minimum Hamming distance.
    pub fn min_pairwise_hamming(&self) -> usize {
        let mut best = PATCHES;
        for i in 0..self.perms.len() {
            for j in i + 1..self.perms.len() {
                best = best.min(hamming(&self.perms[i], &self.perms[j]));
            }
        }
        best
    }

    /// One permutation per line, space-separated indices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.perms {
            let line: Vec<String> = p.iter().map(u8::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn all_permutations() -> Vec<[u8; PATCHES]> {
    // Lexicographic enumeration; the identity comes first.
    let mut cur: [u8; PATCHES] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
    let mut out = Vec::with_capacity(362_880);
    loop {
        out.push(cur);
        // next_permutation
        let Some(i) = (0..PATCHES - 1).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..PATCHES).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Greedy max-min-Hamming selection over the full 9! candidate set,
/// starting from the identity. Enumeration is cheap enough that no sampled
/// candidate pool is needed; the result is deterministic and `seed` only
/// disambiguates nothing today (kept for interface stability).
pub fn build_permutation_table(n_perm: usize, _seed: u64) -> Result<PermutationTable> {
    let total = 362_880;
    if !(2..=total).contains(&n_perm) {
        return Err(Error::InvalidConfig(format!(
            "permutation count {n_perm} outside [2, {total}]"
        )));
    }
    let all = all_permutations();
    let mut picked = vec![false; all.len()];
    picked[0] = true;
    let mut perms = vec![all[0]];
    let mut min_dist: Vec<u8> = all.iter().map(|p| hamming(p, &all[0]) as u8).collect();

    while perms.len() < n_perm {
        let mut best = usize::MAX;
        let mut best_d = 0u8;
        for (i, &d) in min_dist.iter().enumerate() {
            if !picked[i] && (best == usize::MAX || d > best_d) {
                best = i;
                best_d = d;
            }
        }
        picked[best] = true;
        perms.push(all[best]);
        let chosen = all[best];
        for (d, p) in min_dist.iter_mut().zip(&all) {
            *d = (*d).min(hamming(p, &chosen) as u8);
        }
    }
    Ok(PermutationTable { perms })
}

// ---- image plumbing ----------------------------------------------------

use crate::imgproc::{bilinear_resize, crop};

/// Nine patches of a `[3,S,S]` image in reading order.
pub(crate) fn split_into_patches(img: &Tensor) -> Vec<Tensor> {
    let s = img.shape()[1];
    let p = s / GRID;
    (0..PATCHES)
        .map(|i| crop(img, (i / GRID) * p, (i % GRID) * p, p))
        .collect()
}

/// Inverse of [`split_into_patches`].
pub(crate) fn assemble_patches(patches: &[Tensor]) -> Tensor {
    let p = patches[0].shape()[1];
    let s = p * GRID;
    let mut out = vec![0.0; 3 * s * s];
    for (i, patch) in patches.iter().enumerate() {
        let (gy, gx) = (i / GRID, i % GRID);
        for c in 0..3 {
            for y in 0..p {
                let src = (c * p + y) * p;
                let dst = (c * s + gy * p + y) * s + gx * p;
                out[dst..dst + p].copy_from_slice(&patch.data()[src..src + p]);
            }
        }
    }
    Tensor::new(vec![3, s, s], out).expect("assemble shape")
}

/// Random scale-jittered square view of an image: crop a region whose side
/// is 0.9·S scaled by u ∈ [0.5, 1.0), then resize back to S.
pub(crate) fn jigsaw_view(img: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let s = img.shape()[1];
    let u: f64 = rng.random_range(0.5..1.0);
    let side = ((0.9 * s as f64 * u).round() as usize).clamp(GRID, s);
    let y0 = rng.random_range(0..=s - side);
    let x0 = rng.random_range(0..=s - side);
    let cropped = crop(img, y0, x0, side);
    bilinear_resize(&cropped, s)
}

#[derive(Clone, Debug)]
pub struct JigsawBatch {
    /// Stacked patch batch `[B*9, 3, P, P]`; patch j of image b sits at
    /// row b*9+j and holds original patch `perm[j]`.
    pub patches: Tensor,
    pub labels: Vec<usize>,
}

/// Builds a shuffled-patch batch. Per image the rng draws, in order:
/// view scale, crop offsets, permutation index.
pub fn make_jigsaw_batch(
    images: &[Tensor],
    table: &PermutationTable,
    rng: &mut ChaCha8Rng,
) -> Result<JigsawBatch> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidConfig("jigsaw batch needs at least one image".into()));
    };
    let s = first.shape()[1];
    if s % GRID != 0 {
        return Err(Error::InvalidConfig(format!(
            "image side {s} not divisible by {GRID}"
        )));
    }
    let p = s / GRID;
    let mut data = Vec::with_capacity(images.len() * PATCHES * 3 * p * p);
    let mut labels = Vec::with_capacity(images.len());
    for img in images {
        let view = jigsaw_view(img, rng);
        let patches = split_into_patches(&view);
        let label = rng.random_range(0..table.n_perm());
        let perm = table.get(label);
        for &src in perm.iter() {
            data.extend_from_slice(patches[src as usize].data());
        }
        labels.push(label);
    }
    Ok(JigsawBatch {
        patches: Tensor::new(vec![images.len() * PATCHES, 3, p, p], data)?,
        labels,
    })
}

// ---- permutation classifier ---------------------------------------------

pub struct JigsawHeadNodes {
    pub weight: TensorId,
    pub bias: TensorId,
}

pub fn head_weight_name() -> &'static str {
    "jigsaw.head.weight"
}

pub fn head_bias_name() -> &'static str {
    "jigsaw.head.bias"
}

/// One fully connected layer mapping the 9 concatenated pooled patch
/// features to permutation logits.
pub fn init_jigsaw_into(params: &mut ParamSet, channels: usize, n_perm: usize, rng: &mut ChaCha8Rng) {
    let fan_in = PATCHES * channels;
    params.insert(head_weight_name(), lecun_uniform(rng, &[fan_in, n_perm], fan_in));
    params.insert(head_bias_name(), Tensor::zeros(&[n_perm]));
}

pub fn bind_jigsaw(g: &mut Graph, params: &ParamSet, trainable: bool) -> Result<JigsawHeadNodes> {
    let w = params
        .get(head_weight_name())
        .ok_or_else(|| Error::InvalidConfig("missing jigsaw head weights".into()))?;
    let b = params
        .get(head_bias_name())
        .ok_or_else(|| Error::InvalidConfig("missing jigsaw head bias".into()))?;
    Ok(JigsawHeadNodes {
        weight: g.leaf(w.clone(), trainable),
        bias: g.leaf(b.clone(), trainable),
    })
}

/// Mean negative log-probability of the true permutation, plus the logits
/// node for accuracy probes. Differentiable into the backbone.
pub fn ssl_loss(
    g: &mut Graph,
    backbone: &BackboneNodes,
    head: &JigsawHeadNodes,
    batch: &JigsawBatch,
) -> Result<(TensorId, TensorId)> {
    let n_images = batch.labels.len();
    let patches = g.constant(batch.patches.clone());
    let feats = conv_stack(g, backbone, patches)?;
    let pooled = g.global_avg_pool(feats)?; // [B*9, C]
    let channels = g.value(pooled).shape()[1];
    let stacked = g.reshape(pooled, &[n_images, PATCHES * channels])?;
    let logits = g.matmul(stacked, head.weight)?;
    let logits = g.bias_add(logits, head.bias)?;
    let logp = g.log_softmax(logits, 1)?;
    let loss = g.nll_mean(logp, &batch.labels)?;
    Ok((loss, logits))
}
