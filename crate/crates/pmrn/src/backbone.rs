//! Convolutional feature extractor.
//!
//! A stack of 3×3 stride-2 conv blocks (conv → per-channel bias → relu)
//! that keeps a spatial grid at the output: the last stage is not pooled
//! away, so channel grouping still has geometry to work with.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{he_uniform, rng_for, ParamSet};
use crate::tensor::kernels::conv_out_side;
use crate::tensor::{Graph, Tensor, TensorId};

const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_size: usize,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    /// Desk-scale default: 96×96 input, four stride-2 stages, 6×6×64 output.
    pub fn desk_default() -> Self {
        Self::for_side(96)
    }

    /// Derives a stage stack for a given input side: keep halving while the
    /// output grid stays at least 6 wide, widening 16→32→64 and holding 64.
    pub fn for_side(side: usize) -> Self {
        let channels = [16usize, 32, 64];
        let mut stages = Vec::new();
        let mut s = side;
        while conv_out_side(s, KERNEL, 2, PAD) >= 6 {
            s = conv_out_side(s, KERNEL, 2, PAD);
            let c = *channels.get(stages.len()).unwrap_or(&64);
            stages.push(StageConfig {
                out_channels: c,
                stride: 2,
            });
        }
        BackboneConfig {
            in_size: side,
            stages,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    /// Output grid side implied by the stage strides.
    pub fn out_side(&self) -> usize {
        self.stages
            .iter()
            .fold(self.in_size, |s, st| conv_out_side(s, KERNEL, st.stride, PAD))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.in_size == 0 {
            return Err(Error::InvalidConfig("backbone needs at least one stage".into()));
        }
        if self.out_side() < 3 {
            return Err(Error::InvalidConfig(format!(
                "output grid {}x{} is too small; spatial structure must survive",
                self.out_side(),
                self.out_side()
            )));
        }
        if self.out_channels() < 8 {
            return Err(Error::InvalidConfig(format!(
                "{} output channels leave nothing to group",
                self.out_channels()
            )));
        }
        Ok(())
    }

    pub fn weight_name(stage: usize) -> String {
        format!("backbone.stage{stage}.weight")
    }

    pub fn bias_name(stage: usize) -> String {
        format!("backbone.stage{stage}.bias")
    }
}

/// Writes fan-in-scaled stage weights and zero biases into `params`.
pub fn init_backbone_into(params: &mut ParamSet, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let mut c_in = 3;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let fan_in = c_in * KERNEL * KERNEL;
        params.insert(
            BackboneConfig::weight_name(i),
            he_uniform(rng, &[stage.out_channels, c_in, KERNEL, KERNEL], fan_in),
        );
        params.insert(
            BackboneConfig::bias_name(i),
            Tensor::zeros(&[stage.out_channels]),
        );
        c_in = stage.out_channels;
    }
}

/// Fresh deterministic parameters for `(cfg, seed)`.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    init_backbone_into(&mut params, cfg, &mut rng_for(seed, 0));
    Ok(params)
}

/// Graph handles for the stage parameters.
pub struct BackboneNodes {
    pub stages: Vec<(TensorId, TensorId)>,
    pub strides: Vec<usize>,
}

pub fn bind_backbone(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    trainable: bool,
) -> Result<BackboneNodes> {
    let mut stages = Vec::new();
    for i in 0..cfg.stages.len() {
        let w = params
            .get(&BackboneConfig::weight_name(i))
            .ok_or_else(|| Error::InvalidConfig(format!("missing backbone stage {i} weights")))?;
        let b = params
            .get(&BackboneConfig::bias_name(i))
            .ok_or_else(|| Error::InvalidConfig(format!("missing backbone stage {i} bias")))?;
        stages.push((g.leaf(w.clone(), trainable), g.leaf(b.clone(), trainable)));
    }
    Ok(BackboneNodes {
        stages,
        strides: cfg.stages.iter().map(|s| s.stride).collect(),
    })
}

/// Runs the conv stack on any square input batch `[B,3,S,S]`. Used directly
/// by the jigsaw task, whose patch side is a third of the image side.
pub fn conv_stack(g: &mut Graph, nodes: &BackboneNodes, images: TensorId) -> Result<TensorId> {
    let mut x = images;
    for ((w, b), stride) in nodes.stages.iter().zip(&nodes.strides) {
        x = g.conv_block(x, *w, *b, *stride, PAD)?;
    }
    Ok(x)
}

/// Feature maps for a batch of full-size images `[B,3,S,S] -> [B,C,H,W]`.
/// The batch side must match the configured input side.
pub fn extract_features(
    g: &mut Graph,
    nodes: &BackboneNodes,
    cfg: &BackboneConfig,
    images: TensorId,
) -> Result<TensorId> {
    let shape = g.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.in_size || shape[3] != cfg.in_size {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            lhs: shape,
            rhs: vec![0, 3, cfg.in_size, cfg.in_size],
        });
    }
    conv_stack(g, nodes, images)
}
