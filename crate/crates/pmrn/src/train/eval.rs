//! Episodic evaluation with confidence intervals.
//!
//! Episodes fan out across threads; each episode derives its own rng stream
//! from the seed and its index, so the report does not depend on worker
//! count or scheduling.

use rayon::prelude::*;

use crate::data::{sample_episode, DatasetSplit};
use crate::error::Result;
use crate::model::{accuracy, bind_model, forward_episode, episode_tensors, EpisodeTensors, Mode, ModelConfig};
use crate::params::{rng_for, ParamSet};
use crate::tensor::{Graph, Tensor};

/// Stream offset separating evaluation draws from init (0) and training (1).
const EVAL_STREAM_BASE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_acc: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
}

fn summarize(per_episode: Vec<f64>) -> EvalReport {
    let n = per_episode.len();
    let mean = per_episode.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    EvalReport {
        mean_acc: mean,
        ci95,
        episodes: n,
        per_episode,
    }
}

/// Evaluation over an arbitrary scorer: maps episode tensors to a flat
/// `[n_query * n_way]` logit matrix. Lets tests inject oracle logits.
pub fn evaluate_scores<F>(
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    episodes: usize,
    seed: u64,
    scorer: F,
) -> Result<EvalReport>
where
    F: Fn(&EpisodeTensors) -> Result<Vec<f64>> + Sync,
{
    let per_episode: Result<Vec<f64>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, EVAL_STREAM_BASE + i as u64);
            let episode = sample_episode(split, n_way, k_shot, m_query, &mut rng)?;
            let tensors = episode_tensors(split, &episode, None);
            let logits = scorer(&tensors)?;
            let t = Tensor::new(vec![tensors.query_labels.len(), n_way], logits)?;
            Ok(accuracy(&t, &tensors.query_labels))
        })
        .collect();
    Ok(summarize(per_episode?))
}

/// Top-1 accuracy of the model over freshly sampled episodes.
pub fn evaluate(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_scores(split, n_way, k_shot, m_query, episodes, seed, |tensors| {
        let mut g = Graph::new();
        let binding = bind_model(&mut g, params, model_cfg, false)?;
        let out = forward_episode(&mut g, &binding, model_cfg, tensors, None, 0.0, 0.0, Mode::Eval)?;
        Ok(g.value(out.logits).data().to_vec())
    })
}
