//! End-to-end episodic training: sequential episode loop, optimizer steps,
//! metrics emission, checkpointing, and abort-on-divergence.

pub mod adam;
pub mod checkpoint;
pub mod eval;

use std::collections::BTreeMap;

use adam::{adam_step, AdamHyper, AdamState};
use checkpoint::{Checkpoint, RngState};

use crate::config::TrainConfig;
use crate::data::{sample_episode, Dataset};
use crate::error::{Error, Result};
use crate::jigsaw::{build_permutation_table, make_jigsaw_batch, PermutationTable};
use crate::model::{
    accuracy, bind_model, episode_tensors, forward_episode, init_model, Mode, ModelConfig,
};
use crate::params::{rng_for, ParamSet};
use crate::tensor::Graph;

/// Images fed to the pretext task per training step. Small episodes use
/// every support and query image; larger ones keep all support images and
/// an evenly strided sample of queries, which spreads the jigsaw signal
/// across classes at a fixed per-step cost.
const SSL_IMAGES_PER_STEP: usize = 16;

fn ssl_subset(tensors: &crate::model::EpisodeTensors) -> Vec<crate::tensor::Tensor> {
    let total = tensors.raw.len();
    if total <= SSL_IMAGES_PER_STEP {
        return tensors.raw.clone();
    }
    let n_support = tensors.support_labels.len();
    let mut picked: Vec<crate::tensor::Tensor> =
        tensors.raw[..n_support.min(SSL_IMAGES_PER_STEP)].to_vec();
    let need = SSL_IMAGES_PER_STEP.saturating_sub(picked.len());
    let n_query = total - n_support;
    for i in 0..need {
        let q = i * n_query / need;
        picked.push(tensors.raw[n_support + q].clone());
    }
    picked
}

/// One emitted metrics line. Auxiliary losses are 0 when the module is off;
/// eval columns are -1 when the validation split cannot host an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub episode: u64,
    pub l_cls: f64,
    pub l_div: f64,
    pub l_ssl: f64,
    pub l_total: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub eval_ci: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("episode,l_cls,l_div,l_ssl,l_total,train_acc,eval_acc,eval_ci\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.episode, r.l_cls, r.l_div, r.l_ssl, r.l_total, r.train_acc, r.eval_acc, r.eval_ci
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Populated when the run stopped early on a non-finite loss; the
    /// checkpoint then holds the last good state.
    pub aborted: Option<String>,
}

/// Derives the model layout from the dataset geometry and the run config.
pub fn model_config(cfg: &TrainConfig, side: usize) -> ModelConfig {
    ModelConfig::for_side(side, cfg.k_primitives, cfg.toggles)
}

/// Fresh training run.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = model_config(cfg, dataset.side);
    model_cfg.validate()?;
    let params = init_model(&model_cfg, cfg.seed)?;
    let rng = rng_for(cfg.seed, 1);
    run(cfg, dataset, model_cfg, params, AdamState::new(), rng, 0)
}

/// Continues a checkpointed run up to its configured episode budget.
pub fn train_resume(ck: Checkpoint, dataset: &Dataset) -> Result<TrainOutcome> {
    let cfg = ck.config.clone();
    cfg.validate()?;
    let model_cfg = model_config(&cfg, dataset.side);
    model_cfg.validate()?;
    let rng = ck.rng.restore();
    run(&cfg, dataset, model_cfg, ck.params, ck.adam, rng, ck.episode)
}

#[allow(clippy::too_many_arguments)]
fn run(
    cfg: &TrainConfig,
    dataset: &Dataset,
    model_cfg: ModelConfig,
    mut params: ParamSet,
    mut opt: AdamState,
    mut rng: rand_chacha::ChaCha8Rng,
    start_episode: u64,
) -> Result<TrainOutcome> {
    let table: Option<PermutationTable> = if cfg.toggles.ssj {
        Some(build_permutation_table(model_cfg.n_perm, cfg.seed)?)
    } else {
        None
    };
    let hp = AdamHyper {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let val_usable = dataset.val.n_classes() >= cfg.n_way
        && dataset.val.min_images_per_class() >= cfg.k_shot + cfg.queries;
    let mut metrics = Vec::new();

    let make_checkpoint = |params: &ParamSet, opt: &AdamState, episode: u64, rng: &rand_chacha::ChaCha8Rng| {
        Checkpoint {
            params: params.clone(),
            adam: opt.clone(),
            config: cfg.clone(),
            episode,
            rng: RngState::capture(rng),
        }
    };

    for e in start_episode..cfg.episodes {
        let rollback = (params.clone(), opt.clone(), rng.clone());
        let step = (|| -> Result<(f64, f64, f64, f64, f64)> {
            // Per episode the training stream draws, in order: episode
            // sampling, augmentation, jigsaw views and permutations.
            let episode = sample_episode(&dataset.train, cfg.n_way, cfg.k_shot, cfg.queries, &mut rng)?;
            let tensors = episode_tensors(&dataset.train, &episode, Some(&mut rng));
            let jig = match &table {
                Some(t) => Some(make_jigsaw_batch(&ssl_subset(&tensors), t, &mut rng)?),
                None => None,
            };
            let mut g = Graph::new();
            let binding = bind_model(&mut g, &params, &model_cfg, true)?;
            let out = forward_episode(
                &mut g,
                &binding,
                &model_cfg,
                &tensors,
                jig.as_ref(),
                cfg.lambda_div,
                cfg.alpha_ssl,
                Mode::Train,
            )?;
            let l_cls = g.value(out.l_cls).item();
            let l_div = out.l_div.map_or(0.0, |id| g.value(id).item());
            let l_ssl = out.l_ssl.map_or(0.0, |id| g.value(id).item());
            let l_total = g.value(out.total).item();
            let train_acc = accuracy(g.value(out.logits), &tensors.query_labels);

            let grads_by_id = g.backward(out.total)?;
            let mut grads = BTreeMap::new();
            for (name, id) in &binding.names {
                grads.insert(name.clone(), grads_by_id.or_zeros(*id, g.value(*id).shape()));
            }
            adam_step(&mut params, &grads, &mut opt, &hp)?;
            Ok((l_cls, l_div, l_ssl, l_total, train_acc))
        })();

        match step {
            Ok((l_cls, l_div, l_ssl, l_total, train_acc)) => {
                let done = e + 1;
                if done % cfg.eval_interval == 0 || done == cfg.episodes {
                    let (eval_acc, eval_ci) = if val_usable && cfg.eval_episodes > 0 {
                        let report = eval::evaluate(
                            &params,
                            &model_cfg,
                            &dataset.val,
                            cfg.n_way,
                            cfg.k_shot,
                            cfg.queries,
                            cfg.eval_episodes,
                            cfg.seed ^ 0x9E37_79B9_7F4A_7C15 ^ done,
                        )?;
                        (report.mean_acc, report.ci95)
                    } else {
                        (-1.0, -1.0)
                    };
                    metrics.push(MetricsRow {
                        episode: done,
                        l_cls,
                        l_div,
                        l_ssl,
                        l_total,
                        train_acc,
                        eval_acc,
                        eval_ci,
                    });
                }
            }
            Err(Error::NonFinite { op }) => {
                let (params, opt, rng) = rollback;
                return Ok(TrainOutcome {
                    checkpoint: make_checkpoint(&params, &opt, e, &rng),
                    metrics,
                    aborted: Some(format!("non-finite value in {op} at episode {e}")),
                });
            }
            Err(other) => return Err(other),
        }
    }

    Ok(TrainOutcome {
        checkpoint: make_checkpoint(&params, &opt, cfg.episodes, &rng),
        metrics,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_dataset, partsworld};
    use crate::model::Toggles;

    fn tiny_dataset(seed: u64) -> Dataset {
        let cfg = partsworld::PartsWorldConfig {
            canvas: 24,
            classes_train: 6,
            classes_val: 5,
            classes_novel: 5,
            images_per_class: 8,
            part_size: 8,
            jitter: 2,
            noise_amp: 10,
            seed,
            ..Default::default()
        };
        let (c, m) = partsworld::generate(&cfg).unwrap();
        assemble_dataset(&c, &m).unwrap()
    }

    fn tiny_cfg(episodes: u64) -> TrainConfig {
        TrainConfig {
            n_way: 3,
            k_shot: 1,
            queries: 2,
            episodes,
            eval_interval: 5,
            eval_episodes: 4,
            ..Default::default()
        }
    }

    #[test]
    fn two_runs_emit_identical_metrics() {
        let ds = tiny_dataset(1);
        let cfg = tiny_cfg(10);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(checkpoint::encode(&a.checkpoint), checkpoint::encode(&b.checkpoint));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset(2);
        let full_cfg = tiny_cfg(8);
        let full = train(&full_cfg, &ds).unwrap();

        let mut half_cfg = full_cfg.clone();
        half_cfg.episodes = 4;
        let half = train(&half_cfg, &ds).unwrap();
        let bytes = checkpoint::encode(&half.checkpoint);
        let mut restored = checkpoint::decode(&bytes).unwrap();
        restored.config.episodes = 8;
        let resumed = train_resume(restored, &ds).unwrap();

        assert_eq!(
            checkpoint::encode(&resumed.checkpoint),
            checkpoint::encode(&full.checkpoint)
        );
    }

    #[test]
    fn grouping_only_run_has_pure_classification_loss() {
        let ds = tiny_dataset(3);
        let mut cfg = tiny_cfg(4);
        cfg.toggles = Toggles { ssj: false, acg: true, crn: false, tsw: false };
        cfg.lambda_div = 0.0;
        cfg.alpha_ssl = 0.0;
        cfg.eval_interval = 1;
        let out = train(&cfg, &ds).unwrap();
        for row in &out.metrics {
            assert_eq!(row.l_ssl, 0.0);
            assert!((row.l_total - row.l_cls).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_stream_is_finite_or_run_aborts() {
        let ds = tiny_dataset(4);
        let cfg = tiny_cfg(6);
        let out = train(&cfg, &ds).unwrap();
        assert!(out.aborted.is_none());
        for row in &out.metrics {
            assert!(row.l_total.is_finite());
        }
    }
}
