//! Label-free pretraining: the outer loss is the bare trajectory distance,
//! the reference branch runs through a projector behind a stop-gradient, and
//! query inputs are augmented. Query labels are never read on the update
//! path.

use rayon::prelude::*;

use crate::autodiff::{AdGraph, Var};
use crate::error::{Error, Result};
use crate::models::{log_softmax_rows, mean_kl_rows, softmax_rows, Classifier, InnerMask, Projector};
use crate::params::{BoundParams, ParamVector};
use crate::rng::SplitRng;
use crate::tasks::{augment, sample_episode, ClassPool, Episode, EpisodeSpec, Split};
use crate::tensor::Tensor;

use super::eval::evaluate;
use super::inner::InnerConfig;
use super::optimizer::AdamConfig;
use super::outer::{BaseAlgorithm, MetaState};
use super::shot::{build_reference_and_target, ShotConfig, ShotMetric, ShotVariant};

/// What the projector consumes on the reference branch. Its output always
/// feeds the distance metric as logits (softmax applied after the projector).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorInput {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub shot: ShotConfig,
    pub base: BaseAlgorithm,
    pub episode: EpisodeSpec,
    pub meta_batch: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub augment_std: f64,
    pub adam: AdamConfig,
    pub projector_input: ProjectorInput,
    /// Few-shot validation protocol used to pick the snapshot to keep.
    pub eval_inner: InnerConfig,
    pub val_episodes: usize,
}

/// Distance between the target's predictive distribution and the projected,
/// stop-gradient reference distribution on the augmented queries. No labels
/// anywhere.
fn pretrain_loss(
    graph: &AdGraph,
    model: &dyn Classifier,
    cfg: &PretrainConfig,
    projector: &Projector,
    target_end: &BoundParams,
    reference_end: &BoundParams,
    augmented_query: &Tensor,
) -> Result<Var> {
    if augmented_query.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptyInput {
            op: "pretrain_loss",
        });
    }
    let qx = graph.constant(augmented_query.clone());
    let t_logits = model.forward(graph, target_end, &qx)?;
    let ref_params = reference_end.detach_all();
    let r_logits = model.forward(graph, &ref_params, &qx)?;
    let projected = match cfg.projector_input {
        ProjectorInput::Logits => projector.apply(graph, &r_logits)?,
        ProjectorInput::Probabilities => projector.apply(graph, &softmax_rows(&r_logits)?)?,
    };
    let n = augmented_query.shape()[0] as f64;
    match cfg.shot.metric {
        ShotMetric::Kl => mean_kl_rows(&t_logits, &projected),
        ShotMetric::CrossEntropy => {
            let p = softmax_rows(&t_logits)?;
            let lq = log_softmax_rows(&projected)?;
            let raw = p.mul(&lq)?.sum()?.scale(-1.0 / n)?;
            let baseline = p
                .detach()
                .mul(&log_softmax_rows(&t_logits)?.detach())?
                .sum()?
                .scale(-1.0 / n)?;
            raw.sub(&baseline)
        }
        ShotMetric::L2 => Err(Error::InvalidConfig {
            reason: "the l2 metric bypasses the projector; use kl or cross_entropy".into(),
        }),
    }
}

fn pretrain_task_grad(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    augmented_query: &Tensor,
    cfg: &PretrainConfig,
    projector: &Projector,
    mask: &InnerMask,
) -> Result<(ParamVector, f64)> {
    match cfg.base {
        BaseAlgorithm::Maml => {
            let graph = AdGraph::new();
            let bound0 = theta0.bind(&graph, true);
            let sx = graph.constant(episode.support_x.clone());
            let pair = build_reference_and_target(
                model,
                &graph,
                &bound0,
                &sx,
                &episode.support_y,
                &cfg.shot,
                mask,
            )?;
            let loss = pretrain_loss(
                &graph,
                model,
                cfg,
                projector,
                &pair.target_end,
                &pair.reference_end,
                augmented_query,
            )?;
            let value = loss.item()?;
            let grads = loss.backward(false)?;
            Ok((bound0.grads(&grads), value))
        }
        BaseAlgorithm::FoMaml => {
            // run the trajectories for their values only, then treat the
            // endpoints as leaves: the target gradient transplants onto theta0
            let graph0 = AdGraph::new();
            let bound0 = theta0.bind(&graph0, true);
            let sx = graph0.constant(episode.support_x.clone());
            let pair = build_reference_and_target(
                model,
                &graph0,
                &bound0,
                &sx,
                &episode.support_y,
                &cfg.shot,
                mask,
            )?;
            let graph = AdGraph::new();
            let target = pair.target_end.values().bind(&graph, true);
            let reference = pair.reference_end.values().bind(&graph, false);
            let loss = pretrain_loss(
                &graph, model, cfg, projector, &target, &reference, augmented_query,
            )?;
            let value = loss.item()?;
            let grads = loss.backward(false)?;
            Ok((target.grads(&grads), value))
        }
    }
}

/// Per-epoch pretraining aggregates, handed to the caller's observer.
#[derive(Debug, Clone, Copy)]
pub struct PretrainEpochReport {
    pub epoch: usize,
    pub loss_mean: f64,
    pub val_accuracy: f64,
    pub val_ci95: f64,
}

/// Runs label-free pretraining and returns a state whose parameters are the
/// snapshot with the highest few-shot validation accuracy. Zero epochs return
/// the input state unchanged. `on_epoch` observes per-epoch aggregates.
pub fn pretrain_shot_p(
    model: &(dyn Classifier + Sync),
    mut state: MetaState,
    pool: &ClassPool,
    cfg: &PretrainConfig,
    projector: Option<&Projector>,
    rng: &SplitRng,
    mut on_epoch: impl FnMut(&PretrainEpochReport),
) -> Result<MetaState> {
    if cfg.shot.variant != ShotVariant::Pretrainer {
        return Err(Error::InvalidConfig {
            reason: "pretraining requires the pretrainer variant".into(),
        });
    }
    let projector = projector.ok_or(Error::InvalidConfig {
        reason: "pretraining requires a projector on the reference branch".into(),
    })?;
    if cfg.epochs == 0 {
        return Ok(state);
    }
    let mask = InnerMask::all_adaptable(&state.theta0);
    let mut episode_rng = rng.split("pretrain-episodes");
    let augment_rng = rng.split("pretrain-augment");
    let val_rng = rng.split("pretrain-val");

    let mut task_counter = 0u64;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            // sample and augment on the driver so parallel task execution
            // cannot reorder rng consumption
            let mut tasks = Vec::with_capacity(cfg.meta_batch);
            for _ in 0..cfg.meta_batch {
                let episode = sample_episode(
                    pool,
                    Split::Train,
                    cfg.episode.n_way,
                    cfg.episode.k_shot,
                    cfg.episode.q_query,
                    &mut episode_rng,
                )?;
                let mut arng = augment_rng.split_index(task_counter);
                task_counter += 1;
                let augmented_query = augment(&episode.query_x, &mut arng, cfg.augment_std)?;
                tasks.push((episode, augmented_query));
            }

            let theta0 = state.theta0.clone();
            let results: Vec<Result<(ParamVector, f64)>> = tasks
                .par_iter()
                .map(|(episode, aug)| {
                    pretrain_task_grad(model, &theta0, episode, aug, cfg, projector, &mask)
                })
                .collect();

            let mut grad_sum = vec![0.0; theta0.total_len()];
            let n = cfg.meta_batch as f64;
            for (task, r) in results.into_iter().enumerate() {
                let (grad, loss) = r.map_err(|e| Error::TaskFailed {
                    task,
                    source: Box::new(e),
                })?;
                epoch_loss += loss / (n * cfg.batches_per_epoch as f64);
                for (acc, g) in grad_sum.iter_mut().zip(grad.flatten()) {
                    *acc += g;
                }
            }
            for g in &mut grad_sum {
                *g /= n;
            }
            let mut flat = state.theta0.flatten();
            state.adam.step(&cfg.adam, &mut flat, &grad_sum)?;
            state.theta0 = ParamVector::unflatten_like(&state.theta0, &flat)?;
        }

        state.epoch += 1;
        let mut erng = val_rng.split_index(state.epoch as u64);
        let report = evaluate(
            model,
            &state.theta0,
            pool,
            Split::Val,
            cfg.episode,
            cfg.val_episodes,
            &cfg.eval_inner,
            &mut erng,
        )?;
        state.observe_validation(report.mean_accuracy);
        on_epoch(&PretrainEpochReport {
            epoch: state.epoch,
            loss_mean: epoch_loss,
            val_accuracy: report.mean_accuracy,
            val_ci95: report.ci95,
        });
    }

    // keep the best snapshot; the supervised phase starts from it
    if let Some(best) = &state.best_val {
        state.theta0 = best.theta0.clone();
    }
    Ok(state)
}
