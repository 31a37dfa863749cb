//! Meta-optimization driver: per-task meta-gradients folded over a batch and
//! applied to the initialization with Adam.

use rayon::prelude::*;

use crate::autodiff::AdGraph;
use crate::diagnostics::cosine_diagnostic;
use crate::error::{Error, Result};
use crate::models::{mean_cross_entropy, Classifier, InnerMask};
use crate::params::ParamVector;
use crate::tasks::Episode;

use super::inner::{inner_adapt, inner_adapt_tracked, InnerConfig, Trajectory};
use super::optimizer::{AdamConfig, AdamState};
use super::shot::{build_reference_and_target, shot_loss, ShotConfig};

/// Which meta-gradient the outer loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseAlgorithm {
    /// Second order: differentiate through the unrolled inner loop.
    Maml,
    /// First order: transplant endpoint gradients onto the initialization.
    FoMaml,
}

/// Meta-training state: the initialization, optimizer accumulators, and the
/// best validation snapshot seen so far.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub theta0: ParamVector,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val: Option<BestSnapshot>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub accuracy: f64,
    pub theta0: ParamVector,
    pub epoch: usize,
}

impl MetaState {
    pub fn new(theta0: ParamVector) -> Self {
        let len = theta0.total_len();
        MetaState {
            theta0,
            adam: AdamState::new(len),
            epoch: 0,
            best_val: None,
        }
    }

    /// Records a validation accuracy; keeps the snapshot when it is a strict
    /// improvement. Returns whether a new best was stored.
    pub fn observe_validation(&mut self, accuracy: f64) -> bool {
        let better = match &self.best_val {
            Some(best) => accuracy > best.accuracy,
            None => true,
        };
        if better {
            self.best_val = Some(BestSnapshot {
                accuracy,
                theta0: self.theta0.clone(),
                epoch: self.epoch,
            });
        }
        better
    }

    /// Best-validation parameters, falling back to the current ones.
    pub fn best_theta(&self) -> &ParamVector {
        match &self.best_val {
            Some(best) => &best.theta0,
            None => &self.theta0,
        }
    }
}

/// Configuration of one outer step.
#[derive(Debug, Clone)]
pub struct OuterConfig {
    pub base: BaseAlgorithm,
    /// Inner loop of the plain baseline; also carries the adaptability mask
    /// used by the trajectory-regularized construction.
    pub inner: InnerConfig,
    /// Present for regularized training, absent for the plain baseline.
    pub shot: Option<ShotConfig>,
    pub adam: AdamConfig,
}

/// Everything one task contributes to an outer step.
pub struct TaskOutcome {
    pub grad: ParamVector,
    pub query_loss: f64,
    pub shot_value: f64,
    pub cosine: f64,
    /// The trajectory the task loss was evaluated on (reference trajectory
    /// for regularized runs, the baseline trajectory otherwise).
    pub trajectory: Trajectory,
}

/// Batch-level aggregates of one outer step.
pub struct OuterStepReport {
    pub train_loss: f64,
    pub shot_loss_mean: f64,
    pub cosine_mean: f64,
    pub trajectories: Vec<Trajectory>,
}

fn maml_task(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    cfg: &OuterConfig,
) -> Result<TaskOutcome> {
    let graph = AdGraph::new();
    let bound0 = theta0.bind(&graph, true);
    let support_x = graph.constant(episode.support_x.clone());
    let query_x = graph.constant(episode.query_x.clone());

    match &cfg.shot {
        None => {
            let (trajectory, end) = inner_adapt_tracked(
                model,
                &graph,
                &bound0,
                &support_x,
                &episode.support_y,
                &cfg.inner,
            )?;
            let logits = model.forward(&graph, &end, &query_x)?;
            let loss = mean_cross_entropy(&logits, &episode.query_y)?;
            let query_loss = loss.item()?;
            let grads = loss.backward(false)?;
            let cosine = cosine_diagnostic(&trajectory)?;
            Ok(TaskOutcome {
                grad: bound0.grads(&grads),
                query_loss,
                shot_value: 0.0,
                cosine,
                trajectory,
            })
        }
        Some(shot) => {
            let pair = build_reference_and_target(
                model,
                &graph,
                &bound0,
                &support_x,
                &episode.support_y,
                shot,
                cfg.inner.mask(),
            )?;
            // task loss at the reference endpoint (the baseline trajectory)
            let logits = model.forward(&graph, &pair.reference_end, &query_x)?;
            let task_loss = mean_cross_entropy(&logits, &episode.query_y)?;
            let query_loss = task_loss.item()?;
            let penalty = shot_loss(
                &graph,
                model,
                &pair.target_end,
                &pair.reference_end,
                Some(&episode.query_x),
                shot.metric,
                shot.detach_reference,
            )?;
            let shot_value = penalty.item()?;
            // lambda == 0 must reproduce the baseline bit for bit, so the
            // penalty node is left out of the root entirely in that case
            let outer = if shot.lambda == 0.0 {
                task_loss
            } else {
                task_loss.add(&penalty.scale(shot.lambda)?)?
            };
            let grads = outer.backward(false)?;
            let cosine = cosine_diagnostic(&pair.reference)?;
            Ok(TaskOutcome {
                grad: bound0.grads(&grads),
                query_loss,
                shot_value,
                cosine,
                trajectory: pair.reference,
            })
        }
    }
}

/// Value-level reference/target construction for the first-order path.
/// Mirrors the tracked construction bit for bit, including the shared-gradient
/// shortcut at `T == 1`.
fn value_reference_and_target(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    shot: &ShotConfig,
    mask: &InnerMask,
) -> Result<(Trajectory, Trajectory)> {
    let ref_cfg = shot.reference_inner_config(mask.clone())?;
    let reference = inner_adapt(
        model,
        theta0,
        &episode.support_x,
        &episode.support_y,
        &ref_cfg,
    )?;

    if shot.t_steps() == 1 && shot.r_steps() > 1 {
        let scale = shot.r_steps() as f64;
        let mut entries = Vec::with_capacity(theta0.num_entries());
        let mut deltas = Vec::with_capacity(theta0.num_entries());
        for (i, (name, p)) in theta0.entries().iter().enumerate() {
            if mask.is_adaptable(i) {
                let d = reference.deltas[0].entries()[i].1.scale(scale)?;
                entries.push((name.clone(), p.sub(&d)?));
                deltas.push((name.clone(), d));
            } else {
                entries.push((name.clone(), p.clone()));
                deltas.push((name.clone(), p.zeros_like()));
            }
        }
        let end = ParamVector::new(entries);
        let end_loss = super::inner::support_loss_value(
            model,
            &end,
            &episode.support_x,
            &episode.support_y,
        )?;
        let target = Trajectory {
            thetas: vec![theta0.clone(), end],
            grads: vec![reference.grads[0].clone()],
            deltas: vec![ParamVector::new(deltas)],
            losses: vec![reference.losses[0], end_loss],
        };
        return Ok((reference, target));
    }

    let tgt_cfg = shot.target_inner_config(mask.clone())?;
    let target = inner_adapt(
        model,
        theta0,
        &episode.support_x,
        &episode.support_y,
        &tgt_cfg,
    )?;
    Ok((reference, target))
}

fn fomaml_task(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    cfg: &OuterConfig,
) -> Result<TaskOutcome> {
    match &cfg.shot {
        None => {
            let trajectory = inner_adapt(
                model,
                theta0,
                &episode.support_x,
                &episode.support_y,
                &cfg.inner,
            )?;
            let graph = AdGraph::new();
            let end = trajectory.end().bind(&graph, true);
            let query_x = graph.constant(episode.query_x.clone());
            let logits = model.forward(&graph, &end, &query_x)?;
            let loss = mean_cross_entropy(&logits, &episode.query_y)?;
            let query_loss = loss.item()?;
            let grads = loss.backward(false)?;
            let cosine = cosine_diagnostic(&trajectory)?;
            Ok(TaskOutcome {
                grad: end.grads(&grads),
                query_loss,
                shot_value: 0.0,
                cosine,
                trajectory,
            })
        }
        Some(shot) => {
            let (reference, target) =
                value_reference_and_target(model, theta0, episode, shot, cfg.inner.mask())?;
            // endpoints enter a fresh graph as leaves; gradients at those
            // leaves are the first-order meta-gradient contributions
            let graph = AdGraph::new();
            let ref_end = reference.end().bind(&graph, true);
            let tgt_end = target.end().bind(&graph, true);
            let query_x = graph.constant(episode.query_x.clone());
            let logits = model.forward(&graph, &ref_end, &query_x)?;
            let task_loss = mean_cross_entropy(&logits, &episode.query_y)?;
            let query_loss = task_loss.item()?;
            let penalty = shot_loss(
                &graph,
                model,
                &tgt_end,
                &ref_end,
                Some(&episode.query_x),
                shot.metric,
                shot.detach_reference,
            )?;
            let shot_value = penalty.item()?;
            let outer = if shot.lambda == 0.0 {
                task_loss
            } else {
                task_loss.add(&penalty.scale(shot.lambda)?)?
            };
            let grads = outer.backward(false)?;
            // transplant both endpoint gradients onto theta0
            let g_ref = ref_end.grads(&grads);
            let g_tgt = tgt_end.grads(&grads);
            let grad = g_ref.add_scaled(&g_tgt, 1.0)?;
            let cosine = cosine_diagnostic(&reference)?;
            Ok(TaskOutcome {
                grad,
                query_loss,
                shot_value,
                cosine,
                trajectory: reference,
            })
        }
    }
}

/// Runs one task of the meta-batch.
pub fn run_task(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    cfg: &OuterConfig,
) -> Result<TaskOutcome> {
    match cfg.base {
        BaseAlgorithm::Maml => maml_task(model, theta0, episode, cfg),
        BaseAlgorithm::FoMaml => fomaml_task(model, theta0, episode, cfg),
    }
}

/// One outer update: per-task meta-gradients (tasks may run concurrently),
/// averaged in task order, applied to the initialization with Adam.
pub fn outer_step(
    model: &(dyn Classifier + Sync),
    state: &mut MetaState,
    batch: &[Episode],
    cfg: &OuterConfig,
) -> Result<OuterStepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "meta-batch must be non-empty".into(),
        });
    }
    let theta0 = state.theta0.clone();
    let outcomes: Vec<Result<TaskOutcome>> = batch
        .par_iter()
        .map(|episode| run_task(model, &theta0, episode, cfg))
        .collect();

    let mut grad_sum = vec![0.0; theta0.total_len()];
    let mut train_loss = 0.0;
    let mut shot_sum = 0.0;
    let mut cosine_sum = 0.0;
    let mut trajectories = Vec::with_capacity(batch.len());
    let n = batch.len() as f64;

    // deterministic sequential fold in task order
    for (task, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome.map_err(|e| Error::TaskFailed {
            task,
            source: Box::new(e),
        })?;
        for (acc, g) in grad_sum.iter_mut().zip(outcome.grad.flatten()) {
            *acc += g;
        }
        train_loss += outcome.query_loss;
        shot_sum += outcome.shot_value;
        cosine_sum += outcome.cosine;
        trajectories.push(outcome.trajectory);
    }
    for g in &mut grad_sum {
        *g /= n;
    }

    let mut flat = state.theta0.flatten();
    state.adam.step(&cfg.adam, &mut flat, &grad_sum)?;
    state.theta0 = ParamVector::unflatten_like(&state.theta0, &flat)?;

    Ok(OuterStepReport {
        train_loss: train_loss / n,
        shot_loss_mean: shot_sum / n,
        cosine_mean: cosine_sum / n,
        trajectories,
    })
}
