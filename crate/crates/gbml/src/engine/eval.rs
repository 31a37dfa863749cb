//! Few-shot evaluation: adapt on the support set, score argmax predictions on
//! the query set, aggregate over episodes.

use rayon::prelude::*;

use crate::error::Result;
use crate::models::{argmax, Classifier};
use crate::params::ParamVector;
use crate::rng::SplitRng;
use crate::tasks::{sample_episode, ClassPool, Episode, EpisodeSpec, Split};

use super::inner::{inner_adapt, InnerConfig};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Half-width of the 95% confidence interval (normal approximation over
    /// episode accuracies).
    pub ci95: f64,
    pub episode_accuracies: Vec<f64>,
}

impl EvalReport {
    fn from_accuracies(episode_accuracies: Vec<f64>) -> Self {
        let n = episode_accuracies.len();
        let mean = episode_accuracies.iter().sum::<f64>() / n.max(1) as f64;
        let ci95 = if n > 1 {
            let var = episode_accuracies
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>()
                / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            mean_accuracy: mean,
            ci95,
            episode_accuracies,
        }
    }

    /// Whether two intervals are disjoint.
    pub fn ci_disjoint_from(&self, other: &EvalReport) -> bool {
        let (lo_a, hi_a) = (self.mean_accuracy - self.ci95, self.mean_accuracy + self.ci95);
        let (lo_b, hi_b) = (
            other.mean_accuracy - other.ci95,
            other.mean_accuracy + other.ci95,
        );
        hi_a < lo_b || hi_b < lo_a
    }
}

/// Accuracy of the adapted model on a single episode.
pub fn episode_accuracy(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    inner: &InnerConfig,
) -> Result<f64> {
    let trajectory = inner_adapt(
        model,
        theta0,
        &episode.support_x,
        &episode.support_y,
        inner,
    )?;
    let graph = crate::autodiff::AdGraph::new();
    let bound = trajectory.end().bind(&graph, false);
    let qx = graph.constant(episode.query_x.clone());
    let logits = model.forward(&graph, &bound, &qx)?.value();
    let total = episode.query_y.len();
    let mut correct = 0usize;
    for (row, &label) in (0..total).zip(&episode.query_y) {
        if argmax(logits.row(row)) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Evaluates on a fixed episode list (episodes may be scored concurrently;
/// the aggregate is order-independent only through the fixed list order).
pub fn evaluate_on_episodes(
    model: &(dyn Classifier + Sync),
    theta0: &ParamVector,
    episodes: &[Episode],
    inner: &InnerConfig,
) -> Result<EvalReport> {
    let accuracies: Vec<Result<f64>> = episodes
        .par_iter()
        .map(|ep| episode_accuracy(model, theta0, ep, inner))
        .collect();
    let accuracies = accuracies.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(accuracies))
}

/// Samples `episodes` tasks from a split and evaluates them.
pub fn evaluate(
    model: &(dyn Classifier + Sync),
    theta0: &ParamVector,
    pool: &ClassPool,
    split: Split,
    spec: EpisodeSpec,
    episodes: usize,
    inner: &InnerConfig,
    rng: &mut SplitRng,
) -> Result<EvalReport> {
    let mut sampled = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        sampled.push(sample_episode(
            pool,
            split,
            spec.n_way,
            spec.k_shot,
            spec.q_query,
            rng,
        )?);
    }
    evaluate_on_episodes(model, theta0, &sampled, inner)
}
