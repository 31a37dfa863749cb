//! Meta-gradients of the query loss after adaptation.

use crate::autodiff::AdGraph;
use crate::error::Result;
use crate::models::{mean_cross_entropy, Classifier};
use crate::params::ParamVector;
use crate::tasks::Episode;

use super::inner::{inner_adapt, inner_adapt_tracked, InnerConfig};

/// Second-order meta-gradient: differentiates the query loss at the adapted
/// parameters through every inner step back to the initialization.
pub fn meta_grad_maml(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    cfg: &InnerConfig,
) -> Result<(ParamVector, f64)> {
    let graph = AdGraph::new();
    let bound0 = theta0.bind(&graph, true);
    let support_x = graph.constant(episode.support_x.clone());

    let end = if cfg.steps() == 0 {
        bound0.clone()
    } else {
        let (_, end) =
            inner_adapt_tracked(model, &graph, &bound0, &support_x, &episode.support_y, cfg)?;
        end
    };

    let query_x = graph.constant(episode.query_x.clone());
    let logits = model.forward(&graph, &end, &query_x)?;
    let loss = mean_cross_entropy(&logits, &episode.query_y)?;
    let value = loss.item()?;
    let grads = loss.backward(false)?;
    Ok((bound0.grads(&grads), value))
}

/// First-order meta-gradient: the query gradient at the adapted parameters is
/// transplanted onto the initialization (the inner Jacobian is treated as the
/// identity), so no unrolled graph is kept.
pub fn meta_grad_fomaml(
    model: &dyn Classifier,
    theta0: &ParamVector,
    episode: &Episode,
    cfg: &InnerConfig,
) -> Result<(ParamVector, f64)> {
    let end = if cfg.steps() == 0 {
        theta0.clone()
    } else {
        inner_adapt(model, theta0, &episode.support_x, &episode.support_y, cfg)?
            .end()
            .clone()
    };

    let graph = AdGraph::new();
    let bound_end = end.bind(&graph, true);
    let query_x = graph.constant(episode.query_x.clone());
    let logits = model.forward(&graph, &bound_end, &query_x)?;
    let loss = mean_cross_entropy(&logits, &episode.query_y)?;
    let value = loss.item()?;
    let grads = loss.backward(false)?;
    Ok((bound_end.grads(&grads), value))
}
