//! Task-specific adaptation: a few full-batch gradient steps on the support
//! set, optionally with the whole unrolled computation kept differentiable.

use crate::autodiff::{AdGraph, Var};
use crate::error::{Error, Result};
use crate::models::{mean_cross_entropy, Classifier, InnerMask};
use crate::params::{BoundParams, ParamVector};
use crate::tensor::Tensor;

/// Abort threshold for the support gradient norm. Instability surfaces as a
/// diagnostic error instead of silent clipping.
pub const GRADIENT_NORM_BOUND: f64 = 1e6;

/// Step count, learning rate and adaptability mask for one inner loop.
#[derive(Debug, Clone)]
pub struct InnerConfig {
    steps: usize,
    lr: f64,
    mask: InnerMask,
}

impl InnerConfig {
    pub fn new(steps: usize, lr: f64, mask: InnerMask) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig {
                reason: "inner loop needs at least one step".into(),
            });
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig {
                reason: format!("inner learning rate must be positive, got {lr}"),
            });
        }
        Ok(InnerConfig { steps, lr, mask })
    }

    /// Zero-step configuration. Only meaningful for exercising meta-gradient
    /// code paths where the adapted parameters equal the initialization.
    pub fn degenerate_zero_steps(lr: f64, mask: InnerMask) -> Self {
        InnerConfig {
            steps: 0,
            lr,
            mask,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn mask(&self) -> &InnerMask {
        &self.mask
    }
}

/// Record of one inner loop: visited parameters, raw support gradients, the
/// update deltas actually applied, and the support loss along the way.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `theta^0 .. theta^T`.
    pub thetas: Vec<ParamVector>,
    /// Raw (unmasked) support gradients `g^0 .. g^{T-1}`.
    pub grads: Vec<ParamVector>,
    /// Applied updates `alpha * mask(g^k)`; zero tensors at frozen entries.
    pub deltas: Vec<ParamVector>,
    /// Support loss at `theta^0 .. theta^T`.
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.grads.len()
    }

    pub fn start(&self) -> &ParamVector {
        &self.thetas[0]
    }

    pub fn end(&self) -> &ParamVector {
        self.thetas.last().expect("trajectory holds theta^0")
    }

    /// Replays every update from the recorded gradients and checks that the
    /// stored parameters match bit for bit.
    pub fn verify_reconstruction(&self, lr: f64, mask: &InnerMask) -> Result<()> {
        for k in 0..self.steps() {
            let expect = apply_update_values(&self.thetas[k], &self.grads[k], lr, mask)?;
            if !expect.next.bitwise_eq(&self.thetas[k + 1]) {
                return Err(Error::DegenerateTrajectory {
                    reason: format!("reconstruction mismatch at step {k}"),
                });
            }
        }
        Ok(())
    }
}

pub struct ValueUpdate {
    pub next: ParamVector,
    pub delta: ParamVector,
}

/// One SGD update at value level: `theta - lr * mask(g)`, with frozen entries
/// carried through untouched so they stay bitwise stable.
pub fn apply_update_values(
    theta: &ParamVector,
    grad: &ParamVector,
    lr: f64,
    mask: &InnerMask,
) -> Result<ValueUpdate> {
    mask.check_covers(theta)?;
    let mut next = Vec::with_capacity(theta.num_entries());
    let mut delta = Vec::with_capacity(theta.num_entries());
    for (i, ((name, t), (_, g))) in theta.entries().iter().zip(grad.entries()).enumerate() {
        if mask.is_adaptable(i) {
            let d = g.scale(lr)?;
            next.push((name.clone(), t.sub(&d)?));
            delta.push((name.clone(), d));
        } else {
            next.push((name.clone(), t.clone()));
            delta.push((name.clone(), t.zeros_like()));
        }
    }
    Ok(ValueUpdate {
        next: ParamVector::new(next),
        delta: ParamVector::new(delta),
    })
}

/// Support loss as a graph node at the given bound parameters.
pub fn support_loss(
    model: &dyn Classifier,
    graph: &AdGraph,
    params: &BoundParams,
    support_x: &Var,
    support_y: &[usize],
) -> Result<Var> {
    let logits = model.forward(graph, params, support_x)?;
    mean_cross_entropy(&logits, support_y)
}

/// Support loss value without touching gradient state.
pub fn support_loss_value(
    model: &dyn Classifier,
    params: &ParamVector,
    support_x: &Tensor,
    support_y: &[usize],
) -> Result<f64> {
    let graph = AdGraph::new();
    let bound = params.bind(&graph, false);
    let x = graph.constant(support_x.clone());
    support_loss(model, &graph, &bound, &x, support_y)?.item()
}

pub(crate) struct TrackedStep {
    pub loss: f64,
    pub grad_values: ParamVector,
    /// Applied update vars; `None` at frozen entries.
    pub delta_vars: Vec<Option<Var>>,
    pub delta_values: ParamVector,
    pub next: BoundParams,
}

/// One differentiable inner step: support loss, per-step backward with graph
/// construction, masked update expressed in graph ops.
pub(crate) fn tracked_step(
    model: &dyn Classifier,
    graph: &AdGraph,
    current: &BoundParams,
    support_x: &Var,
    support_y: &[usize],
    lr: f64,
    mask: &InnerMask,
    step_index: usize,
) -> Result<TrackedStep> {
    let loss = support_loss(model, graph, current, support_x, support_y)?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { step: step_index });
    }
    let grads = loss.backward(true)?;

    let mut grad_vars: Vec<Var> = Vec::with_capacity(current.entries().len());
    let mut grad_entries = Vec::with_capacity(current.entries().len());
    for (name, p) in current.entries() {
        let g = match grads.get(p) {
            Some(g) => g.clone(),
            None => graph.constant(p.value().zeros_like()),
        };
        grad_entries.push((name.clone(), g.value()));
        grad_vars.push(g);
    }
    let grad_values = ParamVector::new(grad_entries);
    let norm = grad_values.norm();
    if !norm.is_finite() || norm > GRADIENT_NORM_BOUND {
        return Err(Error::GradientBlowup {
            step: step_index,
            norm,
            bound: GRADIENT_NORM_BOUND,
        });
    }

    let mut next_entries = Vec::with_capacity(current.entries().len());
    let mut delta_vars = Vec::with_capacity(current.entries().len());
    let mut delta_entries = Vec::with_capacity(current.entries().len());
    for (i, (name, p)) in current.entries().iter().enumerate() {
        if mask.is_adaptable(i) {
            let delta = grad_vars[i].scale(lr)?;
            next_entries.push((name.clone(), p.sub(&delta)?));
            delta_entries.push((name.clone(), delta.value()));
            delta_vars.push(Some(delta));
        } else {
            next_entries.push((name.clone(), p.clone()));
            delta_entries.push((name.clone(), p.value().zeros_like()));
            delta_vars.push(None);
        }
    }

    Ok(TrackedStep {
        loss: loss_value,
        grad_values,
        delta_vars,
        delta_values: ParamVector::new(delta_entries),
        next: BoundParams::new(next_entries),
    })
}

/// Differentiable inner loop: `cfg.steps()` updates with the unrolled graph
/// retained, so a later backward from any function of the returned parameters
/// reaches the initialization leaves through every step.
pub fn inner_adapt_tracked(
    model: &dyn Classifier,
    graph: &AdGraph,
    theta0: &BoundParams,
    support_x: &Var,
    support_y: &[usize],
    cfg: &InnerConfig,
) -> Result<(Trajectory, BoundParams)> {
    cfg.mask.check_covers(&theta0.values())?;
    let mut thetas = vec![theta0.values()];
    let mut grads = Vec::with_capacity(cfg.steps);
    let mut deltas = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut current = theta0.clone();

    for k in 0..cfg.steps {
        let step = tracked_step(model, graph, &current, support_x, support_y, cfg.lr, &cfg.mask, k)?;
        losses.push(step.loss);
        grads.push(step.grad_values);
        deltas.push(step.delta_values);
        thetas.push(step.next.values());
        current = step.next;
    }
    let final_loss = support_loss_value(model, &current.values(), &support_x.value(), support_y)?;
    losses.push(final_loss);

    Ok((
        Trajectory {
            thetas,
            grads,
            deltas,
            losses,
        },
        current,
    ))
}

/// Value-only inner loop. Arithmetic is identical to the tracked variant, so
/// the two produce bitwise-equal trajectories.
pub fn inner_adapt(
    model: &dyn Classifier,
    theta0: &ParamVector,
    support_x: &Tensor,
    support_y: &[usize],
    cfg: &InnerConfig,
) -> Result<Trajectory> {
    cfg.mask.check_covers(theta0)?;
    let mut thetas = vec![theta0.clone()];
    let mut grads = Vec::with_capacity(cfg.steps);
    let mut deltas = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps + 1);

    for k in 0..cfg.steps {
        let current = thetas.last().unwrap();
        let graph = AdGraph::new();
        let bound = current.bind(&graph, true);
        let x = graph.constant(support_x.clone());
        let loss = support_loss(model, &graph, &bound, &x, support_y)?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step: k });
        }
        let map = loss.backward(false)?;
        let grad = bound.grads(&map);
        let norm = grad.norm();
        if !norm.is_finite() || norm > GRADIENT_NORM_BOUND {
            return Err(Error::GradientBlowup {
                step: k,
                norm,
                bound: GRADIENT_NORM_BOUND,
            });
        }
        losses.push(loss_value);
        let update = apply_update_values(current, &grad, cfg.lr, &cfg.mask)?;
        grads.push(grad);
        deltas.push(update.delta);
        thetas.push(update.next);
    }
    let final_loss =
        support_loss_value(model, thetas.last().unwrap(), support_x, support_y)?;
    losses.push(final_loss);

    Ok(Trajectory {
        thetas,
        grads,
        deltas,
        losses,
    })
}
