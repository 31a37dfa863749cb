//! Differentiable objectives over parameter vectors, plus gradient and
//! Hessian-vector-product drivers built on them.

use crate::autodiff::{AdGraph, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamVector};

/// A scalar loss expressed as a graph computation over bound parameters.
///
/// Implementors only describe the forward computation; gradients, HVPs and
/// the line-scan diagnostics all reuse the same description.
pub trait LossFn {
    fn loss(&self, graph: &AdGraph, theta: &BoundParams) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&AdGraph, &BoundParams) -> Result<Var>,
{
    fn loss(&self, graph: &AdGraph, theta: &BoundParams) -> Result<Var> {
        self(graph, theta)
    }
}

/// Loss value at `theta`.
pub fn loss_value(f: &dyn LossFn, theta: &ParamVector) -> Result<f64> {
    let graph = AdGraph::new();
    let bound = theta.bind(&graph, false);
    f.loss(&graph, &bound)?.item()
}

/// Gradient of `f` at `theta` by reverse-mode AD.
pub fn grad(f: &dyn LossFn, theta: &ParamVector) -> Result<ParamVector> {
    let graph = AdGraph::new();
    let bound = theta.bind(&graph, true);
    let loss = f.loss(&graph, &bound)?;
    let grads = loss.backward(false)?;
    Ok(bound.grads(&grads))
}

/// How to form a Hessian-vector product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpMode {
    /// Double backward: differentiate `<grad L, v>` a second time.
    Exact,
    /// Central finite difference of the gradient along `v`.
    FiniteDifference,
}

/// `H(theta) · v` for the loss `f`.
///
/// Exact mode differentiates the inner product of the first-order gradient
/// with `v`; finite-difference mode evaluates
/// `(grad(theta + eps v) - grad(theta - eps v)) / (2 eps)` with
/// `eps = 1e-4 * (1 + max|theta|)`.
pub fn hvp(
    f: &dyn LossFn,
    theta: &ParamVector,
    v: &ParamVector,
    mode: HvpMode,
) -> Result<ParamVector> {
    if v.total_len() != theta.total_len() {
        return Err(Error::LengthMismatch {
            expected: theta.total_len(),
            got: v.total_len(),
        });
    }
    let result = match mode {
        HvpMode::Exact => hvp_exact(f, theta, v),
        HvpMode::FiniteDifference => hvp_fd(f, theta, v),
    }?;
    if result.all_finite() {
        Ok(result)
    } else {
        Err(Error::HvpNonFinite {
            mode: match mode {
                HvpMode::Exact => "exact",
                HvpMode::FiniteDifference => "fd",
            },
        })
    }
}

fn hvp_exact(f: &dyn LossFn, theta: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let graph = AdGraph::new();
    let bound = theta.bind(&graph, true);
    let loss = f.loss(&graph, &bound)?;
    let grads = loss.backward(true)?;

    // s = <grad L, v>, with v entering as constants
    let mut dot: Option<Var> = None;
    for ((_, p), (_, vt)) in bound.entries().iter().zip(v.entries()) {
        let g = match grads.get(p) {
            Some(g) => g.clone(),
            None => graph.constant(p.value().zeros_like()),
        };
        let term = g.mul(&graph.constant(vt.clone()))?.sum()?;
        dot = Some(match dot {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let dot = dot.unwrap_or_else(|| graph.scalar(0.0));
    if !dot.requires_grad() {
        // v = 0 or a gradient-free loss: Hv is identically zero
        return Ok(theta.zeros_like());
    }
    let second = dot.backward(false)?;
    Ok(bound.grads(&second))
}

fn hvp_fd(f: &dyn LossFn, theta: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    let eps = 1e-4 * (1.0 + theta.max_abs());
    let plus = grad(f, &theta.add_scaled(v, eps)?)?;
    let minus = grad(f, &theta.add_scaled(v, -eps)?)?;
    plus.sub(&minus)?
        .entries()
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.scale(1.0 / (2.0 * eps))?)))
        .collect::<Result<Vec<_>>>()
        .map(ParamVector::new)
}
