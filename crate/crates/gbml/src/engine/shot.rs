//! Trajectory-distance regularization: a slow reference trajectory and a fast
//! target trajectory from the same start and support set, plus the distance
//! between their endpoints.
//!
//! The reference runs `R` steps at the reference rate, the target runs
//! `T < R` steps at the target rate, and the rates are tied by
//! `lr_target * T == lr_reference * R` so both trajectories transport the
//! same total first-order step budget. When `T == 1` the target's single step
//! reuses the reference's first-step gradient, scaled by `R` — no extra
//! backward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdGraph, Var};
use crate::error::{Error, Result};
use crate::models::{log_softmax_rows, mean_kl_rows, softmax_rows, Classifier, InnerMask, Projector};
use crate::params::BoundParams;
use crate::tensor::Tensor;

use super::inner::{inner_adapt_tracked, tracked_step, InnerConfig, Trajectory};

/// Endpoint distance used for the trajectory penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotMetric {
    /// KL(target distribution || reference distribution) over query points.
    Kl,
    /// Soft cross-entropy of the target distribution against the reference
    /// distribution, reported with the target's own entropy subtracted (as a
    /// detached baseline) so that identical endpoints score exactly zero.
    /// Gradients are identical to the raw soft cross-entropy.
    CrossEntropy,
    /// Squared parameter distance normalized by sqrt(parameter count);
    /// ignores query inputs.
    L2,
}

impl std::fmt::Display for ShotMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShotMetric::Kl => write!(f, "kl"),
            ShotMetric::CrossEntropy => write!(f, "cross_entropy"),
            ShotMetric::L2 => write!(f, "l2"),
        }
    }
}

/// How the penalty enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotVariant {
    /// Added to the outer task loss with weight lambda.
    Regularizer,
    /// Replaces the outer loss entirely during label-free pretraining.
    Pretrainer,
}

/// Finds `rate` with `rate * steps == budget` bit for bit, if one exists.
/// The quotient is within an ulp or two of any solution, so a short walk
/// suffices; the walk can also prove that no preimage exists (the image of
/// `x -> fl(x * steps)` may skip values when the product sits in the lower
/// half of a binade).
fn solve_rate(budget: f64, steps: usize) -> Option<f64> {
    let s = steps as f64;
    let mut rate = budget / s;
    let mut seen_low = false;
    let mut seen_high = false;
    for _ in 0..8 {
        let prod = rate * s;
        if prod == budget {
            return Some(rate);
        }
        if prod < budget {
            if seen_high {
                return None;
            }
            seen_low = true;
            rate = rate.next_up();
        } else {
            if seen_low {
                return None;
            }
            seen_high = true;
            rate = rate.next_down();
        }
    }
    None
}

/// Derives the counterpart rate so that the two step budgets agree bit for
/// bit. The primary rate may be adjusted by a few ulps when its own budget
/// has no exact counterpart — far below any numerical significance, and the
/// identity is worth the adjustment.
fn derive_rates(
    primary: f64,
    primary_steps: usize,
    other_steps: usize,
) -> Result<(f64, f64)> {
    if primary_steps == other_steps {
        return Ok((primary, primary));
    }
    let mut up = primary;
    let mut down = primary;
    for i in 0..32 {
        let candidate = if i % 2 == 0 { up } else { down };
        let budget = candidate * primary_steps as f64;
        if let Some(other) = solve_rate(budget, other_steps) {
            return Ok((candidate, other));
        }
        if i % 2 == 0 {
            up = up.next_up();
        } else {
            down = down.next_down();
        }
    }
    Err(Error::InvalidConfig {
        reason: format!(
            "cannot match step budgets for rate {primary} over {primary_steps} vs {other_steps} steps"
        ),
    })
}

/// Step counts, learning rates, penalty weight and metric for the
/// reference/target construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotConfig {
    t_steps: usize,
    r_steps: usize,
    lr_target: f64,
    lr_reference: f64,
    pub lambda: f64,
    pub metric: ShotMetric,
    pub variant: ShotVariant,
    pub detach_reference: bool,
}

impl ShotConfig {
    /// Builds a config from the reference rate (the baseline inner rate);
    /// the target rate is derived as `(R / T) * lr_reference` with the step
    /// budgets matched exactly.
    pub fn from_reference_lr(
        t_steps: usize,
        r_steps: usize,
        lr_reference: f64,
        lambda: f64,
        metric: ShotMetric,
        variant: ShotVariant,
    ) -> Result<Self> {
        Self::validate(t_steps, r_steps, lr_reference, lambda, false)?;
        let (lr_reference, lr_target) = derive_rates(lr_reference, r_steps, t_steps)?;
        Ok(ShotConfig {
            t_steps,
            r_steps,
            lr_target,
            lr_reference,
            lambda,
            metric,
            variant,
            detach_reference: true,
        })
    }

    /// Builds a config from the target rate; the reference rate is derived as
    /// `(T / R) * lr_target` with the step budgets matched exactly.
    pub fn from_target_lr(
        t_steps: usize,
        r_steps: usize,
        lr_target: f64,
        lambda: f64,
        metric: ShotMetric,
        variant: ShotVariant,
    ) -> Result<Self> {
        Self::validate(t_steps, r_steps, lr_target, lambda, false)?;
        let (lr_target, lr_reference) = derive_rates(lr_target, t_steps, r_steps)?;
        Ok(ShotConfig {
            t_steps,
            r_steps,
            lr_target,
            lr_reference,
            lambda,
            metric,
            variant,
            detach_reference: true,
        })
    }

    /// Test-only override with `T == R` and equal rates: the two trajectories
    /// coincide and the penalty must evaluate to exactly zero.
    pub fn equal_steps_for_testing(
        steps: usize,
        lr: f64,
        lambda: f64,
        metric: ShotMetric,
        variant: ShotVariant,
    ) -> Result<Self> {
        Self::validate(steps, steps, lr, lambda, true)?;
        Ok(ShotConfig {
            t_steps: steps,
            r_steps: steps,
            lr_target: lr,
            lr_reference: lr,
            lambda,
            metric,
            variant,
            detach_reference: true,
        })
    }

    fn validate(
        t_steps: usize,
        r_steps: usize,
        lr: f64,
        lambda: f64,
        allow_equal: bool,
    ) -> Result<()> {
        if t_steps == 0 || r_steps == 0 {
            return Err(Error::InvalidConfig {
                reason: "step counts must be positive".into(),
            });
        }
        if t_steps > r_steps || (t_steps == r_steps && !allow_equal) {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "target steps must be fewer than reference steps, got T={t_steps}, R={r_steps}"
                ),
            });
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig {
                reason: format!("learning rate must be positive, got {lr}"),
            });
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig {
                reason: format!("lambda must be non-negative, got {lambda}"),
            });
        }
        Ok(())
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn r_steps(&self) -> usize {
        self.r_steps
    }

    pub fn lr_target(&self) -> f64 {
        self.lr_target
    }

    pub fn lr_reference(&self) -> f64 {
        self.lr_reference
    }

    /// Total first-order transport of the target trajectory.
    pub fn budget_target(&self) -> f64 {
        self.lr_target * self.t_steps as f64
    }

    /// Total first-order transport of the reference trajectory.
    pub fn budget_reference(&self) -> f64 {
        self.lr_reference * self.r_steps as f64
    }

    pub fn reference_inner_config(&self, mask: InnerMask) -> Result<InnerConfig> {
        InnerConfig::new(self.r_steps, self.lr_reference, mask)
    }

    pub fn target_inner_config(&self, mask: InnerMask) -> Result<InnerConfig> {
        InnerConfig::new(self.t_steps, self.lr_target, mask)
    }
}

/// The two trajectories the penalty compares, still live in their graph.
pub struct RefTargetPair {
    pub reference: Trajectory,
    pub reference_end: BoundParams,
    pub target: Trajectory,
    pub target_end: BoundParams,
    /// Whether the target's step reused the reference's first gradient.
    pub shared_gradient: bool,
}

/// Runs both trajectories from the same bound start on the same support set.
///
/// With `T == 1` the target's single update is the reference's first update
/// scaled by `R`, reusing the already-computed gradient.
pub fn build_reference_and_target(
    model: &dyn Classifier,
    graph: &AdGraph,
    theta0: &BoundParams,
    support_x: &Var,
    support_y: &[usize],
    cfg: &ShotConfig,
    mask: &InnerMask,
) -> Result<RefTargetPair> {
    let theta0_values = theta0.values();
    mask.check_covers(&theta0_values)?;

    if cfg.t_steps == 1 && cfg.r_steps > 1 {
        // First reference step; its gradient is shared with the target.
        let first = tracked_step(
            model,
            graph,
            theta0,
            support_x,
            support_y,
            cfg.lr_reference,
            mask,
            0,
        )?;

        // Target step: scale the reference's applied update by R.
        let scale = cfg.r_steps as f64;
        let mut target_entries = Vec::with_capacity(theta0.entries().len());
        let mut target_delta = Vec::with_capacity(theta0.entries().len());
        for (i, (name, p)) in theta0.entries().iter().enumerate() {
            match &first.delta_vars[i] {
                Some(ref_delta) => {
                    let delta = ref_delta.scale(scale)?;
                    target_entries.push((name.clone(), p.sub(&delta)?));
                    target_delta.push((name.clone(), delta.value()));
                }
                None => {
                    target_entries.push((name.clone(), p.clone()));
                    target_delta.push((name.clone(), p.value().zeros_like()));
                }
            }
        }
        let target_end = BoundParams::new(target_entries);
        let target_traj = Trajectory {
            thetas: vec![theta0_values.clone(), target_end.values()],
            grads: vec![first.grad_values.clone()],
            deltas: vec![crate::params::ParamVector::new(target_delta)],
            losses: vec![
                first.loss,
                super::inner::support_loss_value(
                    model,
                    &target_end.values(),
                    &support_x.value(),
                    support_y,
                )?,
            ],
        };

        // Remaining reference steps.
        let mut ref_thetas = vec![theta0_values, first.next.values()];
        let mut ref_grads = vec![first.grad_values];
        let mut ref_deltas = vec![first.delta_values];
        let mut ref_losses = vec![first.loss];
        let mut current = first.next;
        for k in 1..cfg.r_steps {
            let step = tracked_step(
                model,
                graph,
                &current,
                support_x,
                support_y,
                cfg.lr_reference,
                mask,
                k,
            )?;
            ref_losses.push(step.loss);
            ref_grads.push(step.grad_values);
            ref_deltas.push(step.delta_values);
            ref_thetas.push(step.next.values());
            current = step.next;
        }
        ref_losses.push(super::inner::support_loss_value(
            model,
            &current.values(),
            &support_x.value(),
            support_y,
        )?);

        return Ok(RefTargetPair {
            reference: Trajectory {
                thetas: ref_thetas,
                grads: ref_grads,
                deltas: ref_deltas,
                losses: ref_losses,
            },
            reference_end: current,
            target: target_traj,
            target_end,
            shared_gradient: true,
        });
    }

    let ref_cfg = cfg.reference_inner_config(mask.clone())?;
    let (reference, reference_end) =
        inner_adapt_tracked(model, graph, theta0, support_x, support_y, &ref_cfg)?;
    let tgt_cfg = cfg.target_inner_config(mask.clone())?;
    let (target, target_end) =
        inner_adapt_tracked(model, graph, theta0, support_x, support_y, &tgt_cfg)?;
    Ok(RefTargetPair {
        reference,
        reference_end,
        target,
        target_end,
        shared_gradient: false,
    })
}

/// Endpoint distance as a graph node.
///
/// KL and cross-entropy compare the two models' predictive distributions over
/// the query inputs; L2 compares parameters directly and ignores the queries.
/// With `detach_reference` no gradient flows into the reference branch.
pub fn shot_loss(
    graph: &AdGraph,
    model: &dyn Classifier,
    target_end: &BoundParams,
    reference_end: &BoundParams,
    query_inputs: Option<&Tensor>,
    metric: ShotMetric,
    detach_reference: bool,
) -> Result<Var> {
    shot_loss_with(
        graph,
        model,
        target_end,
        reference_end,
        query_inputs,
        metric,
        detach_reference,
        None,
    )
}

/// As [`shot_loss`], with an optional projector on the reference branch
/// (used by label-free pretraining).
#[allow(clippy::too_many_arguments)]
pub(crate) fn shot_loss_with(
    graph: &AdGraph,
    model: &dyn Classifier,
    target_end: &BoundParams,
    reference_end: &BoundParams,
    query_inputs: Option<&Tensor>,
    metric: ShotMetric,
    detach_reference: bool,
    reference_projector: Option<&Projector>,
) -> Result<Var> {
    match metric {
        ShotMetric::L2 => {
            let reference = if detach_reference {
                reference_end.detach_all()
            } else {
                reference_end.clone()
            };
            let mut total: Option<Var> = None;
            let mut count = 0usize;
            for ((_, t), (_, r)) in target_end.entries().iter().zip(reference.entries()) {
                count += t.value().len();
                let d = t.sub(r)?;
                let term = d.mul(&d)?.sum()?;
                total = Some(match total {
                    Some(acc) => acc.add(&term)?,
                    None => term,
                });
            }
            let total = total.ok_or(Error::EmptyInput { op: "shot_loss" })?;
            total.scale(1.0 / (count as f64).sqrt())
        }
        ShotMetric::Kl | ShotMetric::CrossEntropy => {
            let query = query_inputs.ok_or(Error::InvalidConfig {
                reason: "kl/cross_entropy metrics need at least one query input".into(),
            })?;
            if query.shape().first().copied().unwrap_or(0) == 0 {
                return Err(Error::InvalidConfig {
                    reason: "kl/cross_entropy metrics need at least one query input".into(),
                });
            }
            let qx = graph.constant(query.clone());
            let t_logits = model.forward(graph, target_end, &qx)?;
            let ref_params = if detach_reference {
                reference_end.detach_all()
            } else {
                reference_end.clone()
            };
            let mut r_logits = model.forward(graph, &ref_params, &qx)?;
            if let Some(projector) = reference_projector {
                r_logits = projector.apply(graph, &r_logits)?;
            }
            match metric {
                ShotMetric::Kl => mean_kl_rows(&t_logits, &r_logits),
                ShotMetric::CrossEntropy => {
                    let n = query.shape()[0] as f64;
                    let p = softmax_rows(&t_logits)?;
                    let lq = log_softmax_rows(&r_logits)?;
                    let raw = p.mul(&lq)?.sum()?.scale(-1.0 / n)?;
                    // entropy of the target distribution enters as a detached
                    // baseline: zero gradient, and the penalty bottoms out at
                    // exactly zero when the branches agree
                    let p_const = p.detach();
                    let lp_const = log_softmax_rows(&t_logits)?.detach();
                    let baseline = p_const.mul(&lp_const)?.sum()?.scale(-1.0 / n)?;
                    raw.sub(&baseline)
                }
                ShotMetric::L2 => unreachable!(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{InnerMask, MlpModel};
    use crate::rng::SplitRng;
    use crate::tasks::{sample_episode, ClassPool, PoolSpec, Split};

    fn setup() -> (MlpModel, crate::params::ParamVector, crate::tasks::Episode) {
        let mut rng = SplitRng::from_seed(21);
        let spec = PoolSpec {
            train_classes: 10,
            val_classes: 2,
            test_classes: 2,
            dim: 6,
            ..PoolSpec::default()
        };
        let pool = ClassPool::generate(&spec, &mut rng.split("pool")).unwrap();
        let ep = sample_episode(&pool, Split::Train, 3, 2, 3, &mut rng.split("ep")).unwrap();
        let model = MlpModel::new(vec![6, 8, 3]).unwrap();
        let theta0 = model.init_params(&mut rng.split("init"));
        (model, theta0, ep)
    }

    #[test]
    fn lr_budget_identity_is_exact() {
        for (t, r) in [(1usize, 3usize), (1, 2), (3, 6), (2, 5), (2, 7)] {
            for lr in [0.5, 0.1, 1e-3, 0.3333333333333333, 0.7] {
                let cfg = ShotConfig::from_reference_lr(
                    t,
                    r,
                    lr,
                    0.1,
                    ShotMetric::Kl,
                    ShotVariant::Regularizer,
                )
                .unwrap();
                assert_eq!(
                    cfg.budget_target().to_bits(),
                    cfg.budget_reference().to_bits(),
                    "budget mismatch at T={t}, R={r}, lr={lr}"
                );
                let cfg2 = ShotConfig::from_target_lr(
                    t,
                    r,
                    lr,
                    0.1,
                    ShotMetric::Kl,
                    ShotVariant::Regularizer,
                )
                .unwrap();
                assert_eq!(
                    cfg2.budget_target().to_bits(),
                    cfg2.budget_reference().to_bits()
                );
            }
        }
    }

    #[test]
    fn default_scaling_matches_ratio() {
        // alpha_r = (T / R) * alpha_t
        let cfg = ShotConfig::from_target_lr(
            1,
            3,
            0.5,
            0.1,
            ShotMetric::Kl,
            ShotVariant::Regularizer,
        )
        .unwrap();
        assert!((cfg.lr_reference() - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn t_not_less_than_r_is_rejected() {
        assert!(ShotConfig::from_reference_lr(
            3,
            3,
            0.5,
            0.1,
            ShotMetric::Kl,
            ShotVariant::Regularizer
        )
        .is_err());
        assert!(ShotConfig::from_reference_lr(
            4,
            3,
            0.5,
            0.1,
            ShotMetric::Kl,
            ShotVariant::Regularizer
        )
        .is_err());
    }

    #[test]
    fn shared_gradient_fast_path_identity() {
        let (model, theta0, ep) = setup();
        let cfg = ShotConfig::from_reference_lr(
            1,
            3,
            0.2,
            0.1,
            ShotMetric::Kl,
            ShotVariant::Regularizer,
        )
        .unwrap();
        let mask = InnerMask::all_adaptable(&theta0);
        let graph = AdGraph::new();
        let bound = theta0.bind(&graph, true);
        let sx = graph.constant(ep.support_x.clone());
        let pair =
            build_reference_and_target(&model, &graph, &bound, &sx, &ep.support_y, &cfg, &mask)
                .unwrap();
        assert!(pair.shared_gradient);
        // shared gradient: identical bits
        assert!(pair.target.grads[0].bitwise_eq(&pair.reference.grads[0]));
        // the target's step is R times the reference's first step
        let scaled = pair.reference.deltas[0]
            .entries()
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.scale(3.0)?)))
            .collect::<Result<Vec<_>>>()
            .map(crate::params::ParamVector::new)
            .unwrap();
        assert!(pair.target.deltas[0].bitwise_eq(&scaled));
    }

    #[test]
    fn equal_steps_override_gives_zero_for_all_metrics() {
        let (model, theta0, ep) = setup();
        let mask = InnerMask::all_adaptable(&theta0);
        for metric in [ShotMetric::Kl, ShotMetric::CrossEntropy, ShotMetric::L2] {
            let cfg = ShotConfig::equal_steps_for_testing(
                2,
                0.3,
                0.1,
                metric,
                ShotVariant::Regularizer,
            )
            .unwrap();
            let graph = AdGraph::new();
            let bound = theta0.bind(&graph, true);
            let sx = graph.constant(ep.support_x.clone());
            let pair = build_reference_and_target(
                &model, &graph, &bound, &sx, &ep.support_y, &cfg, &mask,
            )
            .unwrap();
            let loss = shot_loss(
                &graph,
                &model,
                &pair.target_end,
                &pair.reference_end,
                Some(&ep.query_x),
                metric,
                true,
            )
            .unwrap();
            assert_eq!(loss.item().unwrap(), 0.0, "metric {metric}");
        }
    }

    #[test]
    fn l2_metric_hand_value_and_kl_nonnegative() {
        let (model, theta0, ep) = setup();

        // L2 on hand-built endpoints: difference of all-ones over 4 params
        let graph = AdGraph::new();
        let t_end = crate::params::ParamVector::new(vec![(
            "w".into(),
            Tensor::ones(&[2, 2]),
        )])
        .bind(&graph, true);
        let r_end = crate::params::ParamVector::new(vec![(
            "w".into(),
            Tensor::zeros(&[2, 2]),
        )])
        .bind(&graph, false);
        let lin = crate::models::LinearModel::new(2, 2).unwrap();
        let loss = shot_loss(&graph, &lin, &t_end, &r_end, None, ShotMetric::L2, true).unwrap();
        assert_eq!(loss.item().unwrap(), 2.0);

        // KL non-negative over random endpoint pairs
        let mut rng = SplitRng::from_seed(33);
        for _ in 0..200 {
            let graph = AdGraph::new();
            let a = model.init_params(&mut rng).bind(&graph, true);
            let b = model.init_params(&mut rng).bind(&graph, false);
            let kl = shot_loss(
                &graph,
                &model,
                &a,
                &b,
                Some(&ep.query_x),
                ShotMetric::Kl,
                true,
            )
            .unwrap();
            assert!(kl.item().unwrap() >= -1e-12);
        }
        let _ = theta0;
    }

    #[test]
    fn kl_without_queries_is_error() {
        let (model, theta0, _) = setup();
        let graph = AdGraph::new();
        let a = theta0.bind(&graph, true);
        let b = theta0.bind(&graph, false);
        assert!(shot_loss(&graph, &model, &a, &b, None, ShotMetric::Kl, true).is_err());
    }
}
