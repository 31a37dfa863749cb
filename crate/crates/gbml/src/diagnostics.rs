//! Instruments for inspecting what the inner loop actually does: the
//! loss-decrease integrand and its quadratic testbed, the trajectory cosine
//! statistic, the prototype-classifier oracle for linear models, loss-surface
//! line scans, and curvature-along-gradient ratios.

use crate::autodiff::{AdGraph, Var};
use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::models::{argmax, softmax};
use crate::objective::{grad, hvp, loss_value, HvpMode, LossFn};
use crate::params::{BoundParams, ParamVector};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// `L(theta) = 1/2 theta' A theta + b' theta` with symmetric positive
/// semi-definite `A`. Gradient and Hessian are available in closed form, so
/// every first- and second-order code path can be checked exactly.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    a: Tensor,
    b: Tensor,
    dim: usize,
}

impl QuadraticLoss {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let shape = a.shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::BadShape {
                op: "QuadraticLoss::new",
                expected: "square matrix",
                got: shape,
            });
        }
        let dim = shape[0];
        if b.shape() != [dim, 1] {
            return Err(Error::BadShape {
                op: "QuadraticLoss::new",
                expected: "[dim, 1] offset vector",
                got: b.shape().to_vec(),
            });
        }
        for i in 0..dim {
            for j in 0..dim {
                if a.at(i, j) != a.at(j, i) {
                    return Err(Error::InvalidConfig {
                        reason: format!("matrix is not symmetric at ({i}, {j})"),
                    });
                }
            }
        }
        Ok(QuadraticLoss { a, b, dim })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut a = Tensor::zeros(&[n, n]);
        for (i, d) in diag.iter().enumerate() {
            a.data_mut()[i * n + i] = *d;
        }
        QuadraticLoss::new(a, Tensor::zeros(&[n, 1]))
    }

    /// Random SPD instance: `M'M / dim + diag(0.1..1.1)`.
    pub fn random_spd(dim: usize, rng: &mut SplitRng) -> Result<Self> {
        use rand::Rng;
        let m = Tensor::new(
            vec![dim, dim],
            (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let mut a = m.transpose()?.matmul(&m)?.scale(1.0 / dim as f64)?;
        for i in 0..dim {
            a.data_mut()[i * dim + i] += rng.gen_range(0.1..1.1);
        }
        // exact symmetry under floating point: mirror the lower triangle
        for i in 0..dim {
            for j in 0..i {
                let v = a.at(i, j);
                a.data_mut()[j * dim + i] = v;
            }
        }
        let b = Tensor::new(
            vec![dim, 1],
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        QuadraticLoss::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    /// Parameter template: one `[dim, 1]` entry named `theta`.
    pub fn theta(&self, values: &[f64]) -> Result<ParamVector> {
        if values.len() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        Ok(ParamVector::new(vec![(
            "theta".into(),
            Tensor::new(vec![self.dim, 1], values.to_vec())?,
        )]))
    }

    /// Closed-form gradient `A theta + b`.
    pub fn grad_exact(&self, theta: &ParamVector) -> Result<ParamVector> {
        let t = theta.entries()[0].1.clone();
        let g = self.a.matmul(&t)?.add(&self.b)?;
        Ok(ParamVector::new(vec![("theta".into(), g)]))
    }
}

impl LossFn for QuadraticLoss {
    fn loss(&self, graph: &AdGraph, theta: &BoundParams) -> Result<Var> {
        let t = theta.get("theta").ok_or(Error::InvalidConfig {
            reason: "quadratic loss expects a `theta` entry".into(),
        })?;
        let a = graph.constant(self.a.clone());
        let b = graph.constant(self.b.clone());
        let at = a.matmul(t)?;
        let quad = t.transpose()?.matmul(&at)?.sum()?.scale(0.5)?;
        let lin = b.mul(t)?.sum()?;
        quad.add(&lin)
    }
}

/// What one gradient step does to the loss, measured three ways: the exact
/// loss change, the line integral of the gradient along the step segment, and
/// the curvature correction at the step's start.
#[derive(Debug, Clone)]
pub struct IntegrandReport {
    /// Squared gradient norm at the step's start.
    pub g_norm_sq: f64,
    /// Curvature felt along the gradient: `g' H g`.
    pub ghg: f64,
    /// Trapezoid estimate of the gradient line integral over the segment.
    pub integral_estimate: f64,
    /// `L(theta - alpha g) - L(theta)`.
    pub loss_delta: f64,
    /// Whether the integral is positive, i.e. the step decreases the loss.
    pub positive: bool,
    /// Richardson error proxy: |I_M - I_{2M-1}|. Zero on quadratics.
    pub quadrature_error: f64,
}

fn trapezoid_integral(
    f: &dyn LossFn,
    theta: &ParamVector,
    g: &ParamVector,
    alpha: f64,
    points: usize,
) -> Result<f64> {
    let m = points.max(2);
    let dt = 1.0 / (m - 1) as f64;
    let mut acc = 0.0;
    for i in 0..m {
        let t = i as f64 * dt;
        let shifted = theta.add_scaled(g, -alpha * t)?;
        let gt = grad(f, &shifted).map_err(|e| match e {
            Error::NonFinite { .. } => Error::SegmentNonFinite { t },
            other => other,
        })?;
        let h = gt.dot(g)?;
        if !h.is_finite() {
            return Err(Error::SegmentNonFinite { t });
        }
        let w = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
        acc += w * h;
    }
    Ok(acc * dt)
}

/// Evaluates the loss-decrease integrand for one gradient step of size
/// `alpha` starting at `theta_k`, with an `quad_points`-point trapezoid rule
/// along the straight segment to `theta_k - alpha g`.
pub fn integrand_report(
    f: &dyn LossFn,
    theta_k: &ParamVector,
    alpha: f64,
    quad_points: usize,
) -> Result<IntegrandReport> {
    if quad_points < 2 {
        return Err(Error::InvalidConfig {
            reason: "quadrature needs at least two points".into(),
        });
    }
    let g = grad(f, theta_k)?;
    let g_norm_sq = g.norm_sq();
    let hg = hvp(f, theta_k, &g, HvpMode::Exact)?;
    let ghg = g.dot(&hg)?;

    let integral_estimate = trapezoid_integral(f, theta_k, &g, alpha, quad_points)?;
    let refined = trapezoid_integral(f, theta_k, &g, alpha, 2 * quad_points - 1)?;
    let quadrature_error = (integral_estimate - refined).abs();

    let end = theta_k.add_scaled(&g, -alpha)?;
    let loss_delta = loss_value(f, &end)? - loss_value(f, theta_k)?;

    Ok(IntegrandReport {
        g_norm_sq,
        ghg,
        integral_estimate,
        loss_delta,
        positive: integral_estimate > 0.0,
        quadrature_error,
    })
}

/// Mean cosine between the overall parameter movement and each step's
/// direction (the negative gradient).
pub fn cosine_diagnostic(trajectory: &Trajectory) -> Result<f64> {
    if trajectory.steps() == 0 {
        return Err(Error::DegenerateTrajectory {
            reason: "cosine statistic needs at least one step".into(),
        });
    }
    let overall = trajectory.end().sub(trajectory.start())?;
    let overall_norm = overall.norm();
    if overall_norm == 0.0 {
        return Err(Error::DegenerateTrajectory {
            reason: "overall parameter difference has zero norm".into(),
        });
    }
    let mut acc = 0.0;
    for g in &trajectory.grads {
        let g_norm = g.norm();
        if g_norm == 0.0 {
            return Err(Error::DegenerateTrajectory {
                reason: "zero-norm gradient in trajectory".into(),
            });
        }
        // cos(theta_T - theta_0, -g)
        acc += -overall.dot(g)? / (overall_norm * g_norm);
    }
    Ok(acc / trajectory.steps() as f64)
}

/// Curvature felt along the gradient at one trajectory step.
#[derive(Debug, Clone, Copy)]
pub struct CurvatureRatio {
    /// `g' H g / ||g||^2`; zero when flagged degenerate.
    pub ratio: f64,
    /// Set when the step gradient had zero norm.
    pub zero_gradient: bool,
}

/// Per-step normalized curvature-along-gradient ratios over a recorded
/// trajectory. This is the quantity the trajectory penalty suppresses.
pub fn hessian_effect_along_traj(
    trajectory: &Trajectory,
    f: &dyn LossFn,
) -> Result<Vec<CurvatureRatio>> {
    let mut out = Vec::with_capacity(trajectory.steps());
    for k in 0..trajectory.steps() {
        let g = &trajectory.grads[k];
        let g_norm_sq = g.norm_sq();
        if g_norm_sq == 0.0 {
            out.push(CurvatureRatio {
                ratio: 0.0,
                zero_gradient: true,
            });
            continue;
        }
        let hg = hvp(f, &trajectory.thetas[k], g, HvpMode::Exact)?;
        out.push(CurvatureRatio {
            ratio: g.dot(&hg)? / g_norm_sq,
            zero_gradient: false,
        });
    }
    Ok(out)
}

/// A one-dimensional slice of the loss surface.
#[derive(Debug, Clone)]
pub struct SurfaceScan {
    pub offsets: Vec<f64>,
    /// Loss at each offset; `None` marks a non-finite evaluation (recorded as
    /// a gap, not an abort).
    pub losses: Vec<Option<f64>>,
    /// Mean squared second difference over gap-free triples.
    pub roughness: f64,
}

/// Losses at `theta + s * direction_hat` for `samples` evenly spaced offsets
/// in `[-half_width, half_width]`.
pub fn surface_scan(
    f: &dyn LossFn,
    theta: &ParamVector,
    direction: &ParamVector,
    half_width: f64,
    samples: usize,
) -> Result<SurfaceScan> {
    if samples < 3 {
        return Err(Error::InvalidConfig {
            reason: "surface scan needs at least three samples".into(),
        });
    }
    let norm = direction.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateTrajectory {
            reason: "scan direction has zero norm".into(),
        });
    }
    let unit = direction.entries().iter().map(|(n, t)| {
        t.scale(1.0 / norm).map(|t| (n.clone(), t))
    }).collect::<Result<Vec<_>>>()?;
    let unit = ParamVector::new(unit);

    // offsets built around the exact midpoint so an odd sample count hits
    // zero exactly and the center loss equals L(theta) bit for bit
    let mid = (samples - 1) as f64 / 2.0;
    let step = half_width / mid;
    let mut offsets = Vec::with_capacity(samples);
    let mut losses = Vec::with_capacity(samples);
    for i in 0..samples {
        let s = (i as f64 - mid) * step;
        offsets.push(s);
        let point = theta.add_scaled(&unit, s)?;
        match loss_value(f, &point) {
            Ok(v) if v.is_finite() => losses.push(Some(v)),
            Ok(_) | Err(Error::NonFinite { .. }) => losses.push(None),
            Err(e) => return Err(e),
        }
    }

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 1..samples - 1 {
        if let (Some(a), Some(b), Some(c)) = (losses[i - 1], losses[i], losses[i + 1]) {
            let second = a - 2.0 * b + c;
            acc += second * second;
            count += 1;
        }
    }
    let roughness = if count > 0 { acc / count as f64 } else { f64::NAN };

    Ok(SurfaceScan {
        offsets,
        losses,
        roughness,
    })
}

/// Nearest-prototype predictions for a linear model at a symmetric start.
///
/// Builds per-class prototype vectors from gradient weights at the start --
/// `beta = onehot(label) - softmax(logits)` per support sample -- and
/// classifies each query by the largest prototype inner product, lowest index
/// winning ties. With a symmetric start this reproduces one-step gradient
/// descent on the linear model exactly.
pub fn prototype_oracle(
    episode: &crate::tasks::Episode,
    phi: &dyn Fn(&[f64]) -> Vec<f64>,
    theta0: &ParamVector,
) -> Result<Vec<usize>> {
    let w = theta0.get("w").ok_or(Error::InvalidConfig {
        reason: "prototype oracle expects linear-model weights named `w`".into(),
    })?;
    if w.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "prototype_oracle",
            expected: "[feature_dim, classes] weights",
            got: w.shape().to_vec(),
        });
    }
    let classes = w.shape()[1];
    let feature_dim = w.shape()[0];
    for i in 0..feature_dim {
        let row = &w.data()[i * classes..(i + 1) * classes];
        if row.iter().any(|v| v.to_bits() != row[0].to_bits()) {
            return Err(Error::NonSymmetricInit {
                reason: format!("class weights differ in feature row {i}"),
            });
        }
    }

    let n_support = episode.support_y.len();
    let mut prototypes = vec![vec![0.0; feature_dim]; classes];
    for s in 0..n_support {
        let features = phi(episode.support_x.row(s));
        if features.len() != feature_dim {
            return Err(Error::LengthMismatch {
                expected: feature_dim,
                got: features.len(),
            });
        }
        let label = episode.support_y[s];
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
            });
        }
        // logits at the symmetric start, through the same feature map
        let mut logits = vec![0.0; classes];
        for (i, f) in features.iter().enumerate() {
            for c in 0..classes {
                logits[c] += w.data()[i * classes + c] * f;
            }
        }
        let probs = softmax(&Tensor::new(vec![classes], logits)?)?;
        for c in 0..classes {
            let beta = (if label == c { 1.0 } else { 0.0 }) - probs.data()[c];
            for (i, f) in features.iter().enumerate() {
                prototypes[c][i] += beta * f;
            }
        }
    }

    let mut predictions = Vec::with_capacity(episode.query_y.len());
    for q in 0..episode.query_x.shape()[0] {
        let features = phi(episode.query_x.row(q));
        let scores: Vec<f64> = prototypes
            .iter()
            .map(|v| v.iter().zip(&features).map(|(a, b)| a * b).sum())
            .collect();
        predictions.push(argmax(&scores));
    }
    Ok(predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::InnerMask;
    use crate::params::ParamVector;

    #[test]
    fn worked_quadratic_report() {
        // A = diag(2, 4), theta = (1, 1), alpha = 0.1:
        // g = (2, 4), ||g||^2 = 20, g'Ag = 72,
        // loss_delta = -alpha ||g||^2 + alpha^2/2 g'Ag = -1.64
        let q = QuadraticLoss::diagonal(&[2.0, 4.0]).unwrap();
        let theta = q.theta(&[1.0, 1.0]).unwrap();
        let report = integrand_report(&q, &theta, 0.1, 33).unwrap();
        assert!((report.g_norm_sq - 20.0).abs() < 1e-12);
        assert!((report.ghg - 72.0).abs() < 1e-12);
        assert!((report.loss_delta + 1.64).abs() < 1e-12);
        // closed form of the integral on quadratics
        let expect = report.g_norm_sq - 0.05 * report.ghg;
        assert!((report.integral_estimate - expect).abs() < 1e-10);
        // fundamental theorem: delta = -alpha * integral
        assert!((report.loss_delta + 0.1 * report.integral_estimate).abs() < 1e-10);
        assert!(report.quadrature_error < 1e-10);
        assert!(report.positive);
    }

    #[test]
    fn linear_loss_has_constant_integrand() {
        // A = 0: integrand is constantly ||g||^2 and delta = -alpha ||g||^2
        let q = QuadraticLoss::new(
            Tensor::zeros(&[2, 2]),
            Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap(),
        )
        .unwrap();
        let theta = q.theta(&[0.4, 0.2]).unwrap();
        let report = integrand_report(&q, &theta, 0.25, 5).unwrap();
        assert!((report.ghg).abs() < 1e-14);
        assert!((report.integral_estimate - report.g_norm_sq).abs() < 1e-12);
        assert!((report.loss_delta + 0.25 * report.g_norm_sq).abs() < 1e-12);
    }

    #[test]
    fn sign_flip_at_closed_form_threshold() {
        // loss increases once alpha > 2 ||g||^2 / g'Ag = 5/9 on the worked example
        let q = QuadraticLoss::diagonal(&[2.0, 4.0]).unwrap();
        let theta = q.theta(&[1.0, 1.0]).unwrap();
        let threshold: f64 = 5.0 / 9.0;
        let below = integrand_report(&q, &theta, threshold * (1.0 - 1e-9), 9).unwrap();
        let above = integrand_report(&q, &theta, threshold * (1.0 + 1e-9), 9).unwrap();
        assert!(below.positive);
        assert!(!above.positive);
        assert!(below.loss_delta < 0.0);
        assert!(above.loss_delta > 0.0);
    }

    fn hand_trajectory(grads: Vec<Vec<f64>>, alpha: f64) -> Trajectory {
        let dim = grads[0].len();
        let template = ParamVector::new(vec![(
            "t".into(),
            Tensor::zeros(&[dim]),
        )]);
        let mut thetas = vec![template.clone()];
        let mut gvecs = Vec::new();
        let mut deltas = Vec::new();
        for g in grads {
            let gv = ParamVector::new(vec![(
                "t".into(),
                Tensor::new(vec![dim], g).unwrap(),
            )]);
            let cur = thetas.last().unwrap().clone();
            let upd = crate::engine::apply_update_values(
                &cur,
                &gv,
                alpha,
                &InnerMask::all_adaptable(&template),
            )
            .unwrap();
            deltas.push(upd.delta);
            thetas.push(upd.next);
            gvecs.push(gv);
        }
        let steps = gvecs.len();
        Trajectory {
            thetas,
            grads: gvecs,
            deltas,
            losses: vec![0.0; steps + 1],
        }
    }

    #[test]
    fn cosine_single_step_is_one() {
        let traj = hand_trajectory(vec![vec![0.3, -0.7, 0.2]], 0.5);
        let c = cosine_diagnostic(&traj).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_two_step() {
        // e1 then e2 with equal norms: both angles are 45 degrees
        let traj = hand_trajectory(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.5);
        let c = cosine_diagnostic(&traj).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_gradient() {
        let traj = hand_trajectory(vec![vec![1.0, 0.0], vec![0.0, 0.0]], 0.5);
        assert!(cosine_diagnostic(&traj).is_err());
    }

    #[test]
    fn cosine_scale_invariance() {
        let a = hand_trajectory(vec![vec![0.2, 0.5], vec![-0.1, 0.4]], 0.3);
        let b = hand_trajectory(vec![vec![2.0, 5.0], vec![-1.0, 4.0]], 0.03);
        let ca = cosine_diagnostic(&a).unwrap();
        let cb = cosine_diagnostic(&b).unwrap();
        assert!((ca - cb).abs() < 1e-12);
    }

    #[test]
    fn curvature_ratio_worked_example() {
        let q = QuadraticLoss::diagonal(&[2.0, 4.0]).unwrap();
        let theta = q.theta(&[1.0, 1.0]).unwrap();
        let g = q.grad_exact(&theta).unwrap();
        let traj = Trajectory {
            thetas: vec![theta.clone(), theta.add_scaled(&g, -0.1).unwrap()],
            grads: vec![g],
            deltas: vec![theta.zeros_like()],
            losses: vec![0.0, 0.0],
        };
        let ratios = hessian_effect_along_traj(&traj, &q).unwrap();
        assert!((ratios[0].ratio - 3.6).abs() < 1e-12);
        assert!(!ratios[0].zero_gradient);
    }

    #[test]
    fn curvature_ratio_zero_for_linear_loss() {
        let q = QuadraticLoss::new(
            Tensor::zeros(&[2, 2]),
            Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let theta = q.theta(&[0.0, 0.0]).unwrap();
        let g = q.grad_exact(&theta).unwrap();
        let traj = Trajectory {
            thetas: vec![theta.clone(), theta.add_scaled(&g, -0.1).unwrap()],
            grads: vec![g],
            deltas: vec![theta.zeros_like()],
            losses: vec![0.0, 0.0],
        };
        let ratios = hessian_effect_along_traj(&traj, &q).unwrap();
        assert_eq!(ratios[0].ratio, 0.0);
    }

    #[test]
    fn scan_of_quadratic_is_exact_parabola() {
        let q = QuadraticLoss::diagonal(&[2.0, 4.0]).unwrap();
        let theta = q.theta(&[1.0, 1.0]).unwrap();
        let dir = q.theta(&[1.0, 0.5]).unwrap();
        let scan = surface_scan(&q, &theta, &dir, 1.0, 21).unwrap();
        // constant second differences (up to roundoff)
        let seconds: Vec<f64> = (1..20)
            .map(|i| {
                scan.losses[i - 1].unwrap() - 2.0 * scan.losses[i].unwrap()
                    + scan.losses[i + 1].unwrap()
            })
            .collect();
        for s in &seconds {
            assert!((s - seconds[0]).abs() < 1e-10);
        }
        // center sample is the untouched loss
        let center = scan.offsets.len() / 2;
        assert_eq!(scan.offsets[center], 0.0);
        let direct = loss_value(&q, &theta).unwrap();
        assert_eq!(scan.losses[center].unwrap().to_bits(), direct.to_bits());
    }

    #[test]
    fn scan_rejects_zero_direction_and_short_grids() {
        let q = QuadraticLoss::diagonal(&[1.0]).unwrap();
        let theta = q.theta(&[1.0]).unwrap();
        let zero = q.theta(&[0.0]).unwrap();
        assert!(surface_scan(&q, &theta, &zero, 1.0, 11).is_err());
        let dir = q.theta(&[1.0]).unwrap();
        assert!(surface_scan(&q, &theta, &dir, 1.0, 2).is_err());
    }

    #[test]
    fn prototype_oracle_hand_example() {
        // 2-way 1-shot, zero init, identity features:
        // x1 = (1, 0) class 0, x2 = (0, 1) class 1, query (0.9, 0.1)
        // beta = +-0.5, V0 = (0.5, -0.5), scores 0.4 vs -0.4 -> class 0
        let episode = crate::tasks::Episode {
            support_x: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            support_y: vec![0, 1],
            query_x: Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(),
            query_y: vec![0],
            pool_classes: vec![0, 1],
            label_perm: vec![0, 1],
        };
        let theta0 = ParamVector::new(vec![("w".into(), Tensor::zeros(&[2, 2]))]);
        let identity = |x: &[f64]| x.to_vec();
        let pred = prototype_oracle(&episode, &identity, &theta0).unwrap();
        assert_eq!(pred, vec![0]);
    }

    #[test]
    fn prototype_oracle_rejects_asymmetric_init() {
        let episode = crate::tasks::Episode {
            support_x: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            support_y: vec![0],
            query_x: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            query_y: vec![0],
            pool_classes: vec![0, 1],
            label_perm: vec![0, 1],
        };
        let theta0 = ParamVector::new(vec![(
            "w".into(),
            Tensor::from_rows(&[vec![0.1, 0.2], vec![0.0, 0.0]]).unwrap(),
        )]);
        let identity = |x: &[f64]| x.to_vec();
        assert!(matches!(
            prototype_oracle(&episode, &identity, &theta0),
            Err(Error::NonSymmetricInit { .. })
        ));
    }

    #[test]
    fn prototypes_approach_class_means_with_many_shots() {
        // tight clusters, many shots: prototype direction aligns with the
        // class mean direction
        let mut rng = SplitRng::from_seed(44);
        let spec = crate::tasks::PoolSpec {
            train_classes: 6,
            val_classes: 2,
            test_classes: 2,
            dim: 8,
            std: 0.05,
            ..crate::tasks::PoolSpec::default()
        };
        let pool = crate::tasks::ClassPool::generate(&spec, &mut rng.split("pool")).unwrap();
        let ep = crate::tasks::sample_episode(
            &pool,
            crate::tasks::Split::Train,
            2,
            64,
            1,
            &mut rng.split("ep"),
        )
        .unwrap();
        let theta0 = ParamVector::new(vec![("w".into(), Tensor::zeros(&[8, 2]))]);

        // rebuild the oracle's prototype for class 0 and compare against the
        // centered class mean
        let classes = 2;
        let mut proto = vec![0.0; 8];
        for s in 0..ep.support_y.len() {
            let beta = (if ep.support_y[s] == 0 { 1.0 } else { 0.0 }) - 1.0 / classes as f64;
            for (i, v) in ep.support_x.row(s).iter().enumerate() {
                proto[i] += beta * v;
            }
        }
        let mut mean0 = vec![0.0; 8];
        let mut mean1 = vec![0.0; 8];
        for s in 0..ep.support_y.len() {
            let target = if ep.support_y[s] == 0 { &mut mean0 } else { &mut mean1 };
            for (i, v) in ep.support_x.row(s).iter().enumerate() {
                target[i] += v / 64.0;
            }
        }
        let diff: Vec<f64> = mean0.iter().zip(&mean1).map(|(a, b)| a - b).collect();
        let dot: f64 = proto.iter().zip(&diff).map(|(a, b)| a * b).sum();
        let cos = dot
            / (proto.iter().map(|v| v * v).sum::<f64>().sqrt()
                * diff.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(cos > 0.99, "cosine to mean direction {cos}");
        let _ = theta0;
    }
}
