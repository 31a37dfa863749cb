//! Finite-difference oracles for the autodiff engine. The differencing code
//! below evaluates only loss *values* through the public API, so it stays
//! independent of the reverse-mode path it checks.

use gbml::engine::support_loss_value;
use gbml::models::MlpModel;
use gbml::objective::{grad, hvp, loss_value, HvpMode, LossFn};
use gbml::params::ParamVector;
use gbml::rng::SplitRng;
use gbml::tensor::Tensor;
use gbml::AdGraph;

use rand::Rng;

/// Central finite differences of `f` over every scalar of `theta`.
fn fd_grad(
    f: &dyn Fn(&ParamVector) -> f64,
    theta: &ParamVector,
    eps: f64,
) -> ParamVector {
    let flat = theta.flatten();
    let mut out = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += eps;
        let mut minus = flat.clone();
        minus[i] -= eps;
        let fp = f(&ParamVector::unflatten_like(theta, &plus).unwrap());
        let fm = f(&ParamVector::unflatten_like(theta, &minus).unwrap());
        out[i] = (fp - fm) / (2.0 * eps);
    }
    ParamVector::unflatten_like(theta, &out).unwrap()
}

fn rel_error(a: &ParamVector, b: &ParamVector) -> f64 {
    let diff = a.sub(b).unwrap().max_abs();
    diff / b.max_abs().max(1e-12)
}

struct SupportCe {
    model: MlpModel,
    x: Tensor,
    y: Vec<usize>,
}

impl LossFn for SupportCe {
    fn loss(&self, graph: &AdGraph, theta: &gbml::BoundParams) -> gbml::Result<gbml::Var> {
        let xv = graph.constant(self.x.clone());
        gbml::engine::support_loss(&self.model, graph, theta, &xv, &self.y)
    }
}

fn random_instance(rng: &mut SplitRng, dims: Vec<usize>, batch: usize) -> (SupportCe, ParamVector) {
    let model = MlpModel::new(dims.clone()).unwrap();
    let mut theta = model.init_params(rng);
    // random nonzero biases so every parameter participates
    let flat: Vec<f64> = theta
        .flatten()
        .iter()
        .map(|v| v + rng.gen_range(-0.05..0.05))
        .collect();
    theta = ParamVector::unflatten_like(&theta, &flat).unwrap();
    let d = dims[0];
    let classes = *dims.last().unwrap();
    let x = Tensor::new(
        vec![batch, d],
        (0..batch * d).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let y: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    (SupportCe { model, x, y }, theta)
}

#[test]
fn gradient_matches_finite_differences_on_100_random_mlps() {
    let mut rng = SplitRng::from_seed(1001);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let dims = match trial % 4 {
            0 => vec![3, 4, 2],
            1 => vec![5, 8, 3],
            2 => vec![4, 6, 6, 3],
            _ => vec![8, 16, 5], // 16*8 + 16 + 16*5 + 5 = 245 params
        };
        let (f, theta) = random_instance(&mut rng, dims, 6);
        let ad = grad(&f, &theta).unwrap();
        let fd = fd_grad(
            &|p: &ParamVector| support_loss_value(&f.model, p, &f.x, &f.y).unwrap(),
            &theta,
            1e-5,
        );
        let err = rel_error(&ad, &fd);
        worst = worst.max(err);
        assert!(err < 1e-5, "trial {trial}: relative error {err}");
    }
    println!("worst first-order rel error over 100 MLPs: {worst:.3e}");
}

#[test]
fn hvp_exact_matches_hvp_fd_on_random_mlps() {
    let mut rng = SplitRng::from_seed(1002);
    let mut worst: f64 = 0.0;
    for trial in 0..25 {
        let dims = match trial % 3 {
            0 => vec![4, 8, 3],
            1 => vec![6, 10, 4],
            _ => vec![8, 18, 5], // 8*18 + 18 + 18*5 + 5 = 257 params
        };
        let (f, theta) = random_instance(&mut rng, dims, 5);
        let v_flat: Vec<f64> = (0..theta.total_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let v = ParamVector::unflatten_like(&theta, &v_flat).unwrap();
        let exact = hvp(&f, &theta, &v, HvpMode::Exact).unwrap();
        let fd = hvp(&f, &theta, &v, HvpMode::FiniteDifference).unwrap();
        let err = exact.sub(&fd).unwrap().max_abs() / fd.max_abs().max(1e-12);
        worst = worst.max(err);
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
    println!("worst hvp rel error over 25 MLPs: {worst:.3e}");
}

#[test]
fn hvp_is_symmetric_in_probe_pairs() {
    // u' H v == v' H u for a smooth loss
    let mut rng = SplitRng::from_seed(1003);
    let (f, theta) = random_instance(&mut rng, vec![4, 7, 3], 5);
    for _ in 0..10 {
        let u_flat: Vec<f64> = (0..theta.total_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let v_flat: Vec<f64> = (0..theta.total_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let u = ParamVector::unflatten_like(&theta, &u_flat).unwrap();
        let v = ParamVector::unflatten_like(&theta, &v_flat).unwrap();
        let hu = hvp(&f, &theta, &u, HvpMode::Exact).unwrap();
        let hv = hvp(&f, &theta, &v, HvpMode::Exact).unwrap();
        let a = v.dot(&hu).unwrap();
        let b = u.dot(&hv).unwrap();
        assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn backward_values_are_deterministic_across_graph_rebuilds() {
    let mut rng = SplitRng::from_seed(1004);
    let (f, theta) = random_instance(&mut rng, vec![5, 9, 4], 6);
    let a = grad(&f, &theta).unwrap();
    let b = grad(&f, &theta).unwrap();
    assert!(a.bitwise_eq(&b));
    let la = loss_value(&f, &theta).unwrap();
    let lb = loss_value(&f, &theta).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
}

mod properties {
    use super::*;
    use gbml::models::{kl_div, softmax};
    use proptest::prelude::*;

    fn logits_strategy(len: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-bound..bound, len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn softmax_sums_to_one_even_for_large_logits(data in logits_strategy(6, 1e4)) {
            let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let p = softmax(&Tensor::new(vec![6], data).unwrap()).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
            // strict positivity holds whenever exp cannot underflow
            if max - min < 700.0 {
                prop_assert!(p.data().iter().all(|v| *v > 0.0));
            }
        }

        #[test]
        fn kl_is_nonnegative_and_zero_on_self(
            p in logits_strategy(5, 8.0),
            q in logits_strategy(5, 8.0),
        ) {
            let pt = Tensor::new(vec![5], p).unwrap();
            let qt = Tensor::new(vec![5], q).unwrap();
            prop_assert!(kl_div(&pt, &qt).unwrap() >= -1e-12);
            prop_assert_eq!(kl_div(&pt, &pt).unwrap(), 0.0);
        }

        #[test]
        fn flatten_unflatten_round_trip(
            rows in 1usize..5,
            cols in 1usize..5,
            tail in 0usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = SplitRng::from_seed(seed);
            let w = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(-1e6..1e6)).collect(),
            ).unwrap();
            let b = Tensor::new(
                vec![tail],
                (0..tail).map(|_| rng.gen_range(-1e6..1e6)).collect(),
            ).unwrap();
            let p = ParamVector::new(vec![("w".into(), w), ("b".into(), b)]);
            let back = ParamVector::unflatten_like(&p, &p.flatten()).unwrap();
            prop_assert!(back.bitwise_eq(&p));
        }
    }
}
