//! Small classifiers, the losses used around them, and inner-loop parameter
//! masks.
//!
//! Models are value objects: a model describes shapes and wiring, parameters
//! travel separately as [`ParamVector`]s, and adaptation produces new
//! vectors. Forward passes are expressed over graph [`Var`]s so the same code
//! serves evaluation, first-order gradients and unrolled meta-gradients.

use rand::Rng;

use crate::autodiff::{AdGraph, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamVector};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// value-level losses
// ---------------------------------------------------------------------------

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(Error::EmptyInput { op: "softmax" });
    }
    let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(
        logits.shape().to_vec(),
        exps.into_iter().map(|e| e / sum).collect(),
    )
}

/// Log-softmax via the shifted log-sum-exp identity.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(Error::EmptyInput { op: "log_softmax" });
    }
    let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits
        .data()
        .iter()
        .map(|v| (v - m).exp())
        .sum::<f64>()
        .ln();
    Tensor::new(
        logits.shape().to_vec(),
        logits.data().iter().map(|v| v - lse).collect(),
    )
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let n = logits.len();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    Ok(-log_softmax(logits)?.data()[label])
}

/// `KL(softmax(p_logits) || softmax(q_logits))`, evaluated in log space so
/// that identical logits give exactly zero.
pub fn kl_div(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: p_logits.shape().to_vec(),
            rhs: q_logits.shape().to_vec(),
        });
    }
    let lp = log_softmax(p_logits)?;
    let lq = log_softmax(q_logits)?;
    let mut acc = 0.0;
    for (lpi, lqi) in lp.data().iter().zip(lq.data()) {
        acc += lpi.exp() * (lpi - lqi);
    }
    Ok(acc)
}

/// Squared parameter distance normalized by the square root of the parameter
/// count: `||a - b||^2 / sqrt(len)`.
pub fn param_l2(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.total_len() != b.total_len() {
        return Err(Error::LengthMismatch {
            expected: a.total_len(),
            got: b.total_len(),
        });
    }
    let d = a.sub(b)?;
    Ok(d.norm_sq() / (a.total_len() as f64).sqrt())
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// graph-level losses
// ---------------------------------------------------------------------------

/// Row-wise log-softmax of a `[n, c]` logit matrix as a graph op.
///
/// The row maxima enter as detached constants; the shifted log-sum-exp
/// identity is exact for any fixed shift, so gradients are unaffected.
pub fn log_softmax_rows(logits: &Var) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::BadShape {
            op: "log_softmax_rows",
            expected: "non-empty [n, c] matrix",
            got: shape,
        });
    }
    let (n, c) = (shape[0], shape[1]);
    let graph = logits.graph().clone();
    let value = logits.value();
    let mut maxdata = Vec::with_capacity(n * c);
    for i in 0..n {
        let m = value.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        maxdata.extend(std::iter::repeat(m).take(c));
    }
    let shifted = logits.sub(&graph.constant(Tensor::new(vec![n, c], maxdata)?))?;
    let exps = shifted.exp()?;
    // row sums via matmul with a column of ones keeps every op 2-D
    let row_sums = exps.matmul(&graph.constant(Tensor::ones(&[c, 1])))?;
    let log_sums = row_sums.log()?;
    let spread = log_sums.matmul(&graph.constant(Tensor::ones(&[1, c])))?;
    shifted.sub(&spread)
}

pub fn softmax_rows(logits: &Var) -> Result<Var> {
    log_softmax_rows(logits)?.exp()
}

/// Mean cross-entropy of a `[n, c]` logit matrix against integer labels.
pub fn mean_cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::BadShape {
            op: "mean_cross_entropy",
            expected: "[n, c] logits with n labels",
            got: shape,
        });
    }
    let (n, c) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; n * c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        onehot[i * c + label] = 1.0;
    }
    let graph = logits.graph().clone();
    let lsm = log_softmax_rows(logits)?;
    lsm.mul(&graph.constant(Tensor::new(vec![n, c], onehot)?))?
        .sum()?
        .scale(-1.0 / n as f64)
}

/// Mean row-wise `KL(softmax(p) || softmax(q))` between two logit matrices.
pub fn mean_kl_rows(p_logits: &Var, q_logits: &Var) -> Result<Var> {
    let shape = p_logits.shape();
    if shape != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_kl_rows",
            lhs: shape,
            rhs: q_logits.shape(),
        });
    }
    let n = shape[0];
    let lp = log_softmax_rows(p_logits)?;
    let lq = log_softmax_rows(q_logits)?;
    let p = lp.exp()?;
    p.mul(&lp.sub(&lq)?)?.sum()?.scale(1.0 / n as f64)
}

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

/// Fully-connected classifier: relu on hidden layers, identity on the output
/// layer, so the forward pass emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
}

impl MlpModel {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig {
                reason: format!("MLP needs at least [input, output] dims, got {layer_dims:?}"),
            });
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig {
                reason: format!("zero-dimensional layer in {layer_dims:?}"),
            });
        }
        Ok(MlpModel { layer_dims })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Glorot-uniform weights, zero biases. Deterministic per rng state.
    pub fn init_params(&self, rng: &mut SplitRng) -> ParamVector {
        let mut entries = Vec::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            entries.push((
                format!("w{l}"),
                Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction"),
            ));
            entries.push((format!("b{l}"), Tensor::zeros(&[1, fan_out])));
        }
        ParamVector::new(entries)
    }

    /// Logits for a batch already bound to a graph: `x` is `[n, input_dim]`.
    pub fn forward(&self, graph: &AdGraph, params: &BoundParams, x: &Var) -> Result<Var> {
        let n = x.shape()[0];
        let ones_col = graph.constant(Tensor::ones(&[n, 1]));
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let w = params.get(&format!("w{l}")).ok_or_else(|| Error::InvalidConfig {
                reason: format!("missing parameter entry w{l}"),
            })?;
            let b = params.get(&format!("b{l}")).ok_or_else(|| Error::InvalidConfig {
                reason: format!("missing parameter entry b{l}"),
            })?;
            // bias broadcast as ones-column times the bias row keeps every op
            // inside the scalar-broadcast-only discipline
            let z = h.matmul(w)?.add(&ones_col.matmul(b)?)?;
            h = if l + 1 < self.num_layers() { z.relu()? } else { z };
        }
        Ok(h)
    }

    /// Logit tensor for a batch, without building gradient state.
    pub fn logits(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        let graph = AdGraph::new();
        let bound = params.bind(&graph, false);
        let xv = graph.constant(x.clone());
        Ok(self.forward(&graph, &bound, &xv)?.value())
    }

    /// Name of the classifier-head entries (last layer).
    pub fn head_entries(&self) -> [String; 2] {
        let l = self.num_layers() - 1;
        [format!("w{l}"), format!("b{l}")]
    }
}

/// Bias-free linear classifier over a fixed feature map; class `c` scores an
/// input as the inner product of its weight column with the features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    feature_dim: usize,
    classes: usize,
}

impl LinearModel {
    pub fn new(feature_dim: usize, classes: usize) -> Result<Self> {
        if feature_dim == 0 || classes == 0 {
            return Err(Error::InvalidConfig {
                reason: "linear model dims must be positive".into(),
            });
        }
        Ok(LinearModel {
            feature_dim,
            classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// All class weight vectors identical (here: zero), so no class is
    /// preferred before adaptation.
    pub fn init_symmetric(&self) -> ParamVector {
        ParamVector::new(vec![(
            "w".into(),
            Tensor::zeros(&[self.feature_dim, self.classes]),
        )])
    }

    /// Symmetric init with an arbitrary shared weight vector.
    pub fn init_symmetric_with(&self, shared: &[f64]) -> Result<ParamVector> {
        if shared.len() != self.feature_dim {
            return Err(Error::LengthMismatch {
                expected: self.feature_dim,
                got: shared.len(),
            });
        }
        let mut data = vec![0.0; self.feature_dim * self.classes];
        for (i, v) in shared.iter().enumerate() {
            for c in 0..self.classes {
                data[i * self.classes + c] = *v;
            }
        }
        Ok(ParamVector::new(vec![(
            "w".into(),
            Tensor::new(vec![self.feature_dim, self.classes], data)?,
        )]))
    }

    pub fn forward(&self, _graph: &AdGraph, params: &BoundParams, x: &Var) -> Result<Var> {
        let w = params.get("w").ok_or_else(|| Error::InvalidConfig {
            reason: "missing parameter entry w".into(),
        })?;
        x.matmul(w)
    }

    pub fn logits(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        let graph = AdGraph::new();
        let bound = params.bind(&graph, false);
        let xv = graph.constant(x.clone());
        Ok(self.forward(&graph, &bound, &xv)?.value())
    }

    /// True when every class row of `params` is bitwise identical.
    pub fn is_symmetric(&self, params: &ParamVector) -> bool {
        let Some(w) = params.get("w") else {
            return false;
        };
        let c = self.classes;
        (0..self.feature_dim).all(|i| {
            let row = &w.data()[i * c..(i + 1) * c];
            row.iter().all(|v| v.to_bits() == row[0].to_bits())
        })
    }
}

/// Anything the inner loop can run against.
pub trait Classifier {
    fn forward(&self, graph: &AdGraph, params: &BoundParams, x: &Var) -> Result<Var>;
    fn output_dim(&self) -> usize;
}

impl Classifier for MlpModel {
    fn forward(&self, graph: &AdGraph, params: &BoundParams, x: &Var) -> Result<Var> {
        MlpModel::forward(self, graph, params, x)
    }

    fn output_dim(&self) -> usize {
        MlpModel::output_dim(self)
    }
}

impl Classifier for LinearModel {
    fn forward(&self, graph: &AdGraph, params: &BoundParams, x: &Var) -> Result<Var> {
        LinearModel::forward(self, graph, params, x)
    }

    fn output_dim(&self) -> usize {
        self.classes
    }
}

// ---------------------------------------------------------------------------
// inner-loop masks
// ---------------------------------------------------------------------------

/// Per-entry adaptability flags for the inner loop. Frozen entries are
/// carried through adaptation untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerMask {
    entries: Vec<(String, bool)>,
}

impl InnerMask {
    pub fn all_adaptable(template: &ParamVector) -> Self {
        InnerMask {
            entries: template
                .entries()
                .iter()
                .map(|(n, _)| (n.clone(), true))
                .collect(),
        }
    }

    pub fn all_frozen(template: &ParamVector) -> Self {
        InnerMask {
            entries: template
                .entries()
                .iter()
                .map(|(n, _)| (n.clone(), false))
                .collect(),
        }
    }

    /// Adapt only the classifier head; the encoder is frozen.
    pub fn head_only(template: &ParamVector, head: &[String]) -> Self {
        InnerMask {
            entries: template
                .entries()
                .iter()
                .map(|(n, _)| (n.clone(), head.contains(n)))
                .collect(),
        }
    }

    /// Adapt only the body; the classifier head is frozen.
    pub fn body_only(template: &ParamVector, head: &[String]) -> Self {
        InnerMask {
            entries: template
                .entries()
                .iter()
                .map(|(n, _)| (n.clone(), !head.contains(n)))
                .collect(),
        }
    }

    pub fn is_adaptable(&self, index: usize) -> bool {
        self.entries[index].1
    }

    pub fn entries(&self) -> &[(String, bool)] {
        &self.entries
    }

    pub fn check_covers(&self, params: &ParamVector) -> Result<()> {
        if self.entries.len() != params.num_entries() {
            return Err(Error::MaskCoverage {
                reason: format!(
                    "mask has {} entries, parameters have {}",
                    self.entries.len(),
                    params.num_entries()
                ),
            });
        }
        for ((mn, _), (pn, _)) in self.entries.iter().zip(params.entries()) {
            if mn != pn {
                return Err(Error::MaskCoverage {
                    reason: format!("mask entry `{mn}` does not match parameter `{pn}`"),
                });
            }
        }
        Ok(())
    }
}

/// Zeroes gradient entries at frozen positions, leaves the rest unchanged.
pub fn apply_mask(grad: &ParamVector, mask: &InnerMask) -> Result<ParamVector> {
    mask.check_covers(grad)?;
    let entries = grad
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (n, t))| {
            let t = if mask.is_adaptable(i) {
                t.clone()
            } else {
                t.zeros_like()
            };
            (n.clone(), t)
        })
        .collect();
    Ok(ParamVector::new(entries))
}

// ---------------------------------------------------------------------------
// projector
// ---------------------------------------------------------------------------

/// Small relu head appended to the reference branch during self-supervised
/// pretraining so the two branches cannot collapse onto the same constant
/// output. Hidden width is twice the class count. Its parameters are fixed at
/// init; the whole reference branch is behind a stop-gradient.
///
/// The default init writes the exact identity through the relu pair
/// (`relu(x) - relu(-x) = x`) and perturbs it: near the identity the distance
/// metric still rewards trajectory alignment, while the perturbation keeps
/// the branches from agreeing through a constant output.
#[derive(Debug, Clone)]
pub struct Projector {
    classes: usize,
    params: ParamVector,
}

impl Projector {
    pub fn init(classes: usize, rng: &mut SplitRng) -> Result<Self> {
        Self::init_with_noise(classes, 0.2, rng)
    }

    /// Identity-representing weights perturbed by `noise` times the usual
    /// Glorot scale. `noise = 0` is the exact identity map.
    pub fn init_with_noise(classes: usize, noise: f64, rng: &mut SplitRng) -> Result<Self> {
        let mlp = MlpModel::new(vec![classes, 2 * classes, classes])?;
        let mut params = mlp.init_params(rng);
        let n = classes;
        let mut w1 = params.get("w0").unwrap().scale(noise)?;
        let mut w2 = params.get("w1").unwrap().scale(noise)?;
        for i in 0..n {
            // w1 columns: [I | -I], w2 rows: [I; -I]
            w1.data_mut()[i * 2 * n + i] += 1.0;
            w1.data_mut()[i * 2 * n + n + i] += -1.0;
            w2.data_mut()[i * n + i] += 1.0;
            w2.data_mut()[(n + i) * n + i] += -1.0;
        }
        params = ParamVector::new(vec![
            ("w0".into(), w1),
            ("b0".into(), Tensor::zeros(&[1, 2 * n])),
            ("w1".into(), w2),
            ("b1".into(), Tensor::zeros(&[1, n])),
        ]);
        Ok(Projector { classes, params })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Maps reference logits `[n, c]` through the projector.
    pub fn apply(&self, graph: &AdGraph, logits: &Var) -> Result<Var> {
        let mlp = MlpModel::new(vec![self.classes, 2 * self.classes, self.classes])?;
        let bound = self.params.bind(graph, false);
        mlp.forward(graph, &bound, logits)
    }
}
