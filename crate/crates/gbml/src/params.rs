//! Flat, ordered views of model parameters and their graph-bound twins.

use crate::autodiff::{AdGraph, GradMap, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered list of named parameter tensors. Entry order is part of the
/// identity of a model: two vectors are compatible only when their names and
/// shapes line up index by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamVector { entries }
    }

    pub fn empty() -> Self {
        ParamVector {
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalars.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All scalars in entry order, row-major within each entry. The inverse
    /// is [`ParamVector::unflatten_like`]; the round-trip is bitwise exact.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with `template`'s names and shapes from flat data.
    pub fn unflatten_like(template: &ParamVector, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != template.total_len() {
            return Err(Error::LengthMismatch {
                expected: template.total_len(),
                got: flat.len(),
            });
        }
        let mut entries = Vec::with_capacity(template.entries.len());
        let mut offset = 0;
        for (name, t) in &template.entries {
            let n = t.len();
            let tensor = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            entries.push((name.clone(), tensor));
            offset += n;
        }
        Ok(ParamVector { entries })
    }

    fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::LengthMismatch {
                expected: self.entries.len(),
                got: other.entries.len(),
            });
        }
        for (i, ((na, ta), (nb, tb))) in self.entries.iter().zip(&other.entries).enumerate() {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::EntryMismatch {
                    index: i,
                    expected: format!("{na} {:?}", ta.shape()),
                    got: format!("{nb} {:?}", tb.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.zeros_like()))
                .collect(),
        }
    }

    /// `self + s * other`, entrywise.
    pub fn add_scaled(&self, other: &ParamVector, s: f64) -> Result<ParamVector> {
        self.check_compatible(other)?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((n, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            entries.push((n.clone(), a.add(&b.scale(s)?)?));
        }
        Ok(ParamVector { entries })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(other)?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for ((n, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            entries.push((n.clone(), a.sub(b)?));
        }
        Ok(ParamVector { entries })
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.norm_sq()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0_f64, |m, (_, t)| m.max(t.max_abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Binds every entry as a leaf of `graph`.
    pub fn bind(&self, graph: &AdGraph, requires_grad: bool) -> BoundParams {
        BoundParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), graph.var(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters bound as graph nodes, in the same order as their source
/// [`ParamVector`].
#[derive(Clone)]
pub struct BoundParams {
    entries: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn new(entries: Vec<(String, Var)>) -> Self {
        BoundParams { entries }
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn values(&self) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.value()))
                .collect(),
        }
    }

    /// Gradients for every entry from a backward sweep; zeros where no
    /// gradient reached the leaf.
    pub fn grads(&self, map: &GradMap) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), map.tensor_or_zeros(v)))
                .collect(),
        }
    }

    pub fn detach_all(&self) -> BoundParams {
        BoundParams {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.detach()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        ParamVector::new(vec![
            (
                "w".into(),
                Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            ),
            ("b".into(), Tensor::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap()),
        ])
    }

    #[test]
    fn total_len_counts_scalars() {
        assert_eq!(sample().total_len(), 7);
    }

    #[test]
    fn flatten_round_trip_is_bitwise() {
        let p = sample();
        let flat = p.flatten();
        let back = ParamVector::unflatten_like(&p, &flat).unwrap();
        assert!(back.bitwise_eq(&p));
    }

    #[test]
    fn empty_model_flattens_to_nothing() {
        let p = ParamVector::empty();
        assert_eq!(p.flatten().len(), 0);
        assert!(ParamVector::unflatten_like(&p, &[]).unwrap().bitwise_eq(&p));
    }

    #[test]
    fn unflatten_length_mismatch() {
        let p = sample();
        assert!(matches!(
            ParamVector::unflatten_like(&p, &[0.0; 6]),
            Err(Error::LengthMismatch {
                expected: 7,
                got: 6
            })
        ));
    }
}
