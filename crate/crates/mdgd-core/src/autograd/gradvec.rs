//! Named gradient vectors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map from trainable-parameter name to a gradient tensor of matching
/// shape. The flatten order is lexicographic by name, so dot products and
/// norms are deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    entries: BTreeMap<String, Tensor>,
}

impl GradientVector {
    pub fn from_map(entries: BTreeMap<String, Tensor>) -> Self {
        GradientVector { entries }
    }

    /// Zero gradient over the trainable subset of a parameter set.
    pub fn zeros_like_trainable(params: &super::ParamSet) -> Self {
        let entries = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape())))
            .collect();
        GradientVector { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of named blocks.
    pub fn blocks(&self) -> usize {
        self.entries.len()
    }

    /// Total coordinate count over all blocks.
    pub fn coords(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    fn check_keys(&self, other: &Self, op: &str) -> Result<()> {
        if self.entries.len() == other.entries.len()
            && self.entries.keys().eq(other.entries.keys())
        {
            return Ok(());
        }
        let only_left: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !other.entries.contains_key(*k))
            .collect();
        let only_right: Vec<&String> = other
            .entries
            .keys()
            .filter(|k| !self.entries.contains_key(*k))
            .collect();
        Err(Error::Contract(format!(
            "{op}: key sets differ; only-left {only_left:?}, only-right {only_right:?}"
        )))
    }

    /// Dot product over the lexicographic flattening.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_keys(other, "gv_dot")?;
        let mut acc = 0.0;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Dim(format!(
                    "gv_dot: block shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    /// Euclidean norm over the flattening.
    pub fn norm(&self) -> f64 {
        self.dot(self).expect("identical key sets").sqrt()
    }

    /// `self + c·other`.
    pub fn axpy(&self, c: f64, other: &Self) -> Result<Self> {
        self.check_keys(other, "gv_axpy")?;
        let mut entries = BTreeMap::new();
        for ((name, a), b) in self.entries.iter().zip(other.entries.values()) {
            let data: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x + c * y)
                .collect();
            entries.insert(name.clone(), Tensor::new(a.shape().to_vec(), data)?);
        }
        Ok(GradientVector { entries })
    }

    pub fn scale(&self, c: f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), crate::tensor::scale(v, c)))
            .collect();
        GradientVector { entries }
    }

    /// Concatenates all blocks in lexicographic name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coords());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a gradient vector with `self`'s names/shapes from a flat
    /// buffer produced by [`flatten`](Self::flatten).
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.coords() {
            return Err(Error::Dim(format!(
                "unflatten: expected {} coords, got {}",
                self.coords(),
                flat.len()
            )));
        }
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.len();
            entries.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?,
            );
            offset += n;
        }
        Ok(GradientVector { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gv(pairs: &[(&str, Vec<f64>)]) -> GradientVector {
        let entries = pairs
            .iter()
            .map(|(n, d)| (n.to_string(), Tensor::new(vec![d.len()], d.clone()).unwrap()))
            .collect();
        GradientVector::from_map(entries)
    }

    #[test]
    fn dot_orthogonal() {
        let a = gv(&[("w", vec![1.0, 0.0])]);
        let b = gv(&[("w", vec![0.0, 1.0])]);
        assert_eq!(a.dot(&b).unwrap(), 0.0);
    }

    #[test]
    fn norm_345() {
        let a = gv(&[("w", vec![3.0, 4.0])]);
        assert_abs_diff_eq!(a.norm(), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn axpy_componentwise() {
        let a = gv(&[("w", vec![1.0, 1.0])]);
        let b = gv(&[("w", vec![1.0, 0.0])]);
        let r = a.axpy(-1.0, &b).unwrap();
        assert_eq!(r.get("w").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn key_mismatch_lists_symmetric_difference() {
        let a = gv(&[("w", vec![1.0]), ("u", vec![2.0])]);
        let b = gv(&[("w", vec![1.0]), ("v", vec![2.0])]);
        let err = a.dot(&b).unwrap_err().to_string();
        assert!(err.contains("\"u\"") && err.contains("\"v\""), "{err}");
    }

    #[test]
    fn flatten_unflatten_identity() {
        let a = gv(&[("b", vec![1.0, 2.0]), ("a", vec![3.0])]);
        let flat = a.flatten();
        // lexicographic: "a" first
        assert_eq!(flat, vec![3.0, 1.0, 2.0]);
        assert_eq!(a.unflatten(&flat).unwrap(), a);
    }
}
