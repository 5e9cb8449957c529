//! Dense tensors and named tensor collections.
//!
//! A [`Tensor`] is a rank-1 or rank-2 dense array stored row-major. Values
//! live in `f64` in memory so that downstream linear algebra keeps full
//! double precision; the on-disk container narrows to 32-bit floats (see
//! [`crate::container`]).
//!
//! A [`TensorMap`] is an ordered map from non-empty UTF-8 keys to tensors,
//! plus a string-to-string metadata map. Iteration order is always
//! key-sorted, which keeps every serialization and report deterministic.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense rank-1 or rank-2 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Rank-1 tensor from a vector of values.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Shape("rank-1 tensor must have at least one element".into()));
        }
        Ok(Tensor { shape: vec![data.len()], data })
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { shape: vec![rows, cols], data })
    }

    /// Rank-2 tensor copied out of a matrix.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Tensor { shape: vec![m.nrows(), m.ncols()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major view of the values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when every element is finite (no NaN, no ±Inf).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix view of a rank-2 tensor.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape[..] {
            [rows, cols] => Ok(DMatrix::from_row_slice(rows, cols, &self.data)),
            _ => Err(Error::Shape(format!(
                "expected a rank-2 tensor, got rank {}",
                self.rank()
            ))),
        }
    }
}

/// Ordered collection of named tensors with string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor under `key`. Keys must be non-empty; inserting an
    /// existing key replaces its tensor.
    pub fn insert(&mut self, key: impl Into<String>, tensor: Tensor) -> Result<()> {
        let key = key.into();
        if key.is_empty() {
            return Err(Error::Key("tensor keys must be non-empty".into()));
        }
        self.tensors.insert(key, tensor);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    /// Tensor at `key`, or a `KeyError` naming the missing key.
    pub fn require(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::Key(format!("tensor {key:?} not found")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.tensors.contains_key(key)
    }

    /// Key-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Sorted keys.
    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Replace the whole metadata map.
    pub fn with_metadata(mut self, metadata: BTreeMap<String, String>) -> Self {
        self.metadata = metadata;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::vector(vec![]).is_err());
        assert!(Tensor::matrix(0, 3, vec![]).is_err());
        assert!(Tensor::matrix(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matrix_round_trips_row_major() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = t.to_matrix().unwrap();
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
        let back = Tensor::from_matrix(&m);
        assert_eq!(back, t);
    }

    #[test]
    fn vector_has_no_matrix_view() {
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(t.to_matrix().is_err());
    }

    #[test]
    fn map_iterates_key_sorted() {
        let mut map = TensorMap::new();
        map.insert("b", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        map.insert("a", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        map.insert("c", Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let keys: Vec<_> = map.keys().cloned().collect();
        assert_eq!(keys, ["a", "b", "c"]);
        assert!(map.require("missing").is_err());
    }

    #[test]
    fn finiteness_check_sees_nan_and_inf() {
        let ok = Tensor::vector(vec![0.0, -1.5]).unwrap();
        assert!(ok.is_finite());
        let nan = Tensor::vector(vec![f64::NAN]).unwrap();
        assert!(!nan.is_finite());
        let inf = Tensor::vector(vec![f64::INFINITY]).unwrap();
        assert!(!inf.is_finite());
    }

    #[test]
    fn empty_keys_rejected() {
        let mut map = TensorMap::new();
        assert!(map.insert("", Tensor::vector(vec![1.0]).unwrap()).is_err());
    }
}
