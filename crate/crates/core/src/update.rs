//! Dense task updates and their application to base checkpoints.
//!
//! A [`TaskUpdate`] is the per-layer dense difference `ΔW` between a
//! finetuned model and its base, tagged with the source model's identity.
//! Applying an update adds `ΔW` to the base weights at the adapted keys and
//! copies everything else through untouched.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorMap};

/// Per-layer dense weight deltas from one source model.
#[derive(Debug, Clone)]
pub struct TaskUpdate {
    layers: BTreeMap<String, DMatrix<f64>>,
    source_id: String,
}

impl TaskUpdate {
    pub fn new(layers: BTreeMap<String, DMatrix<f64>>, source_id: impl Into<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("a task update needs at least one layer".into()));
        }
        Ok(TaskUpdate { layers, source_id: source_id.into() })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Key-sorted layer map.
    pub fn layers(&self) -> &BTreeMap<String, DMatrix<f64>> {
        &self.layers
    }

    pub fn layer(&self, key: &str) -> Option<&DMatrix<f64>> {
        self.layers.get(key)
    }

    /// Sorted layer keys.
    pub fn keys(&self) -> Vec<&str> {
        self.layers.keys().map(String::as_str).collect()
    }

    /// Every entry of every layer, flattened row-major in key order.
    /// This is the vector the task-vector cosine is computed over.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.layers.values() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        }
        out
    }

    /// True when every layer is identically zero.
    pub fn is_zero(&self) -> bool {
        self.layers.values().all(|m| m.iter().all(|&v| v == 0.0))
    }
}

/// Check that all updates share one key set and per-layer shapes.
///
/// Mismatched key sets are a `KeyError`; mismatched shapes a `ShapeError`;
/// an empty slice an `EmptyInput`.
pub fn check_congruent(updates: &[TaskUpdate]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| Error::EmptyInput("no task updates given".into()))?;
    for u in &updates[1..] {
        if u.layers.len() != first.layers.len()
            || !u.layers.keys().eq(first.layers.keys())
        {
            return Err(Error::Key(format!(
                "updates {:?} and {:?} adapt different layer sets",
                first.source_id, u.source_id
            )));
        }
        for (key, m) in &u.layers {
            let f = &first.layers[key];
            if m.shape() != f.shape() {
                return Err(Error::Shape(format!(
                    "layer {key:?}: {}x{} in {:?} vs {}x{} in {:?}",
                    f.nrows(),
                    f.ncols(),
                    first.source_id,
                    m.nrows(),
                    m.ncols(),
                    u.source_id
                )));
            }
        }
    }
    Ok(())
}

/// Add an update to a base checkpoint: `W + ΔW` at every adapted key,
/// all other tensors (and metadata) copied through.
pub fn apply_update(base: &TensorMap, update: &TaskUpdate) -> Result<TensorMap> {
    let mut out = TensorMap::new().with_metadata(base.metadata().clone());
    for (key, tensor) in base.iter() {
        match update.layer(key) {
            None => out.insert(key.clone(), tensor.clone())?,
            Some(delta) => {
                let w = tensor.to_matrix().map_err(|_| {
                    Error::Shape(format!(
                        "update targets {key:?} but the base tensor has rank {}",
                        tensor.rank()
                    ))
                })?;
                if w.shape() != delta.shape() {
                    return Err(Error::Shape(format!(
                        "layer {key:?}: base is {}x{} but the update is {}x{}",
                        w.nrows(),
                        w.ncols(),
                        delta.nrows(),
                        delta.ncols()
                    )));
                }
                out.insert(key.clone(), Tensor::from_matrix(&(w + delta)))?;
            }
        }
    }
    // Every update key must have found a base tensor.
    for key in update.layers().keys() {
        if !base.contains(key) {
            return Err(Error::Key(format!(
                "update targets {key:?} which is absent from the base checkpoint"
            )));
        }
    }
    Ok(out)
}

/// Difference between a finetuned checkpoint and its base, over every
/// rank-2 key the two share with equal shape. Used to diagnose
/// full-finetuned models where no factored adapter exists.
pub fn update_between(
    finetuned: &TensorMap,
    base: &TensorMap,
    source_id: impl Into<String>,
) -> Result<TaskUpdate> {
    let mut layers = BTreeMap::new();
    for (key, tensor) in finetuned.iter() {
        if tensor.rank() != 2 {
            continue;
        }
        let Some(base_tensor) = base.get(key) else { continue };
        if base_tensor.shape() != tensor.shape() {
            continue;
        }
        let delta = tensor.to_matrix()? - base_tensor.to_matrix()?;
        layers.insert(key.clone(), delta);
    }
    if layers.is_empty() {
        return Err(Error::EmptyInput(
            "the checkpoints share no rank-2 tensors of equal shape".into(),
        ));
    }
    TaskUpdate::new(layers, source_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_map() -> TensorMap {
        let mut base = TensorMap::new();
        base.insert(
            "w0",
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        base.insert("bias", Tensor::vector(vec![0.5, -0.5]).unwrap()).unwrap();
        base.set_metadata("arch", "toy");
        base
    }

    fn delta(vals: [f64; 4]) -> TaskUpdate {
        let mut layers = BTreeMap::new();
        layers.insert("w0".to_string(), DMatrix::from_row_slice(2, 2, &vals));
        TaskUpdate::new(layers, "t").unwrap()
    }

    #[test]
    fn apply_adds_at_adapted_keys_and_copies_the_rest() {
        let out = apply_update(&base_map(), &delta([0.5, 0.0, -1.0, 0.25])).unwrap();
        let w = out.get("w0").unwrap().to_matrix().unwrap();
        assert_eq!(w[(0, 0)], 1.5);
        assert_eq!(w[(1, 0)], 2.0);
        assert_eq!(out.get("bias").unwrap().data(), &[0.5, -0.5]);
        assert_eq!(out.metadata().get("arch").unwrap(), "toy");
    }

    #[test]
    fn additive_inverse_round_trips() {
        let base = base_map();
        let d = delta([0.5, -0.25, 1.0, -2.0]);
        let neg = delta([-0.5, 0.25, -1.0, 2.0]);
        let there = apply_update(&base, &d).unwrap();
        let back = apply_update(&there, &neg).unwrap();
        let w = back.get("w0").unwrap().to_matrix().unwrap();
        let orig = base.get("w0").unwrap().to_matrix().unwrap();
        for (a, b) in w.iter().zip(orig.iter()) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn apply_is_linear_in_the_update() {
        let base = base_map();
        let d = delta([0.5, -0.25, 1.0, -2.0]);
        let scaled = delta([1.5, -0.75, 3.0, -6.0]); // 3·d
        let once = apply_update(&base, &d).unwrap();
        let thrice = apply_update(&base, &scaled).unwrap();
        let w0 = base.get("w0").unwrap().to_matrix().unwrap();
        let inc1 = once.get("w0").unwrap().to_matrix().unwrap() - &w0;
        let inc3 = thrice.get("w0").unwrap().to_matrix().unwrap() - &w0;
        for (a, b) in inc1.iter().zip(inc3.iter()) {
            let tol = 1e-6 * b.abs().max(1.0);
            assert!((3.0 * a - b).abs() <= tol);
        }
    }

    #[test]
    fn missing_key_and_shape_mismatch_are_distinct_errors() {
        let mut layers = BTreeMap::new();
        layers.insert("nope".to_string(), DMatrix::zeros(2, 2));
        let missing = TaskUpdate::new(layers, "t").unwrap();
        assert_eq!(apply_update(&base_map(), &missing).unwrap_err().code(), "KeyError");

        let mut layers = BTreeMap::new();
        layers.insert("w0".to_string(), DMatrix::zeros(3, 2));
        let wrong = TaskUpdate::new(layers, "t").unwrap();
        assert_eq!(apply_update(&base_map(), &wrong).unwrap_err().code(), "ShapeError");
    }

    #[test]
    fn congruence_checks_keys_then_shapes() {
        let a = delta([0.0; 4]);
        let mut layers = BTreeMap::new();
        layers.insert("other".to_string(), DMatrix::zeros(2, 2));
        let b = TaskUpdate::new(layers, "b").unwrap();
        assert_eq!(check_congruent(&[a.clone(), b]).unwrap_err().code(), "KeyError");

        let mut layers = BTreeMap::new();
        layers.insert("w0".to_string(), DMatrix::zeros(4, 4));
        let c = TaskUpdate::new(layers, "c").unwrap();
        assert_eq!(check_congruent(&[a, c]).unwrap_err().code(), "ShapeError");
        assert_eq!(check_congruent(&[]).unwrap_err().code(), "EmptyInput");
    }

    #[test]
    fn flatten_walks_keys_in_sorted_order() {
        let mut layers = BTreeMap::new();
        layers.insert("z".to_string(), DMatrix::from_row_slice(1, 2, &[5.0, 6.0]));
        layers.insert("a".to_string(), DMatrix::from_row_slice(2, 1, &[1.0, 2.0]));
        let u = TaskUpdate::new(layers, "t").unwrap();
        assert_eq!(u.flatten(), vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn update_between_diffs_shared_rank2_keys() {
        let base = base_map();
        let d = delta([0.5, 0.0, -1.0, 0.25]);
        let tuned = apply_update(&base, &d).unwrap();
        let recovered = update_between(&tuned, &base, "ft").unwrap();
        let got = recovered.layer("w0").unwrap();
        let want = d.layer("w0").unwrap();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        // rank-1 "bias" is skipped, so only w0 is present
        assert_eq!(recovered.keys(), ["w0"]);
    }
}
