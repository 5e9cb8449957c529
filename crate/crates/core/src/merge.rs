//! Classical merge rules over dense task updates.
//!
//! Three families are implemented, all gradient-free and data-free:
//!
//! * **Scaled summation** ([`merge_ta`]): `ΔW_merged = α · Σᵢ ΔW⁽ⁱ⁾`.
//! * **Trim + sign election** ([`ties_merge`]): per layer, keep only the
//!   largest-magnitude entries of each update, elect a sign per coordinate
//!   by total mass, then average the surviving entries that carry the
//!   elected sign (the *disjoint mean*).
//! * **Random drop + rescale** ([`dare_transform`], [`dare_ties_merge`]):
//!   zero each coordinate with probability `p`, rescale survivors by
//!   `1/(1−p)` so the transform is unbiased, then merge with the sign
//!   election of the trim rule (the drop replaces the trim).
//!
//! Conventions shared by every rule (and relied on by tests):
//!
//! * trimming is scoped per layer, over the layer's flattened entries;
//! * magnitude ties at the trim boundary keep the lower row-major index;
//! * a sign-election tie (sum exactly zero) elects **+1**;
//! * exact zeros never vote and never enter the disjoint mean; a coordinate
//!   with no surviving sign-matching entries merges to 0, not NaN;
//! * drop masks are keyed by `(seed, layer key, coordinate index)` and each
//!   model's mask uses the sub-seed `seed ⊕ hash(source_id)`, so merges are
//!   reproducible from one seed and independent of scheduling.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream, subseed};
use crate::update::{check_congruent, TaskUpdate};

// ── Configuration ────────────────────────────────────────────────────────

/// Which merge rule to run, including the jointly-aligned variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMethod {
    #[serde(rename = "TA")]
    Ta,
    #[serde(rename = "TIES")]
    Ties,
    #[serde(rename = "DARE_TIES")]
    DareTies,
    #[serde(rename = "KNOTS_TIES")]
    KnotsTies,
    #[serde(rename = "KNOTS_DARE_TIES")]
    KnotsDareTies,
}

impl MergeMethod {
    /// The rule applied inside the aligned space, for the jointly-aligned
    /// variants; `None` for the plain rules.
    pub fn inner(self) -> Option<MergeMethod> {
        match self {
            MergeMethod::KnotsTies => Some(MergeMethod::Ties),
            MergeMethod::KnotsDareTies => Some(MergeMethod::DareTies),
            _ => None,
        }
    }

    /// True when the method consumes drop-mask seeds.
    pub fn uses_dare(self) -> bool {
        matches!(self, MergeMethod::DareTies | MergeMethod::KnotsDareTies)
    }

    /// Config-file name of the method.
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Ta => "TA",
            MergeMethod::Ties => "TIES",
            MergeMethod::DareTies => "DARE_TIES",
            MergeMethod::KnotsTies => "KNOTS_TIES",
            MergeMethod::KnotsDareTies => "KNOTS_DARE_TIES",
        }
    }
}

/// Axis along which the joint decomposition concatenates updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcatAxis {
    Columns,
    Rows,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_topk() -> f64 {
    100.0
}
fn default_dare_p() -> f64 {
    0.9
}
fn default_seeds() -> Vec<u64> {
    vec![420, 421, 422, 423, 424]
}
fn default_axis() -> ConcatAxis {
    ConcatAxis::Columns
}
fn default_rank_tol() -> f64 {
    1e-8
}

/// Full description of one merge: the method plus every hyperparameter any
/// method reads. Unread knobs are simply ignored by the dispatched rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// Scale on the merged update, `α ≥ 0`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Percentage of entries the trim keeps, in `(0, 100]`.
    #[serde(default = "default_topk")]
    pub topk_percent: f64,
    /// Drop probability, in `[0, 1)`.
    #[serde(default = "default_dare_p")]
    pub dare_p: f64,
    /// Seeds for drop masks; must be non-empty for the DARE methods.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Concatenation axis for the jointly-aligned methods.
    #[serde(default = "default_axis")]
    pub concat_axis: ConcatAxis,
    /// Relative cutoff under which joint singular values are discarded.
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

impl MergeConfig {
    /// A config for `method` with every knob at its documented default.
    pub fn new(method: MergeMethod) -> Self {
        MergeConfig {
            method,
            alpha: default_alpha(),
            topk_percent: default_topk(),
            dare_p: default_dare_p(),
            seeds: default_seeds(),
            concat_axis: default_axis(),
            rank_tol: default_rank_tol(),
        }
    }

    /// Enforce every config invariant; run before any compute.
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !self.topk_percent.is_finite() || self.topk_percent <= 0.0 || self.topk_percent > 100.0
        {
            return Err(Error::InvalidConfig(format!(
                "topk_percent must lie in (0, 100], got {}",
                self.topk_percent
            )));
        }
        if !self.dare_p.is_finite() || !(0.0..1.0).contains(&self.dare_p) {
            return Err(Error::InvalidProbability(format!(
                "dare_p must lie in [0, 1), got {}",
                self.dare_p
            )));
        }
        if self.method.uses_dare() && self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "seeds must be non-empty for the DARE methods".into(),
            ));
        }
        if !self.rank_tol.is_finite() || self.rank_tol < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "rank_tol must be ≥ 0, got {}",
                self.rank_tol
            )));
        }
        Ok(())
    }
}

// ── Results ──────────────────────────────────────────────────────────────

/// How a merged update was produced — serialized into every report.
#[derive(Debug, Clone, Serialize)]
pub struct MergeProvenance {
    pub method: String,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dare_p: Option<f64>,
    pub seeds_used: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concat_axis: Option<ConcatAxis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
    pub source_ids: Vec<String>,
    /// Retained joint rank per layer; populated by the aligned methods.
    pub layer_ranks: BTreeMap<String, usize>,
}

impl MergeProvenance {
    fn plain(method: MergeMethod, alpha: f64, updates: &[TaskUpdate]) -> Self {
        MergeProvenance {
            method: method.name().to_string(),
            alpha,
            topk_percent: None,
            dare_p: None,
            seeds_used: Vec::new(),
            concat_axis: None,
            rank_tol: None,
            source_ids: updates.iter().map(|u| u.source_id().to_string()).collect(),
            layer_ranks: BTreeMap::new(),
        }
    }
}

/// The merged per-layer deltas plus their provenance.
#[derive(Debug, Clone)]
pub struct MergedUpdate {
    pub layers: BTreeMap<String, DMatrix<f64>>,
    pub provenance: MergeProvenance,
}

impl MergedUpdate {
    /// View the merged layers as a task update (for [`crate::update::apply_update`]).
    pub fn to_task_update(&self) -> TaskUpdate {
        TaskUpdate::new(self.layers.clone(), "merged").expect("merged updates are non-empty")
    }
}

// ── Scaled summation ─────────────────────────────────────────────────────

/// `ΔW_merged = α · Σᵢ ΔW⁽ⁱ⁾`, summed in input order.
///
/// The sum is computed first and scaled after, so
/// `merge_ta(u, α) == α · merge_ta(u, 1)` holds elementwise *exactly*.
pub fn merge_ta(updates: &[TaskUpdate], alpha: f64) -> Result<MergedUpdate> {
    check_congruent(updates)?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let mut layers = BTreeMap::new();
    for (key, first) in updates[0].layers() {
        let mut sum = first.clone();
        for u in &updates[1..] {
            sum += &u.layers()[key];
        }
        sum *= alpha;
        layers.insert(key.clone(), sum);
    }
    Ok(MergedUpdate { layers, provenance: MergeProvenance::plain(MergeMethod::Ta, alpha, updates) })
}

// ── Trim and sign election ───────────────────────────────────────────────

/// Number of entries a trim at `topk_percent` keeps out of `count`.
pub fn trim_keep_count(count: usize, topk_percent: f64) -> usize {
    ((topk_percent / 100.0) * count as f64).ceil() as usize
}

/// Keep-mask for the `⌈topk_percent/100 · count⌉` largest-|value| entries
/// of `layer`, flattened row-major. Ties at the boundary keep the lower
/// flattened index, so the mask is deterministic.
pub fn ties_trim_mask(layer: &DMatrix<f64>, topk_percent: f64) -> Result<Vec<bool>> {
    if !(0.0..=100.0).contains(&topk_percent) || topk_percent == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "topk_percent must lie in (0, 100], got {topk_percent}"
        )));
    }
    let count = layer.nrows() * layer.ncols();
    let keep = trim_keep_count(count, topk_percent);
    let mut order: Vec<usize> = (0..count).collect();
    let cols = layer.ncols();
    let at = |flat: usize| layer[(flat / cols, flat % cols)];
    order.sort_by(|&a, &b| {
        at(b).abs()
            .total_cmp(&at(a).abs())
            .then_with(|| a.cmp(&b))
    });
    let mut mask = vec![false; count];
    for &flat in &order[..keep] {
        mask[flat] = true;
    }
    Ok(mask)
}

/// Zero every entry of `layer` outside its trim mask. Kept entries are
/// copied bit-for-bit.
pub fn ties_trim(layer: &DMatrix<f64>, topk_percent: f64) -> Result<DMatrix<f64>> {
    let mask = ties_trim_mask(layer, topk_percent)?;
    Ok(apply_mask(layer, &mask))
}

/// Zero entries of `layer` where `mask` is false (row-major flattening).
pub fn apply_mask(layer: &DMatrix<f64>, mask: &[bool]) -> DMatrix<f64> {
    let cols = layer.ncols();
    DMatrix::from_fn(layer.nrows(), layer.ncols(), |i, j| {
        if mask[i * cols + j] {
            layer[(i, j)]
        } else {
            0.0
        }
    })
}

/// Elected sign of one coordinate: the sign of the summed values, with a
/// tie (sum exactly zero) electing +1. Exact zeros contribute nothing.
pub fn sign_elect(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if total < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Disjoint-mean reduction across same-shape layers: per coordinate, elect
/// a sign, then average the non-zero entries that carry it, scaling the
/// result by `alpha`. Coordinates with no surviving entries merge to 0.
pub(crate) fn elect_and_mean(layers: &[DMatrix<f64>], alpha: f64) -> DMatrix<f64> {
    let (rows, cols) = layers[0].shape();
    let mut values = Vec::with_capacity(layers.len());
    DMatrix::from_fn(rows, cols, |i, j| {
        values.clear();
        values.extend(layers.iter().map(|l| l[(i, j)]));
        let elected = sign_elect(&values);
        let mut sum = 0.0;
        let mut n = 0usize;
        for &v in &values {
            if v != 0.0 && v.signum() == elected {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            alpha * (sum / n as f64)
        }
    })
}

/// Trim each update per layer, elect signs, disjoint-mean, scale by `α`.
pub fn ties_merge(updates: &[TaskUpdate], alpha: f64, topk_percent: f64) -> Result<MergedUpdate> {
    check_congruent(updates)?;
    let mut layers = BTreeMap::new();
    for key in updates[0].layers().keys() {
        let trimmed: Vec<DMatrix<f64>> = updates
            .iter()
            .map(|u| ties_trim(&u.layers()[key], topk_percent))
            .collect::<Result<_>>()?;
        layers.insert(key.clone(), elect_and_mean(&trimmed, alpha));
    }
    let mut provenance = MergeProvenance::plain(MergeMethod::Ties, alpha, updates);
    provenance.topk_percent = Some(topk_percent);
    Ok(MergedUpdate { layers, provenance })
}

// ── Random drop and rescale ──────────────────────────────────────────────

/// Drop-and-rescale one matrix: coordinates are visited row-major and the
/// i-th draw of the `(seed, context)` stream decides the i-th coordinate.
/// Callers validate `p`; `p = 0` returns the input unchanged.
pub(crate) fn dare_drop_matrix(
    layer: &DMatrix<f64>,
    p: f64,
    seed: u64,
    context: &str,
) -> DMatrix<f64> {
    if p == 0.0 {
        return layer.clone();
    }
    let rescale = 1.0 / (1.0 - p);
    let mut rng = stream(seed, context);
    let mut out = DMatrix::zeros(layer.nrows(), layer.ncols());
    for i in 0..layer.nrows() {
        for j in 0..layer.ncols() {
            let drop = rng.random::<f64>() < p;
            if !drop {
                out[(i, j)] = layer[(i, j)] * rescale;
            }
        }
    }
    out
}

/// Zero each coordinate with probability `p` and rescale survivors by
/// `1/(1−p)`, so the expectation over seeds is the original update.
///
/// The mask stream is keyed by `(seed, layer key)` and consumed in
/// row-major coordinate order. `p = 0` is the exact identity for any seed.
pub fn dare_transform(update: &TaskUpdate, p: f64, seed: u64) -> Result<TaskUpdate> {
    if !p.is_finite() || !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability(format!("p must lie in [0, 1), got {p}")));
    }
    let mut layers = BTreeMap::new();
    for (key, layer) in update.layers() {
        layers.insert(key.clone(), dare_drop_matrix(layer, p, seed, key));
    }
    TaskUpdate::new(layers, update.source_id())
}

/// Drop-and-rescale each update under its own sub-seed, then merge with
/// sign election over everything that survived (the drop replaces the
/// trim, i.e. trim at 100%).
pub fn dare_ties_merge(
    updates: &[TaskUpdate],
    alpha: f64,
    p: f64,
    seed: u64,
) -> Result<MergedUpdate> {
    check_congruent(updates)?;
    let transformed: Vec<TaskUpdate> = updates
        .iter()
        .map(|u| dare_transform(u, p, subseed(seed, u.source_id())))
        .collect::<Result<_>>()?;
    let mut layers = BTreeMap::new();
    for key in updates[0].layers().keys() {
        let views: Vec<DMatrix<f64>> =
            transformed.iter().map(|u| u.layers()[key].clone()).collect();
        layers.insert(key.clone(), elect_and_mean(&views, alpha));
    }
    let mut provenance = MergeProvenance::plain(MergeMethod::DareTies, alpha, updates);
    provenance.dare_p = Some(p);
    provenance.seeds_used = vec![seed];
    Ok(MergedUpdate { layers, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update_from(key: &str, rows: usize, cols: usize, vals: &[f64], id: &str) -> TaskUpdate {
        let mut layers = BTreeMap::new();
        layers.insert(key.to_string(), DMatrix::from_row_slice(rows, cols, vals));
        TaskUpdate::new(layers, id).unwrap()
    }

    fn two_layer_update(w1: f64, w2: f64, id: &str) -> TaskUpdate {
        let mut layers = BTreeMap::new();
        layers.insert("w1".to_string(), DMatrix::from_row_slice(1, 1, &[w1]));
        layers.insert("w2".to_string(), DMatrix::from_row_slice(1, 1, &[w2]));
        TaskUpdate::new(layers, id).unwrap()
    }

    #[test]
    fn ta_sums_then_scales() {
        // Two opposed single-neuron models: task vectors (1, 1) and (−1, 1).
        // Summation cancels the first layer and doubles the second.
        let merged = merge_ta(&[two_layer_update(1.0, 1.0, "a"), two_layer_update(-1.0, 1.0, "b")], 0.7)
            .unwrap();
        assert_eq!(merged.layers["w1"][(0, 0)], 0.0);
        assert_eq!(merged.layers["w2"][(0, 0)], 0.7 * 2.0);
    }

    #[test]
    fn ta_single_update_alpha_one_is_identity() {
        let u = update_from("w", 2, 2, &[0.1, -0.2, 0.3, -0.4], "a");
        let merged = merge_ta(std::slice::from_ref(&u), 1.0).unwrap();
        assert_eq!(merged.layers["w"], u.layers()["w"]);
    }

    #[test]
    fn ta_alpha_scaling_is_exact() {
        let us = [
            update_from("w", 2, 3, &[0.11, -0.2, 0.35, -0.4, 0.5, 0.61], "a"),
            update_from("w", 2, 3, &[0.3, 0.21, -0.9, 0.07, -0.111, 0.2], "b"),
        ];
        let unit = merge_ta(&us, 1.0).unwrap();
        let scaled = merge_ta(&us, 0.3).unwrap();
        for (x, y) in unit.layers["w"].iter().zip(scaled.layers["w"].iter()) {
            assert_eq!(0.3 * x, *y, "scaling must be exact, not re-summed");
        }
    }

    #[test]
    fn trim_keeps_ceil_of_percent() {
        // 2x2 layer at 50%: ⌈2⌉ = 2 entries survive: |3| and |−2|.
        let layer = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 0.5, -2.0]);
        let trimmed = ties_trim(&layer, 50.0).unwrap();
        assert_eq!(trimmed, DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -2.0]));
        // keep-count arithmetic, including the ceiling
        assert_eq!(trim_keep_count(4, 50.0), 2);
        assert_eq!(trim_keep_count(5, 50.0), 3);
        assert_eq!(trim_keep_count(4, 100.0), 4);
        assert_eq!(trim_keep_count(10, 30.0), 3);
    }

    #[test]
    fn trim_boundary_ties_keep_lower_flat_index() {
        // Four entries of equal magnitude; 50% keeps the first two in
        // row-major order.
        let layer = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0]);
        let trimmed = ties_trim(&layer, 50.0).unwrap();
        assert_eq!(trimmed, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]));
    }

    #[test]
    fn trim_at_100_percent_is_identity() {
        let layer = DMatrix::from_row_slice(2, 3, &[3.0, -1.0, 0.0, 0.5, -2.0, 4.0]);
        assert_eq!(ties_trim(&layer, 100.0).unwrap(), layer);
    }

    #[test]
    fn sign_election_prefers_mass_and_breaks_ties_positive() {
        assert_eq!(sign_elect(&[2.0, -1.0, -0.5]), 1.0);
        assert_eq!(sign_elect(&[-2.0, 1.0, 0.5]), -1.0);
        assert_eq!(sign_elect(&[2.0, -2.0]), 1.0); // exact tie → +1
        assert_eq!(sign_elect(&[0.0, 0.0]), 1.0); // zeros never vote
    }

    #[test]
    fn sign_election_is_permutation_and_scale_invariant() {
        let vals = [2.0, -1.0, -0.5, 3.0, -4.0];
        let base = sign_elect(&vals);
        let mut perm = vals;
        perm.reverse();
        assert_eq!(sign_elect(&perm), base);
        let scaled: Vec<f64> = vals.iter().map(|v| v * 7.5).collect();
        assert_eq!(sign_elect(&scaled), base);
    }

    #[test]
    fn ties_opposed_equal_magnitudes_elect_positive() {
        // {+3, −3} at one coordinate: tie elects +1, the disjoint mean sees
        // only the +3, and α scales it.
        let us = [update_from("w", 1, 1, &[3.0], "a"), update_from("w", 1, 1, &[-3.0], "b")];
        let merged = ties_merge(&us, 0.5, 100.0).unwrap();
        assert_eq!(merged.layers["w"][(0, 0)], 0.5 * 3.0);
    }

    #[test]
    fn ties_identical_updates_merge_to_themselves() {
        let u = update_from("w", 2, 2, &[1.5, 0.0, -2.0, 0.25], "a");
        let merged = ties_merge(&[u.clone(), u.clone()], 1.0, 100.0).unwrap();
        assert_eq!(merged.layers["w"], u.layers()["w"]);
    }

    #[test]
    fn ties_all_positive_full_keep_is_elementwise_mean() {
        let us = [
            update_from("w", 2, 2, &[1.0, 2.0, 3.0, 4.0], "a"),
            update_from("w", 2, 2, &[3.0, 2.0, 1.0, 8.0], "b"),
        ];
        let merged = ties_merge(&us, 1.0, 100.0).unwrap();
        assert_eq!(merged.layers["w"], DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 6.0]));
    }

    #[test]
    fn disjoint_mean_divides_by_survivor_count_only() {
        // Coordinate values {+2, 0, +4}: zero is excluded, mean = 3.
        let us = [
            update_from("w", 1, 1, &[2.0], "a"),
            update_from("w", 1, 1, &[0.0], "b"),
            update_from("w", 1, 1, &[4.0], "c"),
        ];
        let merged = ties_merge(&us, 1.0, 100.0).unwrap();
        assert_eq!(merged.layers["w"][(0, 0)], 3.0);
    }

    #[test]
    fn merges_reject_empty_and_mismatched_inputs() {
        assert_eq!(merge_ta(&[], 1.0).unwrap_err().code(), "EmptyInput");
        let a = update_from("w", 1, 2, &[1.0, 2.0], "a");
        let b = update_from("w", 2, 1, &[1.0, 2.0], "b");
        assert_eq!(merge_ta(&[a.clone(), b], 1.0).unwrap_err().code(), "ShapeError");
        assert_eq!(
            ties_merge(&[a], 1.0, 0.0).unwrap_err().code(),
            "InvalidConfig"
        );
    }

    #[test]
    fn dare_rejects_invalid_probability() {
        let u = update_from("w", 1, 2, &[1.0, 2.0], "a");
        assert_eq!(dare_transform(&u, 1.0, 0).unwrap_err().code(), "InvalidProbability");
        assert_eq!(dare_transform(&u, -0.1, 0).unwrap_err().code(), "InvalidProbability");
        assert_eq!(dare_transform(&u, f64::NAN, 0).unwrap_err().code(), "InvalidProbability");
    }

    #[test]
    fn dare_p_zero_is_exact_identity_for_any_seed() {
        let u = update_from("w", 2, 2, &[1.0, -2.0, 0.5, 0.0], "a");
        for seed in [0u64, 7, 420] {
            let t = dare_transform(&u, 0.0, seed).unwrap();
            assert_eq!(t.layers()["w"], u.layers()["w"]);
        }
    }

    #[test]
    fn dare_is_deterministic_per_seed_and_survivors_are_rescaled() {
        let u = update_from("w", 4, 4, &(1..=16).map(|v| v as f64).collect::<Vec<_>>(), "a");
        let t1 = dare_transform(&u, 0.5, 9).unwrap();
        let t2 = dare_transform(&u, 0.5, 9).unwrap();
        assert_eq!(t1.layers()["w"], t2.layers()["w"]);
        let t3 = dare_transform(&u, 0.5, 10).unwrap();
        assert_ne!(t1.layers()["w"], t3.layers()["w"]);
        // every surviving entry is exactly value / (1 − p)
        for (orig, kept) in u.layers()["w"].iter().zip(t1.layers()["w"].iter()) {
            assert!(*kept == 0.0 || *kept == orig * 2.0);
        }
    }

    #[test]
    fn dare_mean_over_seeds_approaches_identity() {
        // Monte-Carlo unbiasedness: mean over N seeds within 3·SE, where
        // SE = |w|·sqrt(p / ((1−p)·N)) per coordinate.
        let u = update_from("w", 2, 2, &[1.0, -2.0, 0.5, 3.0], "a");
        let (p, n) = (0.5, 2000u64);
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for seed in 0..n {
            acc += &dare_transform(&u, p, seed).unwrap().layers()["w"];
        }
        acc /= n as f64;
        for (got, want) in acc.iter().zip(u.layers()["w"].iter()) {
            let se = want.abs() * (p / ((1.0 - p) * n as f64)).sqrt();
            assert!(
                (got - want).abs() <= 3.0 * se,
                "mean {got} vs {want} beyond 3·SE={}",
                3.0 * se
            );
        }
    }

    #[test]
    fn dare_ties_with_p_zero_matches_full_keep_ties() {
        let us = [
            update_from("w", 2, 2, &[1.0, -2.0, 0.5, 3.0], "a"),
            update_from("w", 2, 2, &[-1.0, -1.0, 2.5, 0.0], "b"),
        ];
        let dare = dare_ties_merge(&us, 0.8, 0.0, 420).unwrap();
        let ties = ties_merge(&us, 0.8, 100.0).unwrap();
        assert_eq!(dare.layers["w"], ties.layers["w"]);
    }

    #[test]
    fn dare_ties_gives_each_model_its_own_mask() {
        // Identical updates with different source ids must receive
        // different masks under one merge seed.
        let a = update_from("w", 4, 4, &[1.0; 16], "model-a");
        let b = update_from("w", 4, 4, &[1.0; 16], "model-b");
        let ta = dare_transform(&a, 0.5, subseed(77, "model-a")).unwrap();
        let tb = dare_transform(&b, 0.5, subseed(77, "model-b")).unwrap();
        assert_ne!(ta.layers()["w"], tb.layers()["w"]);
    }

    #[test]
    fn merge_config_validation_catches_each_knob() {
        let mut c = MergeConfig::new(MergeMethod::Ties);
        c.validate().unwrap();
        c.alpha = -0.1;
        assert!(c.validate().is_err());
        let mut c = MergeConfig::new(MergeMethod::Ties);
        c.topk_percent = 0.0;
        assert!(c.validate().is_err());
        let mut c = MergeConfig::new(MergeMethod::DareTies);
        c.dare_p = 1.0;
        assert!(c.validate().is_err());
        let mut c = MergeConfig::new(MergeMethod::DareTies);
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn merge_config_serde_round_trips_with_documented_names() {
        let json = r#"{
            "method": "KNOTS_DARE_TIES",
            "alpha": 0.4,
            "topk_percent": 30.0,
            "dare_p": 0.9,
            "seeds": [420],
            "concat_axis": "rows",
            "rank_tol": 0.0
        }"#;
        let c: MergeConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.method, MergeMethod::KnotsDareTies);
        assert_eq!(c.concat_axis, ConcatAxis::Rows);
        let back = serde_json::to_string(&c).unwrap();
        assert!(back.contains("\"KNOTS_DARE_TIES\""));
        assert!(back.contains("\"rows\""));
        // defaults fill in omitted knobs
        let minimal: MergeConfig = serde_json::from_str(r#"{"method": "TA"}"#).unwrap();
        assert_eq!(minimal.alpha, 1.0);
        assert_eq!(minimal.seeds, vec![420, 421, 422, 423, 424]);
        assert_eq!(minimal.rank_tol, 1e-8);
    }
}
