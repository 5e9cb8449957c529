//! Joint singular-value alignment of task updates, and merging inside the
//! aligned space.
//!
//! Given `n` same-shape updates `ΔW⁽¹⁾ … ΔW⁽ⁿ⁾` (each `O×I`), the column
//! alignment factors their horizontal concatenation with one thin SVD,
//!
//! ```text
//! [ΔW⁽¹⁾ ; … ; ΔW⁽ⁿ⁾] = U · Σ · [V⁽¹⁾ ; … ; V⁽ⁿ⁾]ᵀ
//! ```
//!
//! so every update is expressed over one shared orthonormal output basis
//! `U` with shared scales `Σ`, and all per-task variation lives in the
//! `V⁽ⁱ⁾` blocks. Merge rules then act on those blocks — rows of `V` that
//! describe the *same* basis direction are compared with each other, which
//! is exactly the alignment plain coordinate-wise merging lacks — and the
//! merged update is reconstructed as `U · Σ · V_mergedᵀ`.
//!
//! The row alignment is the symmetric mirror: the *vertical* stack is
//! factored, `U` splits into per-task blocks, and `Σ`, `V` are shared.
//!
//! Determinism: the SVD's per-column sign ambiguity is fixed by requiring
//! the largest-magnitude entry of each shared-left-factor column to be
//! positive (ties resolved toward the lowest row index), and entries of the
//! per-task blocks below 1e-11 in magnitude are snapped to exact zero so
//! that float noise in structurally-zero coordinates can neither vote in
//! sign elections nor dilute disjoint means.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::merge::{
    apply_mask, dare_drop_matrix, elect_and_mean, ties_trim_mask, ConcatAxis, MergeConfig,
    MergeMethod, MergeProvenance, MergedUpdate,
};
use crate::seed::subseed;
use crate::update::{check_congruent, TaskUpdate};

/// Block-factor entries at or below this magnitude are treated as exact
/// zeros. Rows of the joint right factor have norm ≤ 1, so anything this
/// small is numerical residue of the factorization, not signal.
const BLOCK_SNAP_EPS: f64 = 1e-11;

/// One layer's joint decomposition.
///
/// For [`ConcatAxis::Columns`], `shared` is the left factor `U` (`O×k`) and
/// `blocks[i]` is the right block `V⁽ⁱ⁾` (`I×k`); each update reconstructs
/// as `U · diag(S) · V⁽ⁱ⁾ᵀ`. For [`ConcatAxis::Rows`] the roles mirror:
/// `shared` is `V` (`I×k`), `blocks[i]` is `U⁽ⁱ⁾` (`O×k`), and updates
/// reconstruct as `U⁽ⁱ⁾ · diag(S) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct AlignedDecomposition {
    pub layer_key: String,
    pub axis: ConcatAxis,
    /// The factor shared by every task (orthonormal columns).
    pub shared: DMatrix<f64>,
    /// Joint singular values, descending, non-negative.
    pub singular_values: DVector<f64>,
    /// One per-task factor block per input update.
    pub blocks: Vec<DMatrix<f64>>,
}

impl AlignedDecomposition {
    /// Retained joint rank.
    pub fn k(&self) -> usize {
        self.singular_values.len()
    }

    /// Reconstruct task `i`'s update from the decomposition.
    pub fn reconstruct(&self, i: usize) -> DMatrix<f64> {
        let sigma = DMatrix::from_diagonal(&self.singular_values);
        match self.axis {
            ConcatAxis::Columns => &self.shared * &sigma * self.blocks[i].transpose(),
            ConcatAxis::Rows => &self.blocks[i] * &sigma * self.shared.transpose(),
        }
    }

    /// Per-task blocks with each column `j` scaled by `S[j]` — the
    /// magnitude-carrying view `Σ·V⁽ⁱ⁾ᵀ` (transposed), which equals
    /// `UᵀΔW⁽ⁱ⁾` transposed for the column axis. Pruning decisions are
    /// taken on this view.
    pub fn sigma_scaled_blocks(&self) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let mut scaled = b.clone();
                for j in 0..self.k() {
                    let s = self.singular_values[j];
                    for i in 0..scaled.nrows() {
                        scaled[(i, j)] *= s;
                    }
                }
                scaled
            })
            .collect()
    }
}

/// Jointly decompose one layer's updates along `axis`.
///
/// Singular values at or below `max(rank_tol, ε·max_dim)·σ₁` are discarded
/// together with their vectors; the machine-level floor removes directions
/// that are pure float noise even when `rank_tol` is 0, which keeps the
/// retained rank within the exact rank of the concatenation. At least one
/// direction is always retained. An all-zero layer yields the canonical
/// zero decomposition (`k = 1`, `σ₁ = 0`, first basis vector).
pub fn knots_decompose(
    updates: &[&DMatrix<f64>],
    axis: ConcatAxis,
    rank_tol: f64,
    layer_key: &str,
) -> Result<AlignedDecomposition> {
    let first = *updates
        .first()
        .ok_or_else(|| Error::EmptyInput("no updates to decompose".into()))?;
    let (o, i_dim) = first.shape();
    for u in updates {
        if u.shape() != (o, i_dim) {
            return Err(Error::Shape(format!(
                "layer {layer_key:?}: updates must share one shape, got {}x{} vs {o}x{i_dim}",
                u.nrows(),
                u.ncols()
            )));
        }
    }
    if !rank_tol.is_finite() || rank_tol < 0.0 {
        return Err(Error::InvalidConfig(format!("rank_tol must be ≥ 0, got {rank_tol}")));
    }
    let n = updates.len();

    if updates.iter().all(|u| u.iter().all(|&v| v == 0.0)) {
        let shared_dim = match axis {
            ConcatAxis::Columns => o,
            ConcatAxis::Rows => i_dim,
        };
        let block_dim = match axis {
            ConcatAxis::Columns => i_dim,
            ConcatAxis::Rows => o,
        };
        let mut shared = DMatrix::zeros(shared_dim, 1);
        shared[(0, 0)] = 1.0;
        return Ok(AlignedDecomposition {
            layer_key: layer_key.to_string(),
            axis,
            shared,
            singular_values: DVector::from_element(1, 0.0),
            blocks: vec![DMatrix::zeros(block_dim, 1); n],
        });
    }

    // Concatenate, factor, truncate.
    let concat = match axis {
        ConcatAxis::Columns => {
            let mut c = DMatrix::zeros(o, n * i_dim);
            for (t, u) in updates.iter().enumerate() {
                c.view_mut((0, t * i_dim), (o, i_dim)).copy_from(*u);
            }
            c
        }
        ConcatAxis::Rows => {
            let mut c = DMatrix::zeros(n * o, i_dim);
            for (t, u) in updates.iter().enumerate() {
                c.view_mut((t * o, 0), (o, i_dim)).copy_from(*u);
            }
            c
        }
    };
    let (rows, cols) = concat.shape();
    let (mut u, s, mut vt) = crate::svd::verified_svd(&concat);

    let sigma1 = s[0];
    let floor = f64::EPSILON * rows.max(cols) as f64;
    let cutoff = sigma1 * rank_tol.max(floor);
    let k = s.iter().take_while(|&&v| v > cutoff).count().max(1);

    u = u.columns(0, k).into_owned();
    vt = vt.rows(0, k).into_owned();
    let s = DVector::from_iterator(k, s.iter().take(k).copied());

    // Canonical signs: the largest-|entry| of each left-factor column is
    // made positive (ties toward the lowest row index). Left and right
    // columns flip together, so reconstructions are unchanged.
    for j in 0..k {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..u.nrows() {
            let a = u[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u[(best, j)] < 0.0 {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
            for c in 0..vt.ncols() {
                vt[(j, c)] = -vt[(j, c)];
            }
        }
    }

    // Split into per-task blocks and snap numerical zeros in them.
    let snap = |m: &mut DMatrix<f64>| {
        for v in m.iter_mut() {
            if v.abs() <= BLOCK_SNAP_EPS {
                *v = 0.0;
            }
        }
    };
    let (shared, blocks) = match axis {
        ConcatAxis::Columns => {
            let blocks: Vec<DMatrix<f64>> = (0..n)
                .map(|t| {
                    let mut b = vt.view((0, t * i_dim), (k, i_dim)).transpose().into_owned();
                    snap(&mut b);
                    b
                })
                .collect();
            (u, blocks)
        }
        ConcatAxis::Rows => {
            let blocks: Vec<DMatrix<f64>> = (0..n)
                .map(|t| {
                    let mut b = u.view((t * o, 0), (o, k)).into_owned();
                    snap(&mut b);
                    b
                })
                .collect();
            (vt.transpose(), blocks)
        }
    };

    Ok(AlignedDecomposition {
        layer_key: layer_key.to_string(),
        axis,
        shared,
        singular_values: s,
        blocks,
    })
}

/// Merge the per-task blocks of one decomposition under `inner`, returning
/// the merged block (not yet reconstructed).
fn merge_blocks(
    dec: &AlignedDecomposition,
    inner: MergeMethod,
    config: &MergeConfig,
    source_ids: &[&str],
    dare_seed: u64,
) -> Result<DMatrix<f64>> {
    match inner {
        MergeMethod::Ta => {
            let mut sum = dec.blocks[0].clone();
            for b in &dec.blocks[1..] {
                sum += b;
            }
            sum *= config.alpha;
            Ok(sum)
        }
        MergeMethod::Ties => {
            // Magnitudes are judged on the Σ-scaled view; the kept entries
            // are the *unscaled* block entries (the shared Σ is reapplied
            // at reconstruction).
            let scaled = dec.sigma_scaled_blocks();
            let masked: Vec<DMatrix<f64>> = dec
                .blocks
                .iter()
                .zip(&scaled)
                .map(|(block, scaled)| {
                    let mask = ties_trim_mask(scaled, config.topk_percent)?;
                    Ok(apply_mask(block, &mask))
                })
                .collect::<Result<_>>()?;
            Ok(elect_and_mean(&masked, config.alpha))
        }
        MergeMethod::DareTies => {
            let transformed: Vec<DMatrix<f64>> = dec
                .blocks
                .iter()
                .zip(source_ids)
                .map(|(block, sid)| {
                    dare_drop_matrix(block, config.dare_p, subseed(dare_seed, sid), &dec.layer_key)
                })
                .collect();
            Ok(elect_and_mean(&transformed, config.alpha))
        }
        other => Err(Error::InvalidConfig(format!(
            "{} cannot be used as an inner rule of the aligned merge",
            other.name()
        ))),
    }
}

/// Jointly align the updates layer by layer, merge the per-task blocks
/// with `inner` (`TA`, `TIES`, or `DARE_TIES`), and reconstruct a single
/// merged update through the shared factors.
///
/// Layers are processed in parallel; results are keyed, so the output is
/// independent of scheduling. The DARE inner rule draws its masks from
/// `config.seeds[0]` fanned out per source id.
pub fn knots_merge(
    updates: &[TaskUpdate],
    inner: MergeMethod,
    config: &MergeConfig,
) -> Result<MergedUpdate> {
    check_congruent(updates)?;
    config.validate()?;
    if !matches!(inner, MergeMethod::Ta | MergeMethod::Ties | MergeMethod::DareTies) {
        return Err(Error::InvalidConfig(format!(
            "{} cannot be used as an inner rule of the aligned merge",
            inner.name()
        )));
    }
    let dare_seed = if inner.uses_dare() {
        *config.seeds.first().ok_or_else(|| {
            Error::InvalidConfig("seeds must be non-empty for the DARE inner rule".into())
        })?
    } else {
        0
    };
    let source_ids: Vec<&str> = updates.iter().map(|u| u.source_id()).collect();
    let keys: Vec<&String> = updates[0].layers().keys().collect();

    let merged: Vec<(String, DMatrix<f64>, usize)> = keys
        .par_iter()
        .map(|key| -> Result<(String, DMatrix<f64>, usize)> {
            let mats: Vec<&DMatrix<f64>> = updates.iter().map(|u| &u.layers()[*key]).collect();
            if mats.iter().all(|m| m.iter().all(|&v| v == 0.0)) {
                // SVD of an all-zero layer has no well-defined basis; the
                // merged delta is zero under every rule.
                return Ok(((*key).clone(), DMatrix::zeros(mats[0].nrows(), mats[0].ncols()), 0));
            }
            let dec = knots_decompose(&mats, config.concat_axis, config.rank_tol, key)?;
            let block = merge_blocks(&dec, inner, config, &source_ids, dare_seed)?;
            let sigma = DMatrix::from_diagonal(&dec.singular_values);
            let out = match config.concat_axis {
                ConcatAxis::Columns => &dec.shared * &sigma * block.transpose(),
                ConcatAxis::Rows => &block * &sigma * dec.shared.transpose(),
            };
            Ok(((*key).clone(), out, dec.k()))
        })
        .collect::<Result<_>>()?;

    let mut layers = BTreeMap::new();
    let mut layer_ranks = BTreeMap::new();
    for (key, matrix, k) in merged {
        layers.insert(key.clone(), matrix);
        layer_ranks.insert(key, k);
    }

    let provenance = MergeProvenance {
        method: format!("KNOTS_{}", inner.name()),
        alpha: config.alpha,
        topk_percent: matches!(inner, MergeMethod::Ties).then_some(config.topk_percent),
        dare_p: inner.uses_dare().then_some(config.dare_p),
        seeds_used: if inner.uses_dare() { vec![dare_seed] } else { Vec::new() },
        concat_axis: Some(config.concat_axis),
        rank_tol: Some(config.rank_tol),
        source_ids: source_ids.iter().map(|s| s.to_string()).collect(),
        layer_ranks,
    };
    Ok(MergedUpdate { layers, provenance })
}

/// Run the merge rule named by `config.method` — plain rules act on raw
/// update coordinates, the `KNOTS_*` rules act in the jointly aligned
/// space. Seeded rules draw from `config.seeds[0]`.
pub fn run_merge(updates: &[TaskUpdate], config: &MergeConfig) -> Result<MergedUpdate> {
    config.validate()?;
    match config.method {
        MergeMethod::Ta => crate::merge::merge_ta(updates, config.alpha),
        MergeMethod::Ties => {
            crate::merge::ties_merge(updates, config.alpha, config.topk_percent)
        }
        MergeMethod::DareTies => crate::merge::dare_ties_merge(
            updates,
            config.alpha,
            config.dare_p,
            *config.seeds.first().ok_or_else(|| {
                Error::InvalidConfig("seeds must be non-empty for DARE methods".into())
            })?,
        ),
        MergeMethod::KnotsTies => knots_merge(updates, MergeMethod::Ties, config),
        MergeMethod::KnotsDareTies => knots_merge(updates, MergeMethod::DareTies, config),
    }
}

/// Result of merging the same inputs under both concatenation axes.
#[derive(Debug)]
pub struct AxisComparison {
    pub column_result: MergedUpdate,
    pub row_result: MergedUpdate,
    /// Frobenius distance between the two merged deltas, per layer.
    pub per_layer_gap: BTreeMap<String, f64>,
    /// Frobenius distance over all layers jointly.
    pub total_gap: f64,
}

/// Run the aligned merge under both axes and measure how far apart the two
/// merged updates land. A single input reconstructs identically either
/// way (gap ~0); with several inputs the axes genuinely differ.
pub fn row_vs_column_compare(
    updates: &[TaskUpdate],
    inner: MergeMethod,
    config: &MergeConfig,
) -> Result<AxisComparison> {
    let mut column_config = config.clone();
    column_config.concat_axis = ConcatAxis::Columns;
    let mut row_config = config.clone();
    row_config.concat_axis = ConcatAxis::Rows;

    let column_result = knots_merge(updates, inner, &column_config)?;
    let row_result = knots_merge(updates, inner, &row_config)?;

    let mut per_layer_gap = BTreeMap::new();
    let mut total_sq = 0.0;
    for (key, col) in &column_result.layers {
        let gap = (col - &row_result.layers[key]).norm();
        total_sq += gap * gap;
        per_layer_gap.insert(key.clone(), gap);
    }
    Ok(AxisComparison { column_result, row_result, per_layer_gap, total_gap: total_sq.sqrt() })
}
