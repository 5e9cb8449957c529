//! Representation-similarity diagnostics and task-vector geometry.
//!
//! Two lenses on how mergeable a set of task updates is:
//!
//! * **Linear CKA** between the activations each update produces on a
//!   shared probe batch — computed on the raw update outputs
//!   (`x ↦ ΔW⁽ⁱ⁾·x`), on the jointly aligned right-factor outputs
//!   (`x ↦ V⁽ⁱ⁾ᵀ·x`), or on finetuned-minus-pretrained activation deltas.
//!   High CKA means the models transform the same inputs in functionally
//!   aligned ways, which is when coordinate-wise merge rules work well.
//! * **Task-vector cosine** between flattened updates — the classical
//!   orthogonality proxy. The [`toy catastrophe`](task_vector_cosine)
//!   construction in the tests shows why cosine alone can mislead:
//!   perfectly orthogonal task vectors whose scaled sum destroys one
//!   model's predictions at every scaling factor.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::knots_decompose;
use crate::error::{Error, Result};
use crate::merge::ConcatAxis;
use crate::seed::standard_normal_matrix;
use crate::update::{check_congruent, TaskUpdate};

// ── activation batches and probes ──

/// A batch of activations (or probe inputs): `m` samples as rows over `d`
/// feature columns, tagged with the layer and model they came from.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub matrix: DMatrix<f64>,
    pub layer_key: String,
    pub source_id: String,
}

impl ActivationBatch {
    pub fn new(
        matrix: DMatrix<f64>,
        layer_key: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if matrix.nrows() < 2 {
            return Err(Error::Shape(format!(
                "an activation batch needs at least 2 rows, got {}",
                matrix.nrows()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("activation batch contains non-finite values".into()));
        }
        Ok(Self { matrix, layer_key: layer_key.into(), source_id: source_id.into() })
    }

    /// Number of samples (rows).
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires m ≥ 2
    }
}

/// Where the probe batch came from — recorded in every report so a run can
/// be replayed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeRecord {
    /// `"gaussian"` for seeded synthetic probes, `"file"` for user batches.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Number of probe samples.
    pub m: usize,
}

impl ProbeRecord {
    pub fn gaussian(seed: u64, m: usize) -> Self {
        Self { kind: "gaussian".into(), seed: Some(seed), path: None, m }
    }

    pub fn file(path: impl Into<String>, m: usize) -> Self {
        Self { kind: "file".into(), seed: None, path: Some(path.into()), m }
    }
}

/// Seeded standard-normal probe batches, one per layer, each sized to that
/// layer's input dimension. Deterministic in `(seed, layer key)`.
pub fn gaussian_probes(
    layer_inputs: &BTreeMap<String, usize>,
    m: usize,
    seed: u64,
) -> Result<BTreeMap<String, ActivationBatch>> {
    if m < 2 {
        return Err(Error::Shape(format!("probe batches need at least 2 samples, got {m}")));
    }
    layer_inputs
        .iter()
        .map(|(key, &dim)| {
            let matrix = standard_normal_matrix(m, dim, seed, &format!("probe:{key}"));
            Ok((key.clone(), ActivationBatch::new(matrix, key.clone(), "probe")?))
        })
        .collect()
}

// ── linear CKA ──

/// Subtract each column's mean.
fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.nrows() as f64;
    let mut c = x.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / m;
        for i in 0..x.nrows() {
            c[(i, j)] -= mean;
        }
    }
    c
}

/// Linear centered kernel alignment between two activation batches over
/// the same samples: `‖Yᶜᵀ Xᶜ‖_F² / (‖Xᶜᵀ Xᶜ‖_F · ‖Yᶜᵀ Yᶜ‖_F)` after
/// column-centering both. 1 means the batches are related by an
/// orthogonal transform plus scaling; values near 0 mean unrelated
/// representations.
pub fn cka_linear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "batches must have the same number of rows, got {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Shape(format!("CKA needs at least 2 rows, got {}", x.nrows())));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let x_self = (xc.transpose() * &xc).norm();
    let y_self = (yc.transpose() * &yc).norm();
    if x_self == 0.0 || y_self == 0.0 {
        return Err(Error::DegenerateBatch(
            "an input is constant across rows; CKA is undefined".into(),
        ));
    }
    let cross = (yc.transpose() * &xc).norm_squared();
    Ok(cross / (x_self * y_self))
}

// ── pairwise reports ──

/// Which activations feed the pairwise CKA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CkaMode {
    /// `x ↦ ΔW⁽ⁱ⁾·x` — outputs of each raw task update.
    #[serde(rename = "raw_update")]
    RawUpdate,
    /// `x ↦ V⁽ⁱ⁾ᵀ·x` — outputs of each task's aligned right factor after
    /// the joint decomposition.
    #[serde(rename = "knots_aligned")]
    KnotsAligned,
    /// Finetuned-minus-pretrained activation deltas. For a checkpoint
    /// pair this is `(W·x) − (W₀·x) = ΔW·x`, so the computation coincides
    /// with [`CkaMode::RawUpdate`] once the update has been extracted;
    /// the mode is kept distinct so reports record what was compared.
    #[serde(rename = "fft_delta")]
    FftDelta,
}

impl CkaMode {
    pub fn name(self) -> &'static str {
        match self {
            CkaMode::RawUpdate => "raw_update",
            CkaMode::KnotsAligned => "knots_aligned",
            CkaMode::FftDelta => "fft_delta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_update" => Ok(CkaMode::RawUpdate),
            "knots_aligned" => Ok(CkaMode::KnotsAligned),
            "fft_delta" => Ok(CkaMode::FftDelta),
            other => Err(Error::Parse(format!(
                "unknown CKA mode {other:?}; expected raw_update, knots_aligned, or fft_delta"
            ))),
        }
    }
}

/// Pairwise CKA matrices: one `n×n` matrix per layer plus their unweighted
/// mean. Serializes as `{mode, layers, summary, probe}`.
#[derive(Debug, Clone, Serialize)]
pub struct CkaReport {
    pub mode: CkaMode,
    /// Layer key → `n×n` symmetric matrix, rows/columns in input order.
    pub layers: BTreeMap<String, Vec<Vec<f64>>>,
    /// Unweighted mean of the per-layer matrices.
    pub summary: Vec<Vec<f64>>,
    pub probe: ProbeRecord,
    /// Row/column labels (input order); not part of the JSON contract.
    #[serde(skip)]
    pub source_ids: Vec<String>,
}

impl CkaReport {
    /// Enforce the report invariants: unit diagonal, symmetry, and entries
    /// within `[−1e-6, 1+1e-6]`.
    pub fn validate(&self) -> Result<()> {
        for (name, matrix) in
            self.layers.iter().map(|(k, m)| (k.as_str(), m)).chain([("summary", &self.summary)])
        {
            let n = matrix.len();
            for (i, row) in matrix.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::Shape(format!("CKA matrix {name:?} is not square")));
                }
                for (j, &v) in row.iter().enumerate() {
                    if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                        return Err(Error::Shape(format!(
                            "CKA[{i}][{j}] = {v} out of range in {name:?}"
                        )));
                    }
                    if (matrix[j][i] - v).abs() > 1e-6 {
                        return Err(Error::Shape(format!("CKA matrix {name:?} is asymmetric")));
                    }
                }
                if (row[i] - 1.0).abs() > 1e-6 {
                    return Err(Error::Shape(format!(
                        "CKA diagonal [{i}] = {} must be 1 in {name:?}",
                        row[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// The summary matrix as CSV, with source-id row and column labels.
    pub fn summary_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("source_id");
        for id in &self.source_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, row) in self.summary.iter().enumerate() {
            out.push_str(&self.source_ids[i]);
            for v in row {
                out.push(',');
                out.push_str(&format!("{v:.12}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of the off-diagonal entries of a square matrix (the aggregate
/// alignment score a report is judged by).
pub fn mean_off_diagonal(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                sum += v;
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Pairwise CKA between every pair of task updates, layer by layer.
///
/// Each layer needs a probe batch keyed by that layer; its width must
/// match the layer's input dimension. `rank_tol` feeds the joint
/// decomposition in [`CkaMode::KnotsAligned`] mode and is ignored
/// otherwise. Layers are processed in parallel and aggregated in key
/// order, so reports are deterministic.
pub fn pairwise_update_cka(
    updates: &[TaskUpdate],
    probes: &BTreeMap<String, ActivationBatch>,
    mode: CkaMode,
    rank_tol: f64,
    probe: ProbeRecord,
) -> Result<CkaReport> {
    check_congruent(updates)?;
    let n = updates.len();
    let keys: Vec<&String> = updates[0].layers().keys().collect();
    for key in &keys {
        let batch = probes.get(*key).ok_or_else(|| {
            Error::MissingProbe(format!("no probe batch supplied for adapted layer {key:?}"))
        })?;
        let want = updates[0].layers()[*key].ncols();
        if batch.matrix.ncols() != want {
            return Err(Error::Shape(format!(
                "probe for layer {key:?} has {} columns, layer expects {want}",
                batch.matrix.ncols()
            )));
        }
    }

    let per_layer: Vec<(String, Vec<Vec<f64>>)> = keys
        .par_iter()
        .map(|key| -> Result<(String, Vec<Vec<f64>>)> {
            let x = &probes[*key].matrix;
            let feats: Vec<DMatrix<f64>> = match mode {
                CkaMode::RawUpdate | CkaMode::FftDelta => updates
                    .iter()
                    .map(|u| x * u.layers()[*key].transpose())
                    .collect(),
                CkaMode::KnotsAligned => {
                    let mats: Vec<&DMatrix<f64>> =
                        updates.iter().map(|u| &u.layers()[*key]).collect();
                    let dec = knots_decompose(&mats, ConcatAxis::Columns, rank_tol, key)?;
                    dec.blocks.iter().map(|v| x * v).collect()
                }
            };
            let mut matrix = vec![vec![0.0; n]; n];
            for i in 0..n {
                matrix[i][i] = 1.0;
                for j in 0..i {
                    let v = cka_linear(&feats[i], &feats[j])?;
                    matrix[i][j] = v;
                    matrix[j][i] = v;
                }
            }
            Ok(((*key).clone(), matrix))
        })
        .collect::<Result<_>>()?;

    let mut summary = vec![vec![0.0; n]; n];
    for (_, matrix) in &per_layer {
        for i in 0..n {
            for j in 0..n {
                summary[i][j] += matrix[i][j];
            }
        }
    }
    let count = per_layer.len() as f64;
    for row in &mut summary {
        for v in row.iter_mut() {
            *v /= count;
        }
    }

    let report = CkaReport {
        mode,
        layers: per_layer.into_iter().collect(),
        summary,
        probe,
        source_ids: updates.iter().map(|u| u.source_id().to_string()).collect(),
    };
    report.validate()?;
    Ok(report)
}

// ── task-vector cosine ──

/// Cosine similarity between two full flattened task vectors (all layers
/// concatenated in key-sorted order).
pub fn task_vector_cosine(u1: &TaskUpdate, u2: &TaskUpdate) -> Result<f64> {
    check_congruent(&[u1.clone(), u2.clone()])?;
    let a = u1.flatten();
    let b = u2.flatten();
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine similarity with a zero task vector is undefined".into(),
        ));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(dot / (norm_a * norm_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::merge_ta;

    fn batch(m: usize, d: usize, seed: u64, ctx: &str) -> DMatrix<f64> {
        standard_normal_matrix(m, d, seed, ctx)
    }

    fn update_of(layers: Vec<(&str, DMatrix<f64>)>, id: &str) -> TaskUpdate {
        let map: BTreeMap<String, DMatrix<f64>> =
            layers.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        TaskUpdate::new(map, id).unwrap()
    }

    /// HSIC-based oracle: CKA = HSIC(Kx,Ky)/√(HSIC(Kx,Kx)·HSIC(Ky,Ky))
    /// with linear-kernel Gram matrices K = X·Xᵀ and the centering matrix
    /// H = I − 11ᵀ/m, HSIC(K,L) = tr(K·H·L·H).
    fn cka_hsic_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let m = x.nrows();
        let h = DMatrix::<f64>::identity(m, m)
            - DMatrix::<f64>::from_element(m, m, 1.0 / m as f64);
        let kx = x * x.transpose();
        let ky = y * y.transpose();
        let hsic = |k: &DMatrix<f64>, l: &DMatrix<f64>| (k * &h * l * &h).trace();
        hsic(&kx, &ky) / (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt()
    }

    #[test]
    fn cka_matches_the_hsic_oracle() {
        for seed in 0..8u64 {
            let x = batch(16, 4, seed, "x");
            let y = batch(16, 3, seed, "y");
            let got = cka_linear(&x, &y).unwrap();
            let want = cka_hsic_oracle(&x, &y);
            assert!((got - want).abs() <= 1e-6, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn cka_self_similarity_and_invariances() {
        let x = batch(20, 5, 3, "x");
        assert!((cka_linear(&x, &x).unwrap() - 1.0).abs() <= 1e-6);

        // Orthogonal transform of the feature axes.
        let q = batch(5, 5, 7, "q").qr().q();
        let xq = &x * &q;
        assert!((cka_linear(&x, &xq).unwrap() - 1.0).abs() <= 1e-6);

        // Nonzero scaling, either sign.
        for c in [2.5, -0.7] {
            let xc = &x * c;
            assert!((cka_linear(&x, &xc).unwrap() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cka_is_symmetric_and_centering_absorbs_row_offsets() {
        let x = batch(12, 4, 11, "x");
        let y = batch(12, 6, 11, "y");
        let ab = cka_linear(&x, &y).unwrap();
        let ba = cka_linear(&y, &x).unwrap();
        assert!((ab - ba).abs() <= 1e-6);

        // Add a constant row-offset to one input: centering removes it.
        let mut shifted = y.clone();
        for i in 0..shifted.nrows() {
            for j in 0..shifted.ncols() {
                shifted[(i, j)] += 17.0 + j as f64;
            }
        }
        let shifted_cka = cka_linear(&x, &shifted).unwrap();
        assert!((ab - shifted_cka).abs() <= 1e-9);
    }

    #[test]
    fn constant_batches_are_degenerate() {
        let x = batch(8, 3, 13, "x");
        let c = DMatrix::from_element(8, 3, 4.2);
        assert_eq!(cka_linear(&x, &c).unwrap_err().code(), "DegenerateBatch");
        assert_eq!(cka_linear(&c, &x).unwrap_err().code(), "DegenerateBatch");
        let y = batch(9, 3, 13, "y");
        assert_eq!(cka_linear(&x, &y).unwrap_err().code(), "ShapeError");
    }

    #[test]
    fn identical_updates_have_unit_pairwise_cka_in_every_mode() {
        let w = batch(6, 5, 17, "w");
        let u1 = update_of(vec![("l", w.clone())], "a");
        let u2 = update_of(vec![("l", w)], "b");
        let mut dims = BTreeMap::new();
        dims.insert("l".to_string(), 5);
        let probes = gaussian_probes(&dims, 64, 1).unwrap();
        for mode in [CkaMode::RawUpdate, CkaMode::KnotsAligned, CkaMode::FftDelta] {
            let report = pairwise_update_cka(
                &[u1.clone(), u2.clone()],
                &probes,
                mode,
                0.0,
                ProbeRecord::gaussian(1, 64),
            )
            .unwrap();
            assert!(
                (report.summary[0][1] - 1.0).abs() <= 1e-6,
                "{}: {}",
                mode.name(),
                report.summary[0][1]
            );
        }
    }

    #[test]
    fn orthogonal_rank_one_updates_have_near_zero_raw_cka() {
        // ΔW⁽¹⁾ = u₁·a₁ᵀ and ΔW⁽²⁾ = u₂·a₂ᵀ with orthogonal output
        // directions and orthogonal input directions: their activations
        // on a shared Gaussian probe are independent 1-D features, so
        // CKA concentrates near 1/m.
        let o = 6;
        let d = 8;
        let mut d1 = DMatrix::<f64>::zeros(o, d);
        let mut d2 = DMatrix::<f64>::zeros(o, d);
        d1[(0, 0)] = 1.0; // u₁ = e₁, a₁ = e₁
        d2[(1, 1)] = 1.0; // u₂ = e₂, a₂ = e₂
        let u1 = update_of(vec![("l", d1)], "a");
        let u2 = update_of(vec![("l", d2)], "b");
        let mut dims = BTreeMap::new();
        dims.insert("l".to_string(), d);
        let probes = gaussian_probes(&dims, 512, 5).unwrap();
        let report = pairwise_update_cka(
            &[u1, u2],
            &probes,
            CkaMode::RawUpdate,
            0.0,
            ProbeRecord::gaussian(5, 512),
        )
        .unwrap();
        assert!(report.summary[0][1] < 0.2, "raw CKA {}", report.summary[0][1]);
    }

    #[test]
    fn alignment_raises_cka_on_the_misaligned_fixture() {
        // Both updates read the same two input directions but write them
        // to disjoint output directions with swapped emphasis. Raw
        // activations barely correlate (cross terms carry σ_L·σ_S); the
        // aligned right factors read identically (CKA → 1).
        let o = 8;
        let d = 6;
        let sigma_l = 1.0;
        let sigma_s = 0.05;
        let e = |i: usize, n: usize| {
            let mut v = DMatrix::<f64>::zeros(n, 1);
            v[(i, 0)] = 1.0;
            v
        };
        let (u1, u2, u3, u4) = (e(0, o), e(1, o), e(2, o), e(3, o));
        let (a1, a2) = (e(0, d), e(1, d));
        let d1 = sigma_l * &u1 * a1.transpose() + sigma_s * &u2 * a2.transpose();
        let d2 = sigma_s * &u3 * a1.transpose() + sigma_l * &u4 * a2.transpose();
        let ua = update_of(vec![("l", d1)], "a");
        let ub = update_of(vec![("l", d2)], "b");
        let mut dims = BTreeMap::new();
        dims.insert("l".to_string(), d);
        let probes = gaussian_probes(&dims, 256, 9).unwrap();
        let record = ProbeRecord::gaussian(9, 256);
        let raw = pairwise_update_cka(
            &[ua.clone(), ub.clone()],
            &probes,
            CkaMode::RawUpdate,
            0.0,
            record.clone(),
        )
        .unwrap();
        let aligned =
            pairwise_update_cka(&[ua, ub], &probes, CkaMode::KnotsAligned, 0.0, record).unwrap();
        let raw_mean = mean_off_diagonal(&raw.summary);
        let aligned_mean = mean_off_diagonal(&aligned.summary);
        assert!(
            aligned_mean > raw_mean,
            "aligned {aligned_mean} must exceed raw {raw_mean}"
        );
        assert!(raw_mean < 0.1, "raw {raw_mean}");
        assert!(aligned_mean > 0.9, "aligned {aligned_mean}");
    }

    #[test]
    fn permuting_updates_permutes_the_report() {
        let updates: Vec<TaskUpdate> = (0..3)
            .map(|t| update_of(vec![("l", batch(5, 4, 20 + t, "w"))], &format!("m{t}")))
            .collect();
        let mut dims = BTreeMap::new();
        dims.insert("l".to_string(), 4);
        let probes = gaussian_probes(&dims, 32, 2).unwrap();
        let record = ProbeRecord::gaussian(2, 32);
        let fwd = pairwise_update_cka(
            &updates,
            &probes,
            CkaMode::RawUpdate,
            0.0,
            record.clone(),
        )
        .unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<TaskUpdate> = perm.iter().map(|&i| updates[i].clone()).collect();
        let rev =
            pairwise_update_cka(&permuted, &probes, CkaMode::RawUpdate, 0.0, record).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let diff = (rev.summary[i][j] - fwd.summary[perm[i]][perm[j]]).abs();
                assert!(diff <= 1e-9, "entry ({i},{j}) moved by {diff}");
            }
        }
    }

    #[test]
    fn missing_probe_is_reported_by_layer() {
        let u1 = update_of(vec![("l", batch(4, 3, 31, "w"))], "a");
        let u2 = update_of(vec![("l", batch(4, 3, 32, "w"))], "b");
        let probes = BTreeMap::new();
        let err = pairwise_update_cka(
            &[u1, u2],
            &probes,
            CkaMode::RawUpdate,
            0.0,
            ProbeRecord::gaussian(0, 16),
        )
        .unwrap_err();
        assert_eq!(err.code(), "MissingProbe");
        assert!(err.to_string().contains("l"));
    }

    #[test]
    fn report_json_has_the_documented_shape() {
        let u1 = update_of(vec![("l", batch(4, 3, 41, "w"))], "a");
        let u2 = update_of(vec![("l", batch(4, 3, 42, "w"))], "b");
        let mut dims = BTreeMap::new();
        dims.insert("l".to_string(), 3);
        let probes = gaussian_probes(&dims, 16, 3).unwrap();
        let report = pairwise_update_cka(
            &[u1, u2],
            &probes,
            CkaMode::RawUpdate,
            0.0,
            ProbeRecord::gaussian(3, 16),
        )
        .unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(json["mode"], "raw_update");
        assert!(json["layers"]["l"].is_array());
        assert_eq!(json["summary"].as_array().unwrap().len(), 2);
        assert_eq!(json["probe"]["kind"], "gaussian");
        assert_eq!(json["probe"]["seed"], 3);
        assert_eq!(json["probe"]["m"], 16);

        let csv = report.summary_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "source_id,a,b");
        assert!(lines[1].starts_with("a,"));
    }

    #[test]
    fn cosine_of_the_orthogonal_toy_pair_is_exactly_zero() {
        let t1 = update_of(
            vec![
                ("w1", DMatrix::from_element(1, 1, 1.0)),
                ("w2", DMatrix::from_element(1, 1, 1.0)),
            ],
            "t1",
        );
        let t2 = update_of(
            vec![
                ("w1", DMatrix::from_element(1, 1, -1.0)),
                ("w2", DMatrix::from_element(1, 1, 1.0)),
            ],
            "t2",
        );
        assert_eq!(task_vector_cosine(&t1, &t2).unwrap(), 0.0);
        assert!((task_vector_cosine(&t1, &t1).unwrap() - 1.0).abs() <= 1e-12);
        let neg = update_of(
            vec![
                ("w1", DMatrix::from_element(1, 1, -1.0)),
                ("w2", DMatrix::from_element(1, 1, -1.0)),
            ],
            "neg",
        );
        assert!((task_vector_cosine(&t1, &neg).unwrap() + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant_and_rejects_zero_vectors() {
        let u = update_of(vec![("l", batch(3, 4, 51, "w"))], "a");
        let v = update_of(vec![("l", batch(3, 4, 52, "w"))], "b");
        let base = task_vector_cosine(&u, &v).unwrap();
        let scaled = update_of(vec![("l", &v.layers()["l"] * 7.5)], "b");
        assert!((task_vector_cosine(&u, &scaled).unwrap() - base).abs() <= 1e-12);

        let zero = update_of(vec![("l", DMatrix::zeros(3, 4))], "z");
        assert_eq!(task_vector_cosine(&u, &zero).unwrap_err().code(), "DegenerateVector");
    }

    #[test]
    fn orthogonal_task_vectors_can_still_merge_catastrophically() {
        // Two one-neuron models f(x) = w2·relu(w1·x) grown from zero
        // weights: one fires on positive inputs, the other on negative.
        // Their task vectors are exactly orthogonal, yet the α-scaled sum
        // zeroes the first layer, so the merged model outputs 0
        // everywhere — flipping the "fires" prediction of model 1 on
        // every positive probe and of model 2 on every negative probe,
        // for every α in the tuning grid.
        let t1 = update_of(
            vec![
                ("w1", DMatrix::from_element(1, 1, 1.0)),
                ("w2", DMatrix::from_element(1, 1, 1.0)),
            ],
            "t1",
        );
        let t2 = update_of(
            vec![
                ("w1", DMatrix::from_element(1, 1, -1.0)),
                ("w2", DMatrix::from_element(1, 1, 1.0)),
            ],
            "t2",
        );
        assert_eq!(task_vector_cosine(&t1, &t2).unwrap(), 0.0);

        let forward = |u: &TaskUpdate, x: f64| -> f64 {
            let h = (u.layers()["w1"][(0, 0)] * x).max(0.0);
            u.layers()["w2"][(0, 0)] * h
        };
        let fires = |y: f64| y > 0.0;
        for i in 1..=10 {
            let alpha = i as f64 / 10.0;
            let merged = merge_ta(&[t1.clone(), t2.clone()], alpha).unwrap().to_task_update();
            for x in [0.3, 1.5] {
                assert_ne!(
                    fires(forward(&merged, x)),
                    fires(forward(&t1, x)),
                    "α={alpha}, x={x}: model 1's positive-side prediction must flip"
                );
                assert_ne!(
                    fires(forward(&merged, -x)),
                    fires(forward(&t2, -x)),
                    "α={alpha}, x={x}: model 2's negative-side prediction must flip"
                );
            }
        }
    }
}
