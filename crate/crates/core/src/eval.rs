//! Desk-scale evaluation: classification metrics over pre-extracted
//! features, task-specific linear heads, and the union-label joint
//! evaluation that scores every example against every task's labels at
//! once.
//!
//! A "model" here is a [`TensorMap`] of weight matrices; a forward pass
//! multiplies the features through an ordered list of named layers
//! (optionally with a ReLU between consecutive layers) and scores the
//! result against a per-task head. This keeps the harness framework-free
//! while exercising exactly the metrics a merged checkpoint is judged by:
//! absolute accuracy, accuracy normalized by the finetuned baseline, and
//! Hits@k over a joint label space.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::container::{load_tensor_map, save_tensor_map};
use crate::error::{Error, Result};
use crate::seed::sample_indices;
use crate::tensor::{Tensor, TensorMap};

// ── tasks ──

/// Which portion of a task's examples this is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!(
                "unknown split {other:?}; expected \"validation\" or \"test\""
            ))),
        }
    }
}

/// One classification task: `m` examples as feature rows, integer labels,
/// human-readable label names, and the task's own classification head
/// (one row per label, applied to the backbone output).
#[derive(Debug, Clone)]
pub struct EvalTask {
    pub name: String,
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub head: DMatrix<f64>,
    pub split: Split,
}

impl EvalTask {
    pub fn new(
        name: impl Into<String>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
        label_names: Vec<String>,
        head: DMatrix<f64>,
        split: Split,
    ) -> Result<Self> {
        let name = name.into();
        if features.nrows() == 0 {
            return Err(Error::Shape(format!("task {name:?} has no examples")));
        }
        if labels.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "task {name:?}: {} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        let classes = label_names.len();
        if head.nrows() != classes {
            return Err(Error::LabelSpec(format!(
                "task {name:?}: head has {} rows but {} label names",
                head.nrows(),
                classes
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelSpec(format!(
                "task {name:?}: label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { name, features, labels, label_names, head, split })
    }

    /// Number of examples.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one example
    }

    /// Number of classes.
    pub fn classes(&self) -> usize {
        self.label_names.len()
    }

    /// The task restricted to `rows` (which must be strictly increasing
    /// and in range), with the given split tag.
    fn select(&self, rows: &[usize], split: Split) -> Result<Self> {
        let mut features = DMatrix::zeros(rows.len(), self.features.ncols());
        let mut labels = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            if r >= self.len() {
                return Err(Error::Shape(format!("row {r} out of range")));
            }
            features.row_mut(out).copy_from(&self.features.row(r));
            labels.push(self.labels[r]);
        }
        EvalTask::new(
            self.name.clone(),
            features,
            labels,
            self.label_names.clone(),
            self.head.clone(),
            split,
        )
    }
}

// ── task container I/O ──

const FEATURES_KEY: &str = "features";
const LABELS_KEY: &str = "labels";
const HEAD_KEY: &str = "head";
const NAME_KEY: &str = "name";
const LABEL_NAMES_KEY: &str = "label_names";
const SPLIT_KEY: &str = "split";

/// Encode a task into the tensor-container layout: tensors `features`
/// (m×d), `labels` (length-m, stored as floats), `head` (c×d), and
/// metadata `name`, `label_names` (JSON array), `split`.
pub fn task_to_tensor_map(task: &EvalTask) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    map.insert(FEATURES_KEY, Tensor::from_matrix(&task.features))?;
    map.insert(LABELS_KEY, Tensor::vector(task.labels.iter().map(|&l| l as f64).collect())?)?;
    map.insert(HEAD_KEY, Tensor::from_matrix(&task.head))?;
    map.set_metadata(NAME_KEY, task.name.clone());
    map.set_metadata(
        LABEL_NAMES_KEY,
        serde_json::to_string(&task.label_names).expect("strings always serialize"),
    );
    map.set_metadata(SPLIT_KEY, task.split.name().to_string());
    Ok(map)
}

/// Decode a task from the container layout produced by
/// [`task_to_tensor_map`].
pub fn task_from_tensor_map(map: &TensorMap) -> Result<EvalTask> {
    let features = map.require(FEATURES_KEY)?.to_matrix()?;
    let head = map.require(HEAD_KEY)?.to_matrix()?;
    let raw_labels = map.require(LABELS_KEY)?;
    if raw_labels.rank() != 1 {
        return Err(Error::Parse("labels must be a rank-1 tensor".into()));
    }
    let labels: Vec<usize> = raw_labels
        .data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                Err(Error::Parse(format!("label {v} is not a non-negative integer")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<_>>()?;
    let name = map
        .metadata()
        .get(NAME_KEY)
        .ok_or_else(|| Error::Parse("task container is missing \"name\" metadata".into()))?
        .clone();
    let label_names: Vec<String> = match map.metadata().get(LABEL_NAMES_KEY) {
        Some(raw) => serde_json::from_str(raw).map_err(|e| {
            Error::Parse(format!("\"label_names\" metadata is not a JSON string array: {e}"))
        })?,
        None => {
            return Err(Error::Parse("task container is missing \"label_names\" metadata".into()))
        }
    };
    let split = match map.metadata().get(SPLIT_KEY) {
        Some(raw) => Split::parse(raw)?,
        None => Split::Test,
    };
    EvalTask::new(name, features, labels, label_names, head, split)
}

pub fn save_task(task: &EvalTask, path: impl AsRef<Path>) -> Result<()> {
    save_tensor_map(path, &task_to_tensor_map(task)?)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<EvalTask> {
    task_from_tensor_map(&load_tensor_map(path)?)
}

// ── forward pass and accuracy ──

/// The ordered weight keys forming the backbone, applied left to right,
/// with an optional elementwise ReLU between consecutive layers (never
/// after the last). An empty list scores the head directly on the
/// features.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ForwardSpec {
    #[serde(default)]
    pub layer_keys: Vec<String>,
    #[serde(default)]
    pub relu_between: bool,
}

/// Push the feature rows through the named layers: each layer key must
/// hold a rank-2 tensor `W` (out×in), and rows transform as `h ↦ W·h`.
pub fn forward_features(
    weights: &TensorMap,
    spec: &ForwardSpec,
    features: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut h = features.clone();
    for (idx, key) in spec.layer_keys.iter().enumerate() {
        let w = weights.require(key)?.to_matrix()?;
        if w.ncols() != h.ncols() {
            return Err(Error::Shape(format!(
                "layer {key:?} expects {} inputs but the running batch has {} columns",
                w.ncols(),
                h.ncols()
            )));
        }
        h *= w.transpose();
        if spec.relu_between && idx + 1 < spec.layer_keys.len() {
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
    Ok(h)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-example logits for `task` under `weights`: backbone output rows
/// scored against the task head (`logits = h·headᵀ`, one row per example,
/// one column per class).
pub fn task_logits(
    weights: &TensorMap,
    task: &EvalTask,
    spec: &ForwardSpec,
) -> Result<DMatrix<f64>> {
    let h = forward_features(weights, spec, &task.features)?;
    if task.head.ncols() != h.ncols() {
        return Err(Error::Shape(format!(
            "task {:?}: head expects {} features but the backbone produced {}",
            task.name,
            task.head.ncols(),
            h.ncols()
        )));
    }
    Ok(h * task.head.transpose())
}

/// Fraction of examples whose argmax logit matches the label.
pub fn evaluate(weights: &TensorMap, task: &EvalTask, spec: &ForwardSpec) -> Result<f64> {
    let logits = task_logits(weights, task, spec)?;
    let correct = (0..task.len())
        .filter(|&i| {
            let row: Vec<f64> = logits.row(i).iter().copied().collect();
            argmax(&row) == task.labels[i]
        })
        .count();
    Ok(correct as f64 / task.len() as f64)
}

/// Merged-model accuracy as a fraction of the finetuned model's accuracy
/// on the same task. May exceed 1.
pub fn normalized_accuracy(merged_acc: f64, finetuned_acc: f64) -> Result<f64> {
    if !finetuned_acc.is_finite() || finetuned_acc <= 0.0 {
        return Err(Error::DegenerateBaseline(format!(
            "finetuned accuracy must be positive, got {finetuned_acc}"
        )));
    }
    Ok(merged_acc / finetuned_acc)
}

// ── Hits@k ──

/// Whether `true_idx` ranks within the `k` highest logits, counting a
/// competitor as ahead when its logit is larger, or equal with a lower
/// index (the same tie rule as [`argmax`]).
pub fn hits_at_k(logits: &[f64], true_idx: usize, k: usize) -> Result<bool> {
    let classes = logits.len();
    if k == 0 || k > classes {
        return Err(Error::InvalidK(format!(
            "k must be in [1, {classes}], got {k}"
        )));
    }
    if true_idx >= classes {
        return Err(Error::LabelSpec(format!(
            "true index {true_idx} out of range for {classes} classes"
        )));
    }
    let target = logits[true_idx];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < true_idx))
        .count();
    Ok(ahead < k)
}

/// Fraction of rows whose label hits the top `k`.
pub fn aggregate_hits_at_k(logits: &DMatrix<f64>, labels: &[usize], k: usize) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::EmptyInput("no rows to score".into()));
    }
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        if hits_at_k(&row, label, k)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

// ── joint label space ──

/// The deduplicated union of several tasks' labels, with each task's
/// remapping into it.
#[derive(Debug, Clone)]
pub struct JointLabelSpace {
    /// First-seen original label strings, in encounter order.
    pub union_labels: Vec<String>,
    /// `remaps[t][l]` = union index of task `t`'s label `l`.
    pub remaps: Vec<Vec<usize>>,
}

/// Label strings are considered equal after trimming surrounding
/// whitespace and lowercasing.
fn canonical_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Union the tasks' label spaces (exact string equality after trim +
/// lowercase; the first-seen spelling and head row represent each label)
/// and stack all examples into one joint task with no task-identity
/// information.
pub fn build_joint_space(tasks: &[EvalTask]) -> Result<(JointLabelSpace, EvalTask)> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("no tasks to join".into()));
    }
    let feature_dim = tasks[0].features.ncols();
    let head_dim = tasks[0].head.ncols();
    for t in tasks {
        if t.features.ncols() != feature_dim {
            return Err(Error::Shape(format!(
                "task {:?} has feature width {}, expected {feature_dim}",
                t.name,
                t.features.ncols()
            )));
        }
        if t.head.ncols() != head_dim {
            return Err(Error::Shape(format!(
                "task {:?} has head width {}, expected {head_dim}",
                t.name,
                t.head.ncols()
            )));
        }
    }

    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut union_labels: Vec<String> = Vec::new();
    let mut union_head_rows: Vec<usize> = Vec::new(); // (task, row) flattened below
    let mut union_head = Vec::<(usize, usize)>::new();
    let mut remaps = Vec::with_capacity(tasks.len());
    for (t_idx, task) in tasks.iter().enumerate() {
        let mut remap = Vec::with_capacity(task.classes());
        for (l_idx, label) in task.label_names.iter().enumerate() {
            let key = canonical_label(label);
            let union_idx = match seen.get(&key) {
                Some(&idx) => idx,
                None => {
                    let idx = union_labels.len();
                    seen.insert(key, idx);
                    union_labels.push(label.clone());
                    union_head.push((t_idx, l_idx));
                    union_head_rows.push(idx);
                    idx
                }
            };
            remap.push(union_idx);
        }
        remaps.push(remap);
    }

    let mut head = DMatrix::zeros(union_labels.len(), head_dim);
    for (u_idx, &(t_idx, l_idx)) in union_head.iter().enumerate() {
        head.row_mut(u_idx).copy_from(&tasks[t_idx].head.row(l_idx));
    }

    let total: usize = tasks.iter().map(|t| t.len()).sum();
    let mut features = DMatrix::zeros(total, feature_dim);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (t_idx, task) in tasks.iter().enumerate() {
        for i in 0..task.len() {
            features.row_mut(row).copy_from(&task.features.row(i));
            labels.push(remaps[t_idx][task.labels[i]]);
            row += 1;
        }
    }

    let joint = EvalTask::new("joint", features, labels, union_labels.clone(), head, Split::Test)?;
    Ok((JointLabelSpace { union_labels, remaps }, joint))
}

// ── validation splitting ──

/// Carve a seeded validation sample out of a task: `fraction` of the rows
/// (at least 1, and at least 1 left behind) become the validation task,
/// the rest stay as the evaluation task. Row choice is keyed by
/// `(seed, task name)`, so reruns and reorderings reproduce the split.
pub fn split_validation(task: &EvalTask, fraction: f64, seed: u64) -> Result<(EvalTask, EvalTask)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let m = task.len();
    if m < 2 {
        return Err(Error::Shape(format!(
            "task {:?} has {m} example(s); splitting needs at least 2",
            task.name
        )));
    }
    let count = ((m as f64 * fraction).round() as usize).clamp(1, m - 1);
    let val_rows = sample_indices(m, count, seed, &format!("split:{}", task.name));
    let val_set: std::collections::BTreeSet<usize> = val_rows.iter().copied().collect();
    let rest: Vec<usize> = (0..m).filter(|r| !val_set.contains(r)).collect();
    Ok((task.select(&val_rows, Split::Validation)?, task.select(&rest, Split::Test)?))
}
