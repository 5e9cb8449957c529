//! Hyperparameter sweeps over merge configurations, scored on validation
//! data.
//!
//! The search is the two-phase linear scheme used for tuning merge rules
//! when more than one hyperparameter is in play: first sweep the scaling
//! coefficient `α` with the pruning hyperparameter pinned at its default
//! (top-k 30 for trimming rules, drop probability 0.9 for random-drop
//! rules), then pin the best `α` and sweep the pruning hyperparameter.
//! Random-drop rules additionally try every seed in the grid at each step
//! and keep the one that validates best. Linear search can miss the joint
//! optimum; an exhaustive full-grid pass can be requested for comparison
//! and is reported separately.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::align::run_merge;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_hits_at_k, build_joint_space, evaluate, normalized_accuracy, split_validation,
    task_logits, EvalTask, ForwardSpec, Split,
};
use crate::merge::{ConcatAxis, MergeConfig, MergeMethod};
use crate::tensor::TensorMap;
use crate::update::{apply_update, TaskUpdate};

/// Fraction of a test split carved off as validation when a task arrives
/// without one.
pub const VALIDATION_FRACTION: f64 = 0.2;

// ── grids ──

/// The candidate values each hyperparameter axis ranges over.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepGrids {
    /// Scaling coefficients.
    pub alphas: Vec<f64>,
    /// Trim percentages (for the trimming rules).
    pub topk: Vec<f64>,
    /// Drop probabilities (for the random-drop rules).
    pub dare_p: Vec<f64>,
    /// Drop-mask seeds (for the random-drop rules).
    pub seeds: Vec<u64>,
}

impl Default for SweepGrids {
    /// The standard tuning grids: `α` and top-k on a ten-point ladder,
    /// drop probability from 0.99 down to 0.1, and five fixed seeds.
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            topk: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
            dare_p: vec![0.99, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1],
            seeds: vec![420, 421, 422, 423, 424],
        }
    }
}

/// Default pruning value pinned during the `α` pass.
pub const DEFAULT_TOPK_PERCENT: f64 = 30.0;
/// Default drop probability pinned during the `α` pass.
pub const DEFAULT_DARE_P: f64 = 0.9;

/// What a grid point is scored by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepObjective {
    /// Mean over tasks of merged accuracy divided by that task's
    /// finetuned-model accuracy. Tasks are paired with updates by
    /// position.
    #[serde(rename = "mean_normalized_accuracy")]
    MeanNormalizedAccuracy,
    /// Hits@1 over the union-label joint task built from all tasks.
    #[serde(rename = "joint_hits_at_1")]
    JointHitsAt1,
}

impl SweepObjective {
    pub fn name(self) -> &'static str {
        match self {
            SweepObjective::MeanNormalizedAccuracy => "mean_normalized_accuracy",
            SweepObjective::JointHitsAt1 => "joint_hits_at_1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean_normalized_accuracy" => Ok(SweepObjective::MeanNormalizedAccuracy),
            "joint_hits_at_1" => Ok(SweepObjective::JointHitsAt1),
            other => Err(Error::Parse(format!(
                "unknown sweep objective {other:?}; expected mean_normalized_accuracy or joint_hits_at_1"
            ))),
        }
    }
}

/// Everything a sweep needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSettings {
    pub method: MergeMethod,
    #[serde(default)]
    pub grids: SweepGrids,
    pub objective: SweepObjective,
    /// Also score the full grid (reported separately from the linear
    /// search).
    #[serde(default)]
    pub exhaustive: bool,
    /// Seed for carving validation splits out of test-only tasks.
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    /// Concatenation axis for the jointly-aligned methods.
    #[serde(default = "default_axis")]
    pub concat_axis: ConcatAxis,
    /// Rank cutoff for the jointly-aligned methods.
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_split_seed() -> u64 {
    0
}

fn default_axis() -> ConcatAxis {
    ConcatAxis::Columns
}

fn default_rank_tol() -> f64 {
    1e-8
}

impl SweepSettings {
    pub fn new(method: MergeMethod, objective: SweepObjective) -> Self {
        Self {
            method,
            grids: SweepGrids::default(),
            objective,
            exhaustive: false,
            split_seed: default_split_seed(),
            concat_axis: default_axis(),
            rank_tol: default_rank_tol(),
        }
    }
}

// ── results ──

/// One evaluated configuration.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    /// Which pass produced it: `"alpha"` or `"pruning"`.
    pub phase: String,
    pub config: MergeConfig,
    pub score: f64,
}

/// Outcome of a sweep: every configuration the linear search evaluated
/// (in evaluation order), the winner under the tie-break rules, and —
/// when requested — the full-grid winner for comparison.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub objective: SweepObjective,
    pub grid_points: Vec<GridPoint>,
    pub best: MergeConfig,
    pub best_score: f64,
    /// One human-readable line per evaluation, in order (exhaustive-only
    /// evaluations included).
    pub search_trace: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exhaustive_best: Option<MergeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exhaustive_best_score: Option<f64>,
    /// Present when some task arrived without a validation split and one
    /// was carved out of its test examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_split_seed: Option<u64>,
}

/// The value the pruning tie-break compares: trim percentage for trimming
/// rules, drop probability for random-drop rules, none for plain scaled
/// summation.
fn pruning_value(config: &MergeConfig) -> f64 {
    match config.method {
        MergeMethod::Ties | MergeMethod::KnotsTies => config.topk_percent,
        MergeMethod::DareTies | MergeMethod::KnotsDareTies => config.dare_p,
        MergeMethod::Ta => 0.0,
    }
}

fn seed_value(config: &MergeConfig) -> u64 {
    if config.method.uses_dare() {
        config.seeds.first().copied().unwrap_or(0)
    } else {
        0
    }
}

/// Strict "is `a` preferred over `b`": higher score, then smaller `α`,
/// then smaller pruning value, then smaller seed.
fn preferred(a: &GridPoint, b: &GridPoint) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.config.alpha != b.config.alpha {
        return a.config.alpha < b.config.alpha;
    }
    let (pa, pb) = (pruning_value(&a.config), pruning_value(&b.config));
    if pa != pb {
        return pa < pb;
    }
    seed_value(&a.config) < seed_value(&b.config)
}

fn best_of(points: &[GridPoint]) -> &GridPoint {
    let mut best = &points[0];
    for p in &points[1..] {
        if preferred(p, best) {
            best = p;
        }
    }
    best
}

fn describe(config: &MergeConfig) -> String {
    let mut s = format!("{} alpha={}", config.method.name(), config.alpha);
    match config.method {
        MergeMethod::Ties | MergeMethod::KnotsTies => {
            s.push_str(&format!(" topk={}", config.topk_percent));
        }
        MergeMethod::DareTies | MergeMethod::KnotsDareTies => {
            s.push_str(&format!(" p={} seed={}", config.dare_p, seed_value(config)));
        }
        MergeMethod::Ta => {}
    }
    s
}

/// Key identifying a configuration within one sweep (method, axis, and
/// rank tolerance are fixed across the sweep).
fn config_key(config: &MergeConfig) -> (u64, u64, u64, u64) {
    (
        config.alpha.to_bits(),
        config.topk_percent.to_bits(),
        config.dare_p.to_bits(),
        seed_value(config),
    )
}

// ── scoring ──

struct SweepContext<'a> {
    updates: &'a [TaskUpdate],
    base: &'a TensorMap,
    forward: &'a ForwardSpec,
    objective: SweepObjective,
    val_tasks: Vec<EvalTask>,
    /// Finetuned-model validation accuracy per task (normalized objective
    /// only).
    baselines: Vec<f64>,
    /// Union-label task over the validation examples (joint objective
    /// only).
    joint: Option<EvalTask>,
}

impl SweepContext<'_> {
    fn score(&self, config: &MergeConfig) -> Result<f64> {
        let merged = run_merge(self.updates, config)?;
        let weights = apply_update(self.base, &merged.to_task_update())?;
        match self.objective {
            SweepObjective::MeanNormalizedAccuracy => {
                let mut total = 0.0;
                for (task, &baseline) in self.val_tasks.iter().zip(&self.baselines) {
                    let acc = evaluate(&weights, task, self.forward)?;
                    total += normalized_accuracy(acc, baseline)?;
                }
                Ok(total / self.val_tasks.len() as f64)
            }
            SweepObjective::JointHitsAt1 => {
                let joint = self.joint.as_ref().expect("joint task prepared");
                let logits = task_logits(&weights, joint, self.forward)?;
                aggregate_hits_at_k(&logits, &joint.labels, 1)
            }
        }
    }
}

// ── the sweep ──

fn validate_grids(grids: &SweepGrids, method: MergeMethod) -> Result<()> {
    if grids.alphas.is_empty() {
        return Err(Error::InvalidGrid("the alpha grid is empty".into()));
    }
    match method {
        MergeMethod::Ties | MergeMethod::KnotsTies => {
            if grids.topk.is_empty() {
                return Err(Error::InvalidGrid("the top-k grid is empty".into()));
            }
        }
        MergeMethod::DareTies | MergeMethod::KnotsDareTies => {
            if grids.dare_p.is_empty() {
                return Err(Error::InvalidGrid("the drop-probability grid is empty".into()));
            }
            if grids.seeds.is_empty() {
                return Err(Error::InvalidGrid("the seed grid is empty".into()));
            }
        }
        MergeMethod::Ta => {}
    }
    Ok(())
}

/// All candidate configs at one `(α, pruning)` cell — one per seed for the
/// random-drop rules, exactly one otherwise.
fn cell_configs(
    settings: &SweepSettings,
    alpha: f64,
    pruning: Option<f64>,
) -> Vec<MergeConfig> {
    let mut template = MergeConfig::new(settings.method);
    template.alpha = alpha;
    template.concat_axis = settings.concat_axis;
    template.rank_tol = settings.rank_tol;
    match settings.method {
        MergeMethod::Ta => vec![template],
        MergeMethod::Ties | MergeMethod::KnotsTies => {
            template.topk_percent = pruning.unwrap_or(DEFAULT_TOPK_PERCENT);
            vec![template]
        }
        MergeMethod::DareTies | MergeMethod::KnotsDareTies => {
            template.dare_p = pruning.unwrap_or(DEFAULT_DARE_P);
            settings
                .grids
                .seeds
                .iter()
                .map(|&s| {
                    let mut c = template.clone();
                    c.seeds = vec![s];
                    c
                })
                .collect()
        }
    }
}

/// Tune the merge rule on validation data with the two-phase linear
/// search (and optionally score the exhaustive grid for comparison).
///
/// For the normalized-accuracy objective, `tasks[i]` is the task
/// `updates[i]` was finetuned for. Tasks tagged [`Split::Test`] have a
/// seeded validation sample carved out; tasks tagged
/// [`Split::Validation`] are used whole.
pub fn sweep(
    updates: &[TaskUpdate],
    base: &TensorMap,
    tasks: &[EvalTask],
    forward: &ForwardSpec,
    settings: &SweepSettings,
) -> Result<SweepResult> {
    validate_grids(&settings.grids, settings.method)?;
    if tasks.is_empty() {
        return Err(Error::EmptyInput("no tasks to sweep over".into()));
    }

    // Validation data.
    let mut val_tasks = Vec::with_capacity(tasks.len());
    let mut split_used = false;
    for task in tasks {
        match task.split {
            Split::Validation => val_tasks.push(task.clone()),
            Split::Test => {
                let (val, _) = split_validation(task, VALIDATION_FRACTION, settings.split_seed)?;
                val_tasks.push(val);
                split_used = true;
            }
        }
    }

    let baselines = match settings.objective {
        SweepObjective::MeanNormalizedAccuracy => {
            if updates.len() != tasks.len() {
                return Err(Error::InvalidConfig(format!(
                    "normalized accuracy pairs tasks with updates by position, got {} tasks for {} updates",
                    tasks.len(),
                    updates.len()
                )));
            }
            val_tasks
                .iter()
                .zip(updates)
                .map(|(task, update)| {
                    let finetuned = apply_update(base, update)?;
                    evaluate(&finetuned, task, forward)
                })
                .collect::<Result<Vec<f64>>>()?
        }
        SweepObjective::JointHitsAt1 => Vec::new(),
    };
    let joint = match settings.objective {
        SweepObjective::JointHitsAt1 => Some(build_joint_space(&val_tasks)?.1),
        SweepObjective::MeanNormalizedAccuracy => None,
    };

    let ctx = SweepContext {
        updates,
        base,
        forward,
        objective: settings.objective,
        val_tasks,
        baselines,
        joint,
    };

    let mut grid_points: Vec<GridPoint> = Vec::new();
    let mut trace: Vec<String> = Vec::new();
    let mut cache: HashMap<(u64, u64, u64, u64), f64> = HashMap::new();

    let run_phase = |phase: &str,
                         configs: Vec<MergeConfig>,
                         grid_points: &mut Vec<GridPoint>,
                         trace: &mut Vec<String>,
                         cache: &mut HashMap<(u64, u64, u64, u64), f64>|
     -> Result<()> {
        let fresh: Vec<MergeConfig> = configs
            .into_iter()
            .filter(|c| !cache.contains_key(&config_key(c)))
            .collect();
        let scores: Vec<f64> =
            fresh.par_iter().map(|c| ctx.score(c)).collect::<Result<_>>()?;
        for (config, score) in fresh.into_iter().zip(scores) {
            cache.insert(config_key(&config), score);
            trace.push(format!("{phase}: {} score={score:.6}", describe(&config)));
            grid_points.push(GridPoint { phase: phase.to_string(), config, score });
        }
        Ok(())
    };

    // Phase 1: sweep α at the method's default pruning value.
    let alpha_configs: Vec<MergeConfig> = settings
        .grids
        .alphas
        .iter()
        .flat_map(|&a| cell_configs(settings, a, None))
        .collect();
    run_phase("alpha", alpha_configs, &mut grid_points, &mut trace, &mut cache)?;
    let best_alpha = best_of(&grid_points).config.alpha;

    // Phase 2: pin the best α, sweep the pruning hyperparameter.
    let pruning_grid: &[f64] = match settings.method {
        MergeMethod::Ta => &[],
        MergeMethod::Ties | MergeMethod::KnotsTies => &settings.grids.topk,
        MergeMethod::DareTies | MergeMethod::KnotsDareTies => &settings.grids.dare_p,
    };
    let pruning_configs: Vec<MergeConfig> = pruning_grid
        .iter()
        .flat_map(|&p| cell_configs(settings, best_alpha, Some(p)))
        .collect();
    run_phase("pruning", pruning_configs, &mut grid_points, &mut trace, &mut cache)?;

    let winner = best_of(&grid_points).clone();

    // Optional exhaustive pass over the full cross product, reported
    // separately so the linear-search result stays what it was.
    let (exhaustive_best, exhaustive_best_score) = if settings.exhaustive {
        let full: Vec<MergeConfig> = match settings.method {
            MergeMethod::Ta => settings
                .grids
                .alphas
                .iter()
                .flat_map(|&a| cell_configs(settings, a, None))
                .collect(),
            _ => settings
                .grids
                .alphas
                .iter()
                .flat_map(|&a| {
                    pruning_grid
                        .iter()
                        .flat_map(move |&p| cell_configs(settings, a, Some(p)))
                })
                .collect(),
        };
        let fresh: Vec<MergeConfig> = full
            .iter()
            .filter(|c| !cache.contains_key(&config_key(c)))
            .cloned()
            .collect();
        let scores: Vec<f64> = fresh.par_iter().map(|c| ctx.score(c)).collect::<Result<_>>()?;
        for (config, score) in fresh.into_iter().zip(scores) {
            trace.push(format!("exhaustive: {} score={score:.6}", describe(&config)));
            cache.insert(config_key(&config), score);
        }
        let full_points: Vec<GridPoint> = full
            .into_iter()
            .map(|config| {
                let score = cache[&config_key(&config)];
                GridPoint { phase: "exhaustive".to_string(), config, score }
            })
            .collect();
        let best = best_of(&full_points);
        (Some(best.config.clone()), Some(best.score))
    } else {
        (None, None)
    };

    Ok(SweepResult {
        objective: settings.objective,
        grid_points,
        best: winner.config,
        best_score: winner.score,
        search_trace: trace,
        exhaustive_best,
        exhaustive_best_score,
        validation_split_seed: split_used.then_some(settings.split_seed),
    })
}

// ── fixtures for tests (also reused by integration tests) ──

/// A two-task scenario whose tuning landscape peaks at exactly `α = 0.5`
/// under plain scaled summation with the normalized-accuracy objective.
///
/// Both updates are the same matrix `T`, so the merged backbone at scale
/// `α` is `B + 2αT`. The base contributes decision direction `(1, 0)` and
/// the update contributes `(0, 2α)`, so a sample `(−2a, 1)` is classified
/// positive exactly when `α > a`, and its mirror `(2a, −1)` positive
/// exactly when `α < a`. Thresholds at 0.43/0.47 and 0.53/0.57 leave
/// `α = 0.5` the only ten-point-grid value that classifies all four
/// samples of each task correctly.
pub fn symmetric_alpha_fixture() -> (Vec<TaskUpdate>, TensorMap, Vec<EvalTask>, ForwardSpec) {
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    let base_w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let t = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.0, -0.5]);

    let mut base = TensorMap::new();
    base.insert("w", Tensor::from_matrix(&base_w)).unwrap();

    let updates: Vec<TaskUpdate> = (0..2)
        .map(|i| {
            let mut layers = BTreeMap::new();
            layers.insert("w".to_string(), t.clone());
            TaskUpdate::new(layers, format!("task{i}")).unwrap()
        })
        .collect();

    // Four samples per task: two that need α above a threshold, two that
    // need it below. Class 0 means "row-0 logit wins".
    let samples = [
        (-0.86, 1.0), // correct iff α > 0.43
        (-0.94, 1.0), // correct iff α > 0.47
        (1.06, -1.0), // correct iff α < 0.53
        (1.14, -1.0), // correct iff α < 0.57
    ];
    let mut features = DMatrix::zeros(4, 2);
    for (i, &(x0, x1)) in samples.iter().enumerate() {
        features[(i, 0)] = x0;
        features[(i, 1)] = x1;
    }
    let labels = vec![0, 0, 0, 0];
    let head = DMatrix::identity(2, 2);
    let tasks: Vec<EvalTask> = (0..2)
        .map(|i| {
            EvalTask::new(
                format!("task{i}"),
                features.clone(),
                labels.clone(),
                vec!["pos".to_string(), "neg".to_string()],
                head.clone(),
                Split::Validation,
            )
            .unwrap()
        })
        .collect();

    let forward = ForwardSpec { layer_keys: vec!["w".to_string()], relu_between: false };
    (updates, base, tasks, forward)
}
