//! The five commands. Each is a pure function of (config, input files):
//! inputs are validated up front, all user-visible ordering is key-sorted,
//! and every report embeds a SHA-256 digest of each input it consumed.

use std::collections::BTreeMap;
use std::path::Path;

use knots_core::adapter::{load_adapter, KeyConvention};
use knots_core::analysis::{
    gaussian_probes, mean_off_diagonal, pairwise_update_cka, ActivationBatch, CkaMode,
    ProbeRecord,
};
use knots_core::container::{
    load_tensor_map, load_tensor_map_with, tensor_map_to_bytes, LoadOptions,
};
use knots_core::eval::{
    build_joint_space, evaluate, load_task, normalized_accuracy, split_validation, task_logits,
    EvalTask, Split,
};
use knots_core::merge::{MergeConfig, MergeMethod};
use knots_core::sweep::{sweep, SweepObjective, SweepSettings, VALIDATION_FRACTION};
use knots_core::update::{apply_update, update_between, TaskUpdate};
use knots_core::{run_merge, TensorMap};
use serde_json::json;

use crate::config::{EvalSection, ProbeSection, RunConfig, SweepSection};
use crate::fail::{CliFailure, Result};
use crate::io::{digests, path_with_suffix, sha256_file, write_atomic, write_json_report};

// ── shared loading ──

fn convention(config: &RunConfig) -> Result<KeyConvention> {
    Ok(KeyConvention::parse(config.key_convention.as_deref().unwrap_or("lora"))?)
}

fn require_path<'a>(field: &'a Option<String>, what: &str) -> Result<&'a str> {
    field
        .as_deref()
        .ok_or_else(|| CliFailure::invalid(format!("{what} is required")))
}

fn load_updates(config: &RunConfig) -> Result<Vec<TaskUpdate>> {
    if config.adapters.is_empty() {
        return Err(CliFailure::invalid("adapters must list at least one checkpoint"));
    }
    let conv = convention(config)?;
    config
        .adapters
        .iter()
        .map(|p| Ok(load_adapter(p, conv)?.materialize_update()))
        .collect()
}

fn load_base(config: &RunConfig) -> Result<TensorMap> {
    Ok(load_tensor_map(require_path(&config.base, "base checkpoint path")?)?)
}

fn require_merge(config: &RunConfig) -> Result<MergeConfig> {
    config
        .merge
        .clone()
        .ok_or_else(|| CliFailure::invalid("merge section with a method is required"))
}

/// Identity for a full checkpoint: its `source_id` metadata when present,
/// else the file stem.
fn checkpoint_id(map: &TensorMap, path: &str) -> String {
    map.metadata().get("source_id").cloned().unwrap_or_else(|| {
        Path::new(path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string())
    })
}

fn string_digests(paths: &[String]) -> Result<BTreeMap<String, String>> {
    digests(paths.iter().map(String::as_str))
}

/// One-line description of a merge configuration, showing only the knobs
/// its method actually reads.
fn describe_config(c: &MergeConfig) -> String {
    let mut s = format!("{} alpha={}", c.method.name(), c.alpha);
    match c.method {
        MergeMethod::Ties | MergeMethod::KnotsTies => {
            s.push_str(&format!(" topk={}", c.topk_percent));
        }
        MergeMethod::DareTies | MergeMethod::KnotsDareTies => {
            s.push_str(&format!(" p={}", c.dare_p));
            if let Some(seed) = c.seeds.first() {
                s.push_str(&format!(" seed={seed}"));
            }
        }
        MergeMethod::Ta => {}
    }
    s
}

// ── merge ──

pub fn cmd_merge(config: &RunConfig, quiet: bool) -> Result<()> {
    let merge_cfg = require_merge(config)?;
    let output = require_path(&config.output, "output path")?;
    let updates = load_updates(config)?;
    let base = load_base(config)?;

    let merged = run_merge(&updates, &merge_cfg)?;
    let weights = apply_update(&base, &merged.to_task_update())?;
    write_atomic(output, &tensor_map_to_bytes(&weights))?;

    let mut inputs = config.adapters.clone();
    inputs.push(config.base.clone().expect("base checked above"));
    let report = json!({
        "command": "merge",
        "merge": merge_cfg,
        "provenance": merged.provenance,
        "inputs": string_digests(&inputs)?,
        "output": { "path": output, "sha256": sha256_file(output)? },
    });
    let report_path = config
        .report
        .clone()
        .unwrap_or_else(|| format!("{output}.report.json"));
    write_json_report(&report_path, &report)?;

    if !quiet {
        println!(
            "merged {} adapter(s): {} -> {output}",
            updates.len(),
            describe_config(&merge_cfg)
        );
        println!("report -> {report_path}");
    }
    Ok(())
}

// ── cka ──

fn build_probes(
    probe: &ProbeSection,
    run_seed: Option<u64>,
    updates: &[TaskUpdate],
) -> Result<(BTreeMap<String, ActivationBatch>, ProbeRecord, Option<String>)> {
    match probe.kind.as_str() {
        "gaussian" => {
            let seed = probe.seed.or(run_seed).unwrap_or(0);
            let mut layer_inputs = BTreeMap::new();
            for (key, delta) in updates[0].layers() {
                layer_inputs.insert(key.clone(), delta.ncols());
            }
            let probes = gaussian_probes(&layer_inputs, probe.m, seed)?;
            Ok((probes, ProbeRecord::gaussian(seed, probe.m), None))
        }
        "file" => {
            let path = probe.path.as_deref().ok_or_else(|| {
                CliFailure::invalid("probe.path is required when probe.kind is \"file\"")
            })?;
            let map = load_tensor_map(path)?;
            let mut probes = BTreeMap::new();
            let mut m: Option<usize> = None;
            for (key, tensor) in map.iter() {
                let matrix = tensor.to_matrix()?;
                match m {
                    Some(prev) if prev != matrix.nrows() => {
                        return Err(CliFailure::new(
                            "ParseError",
                            format!(
                                "probe batches disagree on sample count ({prev} vs {} at {key:?})",
                                matrix.nrows()
                            ),
                        ));
                    }
                    _ => m = Some(matrix.nrows()),
                }
                probes.insert(key.clone(), ActivationBatch::new(matrix, key.clone(), "probe")?);
            }
            let m = m.ok_or_else(|| {
                CliFailure::new("ParseError", format!("probe file {path} holds no batches"))
            })?;
            Ok((probes, ProbeRecord::file(path, m), Some(path.to_string())))
        }
        other => Err(CliFailure::invalid(format!(
            "unknown probe kind {other:?}; expected \"gaussian\" or \"file\""
        ))),
    }
}

pub fn cmd_cka(config: &RunConfig, csv: bool, quiet: bool) -> Result<()> {
    if config.adapters.len() < 2 {
        return Err(CliFailure::invalid(format!(
            "pairwise similarity needs at least 2 adapters, got {}",
            config.adapters.len()
        )));
    }
    let report_path = require_path(&config.report, "report path")?;
    let modes = config.parsed_cka_modes()?;
    let rank_tol = config.merge.as_ref().map(|m| m.rank_tol).unwrap_or(1e-8);
    let probe_cfg = config.probe.clone().unwrap_or_default();

    for mode in modes {
        let updates = match mode {
            // Checkpoint-difference mode: each input is a full finetuned
            // checkpoint; the update is its difference from the base.
            // Layers identical to the base are not part of the update —
            // keeping their all-zero deltas would make similarity
            // undefined there.
            CkaMode::FftDelta => {
                let base = load_base(config)?;
                config
                    .adapters
                    .iter()
                    .map(|p| {
                        let ckpt = load_tensor_map(p)?;
                        let id = checkpoint_id(&ckpt, p);
                        let full = update_between(&ckpt, &base, id.clone())?;
                        let changed: BTreeMap<_, _> = full
                            .layers()
                            .iter()
                            .filter(|(_, delta)| delta.iter().any(|v| *v != 0.0))
                            .map(|(k, delta)| (k.clone(), delta.clone()))
                            .collect();
                        Ok(TaskUpdate::new(changed, id)?)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            CkaMode::RawUpdate | CkaMode::KnotsAligned => load_updates(config)?,
        };

        let (probes, record, probe_file) = build_probes(&probe_cfg, config.seed, &updates)?;
        let report = pairwise_update_cka(&updates, &probes, mode, rank_tol, record)?;

        let mut inputs = config.adapters.clone();
        if mode == CkaMode::FftDelta {
            inputs.push(config.base.clone().expect("base checked above"));
        }
        if let Some(p) = probe_file {
            inputs.push(p);
        }

        let mut doc = serde_json::to_value(&report)?;
        let obj = doc.as_object_mut().expect("reports serialize as objects");
        obj.insert("command".into(), json!("cka"));
        obj.insert("inputs".into(), serde_json::to_value(string_digests(&inputs)?)?);

        let mode_path = path_with_suffix(report_path, mode.name());
        write_json_report(&mode_path, &doc)?;
        if csv {
            let csv_path = csv_sibling(&mode_path);
            write_atomic(&csv_path, report.summary_csv().as_bytes())?;
        }
        if !quiet {
            println!(
                "cka {}: mean off-diagonal {:.6} -> {mode_path}",
                mode.name(),
                mean_off_diagonal(&report.summary)
            );
        }
    }
    Ok(())
}

/// `r.raw_update.json` → `r.raw_update.csv`.
fn csv_sibling(path: &str) -> String {
    let p = Path::new(path);
    if p.extension().is_some() {
        p.with_extension("csv").to_string_lossy().into_owned()
    } else {
        format!("{path}.csv")
    }
}

// ── sweep ──

fn resolve_objective(sweep: &SweepSection, eval: &EvalSection) -> Result<SweepObjective> {
    if let Some(name) = &sweep.objective {
        return Ok(SweepObjective::parse(name)?);
    }
    if let Some(name) = &eval.metric {
        return Ok(SweepObjective::parse(name)?);
    }
    match eval.mode.as_str() {
        "per_task" => Ok(SweepObjective::MeanNormalizedAccuracy),
        "joint" => Ok(SweepObjective::JointHitsAt1),
        other => Err(CliFailure::invalid(format!(
            "unknown eval.mode {other:?}; expected \"per_task\" or \"joint\""
        ))),
    }
}

pub fn cmd_sweep(config: &RunConfig, exhaustive: bool, csv: bool, quiet: bool) -> Result<()> {
    let merge_cfg = require_merge(config)?;
    let eval = config
        .eval
        .clone()
        .ok_or_else(|| CliFailure::invalid("eval section with tasks is required"))?;
    if eval.tasks.is_empty() {
        return Err(CliFailure::invalid("eval.tasks must list at least one task"));
    }
    let report_path = require_path(&config.report, "report path")?;
    let updates = load_updates(config)?;
    let base = load_base(config)?;
    let tasks = eval
        .tasks
        .iter()
        .map(|p| Ok(load_task(p)?))
        .collect::<Result<Vec<EvalTask>>>()?;

    let sweep_section = config.sweep.clone().unwrap_or_default();
    let mut settings = SweepSettings::new(merge_cfg.method, resolve_objective(&sweep_section, &eval)?);
    if let Some(grids) = sweep_section.grids {
        settings.grids = grids;
    }
    settings.exhaustive = exhaustive;
    settings.split_seed = config.seed.unwrap_or(0);
    settings.concat_axis = merge_cfg.concat_axis;
    settings.rank_tol = merge_cfg.rank_tol;

    let result = sweep(&updates, &base, &tasks, &eval.forward, &settings)?;

    let mut inputs = config.adapters.clone();
    inputs.push(config.base.clone().expect("base checked above"));
    inputs.extend(eval.tasks.iter().cloned());

    let mut doc = json!({
        "command": "sweep",
        "settings": settings,
        "result": result,
        "inputs": string_digests(&inputs)?,
    });
    if let Some(output) = config.output.as_deref() {
        let merged = run_merge(&updates, &result.best)?;
        let weights = apply_update(&base, &merged.to_task_update())?;
        write_atomic(output, &tensor_map_to_bytes(&weights))?;
        doc.as_object_mut().expect("object").insert(
            "output".into(),
            json!({ "path": output, "sha256": sha256_file(output)? }),
        );
    }
    write_json_report(report_path, &doc)?;

    if csv {
        let mut text = String::from("phase,method,alpha,topk_percent,dare_p,seed,score\n");
        for point in &result.grid_points {
            let c = &point.config;
            let (topk, p, seed) = match c.method {
                MergeMethod::Ties | MergeMethod::KnotsTies => {
                    (format!("{}", c.topk_percent), String::new(), String::new())
                }
                MergeMethod::DareTies | MergeMethod::KnotsDareTies => (
                    String::new(),
                    format!("{}", c.dare_p),
                    c.seeds.first().map(|s| s.to_string()).unwrap_or_default(),
                ),
                MergeMethod::Ta => (String::new(), String::new(), String::new()),
            };
            text.push_str(&format!(
                "{},{},{},{topk},{p},{seed},{:.12}\n",
                point.phase,
                c.method.name(),
                c.alpha,
                point.score
            ));
        }
        write_atomic(&csv_sibling(report_path), text.as_bytes())?;
    }

    if !quiet {
        println!(
            "sweep best: {} score={:.6} ({} grid points)",
            describe_config(&result.best),
            result.best_score,
            result.grid_points.len()
        );
        if let (Some(cfg), Some(score)) =
            (result.exhaustive_best.as_ref(), result.exhaustive_best_score)
        {
            println!("exhaustive best: {} score={score:.6}", describe_config(cfg));
        }
        println!("report -> {report_path}");
    }
    Ok(())
}

// ── eval ──

pub fn cmd_eval(config: &RunConfig, csv: bool, quiet: bool) -> Result<()> {
    let eval = config
        .eval
        .clone()
        .ok_or_else(|| CliFailure::invalid("eval section with tasks is required"))?;
    if eval.tasks.is_empty() {
        return Err(CliFailure::invalid("eval.tasks must list at least one task"));
    }
    let model_path = require_path(&config.output, "output path (the checkpoint to evaluate)")?;
    let model = load_tensor_map(model_path)?;
    let tasks = eval
        .tasks
        .iter()
        .map(|p| Ok(load_task(p)?))
        .collect::<Result<Vec<EvalTask>>>()?;

    // Tasks marked as test data lose a seeded validation sample (the rows a
    // sweep would tune on) and are scored on the remainder; tasks already
    // marked validation are scored whole.
    let seed = config.seed.unwrap_or(0);
    let mut any_split = false;
    let mut portions = Vec::with_capacity(tasks.len());
    for task in &tasks {
        match task.split {
            Split::Validation => portions.push(task.clone()),
            Split::Test => {
                any_split = true;
                portions.push(split_validation(task, VALIDATION_FRACTION, seed)?.1);
            }
        }
    }

    let mut inputs = vec![model_path.to_string()];
    inputs.extend(eval.tasks.iter().cloned());

    let (rows, table, csv_text) = match eval.mode.as_str() {
        "per_task" => {
            if config.adapters.len() != tasks.len() {
                return Err(CliFailure::invalid(format!(
                    "per-task evaluation pairs tasks with adapters by position; \
                     got {} adapter(s) for {} task(s)",
                    config.adapters.len(),
                    tasks.len()
                )));
            }
            let base = load_base(config)?;
            let updates = load_updates(config)?;
            inputs.extend(config.adapters.iter().cloned());
            inputs.push(config.base.clone().expect("base checked above"));

            let mut rows = Vec::new();
            let name_width = portions.iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
            let mut table = format!("{:<name_width$}  {:>10}  {:>10}\n", "task", "accuracy", "normalized");
            let mut csv_text = String::from("task,accuracy,normalized_accuracy\n");
            for (i, portion) in portions.iter().enumerate() {
                let finetuned = apply_update(&base, &updates[i])?;
                let baseline = evaluate(&finetuned, portion, &eval.forward)?;
                let accuracy = evaluate(&model, portion, &eval.forward)?;
                let normalized = normalized_accuracy(accuracy, baseline)?;
                rows.push(json!({
                    "task": portion.name,
                    "accuracy": accuracy,
                    "normalized_accuracy": normalized,
                }));
                table.push_str(&format!(
                    "{:<name_width$}  {accuracy:>10.6}  {normalized:>10.6}\n",
                    portion.name
                ));
                csv_text.push_str(&format!(
                    "{},{accuracy:.12},{normalized:.12}\n",
                    portion.name
                ));
            }
            (rows, table, csv_text)
        }
        "joint" => {
            if eval.k_list.is_empty() {
                return Err(CliFailure::invalid("eval.k_list must be non-empty in joint mode"));
            }
            let (_, joint) = build_joint_space(&portions)?;
            let logits = task_logits(&model, &joint, &eval.forward)?;
            let mut rows = Vec::new();
            let mut table = format!("{:>4}  {:>10}\n", "k", "hits@k");
            let mut csv_text = String::from("k,hits_at_k\n");
            for &k in &eval.k_list {
                let hits = knots_core::eval::aggregate_hits_at_k(&logits, &joint.labels, k)?;
                rows.push(json!({ "k": k, "hits": hits }));
                table.push_str(&format!("{k:>4}  {hits:>10.6}\n"));
                csv_text.push_str(&format!("{k},{hits:.12}\n"));
            }
            (rows, table, csv_text)
        }
        other => {
            return Err(CliFailure::invalid(format!(
                "unknown eval.mode {other:?}; expected \"per_task\" or \"joint\""
            )));
        }
    };

    if let Some(report_path) = config.report.as_deref() {
        let mut doc = json!({
            "command": "eval",
            "mode": eval.mode,
            "model": { "path": model_path, "sha256": sha256_file(model_path)? },
            "rows": rows,
            "inputs": string_digests(&inputs)?,
        });
        if any_split {
            doc.as_object_mut().expect("object").insert("split_seed".into(), json!(seed));
        }
        write_json_report(report_path, &doc)?;
        if csv {
            write_atomic(&csv_sibling(report_path), csv_text.as_bytes())?;
        }
    } else if csv {
        return Err(CliFailure::invalid("--csv needs a report path to write next to"));
    }

    if !quiet {
        print!("{table}");
    }
    Ok(())
}

// ── inspect ──

pub fn cmd_inspect(path: &str) -> Result<()> {
    let map = load_tensor_map_with(path, &LoadOptions { allow_nonfinite: true })?;
    println!("{:<32} {:<6} shape", "key", "dtype");
    for (key, tensor) in map.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        println!("{key:<32} {:<6} [{}]", "F32", dims.join(", "));
    }
    if !map.metadata().is_empty() {
        println!("metadata:");
        for (k, v) in map.metadata() {
            println!("  {k} = {v}");
        }
    }
    Ok(())
}
