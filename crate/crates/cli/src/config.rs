//! Run configuration: a JSON file shared by every command, plus `--set`
//! dotted-path overrides applied before deserialization. Unknown fields are
//! rejected so typos fail loudly instead of being silently ignored.

use std::collections::BTreeMap;
use std::fs;

use knots_core::{CkaMode, ForwardSpec, MergeConfig, SweepGrids};
use serde::{Deserialize, Serialize};

use crate::fail::{CliFailure, Result};

// ── schema ──

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Adapter checkpoint paths, in merge order. Order is load-bearing for
    /// seeding and for pairing with `eval.tasks`.
    pub adapters: Vec<String>,
    /// Base (pretrained) checkpoint the adapters were trained from.
    pub base: Option<String>,
    /// Where `merge`/`sweep` write the merged checkpoint.
    pub output: Option<String>,
    /// Where commands write their JSON report.
    pub report: Option<String>,
    pub merge: Option<MergeConfig>,
    pub eval: Option<EvalSection>,
    pub probe: Option<ProbeSection>,
    pub cka: Option<CkaSection>,
    pub sweep: Option<SweepSection>,
    /// Checkpoint key layout: "lora" (paired low-rank factor keys) or
    /// "plain" (one delta matrix per layer key).
    pub key_convention: Option<String>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Task container paths, paired with `adapters` by position where a
    /// per-task comparison is required.
    pub tasks: Vec<String>,
    /// "per_task" or "joint".
    pub mode: String,
    /// Optional sweep scoring metric; overrides the mode-derived default.
    pub metric: Option<String>,
    pub k_list: Vec<usize>,
    pub forward: ForwardSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            mode: "per_task".into(),
            metric: None,
            k_list: vec![1, 3, 5],
            forward: ForwardSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// "gaussian" (seeded synthetic probes) or "file" (a container of
    /// activation batches keyed by layer).
    pub kind: String,
    pub seed: Option<u64>,
    /// Probe batch size for gaussian probes.
    pub m: usize,
    pub path: Option<String>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { kind: "gaussian".into(), seed: None, m: 64, path: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkaSection {
    /// Which feature definitions to report: any of "raw_update",
    /// "knots_aligned", "fft_delta".
    pub modes: Vec<String>,
}

impl Default for CkaSection {
    fn default() -> Self {
        Self { modes: vec!["raw_update".into()] }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub grids: Option<SweepGrids>,
    /// "mean_normalized_accuracy" or "joint_hits_at_1"; falls back to
    /// `eval.mode` when absent.
    pub objective: Option<String>,
}

impl RunConfig {
    pub fn parsed_cka_modes(&self) -> Result<Vec<CkaMode>> {
        let section = self.cka.clone().unwrap_or_default();
        if section.modes.is_empty() {
            return Err(CliFailure::invalid("cka.modes must list at least one mode"));
        }
        section
            .modes
            .iter()
            .map(|m| CkaMode::parse(m).map_err(CliFailure::from))
            .collect()
    }
}

// ── loading and overrides ──

/// Loads the config file (or starts from `{}` when no file is given), applies
/// `--set path=VALUE` overrides, and deserializes with unknown-field checks.
pub fn load_config(path: Option<&str>, sets: &[String]) -> Result<RunConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliFailure::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliFailure::new("ParseError", format!("{p}: {e}")))?
        }
        None => serde_json::json!({}),
    };
    if !value.is_object() {
        return Err(CliFailure::new(
            "ParseError",
            "config root must be a JSON object".to_string(),
        ));
    }

    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    for raw in sets {
        let (dotted, raw_value) = raw.split_once('=').ok_or_else(|| {
            CliFailure::invalid(format!("--set needs PATH=VALUE, got {raw:?}"))
        })?;
        let dotted = dotted.trim();
        if dotted.is_empty() || dotted.split('.').any(|seg| seg.is_empty()) {
            return Err(CliFailure::invalid(format!(
                "--set path {dotted:?} has an empty segment"
            )));
        }
        if let Some(previous) = seen.get(dotted) {
            if previous != raw_value {
                return Err(CliFailure::invalid(format!(
                    "--set {dotted} given twice with different values \
                     ({previous:?} vs {raw_value:?})"
                )));
            }
        }
        seen.insert(dotted.to_string(), raw_value.to_string());
        // Values parse as JSON when they can (numbers, booleans, arrays,
        // quoted strings); anything else is taken as a bare string.
        let parsed: serde_json::Value = serde_json::from_str(raw_value)
            .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
        set_path(&mut value, dotted, parsed)?;
    }

    serde_json::from_value(value)
        .map_err(|e| CliFailure::new("ParseError", format!("config: {e}")))
}

fn set_path(root: &mut serde_json::Value, dotted: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let segments: Vec<&str> = dotted.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            CliFailure::invalid(format!(
                "--set {dotted}: {:?} is not an object",
                segments[..i].join(".")
            ))
        })?;
        if i + 1 == segments.len() {
            map.insert((*seg).to_string(), new);
            return Ok(());
        }
        cursor = map
            .entry((*seg).to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("empty --set path segments are rejected before set_path")
}

/// Resolves a value that can arrive both as a CLI flag and a config field.
/// Both present and disagreeing is an error; otherwise the one given wins.
pub fn resolve_override<T: Copy + PartialEq + std::fmt::Debug>(
    name: &str,
    flag: Option<T>,
    config: Option<T>,
) -> Result<Option<T>> {
    match (flag, config) {
        (Some(f), Some(c)) if f != c => Err(CliFailure::invalid(format!(
            "{name} given as both flag ({f:?}) and config ({c:?}) with different values"
        ))),
        (Some(f), _) => Ok(Some(f)),
        (None, c) => Ok(c),
    }
}
