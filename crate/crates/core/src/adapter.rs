//! Low-rank adapter checkpoints: loading factor pairs and materializing
//! dense task updates.
//!
//! An adapter stores, for each adapted layer, a factor pair `(B, A)` with
//! `B: O×r` and `A: r×I`; the dense update is `ΔW = scale · B·A`, an `O×I`
//! matrix of rank at most `r`. The factor pairs are found in a container by
//! key suffix; two naming conventions are recognized (see
//! [`KeyConvention`]).

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::container::load_tensor_map;
use crate::error::{Error, Result};
use crate::tensor::TensorMap;
use crate::update::TaskUpdate;

/// Metadata key holding the multiplicative scale applied to `B·A`.
pub const LORA_SCALE_KEY: &str = "lora_scale";

/// Metadata key naming the adapter's source model.
pub const SOURCE_ID_KEY: &str = "source_id";

/// How factor tensors are keyed relative to the layer they adapt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyConvention {
    /// `{layer}.lora_A` / `{layer}.lora_B`
    LoraPrefixed,
    /// `{layer}.A` / `{layer}.B`
    Plain,
}

impl KeyConvention {
    /// `(A suffix, B suffix)` for this convention.
    pub fn suffixes(self) -> (&'static str, &'static str) {
        match self {
            KeyConvention::LoraPrefixed => (".lora_A", ".lora_B"),
            KeyConvention::Plain => (".A", ".B"),
        }
    }

    /// Parse a convention name as used in configs.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lora" => Ok(KeyConvention::LoraPrefixed),
            "plain" => Ok(KeyConvention::Plain),
            other => Err(Error::InvalidConfig(format!(
                "unknown key convention {other:?} (expected \"lora\" or \"plain\")"
            ))),
        }
    }
}

/// One adapted layer's factor pair.
#[derive(Debug, Clone)]
pub struct LoraFactors {
    /// Left factor, `O×r`.
    pub b: DMatrix<f64>,
    /// Right factor, `r×I`.
    pub a: DMatrix<f64>,
}

/// A parsed low-rank adapter: factor pairs for every adapted layer, the
/// (uniform) rank, the scale, and an identity string for seed fan-out.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    layers: BTreeMap<String, LoraFactors>,
    rank: usize,
    lora_scale: f64,
    source_id: String,
}

impl LoraAdapter {
    /// Assemble an adapter from explicit factor pairs. Validates the same
    /// invariants as loading from a container.
    pub fn new(
        layers: BTreeMap<String, LoraFactors>,
        lora_scale: f64,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::IncompleteAdapter {
                layer: "<none>".into(),
                missing: "any factor pair".into(),
            });
        }
        let mut rank: Option<usize> = None;
        for (key, f) in &layers {
            let (o, rb) = (f.b.nrows(), f.b.ncols());
            let (ra, i) = (f.a.nrows(), f.a.ncols());
            if rb != ra {
                return Err(Error::RankMismatch(format!(
                    "layer {key:?}: B is {o}x{rb} but A is {ra}x{i}; inner dims must agree"
                )));
            }
            if rb > o.min(i) {
                return Err(Error::RankMismatch(format!(
                    "layer {key:?}: rank {rb} exceeds min({o}, {i})"
                )));
            }
            match rank {
                None => rank = Some(rb),
                Some(r) if r != rb => {
                    return Err(Error::RankMismatch(format!(
                        "layer {key:?} has rank {rb} but earlier layers have rank {r}"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(LoraAdapter {
            layers,
            rank: rank.expect("non-empty"),
            lora_scale,
            source_id: source_id.into(),
        })
    }

    /// Adapted layer keys, sorted.
    pub fn target_keys(&self) -> Vec<&str> {
        self.layers.keys().map(String::as_str).collect()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn factors(&self, layer: &str) -> Option<&LoraFactors> {
        self.layers.get(layer)
    }

    /// Dense task update: `ΔW = lora_scale · B·A` per layer.
    pub fn materialize_update(&self) -> TaskUpdate {
        let mut layers = BTreeMap::new();
        for (key, f) in &self.layers {
            let mut delta = &f.b * &f.a;
            if self.lora_scale != 1.0 {
                delta *= self.lora_scale;
            }
            layers.insert(key.clone(), delta);
        }
        TaskUpdate::new(layers, self.source_id.clone())
            .expect("adapter layers are validated non-empty")
    }
}

/// Extract an adapter from an already-loaded container.
///
/// Keys matching the convention's suffixes are paired by layer; keys that
/// match neither suffix (embeddings, heads, ...) are ignored. `fallback_id`
/// names the adapter when the container metadata carries no `source_id`.
pub fn adapter_from_tensor_map(
    map: &TensorMap,
    convention: KeyConvention,
    fallback_id: &str,
) -> Result<LoraAdapter> {
    let (a_suffix, b_suffix) = convention.suffixes();
    let mut a_parts: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    let mut b_parts: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();

    for (key, tensor) in map.iter() {
        if let Some(layer) = key.strip_suffix(a_suffix) {
            a_parts.insert(layer.to_string(), tensor.to_matrix()?);
        } else if let Some(layer) = key.strip_suffix(b_suffix) {
            b_parts.insert(layer.to_string(), tensor.to_matrix()?);
        }
    }

    for layer in a_parts.keys() {
        if !b_parts.contains_key(layer) {
            return Err(Error::IncompleteAdapter {
                layer: layer.clone(),
                missing: format!("B ({layer}{b_suffix})"),
            });
        }
    }
    for layer in b_parts.keys() {
        if !a_parts.contains_key(layer) {
            return Err(Error::IncompleteAdapter {
                layer: layer.clone(),
                missing: format!("A ({layer}{a_suffix})"),
            });
        }
    }
    if a_parts.is_empty() {
        return Err(Error::IncompleteAdapter {
            layer: "<none>".into(),
            missing: format!("any {a_suffix}/{b_suffix} factor pair"),
        });
    }

    let mut layers = BTreeMap::new();
    for (layer, a) in a_parts {
        let b = b_parts.remove(&layer).expect("checked above");
        layers.insert(layer, LoraFactors { b, a });
    }

    let lora_scale = match map.metadata().get(LORA_SCALE_KEY) {
        Some(raw) => raw.parse::<f64>().map_err(|_| {
            Error::Parse(format!("metadata {LORA_SCALE_KEY} is not a number: {raw:?}"))
        })?,
        None => 1.0,
    };
    let source_id = map
        .metadata()
        .get(SOURCE_ID_KEY)
        .cloned()
        .unwrap_or_else(|| fallback_id.to_string());

    LoraAdapter::new(layers, lora_scale, source_id)
}

/// Load an adapter container from disk.
///
/// The file's stem is the fallback source id when the container metadata
/// has none.
pub fn load_adapter(path: impl AsRef<Path>, convention: KeyConvention) -> Result<LoraAdapter> {
    let path = path.as_ref();
    let map = load_tensor_map(path)?;
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    adapter_from_tensor_map(&map, convention, &fallback)
}
