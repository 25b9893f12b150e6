//! Flat key-value configuration: defaults, then a JSON file, then flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::Result;
use fof_core::data::GeneratorConfig;
use fof_core::model::ModelConfig;
use fof_core::train::TrainConfig;
use fof_core::Error;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Which configuration structs a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Model,
    Train,
    Generator,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Model, Group::Train, Group::Generator];

    fn defaults(self) -> Map<String, Value> {
        let v = match self {
            Group::Model => serde_json::to_value(ModelConfig::default()),
            Group::Train => serde_json::to_value(TrainConfig::default()),
            Group::Generator => serde_json::to_value(GeneratorConfig::default()),
        };
        match v.expect("default configs serialize") {
            Value::Object(m) => m,
            _ => unreachable!("configs serialize to objects"),
        }
    }
}

/// Field names of the given groups, sorted.
pub fn keys(groups: &[Group]) -> BTreeSet<String> {
    groups.iter().flat_map(|g| g.defaults().into_iter().map(|(k, _)| k)).collect()
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Flag values are read as JSON when they parse, as plain strings otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads a flat JSON object; keys must belong to some configuration struct.
pub fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())).into());
    };
    let known = keys(&Group::ALL);
    if let Some(k) = map.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Config(format!("{}: unknown key `{k}`", path.display())).into());
    }
    Ok(map)
}

/// Resolved configuration with the set of keys given explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub explicit: BTreeSet<String>,
}

impl Resolved {
    /// Merges `file` over the defaults and `flags` over both. A key shared by
    /// several structs (such as `seed`) sets all of them.
    pub fn new(file: Map<String, Value>, flags: Map<String, Value>) -> Result<Self> {
        let mut merged = file;
        merged.extend(flags);
        let explicit: BTreeSet<String> = merged.keys().cloned().collect();
        let model = build(Group::Model, &merged)?;
        let train = build(Group::Train, &merged)?;
        let generator = build(Group::Generator, &merged)?;
        Ok(Self {
            model,
            train,
            generator,
            explicit,
        })
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }
}

/// Overlays the group's keys from `merged` on its defaults. On failure the
/// diagnostic names the first key that does not fit on its own.
fn build<C: DeserializeOwned>(group: Group, merged: &Map<String, Value>) -> Result<C> {
    let defaults = group.defaults();
    let with = |keys: &mut dyn Iterator<Item = &String>| {
        let mut m = defaults.clone();
        for k in keys {
            m.insert(k.clone(), merged[k].clone());
        }
        serde_json::from_value::<C>(Value::Object(m))
    };
    let own: Vec<&String> = merged.keys().filter(|k| defaults.contains_key(*k)).collect();
    with(&mut own.iter().copied()).map_err(|e| {
        let culprit = own.iter().find(|k| with(&mut std::iter::once(**k)).is_err());
        let msg = match culprit {
            Some(k) => format!("`{k}`: {e}"),
            None => e.to_string(),
        };
        Error::Config(msg).into()
    })
}
