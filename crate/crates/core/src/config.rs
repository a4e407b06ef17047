//! Experiment configuration: a single TOML document holding every block,
//! dotted-path overrides, validation and the config hash that names the
//! output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::concepts::{Role, SplitSizes, WorldConfig};
use crate::diffusion::{ModelConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::io::read_file;
use crate::meta::MetaConfig;
use crate::train::PretrainConfig;
use crate::unlearn::UnlearnConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Experiment seed; every random stream is derived from it.
    pub seed: u64,
    /// Independent replicas run at seeds `seed, seed + 1, ...`.
    pub replicas: usize,
    pub out: String,
    pub world: WorldConfig,
    pub split: SplitSizes,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnConfig,
    pub meta: MetaConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            replicas: 1,
            out: "out".into(),
            world: WorldConfig::default(),
            split: SplitSizes::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            meta: MetaConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses an override value the way it would appear on the right of `=`
/// in the document; anything that is not valid TOML is taken as a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies one `dotted.key=value` override to a document tree.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like dotted.key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path component"));
    }
    let mut node = doc;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(parts[..=i].join("."), "is a value, not a block")),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses a document. `schema_version` is mandatory in files.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::format("config", e.message()))?;
        if !doc.contains_key("schema_version") {
            return Err(Error::config("schema_version", "missing"));
        }
        Self::from_doc(doc)
    }

    fn from_doc(doc: toml::Table) -> Result<Self> {
        if let Some(v) = doc.get("schema_version") {
            if v.as_integer() != Some(SCHEMA_VERSION as i64) {
                return Err(Error::config("schema_version", format!("unsupported version {v}, expected {SCHEMA_VERSION}")));
            }
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the file (or the defaults when absent) and applies overrides
    /// in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = read_file(p)?;
                let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::format("config", e.message()))?;
                if !doc.contains_key("schema_version") {
                    return Err(Error::config("schema_version", "missing"));
                }
                doc
            }
            None => toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::format("config", e))?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_doc(doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::config("replicas", "must be at least 1"));
        }
        if self.out.is_empty() {
            return Err(Error::config("out", "must not be empty"));
        }
        self.world.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        self.pretrain.validate()?;
        self.unlearn.validate()?;
        self.meta.validate()?;
        self.attack.validate()?;
        self.eval.validate()?;
        if self.model.cond_dim != self.world.embed_dim {
            return Err(Error::config(
                "model.cond_dim",
                format!("must equal world.embed_dim ({})", self.world.embed_dim),
            ));
        }
        if self.world.concepts.iter().any(|c| c.center.len() != self.model.data_dim) {
            return Err(Error::config("model.data_dim", "must match the dimension of the concept centers"));
        }
        for name in &self.eval.retain_concepts {
            match self.world.concepts.iter().find(|c| &c.name == name) {
                None => return Err(Error::config("eval.retain_concepts", format!("unknown concept `{name}`"))),
                Some(c) if c.role == Role::Forget => {
                    return Err(Error::config("eval.retain_concepts", format!("`{name}` is the forget concept")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output
    /// location, seed and replica count: every seed of one experiment
    /// shares a run directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out.clear();
        c.seed = 0;
        c.replicas = 1;
        let json = serde_json::to_vec(&c).expect("configuration is always serializable");
        hex::encode(Sha256::digest(&json))
    }

    /// Short form of [`hash`](Self::hash) used as a directory name.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// The single-seed configuration of replica `i`.
    pub fn replica(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.seed = self.seed.wrapping_add(i as u64);
        c.replicas = 1;
        c
    }
}
