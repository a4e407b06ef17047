use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserParams, ModelConfig, ParamLayout, ScheduleConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "metaunlearn.checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `pretrain`, `esd`, `uce`, `meta-esd`, `attack`, ...
    pub method: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedEntry {
    pub stage: String,
    pub seed: u64,
}

/// A parameter snapshot with everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: String,
    pub version: u32,
    pub provenance: Provenance,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub seed_lineage: Vec<SeedEntry>,
    /// Stage configuration (e.g. the full meta block), free-form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_config: Option<serde_json::Value>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        params: &DenoiserParams,
        schedule: ScheduleConfig,
        provenance: Provenance,
        seed_lineage: Vec<SeedEntry>,
    ) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            version: FORMAT_VERSION,
            provenance,
            model: params.config().clone(),
            schedule,
            seed_lineage,
            stage_config: None,
            params: params.flat().to_vec(),
        }
    }

    pub fn params(&self) -> Result<DenoiserParams> {
        DenoiserParams::from_flat(&self.model, self.params.clone())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e))?;
        if c.schema != CHECKPOINT_SCHEMA {
            return Err(Error::format("checkpoint", format!("schema `{}`", c.schema)));
        }
        if c.version != FORMAT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {}", c.version)));
        }
        c.model.validate()?;
        c.schedule.build()?;
        let expected = ParamLayout::new(&c.model).total();
        if c.params.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameters for a layout of {expected}", c.params.len()),
            ));
        }
        if c.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint", "non-finite parameter"));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn sample() -> Checkpoint {
        let p = DenoiserParams::init(&ModelConfig::default(), &mut stream_rng(11, Stream::Init));
        Checkpoint::new(
            &p,
            ScheduleConfig::default(),
            Provenance { method: "pretrain".into(), config_hash: "abc".into() },
            vec![SeedEntry { stage: "pretrain".into(), seed: 11 }],
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::parse(&c.to_json()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.iter().zip(&c.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_length_and_schema() {
        let mut c = sample();
        c.params.pop();
        assert!(Checkpoint::parse(&c.to_json()).is_err());
        let mut c = sample();
        c.schema = "other".into();
        assert!(Checkpoint::parse(&c.to_json()).is_err());
        assert!(Checkpoint::parse("{").is_err());
        assert!(Checkpoint::parse("").is_err());
    }
}
