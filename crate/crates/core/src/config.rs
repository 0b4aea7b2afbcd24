//! Pipeline configuration: one JSON document, every key defaulted, unknown
//! keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cfcomp::PairThresholds;
use crate::diffusion::{make_schedule, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::labelmap::LabelMapParams;
use crate::rfilter::FilterConfig;
use crate::synthesis::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta: [f64; 2],
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta: [1e-4, 0.02],
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta[0], self.beta[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub crop_size: usize,
    pub thresholds: PairThresholds,
    pub gamma: f64,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub filter: FilterConfig,
    pub labelmap: LabelMapParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crop_size: 512,
            thresholds: PairThresholds::default(),
            gamma: 10.0,
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            filter: FilterConfig::default(),
            labelmap: LabelMapParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 {
            return Err(Error::invalid("crop_size must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        self.thresholds.validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        self.filter.validate()?;
        if self.synth.steps == 0 || self.synth.steps > self.schedule.steps {
            return Err(Error::invalid(format!(
                "synth.steps {} outside 1..={}",
                self.synth.steps, self.schedule.steps
            )));
        }
        if !(self.labelmap.rdp_epsilon >= 0.0) {
            return Err(Error::invalid("labelmap.rdp_epsilon must be non-negative"));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON, falling back
    /// to a plain string; paths must name existing keys.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for key in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::Parse(format!("unknown config key {path:?}")))?;
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&d.to_json()).unwrap(), d);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), d);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"gama": 3}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"train": {"batchsize": 3}}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = PipelineConfig::default()
            .with_overrides(["train.steps=10", "train.mode=joint", "filter.S0=0.25"])
            .unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.mode, crate::diffusion::TrainMode::Joint);
        assert_eq!(c.filter.s0, 0.25);
        assert!(PipelineConfig::default().with_overrides(["train.nope=1"]).is_err());
        assert!(PipelineConfig::default().with_overrides(["train.batch=0"]).is_err());
        assert!(PipelineConfig::default().with_overrides(["seed"]).is_err());
    }
}
