//! Experiment configuration: presets, JSON overrides and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::FRAME_ALIGN;
use crate::error::{Error, Result};
use crate::graph::byte_offset;
use crate::optim::Schedule;
use crate::stgcn::{TemporalPadding, DEFAULT_LAYERS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    /// Crop size `l`.
    pub crop_size: usize,
    /// Channel base `c`.
    pub channels: usize,
    /// Training window length `t`.
    pub seq_len: usize,
    /// AU count `m`.
    pub aus: usize,
    /// Temporal kernel size `t_k`.
    pub t_k: usize,
    pub tau: f64,
    pub lambda_r: f64,
    pub stgcn_layers: usize,
    pub temporal_padding: TemporalPadding,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attention_schedule: Schedule,
    pub attention_epochs: usize,
    pub relation_schedule: Schedule,
    pub relation_epochs: usize,
    /// Train only the graph network and heads in the relation stage.
    pub freeze_backbone: bool,
    pub random_crop: bool,
    pub mirror: bool,
    /// Per-AU loss weights; derived from training occurrence rates when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Config {
                preset,
                crop_size: 176,
                channels: 8,
                seq_len: 48,
                aus: 12,
                t_k: 5,
                tau: 0.15,
                lambda_r: 1e-4,
                stgcn_layers: DEFAULT_LAYERS,
                temporal_padding: TemporalPadding::Replicate,
                batch_size: 8,
                momentum: 0.9,
                weight_decay: 5e-4,
                attention_schedule: Schedule::attention(),
                attention_epochs: 12,
                relation_schedule: Schedule::relation(),
                relation_epochs: 24,
                freeze_backbone: true,
                random_crop: true,
                mirror: true,
                class_weights: None,
                seed: 0,
            },
            Preset::Toy => Config {
                preset,
                crop_size: 32,
                channels: 2,
                seq_len: 8,
                aus: 4,
                t_k: 3,
                tau: 0.15,
                lambda_r: 1e-4,
                stgcn_layers: DEFAULT_LAYERS,
                temporal_padding: TemporalPadding::Replicate,
                batch_size: 4,
                momentum: 0.9,
                weight_decay: 5e-4,
                attention_schedule: Schedule {
                    initial_lr: 0.1,
                    decay: 0.5,
                    period: 4,
                    max_epochs: 12,
                },
                attention_epochs: 12,
                relation_schedule: Schedule {
                    initial_lr: 0.02,
                    decay: 0.3,
                    period: 6,
                    max_epochs: 24,
                },
                relation_epochs: 24,
                freeze_backbone: true,
                random_crop: true,
                mirror: true,
                class_weights: None,
                seed: 0,
            },
        }
    }

    /// Preset values overlaid with the fields of a JSON object. The `preset`
    /// key, if present, selects the base.
    pub fn from_json_value(base: Preset, overrides: &Value) -> Result<Self> {
        let Value::Object(map) = overrides else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let preset = match map.get("preset") {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => base,
        };
        let mut merged = serde_json::to_value(Config::preset(preset)).expect("config serializes");
        merge(&mut merged, overrides);
        let cfg: Config = serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: byte_offset(&text, e.line(), e.column()),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_json_value(base, &value)
    }

    /// Hard constraints. A threshold outside [−1, 1] is legal (it yields an
    /// empty or complete edge set) and only reported by [`Config::warnings`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.crop_size == 0 || self.crop_size % FRAME_ALIGN != 0 {
            return bad(format!("crop_size must be a positive multiple of {FRAME_ALIGN}, got {}", self.crop_size));
        }
        if self.channels == 0 || self.seq_len == 0 || self.aus == 0 || self.batch_size == 0 {
            return bad("channels, seq_len, aus and batch_size must be positive".into());
        }
        if self.t_k % 2 == 0 {
            return bad(format!("t_k must be odd, got {}", self.t_k));
        }
        if self.stgcn_layers == 0 {
            return bad("stgcn_layers must be positive".into());
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        if !(self.lambda_r.is_finite() && self.lambda_r >= 0.0) {
            return bad(format!("lambda_r must be non-negative, got {}", self.lambda_r));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        self.attention_schedule.validate()?;
        self.relation_schedule.validate()?;
        if self.attention_epochs > self.attention_schedule.max_epochs {
            return bad(format!(
                "attention_epochs {} exceeds the schedule's {}",
                self.attention_epochs, self.attention_schedule.max_epochs
            ));
        }
        if self.relation_epochs > self.relation_schedule.max_epochs {
            return bad(format!(
                "relation_epochs {} exceeds the schedule's {}",
                self.relation_epochs, self.relation_schedule.max_epochs
            ));
        }
        if let Some(w) = &self.class_weights {
            let sum: f64 = w.iter().sum();
            if w.len() != self.aus || w.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("class_weights need {} non-negative entries summing to 1", self.aus));
            }
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(-1.0..=1.0).contains(&self.tau) {
            w.push(format!("tau {} lies outside [-1, 1]", self.tau));
        }
        w
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
