//! Run configuration files: `key = value` lines with `#` comments.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{DropoutVariant, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

pub const KEYS: [&str; 14] = [
    "learning_rate",
    "weight_decay",
    "momentum",
    "epochs",
    "batch_size",
    "seed",
    "class_balancing",
    "input_channels",
    "num_classes",
    "stages",
    "features",
    "dropout_variant",
    "dropout_p",
    "init_seed",
];

fn value<T: FromStr>(raw: &str, what: &str) -> std::result::Result<T, String> {
    raw.parse()
        .map_err(|_| format!("`{raw}` is not a valid {what}"))
}

fn boolean(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{raw}` is not a boolean")),
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        let (t, m) = (&mut self.train, &mut self.model);
        match key {
            "learning_rate" => t.learning_rate = value(raw, "number")?,
            "weight_decay" => t.weight_decay = value(raw, "number")?,
            "momentum" => t.momentum = value(raw, "number")?,
            "epochs" => t.epochs = value(raw, "count")?,
            "batch_size" => t.batch_size = value(raw, "count")?,
            "seed" => t.seed = value(raw, "seed")?,
            "class_balancing" => t.class_balancing = boolean(raw)?,
            "input_channels" => m.input_channels = value(raw, "count")?,
            "num_classes" => m.num_classes = value(raw, "count")?,
            "stages" => m.stages = value(raw, "count")?,
            "features" => m.features = value(raw, "count")?,
            "dropout_variant" => {
                m.dropout_variant = DropoutVariant::from_str(raw).map_err(|_| {
                    let tags: Vec<_> = DropoutVariant::ALL.iter().map(|v| v.tag()).collect();
                    format!(
                        "unknown dropout variant `{raw}`, expected one of {}",
                        tags.join(", ")
                    )
                })?
            }
            "dropout_p" => m.dropout_p = value(raw, "number")?,
            "init_seed" => m.seed = value(raw, "seed")?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        // range checks right away so the error points at this line
        match key {
            "learning_rate" | "weight_decay" | "momentum" | "batch_size" => {
                t.validate().map_err(|e| e.to_string())
            }
            "input_channels" | "num_classes" | "stages" | "features" | "dropout_p" => {
                m.validate().map_err(|e| e.to_string())
            }
            _ => Ok(()),
        }
    }

    /// Parse config text; `source` names the file in errors.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, val) = (key.trim(), val.trim());
            if seen.contains(&key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, val).map_err(err)?;
            seen.push(key);
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
