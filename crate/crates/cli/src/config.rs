//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. The grid knobs
//! `tr`, `fire_buffer`, `init_features` and `es_metric` take comma-separated
//! lists; `train` runs every combination.

use std::path::PathBuf;

use fireseg::dataset::Grouping;
use fireseg::metrics::EsMetric;
use fireseg::synth::SynthConfig;
use fireseg::trainer::{FireBuffer, TrainConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Value(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub tr: Vec<f64>,
    pub fire_buffer: Vec<FireBuffer>,
    pub init_features: Vec<usize>,
    pub es_metric: Vec<EsMetric>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            threads: 1,
            synth: SynthConfig::default(),
            tr: vec![train.tr],
            fire_buffer: vec![train.fire_buffer],
            init_features: vec![train.init_features],
            es_metric: vec![train.es_metric],
            train,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "threads",
    "height",
    "width",
    "days",
    "holdout_days",
    "numeric_channels",
    "categories",
    "target_fire_rate",
    "water_fraction",
    "noiseless",
    "lr",
    "max_epochs",
    "patience",
    "folds",
    "grouping",
    "es_metric",
    "tr",
    "fire_buffer",
    "buffer_radius",
    "init_features",
    "batch_size",
    "threshold",
    "class_weights",
    "data",
    "out",
    "checkpoint",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, String> {
    let out = v
        .split(',')
        .map(|s| f(s.trim()).ok_or_else(|| format!("{key}: invalid value `{}`", s.trim())))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(format!("{key}: empty list"));
    }
    Ok(out)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| ConfigError::Line { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_owned()) && KEYS.contains(&k) {
                return Err(at(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v.trim()).map_err(at)?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "height" => s.height = num(key, v)?,
            "width" => s.width = num(key, v)?,
            "days" => s.days = num(key, v)?,
            "holdout_days" => s.holdout_days = num(key, v)?,
            "numeric_channels" => s.numeric_channels = num(key, v)?,
            "categories" => s.categories = num(key, v)?,
            "target_fire_rate" => s.target_fire_rate = num(key, v)?,
            "water_fraction" => s.water_fraction = num(key, v)?,
            "noiseless" => s.noiseless = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "folds" => t.folds = num(key, v)?,
            "grouping" => t.grouping = Grouping::parse(v).ok_or(format!("grouping: invalid value `{v}`"))?,
            "es_metric" => self.es_metric = list(key, v, EsMetric::parse)?,
            "tr" => self.tr = list(key, v, |x| x.parse().ok())?,
            "fire_buffer" => self.fire_buffer = list(key, v, FireBuffer::parse)?,
            "buffer_radius" => t.buffer_radius = num(key, v)?,
            "init_features" => self.init_features = list(key, v, |x| x.parse().ok())?,
            "batch_size" => t.batch_size = num(key, v)?,
            "threshold" => t.threshold = num(key, v)?,
            "class_weights" => {
                t.class_weights = match v {
                    "auto" => None,
                    _ => match list(key, v, |x| x.parse::<f32>().ok())?[..] {
                        [a, b] => Some([a, b]),
                        _ => return Err(format!("class_weights: expected `auto` or `w0,w1`, got `{v}`")),
                    },
                }
            }
            "data" => self.data = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn synth_config(&self) -> Result<SynthConfig, ConfigError> {
        let cfg = SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        };
        cfg.validate().map_err(|e| ConfigError::Value(e.to_string()))?;
        Ok(cfg)
    }

    /// Every grid combination, ES outermost then TR, FB and IF.
    pub fn train_grid(&self) -> Result<Vec<TrainConfig>, ConfigError> {
        let mut out = Vec::new();
        for &es_metric in &self.es_metric {
            for &tr in &self.tr {
                for &fire_buffer in &self.fire_buffer {
                    for &init_features in &self.init_features {
                        let cfg = TrainConfig {
                            es_metric,
                            tr,
                            fire_buffer,
                            init_features,
                            seed: self.seed,
                            ..self.train.clone()
                        };
                        cfg.validate().map_err(|e| ConfigError::Value(e.to_string()))?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}
