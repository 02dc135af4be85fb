//! JSON run configuration shared by the CLI subcommands.
//!
//! Relative paths (dataset manifest, output directory) resolve against the
//! directory containing the config file. Unknown keys are rejected. Omitted
//! fields take the Amazon Photos column of the published hyperparameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, GraphDataset, SbmConfig};
use crate::encoder::{EncoderConfig, Normalization};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_FRACTIONS;
use crate::graph::PropagationConfig;
use crate::loss::LossWeights;
use crate::trainer::{AdamConfig, Precision, ScheduleConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Path to a JSON dataset manifest.
    Manifest(PathBuf),
    /// Generate a stochastic block model in memory.
    Sbm(SbmConfig),
}

/// Encoder settings; the input width comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub p_input: f64,
    pub norm: Normalization,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { num_layers: 2, hidden_dim: 1024, output_dim: 512, p_input: 0.5, norm: Normalization::Batch }
    }
}

impl EncoderSection {
    pub fn with_input_dim(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            p_input: self.p_input,
            norm: self.norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub num_seeds: usize,
    pub fractions: [f64; 3],
    /// Added to each probe seed to obtain that run's split seed.
    pub split_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { num_seeds: 20, fractions: DEFAULT_FRACTIONS, split_seed: 0 }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub encoder: EncoderSection,
    /// Hidden width of both predictor heads; defaults to the embedding width.
    #[serde(default)]
    pub predictor_hidden: Option<usize>,
    #[serde(default)]
    pub propagation: PropagationConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub p_local: f64,
    /// Also write `checkpoint_<epoch>.rgi` every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parse `text`, resolving relative paths against `base_dir`. Does not
    /// touch the file system.
    pub fn parse(text: &str, origin: &Path, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::parse(origin, e.line(), e.to_string()))?;
        if let DatasetSource::Manifest(p) = &mut cfg.dataset {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Read, parse and fully validate a config file, including that every
    /// referenced input path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, path, base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Manifest(p) if !p.is_file() => {
                return Err(Error::Config(format!("dataset manifest {} does not exist", p.display())));
            }
            DatasetSource::Sbm(s) => s.validate()?,
            _ => {}
        }
        // The input width is only known after loading; 1 is a placeholder.
        self.train_config(1).validate()?;
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if self.eval.num_seeds == 0 {
            return Err(Error::Config("eval.num_seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<GraphDataset> {
        match &self.dataset {
            DatasetSource::Manifest(p) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("dataset manifest {} does not exist", p.display())));
                }
                data::load_manifest(p)
            }
            DatasetSource::Sbm(s) => data::generate_sbm(s),
        }
    }

    pub fn train_config(&self, input_dim: usize) -> TrainConfig {
        TrainConfig {
            encoder: self.encoder.with_input_dim(input_dim),
            pred_hidden: self.predictor_hidden.unwrap_or(self.encoder.output_dim),
            propagation: self.propagation,
            weights: self.loss,
            schedule: self.schedule,
            adam: self.optimizer,
            p_local: self.p_local,
            seed: self.seed,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.rgi")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("test.json"), Path::new("/base"))
    }

    #[test]
    fn defaults_and_path_resolution() {
        let c = parse(r#"{"dataset": {"manifest": "data/m.json"}}"#).unwrap();
        assert_eq!(c.dataset, DatasetSource::Manifest("/base/data/m.json".into()));
        assert_eq!(c.output_dir, PathBuf::from("/base/runs/default"));
        assert_eq!(c.schedule, ScheduleConfig { base_lr: 1e-4, n_warmup: 100, n_epochs: 1000 });
        assert_eq!(c.loss, LossWeights { lambda1: 10.0, lambda2: 5.0, lambda3: 1.0 });
        let t = c.train_config(745);
        assert_eq!((t.encoder.input_dim, t.encoder.hidden_dim, t.encoder.output_dim), (745, 1024, 512));
        assert_eq!(t.pred_hidden, 512);
        assert_eq!(t.adam.weight_decay, 1e-5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse(r#"{"dataset": {"manifest": "m.json"}, "lambda9": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(parse(r#"{"dataset": {"manifest": "m.json"}, "encoder": {"depth": 2}}"#).is_err());
    }

    #[test]
    fn missing_manifest_is_named() {
        let c = parse(r#"{"dataset": {"manifest": "nowhere/m.json"}}"#).unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("/base/nowhere/m.json"), "{msg}");
    }

    #[test]
    fn sbm_source() {
        let c = parse(
            r#"{"dataset": {"sbm": {"num_blocks": 2, "nodes_per_block": 5, "p_in": 0.5, "p_out": 0.1,
                "feature_dim": 4, "signal": 1.0, "noise_sigma": 1.0, "seed": 3}},
                "precision": "f32", "schedule": {"base_lr": 0.001, "n_warmup": 2, "n_epochs": 4}}"#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.precision, Precision::F32);
        assert_eq!(c.load_dataset().unwrap().num_nodes(), 10);
    }
}
