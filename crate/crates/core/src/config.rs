//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineSpec, Codec};
use crate::data::{DatasetSpec, PartitionStrategy};
use crate::error::{Error, Result};
use crate::he::{HeConfig, HeParams};
use crate::nca::ModelConfig;
use crate::netsim::NetConfig;
use crate::protocol::{AggregationMode, EncryptedAveraging, Weighting};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: AggregationMode,
    pub rounds: usize,
    pub clients: usize,
    /// Clients drawn per round; `None` means all of them.
    pub clients_per_round: Option<usize>,
    pub weighting: Weighting,
    pub encrypted_averaging: EncryptedAveraging,
    /// Upper bound on worker threads for client updates.
    pub threads: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: AggregationMode::Plain,
            rounds: 10,
            clients: 5,
            clients_per_round: None,
            weighting: Weighting::Uniform,
            encrypted_averaging: EncryptedAveraging::ServerScale,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub k_percent: f64,
    /// Carry the coordinates top-k did not send into the next round's delta.
    pub residual_feedback: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { k_percent: 10.0, residual_feedback: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub strategy: PartitionStrategy,
    pub test_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { strategy: PartitionStrategy::Uniform, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repeats: usize,
    pub codecs: Vec<Codec>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repeats: 10, codecs: Codec::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub compression: CompressionConfig,
    pub he: HeConfig,
    pub netsim: NetConfig,
    pub dataset: DatasetSpec,
    pub partition: PartitionConfig,
    pub baselines: Vec<BaselineSpec>,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            compression: CompressionConfig::default(),
            he: HeConfig::default(),
            netsim: NetConfig::default(),
            dataset: DatasetSpec::default(),
            partition: PartitionConfig::default(),
            baselines: BaselineSpec::defaults(),
            bench: BenchConfig::default(),
        }
    }
}

fn field(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parses TOML; type and unknown-key errors name the offending field path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config(format!("invalid TOML: {e}")))?;
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            field(if path.is_empty() || path == "." { "<root>" } else { &path }, e.inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Rejects every invalid combination before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        self.netsim.validate()?;

        let m = &self.model;
        let f = m.downscale_factor;
        if self.dataset.height % f != 0 || self.dataset.width % f != 0 {
            return Err(field(
                "dataset.height",
                format!("{}x{} is not divisible by model.downscale_factor {f}", self.dataset.height, self.dataset.width),
            ));
        }
        if self.dataset.classes != m.c_out {
            return Err(field("dataset.classes", format!("must equal model.c_out ({})", m.c_out)));
        }
        if m.c_in != 1 {
            return Err(field("model.c_in", "images are single-channel, so c_in must be 1"));
        }
        if !(m.eta > 0.0 && m.eta.is_finite()) {
            return Err(field("model.eta", "must be a positive number"));
        }

        let p = &self.protocol;
        if p.clients == 0 {
            return Err(field("protocol.clients", "must be >= 1"));
        }
        if let Some(k) = p.clients_per_round {
            if k == 0 || k > p.clients {
                return Err(field("protocol.clients_per_round", format!("must be in [1, {}]", p.clients)));
            }
        }
        if p.threads == Some(0) {
            return Err(field("protocol.threads", "must be >= 1"));
        }
        if p.encrypted_averaging == EncryptedAveraging::ClientDivide && p.weighting != Weighting::Uniform {
            return Err(field("protocol.encrypted_averaging", "client_divide requires uniform weighting"));
        }
        if p.mode == AggregationMode::Encrypted {
            HeParams::new(&self.he).map_err(|e| field("he", e))?;
        }

        let k = self.compression.k_percent;
        if !(k > 0.0 && k <= 100.0) {
            return Err(field("compression.k_percent", format!("{k} is outside (0, 100]")));
        }

        let t = self.partition.test_fraction;
        if !(0.0..1.0).contains(&t) {
            return Err(field("partition.test_fraction", format!("{t} is outside [0, 1)")));
        }
        let n_test = (self.dataset.samples as f64 * t).round() as usize;
        if n_test == 0 {
            return Err(field("partition.test_fraction", "leaves an empty test set"));
        }
        if self.dataset.samples - n_test < p.clients {
            return Err(field("dataset.samples", format!("too few training samples for {} clients", p.clients)));
        }

        for (i, b) in self.baselines.iter().enumerate() {
            b.validate(&format!("baselines[{i}]"))?;
        }
        if self.bench.repeats == 0 {
            return Err(field("bench.repeats", "must be >= 1"));
        }
        Ok(())
    }
}
