//! Run configuration: TOML file, then command-line overrides, then validation.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{PartitionSpec, SyntheticSpec};
use crate::federation::{FedConfig, Phase};
use crate::local::SearchHyper;
use crate::search_space::NetworkSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub shape: [usize; 3],
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            path: None,
            classes: 10,
            per_class: 500,
            test_per_class: 50,
            shape: [3, 16, 16],
            difficulty: 0.0,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_train(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            per_class: self.per_class,
            shape: (self.shape[0], self.shape[1], self.shape[2]),
            seed: self.seed,
            difficulty: self.difficulty,
            stream: 0,
        }
    }

    pub fn synthetic_test(&self) -> SyntheticSpec {
        self.synthetic_train().test_split(self.test_per_class)
    }

    /// Classes and image shape the network is built for.
    pub fn input(&self) -> (usize, (usize, usize, usize)) {
        match self.source {
            DatasetSource::Cifar10 => (10, (3, 32, 32)),
            DatasetSource::Synthetic => (self.classes, (self.shape[0], self.shape[1], self.shape[2])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            concentration: 0.5,
            seed: 2,
        }
    }
}

impl PartitionConfig {
    pub fn spec(&self) -> PartitionSpec {
        PartitionSpec {
            clients: self.clients,
            concentration: self.concentration,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_cells: usize,
    pub init_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_cells: 4,
            init_channels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub rounds: usize,
    #[serde(default)]
    pub hyper: SearchHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportChoice {
    /// Clients run as threads calling the engine directly.
    InProcess,
    /// Clients run as threads exchanging encoded frames over channels.
    Channel,
    /// Clients run as threads talking to the server over loopback TCP.
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub kind: TransportChoice,
    /// Server address for `serve`, `join` and the `tcp` transport.
    pub address: String,
    /// Per-message timeout in seconds; absent means wait forever.
    pub round_timeout_secs: Option<f64>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            kind: TransportChoice::InProcess,
            address: "127.0.0.1:7878".into(),
            round_timeout_secs: None,
        }
    }
}

impl TransportConfig {
    pub fn socket_addr(&self) -> Result<SocketAddr, CliError> {
        self.address
            .parse()
            .map_err(|e| CliError::Usage(format!("bad address {:?}: {e}", self.address)))
    }

    pub fn timeout(&self) -> Option<Duration> {
        self.round_timeout_secs.map(Duration::from_secs_f64)
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Everything a run needs, as resolved from defaults, a config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub eval_batch_size: usize,
    /// Concurrent client computations; 0 means one per core.
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub network: NetworkConfig,
    pub search: PhaseConfig,
    pub eval: PhaseConfig,
    pub transport: TransportConfig,
}

/// Search: 50 rounds of 5 local epochs. Evaluation: 100 rounds of 20 local
/// epochs at learning rate 0.08. Batch size 64 throughout.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            out_dir: PathBuf::from("fednas-out"),
            eval_batch_size: 100,
            workers: 0,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            network: NetworkConfig::default(),
            search: PhaseConfig {
                rounds: 50,
                hyper: SearchHyper::default(),
            },
            eval: PhaseConfig {
                rounds: 100,
                hyper: SearchHyper {
                    eta_w: 0.08,
                    local_epochs: 20,
                    ..SearchHyper::default()
                },
            },
            transport: TransportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file laid over the defaults, so a partial table such
    /// as `[eval.hyper]` keeps the defaults of every key it leaves out.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(format!("config: {e}"));
        let file: toml::Table = toml::from_str(text).map_err(|e| usage(&e))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        overlay(&mut merged, file);
        merged.try_into().map_err(|e| usage(&e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let (num_classes, input_shape) = self.dataset.input();
        NetworkSpec {
            num_cells: self.network.num_cells,
            init_channels: self.network.init_channels,
            num_classes,
            input_shape,
        }
    }

    pub fn phase(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::Search => &self.search,
            Phase::Eval => &self.eval,
        }
    }

    pub fn phase_mut(&mut self, phase: Phase) -> &mut PhaseConfig {
        match phase {
            Phase::Search => &mut self.search,
            Phase::Eval => &mut self.eval,
        }
    }

    pub fn fed_config(&self, phase: Phase) -> FedConfig {
        let p = self.phase(phase);
        FedConfig {
            clients: self.partition.clients,
            rounds: p.rounds,
            hyper: p.hyper,
            spec: self.network_spec(),
            seed: self.seed,
            phase,
            eval_batch_size: self.eval_batch_size,
            workers: self.workers,
            keep_payloads: false,
        }
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        let d = &self.dataset;
        match d.source {
            DatasetSource::Cifar10 if d.path.is_none() => return usage("dataset.path is required for the cifar10 source".into()),
            DatasetSource::Synthetic => {
                if d.classes < 2 {
                    return usage(format!("dataset.classes must be at least 2, got {}", d.classes));
                }
                if d.per_class < 2 || d.test_per_class < 1 {
                    return usage(format!(
                        "dataset.per_class must be at least 2 and test_per_class at least 1, got {} and {}",
                        d.per_class, d.test_per_class
                    ));
                }
                if !(d.difficulty >= 0.0 && d.difficulty.is_finite()) {
                    return usage(format!("dataset.difficulty must be finite and >= 0, got {}", d.difficulty));
                }
            }
            DatasetSource::Cifar10 => {}
        }
        self.partition.spec().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.eval_batch_size == 0 {
            return usage("eval_batch_size must be at least 1".into());
        }
        self.network_spec().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for phase in [Phase::Search, Phase::Eval] {
            self.fed_config(phase)
                .validate()
                .map_err(|e| CliError::Usage(format!("{phase}: {e}")))?;
        }
        if let Some(t) = self.transport.round_timeout_secs {
            if !(t > 0.0 && t.is_finite()) {
                return usage(format!("transport.round_timeout_secs must be positive, got {t}"));
            }
        }
        self.transport.socket_addr()?;
        Ok(())
    }
}
