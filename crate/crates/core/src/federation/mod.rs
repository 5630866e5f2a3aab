//! Round-synchronous federated search and evaluation: server-side model
//! ownership, sample-weighted aggregation, global testing, and an in-process
//! runner that fans each round out to client threads.

mod aggregate;
mod checkpoint;
mod history;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{ModelWeights, ParamStore};
use crate::data::{ClientShard, DataError, Dataset, Partition};
use crate::local::{client_local_search, client_local_train, evaluate, ClientState, Evaluation, LocalError, SearchHyper};
use crate::search_space::{
    build_fixed_network, build_super_network, discretize, ArchParams, Genotype, Network, NetworkSpec, SearchSpaceError,
};

pub use aggregate::{aggregate, Aggregate, ClientUpdate};
pub use checkpoint::{model_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use history::{history_csv, parse_history_csv, ClientSummary, HistoryRow, HistoryWriter, RoundRecord, HISTORY_HEADER};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("no client results to aggregate")]
    NoClients,
    #[error("client results carry zero samples in total")]
    ZeroSamples,
    #[error("client {0} reported more than once")]
    DuplicateClient(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("round {round}: expected results from clients 0..{expected}, got {got:?}")]
    IncompleteRound { round: usize, expected: usize, got: Vec<usize> },
    #[error("round {round}: client {client} failed: {source}")]
    ClientFailed {
        round: usize,
        client: usize,
        #[source]
        source: LocalError,
    },
    #[error("global test failed: {0}")]
    GlobalTest(#[source] LocalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("history csv: {0}")]
    HistoryFormat(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    SearchSpace(#[from] SearchSpaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FedError {
    /// True when the run stopped because a loss or gradient became non-finite.
    pub fn is_numerical(&self) -> bool {
        match self {
            FedError::ClientFailed { source, .. } | FedError::GlobalTest(source) => source.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Search,
    Eval,
}

impl Phase {
    pub(crate) fn code(self) -> u8 {
        match self {
            Phase::Search => 0,
            Phase::Eval => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Phase> {
        match code {
            0 => Some(Phase::Search),
            1 => Some(Phase::Eval),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Search => "search",
            Phase::Eval => "eval",
        })
    }
}

impl FromStr for Phase {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "search" => Ok(Phase::Search),
            "eval" => Ok(Phase::Eval),
            other => Err(FedError::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub hyper: SearchHyper,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub phase: Phase,
    pub eval_batch_size: usize,
    /// Client threads per round; 0 means one per available core. Never
    /// affects results.
    #[serde(skip)]
    pub workers: usize,
    /// Keep every client payload and aggregate in the history.
    #[serde(skip)]
    pub keep_payloads: bool,
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.clients == 0 {
            return Err(FedError::Config("client count must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(FedError::Config("round count must be at least 1".into()));
        }
        if self.eval_batch_size == 0 {
            return Err(FedError::Config("eval_batch_size must be at least 1".into()));
        }
        self.spec.validate()?;
        self.hyper.validate().map_err(|e| FedError::Config(e.to_string()))
    }

    /// Hash of everything that must agree between server and clients.
    pub fn config_hash(&self, genotype: Option<&Genotype>) -> [u8; 32] {
        let doc = serde_json::json!({ "config": self, "genotype": genotype });
        Sha256::digest(doc.to_string().as_bytes()).into()
    }

    fn worker_count(&self) -> usize {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let w = if self.workers == 0 { cores } else { self.workers };
        w.clamp(1, self.clients)
    }
}

const SEED_MODEL: u64 = 0;
const SEED_SEARCH_CLIENT: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_EVAL_CLIENT: u64 = 3;
const SEED_EVAL_MODEL: u64 = 4;

/// Independent 64-bit seed for `(purpose, index)` under a run seed.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng.next_u64()
}

/// Seed of client `k`'s training randomness in a given phase.
pub fn client_seed(seed: u64, phase: Phase, k: usize) -> u64 {
    let purpose = match phase {
        Phase::Search => SEED_SEARCH_CLIENT,
        Phase::Eval => SEED_EVAL_CLIENT,
    };
    derive_seed(seed, purpose, k as u64)
}

/// Seed of the server's initial model in a given phase.
pub fn model_seed(seed: u64, phase: Phase) -> u64 {
    derive_seed(
        seed,
        match phase {
            Phase::Search => SEED_MODEL,
            Phase::Eval => SEED_EVAL_MODEL,
        },
        0,
    )
}

/// Splits client `k`'s partition entry into train and validation parts.
pub fn client_shard(partition: &Partition, k: usize, train_fraction: f64, seed: u64) -> Result<ClientShard, FedError> {
    let indices = partition
        .clients
        .get(k)
        .ok_or_else(|| FedError::Config(format!("partition has {} clients, no client {k}", partition.clients.len())))?;
    Ok(ClientShard::from_indices(
        k,
        indices,
        train_fraction,
        derive_seed(seed, SEED_SPLIT, k as u64),
    )?)
}

/// Builds the network a phase trains: the super-network for search, the
/// genotype's fixed network for evaluation.
pub fn build_phase_network(config: &FedConfig, genotype: Option<&Genotype>) -> Result<(Network, ParamStore), FedError> {
    let seed = model_seed(config.seed, config.phase);
    match (config.phase, genotype) {
        (Phase::Search, None) => Ok(build_super_network(&config.spec, seed)?),
        (Phase::Eval, Some(g)) => Ok(build_fixed_network(g, &config.spec, seed)?),
        (Phase::Search, Some(_)) => Err(FedError::Config("the search phase takes no genotype".into())),
        (Phase::Eval, None) => Err(FedError::Config("the evaluation phase requires a genotype".into())),
    }
}

/// The state of one client in a run, ready for its local work.
pub fn client_state(
    config: &FedConfig,
    k: usize,
    network: Arc<Network>,
    store: ParamStore,
    train: Arc<Dataset>,
    partition: &Partition,
) -> Result<ClientState, FedError> {
    let shard = client_shard(partition, k, config.hyper.train_fraction, config.seed)?;
    Ok(ClientState::new(
        k,
        shard,
        client_seed(config.seed, config.phase, k),
        network,
        store,
        train,
    ))
}

/// The model the server sends out at the start of round `round` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub round: usize,
    pub weights: ModelWeights,
    pub arch: Option<ArchParams>,
}

/// One client's answer to a [`GlobalModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub update: ClientUpdate,
    pub mean_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPayloads {
    pub updates: Vec<ClientUpdate>,
    pub aggregate: Aggregate,
}

/// Runs one client's local work for a round.
pub fn run_client_round(
    state: &mut ClientState,
    phase: Phase,
    global: &GlobalModel,
    hyper: &SearchHyper,
) -> Result<ClientReport, LocalError> {
    let outcome = match (phase, &global.arch) {
        (Phase::Search, Some(arch)) => client_local_search(state, &global.weights, arch, global.round, hyper)?,
        (Phase::Search, None) => return Err(LocalError::NotSearchable),
        (Phase::Eval, _) => client_local_train(state, &global.weights, global.round, hyper)?,
    };
    Ok(ClientReport {
        update: ClientUpdate {
            client_id: state.client_id,
            weights: outcome.weights,
            arch: outcome.arch,
            n_k: outcome.n_k,
        },
        mean_train_loss: outcome.mean_train_loss,
    })
}

/// Server-side state: owns `(w_t, α_t)`, aggregates, tests, and keeps the history.
pub struct Coordinator {
    config: FedConfig,
    genotype: Option<Genotype>,
    network: Arc<Network>,
    store: ParamStore,
    test: Arc<Dataset>,
    next_round: usize,
    started: Option<Instant>,
    history: Vec<RoundRecord>,
}

impl Coordinator {
    /// Initializes the global model once, from the run seed.
    pub fn new(config: FedConfig, genotype: Option<Genotype>, test: Arc<Dataset>) -> Result<Self, FedError> {
        config.validate()?;
        if test.is_empty() {
            return Err(FedError::GlobalTest(LocalError::EmptyDataset));
        }
        let (network, store) = build_phase_network(&config, genotype.as_ref())?;
        Ok(Self {
            config,
            genotype,
            network: Arc::new(network),
            store,
            test,
            next_round: 0,
            started: None,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.network
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.next_round >= self.config.rounds
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.config.config_hash(self.genotype.as_ref())
    }

    /// Starts the next round and returns what to broadcast.
    pub fn begin_round(&mut self) -> GlobalModel {
        self.started = Some(Instant::now());
        GlobalModel {
            round: self.next_round,
            weights: self.store.weights(),
            arch: self.network.arch_params(&self.store),
        }
    }

    pub fn global_test(&self) -> Result<Evaluation, FedError> {
        evaluate(&self.network, &self.store, &self.test, self.config.eval_batch_size, false).map_err(FedError::GlobalTest)
    }

    /// Barrier step: requires exactly one report from each client, then
    /// aggregates, installs the result, and runs the global test.
    pub fn complete_round(&mut self, mut reports: Vec<ClientReport>) -> Result<&RoundRecord, FedError> {
        let round = self.next_round;
        reports.sort_by_key(|r| r.update.client_id);
        let ids: Vec<usize> = reports.iter().map(|r| r.update.client_id).collect();
        if ids != (0..self.config.clients).collect::<Vec<_>>() {
            return Err(FedError::IncompleteRound {
                round,
                expected: self.config.clients,
                got: ids,
            });
        }
        let updates: Vec<ClientUpdate> = reports.iter().map(|r| r.update.clone()).collect();
        let agg = aggregate(&updates)?;
        self.store
            .set_weights(&agg.weights)
            .map_err(|e| FedError::ShapeMismatch(e.to_string()))?;
        match (&agg.arch, self.network.is_super()) {
            (Some(a), true) => self.network.set_arch_params(&mut self.store, a)?,
            (None, false) => {}
            _ => return Err(FedError::ShapeMismatch("architecture parameters do not match the phase".into())),
        }
        let eval = self.global_test()?;
        let duration_ms = self.started.take().map_or(0, |s| s.elapsed().as_millis() as u64);
        let record = RoundRecord {
            round: round + 1,
            phase: self.config.phase,
            clients: reports
                .iter()
                .map(|r| ClientSummary {
                    client_id: r.update.client_id,
                    n_k: r.update.n_k,
                    mean_train_loss: r.mean_train_loss,
                })
                .collect(),
            global_test_loss: eval.loss,
            global_test_acc: eval.accuracy,
            duration_ms,
            payloads: self.config.keep_payloads.then_some(RoundPayloads { updates, aggregate: agg }),
        };
        log::info!(
            "{} round {}/{}: test loss {:.4}, accuracy {:.4}, {} ms",
            record.phase,
            record.round,
            self.config.rounds,
            record.global_test_loss,
            record.global_test_acc,
            record.duration_ms
        );
        self.history.push(record);
        self.next_round += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn arch(&self) -> Option<ArchParams> {
        self.network.arch_params(&self.store)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.config.spec,
            genotype: self.genotype.clone(),
            phase: self.config.phase,
            round: self.next_round,
            store: self.store.clone(),
        }
    }

    pub fn into_outcome(self) -> RunOutcome {
        let genotype = match self.config.phase {
            Phase::Search => self.network.arch_params(&self.store).map(|a| discretize(&a)),
            Phase::Eval => self.genotype.clone(),
        };
        RunOutcome {
            genotype,
            checkpoint: Checkpoint {
                spec: self.config.spec,
                genotype: self.genotype,
                phase: self.config.phase,
                round: self.next_round,
                store: self.store.clone(),
            },
            network: self.network,
            store: self.store,
            history: self.history,
        }
    }
}

/// Result of a complete run. For search, `genotype` is the discretized final α;
/// for evaluation it is the genotype that was trained.
pub struct RunOutcome {
    pub genotype: Option<Genotype>,
    pub network: Arc<Network>,
    pub store: ParamStore,
    pub history: Vec<RoundRecord>,
    pub checkpoint: Checkpoint,
}

// Runs every client for one round on up to `workers` threads. Clients are
// independent, so the thread layout cannot change any result.
fn fan_out(
    clients: &mut [ClientState],
    phase: Phase,
    global: &GlobalModel,
    hyper: &SearchHyper,
    workers: usize,
) -> Result<Vec<ClientReport>, FedError> {
    let per_worker = clients.len().div_ceil(workers);
    let results: Vec<Result<ClientReport, (usize, LocalError)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .chunks_mut(per_worker)
            .map(|group| {
                scope.spawn(move || {
                    group
                        .iter_mut()
                        .map(|c| run_client_round(c, phase, global, hyper).map_err(|e| (c.client_id, e)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    results
        .into_iter()
        .map(|r| {
            r.map_err(|(client, source)| FedError::ClientFailed {
                round: global.round + 1,
                client,
                source,
            })
        })
        .collect()
}

fn run_in_process(
    config: FedConfig,
    genotype: Option<Genotype>,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    partition: &Partition,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), FedError>,
) -> Result<RunOutcome, FedError> {
    if partition.clients.len() != config.clients {
        return Err(FedError::Config(format!(
            "partition has {} clients but the run expects {}",
            partition.clients.len(),
            config.clients
        )));
    }
    if partition.num_samples != train.len() {
        return Err(FedError::Config(format!(
            "partition covers {} samples but the training set has {}",
            partition.num_samples,
            train.len()
        )));
    }
    let mut coord = Coordinator::new(config, genotype, test)?;
    let mut clients = (0..config.clients)
        .map(|k| client_state(&config, k, coord.network().clone(), coord.store().clone(), train.clone(), partition))
        .collect::<Result<Vec<_>, _>>()?;
    let workers = config.worker_count();
    while !coord.is_done() {
        let global = coord.begin_round();
        let reports = fan_out(&mut clients, config.phase, &global, &config.hyper, workers)?;
        let record = coord.complete_round(reports)?;
        on_round(record)?;
    }
    Ok(coord.into_outcome())
}

/// Federated architecture search with in-process clients. Returns the
/// discretized genotype, the final super-network and the round history.
pub fn run_fednas(
    config: FedConfig,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    partition: &Partition,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), FedError>,
) -> Result<RunOutcome, FedError> {
    if config.phase != Phase::Search {
        return Err(FedError::Config("run_fednas needs the search phase".into()));
    }
    run_in_process(config, None, train, test, partition, on_round)
}

/// FedAvg training of a fixed genotype with in-process clients.
pub fn run_fedavg_eval(
    config: FedConfig,
    genotype: &Genotype,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    partition: &Partition,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), FedError>,
) -> Result<RunOutcome, FedError> {
    if config.phase != Phase::Eval {
        return Err(FedError::Config("run_fedavg_eval needs the eval phase".into()));
    }
    run_in_process(config, Some(genotype.clone()), train, test, partition, on_round)
}

/// Loss and accuracy of a model on the server-held test set.
pub fn global_test(network: &Network, store: &ParamStore, test: &Dataset, batch_size: usize) -> Result<Evaluation, FedError> {
    evaluate(network, store, test, batch_size, false).map_err(FedError::GlobalTest)
}
