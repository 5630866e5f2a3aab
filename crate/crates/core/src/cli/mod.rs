//! Command-line harness: argument parsing, configuration, and the
//! subcommands behind the `fednas` binary.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::comm::CommError;
use crate::data::DataError;
use crate::federation::{FedError, Phase};
use crate::search_space::SearchSpaceError;

pub use commands::{
    cmd_check, cmd_eval, cmd_export, cmd_join, cmd_partition, cmd_search, cmd_serve, load_datasets, resolve_partition, CheckTarget,
};
pub use config::{DatasetConfig, DatasetSource, NetworkConfig, PartitionConfig, PhaseConfig, RunConfig, TransportChoice, TransportConfig};
pub use manifest::{sha256_file, sha256_hex, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Genotype(#[from] SearchSpaceError),
    #[error(transparent)]
    Federation(#[from] FedError),
    #[error(transparent)]
    Comm(#[from] CommError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Data(DataError::InvalidSpec(_)) | CliError::Federation(FedError::Config(_)) => EXIT_USAGE,
            CliError::Federation(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Comm(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fednas", version, about = "Federated neural architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the training set across clients and write the partition and class-count table.
    Partition(RunArgs),
    /// Run the federated architecture search.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Partition file from `fednas partition`; computed from the config when absent.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Train the searched architecture with federated averaging.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Genotype to train, JSON or DOT.
        #[arg(long)]
        genotype: PathBuf,
        /// Partition file from `fednas partition`; computed from the config when absent.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Print a genotype as DOT or JSON.
    Export {
        /// Genotype file, JSON or DOT.
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long, value_enum, default_value = "dot")]
        format: ExportArg,
    },
    /// Act as the server of a search or evaluation run over TCP.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "search")]
        phase: Phase,
        /// Required for the eval phase.
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Act as one client of a run served over TCP.
    Join {
        #[command(flatten)]
        run: RunArgs,
        /// This client's index in the partition, 0-based.
        #[arg(long)]
        client_id: usize,
        #[arg(long, default_value = "search")]
        phase: Phase,
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Validate an artifact.
    Check {
        #[command(subcommand)]
        target: CheckTarget,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportArg {
    Dot,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    InProcess,
    Channel,
    Tcp,
}

/// Flags shared by every command that runs on data. Each one overrides the
/// matching config-file entry; phase flags apply to the phase being run.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default fednas-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run seed for model initialization and client sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of clients K.
    #[arg(long)]
    pub clients: Option<usize>,
    /// Dirichlet concentration of the label partition.
    #[arg(long)]
    pub concentration: Option<f64>,
    /// Seed of the label partition.
    #[arg(long)]
    pub partition_seed: Option<u64>,
    /// Data source.
    #[arg(long, value_enum)]
    pub dataset: Option<SourceArg>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Synthetic training images per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Synthetic test images per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Synthetic noise level; 0 is the easiest task.
    #[arg(long)]
    pub difficulty: Option<f64>,
    /// Seed of the synthetic generator.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Number of cells in the network.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Initial channel count C.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Communication rounds T.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Local epochs E per round.
    #[arg(long)]
    pub local_epochs: Option<usize>,
    /// Local minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight learning rate.
    #[arg(long)]
    pub eta_w: Option<f64>,
    /// Architecture learning rate (search only).
    #[arg(long)]
    pub eta_alpha: Option<f64>,
    /// Weight of the validation term in the architecture step (search only).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Batch size of the global test pass.
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    /// Clients computing at once; 0 means one per core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// How the server reaches its clients.
    #[arg(long, value_enum)]
    pub transport: Option<TransportArg>,
    /// Server address for TCP runs, host:port.
    #[arg(long)]
    pub address: Option<String>,
    /// Seconds to wait for any single message before aborting.
    #[arg(long)]
    pub round_timeout: Option<f64>,
}

impl RunArgs {
    /// Defaults, then the config file, then these flags; validated.
    pub fn resolve(&self, phase: Option<Phase>) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.out_dir, &self.out);
        set(&mut c.seed, &self.seed);
        set(&mut c.partition.clients, &self.clients);
        set(&mut c.partition.concentration, &self.concentration);
        set(&mut c.partition.seed, &self.partition_seed);
        if let Some(s) = self.dataset {
            c.dataset.source = match s {
                SourceArg::Synthetic => DatasetSource::Synthetic,
                SourceArg::Cifar10 => DatasetSource::Cifar10,
            };
        }
        if self.data_dir.is_some() {
            c.dataset.path = self.data_dir.clone();
        }
        set(&mut c.dataset.per_class, &self.per_class);
        set(&mut c.dataset.test_per_class, &self.test_per_class);
        set(&mut c.dataset.difficulty, &self.difficulty);
        set(&mut c.dataset.seed, &self.data_seed);
        set(&mut c.network.num_cells, &self.cells);
        set(&mut c.network.init_channels, &self.channels);
        set(&mut c.eval_batch_size, &self.eval_batch_size);
        set(&mut c.workers, &self.workers);
        if let Some(t) = self.transport {
            c.transport.kind = match t {
                TransportArg::InProcess => TransportChoice::InProcess,
                TransportArg::Channel => TransportChoice::Channel,
                TransportArg::Tcp => TransportChoice::Tcp,
            };
        }
        set(&mut c.transport.address, &self.address);
        if self.round_timeout.is_some() {
            c.transport.round_timeout_secs = self.round_timeout;
        }
        let phase_flags = self.rounds.is_some()
            || self.local_epochs.is_some()
            || self.batch_size.is_some()
            || self.eta_w.is_some()
            || self.eta_alpha.is_some()
            || self.lambda.is_some();
        match phase {
            Some(phase) => {
                let p = c.phase_mut(phase);
                set(&mut p.rounds, &self.rounds);
                set(&mut p.hyper.local_epochs, &self.local_epochs);
                set(&mut p.hyper.batch_size, &self.batch_size);
                set(&mut p.hyper.eta_w, &self.eta_w);
                set(&mut p.hyper.eta_alpha, &self.eta_alpha);
                set(&mut p.hyper.lambda, &self.lambda);
            }
            None if phase_flags => return Err(CliError::Usage("training flags have no effect on this command".into())),
            None => {}
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Partition(run) => run.resolve(None).and_then(|c| cmd_partition(&c)),
        Command::Search { run, partition } => run.resolve(Some(Phase::Search)).and_then(|c| cmd_search(&c, partition.as_deref())),
        Command::Eval { run, genotype, partition } => run
            .resolve(Some(Phase::Eval))
            .and_then(|c| cmd_eval(&c, &genotype, partition.as_deref())),
        Command::Export { genotype, format } => cmd_export(&genotype, format).map(|text| print!("{text}")),
        Command::Serve { run, phase, genotype } => run.resolve(Some(phase)).and_then(|c| cmd_serve(&c, phase, genotype.as_deref())),
        Command::Join {
            run,
            client_id,
            phase,
            genotype,
            partition,
        } => run
            .resolve(Some(phase))
            .and_then(|c| cmd_join(&c, phase, client_id, genotype.as_deref(), partition.as_deref())),
        Command::Check { target } => cmd_check(&target).map(|msg| println!("{msg}")),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
