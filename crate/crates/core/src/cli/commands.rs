use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Subcommand, ValueEnum};

use super::manifest::{hex, sha256_hex, Manifest};
use super::{CliError, DatasetSource, ExportArg, RunConfig, TransportChoice};
use crate::comm::{
    client_loop, run_with_transport, server_loop, tcp_connect, ClientOptions, Role, ServerOptions, TcpAcceptor, Trace, TransportKind,
};
use crate::data::{class_count_csv, class_counts, dirichlet_partition, load_cifar10, synthesize_dataset, Dataset, Partition};
use crate::federation::{
    build_phase_network, client_seed, client_state, model_seed, parse_history_csv, run_fedavg_eval, run_fednas, Checkpoint, Coordinator,
    FedError, HistoryWriter, Phase, RoundRecord, RunOutcome,
};
use crate::search_space::{ExportFormat, Genotype};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Server,
    Client,
}

#[derive(Debug, Subcommand)]
pub enum CheckTarget {
    /// Every sample index belongs to exactly one client.
    Partition {
        file: PathBuf,
        /// Expected number of training samples.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        clients: Option<usize>,
    },
    /// The history CSV parses under the strict schema.
    History {
        file: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// A message trace follows the round protocol.
    Trace {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "server")]
        role: RoleArg,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        rounds: usize,
    },
    /// A checkpoint decodes and restores into a network.
    Checkpoint { file: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn load_datasets(config: &RunConfig) -> Result<(Arc<Dataset>, Arc<Dataset>), CliError> {
    let d = &config.dataset;
    let (train, test) = match d.source {
        DatasetSource::Synthetic => (synthesize_dataset(&d.synthetic_train())?, synthesize_dataset(&d.synthetic_test())?),
        DatasetSource::Cifar10 => {
            let dir = d
                .path
                .as_deref()
                .ok_or_else(|| CliError::Usage("dataset.path is required for cifar10".into()))?;
            let splits = load_cifar10(dir)?;
            (splits.train, splits.test)
        }
    };
    log::info!("loaded {} training and {} test samples", train.len(), test.len());
    Ok((Arc::new(train), Arc::new(test)))
}

/// Loads a partition file and checks it fits the data and client count, or
/// computes the partition the `partition` command would write.
pub fn resolve_partition(config: &RunConfig, train: &Dataset, path: Option<&Path>) -> Result<Partition, CliError> {
    let Some(path) = path else {
        return Ok(dirichlet_partition(train.labels(), train.num_classes(), &config.partition.spec())?);
    };
    let partition = Partition::from_json(&read_text(path)?)?;
    partition.check_coverage()?;
    if partition.num_samples != train.len() {
        return Err(CliError::Usage(format!(
            "partition covers {} samples but the training set has {}",
            partition.num_samples,
            train.len()
        )));
    }
    if partition.clients.len() != config.partition.clients {
        return Err(CliError::Usage(format!(
            "partition has {} clients but the config asks for {}",
            partition.clients.len(),
            config.partition.clients
        )));
    }
    Ok(partition)
}

fn load_genotype(path: &Path) -> Result<Genotype, CliError> {
    let text = read_text(path)?;
    let g = match path.extension().and_then(|e| e.to_str()) {
        Some("dot") => Genotype::from_dot(&text)?,
        _ => Genotype::from_json(&text)?,
    };
    Ok(g)
}

/// Output directory plus the manifest recording what lands in it.
struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
}

impl Outputs {
    fn new(config: &RunConfig, command: &str, prefix: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
        let mut manifest = Manifest::new(command, config);
        manifest.resolved_config = format!("{prefix}_config.toml");
        Ok(Self {
            dir: config.out_dir.clone(),
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn record_existing(&mut self, name: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(mut self, config: &RunConfig, prefix: &str) -> Result<(), CliError> {
        let resolved = self.manifest.resolved_config.clone();
        self.write(&resolved, config.to_toml().as_bytes())?;
        let manifest = self.manifest.to_json();
        let path = self.path(&format!("{prefix}_manifest.json"));
        std::fs::write(&path, manifest).map_err(io_err(&path))
    }
}

pub fn cmd_partition(config: &RunConfig) -> Result<(), CliError> {
    let (train, _) = load_datasets(config)?;
    let partition = resolve_partition(config, &train, None)?;
    let counts = class_counts(&partition, train.labels(), train.num_classes());
    let mut out = Outputs::new(config, "partition", "partition")?;
    out.manifest.inputs.insert("train_checksum".into(), train.checksum());
    out.write("partition.json", partition.to_json().as_bytes())?;
    out.write("class_counts.csv", class_count_csv(&counts).as_bytes())?;
    out.finish(config, "partition")?;
    println!("{} clients, shard sizes {:?}", partition.clients.len(), partition.shard_sizes());
    Ok(())
}

fn history_logger(path: &Path) -> Result<impl FnMut(&RoundRecord) -> Result<(), FedError>, CliError> {
    let mut writer = HistoryWriter::create(path)?;
    Ok(move |r: &RoundRecord| Ok(writer.append(&r.row())?))
}

fn record_run_inputs(out: &mut Outputs, config: &RunConfig, phase: Phase, test: &Dataset, genotype: Option<&Genotype>) {
    let fed = config.fed_config(phase);
    let m = &mut out.manifest;
    m.inputs.insert("test_checksum".into(), test.checksum());
    m.inputs.insert("config_hash".into(), hex(&fed.config_hash(genotype)));
    if let Some(g) = genotype {
        m.inputs.insert("genotype_sha256".into(), sha256_hex(g.to_json().as_bytes()));
    }
    m.seeds.insert("model".into(), model_seed(config.seed, phase));
    for k in 0..config.partition.clients {
        m.seeds.insert(format!("client_{k}"), client_seed(config.seed, phase, k));
    }
}

fn write_outcome(out: &mut Outputs, phase: Phase, outcome: &RunOutcome, trace: Option<&Trace>) -> Result<(), CliError> {
    let prefix = phase.to_string();
    out.record_existing(&format!("{prefix}_history.csv"))?;
    match phase {
        Phase::Search => {
            let g = outcome.genotype.as_ref().expect("a search run yields a genotype");
            out.write("genotype.json", g.to_json().as_bytes())?;
            out.write("genotype.dot", g.to_dot().as_bytes())?;
            out.write("search_checkpoint.fnck", &outcome.checkpoint.to_bytes())?;
        }
        Phase::Eval => out.write("eval_model.fnck", &outcome.checkpoint.to_bytes())?,
    }
    if let Some(t) = trace {
        out.write(&format!("{prefix}_trace.csv"), t.to_csv().as_bytes())?;
    }
    if let Some(last) = outcome.history.last() {
        println!("{prefix}: {} rounds, final test accuracy {:.4}", last.round, last.global_test_acc);
    }
    Ok(())
}

fn run_phase(config: &RunConfig, phase: Phase, genotype: Option<Genotype>, partition_path: Option<&Path>) -> Result<(), CliError> {
    let (train, test) = load_datasets(config)?;
    let partition = resolve_partition(config, &train, partition_path)?;
    let fed = config.fed_config(phase);
    let prefix = phase.to_string();
    let mut out = Outputs::new(config, &prefix, &prefix)?;
    out.manifest.inputs.insert("train_checksum".into(), train.checksum());
    out.manifest
        .inputs
        .insert("partition_sha256".into(), sha256_hex(partition.to_json().as_bytes()));
    record_run_inputs(&mut out, config, phase, &test, genotype.as_ref());

    let mut on_round = history_logger(&out.path(&format!("{prefix}_history.csv")))?;
    let (outcome, trace) = match config.transport.kind {
        TransportChoice::InProcess => {
            let outcome = match (&genotype, phase) {
                (None, Phase::Search) => run_fednas(fed, train, test, &partition, &mut on_round)?,
                (Some(g), Phase::Eval) => run_fedavg_eval(fed, g, train, test, &partition, &mut on_round)?,
                _ => return Err(CliError::Usage(format!("the {phase} phase got the wrong genotype input"))),
            };
            (outcome, None)
        }
        kind => {
            let transport = match kind {
                TransportChoice::Tcp => TransportKind::Tcp(config.transport.socket_addr()?),
                _ => TransportKind::Channel,
            };
            let run = run_with_transport(transport, fed, genotype, train, test, &partition, &mut on_round)?;
            run.server_trace.check(Role::Server, fed.clients, fed.rounds)?;
            (run.outcome, Some(run.server_trace))
        }
    };
    drop(on_round);
    write_outcome(&mut out, phase, &outcome, trace.as_ref())?;
    out.finish(config, &prefix)
}

pub fn cmd_search(config: &RunConfig, partition: Option<&Path>) -> Result<(), CliError> {
    run_phase(config, Phase::Search, None, partition)
}

pub fn cmd_eval(config: &RunConfig, genotype: &Path, partition: Option<&Path>) -> Result<(), CliError> {
    let g = load_genotype(genotype)?;
    run_phase(config, Phase::Eval, Some(g), partition)
}

fn phase_genotype(phase: Phase, genotype: Option<&Path>) -> Result<Option<Genotype>, CliError> {
    match (phase, genotype) {
        (Phase::Search, None) => Ok(None),
        (Phase::Eval, Some(p)) => Ok(Some(load_genotype(p)?)),
        (Phase::Search, Some(_)) => Err(CliError::Usage("--genotype applies only to the eval phase".into())),
        (Phase::Eval, None) => Err(CliError::Usage("the eval phase needs --genotype".into())),
    }
}

pub fn cmd_serve(config: &RunConfig, phase: Phase, genotype: Option<&Path>) -> Result<(), CliError> {
    let genotype = phase_genotype(phase, genotype)?;
    let (_, test) = load_datasets(config)?;
    let fed = config.fed_config(phase);
    let prefix = phase.to_string();
    let mut out = Outputs::new(config, "serve", &prefix)?;
    record_run_inputs(&mut out, config, phase, &test, genotype.as_ref());

    let mut coord = Coordinator::new(fed, genotype, test)?;
    let mut acceptor = TcpAcceptor::bind(config.transport.socket_addr()?)?;
    log::info!("listening on {} for {} clients", acceptor.local_addr()?, fed.clients);
    let mut on_round = history_logger(&out.path(&format!("{prefix}_history.csv")))?;
    let opts = ServerOptions {
        round_timeout: config.transport.timeout(),
    };
    let trace = server_loop(&mut acceptor, &mut coord, &opts, &mut on_round)?;
    drop(on_round);
    trace.check(Role::Server, fed.clients, fed.rounds)?;
    let outcome = coord.into_outcome();
    write_outcome(&mut out, phase, &outcome, Some(&trace))?;
    out.finish(config, &prefix)
}

pub fn cmd_join(
    config: &RunConfig,
    phase: Phase,
    client_id: usize,
    genotype: Option<&Path>,
    partition: Option<&Path>,
) -> Result<(), CliError> {
    let genotype = phase_genotype(phase, genotype)?;
    let (train, _) = load_datasets(config)?;
    let partition = resolve_partition(config, &train, partition)?;
    let fed = config.fed_config(phase);
    let hash = fed.config_hash(genotype.as_ref());
    let conn = tcp_connect(config.transport.socket_addr()?, Duration::from_secs(60))?;
    let opts = ClientOptions {
        timeout: config.transport.timeout(),
        slots: None,
    };
    let make = |c: &crate::federation::FedConfig, g: Option<&Genotype>| {
        let (network, store) = build_phase_network(c, g)?;
        client_state(c, client_id, Arc::new(network), store, train, &partition)
    };
    let run = client_loop(conn, client_id as u32, hash, make, &opts)?;
    run.trace.check(Role::Client, 1, fed.rounds)?;
    match run.evals.last() {
        Some((round, _, acc)) => println!(
            "client {client_id}: {} rounds, final test accuracy {acc:.4} (round {})",
            run.rounds,
            round + 1
        ),
        None => println!("client {client_id}: no rounds"),
    }
    Ok(())
}

pub fn cmd_export(genotype: &Path, format: ExportArg) -> Result<String, CliError> {
    let g = load_genotype(genotype)?;
    Ok(g.export(match format {
        ExportArg::Dot => ExportFormat::Dot,
        ExportArg::Json => ExportFormat::Json,
    }))
}

pub fn cmd_check(target: &CheckTarget) -> Result<String, CliError> {
    let fail = |m: String| Err(CliError::Check(m));
    match target {
        CheckTarget::Partition { file, samples, clients } => {
            let p = Partition::from_json(&read_text(file)?)?;
            p.check_coverage().map_err(|e| CliError::Check(e.to_string()))?;
            if samples.is_some_and(|n| n != p.num_samples) {
                return fail(format!(
                    "partition covers {} samples, expected {}",
                    p.num_samples,
                    samples.unwrap_or(0)
                ));
            }
            if clients.is_some_and(|k| k != p.clients.len()) {
                return fail(format!(
                    "partition has {} clients, expected {}",
                    p.clients.len(),
                    clients.unwrap_or(0)
                ));
            }
            Ok(format!(
                "ok: {} samples covered exactly once by {} clients",
                p.num_samples,
                p.clients.len()
            ))
        }
        CheckTarget::History { file, rounds } => {
            let rows = parse_history_csv(&read_text(file)?).map_err(|e| CliError::Check(e.to_string()))?;
            if rounds.is_some_and(|t| t != rows.len()) {
                return fail(format!("history has {} rows, expected {}", rows.len(), rounds.unwrap_or(0)));
            }
            Ok(format!("ok: {} rounds", rows.len()))
        }
        CheckTarget::Trace {
            file,
            role,
            clients,
            rounds,
        } => {
            let trace = Trace::from_csv(&read_text(file)?)?;
            let role = match role {
                RoleArg::Server => Role::Server,
                RoleArg::Client => Role::Client,
            };
            trace.check(role, *clients, *rounds)?;
            Ok(format!("ok: {} events", trace.events.len()))
        }
        CheckTarget::Checkpoint { file } => {
            let ck = Checkpoint::load(file)?;
            let (_, store) = ck.restore()?;
            Ok(format!(
                "ok: {} checkpoint after round {}, {} weights",
                ck.phase,
                ck.round,
                store.parameter_count()
            ))
        }
    }
}
