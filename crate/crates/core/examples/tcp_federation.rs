//! A short federated search over loopback TCP: the server runs on the main
//! thread, each client on its own thread with its own socket. The traces of
//! every connection are checked against the round protocol afterwards.
//!
//! Usage: `cargo run --release --example tcp_federation -- [clients] [rounds]`

use std::sync::Arc;

use fednas::comm::{run_with_transport, Role, TransportKind};
use fednas::data::{dirichlet_partition, synthesize_dataset, PartitionSpec, SyntheticSpec};
use fednas::federation::{FedConfig, Phase, RoundRecord};
use fednas::local::SearchHyper;
use fednas::search_space::NetworkSpec;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (clients, rounds) = (arg(1, 3), arg(2, 2));
    let spec = NetworkSpec {
        num_cells: 3,
        init_channels: 4,
        num_classes: 10,
        input_shape: (3, 8, 8),
    };
    let synth = SyntheticSpec {
        classes: 10,
        per_class: 12,
        shape: spec.input_shape,
        seed: 9,
        difficulty: 0.0,
        stream: 0,
    };
    let train = Arc::new(synthesize_dataset(&synth)?);
    let test = Arc::new(synthesize_dataset(&synth.test_split(5))?);
    let partition = dirichlet_partition(
        train.labels(),
        10,
        &PartitionSpec {
            clients,
            concentration: 0.5,
            seed: 10,
        },
    )?;
    let config = FedConfig {
        clients,
        rounds,
        hyper: SearchHyper {
            local_epochs: 1,
            batch_size: 16,
            ..SearchHyper::default()
        },
        spec,
        seed: 11,
        phase: Phase::Search,
        eval_batch_size: 50,
        workers: 0,
        keep_payloads: false,
    };
    let addr = "127.0.0.1:0".parse()?;
    let mut report = |r: &RoundRecord| {
        println!("round {}: loss {:.4} acc {:.3}", r.round, r.global_test_loss, r.global_test_acc);
        Ok(())
    };
    let run = run_with_transport(TransportKind::Tcp(addr), config, None, train, test, &partition, &mut report)?;
    run.server_trace.check(Role::Server, clients, rounds)?;
    for client in &run.client_runs {
        client.trace.check(Role::Client, 1, rounds)?;
    }
    println!(
        "{} server trace events, all connections follow the protocol",
        run.server_trace.events.len()
    );
    println!("{}", run.outcome.genotype.expect("search yields a genotype").to_json());
    Ok(())
}
