//! Search then evaluate on a synthetic task with in-process clients.
//!
//! Usage: `cargo run --release --example fednas_in_process -- [per_class] [rounds] [epochs]`

use std::sync::Arc;
use std::time::Instant;

use fednas::data::{dirichlet_partition, synthesize_dataset, PartitionSpec, SyntheticSpec};
use fednas::federation::{run_fedavg_eval, run_fednas, FedConfig, Phase};
use fednas::local::SearchHyper;
use fednas::search_space::NetworkSpec;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (per_class, rounds, epochs) = (arg(1, 100), arg(2, 3), arg(3, 1));
    let synth = SyntheticSpec {
        classes: 10,
        per_class,
        shape: (3, 16, 16),
        seed: 1,
        difficulty: 0.0,
        stream: 0,
    };
    let train = Arc::new(synthesize_dataset(&synth)?);
    let test = Arc::new(synthesize_dataset(&synth.test_split(50))?);
    let partition = dirichlet_partition(
        train.labels(),
        10,
        &PartitionSpec {
            clients: 4,
            concentration: 0.5,
            seed: 2,
        },
    )?;
    println!("shard sizes {:?}", partition.shard_sizes());

    let mut config = FedConfig {
        clients: 4,
        rounds,
        hyper: SearchHyper {
            local_epochs: epochs,
            batch_size: 32,
            ..SearchHyper::default()
        },
        spec: NetworkSpec {
            num_cells: 4,
            init_channels: 8,
            num_classes: 10,
            input_shape: (3, 16, 16),
        },
        seed: 3,
        phase: Phase::Search,
        eval_batch_size: 100,
        workers: 0,
        keep_payloads: false,
    };

    let t0 = Instant::now();
    let mut report = |r: &fednas::federation::RoundRecord| {
        println!(
            "{} round {:>2}: loss {:.4} acc {:.4} ({} ms)",
            r.phase, r.round, r.global_test_loss, r.global_test_acc, r.duration_ms
        );
        Ok(())
    };
    let searched = run_fednas(config, train.clone(), test.clone(), &partition, &mut report)?;
    let genotype = searched.genotype.expect("search yields a genotype");
    println!("search took {:.1}s\n{}", t0.elapsed().as_secs_f64(), genotype.to_json());

    config.phase = Phase::Eval;
    let t1 = Instant::now();
    let evaluated = run_fedavg_eval(config, &genotype, train, test, &partition, &mut report)?;
    println!("eval took {:.1}s", t1.elapsed().as_secs_f64());
    let last = evaluated.history.last().expect("at least one round");
    println!("final accuracy {:.4}", last.global_test_acc);
    Ok(())
}
