//! Builds the desk-scale super-network, counts its parameters, and runs one
//! forward pass on a synthetic batch.
//!
//! Usage: `cargo run --release --example super_network -- [cells] [channels]`

use std::time::Instant;

use fednas::autodiff::{ComputeGraph, Section};
use fednas::data::{synthesize_dataset, SyntheticSpec};
use fednas::search_space::{build_fixed_network, build_super_network, discretize, parameter_count, NetworkSpec};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = NetworkSpec {
        num_cells: arg(1, 4),
        init_channels: arg(2, 8),
        num_classes: 10,
        input_shape: (3, 16, 16),
    };
    let (net, store) = build_super_network(&spec, 1)?;
    let arch: usize = store.ids(Section::Arch).map(|id| store.get(id).map_or(0, |t| t.len())).sum();
    println!("super-network: {} weights, {arch} architecture parameters", parameter_count(&store));
    println!("reduction cells at {:?}", spec.reduction_positions());

    let data = synthesize_dataset(&SyntheticSpec {
        classes: 10,
        per_class: 4,
        shape: spec.input_shape,
        seed: 2,
        difficulty: 0.0,
        stream: 0,
    })?;
    let batch: Vec<usize> = (0..32).collect();
    let sub = data.subset(&batch)?;
    let t0 = Instant::now();
    let mut graph = ComputeGraph::new();
    let (loss, _) = net.loss(&mut graph, &store, sub.images(), sub.labels())?;
    println!(
        "forward on 32 images: loss {:.4} in {:.2}s, {} graph nodes",
        graph.value(loss).data()[0],
        t0.elapsed().as_secs_f64(),
        graph.len()
    );

    let genotype = discretize(&net.arch_params(&store).expect("super-network has alpha"));
    let (_, fixed) = build_fixed_network(&genotype, &spec, 1)?;
    println!("discretized at initialization:\n{}", genotype.to_json());
    println!("fixed network: {} weights", parameter_count(&fixed));
    Ok(())
}
