//! One client alternating weight and architecture steps on its own shard,
//! without any federation. Prints the loss and the discretized cell per epoch.
//!
//! Usage: `cargo run --release --example local_search -- [epochs]`

use std::sync::Arc;

use fednas::data::{synthesize_dataset, ClientShard, SyntheticSpec};
use fednas::local::{evaluate, ClientState, SearchHyper};
use fednas::search_space::{build_super_network, discretize, NetworkSpec};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let spec = NetworkSpec {
        num_cells: 3,
        init_channels: 8,
        num_classes: 10,
        input_shape: (3, 12, 12),
    };
    let synth = SyntheticSpec {
        classes: 10,
        per_class: 20,
        shape: spec.input_shape,
        seed: 4,
        difficulty: 0.0,
        stream: 0,
    };
    let data = Arc::new(synthesize_dataset(&synth)?);
    let test = synthesize_dataset(&synth.test_split(10))?;
    let (net, store) = build_super_network(&spec, 5)?;
    let shard = ClientShard::from_indices(0, &(0..data.len()).collect::<Vec<_>>(), 0.5, 6)?;
    let mut state = ClientState::new(0, shard, 7, Arc::new(net), store, data);
    let hyper = SearchHyper {
        batch_size: 32,
        ..SearchHyper::default()
    };
    for epoch in 0..epochs {
        let loss = state.search_epochs(epoch..epoch + 1, &hyper)?;
        let acc = evaluate(&state.network, &state.store, &test, 100, false)?.accuracy;
        let genotype = discretize(&state.arch().expect("super-network has alpha"));
        let normal: Vec<String> = genotype
            .normal
            .iter()
            .enumerate()
            .flat_map(|(node, genes)| genes.iter().map(move |g| format!("{}:{}<-{}", node + 2, g.op.name(), g.input)))
            .collect();
        println!(
            "epoch {:>2}: train loss {loss:.4}, test acc {acc:.3}, normal cell [{}]",
            epoch + 1,
            normal.join(", ")
        );
    }
    Ok(())
}
