//! Prints the per-client class table of a Dirichlet label partition for a
//! range of concentrations.
//!
//! Usage: `cargo run --release --example partition_table -- [clients]`

use fednas::data::{class_count_csv, class_counts, dirichlet_partition, PartitionSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clients = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 500)).collect();
    for concentration in [0.1, 0.5, 1.0, 100.0] {
        let spec = PartitionSpec {
            clients,
            concentration,
            seed: 11,
        };
        let partition = dirichlet_partition(&labels, 10, &spec)?;
        println!("Dir({concentration}): shard sizes {:?}", partition.shard_sizes());
        print!("{}", class_count_csv(&class_counts(&partition, &labels, 10)));
        println!();
    }
    Ok(())
}
