//! Round-trips a genotype through JSON and DOT and prints both forms.
//!
//! Usage: `cargo run --example export_genotype -- [genotype.json|genotype.dot]`

use fednas::search_space::{ExportFormat, Gene, Genotype, OpKind};

fn darts_like() -> Genotype {
    let gene = |input, op| Gene { input, op };
    Genotype {
        normal: vec![
            vec![gene(0, OpKind::SepConv3x3), gene(1, OpKind::SepConv3x3)],
            vec![gene(0, OpKind::SepConv3x3), gene(1, OpKind::SepConv3x3)],
            vec![gene(0, OpKind::Identity), gene(1, OpKind::SepConv3x3)],
            vec![gene(0, OpKind::Identity), gene(2, OpKind::DilConv3x3)],
        ],
        reduce: vec![
            vec![gene(0, OpKind::MaxPool3x3), gene(1, OpKind::MaxPool3x3)],
            vec![gene(1, OpKind::MaxPool3x3), gene(2, OpKind::Identity)],
            vec![gene(0, OpKind::MaxPool3x3), gene(2, OpKind::Identity)],
            vec![gene(1, OpKind::MaxPool3x3), gene(2, OpKind::Identity)],
        ],
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let genotype = match std::env::args().nth(1) {
        Some(path) => {
            let text = std::fs::read_to_string(&path)?;
            if path.ends_with(".dot") {
                Genotype::from_dot(&text)?
            } else {
                Genotype::from_json(&text)?
            }
        }
        None => darts_like(),
    };
    genotype.validate()?;
    let json = genotype.export(ExportFormat::Json);
    let dot = genotype.export(ExportFormat::Dot);
    assert_eq!(Genotype::from_json(&json)?, genotype);
    assert_eq!(Genotype::from_dot(&dot)?, genotype);
    println!("{json}\n{dot}");
    Ok(())
}
