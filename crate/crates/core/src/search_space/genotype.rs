use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::network::{node_edges, ArchParams, INTERMEDIATE_NODES};
use super::ops::OpKind;
use super::SearchSpaceError;
use crate::autodiff::softmax_in_place;
use crate::tensor::Tensor;

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// One kept edge: predecessor index (0 = `c_{k-2}`, 1 = `c_{k-1}`,
/// `2 + i` = intermediate node `i`) and the op applied on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gene {
    pub input: usize,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<Vec<Gene>>,
    pub reduce: Vec<Vec<Gene>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeDoc {
    schema_version: u32,
    normal: Vec<Vec<Gene>>,
    reduce: Vec<Vec<Gene>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Dot,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = SearchSpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            other => Err(SearchSpaceError::Parse(format!(
                "unknown export format {other:?}, expected dot or json"
            ))),
        }
    }
}

fn validate_cell(kind: &str, nodes: &[Vec<Gene>]) -> Result<(), SearchSpaceError> {
    let bad = |msg: String| Err(SearchSpaceError::InvalidGenotype(format!("{kind} cell: {msg}")));
    if nodes.len() != INTERMEDIATE_NODES {
        return bad(format!("expected {INTERMEDIATE_NODES} nodes, got {}", nodes.len()));
    }
    for (j, genes) in nodes.iter().enumerate() {
        if genes.len() != 2 {
            return bad(format!("node {j} has {} inputs, expected 2", genes.len()));
        }
        if genes[0].input == genes[1].input {
            return bad(format!("node {j} uses predecessor {} twice", genes[0].input));
        }
        for g in genes {
            if g.input >= j + 2 {
                return bad(format!("node {j} reads predecessor {} which does not precede it", g.input));
            }
            if g.op == OpKind::Zero {
                return bad(format!("node {j} selects the zero op"));
            }
        }
    }
    Ok(())
}

impl Genotype {
    pub fn validate(&self) -> Result<(), SearchSpaceError> {
        validate_cell("normal", &self.normal)?;
        validate_cell("reduce", &self.reduce)
    }

    pub fn to_json(&self) -> String {
        let doc = GenotypeDoc {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            normal: self.normal.clone(),
            reduce: self.reduce.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SearchSpaceError> {
        let doc: GenotypeDoc = serde_json::from_str(text).map_err(|e| SearchSpaceError::Parse(e.to_string()))?;
        if doc.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(SearchSpaceError::SchemaVersion {
                found: doc.schema_version,
                expected: GENOTYPE_SCHEMA_VERSION,
            });
        }
        let g = Genotype {
            normal: doc.normal,
            reduce: doc.reduce,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        writeln!(s, "// fednas genotype schema_version={GENOTYPE_SCHEMA_VERSION}").unwrap();
        writeln!(s, "digraph genotype {{").unwrap();
        writeln!(s, "  rankdir=LR;").unwrap();
        for (kind, nodes) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            writeln!(s, "  subgraph cluster_{kind} {{").unwrap();
            writeln!(s, "    label=\"{kind}\";").unwrap();
            writeln!(s, "    \"{kind}:c_{{k-2}}\" [shape=box];").unwrap();
            writeln!(s, "    \"{kind}:c_{{k-1}}\" [shape=box];").unwrap();
            for j in 0..nodes.len() {
                writeln!(s, "    \"{kind}:{j}\";").unwrap();
            }
            writeln!(s, "    \"{kind}:c_{{k}}\" [shape=box];").unwrap();
            for (j, genes) in nodes.iter().enumerate() {
                for g in genes {
                    writeln!(s, "    \"{kind}:{}\" -> \"{kind}:{j}\" [label=\"{}\"];", dot_source(g.input), g.op).unwrap();
                }
            }
            for j in 0..nodes.len() {
                writeln!(s, "    \"{kind}:{j}\" -> \"{kind}:c_{{k}}\";").unwrap();
            }
            writeln!(s, "  }}").unwrap();
        }
        writeln!(s, "}}").unwrap();
        s
    }

    /// Reads the DOT text written by [`Genotype::to_dot`].
    pub fn from_dot(text: &str) -> Result<Self, SearchSpaceError> {
        static HEADER: OnceLock<Regex> = OnceLock::new();
        static EDGE: OnceLock<Regex> = OnceLock::new();
        let header = HEADER.get_or_init(|| Regex::new(r"^// fednas genotype schema_version=(\d+)$").unwrap());
        let edge = EDGE.get_or_init(|| {
            Regex::new(r#"^\s*"(normal|reduce):(c_\{k-2\}|c_\{k-1\}|\d+)" -> "(normal|reduce):(\d+)" \[label="([a-z0-9_]+)"\];$"#).unwrap()
        });

        let first = text.lines().next().unwrap_or("");
        let version = header
            .captures(first)
            .ok_or_else(|| SearchSpaceError::Parse("missing genotype schema header".into()))?[1]
            .parse::<u32>()
            .map_err(|e| SearchSpaceError::Parse(e.to_string()))?;
        if version != GENOTYPE_SCHEMA_VERSION {
            return Err(SearchSpaceError::SchemaVersion {
                found: version,
                expected: GENOTYPE_SCHEMA_VERSION,
            });
        }

        let mut normal = vec![Vec::new(); INTERMEDIATE_NODES];
        let mut reduce = vec![Vec::new(); INTERMEDIATE_NODES];
        for line in text.lines() {
            let Some(caps) = edge.captures(line) else { continue };
            if caps[1] != caps[3] {
                return Err(SearchSpaceError::Parse(format!("edge crosses cells: {line}")));
            }
            let input = match &caps[2] {
                "c_{k-2}" => 0,
                "c_{k-1}" => 1,
                n => 2 + n.parse::<usize>().map_err(|e| SearchSpaceError::Parse(e.to_string()))?,
            };
            let target: usize = caps[4]
                .parse()
                .map_err(|e: std::num::ParseIntError| SearchSpaceError::Parse(e.to_string()))?;
            let op: OpKind = caps[5].parse()?;
            let cell = if &caps[1] == "normal" { &mut normal } else { &mut reduce };
            let slot = cell
                .get_mut(target)
                .ok_or_else(|| SearchSpaceError::Parse(format!("node {target} out of range")))?;
            slot.push(Gene { input, op });
        }
        let g = Genotype { normal, reduce };
        g.validate()?;
        Ok(g)
    }

    pub fn export(&self, format: ExportFormat) -> String {
        match format {
            ExportFormat::Dot => self.to_dot(),
            ExportFormat::Json => self.to_json(),
        }
    }
}

fn dot_source(input: usize) -> String {
    match input {
        0 => "c_{k-2}".to_string(),
        1 => "c_{k-1}".to_string(),
        n => (n - 2).to_string(),
    }
}

fn discretize_cell(alpha: &Tensor) -> Vec<Vec<Gene>> {
    let cols = alpha.shape()[1];
    let zero = OpKind::Zero.ordinal();
    (0..INTERMEDIATE_NODES)
        .map(|j| {
            // (weight, predecessor, op) of each edge's strongest non-zero op
            let mut best: Vec<(f64, usize, OpKind)> = node_edges(j)
                .map(|(edge, from)| {
                    let mut p = alpha.data()[edge * cols..][..cols].to_vec();
                    softmax_in_place(&mut p);
                    let mut k_best = usize::MAX;
                    for k in (0..cols).filter(|&k| k != zero) {
                        if k_best == usize::MAX || p[k] > p[k_best] {
                            k_best = k;
                        }
                    }
                    (p[k_best], from, OpKind::from_ordinal(k_best).expect("column is a candidate"))
                })
                .collect();
            best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut genes: Vec<Gene> = best[..2].iter().map(|&(_, input, op)| Gene { input, op }).collect();
            genes.sort_by_key(|g| g.input);
            genes
        })
        .collect()
}

/// Keeps, for each intermediate node, the two incoming edges whose strongest
/// non-zero op has the largest softmax weight.
pub fn discretize(arch: &ArchParams) -> Genotype {
    Genotype {
        normal: discretize_cell(&arch.normal),
        reduce: discretize_cell(&arch.reduce),
    }
}
