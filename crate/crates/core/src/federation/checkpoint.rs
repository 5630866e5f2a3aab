//! Versioned binary model checkpoints.
//!
//! Layout (little-endian): `FNCK`, `u16` version, 32-byte SHA-256 of the model
//! description, `u32` description length and its JSON, `u8` phase, `u64` round,
//! `u32` entry count, then per entry `u16` name length, name, `u8` section,
//! `u8` rank, `u64` dims, raw `f64` values; finally a CRC32 of every prior byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{FedError, Phase};
use crate::autodiff::{ParamStore, Section};
use crate::search_space::{build_fixed_network, build_super_network, Genotype, Network, NetworkSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FNCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub genotype: Option<Genotype>,
    pub phase: Phase,
    pub round: usize,
    pub store: ParamStore,
}

fn description(spec: &NetworkSpec, genotype: Option<&Genotype>) -> String {
    serde_json::json!({ "spec": spec, "genotype": genotype }).to_string()
}

/// SHA-256 of the network description (spec plus genotype, if any).
pub fn model_hash(spec: &NetworkSpec, genotype: Option<&Genotype>) -> [u8; 32] {
    Sha256::digest(description(spec, genotype).as_bytes()).into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FedError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FedError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FedError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FedError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn model_hash(&self) -> [u8; 32] {
        model_hash(&self.spec, self.genotype.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_hash());
        let desc = description(&self.spec, self.genotype.as_ref());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.push(self.phase.code());
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, e) in self.store.iter() {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.section {
                Section::Weight => 0,
                Section::Arch => 1,
            });
            out.push(e.value.rank() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FedError> {
        let bad = |m: String| FedError::Checkpoint(m);
        if bytes.len() < 4 + 2 + 32 + 4 {
            return Err(bad("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("version {version} is not supported (expected {CHECKPOINT_VERSION})")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let desc_len = r.u32()? as usize;
        let desc = std::str::from_utf8(r.take(desc_len)?).map_err(|e| bad(e.to_string()))?;
        let doc: serde_json::Value = serde_json::from_str(desc).map_err(|e| bad(e.to_string()))?;
        let spec: NetworkSpec = serde_json::from_value(doc["spec"].clone()).map_err(|e| bad(e.to_string()))?;
        let genotype: Option<Genotype> = serde_json::from_value(doc["genotype"].clone()).map_err(|e| bad(e.to_string()))?;
        if model_hash(&spec, genotype.as_ref()) != hash {
            return Err(bad("model description does not match its hash".into()));
        }
        let phase = Phase::from_code(r.u8()?).ok_or_else(|| bad("unknown phase".into()))?;
        let round = r.u64()? as usize;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| bad(e.to_string()))?.to_string();
            let section = match r.u8()? {
                0 => Section::Weight,
                1 => Section::Arch,
                s => return Err(bad(format!("unknown section {s}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("shape overflows".into()))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("shape overflows".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            store.register(name, section, value);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            spec,
            genotype,
            phase,
            round,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FedError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FedError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the network and checks the stored parameters against it.
    pub fn restore(&self) -> Result<(Network, ParamStore), FedError> {
        let (net, fresh) = match &self.genotype {
            Some(g) => build_fixed_network(g, &self.spec, 0)?,
            None => build_super_network(&self.spec, 0)?,
        };
        if fresh.len() != self.store.len() {
            return Err(FedError::Checkpoint(format!(
                "network has {} parameters, checkpoint has {}",
                fresh.len(),
                self.store.len()
            )));
        }
        for ((_, a), (_, b)) in fresh.iter().zip(self.store.iter()) {
            if a.name != b.name || a.section != b.section || a.value.shape() != b.value.shape() {
                return Err(FedError::Checkpoint(format!("parameter {} does not match the network", b.name)));
            }
        }
        Ok((net, self.store.clone()))
    }
}
