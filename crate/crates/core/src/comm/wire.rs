//! Frame layout: `FNAS` magic, `u16` version, `u8` kind, `u64` payload length
//! (all little-endian), the payload, then the CRC32 of the payload. Every
//! payload starts with a copy of the kind byte so a corrupted header kind is
//! caught even though the checksum covers only the payload.

use crate::autodiff::ModelWeights;
use crate::federation::FedConfig;
use crate::search_space::{ArchParams, Genotype};
use crate::tensor::Tensor;

use super::CommError;

pub const FRAME_MAGIC: [u8; 4] = *b"FNAS";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 1 + 8;
pub const TRAILER_BYTES: usize = 4;
/// Upper bound on a payload; larger length fields are treated as corruption.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Register = 1,
    Init = 2,
    GlobalUpdate = 3,
    LocalResult = 4,
    GlobalModelEval = 5,
    Shutdown = 6,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => MessageKind::Register,
            2 => MessageKind::Init,
            3 => MessageKind::GlobalUpdate,
            4 => MessageKind::LocalResult,
            5 => MessageKind::GlobalModelEval,
            6 => MessageKind::Shutdown,
            _ => return None,
        })
    }

    /// One-letter code used by the trace checker.
    pub fn letter(self) -> char {
        match self {
            MessageKind::Register => 'R',
            MessageKind::Init => 'I',
            MessageKind::GlobalUpdate => 'U',
            MessageKind::LocalResult => 'L',
            MessageKind::GlobalModelEval => 'E',
            MessageKind::Shutdown => 'S',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Register => "Register",
            MessageKind::Init => "Init",
            MessageKind::GlobalUpdate => "GlobalUpdate",
            MessageKind::LocalResult => "LocalResult",
            MessageKind::GlobalModelEval => "GlobalModelEval",
            MessageKind::Shutdown => "Shutdown",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        (1..=6).filter_map(MessageKind::from_byte).find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundMessage {
    /// Client hello: its id and the hash of the configuration it expects.
    Register {
        client_id: u32,
        config_hash: [u8; 32],
    },
    Init {
        config_hash: [u8; 32],
        config: FedConfig,
        genotype: Option<Genotype>,
    },
    GlobalUpdate {
        round: u64,
        weights: ModelWeights,
        arch: Option<ArchParams>,
    },
    LocalResult {
        round: u64,
        client_id: u32,
        n_k: u64,
        mean_train_loss: f64,
        weights: ModelWeights,
        arch: Option<ArchParams>,
    },
    GlobalModelEval {
        round: u64,
        loss: f64,
        acc: f64,
    },
    Shutdown {
        reason: String,
    },
}

impl RoundMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            RoundMessage::Register { .. } => MessageKind::Register,
            RoundMessage::Init { .. } => MessageKind::Init,
            RoundMessage::GlobalUpdate { .. } => MessageKind::GlobalUpdate,
            RoundMessage::LocalResult { .. } => MessageKind::LocalResult,
            RoundMessage::GlobalModelEval { .. } => MessageKind::GlobalModelEval,
            RoundMessage::Shutdown { .. } => MessageKind::Shutdown,
        }
    }

    pub fn round(&self) -> Option<u64> {
        match self {
            RoundMessage::GlobalUpdate { round, .. }
            | RoundMessage::LocalResult { round, .. }
            | RoundMessage::GlobalModelEval { round, .. } => Some(*round),
            _ => None,
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_weights(out: &mut Vec<u8>, w: &ModelWeights) {
    out.extend_from_slice(&(w.tensors().len() as u32).to_le_bytes());
    for t in w.tensors() {
        put_tensor(out, t);
    }
}

fn put_arch(out: &mut Vec<u8>, arch: &Option<ArchParams>) {
    match arch {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            put_tensor(out, &a.normal);
            put_tensor(out, &a.reduce);
        }
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

/// Serializes the payload, starting with the kind byte.
pub fn encode_payload(msg: &RoundMessage) -> Vec<u8> {
    let mut out = vec![msg.kind() as u8];
    match msg {
        RoundMessage::Register { client_id, config_hash } => {
            out.extend_from_slice(&client_id.to_le_bytes());
            out.extend_from_slice(config_hash);
        }
        RoundMessage::Init {
            config_hash,
            config,
            genotype,
        } => {
            out.extend_from_slice(config_hash);
            let doc = serde_json::json!({ "config": config, "genotype": genotype });
            put_bytes(&mut out, doc.to_string().as_bytes());
        }
        RoundMessage::GlobalUpdate { round, weights, arch } => {
            out.extend_from_slice(&round.to_le_bytes());
            put_weights(&mut out, weights);
            put_arch(&mut out, arch);
        }
        RoundMessage::LocalResult {
            round,
            client_id,
            n_k,
            mean_train_loss,
            weights,
            arch,
        } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&client_id.to_le_bytes());
            out.extend_from_slice(&n_k.to_le_bytes());
            out.extend_from_slice(&mean_train_loss.to_le_bytes());
            put_weights(&mut out, weights);
            put_arch(&mut out, arch);
        }
        RoundMessage::GlobalModelEval { round, loss, acc } => {
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&loss.to_le_bytes());
            out.extend_from_slice(&acc.to_le_bytes());
        }
        RoundMessage::Shutdown { reason } => put_bytes(&mut out, reason.as_bytes()),
    }
    out
}

pub fn encode(msg: &RoundMessage) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(HEADER_BYTES + payload.len() + TRAILER_BYTES);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(msg.kind() as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Validated header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: MessageKind,
    pub payload_len: u64,
}

pub fn decode_header(header: &[u8]) -> Result<FrameHeader, CommError> {
    if header.len() < HEADER_BYTES {
        return Err(CommError::Truncated {
            needed: HEADER_BYTES as u64,
            available: header.len() as u64,
        });
    }
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != FRAME_MAGIC {
        return Err(CommError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != WIRE_VERSION {
        return Err(CommError::Version {
            found: version,
            expected: WIRE_VERSION,
        });
    }
    let kind = MessageKind::from_byte(header[6]).ok_or(CommError::UnknownKind(header[6]))?;
    let payload_len = u64::from_le_bytes(header[7..15].try_into().expect("8 bytes"));
    if payload_len > MAX_PAYLOAD_BYTES {
        return Err(CommError::FrameTooLarge(payload_len));
    }
    Ok(FrameHeader { kind, payload_len })
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<RoundMessage, CommError> {
    let header = decode_header(bytes)?;
    let total = HEADER_BYTES as u64 + header.payload_len + TRAILER_BYTES as u64;
    if (bytes.len() as u64) < total {
        return Err(CommError::Truncated {
            needed: total,
            available: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 > total {
        return Err(CommError::TrailingBytes(bytes.len() as u64 - total));
    }
    let end = HEADER_BYTES + header.payload_len as usize;
    let payload = &bytes[HEADER_BYTES..end];
    let stored = u32::from_le_bytes(bytes[end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(CommError::Checksum { stored, actual });
    }
    decode_payload(header.kind, payload)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CommError> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CommError::Malformed(format!("payload ends early at byte {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CommError> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }

    fn u8(&mut self) -> Result<u8, CommError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CommError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CommError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CommError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CommError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor, CommError> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| CommError::Malformed("dimension overflows".into()))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CommError::Malformed("tensor size overflows".into()))?;
        let raw = self.take(len)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| CommError::Malformed(e.to_string()))
    }

    fn weights(&mut self) -> Result<ModelWeights, CommError> {
        let n = self.u32()? as usize;
        let mut ts = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            ts.push(self.tensor()?);
        }
        Ok(ModelWeights(ts))
    }

    fn arch(&mut self) -> Result<Option<ArchParams>, CommError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(ArchParams {
                normal: self.tensor()?,
                reduce: self.tensor()?,
            })),
            f => Err(CommError::Malformed(format!("bad architecture flag {f}"))),
        }
    }
}

pub fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<RoundMessage, CommError> {
    let mut c = Cursor { bytes: payload, pos: 0 };
    let echoed = c.u8()?;
    if echoed != kind as u8 {
        return Err(CommError::KindMismatch {
            header: kind as u8,
            payload: echoed,
        });
    }
    let msg = match kind {
        MessageKind::Register => RoundMessage::Register {
            client_id: c.u32()?,
            config_hash: c.array()?,
        },
        MessageKind::Init => {
            let config_hash = c.array()?;
            let doc: serde_json::Value = serde_json::from_slice(c.bytes()?).map_err(|e| CommError::Malformed(e.to_string()))?;
            RoundMessage::Init {
                config_hash,
                config: serde_json::from_value(doc["config"].clone()).map_err(|e| CommError::Malformed(e.to_string()))?,
                genotype: serde_json::from_value(doc["genotype"].clone()).map_err(|e| CommError::Malformed(e.to_string()))?,
            }
        }
        MessageKind::GlobalUpdate => RoundMessage::GlobalUpdate {
            round: c.u64()?,
            weights: c.weights()?,
            arch: c.arch()?,
        },
        MessageKind::LocalResult => RoundMessage::LocalResult {
            round: c.u64()?,
            client_id: c.u32()?,
            n_k: c.u64()?,
            mean_train_loss: c.f64()?,
            weights: c.weights()?,
            arch: c.arch()?,
        },
        MessageKind::GlobalModelEval => RoundMessage::GlobalModelEval {
            round: c.u64()?,
            loss: c.f64()?,
            acc: c.f64()?,
        },
        MessageKind::Shutdown => RoundMessage::Shutdown {
            reason: String::from_utf8(c.bytes()?.to_vec()).map_err(|e| CommError::Malformed(e.to_string()))?,
        },
    };
    if c.pos != payload.len() {
        return Err(CommError::Malformed(format!("{} unread payload bytes", payload.len() - c.pos)));
    }
    Ok(msg)
}
