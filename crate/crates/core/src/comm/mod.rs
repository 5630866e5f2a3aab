//! Message schema, bit-exact framing, and server/client loops over
//! in-process channels or TCP sockets.

mod client;
mod server;
mod trace;
mod transport;
mod wire;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::data::{Dataset, Partition};
use crate::federation::{build_phase_network, client_state, Coordinator, FedConfig, FedError, RoundRecord, RunOutcome};
use crate::search_space::Genotype;

pub use client::{client_loop, ClientOptions, ClientRun, ComputeSlots};
pub use server::{server_loop, ServerOptions};
pub use trace::{Direction, Role, Trace, TraceEvent};
pub use transport::{
    channel_pair, channel_transport, tcp_connect, Acceptor, ChannelAcceptor, ChannelConnector, Connection, FrameSink, FrameSource,
    MessageReceiver, MessageSender, TcpAcceptor,
};
pub use wire::{
    decode, decode_header, decode_payload, encode, encode_payload, FrameHeader, MessageKind, RoundMessage, FRAME_MAGIC, HEADER_BYTES,
    MAX_PAYLOAD_BYTES, TRAILER_BYTES, WIRE_VERSION,
};

/// Prefix of a client Shutdown reason that reports a non-finite loss.
pub const NUMERICAL_ABORT: &str = "numerical abort";

#[derive(Debug, Error)]
pub enum CommError {
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("wire version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("header kind {header} does not match payload kind {payload}")]
    KindMismatch { header: u8, payload: u8 },
    #[error("checksum mismatch: frame says {stored:#010x}, payload hashes to {actual:#010x}")]
    Checksum { stored: u32, actual: u32 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{0} bytes after the end of the frame")]
    TrailingBytes(u64),
    #[error("payload length {0} exceeds the frame limit")]
    FrameTooLarge(u64),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("peer disconnected")]
    Disconnected,
    #[error("timed out waiting for a message")]
    Timeout,
    #[error("connection to client {client} lost: {reason}")]
    ConnectionLost { client: u32, reason: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server and client configurations differ")]
    ConfigMismatch,
    #[error("rejected by the server: {0}")]
    Rejected(String),
    #[error("client {client} aborted: {reason}")]
    ClientAborted { client: u32, reason: String },
    #[error("trace check failed: {0}")]
    Trace(String),
    #[error(transparent)]
    Federation(#[from] FedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CommError {
    pub fn is_numerical(&self) -> bool {
        match self {
            CommError::Federation(e) => e.is_numerical(),
            CommError::ClientAborted { reason, .. } | CommError::Rejected(reason) => reason.contains(NUMERICAL_ABORT),
            _ => false,
        }
    }
}

/// Which transport carries a co-located run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Channel,
    /// Loopback TCP on the given address; port 0 picks a free port.
    Tcp(SocketAddr),
}

pub struct TransportRun {
    pub outcome: RunOutcome,
    pub server_trace: Trace,
    pub client_runs: Vec<ClientRun>,
}

type Connector = Box<dyn Fn() -> Result<Connection, CommError> + Send + Sync>;

/// Runs server and clients in one process over a real transport: the server
/// on the calling thread, each client on its own thread. At most `workers`
/// clients compute at once (0 = one per core).
pub fn run_with_transport(
    kind: TransportKind,
    config: FedConfig,
    genotype: Option<Genotype>,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    partition: &Partition,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), FedError>,
) -> Result<TransportRun, CommError> {
    let mut coord = Coordinator::new(config, genotype, test)?;
    let hash = coord.config_hash();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let slots = Arc::new(ComputeSlots::new(if config.workers == 0 { cores } else { config.workers }));
    let opts = ClientOptions {
        timeout: None,
        slots: Some(slots),
    };
    let (mut acceptor, connect): (Box<dyn Acceptor>, Connector) = match kind {
        TransportKind::Channel => {
            let (a, c) = channel_transport();
            (Box::new(a), Box::new(move || c.connect()))
        }
        TransportKind::Tcp(addr) => {
            let a = TcpAcceptor::bind(addr)?;
            let bound = a.local_addr()?;
            (Box::new(a), Box::new(move || tcp_connect(bound, Duration::from_secs(10))))
        }
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.clients)
            .map(|k| {
                let (train, connect, opts) = (train.clone(), &connect, &opts);
                scope.spawn(move || {
                    let conn = connect()?;
                    let make = |cfg: &FedConfig, g: Option<&Genotype>| {
                        let (net, store) = build_phase_network(cfg, g)?;
                        client_state(cfg, k, Arc::new(net), store, train, partition)
                    };
                    client_loop(conn, k as u32, hash, make, opts)
                })
            })
            .collect();
        let served = server_loop(acceptor.as_mut(), &mut coord, &ServerOptions::default(), on_round);
        drop(acceptor);
        let clients: Vec<Result<ClientRun, CommError>> = handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect();
        let server_trace = served?;
        let client_runs = clients.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(TransportRun {
            outcome: coord.into_outcome(),
            server_trace,
            client_runs,
        })
    })
}
