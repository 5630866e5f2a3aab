use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::trace::{Direction, Trace};
use super::transport::Connection;
use super::wire::{MessageKind, RoundMessage};
use super::{CommError, NUMERICAL_ABORT};
use crate::federation::{run_client_round, FedConfig, FedError, GlobalModel};
use crate::local::ClientState;
use crate::search_space::Genotype;

/// Counting semaphore bounding how many co-located clients compute at once.
#[derive(Debug)]
pub struct ComputeSlots {
    free: Mutex<usize>,
    ready: Condvar,
}

pub struct SlotGuard<'a> {
    slots: &'a ComputeSlots,
}

impl ComputeSlots {
    pub fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            ready: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock");
        while *free == 0 {
            free = self.ready.wait(free).expect("slot lock");
        }
        *free -= 1;
        SlotGuard { slots: self }
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.slots.free.lock().expect("slot lock") += 1;
        self.slots.ready.notify_one();
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClientOptions {
    /// Longest wait for any server message; `None` waits forever.
    pub timeout: Option<Duration>,
    pub slots: Option<Arc<ComputeSlots>>,
}

/// What a client saw during a run.
#[derive(Debug, Clone, Default)]
pub struct ClientRun {
    pub rounds: usize,
    pub evals: Vec<(u64, f64, f64)>,
    pub trace: Trace,
}

struct Link {
    conn: Connection,
    id: u32,
    trace: Trace,
    timeout: Option<Duration>,
}

impl Link {
    fn send(&mut self, msg: &RoundMessage) -> Result<(), CommError> {
        self.conn.send(msg)?;
        self.trace.record(self.id, Direction::Sent, msg.kind(), msg.round());
        Ok(())
    }

    fn recv(&mut self) -> Result<RoundMessage, CommError> {
        let msg = self.conn.recv(self.timeout)?;
        self.trace.record(self.id, Direction::Received, msg.kind(), msg.round());
        Ok(msg)
    }
}

/// Registers with the server, then answers every GlobalUpdate with local
/// work until Shutdown. `make_state` builds the client from the server's Init.
pub fn client_loop<F>(
    conn: Connection,
    client_id: u32,
    config_hash: [u8; 32],
    make_state: F,
    opts: &ClientOptions,
) -> Result<ClientRun, CommError>
where
    F: FnOnce(&FedConfig, Option<&Genotype>) -> Result<ClientState, FedError>,
{
    let mut link = Link {
        conn,
        id: client_id,
        trace: Trace::default(),
        timeout: opts.timeout,
    };
    link.send(&RoundMessage::Register { client_id, config_hash })?;
    let (config, genotype) = match link.recv()? {
        RoundMessage::Init {
            config_hash: server_hash,
            config,
            genotype,
        } => {
            if server_hash != config_hash || config.config_hash(genotype.as_ref()) != config_hash {
                return Err(CommError::ConfigMismatch);
            }
            (config, genotype)
        }
        RoundMessage::Shutdown { reason } => return Err(CommError::Rejected(reason)),
        other => return Err(CommError::Protocol(format!("expected Init, got {}", other.kind().name()))),
    };
    let mut state = make_state(&config, genotype.as_ref())?;
    let mut run = ClientRun::default();
    let mut last_round: Option<u64> = None;
    loop {
        match link.recv()? {
            RoundMessage::GlobalUpdate { round, weights, arch } => {
                if last_round.is_some_and(|r| round <= r) {
                    return Err(CommError::Protocol(format!(
                        "round {round} after round {}",
                        last_round.unwrap_or(0)
                    )));
                }
                last_round = Some(round);
                let global = GlobalModel {
                    round: round as usize,
                    weights,
                    arch,
                };
                let result = {
                    let _slot = opts.slots.as_ref().map(|s| s.acquire());
                    run_client_round(&mut state, config.phase, &global, &config.hyper)
                };
                let report = match result {
                    Ok(r) => r,
                    Err(e) => {
                        let reason = if e.is_numerical() {
                            format!("{NUMERICAL_ABORT}: client {client_id}: {e}")
                        } else {
                            format!("client {client_id} failed: {e}")
                        };
                        let _ = link.send(&RoundMessage::Shutdown { reason });
                        return Err(FedError::ClientFailed {
                            round: round as usize + 1,
                            client: client_id as usize,
                            source: e,
                        }
                        .into());
                    }
                };
                link.send(&RoundMessage::LocalResult {
                    round,
                    client_id,
                    n_k: report.update.n_k as u64,
                    mean_train_loss: report.mean_train_loss,
                    weights: report.update.weights,
                    arch: report.update.arch,
                })?;
                run.rounds += 1;
            }
            RoundMessage::GlobalModelEval { round, loss, acc } => {
                if last_round != Some(round) {
                    return Err(CommError::Protocol(format!("evaluation for round {round} out of order")));
                }
                run.evals.push((round, loss, acc));
            }
            RoundMessage::Shutdown { reason } => {
                if reason != "done" {
                    return Err(CommError::Rejected(reason));
                }
                run.trace = link.trace;
                return Ok(run);
            }
            other => {
                let kind = other.kind();
                debug_assert!(matches!(kind, MessageKind::Register | MessageKind::Init | MessageKind::LocalResult));
                return Err(CommError::Protocol(format!("unexpected {} from the server", kind.name())));
            }
        }
    }
}
