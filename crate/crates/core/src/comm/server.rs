use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::trace::{Direction, Trace};
use super::transport::{Acceptor, MessageSender};
use super::wire::{MessageKind, RoundMessage};
use super::CommError;
use crate::federation::{ClientReport, ClientUpdate, Coordinator, FedError, RoundRecord};

#[derive(Debug, Clone, Copy, Default)]
pub struct ServerOptions {
    /// Longest wait for any single client message; `None` waits forever.
    pub round_timeout: Option<Duration>,
}

type Inbox = mpsc::Receiver<(u32, Result<RoundMessage, CommError>)>;

struct Session {
    senders: Vec<MessageSender>,
    inbox: Inbox,
    trace: Trace,
}

impl Session {
    fn send(&mut self, id: u32, msg: &RoundMessage) -> Result<(), CommError> {
        self.senders[id as usize].send(msg).map_err(|e| CommError::ConnectionLost {
            client: id,
            reason: e.to_string(),
        })?;
        self.trace.record(id, Direction::Sent, msg.kind(), msg.round());
        Ok(())
    }

    fn broadcast(&mut self, msg: &RoundMessage) -> Result<(), CommError> {
        (0..self.senders.len() as u32).try_for_each(|id| self.send(id, msg))
    }

    fn abort(&mut self, reason: &str) {
        for s in &mut self.senders {
            let _ = s.send(&RoundMessage::Shutdown {
                reason: reason.to_string(),
            });
        }
    }
}

fn register(acceptor: &mut dyn Acceptor, coord: &Coordinator, opts: &ServerOptions) -> Result<Session, CommError> {
    let clients = coord.config().clients;
    let expected = coord.config_hash();
    let mut slots: Vec<Option<super::transport::Connection>> = (0..clients).map(|_| None).collect();
    let mut trace = Trace::default();
    while slots.iter().any(Option::is_none) {
        let mut conn = acceptor.accept()?;
        let reject = |conn: &mut super::transport::Connection, reason: String| {
            log::warn!("rejecting client: {reason}");
            let _ = conn.send(&RoundMessage::Shutdown { reason });
        };
        match conn.recv(opts.round_timeout) {
            Ok(RoundMessage::Register { client_id, config_hash }) => {
                let id = client_id as usize;
                if config_hash != expected {
                    reject(&mut conn, format!("client {client_id}: config hash mismatch"));
                } else if id >= clients {
                    reject(&mut conn, format!("client id {client_id} outside 0..{clients}"));
                } else if slots[id].is_some() {
                    reject(&mut conn, format!("duplicate client id {client_id}"));
                } else {
                    trace.record(client_id, Direction::Received, MessageKind::Register, None);
                    log::info!("client {client_id} registered");
                    slots[id] = Some(conn);
                }
            }
            Ok(other) => reject(&mut conn, format!("expected Register, got {}", other.kind().name())),
            Err(e) => log::warn!("dropping connection that failed to register: {e}"),
        }
    }

    let (tx, inbox) = mpsc::channel();
    let mut senders = Vec::with_capacity(clients);
    for (id, conn) in slots.into_iter().enumerate() {
        let (sender, mut receiver) = conn.expect("all slots filled").split();
        senders.push(sender);
        let tx = tx.clone();
        std::thread::spawn(move || loop {
            let msg = receiver.recv(None);
            let stop = !matches!(msg, Ok(RoundMessage::LocalResult { .. }));
            if tx.send((id as u32, msg)).is_err() || stop {
                break;
            }
        });
    }
    Ok(Session { senders, inbox, trace })
}

fn collect(session: &mut Session, clients: usize, round: u64, opts: &ServerOptions) -> Result<Vec<ClientReport>, CommError> {
    let mut reports: Vec<Option<ClientReport>> = (0..clients).map(|_| None).collect();
    let start = Instant::now();
    while reports.iter().any(Option::is_none) {
        let (id, msg) = match opts.round_timeout {
            None => session.inbox.recv().map_err(|_| CommError::Disconnected)?,
            Some(t) => {
                let left = t.checked_sub(start.elapsed()).ok_or(CommError::Timeout)?;
                session.inbox.recv_timeout(left).map_err(|e| match e {
                    mpsc::RecvTimeoutError::Timeout => CommError::Timeout,
                    mpsc::RecvTimeoutError::Disconnected => CommError::Disconnected,
                })?
            }
        };
        let msg = msg.map_err(|e| CommError::ConnectionLost {
            client: id,
            reason: e.to_string(),
        })?;
        session.trace.record(id, Direction::Received, msg.kind(), msg.round());
        match msg {
            RoundMessage::LocalResult {
                round: r,
                client_id,
                n_k,
                mean_train_loss,
                weights,
                arch,
            } => {
                if client_id != id {
                    return Err(CommError::Protocol(format!("connection {id} sent a result for client {client_id}")));
                }
                if r != round {
                    return Err(CommError::Protocol(format!("client {id} answered round {r} during round {round}")));
                }
                if reports[id as usize].is_some() {
                    return Err(CommError::Protocol(format!("client {id} sent two results in round {round}")));
                }
                reports[id as usize] = Some(ClientReport {
                    update: ClientUpdate {
                        client_id: id as usize,
                        weights,
                        arch,
                        n_k: n_k as usize,
                    },
                    mean_train_loss,
                });
            }
            RoundMessage::Shutdown { reason } => return Err(CommError::ClientAborted { client: id, reason }),
            other => {
                return Err(CommError::Protocol(format!(
                    "client {id} sent {} while the server waited for results",
                    other.kind().name()
                )))
            }
        }
    }
    Ok(reports.into_iter().map(|r| r.expect("all collected")).collect())
}

fn rounds(
    session: &mut Session,
    coord: &mut Coordinator,
    opts: &ServerOptions,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), FedError>,
) -> Result<(), CommError> {
    let config = *coord.config();
    let genotype = coord.genotype().cloned();
    session.broadcast(&RoundMessage::Init {
        config_hash: coord.config_hash(),
        config,
        genotype,
    })?;
    while !coord.is_done() {
        let global = coord.begin_round();
        let round = global.round as u64;
        session.broadcast(&RoundMessage::GlobalUpdate {
            round,
            weights: global.weights,
            arch: global.arch,
        })?;
        let reports = collect(session, config.clients, round, opts)?;
        let record = coord.complete_round(reports)?;
        let eval = RoundMessage::GlobalModelEval {
            round,
            loss: record.global_test_loss,
            acc: record.global_test_acc,
        };
        on_round(record)?;
        session.broadcast(&eval)?;
    }
    session.broadcast(&RoundMessage::Shutdown { reason: "done".into() })
}

/// Waits for every client to register, then drives the coordinator through
/// all rounds over the transport. Returns the server-side message trace.
pub fn server_loop(
    acceptor: &mut dyn Acceptor,
    coord: &mut Coordinator,
    opts: &ServerOptions,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), FedError>,
) -> Result<Trace, CommError> {
    let mut session = register(acceptor, coord, opts)?;
    match rounds(&mut session, coord, opts, on_round) {
        Ok(()) => Ok(session.trace),
        Err(e) => {
            session.abort(&format!("server aborted the run: {e}"));
            Err(e)
        }
    }
}
