//! Message traces and the conformance checker.
//!
//! Per connection, the accepted sequence is
//! `Register Init (GlobalUpdate LocalResult GlobalModelEval){T} Shutdown`,
//! with Register and LocalResult flowing client to server and the rest server
//! to client. Across connections, every LocalResult of round t must precede
//! every GlobalUpdate of round t + 1.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::wire::MessageKind;
use super::CommError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

/// Which side recorded a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub connection: u32,
    pub direction: Direction,
    pub kind: String,
    pub round: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Sent => "sent",
            Direction::Received => "received",
        })
    }
}

impl Trace {
    pub fn record(&mut self, connection: u32, direction: Direction, kind: MessageKind, round: Option<u64>) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            seq,
            connection,
            direction,
            kind: kind.name().to_string(),
            round,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.events {
            w.serialize(e).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self, CommError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let events = r
            .deserialize()
            .collect::<Result<Vec<TraceEvent>, _>>()
            .map_err(|e| CommError::Trace(e.to_string()))?;
        Ok(Self { events })
    }

    /// Checks the trace of a completed run with `clients` connections and `rounds` rounds.
    pub fn check(&self, role: Role, clients: usize, rounds: usize) -> Result<(), CommError> {
        let bad = |m: String| Err(CommError::Trace(m));
        let pattern = Regex::new(&format!("^RI(?:ULE){{{rounds}}}S$")).expect("valid pattern");
        let mut per_conn: BTreeMap<u32, Vec<&TraceEvent>> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            if e.seq != i as u64 {
                return bad(format!("event {i} has sequence number {}", e.seq));
            }
            per_conn.entry(e.connection).or_default().push(e);
        }
        if per_conn.len() != clients {
            return bad(format!(
                "expected {clients} connections, found {:?}",
                per_conn.keys().collect::<Vec<_>>()
            ));
        }
        for (conn, events) in &per_conn {
            let mut letters = String::new();
            for e in events {
                let kind = MessageKind::from_name(&e.kind).ok_or_else(|| CommError::Trace(format!("unknown kind {:?}", e.kind)))?;
                let upstream = matches!(kind, MessageKind::Register | MessageKind::LocalResult);
                let expected = match (role, upstream) {
                    (Role::Server, true) | (Role::Client, false) => Direction::Received,
                    _ => Direction::Sent,
                };
                if e.direction != expected {
                    return bad(format!("connection {conn}: {} was {} by the {role:?}", e.kind, e.direction));
                }
                letters.push(kind.letter());
            }
            if !pattern.is_match(&letters) {
                return bad(format!("connection {conn}: sequence {letters} does not match {}", pattern.as_str()));
            }
            let rounds_seen: Vec<Option<u64>> = events.iter().map(|e| e.round).collect();
            let framing = [0, 1, rounds_seen.len() - 1];
            if framing.iter().any(|&i| rounds_seen[i].is_some()) {
                return bad(format!("connection {conn}: round number on a Register, Init or Shutdown"));
            }
            for (t, chunk) in rounds_seen[2..rounds_seen.len() - 1].chunks(3).enumerate() {
                if chunk.iter().any(|r| *r != Some(t as u64)) {
                    return bad(format!("connection {conn}: round numbers {chunk:?} in round {t}"));
                }
            }
        }
        let last_result: BTreeMap<u64, u64> =
            self.events
                .iter()
                .filter(|e| e.kind == MessageKind::LocalResult.name())
                .fold(BTreeMap::new(), |mut m, e| {
                    let r = e.round.unwrap_or(0);
                    m.insert(r, m.get(&r).copied().unwrap_or(0).max(e.seq));
                    m
                });
        for e in self.events.iter().filter(|e| e.kind == MessageKind::GlobalUpdate.name()) {
            let r = e.round.unwrap_or(0);
            if r > 0 && last_result.get(&(r - 1)).is_some_and(|&s| s > e.seq) {
                return bad(format!(
                    "GlobalUpdate of round {r} sent before all results of round {} arrived",
                    r - 1
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server_trace(clients: u32, rounds: u64) -> Trace {
        let mut t = Trace::default();
        for c in 0..clients {
            t.record(c, Direction::Received, MessageKind::Register, None);
        }
        for c in 0..clients {
            t.record(c, Direction::Sent, MessageKind::Init, None);
        }
        for r in 0..rounds {
            for c in 0..clients {
                t.record(c, Direction::Sent, MessageKind::GlobalUpdate, Some(r));
            }
            for c in (0..clients).rev() {
                t.record(c, Direction::Received, MessageKind::LocalResult, Some(r));
            }
            for c in 0..clients {
                t.record(c, Direction::Sent, MessageKind::GlobalModelEval, Some(r));
            }
        }
        for c in 0..clients {
            t.record(c, Direction::Sent, MessageKind::Shutdown, None);
        }
        t
    }

    #[test]
    fn accepts_a_well_formed_run() {
        server_trace(3, 2).check(Role::Server, 3, 2).unwrap();
    }

    #[test]
    fn csv_round_trip() {
        let t = server_trace(2, 1);
        assert_eq!(Trace::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn rejects_wrong_round_count_and_direction() {
        let t = server_trace(2, 2);
        assert!(t.check(Role::Server, 2, 3).is_err());
        assert!(t.check(Role::Client, 2, 2).is_err());
        assert!(t.check(Role::Server, 3, 2).is_err());
    }

    #[test]
    fn rejects_missing_result() {
        let mut t = server_trace(2, 1);
        let pos = t.events.iter().position(|e| e.kind == "LocalResult").unwrap();
        t.events.remove(pos);
        for (i, e) in t.events.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        assert!(t.check(Role::Server, 2, 1).is_err());
    }

    #[test]
    fn rejects_a_broken_barrier() {
        let mut t = server_trace(2, 2);
        let update1 = t
            .events
            .iter()
            .position(|e| e.kind == "GlobalUpdate" && e.round == Some(1))
            .unwrap();
        let result0 = t
            .events
            .iter()
            .rposition(|e| e.kind == "LocalResult" && e.round == Some(0))
            .unwrap();
        let moved = t.events.remove(update1);
        t.events.insert(result0, moved);
        for (i, e) in t.events.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        assert!(t.check(Role::Server, 2, 2).is_err());
    }
}
