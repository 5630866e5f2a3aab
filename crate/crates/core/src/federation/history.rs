use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FedError, Phase};

pub const HISTORY_HEADER: [&str; 6] = [
    "round",
    "phase",
    "client_count",
    "global_test_loss",
    "global_test_acc",
    "duration_ms",
];

/// Per-client bookkeeping kept in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub n_k: usize,
    pub mean_train_loss: f64,
}

/// One completed round. `round` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: Phase,
    pub clients: Vec<ClientSummary>,
    pub global_test_loss: f64,
    pub global_test_acc: f64,
    pub duration_ms: u64,
    /// Client payloads and the aggregate, kept only when requested.
    pub payloads: Option<super::RoundPayloads>,
}

/// A parsed CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: usize,
    pub phase: Phase,
    pub client_count: usize,
    pub global_test_loss: f64,
    pub global_test_acc: f64,
    pub duration_ms: u64,
}

impl RoundRecord {
    pub fn row(&self) -> HistoryRow {
        HistoryRow {
            round: self.round,
            phase: self.phase,
            client_count: self.clients.len(),
            global_test_loss: self.global_test_loss,
            global_test_acc: self.global_test_acc,
            duration_ms: self.duration_ms,
        }
    }
}

fn record_fields(row: &HistoryRow) -> [String; 6] {
    [
        row.round.to_string(),
        row.phase.to_string(),
        row.client_count.to_string(),
        row.global_test_loss.to_string(),
        row.global_test_acc.to_string(),
        row.duration_ms.to_string(),
    ]
}

/// Appends one row per round, flushing after each so a crashed run keeps its
/// completed rounds.
pub struct HistoryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl HistoryWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, FedError> {
        Ok(Self::new(BufWriter::new(File::create(path)?))?)
    }
}

impl<W: Write> HistoryWriter<W> {
    pub fn new(writer: W) -> io::Result<Self> {
        let mut inner = csv::Writer::from_writer(writer);
        inner.write_record(HISTORY_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &HistoryRow) -> io::Result<()> {
        self.inner.write_record(record_fields(row))?;
        self.inner.flush()
    }

    pub fn into_inner(self) -> Result<W, FedError> {
        self.inner.into_inner().map_err(|e| FedError::Io(e.into_error()))
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut w = HistoryWriter::new(Vec::new()).expect("in-memory write");
    for row in rows {
        w.append(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

/// Strict reader: exact header, typed fields, rounds numbered 1, 2, ... per phase.
pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>, FedError> {
    let bad = |m: String| FedError::HistoryFormat(m);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(HISTORY_HEADER) {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows: Vec<HistoryRow> = Vec::new();
    for (line, rec) in reader.deserialize::<HistoryRow>().enumerate() {
        let row = rec.map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        let expected = rows.iter().filter(|r| r.phase == row.phase).count() + 1;
        if row.round != expected {
            return Err(bad(format!(
                "row {}: round {} out of sequence, expected {expected}",
                line + 1,
                row.round
            )));
        }
        if !(0.0..=1.0).contains(&row.global_test_acc) || !row.global_test_loss.is_finite() {
            return Err(bad(format!("row {}: metric out of range", line + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}
