//! Full-duplex trace recording and replay.
//!
//! A trace is newline-delimited JSON. `in` lines hold the inbound messages
//! the ticker consumed in one tick (possibly none), `out` lines each
//! outbound message, `abort` lines a session abort. Replaying the `in`
//! lines through a fresh session reproduces the `out` lines and the KPIs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::{Payload, TwinSyncMessage};
use crate::session::{SessionConfig, TwinReport, TwinSession};
use crate::TwinError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dir", rename_all = "snake_case")]
pub enum TraceEvent {
    In { tick: u64, msgs: Vec<TwinSyncMessage> },
    Out { msg: TwinSyncMessage },
    Abort { reason: String },
}

pub struct TraceWriter {
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, TwinError> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, ev: &TraceEvent) -> Result<(), TwinError> {
        serde_json::to_writer(&mut self.out, ev).map_err(|e| TwinError::Trace(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TwinError> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TwinError> {
    let mut v = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        v.push(serde_json::from_str(&line).map_err(|e| TwinError::Trace(format!("line {}: {e}", n + 1)))?);
    }
    Ok(v)
}

/// Outbound messages with the wall-clock field cleared, for comparisons.
pub fn untimed(msgs: impl IntoIterator<Item = TwinSyncMessage>) -> Vec<TwinSyncMessage> {
    msgs.into_iter()
        .map(|mut m| {
            m.sent_ns = 0;
            m
        })
        .collect()
}

/// Re-run a recorded session from its inbound stream. Returns the session
/// report and the regenerated outbound messages.
pub fn replay(cfg: SessionConfig, events: &[TraceEvent]) -> Result<(TwinReport, Vec<TwinSyncMessage>), TwinError> {
    let mut s = TwinSession::new(cfg)?;
    let mut out = s.start();
    for ev in events {
        match ev {
            TraceEvent::In { msgs, .. } => {
                let est: Vec<TwinSyncMessage> = msgs.iter().filter(|m| matches!(m.payload, Payload::StateEstimate { .. })).cloned().collect();
                if !msgs.is_empty() && est.is_empty() {
                    // only hellos or byes were consumed: no tick happened
                    continue;
                }
                out.extend(s.tick(&est)?);
            }
            TraceEvent::Abort { reason } if reason == "sync-loss" => out.extend(s.abort_sync_loss()),
            TraceEvent::Abort { reason } => out.extend(s.abort_error(reason.clone())),
            TraceEvent::Out { .. } => {}
        }
    }
    Ok((s.into_report(), out))
}

/// The recorded outbound messages of a trace.
pub fn recorded_outbound(events: &[TraceEvent]) -> Vec<TwinSyncMessage> {
    events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Out { msg } => Some(msg.clone()),
            _ => None,
        })
        .collect()
}
