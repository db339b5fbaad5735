//! Wire messages: one JSON object per line, UTF-8, over TCP.
//!
//! Unknown fields are ignored so newer peers can add fields.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use twinmarl_core::vehicle::{Action, VehicleState};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg_type", rename_all = "snake_case")]
pub enum Payload {
    Hello {
        version: u32,
        #[serde(default)]
        role: String,
    },
    /// Estimated pose of the physical vehicle after its latest plant step.
    StateEstimate { x: f64, y: f64, yaw: f64, v: f64 },
    /// Answer to the state estimate with sequence `reply_to`. An inactive
    /// command means the twin is out of the episode and the plant must stop.
    ActionCommand {
        reply_to: u64,
        throttle_index: usize,
        steer_index: usize,
        #[serde(default = "yes")]
        active: bool,
    },
    /// End of server tick `tick`. `reset` carries the spawn pose when the
    /// physical vehicle starts a new episode (possibly in another slot).
    TickAck {
        tick: u64,
        episode: u64,
        #[serde(default)]
        reset: Option<Pose>,
    },
    Bye {
        #[serde(default)]
        reason: String,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

impl From<VehicleState> for Pose {
    fn from(s: VehicleState) -> Self {
        Self {
            x: s.x_m,
            y: s.y_m,
            yaw: s.yaw_rad,
            v: s.speed_mps,
        }
    }
}

impl From<Pose> for VehicleState {
    fn from(p: Pose) -> Self {
        VehicleState::new(p.x, p.y, p.yaw, p.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSyncMessage {
    pub agent_id: usize,
    pub seq: u64,
    /// Sender's monotonic clock, nanoseconds since its start.
    pub sent_ns: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

impl TwinSyncMessage {
    pub fn encode(&self) -> String {
        let mut s = serde_json::to_string(self).expect("messages always serialize");
        s.push('\n');
        s
    }

    pub fn decode(line: &str) -> Result<Self, ProtocolError> {
        let m: Self = serde_json::from_str(line.trim_end()).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if let Payload::StateEstimate { x, y, yaw, v } = m.payload {
            if ![x, y, yaw, v].iter().all(|f| f.is_finite()) {
                return Err(ProtocolError::Malformed("non-finite state estimate".into()));
            }
        }
        Ok(m)
    }

    pub fn action(&self) -> Option<(u64, Action, bool)> {
        match self.payload {
            Payload::ActionCommand {
                reply_to,
                throttle_index,
                steer_index,
                active,
            } => Some((reply_to, Action::new(throttle_index, steer_index), active)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("expected hello with version {PROTOCOL_VERSION}, got {0}")]
    Handshake(String),
    #[error("sequence {got} is not after {last}")]
    OutOfOrder { last: u64, got: u64 },
}

/// Strictly increasing sequence numbers for one direction of one connection.
#[derive(Debug, Clone, Default)]
pub struct SeqCounter {
    next: u64,
}

impl SeqCounter {
    pub fn next(&mut self) -> u64 {
        let s = self.next;
        self.next += 1;
        s
    }
}

/// Receiver-side ordering check: stale or repeated numbers are rejected,
/// nothing is ever reordered.
#[derive(Debug, Clone, Default)]
pub struct SeqGuard {
    last: Option<u64>,
}

impl SeqGuard {
    pub fn accept(&mut self, seq: u64) -> Result<(), ProtocolError> {
        match self.last {
            Some(last) if seq <= last => Err(ProtocolError::OutOfOrder { last, got: seq }),
            _ => {
                self.last = Some(seq);
                Ok(())
            }
        }
    }
}

/// Monotonic nanosecond clock for `sent_ns`.
#[derive(Debug, Clone, Copy)]
pub struct MonoClock(Instant);

impl Default for MonoClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl MonoClock {
    pub fn now_ns(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

/// Splits a byte stream into lines without losing partial reads on timeouts.
#[derive(Debug, Default)]
pub struct LineBuffer {
    buf: Vec<u8>,
}

impl LineBuffer {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_line(&mut self) -> Option<Result<String, ProtocolError>> {
        let at = self.buf.iter().position(|&b| b == b'\n')?;
        let line: Vec<u8> = self.buf.drain(..=at).collect();
        Some(String::from_utf8(line).map_err(|_| ProtocolError::Malformed("invalid UTF-8".into())))
    }
}
