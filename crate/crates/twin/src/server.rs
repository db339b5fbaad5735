//! TCP server: one handler thread for the physical agent's connection and
//! the ticker, which owns the session. They talk through a single-consumer
//! queue; no scenario state is touched outside the ticker.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::emulator::{run_plant_emulator, EmulatorReport, PlantEmulatorConfig};
use crate::protocol::{Payload, ProtocolError, SeqGuard, TwinSyncMessage, PROTOCOL_VERSION};
use crate::session::{SessionConfig, TwinReport, TwinSession};
use crate::trace::{TraceEvent, TraceWriter};
use crate::TwinError;

/// How the server paces its ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// One tick per received estimate; time is simulated, so results do not
    /// depend on scheduling. The sync deadline still runs on the wall clock.
    #[default]
    Stepped,
    /// Fixed wall-clock period using the freshest estimate; the world never
    /// waits for the plant.
    Wall,
}

impl std::str::FromStr for Clock {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stepped" => Ok(Clock::Stepped),
            "wall" => Ok(Clock::Wall),
            o => Err(format!("unknown clock `{o}` (expected stepped|wall)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub period: Duration,
    /// Ticks without an estimate before the episode is aborted.
    pub sync_timeout_ticks: u32,
    pub clock: Clock,
    pub trace: Option<PathBuf>,
    /// How long to wait for the physical agent to connect.
    pub accept_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            period: Duration::from_millis(20),
            sync_timeout_ticks: 3,
            clock: Clock::Stepped,
            trace: None,
            accept_timeout: Duration::from_secs(30),
        }
    }
}

enum Inbound {
    Msg(TwinSyncMessage),
    /// Connection ended; `Some` carries a protocol diagnostic.
    Closed(Option<String>),
}

fn handle(stream: TcpStream, tx: Sender<Inbound>) {
    let mut reader = BufReader::new(stream);
    let mut guard = SeqGuard::default();
    let mut greeted = false;
    let mut line = String::new();
    loop {
        line.clear();
        let ev = match reader.read_line(&mut line) {
            Ok(0) => Inbound::Closed(None),
            Err(e) => {
                debug!("twin connection read: {e}");
                Inbound::Closed(None)
            }
            Ok(_) => match TwinSyncMessage::decode(&line) {
                Err(e) => Inbound::Closed(Some(e.to_string())),
                Ok(m) if !greeted => match m.payload {
                    Payload::Hello { version, .. } if version == PROTOCOL_VERSION => {
                        greeted = true;
                        guard.accept(m.seq).ok();
                        continue;
                    }
                    ref p => Inbound::Closed(Some(ProtocolError::Handshake(format!("{p:?}")).to_string())),
                },
                Ok(m) => {
                    if let Err(e) = guard.accept(m.seq) {
                        warn!("dropping stale message: {e}");
                        continue;
                    }
                    if matches!(m.payload, Payload::Bye { .. }) {
                        Inbound::Closed(None)
                    } else {
                        Inbound::Msg(m)
                    }
                }
            },
        };
        let closed = matches!(ev, Inbound::Closed(_));
        if tx.send(ev).is_err() || closed {
            return;
        }
    }
}

struct Link {
    stream: TcpStream,
    trace: Option<TraceWriter>,
}

impl Link {
    fn send(&mut self, msgs: Vec<TwinSyncMessage>) -> Result<(), TwinError> {
        for m in msgs {
            if let Err(e) = self.stream.write_all(m.encode().as_bytes()) {
                // a dead peer surfaces as missing estimates
                debug!("twin send failed: {e}");
            }
            if let Some(t) = &mut self.trace {
                t.write(&TraceEvent::Out { msg: m })?;
            }
        }
        Ok(())
    }

    fn record(&mut self, ev: TraceEvent) -> Result<(), TwinError> {
        if let Some(t) = &mut self.trace {
            t.write(&ev)?;
        }
        Ok(())
    }
}

fn accept(listener: &TcpListener, timeout: Duration) -> Result<(TcpStream, SocketAddr), TwinError> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    loop {
        match listener.accept() {
            Ok((s, a)) => {
                s.set_nonblocking(false)?;
                return Ok((s, a));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TwinError::Io(std::io::Error::new(std::io::ErrorKind::TimedOut, "no physical agent connected")));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn tick(session: &mut TwinSession, link: &mut Link, batch: Vec<TwinSyncMessage>) -> Result<(), TwinError> {
    link.record(TraceEvent::In {
        tick: session.report().ticks + 1,
        msgs: batch.clone(),
    })?;
    let out = session.tick(&batch)?;
    link.send(out)
}

fn abort(session: &mut TwinSession, link: &mut Link, diagnostic: Option<String>) -> Result<(), TwinError> {
    let (out, reason) = match diagnostic {
        Some(d) => (session.abort_error(d.clone()), d),
        None => (session.abort_sync_loss(), "sync-loss".to_string()),
    };
    link.record(TraceEvent::Abort { reason })?;
    link.send(out)
}

fn run_stepped(session: &mut TwinSession, link: &mut Link, rx: &Receiver<Inbound>, deadline: Duration) -> Result<(), TwinError> {
    while !session.is_finished() {
        match rx.recv_timeout(deadline) {
            Ok(Inbound::Msg(m)) if matches!(m.payload, Payload::StateEstimate { .. }) => tick(session, link, vec![m])?,
            Ok(Inbound::Msg(m)) => debug!("ignoring {:?}", m.payload),
            Ok(Inbound::Closed(Some(d))) => abort(session, link, Some(d))?,
            Ok(Inbound::Closed(None)) | Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => abort(session, link, None)?,
        }
    }
    Ok(())
}

fn run_wall(session: &mut TwinSession, link: &mut Link, rx: &Receiver<Inbound>, period: Duration, limit: u32) -> Result<(), TwinError> {
    let mut next = Instant::now() + period;
    let mut missed = 0u32;
    let mut closed = false;
    while !session.is_finished() {
        let mut batch = Vec::new();
        loop {
            let now = Instant::now();
            if now >= next || closed {
                break;
            }
            match rx.recv_timeout(next - now) {
                Ok(Inbound::Msg(m)) if matches!(m.payload, Payload::StateEstimate { .. }) => batch.push(m),
                Ok(Inbound::Msg(_)) => {}
                Ok(Inbound::Closed(Some(d))) => {
                    abort(session, link, Some(d))?;
                    return Ok(());
                }
                Ok(Inbound::Closed(None)) | Err(RecvTimeoutError::Disconnected) => closed = true,
                Err(RecvTimeoutError::Timeout) => break,
            }
        }
        if closed {
            // nothing more will arrive: the deadline would expire anyway
            thread::sleep(next.saturating_duration_since(Instant::now()));
        }
        if batch.is_empty() {
            missed += 1;
            if missed >= limit {
                return abort(session, link, None);
            }
        } else {
            missed = 0;
        }
        tick(session, link, batch)?;
        next += period;
    }
    Ok(())
}

/// Serve one physical agent until the configured episodes are done, the
/// estimates stop (sync-loss) or the peer violates the protocol.
pub fn serve_twin(cfg: SessionConfig, listener: TcpListener, opts: &ServerOptions) -> Result<TwinReport, TwinError> {
    if opts.period.is_zero() || opts.sync_timeout_ticks == 0 {
        return Err(TwinError::Config("period and sync_timeout_ticks must be positive".into()));
    }
    let mut session = TwinSession::new(cfg)?;
    let (stream, peer) = accept(&listener, opts.accept_timeout)?;
    stream.set_nodelay(true)?;
    info!("physical agent connected from {peer}");
    let (tx, rx) = mpsc::channel();
    let reader = stream.try_clone()?;
    let handler = thread::spawn(move || handle(reader, tx));
    let mut link = Link {
        stream,
        trace: opts.trace.as_deref().map(TraceWriter::create).transpose()?,
    };
    link.send(session.start())?;
    let result = match opts.clock {
        Clock::Stepped => run_stepped(&mut session, &mut link, &rx, opts.period * opts.sync_timeout_ticks),
        Clock::Wall => run_wall(&mut session, &mut link, &rx, opts.period, opts.sync_timeout_ticks),
    };
    if let Some(t) = &mut link.trace {
        t.flush()?;
    }
    link.stream.shutdown(Shutdown::Both).ok();
    drop(rx);
    handler.join().ok();
    result?;
    Ok(session.into_report())
}

/// Server and emulator on the loopback interface, each in its own thread.
pub fn run_local_twin(cfg: SessionConfig, opts: &ServerOptions, plant: PlantEmulatorConfig) -> Result<(TwinReport, EmulatorReport), TwinError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let emu = thread::spawn(move || run_plant_emulator(&plant, &addr));
    let served = serve_twin(cfg, listener, opts);
    let emulated = emu.join().map_err(|_| TwinError::Config("emulator thread panicked".into()))?;
    Ok((served?, emulated?))
}
