//! Stand-in for the physical vehicle: perturbed dynamics, noisy state
//! estimates and a delayed command path, in one single-threaded loop.

use std::fs::File;
use std::io::{BufWriter, ErrorKind, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use twinmarl_core::vehicle::{decode_action, step_vehicle, Action, DynamicsOffsets, ScenarioKind, VehicleParams, VehicleState};
use twinmarl_core::{rng_for, SimRng};

use crate::protocol::{LineBuffer, MonoClock, Payload, SeqGuard, TwinSyncMessage, PROTOCOL_VERSION};
use crate::server::Clock;
use crate::TwinError;

/// Stream id of the emulator's noise and latency draws.
pub const STREAM_PLANT: u64 = 6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationNoise {
    /// Variance of the x and y estimates, m².
    pub position_var_m2: f64,
    pub yaw_var_rad2: f64,
    pub speed_var_m2ps2: f64,
}

/// One-way command latency: `max(0, mean + jitter * z)` with standard
/// normal `z`, quantized to whole plant periods.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub mean_s: f64,
    pub jitter_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantEmulatorConfig {
    pub scenario: ScenarioKind,
    /// Nominal chassis; the true plant is this plus `offsets`.
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub offsets: DynamicsOffsets,
    #[serde(default)]
    pub noise: EstimationNoise,
    #[serde(default)]
    pub latency: LatencyConfig,
    /// Plant step period, seconds. Also the integration step.
    pub period_s: f64,
    #[serde(default)]
    pub clock: Clock,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_attempts")]
    pub connect_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// CSV of true versus estimated states, one row per plant step.
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

fn default_attempts() -> u32 {
    5
}

fn default_backoff() -> u64 {
    100
}

impl PlantEmulatorConfig {
    /// Ideal plant: nominal dynamics, exact estimates, no latency.
    pub fn ideal(scenario: ScenarioKind, vehicle: VehicleParams, period_s: f64) -> Self {
        Self {
            scenario,
            vehicle,
            offsets: DynamicsOffsets::default(),
            noise: EstimationNoise::default(),
            latency: LatencyConfig::default(),
            period_s,
            clock: Clock::Stepped,
            seed: 0,
            connect_attempts: default_attempts(),
            backoff_ms: default_backoff(),
            log_path: None,
        }
    }

    pub fn plant_params(&self) -> VehicleParams {
        self.vehicle.with_offsets(&self.offsets)
    }

    pub fn validate(&self) -> Result<(), TwinError> {
        let l = &self.latency;
        let n = &self.noise;
        let checks = [
            ("latency.mean_s", l.mean_s),
            ("latency.jitter_s", l.jitter_s),
            ("noise.position_var_m2", n.position_var_m2),
            ("noise.yaw_var_rad2", n.yaw_var_rad2),
            ("noise.speed_var_m2ps2", n.speed_var_m2ps2),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TwinError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.period_s > 0.0 && self.period_s <= 0.1) {
            return Err(TwinError::Config(format!("period_s must be in (0, 0.1], got {}", self.period_s)));
        }
        if self.connect_attempts == 0 {
            return Err(TwinError::Config("connect_attempts must be at least 1".into()));
        }
        self.plant_params().validate().map_err(|e| TwinError::Config(format!("plant dynamics: {e}")))
    }

    /// Command delay in plant periods for one draw.
    pub fn sample_delay_ticks(&self, rng: &mut SimRng) -> u64 {
        let z: f64 = if self.latency.jitter_s > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
        let lat = (self.latency.mean_s + self.latency.jitter_s * z).max(0.0);
        (lat / self.period_s).round() as u64
    }

    pub fn estimate(&self, s: &VehicleState, rng: &mut SimRng) -> VehicleState {
        let mut noisy = |v: f64, var: f64| {
            if var > 0.0 {
                {
                let z: f64 = StandardNormal.sample(rng);
                v + var.sqrt() * z
            }
            } else {
                v
            }
        };
        let n = self.noise;
        let x = noisy(s.x_m, n.position_var_m2);
        let y = noisy(s.y_m, n.position_var_m2);
        let yaw = noisy(s.yaw_rad, n.yaw_var_rad2);
        let v = noisy(s.speed_mps, n.speed_var_m2ps2);
        VehicleState::new(x, y, yaw, v)
    }
}

/// One plant step: the true and estimated state sent at `step`, and the
/// command applied from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlantRow {
    pub episode: u64,
    pub step: u64,
    pub truth: VehicleState,
    pub estimate: VehicleState,
    /// Sequence of the estimate the applied command answered.
    pub applied_reply_to: Option<u64>,
}

impl PlantRow {
    /// Periods between the answered estimate and its application.
    pub fn action_age(&self) -> Option<u64> {
        self.applied_reply_to.map(|r| self.step - r)
    }
}

pub const PLANT_LOG_HEADER: &str = "episode,step,true_x,true_y,true_yaw,true_v,est_x,est_y,est_yaw,est_v,applied_reply_to,action_age";

#[derive(Debug, Clone, Default)]
pub struct EmulatorReport {
    pub rows: Vec<PlantRow>,
    pub episodes: u64,
    pub bye_reason: Option<String>,
}

impl EmulatorReport {
    /// Sample standard deviation of the x-estimate error.
    pub fn position_error_std(&self) -> f64 {
        let e: Vec<f64> = self.rows.iter().map(|r| r.estimate.x_m - r.truth.x_m).collect();
        let n = e.len() as f64;
        let m = e.iter().sum::<f64>() / n;
        (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    pub fn median_action_age(&self) -> Option<f64> {
        let mut a: Vec<f64> = self.rows.iter().filter_map(|r| r.action_age()).map(|a| a as f64).collect();
        if a.is_empty() {
            return None;
        }
        a.sort_by(f64::total_cmp);
        Some(twinmarl_core::eval::quantile(&a, 0.5))
    }
}

fn connect(addr: &str, cfg: &PlantEmulatorConfig) -> Result<TcpStream, TwinError> {
    let mut wait = Duration::from_millis(cfg.backoff_ms);
    let mut last = String::new();
    for attempt in 1..=cfg.connect_attempts {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                warn!("connect to {addr} failed (attempt {attempt}/{}): {e}", cfg.connect_attempts);
                last = e.to_string();
                if attempt < cfg.connect_attempts {
                    thread::sleep(wait);
                    wait *= 2;
                }
            }
        }
    }
    Err(TwinError::Connect {
        addr: addr.to_string(),
        attempts: cfg.connect_attempts,
        last,
    })
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    reply_to: u64,
    due: u64,
    action: Action,
    active: bool,
}

#[derive(Debug, Clone, Copy)]
enum Command {
    Coast,
    Drive(Action, u64),
    Hold,
}

struct Plant<'a> {
    cfg: &'a PlantEmulatorConfig,
    params: VehicleParams,
    truth: VehicleState,
    command: Command,
    queue: Vec<Queued>,
    episode: u64,
    started: bool,
    rng: SimRng,
}

impl Plant<'_> {
    fn on_message(&mut self, m: &TwinSyncMessage) -> Option<String> {
        match &m.payload {
            Payload::TickAck { reset: Some(p), episode, .. } => {
                if self.started {
                    self.episode += 1;
                }
                debug_assert!(*episode >= self.episode || !self.started);
                self.started = true;
                self.truth = (*p).into();
                self.queue.clear();
                self.command = Command::Coast;
            }
            Payload::ActionCommand { .. } => {
                let (reply_to, action, active) = m.action().expect("action payload");
                let due = reply_to + self.cfg.sample_delay_ticks(&mut self.rng);
                self.queue.push(Queued { reply_to, due, action, active });
            }
            Payload::Bye { reason } => return Some(reason.clone()),
            _ => {}
        }
        None
    }

    /// Newest command due at `step`; older ones are superseded.
    fn select(&mut self, step: u64) {
        if let Some(q) = self.queue.iter().filter(|q| q.due <= step).max_by_key(|q| q.reply_to).copied() {
            self.queue.retain(|o| o.reply_to > q.reply_to);
            self.command = if q.active { Command::Drive(q.action, q.reply_to) } else { Command::Hold };
        }
    }

    fn advance(&mut self) -> Result<Option<u64>, TwinError> {
        let dt = self.cfg.period_s;
        let (applied, next) = match self.command {
            Command::Coast => (None, step_vehicle(&self.truth, 0.0, 0.0, &self.params, dt)),
            Command::Hold => (None, Ok(VehicleState { speed_mps: 0.0, ..self.truth })),
            Command::Drive(a, r) => {
                let (t, s) = decode_action(a.throttle, a.steer, self.cfg.scenario).map_err(|e| TwinError::Config(e.to_string()))?;
                (Some(r), step_vehicle(&self.truth, t, s, &self.params, dt))
            }
        };
        self.truth = next.map_err(|e| TwinError::Config(format!("plant step: {e}")))?;
        Ok(applied)
    }
}

struct Wire {
    stream: TcpStream,
    lines: LineBuffer,
    guard: SeqGuard,
    closed: bool,
}

impl Wire {
    /// Read whatever is available, waiting at most `wait`.
    fn poll(&mut self, wait: Duration) -> Result<Vec<TwinSyncMessage>, TwinError> {
        let mut out = Vec::new();
        self.stream.set_read_timeout(Some(wait.max(Duration::from_micros(100))))?;
        let mut buf = [0u8; 4096];
        match self.stream.read(&mut buf) {
            Ok(0) => self.closed = true,
            Ok(n) => self.lines.push(&buf[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == ErrorKind::ConnectionReset => self.closed = true,
            Err(e) => return Err(e.into()),
        }
        while let Some(line) = self.lines.next_line() {
            let m = TwinSyncMessage::decode(&line?)?;
            if let Err(e) = self.guard.accept(m.seq) {
                warn!("dropping stale message: {e}");
                continue;
            }
            out.push(m);
        }
        Ok(out)
    }
}

/// Connect to a twin server and drive the physical slot until the server
/// says bye or the connection ends.
pub fn run_plant_emulator(cfg: &PlantEmulatorConfig, addr: &str) -> Result<EmulatorReport, TwinError> {
    cfg.validate()?;
    let stream = connect(addr, cfg)?;
    stream.set_nodelay(true)?;
    let clock = MonoClock::default();
    let send = |s: &mut TcpStream, seq: u64, payload: Payload| -> Result<(), TwinError> {
        let m = TwinSyncMessage {
            agent_id: 0,
            seq,
            sent_ns: clock.now_ns(),
            payload,
        };
        s.write_all(m.encode().as_bytes())?;
        Ok(())
    };
    let mut wire = Wire {
        stream,
        lines: LineBuffer::default(),
        guard: SeqGuard::default(),
        closed: false,
    };
    send(
        &mut wire.stream,
        0,
        Payload::Hello {
            version: PROTOCOL_VERSION,
            role: "plant".into(),
        },
    )?;
    let mut plant = Plant {
        cfg,
        params: cfg.plant_params(),
        truth: VehicleState::default(),
        command: Command::Coast,
        queue: Vec::new(),
        episode: 0,
        started: false,
        rng: rng_for(cfg.seed, STREAM_PLANT, 0),
    };
    let mut log = match &cfg.log_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{PLANT_LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut report = EmulatorReport::default();
    let period = Duration::from_secs_f64(cfg.period_s);
    let stall = Duration::from_secs(10);
    let mut bye = None;
    // wait for the spawn pose of the first episode
    let t0 = Instant::now();
    while !plant.started && bye.is_none() {
        for m in wire.poll(period)? {
            bye = bye.or(plant.on_message(&m));
        }
        if wire.closed || t0.elapsed() > stall {
            bye = bye.or(Some("connection closed before start".into()));
        }
    }
    let mut step: u64 = 0;
    while bye.is_none() {
        let tick_start = Instant::now();
        let estimate = cfg.estimate(&plant.truth, &mut plant.rng);
        // the estimate's wire sequence is the plant step it was taken at
        let payload = Payload::StateEstimate {
            x: estimate.x_m,
            y: estimate.y_m,
            yaw: estimate.yaw_rad,
            v: estimate.speed_mps,
        };
        if send(&mut wire.stream, step + 1, payload).is_err() {
            bye = Some("connection lost".into());
            break;
        }
        let truth = plant.truth;
        let episode = plant.episode;
        match cfg.clock {
            Clock::Stepped => {
                // simulated time: wait for the answer to this estimate
                let mut answered = false;
                while !answered && bye.is_none() {
                    for m in wire.poll(period)? {
                        answered |= matches!(m.payload, Payload::ActionCommand { reply_to, .. } if reply_to == step + 1);
                        bye = bye.or(plant.on_message(&m));
                    }
                    if wire.closed {
                        bye = bye.or(Some("connection closed".into()));
                    }
                    if tick_start.elapsed() > stall {
                        bye = bye.or(Some("server stalled".into()));
                    }
                }
            }
            Clock::Wall => loop {
                let left = period.saturating_sub(tick_start.elapsed());
                if left.is_zero() || bye.is_some() {
                    break;
                }
                for m in wire.poll(left)? {
                    bye = bye.or(plant.on_message(&m));
                }
                if wire.closed {
                    bye = bye.or(Some("connection closed".into()));
                }
            },
        }
        if bye.is_some() {
            break;
        }
        plant.select(step + 1);
        let applied = plant.advance()?;
        let row = PlantRow {
            episode,
            step: step + 1,
            truth,
            estimate,
            applied_reply_to: applied,
        };
        if let Some(w) = &mut log {
            let t = &row.truth;
            let e = &row.estimate;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                row.episode,
                row.step,
                t.x_m,
                t.y_m,
                t.yaw_rad,
                t.speed_mps,
                e.x_m,
                e.y_m,
                e.yaw_rad,
                e.speed_mps,
                row.applied_reply_to.map_or(String::new(), |r| r.to_string()),
                row.action_age().map_or(String::new(), |a| a.to_string())
            )?;
        }
        report.rows.push(row);
        step += 1;
    }
    if let Some(w) = &mut log {
        w.flush()?;
    }
    let reason = bye.unwrap_or_default();
    info!("plant emulator done after {step} steps: {reason}");
    send(&mut wire.stream, step + 2, Payload::Bye { reason: "plant stopping".into() }).ok();
    report.episodes = plant.episode + u64::from(plant.started);
    report.bye_reason = Some(reason);
    Ok(report)
}
