//! The ticker's state machine. It owns the scenario and is a pure function
//! of the inbound message stream, which is what makes traces replayable.

use std::sync::Arc;

use log::{info, warn};
use twinmarl_core::eval::{records_from_summary, Driver, KpiRecord, Realm, STREAM_EVAL};
use twinmarl_core::geometry::WorldGeometry;
use twinmarl_core::randomization::{RandomizationProfile, ReplicaDynamics};
use twinmarl_core::vehicle::{Action, VehicleState};
use twinmarl_core::world::{ScenarioConfig, World};
use twinmarl_core::{rng_for, SimRng};

use crate::protocol::{MonoClock, Payload, SeqCounter, TwinSyncMessage, PROTOCOL_VERSION};
use crate::TwinError;

/// Agent id the server uses for its own messages.
pub const SERVER_ID: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub scenario: ScenarioConfig,
    pub geometry: Arc<WorldGeometry>,
    pub profile: RandomizationProfile,
    pub seed: u64,
    pub driver: Driver,
    pub episodes: usize,
    pub label: String,
}

/// Physical vehicle state after one transition, as used by the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub episode: usize,
    pub step: usize,
    pub slot: usize,
    pub state: VehicleState,
}

#[derive(Debug, Clone, Default)]
pub struct TwinReport {
    pub records: Vec<KpiRecord>,
    pub trajectory: Vec<TrajPoint>,
    /// Episodes aborted because estimates stopped arriving.
    pub sync_losses: Vec<usize>,
    /// Set when the session ended on a protocol error.
    pub error: Option<String>,
    pub ticks: u64,
    pub completed: usize,
}

pub struct TwinSession {
    cfg: SessionConfig,
    world: World,
    physical: usize,
    episode: usize,
    step: usize,
    tick: u64,
    pending: bool,
    reset_pose: Option<VehicleState>,
    finished: bool,
    rng: SimRng,
    seq: SeqCounter,
    clock: MonoClock,
    report: TwinReport,
}

impl TwinSession {
    pub fn new(cfg: SessionConfig) -> Result<Self, TwinError> {
        if cfg.episodes == 0 {
            return Err(TwinError::Config("episodes must be at least 1".into()));
        }
        let world = World::single(cfg.scenario.clone(), cfg.geometry.clone(), cfg.profile.clone(), cfg.seed, ReplicaDynamics::default())?;
        cfg.driver.check(cfg.scenario.scenario, world.observation_len(), world.family_size())?;
        let rng = rng_for(cfg.seed, STREAM_EVAL, 0);
        let mut s = Self {
            cfg,
            world,
            physical: 0,
            episode: 0,
            step: 0,
            tick: 0,
            pending: false,
            reset_pose: None,
            finished: false,
            rng,
            seq: SeqCounter::default(),
            clock: MonoClock::default(),
            report: TwinReport::default(),
        };
        s.assign_physical();
        Ok(s)
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn physical_slot(&self) -> usize {
        self.physical
    }

    pub fn report(&self) -> &TwinReport {
        &self.report
    }

    pub fn into_report(self) -> TwinReport {
        self.report
    }

    fn assign_physical(&mut self) {
        let n = self.world.family_size();
        self.physical = self.episode % n;
        for i in 0..n {
            self.world.set_external(i, i == self.physical);
        }
        self.reset_pose = Some(self.world.state(self.physical));
        self.step = 0;
        self.rng = rng_for(self.cfg.seed, STREAM_EVAL, self.episode as u64);
    }

    fn msg(&mut self, payload: Payload) -> TwinSyncMessage {
        TwinSyncMessage {
            agent_id: SERVER_ID,
            seq: self.seq.next(),
            sent_ns: self.clock.now_ns(),
            payload,
        }
    }

    /// Greeting plus the spawn pose of the first episode.
    pub fn start(&mut self) -> Vec<TwinSyncMessage> {
        let hello = self.msg(Payload::Hello {
            version: PROTOCOL_VERSION,
            role: "server".into(),
        });
        let ack = self.ack();
        vec![hello, ack]
    }

    fn ack(&mut self) -> TwinSyncMessage {
        let reset = self.reset_pose.take().map(Into::into);
        let (tick, episode) = (self.tick, self.episode as u64);
        self.msg(Payload::TickAck { tick, episode, reset })
    }

    /// One server tick fed with the state estimates received since the last
    /// one, oldest first. An empty slice holds the twin at its last estimate.
    pub fn tick(&mut self, estimates: &[TwinSyncMessage]) -> Result<Vec<TwinSyncMessage>, TwinError> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.tick += 1;
        self.report.ticks = self.tick;
        let fresh = estimates.iter().rev().find_map(|m| match m.payload {
            Payload::StateEstimate { x, y, yaw, v } => Some(VehicleState::new(x, y, yaw, v)),
            _ => None,
        });
        let mut out = Vec::new();
        // update: finish the transition started last tick with the measured pose
        if self.pending {
            self.pending = false;
            if self.world.is_alive(self.physical) {
                if let Some(s) = fresh {
                    self.world.set_state(self.physical, s);
                }
                self.step += 1;
                self.report.trajectory.push(TrajPoint {
                    episode: self.episode,
                    step: self.step,
                    slot: self.physical,
                    state: self.world.state(self.physical),
                });
            }
            let report = self.world.post_step();
            if let Some(s) = report.episodes.first() {
                let scenario = self.cfg.scenario.scenario;
                self.report
                    .records
                    .extend(records_from_summary(s, scenario, &self.cfg.label, Realm::Twin, self.episode));
                self.episode += 1;
                self.report.completed = self.episode;
                info!("twin episode {} done after {} steps", self.episode, s.steps);
                if self.episode >= self.cfg.episodes {
                    self.finished = true;
                    // close the loop for the last estimates, then stop the plant
                    for m in estimates.iter().filter(|m| matches!(m.payload, Payload::StateEstimate { .. })) {
                        let stop = self.msg(Payload::ActionCommand {
                            reply_to: m.seq,
                            throttle_index: 0,
                            steer_index: 0,
                            active: false,
                        });
                        out.push(stop);
                    }
                    out.push(self.msg(Payload::Bye { reason: "episodes complete".into() }));
                    return Ok(out);
                }
                self.assign_physical();
            }
        }
        out.push(self.ack());
        // observe and decide for every live agent, in index order
        let scenario = self.cfg.scenario.scenario;
        let n = self.world.agent_count();
        let mut actions: Vec<Option<Action>> = Vec::with_capacity(n);
        for i in 0..n {
            actions.push(if self.world.is_alive(i) {
                let st = self.world.state(i);
                Some(self.cfg.driver.act(scenario, i, self.world.observation(i), &st, &mut self.rng).map_err(twinmarl_core::eval::EvalError::from)?)
            } else {
                None
            });
        }
        // act: every estimate gets exactly one answer
        let phys = actions[self.physical];
        for m in estimates {
            if !matches!(m.payload, Payload::StateEstimate { .. }) {
                continue;
            }
            let a = phys.unwrap_or(Action::new(0, 0));
            let reply = self.msg(Payload::ActionCommand {
                reply_to: m.seq,
                throttle_index: a.throttle,
                steer_index: a.steer,
                active: phys.is_some(),
            });
            out.push(reply);
        }
        self.world.pre_step(&actions)?;
        self.pending = true;
        Ok(out)
    }

    /// Abort the running episode: estimates stopped arriving.
    pub fn abort_sync_loss(&mut self) -> Vec<TwinSyncMessage> {
        warn!("sync-loss in episode {} at tick {}", self.episode, self.tick);
        self.report.sync_losses.push(self.episode);
        self.finished = true;
        vec![self.msg(Payload::Bye { reason: "sync-loss".into() })]
    }

    pub fn abort_error(&mut self, diagnostic: String) -> Vec<TwinSyncMessage> {
        warn!("closing twin session: {diagnostic}");
        self.report.error = Some(diagnostic.clone());
        self.finished = true;
        vec![self.msg(Payload::Bye { reason: diagnostic })]
    }
}

/// The same episodes in pure simulation: same seed, same action sampling,
/// the slot that would be physical tracked step by step.
pub fn simulate_reference(cfg: &SessionConfig) -> Result<(Vec<KpiRecord>, Vec<TrajPoint>), TwinError> {
    let mut world = World::single(cfg.scenario.clone(), cfg.geometry.clone(), cfg.profile.clone(), cfg.seed, ReplicaDynamics::default())?;
    cfg.driver.check(cfg.scenario.scenario, world.observation_len(), world.family_size())?;
    let scenario = cfg.scenario.scenario;
    let n = world.agent_count();
    let mut records = Vec::new();
    let mut traj = Vec::new();
    for ep in 0..cfg.episodes {
        let slot = ep % world.family_size();
        let mut rng = rng_for(cfg.seed, STREAM_EVAL, ep as u64);
        let mut step = 0;
        loop {
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                actions.push(if world.is_alive(i) {
                    let st = world.state(i);
                    Some(cfg.driver.act(scenario, i, world.observation(i), &st, &mut rng).map_err(twinmarl_core::eval::EvalError::from)?)
                } else {
                    None
                });
            }
            let moved = world.is_alive(slot);
            world.pre_step(&actions)?;
            if moved {
                step += 1;
                traj.push(TrajPoint {
                    episode: ep,
                    step,
                    slot,
                    state: world.state(slot),
                });
            }
            let report = world.post_step();
            if let Some(s) = report.episodes.first() {
                records.extend(records_from_summary(s, scenario, &cfg.label, Realm::Sim, ep));
                break;
            }
        }
    }
    Ok((records, traj))
}
