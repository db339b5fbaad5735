//! A simulated world hosting one or more agent families on shared geometry.
//!
//! A family is one scenario instance (4 intersection agents or 2 racers)
//! with its own episode counter, random stream and dynamics perturbation.
//! Environments-mode parallelism uses many single-family worlds; agents-mode
//! puts many families into one world and separates them with isolation masks.
//!
//! A step is split in two halves so the twin bridge can insert an externally
//! measured state between them: [`World::pre_step`] applies actions and
//! integrates every non-external agent, [`World::post_step`] evaluates events,
//! rewards, termination and observations.

use std::collections::VecDeque;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReplicaError, ScenarioError};
use crate::geometry::{
    intersection, Contact, Footprint, IntersectionConfig, LidarSpec, PeerBody, Pose, WorldGeometry, MIN_RANGE_M,
};
use crate::randomization::{perturb_command, RandomizationProfile, ReplicaDynamics};
use crate::vehicle::{decode_action, step_vehicle, Action, ScenarioKind, VehicleParams, VehicleState, DEFAULT_DT};
use crate::{coop, race, rng_for, SimRng};

/// Stream id for per-episode scenario randomness (spawns, noise).
pub const STREAM_EPISODE: u64 = 1;

/// Which peers an agent collides with, perceives, and exchanges state with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IsolationMask {
    pub collision_group: usize,
    pub perception_group: usize,
    pub interaction_group: usize,
}

impl IsolationMask {
    pub fn uniform(group: usize) -> Self {
        Self {
            collision_group: group,
            perception_group: group,
            interaction_group: group,
        }
    }
}

/// Scenario parameters shared by every family of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub vehicle: VehicleParams,
    pub footprint: Footprint,
    /// Family step cap; the episode is truncated when it is reached.
    pub horizon_steps: usize,
    pub dt: f64,
    pub lidar: LidarSpec,
    pub intersection: IntersectionConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::coop()
    }
}

impl ScenarioConfig {
    pub fn coop() -> Self {
        Self {
            scenario: ScenarioKind::Coop,
            vehicle: VehicleParams::intersection_default(),
            footprint: Footprint::intersection_default(),
            horizon_steps: 1000,
            dt: DEFAULT_DT,
            lidar: LidarSpec::default(),
            intersection: IntersectionConfig::default(),
        }
    }

    pub fn race() -> Self {
        Self {
            scenario: ScenarioKind::Race,
            vehicle: VehicleParams::default(),
            footprint: Footprint::race_default(),
            horizon_steps: 1600,
            dt: DEFAULT_DT,
            lidar: LidarSpec::default(),
            intersection: IntersectionConfig::default(),
        }
    }

    pub fn for_scenario(scenario: ScenarioKind) -> Self {
        match scenario {
            ScenarioKind::Coop => Self::coop(),
            ScenarioKind::Race => Self::race(),
        }
    }

    /// Default geometry for the scenario: generated junction or bundled track.
    pub fn default_geometry(&self) -> Result<WorldGeometry, ScenarioError> {
        Ok(match self.scenario {
            ScenarioKind::Coop => intersection(&self.intersection)?,
            ScenarioKind::Race => WorldGeometry::default_race_track(),
        })
    }

    pub fn observation_len(&self, family_size: usize) -> usize {
        match self.scenario {
            ScenarioKind::Coop => 2 + 4 * (family_size - 1),
            ScenarioKind::Race => 1 + self.lidar.beam_count,
        }
    }
}

/// Per-family construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySetup {
    /// Replica index; selects the family's random streams.
    pub replica: usize,
    pub dynamics: ReplicaDynamics,
    /// One mask per slot.
    pub masks: Vec<IsolationMask>,
}

impl FamilySetup {
    /// Fully isolated family whose groups all equal `replica`.
    pub fn isolated(replica: usize, family_size: usize, dynamics: ReplicaDynamics) -> Self {
        Self {
            replica,
            dynamics,
            masks: vec![IsolationMask::uniform(replica); family_size],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Violation,
    Collision,
    Timeout,
}

/// Which reward branch fired for an agent this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    /// Agent did not act (done, waiting for its family to reset).
    Idle,
    SafeTraversal,
    Violation,
    Running,
    Collision,
    BestLap,
    Lap,
    Checkpoint,
    Cruise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub acted: bool,
    pub reward: f64,
    /// Terminal transition (no bootstrap).
    pub done: bool,
    /// Episode cut by the horizon (bootstrap from `obs`).
    pub truncated: bool,
    pub event: Event,
    /// Observation after the step (terminal observation if the episode ended).
    pub obs: Vec<f64>,
}

/// Bookkeeping of a finished family episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub family: usize,
    pub replica: usize,
    pub episode: u64,
    pub steps: usize,
    pub agent_returns: Vec<f64>,
    pub agent_steps: Vec<usize>,
    pub causes: Vec<Termination>,
    pub laps: Vec<usize>,
    pub best_lap_steps: Vec<Option<usize>>,
    pub gates_passed: Vec<usize>,
    /// Race only: winning slot.
    pub winner: Option<usize>,
}

impl EpisodeSummary {
    /// Coop success: every agent reached its goal.
    pub fn all_reached_goal(&self) -> bool {
        self.causes.iter().all(|c| *c == Termination::Goal)
    }

    pub fn mean_return(&self) -> f64 {
        self.agent_returns.iter().sum::<f64>() / self.agent_returns.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub agents: Vec<AgentStep>,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, Clone)]
pub(crate) struct Body {
    pub family: usize,
    pub slot: usize,
    pub mask: IsolationMask,
    pub state: VehicleState,
    pub prev_state: VehicleState,
    pub params: VehicleParams,
    pub alive: bool,
    pub acted: bool,
    pub external: bool,
}

/// Lap bookkeeping of one racer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaceProgress {
    pub next_gate: usize,
    pub laps: usize,
    pub lap_timer: usize,
    pub best_lap: Option<usize>,
    pub lap_times: Vec<usize>,
    pub gates_passed: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Family {
    pub setup: FamilySetup,
    pub first: usize,
    pub size: usize,
    pub episode: u64,
    pub rng: SimRng,
    pub step: usize,
    pub returns: Vec<f64>,
    pub agent_steps: Vec<usize>,
    pub causes: Vec<Option<Termination>>,
    pub race: Vec<RaceProgress>,
    /// Coop: measured (noisy) states broadcast over V2V, newest last.
    pub broadcast: VecDeque<Vec<VehicleState>>,
    pub delay_steps: usize,
}

pub struct World {
    pub(crate) cfg: ScenarioConfig,
    pub(crate) geometry: Arc<WorldGeometry>,
    pub(crate) profile: RandomizationProfile,
    pub(crate) seed: u64,
    pub(crate) bodies: Vec<Body>,
    pub(crate) families: Vec<Family>,
    pub(crate) obs: Vec<Vec<f64>>,
    ignored_actions: u64,
    stepping: bool,
}

impl World {
    /// Build a world and reset every family to its first episode.
    pub fn new(
        cfg: ScenarioConfig,
        geometry: Arc<WorldGeometry>,
        profile: RandomizationProfile,
        seed: u64,
        families: Vec<FamilySetup>,
    ) -> Result<Self, ReplicaError> {
        if families.is_empty() {
            return Err(ReplicaError::ZeroReplicas);
        }
        cfg.vehicle.validate().map_err(ScenarioError::from)?;
        if !cfg.footprint.is_valid() {
            return Err(ScenarioError::Config("footprint half-extents must be positive".into()).into());
        }
        let family_size = geometry.spawns.len();
        let needed = match cfg.scenario {
            ScenarioKind::Coop => family_size >= 2 && geometry.goal_regions.len() >= family_size,
            ScenarioKind::Race => family_size >= 1,
        };
        if !needed {
            return Err(ScenarioError::Config(format!(
                "{} geometry provides {family_size} spawns and {} goal regions",
                cfg.scenario,
                geometry.goal_regions.len()
            ))
            .into());
        }
        geometry.validate_spawns(&cfg.footprint).map_err(ScenarioError::from)?;

        let mut bodies = Vec::new();
        let mut fams = Vec::new();
        for (f, setup) in families.into_iter().enumerate() {
            if setup.masks.len() != family_size {
                return Err(ScenarioError::Config(format!(
                    "family {f} has {} masks for {family_size} agents",
                    setup.masks.len()
                ))
                .into());
            }
            let params = cfg.vehicle.with_offsets(&setup.dynamics.offsets);
            params.validate().map_err(ScenarioError::from)?;
            let first = bodies.len();
            for (slot, mask) in setup.masks.iter().enumerate() {
                bodies.push(Body {
                    family: f,
                    slot,
                    mask: *mask,
                    state: VehicleState::default(),
                    prev_state: VehicleState::default(),
                    params,
                    alive: false,
                    acted: false,
                    external: false,
                });
            }
            fams.push(Family {
                delay_steps: setup.dynamics.delay_steps(),
                setup,
                first,
                size: family_size,
                episode: 0,
                rng: rng_for(seed, STREAM_EPISODE, 0),
                step: 0,
                returns: vec![0.0; family_size],
                agent_steps: vec![0; family_size],
                causes: vec![None; family_size],
                race: vec![RaceProgress::default(); family_size],
                broadcast: VecDeque::new(),
            });
        }
        check_family_overlap(&fams, &bodies)?;
        let n = bodies.len();
        let mut world = Self {
            cfg,
            geometry,
            profile,
            seed,
            bodies,
            families: fams,
            obs: vec![Vec::new(); n],
            ignored_actions: 0,
            stepping: false,
        };
        for f in 0..world.families.len() {
            world.reset_family(f);
        }
        Ok(world)
    }

    /// One fully isolated family: the unparallelized scenario.
    pub fn single(
        cfg: ScenarioConfig,
        geometry: Arc<WorldGeometry>,
        profile: RandomizationProfile,
        seed: u64,
        dynamics: ReplicaDynamics,
    ) -> Result<Self, ReplicaError> {
        let size = geometry.spawns.len();
        Self::new(cfg, geometry, profile, seed, vec![FamilySetup::isolated(0, size, dynamics)])
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &Arc<WorldGeometry> {
        &self.geometry
    }

    pub fn scenario(&self) -> ScenarioKind {
        self.cfg.scenario
    }

    pub fn agent_count(&self) -> usize {
        self.bodies.len()
    }

    pub fn family_count(&self) -> usize {
        self.families.len()
    }

    pub fn family_size(&self) -> usize {
        self.families[0].size
    }

    pub fn observation_len(&self) -> usize {
        self.cfg.observation_len(self.family_size())
    }

    /// `(family, slot)` of a flat agent index.
    pub fn locate(&self, agent: usize) -> (usize, usize) {
        (self.bodies[agent].family, self.bodies[agent].slot)
    }

    pub fn is_alive(&self, agent: usize) -> bool {
        self.bodies[agent].alive
    }

    pub fn state(&self, agent: usize) -> VehicleState {
        self.bodies[agent].state
    }

    pub fn states(&self) -> Vec<VehicleState> {
        self.bodies.iter().map(|b| b.state).collect()
    }

    pub fn mask(&self, agent: usize) -> IsolationMask {
        self.bodies[agent].mask
    }

    pub fn observation(&self, agent: usize) -> &[f64] {
        &self.obs[agent]
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.obs
    }

    pub fn family_episode(&self, family: usize) -> u64 {
        self.families[family].episode
    }

    pub fn family_step(&self, family: usize) -> usize {
        self.families[family].step
    }

    pub fn race_progress(&self, agent: usize) -> &RaceProgress {
        let b = &self.bodies[agent];
        &self.families[b.family].race[b.slot]
    }

    /// Actions received for agents that were already done.
    pub fn ignored_actions(&self) -> u64 {
        self.ignored_actions
    }

    /// Mark an agent whose motion is supplied from outside (the physical
    /// agent of a twin loop). Its state is set with [`World::set_state`].
    pub fn set_external(&mut self, agent: usize, external: bool) {
        self.bodies[agent].external = external;
    }

    pub fn set_state(&mut self, agent: usize, state: VehicleState) {
        self.bodies[agent].state = state;
    }

    /// Overwrite the state of an agent and recompute every observation.
    /// Used by tests that perturb one agent and check who notices.
    pub fn teleport(&mut self, agent: usize, state: VehicleState) {
        self.bodies[agent].state = state;
        self.bodies[agent].prev_state = state;
        if self.cfg.scenario == ScenarioKind::Coop {
            coop::patch_broadcast(self, agent);
        }
        for f in 0..self.families.len() {
            self.refresh_observations(f, false);
        }
    }

    /// `pre_step` then `post_step`.
    pub fn step(&mut self, actions: &[Option<Action>]) -> Result<StepReport, ScenarioError> {
        self.pre_step(actions)?;
        Ok(self.post_step())
    }

    /// Apply actions (with action noise) and integrate every live,
    /// non-external agent.
    pub fn pre_step(&mut self, actions: &[Option<Action>]) -> Result<(), ScenarioError> {
        if actions.len() != self.bodies.len() {
            return Err(ScenarioError::Config(format!(
                "{} actions for {} agents",
                actions.len(),
                self.bodies.len()
            )));
        }
        for (i, b) in self.bodies.iter().enumerate() {
            match actions[i] {
                None if b.alive => return Err(ScenarioError::MissingAction { agent: i }),
                Some(a) => {
                    decode_action(a.throttle, a.steer, self.cfg.scenario)?;
                }
                None => {}
            }
        }
        let scenario = self.cfg.scenario;
        let dt = self.cfg.dt;
        for f in 0..self.families.len() {
            let (first, size) = (self.families[f].first, self.families[f].size);
            for i in first..first + size {
                let body = &mut self.bodies[i];
                body.acted = body.alive;
                if !body.alive {
                    if actions[i].is_some() {
                        self.ignored_actions += 1;
                        if self.ignored_actions == 1 {
                            warn!("ignoring actions addressed to done agents");
                        }
                    }
                    continue;
                }
                let a = actions[i].expect("checked above");
                let (throttle, steer) = decode_action(a.throttle, a.steer, scenario)?;
                let noise = self.profile.sample_action_noise(&mut self.families[f].rng);
                let (throttle, steer) = perturb_command(throttle, steer, noise);
                body.prev_state = body.state;
                if !body.external {
                    body.state = step_vehicle(&body.state, throttle, steer, &body.params, dt)?;
                }
            }
        }
        self.stepping = true;
        Ok(())
    }

    /// Events, rewards, termination, observation noise and observations for
    /// the transition started by the last `pre_step`. Finished families are
    /// reset immediately; their next observations belong to the new episode.
    pub fn post_step(&mut self) -> StepReport {
        assert!(self.stepping, "post_step without pre_step");
        self.stepping = false;
        let mut report = StepReport {
            agents: vec![
                AgentStep {
                    acted: false,
                    reward: 0.0,
                    done: false,
                    truncated: false,
                    event: Event::Idle,
                    obs: Vec::new(),
                };
                self.bodies.len()
            ],
            episodes: Vec::new(),
        };
        match self.cfg.scenario {
            ScenarioKind::Coop => coop::resolve(self, &mut report),
            ScenarioKind::Race => race::resolve(self, &mut report),
        }
        for f in 0..self.families.len() {
            self.refresh_observations(f, true);
            let (first, size) = (self.families[f].first, self.families[f].size);
            for i in first..first + size {
                report.agents[i].obs = self.obs[i].clone();
            }
        }
        let mut finished = Vec::new();
        for (f, fam) in self.families.iter_mut().enumerate() {
            let over = (0..fam.size).all(|s| !self.bodies[fam.first + s].alive);
            if over {
                finished.push(f);
            }
        }
        for f in finished {
            report.episodes.push(self.summarize(f));
            self.families[f].episode += 1;
            self.reset_family(f);
        }
        report
    }

    /// Called by the scenario resolvers once per family after rewards.
    /// Truncates the episode when the horizon is reached.
    pub(crate) fn advance_clock(&mut self, f: usize, report: &mut StepReport) {
        let fam = &mut self.families[f];
        fam.step += 1;
        if fam.step < self.cfg.horizon_steps {
            return;
        }
        for s in 0..fam.size {
            let b = &mut self.bodies[fam.first + s];
            if b.alive {
                b.alive = false;
                fam.causes[s] = Some(Termination::Timeout);
                let r = &mut report.agents[fam.first + s];
                r.done = true;
                r.truncated = true;
            }
        }
    }

    fn summarize(&self, f: usize) -> EpisodeSummary {
        let fam = &self.families[f];
        EpisodeSummary {
            family: f,
            replica: fam.setup.replica,
            episode: fam.episode,
            steps: fam.step,
            agent_returns: fam.returns.clone(),
            agent_steps: fam.agent_steps.clone(),
            causes: fam.causes.iter().map(|c| c.unwrap_or(Termination::Timeout)).collect(),
            laps: fam.race.iter().map(|r| r.laps).collect(),
            best_lap_steps: fam.race.iter().map(|r| r.best_lap).collect(),
            gates_passed: fam.race.iter().map(|r| r.gates_passed).collect(),
            winner: match self.cfg.scenario {
                ScenarioKind::Race => race::winner(&fam.race),
                ScenarioKind::Coop => None,
            },
        }
    }

    fn reset_family(&mut self, f: usize) {
        let fam = &mut self.families[f];
        let index = ((fam.setup.replica as u64) << 32) | fam.episode;
        fam.rng = rng_for(self.seed, STREAM_EPISODE, index);
        fam.step = 0;
        fam.returns.iter_mut().for_each(|r| *r = 0.0);
        fam.agent_steps.iter_mut().for_each(|r| *r = 0);
        fam.causes.iter_mut().for_each(|c| *c = None);
        fam.race.iter_mut().for_each(|r| *r = RaceProgress::default());
        fam.broadcast.clear();
        for s in 0..fam.size {
            let spec = self.geometry.spawns[s].clone();
            let lane = if spec.lane_offsets_m.len() > 1 {
                fam.rng.random_range(0..spec.lane_offsets_m.len())
            } else {
                0
            };
            let lat: f64 = fam.rng.random_range(-1.0..=1.0);
            let head: f64 = fam.rng.random_range(-1.0..=1.0);
            let pose = spec.realize(lane, lat, head);
            let b = &mut self.bodies[fam.first + s];
            b.state = VehicleState::new(pose.x, pose.y, crate::vehicle::wrap_angle(pose.yaw), 0.0);
            b.prev_state = b.state;
            b.alive = true;
            b.acted = false;
        }
        self.refresh_observations(f, true);
    }

    /// Recompute observations for family `f`. With `draw_noise` the
    /// observation noise of this step is sampled; otherwise the noise-free
    /// values are used (only for out-of-band refreshes).
    fn refresh_observations(&mut self, f: usize, draw_noise: bool) {
        match self.cfg.scenario {
            ScenarioKind::Coop => coop::refresh(self, f, draw_noise),
            ScenarioKind::Race => race::refresh(self, f, draw_noise),
        }
    }

    /// Live bodies other than `agent` that pass `filter` on masks.
    pub(crate) fn peers(&self, agent: usize, same_group: impl Fn(&IsolationMask, &IsolationMask) -> bool) -> Vec<PeerBody> {
        let me = &self.bodies[agent];
        self.bodies
            .iter()
            .enumerate()
            .filter(|(j, b)| *j != agent && b.alive && same_group(&me.mask, &b.mask))
            .map(|(j, b)| PeerBody {
                id: j,
                state: b.state,
                footprint: self.cfg.footprint,
            })
            .collect()
    }

    pub(crate) fn contact(&self, agent: usize) -> Contact {
        let peers = self.peers(agent, |a, b| a.collision_group == b.collision_group);
        self.geometry
            .check_collision(&self.bodies[agent].state, &self.cfg.footprint, &peers)
    }

    pub(crate) fn lidar(&self, agent: usize) -> Vec<f64> {
        let peers = self.peers(agent, |a, b| a.perception_group == b.perception_group);
        self.geometry
            .raycast(&Pose::from(&self.bodies[agent].state), &peers, &self.cfg.lidar)
            .into_iter()
            .map(|r| r.clamp(MIN_RANGE_M, self.cfg.lidar.max_range_m))
            .collect()
    }
}

/// Families whose spawn footprints overlap must not share a collision group.
fn check_family_overlap(families: &[Family], bodies: &[Body]) -> Result<(), ReplicaError> {
    for a in 0..families.len() {
        for b in a + 1..families.len() {
            let fa = &families[a];
            let fb = &families[b];
            for i in fa.first..fa.first + fa.size {
                for j in fb.first..fb.first + fb.size {
                    // Same slot index means the same spawn distribution.
                    if bodies[i].slot == bodies[j].slot && bodies[i].mask.collision_group == bodies[j].mask.collision_group {
                        return Err(ReplicaError::OverlappingFamilies { a, b });
                    }
                }
            }
        }
    }
    Ok(())
}
