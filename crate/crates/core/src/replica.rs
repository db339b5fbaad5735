//! Parallel replicas of a scenario with selective isolation.
//!
//! Global agent indices are replica-major in every mode: agent `s` of
//! replica `r` is `r * family_size + s`.

use std::sync::Arc;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ReplicaError, ScenarioError};
use crate::geometry::WorldGeometry;
use crate::randomization::RandomizationProfile;
use crate::vehicle::Action;
use crate::world::{AgentStep, EpisodeSummary, FamilySetup, IsolationMask, ScenarioConfig, World};
use crate::{rng_for, SimRng};

/// Stream id for per-replica action sampling.
pub const STREAM_POLICY: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParallelMode {
    /// One OS process per replica (see the CLI launcher).
    Instances,
    /// Many worlds with one family each, in one process.
    Environments,
    /// One world holding many families.
    Agents,
}

impl std::str::FromStr for ParallelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instances" => Ok(Self::Instances),
            "environments" => Ok(Self::Environments),
            "agents" => Ok(Self::Agents),
            o => Err(format!("unknown parallel mode `{o}` (expected instances|environments|agents)")),
        }
    }
}

impl std::fmt::Display for ParallelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Instances => "instances",
            Self::Environments => "environments",
            Self::Agents => "agents",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReplicaSpec {
    pub mode: ParallelMode,
    pub replica_count: usize,
    pub scenario: ScenarioConfig,
    pub profile: RandomizationProfile,
    pub seed: u64,
    /// Per replica, per slot. `None` isolates every replica fully.
    pub masks: Option<Vec<Vec<IsolationMask>>>,
}

impl ReplicaSpec {
    pub fn new(mode: ParallelMode, replica_count: usize, scenario: ScenarioConfig, profile: RandomizationProfile, seed: u64) -> Self {
        Self {
            mode,
            replica_count,
            scenario,
            profile,
            seed,
            masks: None,
        }
    }
}

/// Results of one replica for one `step_all`.
#[derive(Debug, Clone)]
pub struct ReplicaStep {
    pub replica: usize,
    pub agents: Vec<AgentStep>,
    pub episodes: Vec<EpisodeSummary>,
}

pub struct ReplicaSet {
    mode: ParallelMode,
    worlds: Vec<World>,
    replica_count: usize,
    family_size: usize,
    pool: rayon::ThreadPool,
    policy_rngs: Vec<SimRng>,
}

/// Build the replicas of `spec` on `geometry`, stepped by `workers` threads.
pub fn spawn_replicas(spec: &ReplicaSpec, geometry: Arc<WorldGeometry>, workers: usize) -> Result<ReplicaSet, ReplicaError> {
    let k = spec.replica_count;
    if k == 0 {
        return Err(ReplicaError::ZeroReplicas);
    }
    if spec.mode == ParallelMode::Instances {
        return Err(ReplicaError::OutOfProcess);
    }
    if let Some(m) = &spec.masks {
        if m.len() != k {
            return Err(ScenarioError::Config(format!("{} mask rows for {k} replicas", m.len())).into());
        }
    }
    let size = geometry.spawns.len();
    let dynamics = spec
        .profile
        .assign_replica_dynamics(spec.scenario.scenario, k)
        .map_err(ScenarioError::from)?;
    let setups: Vec<FamilySetup> = (0..k)
        .map(|r| {
            let mut s = FamilySetup::isolated(r, size, dynamics[r]);
            if let Some(m) = &spec.masks {
                s.masks = m[r].clone();
            }
            s
        })
        .collect();
    let worlds = match spec.mode {
        ParallelMode::Environments => setups
            .into_iter()
            .map(|s| World::new(spec.scenario.clone(), geometry.clone(), spec.profile, spec.seed, vec![s]))
            .collect::<Result<Vec<_>, _>>()?,
        ParallelMode::Agents => vec![World::new(spec.scenario.clone(), geometry, spec.profile, spec.seed, setups)?],
        ParallelMode::Instances => unreachable!(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ReplicaError::Pool(e.to_string()))?;
    Ok(ReplicaSet {
        mode: spec.mode,
        worlds,
        replica_count: k,
        family_size: size,
        pool,
        policy_rngs: (0..k).map(|r| rng_for(spec.seed, STREAM_POLICY, r as u64)).collect(),
    })
}

impl ReplicaSet {
    pub fn mode(&self) -> ParallelMode {
        self.mode
    }

    pub fn replica_count(&self) -> usize {
        self.replica_count
    }

    pub fn family_size(&self) -> usize {
        self.family_size
    }

    pub fn agent_count(&self) -> usize {
        self.replica_count * self.family_size
    }

    pub fn observation_len(&self) -> usize {
        self.worlds[0].observation_len()
    }

    pub fn worlds(&self) -> &[World] {
        &self.worlds
    }

    /// `(world index, agent index inside that world)`.
    pub fn locate(&self, agent: usize) -> (usize, usize) {
        match self.mode {
            ParallelMode::Agents => (0, agent),
            _ => (agent / self.family_size, agent % self.family_size),
        }
    }

    pub fn observation(&self, agent: usize) -> &[f64] {
        let (w, a) = self.locate(agent);
        self.worlds[w].observation(a)
    }

    pub fn is_alive(&self, agent: usize) -> bool {
        let (w, a) = self.locate(agent);
        self.worlds[w].is_alive(a)
    }

    pub fn state(&self, agent: usize) -> crate::vehicle::VehicleState {
        let (w, a) = self.locate(agent);
        self.worlds[w].state(a)
    }

    /// Collision, perception and interaction groups of every agent.
    pub fn masks(&self) -> Vec<IsolationMask> {
        (0..self.agent_count())
            .map(|g| {
                let (w, a) = self.locate(g);
                self.worlds[w].mask(a)
            })
            .collect()
    }

    /// Run `f(replica, agents, rng)` for every replica on the worker pool and
    /// return the results in replica order. `agents` are the global indices
    /// of the replica's slots and `rng` is its private sampling stream.
    pub fn par_map_replicas<T, F>(&mut self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, std::ops::Range<usize>, &mut SimRng) -> T + Sync,
    {
        let size = self.family_size;
        let rngs = &mut self.policy_rngs;
        self.pool.install(|| {
            rngs.par_iter_mut()
                .enumerate()
                .map(|(r, rng)| f(r, r * size..(r + 1) * size, rng))
                .collect()
        })
    }

    /// Step every replica. Actions are indexed by global agent.
    pub fn step_all(&mut self, actions: &[Option<Action>]) -> Result<Vec<ReplicaStep>, ReplicaError> {
        let size = self.family_size;
        if actions.len() != self.agent_count() {
            return Err(ScenarioError::Config(format!("{} actions for {} agents", actions.len(), self.agent_count())).into());
        }
        match self.mode {
            ParallelMode::Agents => {
                let report = self.worlds[0].step(actions).map_err(|e| {
                    let replica = match e {
                        ScenarioError::MissingAction { agent } => agent / size,
                        _ => 0,
                    };
                    ReplicaError::Faulted { replica, source: e }
                })?;
                let mut out: Vec<ReplicaStep> = report
                    .agents
                    .chunks(size)
                    .enumerate()
                    .map(|(r, a)| ReplicaStep {
                        replica: r,
                        agents: a.to_vec(),
                        episodes: Vec::new(),
                    })
                    .collect();
                for ep in report.episodes {
                    out[ep.family].episodes.push(ep);
                }
                Ok(out)
            }
            _ => {
                let results: Vec<Result<ReplicaStep, ReplicaError>> = self.pool.install(|| {
                    self.worlds
                        .par_iter_mut()
                        .zip(actions.par_chunks(size))
                        .enumerate()
                        .map(|(r, (w, a))| {
                            let rep = w.step(a).map_err(|e| ReplicaError::Faulted { replica: r, source: e })?;
                            Ok(ReplicaStep {
                                replica: r,
                                agents: rep.agents,
                                episodes: rep.episodes,
                            })
                        })
                        .collect()
                });
                results.into_iter().collect()
            }
        }
    }
}

/// One row of a scaling benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub mode: ParallelMode,
    pub wall_clock_s: f64,
    pub agent_steps_per_s: f64,
    pub reduction_pct: f64,
}

/// Gather `budget` agent-steps with `k` replicas and report wall-clock time.
/// `act` is evaluated for every live agent; replicas act and step in parallel.
pub fn run_budget<F>(spec: &ReplicaSpec, geometry: Arc<WorldGeometry>, workers: usize, budget: usize, act: &F) -> Result<f64, ReplicaError>
where
    F: Fn(&[f64], &mut SimRng) -> Action + Sync,
{
    let mut set = spawn_replicas(spec, geometry, workers)?;
    let start = Instant::now();
    let mut gathered = 0usize;
    while gathered < budget {
        let per_replica = {
            let set_ref = &set;
            let obs: Vec<(Vec<f64>, bool)> = (0..set_ref.agent_count())
                .map(|g| (set_ref.observation(g).to_vec(), set_ref.is_alive(g)))
                .collect();
            set.par_map_replicas(|_, agents, rng| {
                agents
                    .map(|g| if obs[g].1 { Some(act(&obs[g].0, rng)) } else { None })
                    .collect::<Vec<_>>()
            })
        };
        let actions: Vec<Option<Action>> = per_replica.into_iter().flatten().collect();
        gathered += actions.iter().filter(|a| a.is_some()).count();
        set.step_all(&actions)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Wall-clock scaling sweep over replica counts with a fixed agent-step budget.
pub fn benchmark_scaling<F>(
    base: &ReplicaSpec,
    geometry: Arc<WorldGeometry>,
    ks: &[usize],
    workers: usize,
    budget: usize,
    act: &F,
) -> Result<Vec<BenchRow>, ReplicaError>
where
    F: Fn(&[f64], &mut SimRng) -> Action + Sync,
{
    let mut rows: Vec<BenchRow> = Vec::new();
    for &k in ks {
        let mut spec = base.clone();
        spec.replica_count = k;
        let secs = run_budget(&spec, geometry.clone(), workers, budget, act)?;
        let base_secs = rows.first().map_or(secs, |r| r.wall_clock_s);
        info!("k={k}: {secs:.3} s");
        rows.push(BenchRow {
            k,
            mode: spec.mode,
            wall_clock_s: secs,
            agent_steps_per_s: budget as f64 / secs,
            reduction_pct: 100.0 * (1.0 - secs / base_secs),
        });
    }
    Ok(rows)
}

/// CSV with columns `k,mode,wall_clock_s,agent_steps_per_s,reduction_pct`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("k,mode,wall_clock_s,agent_steps_per_s,reduction_pct\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.3},{:.3}\n",
            r.k, r.mode, r.wall_clock_s, r.agent_steps_per_s, r.reduction_pct
        ));
    }
    s
}
