//! Rollout collection over replicas and on-policy optimization.
//!
//! Intersection: one shared policy fed by every agent. Racing: one policy per
//! family slot, each trained on its own agents' experience.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::curiosity::{Icm, IcmSample};
use crate::demo::Demonstrations;
use crate::error::{LearnError, TrainError};
use crate::gail::Discriminator;
use crate::geometry::WorldGeometry;
use crate::policy::{Decision, PolicyNet};
use crate::ppo::{aggregate_rewards, gae, DemoSet, GaeStep, PpoLearner, Sample, TrainConfig};
use crate::randomization::RandomizationProfile;
use crate::replica::{spawn_replicas, ParallelMode, ReplicaSpec};
use crate::vehicle::{Action, ScenarioKind};
use crate::world::{ScenarioConfig, Termination};
use crate::{rng_for, SimRng};

/// Stream ids for network initialization and minibatch shuffling.
pub const STREAM_INIT: u64 = 3;
pub const STREAM_UPDATE: u64 = 4;

pub const METRICS_HEADER: &str = "step,reward_mean,episode_len_mean,entropy,bc_loss,gail_reward,curiosity_reward,extrinsic_reward,kl,lr";

/// One line of the metrics log, written after every buffer flush.
/// Absent quantities are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Agent-steps consumed by the policy so far.
    pub step: u64,
    /// Mean cumulative extrinsic reward of agent-episodes finished since the last flush.
    pub reward_mean: f64,
    pub episode_len_mean: f64,
    /// Policy entropy, summed over heads.
    pub entropy: f64,
    pub bc_loss: f64,
    /// Per-step means over the flushed buffer, before strength scaling.
    pub gail_reward: f64,
    pub curiosity_reward: f64,
    pub extrinsic_reward: f64,
    pub kl: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.reward_mean,
            self.episode_len_mean,
            self.entropy,
            self.bc_loss,
            self.gail_reward,
            self.curiosity_reward,
            self.extrinsic_reward,
            self.kl,
            self.lr
        )
    }

    pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == METRICS_HEADER => {}
            other => return Err(format!("unexpected metrics header {other:?}")),
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, l)| {
                let v: Vec<&str> = l.split(',').collect();
                if v.len() != 10 {
                    return Err(format!("row {}: {} columns", n + 1, v.len()));
                }
                let f = |i: usize| v[i].trim().parse::<f64>().map_err(|e| format!("row {}: {e}", n + 1));
                Ok(MetricsRow {
                    step: v[0].trim().parse().map_err(|e| format!("row {}: {e}", n + 1))?,
                    reward_mean: f(1)?,
                    episode_len_mean: f(2)?,
                    entropy: f(3)?,
                    bc_loss: f(4)?,
                    gail_reward: f(5)?,
                    curiosity_reward: f(6)?,
                    extrinsic_reward: f(7)?,
                    kl: f(8)?,
                    lr: f(9)?,
                })
            })
            .collect()
    }
}

pub struct TrainSetup {
    pub scenario: ScenarioConfig,
    pub geometry: Arc<WorldGeometry>,
    pub profile: RandomizationProfile,
    pub mode: ParallelMode,
    pub replicas: usize,
    pub workers: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub demos: Option<Demonstrations>,
    /// Metrics CSVs and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policies: Vec<PolicyNet>,
    /// Per policy.
    pub metrics: Vec<Vec<MetricsRow>>,
    pub checkpoints: Vec<PathBuf>,
    pub incidents: Vec<String>,
    /// Coop: family episodes finished and how many had every agent reach its goal.
    pub episodes: u64,
    pub successes: u64,
}

/// Metrics file of policy `p` inside an output directory.
pub fn metrics_path(dir: &Path, policy: usize) -> PathBuf {
    dir.join(format!("metrics_p{policy}.csv"))
}

pub fn checkpoint_path(dir: &Path, policy: usize, tag: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("policy{policy}_{tag}.ckpt"))
}

#[derive(Debug, Clone)]
struct Tuple {
    obs: Vec<f64>,
    action: Action,
    log_prob: f64,
    value: f64,
    extrinsic: f64,
    next_obs: Vec<f64>,
    episode_end: bool,
    next_value: f64,
    successor: Option<usize>,
}

#[derive(Default)]
struct EpisodeStats {
    ret: f64,
    len: f64,
    count: usize,
}

struct PolicySlot {
    learner: PpoLearner,
    gail: Option<Discriminator>,
    icm: Option<Icm>,
    buffer: Vec<Tuple>,
    collected: u64,
    consumed: u64,
    episodes: EpisodeStats,
    rng: SimRng,
    metrics: Vec<MetricsRow>,
    csv: Option<BufWriter<File>>,
    next_checkpoint: u64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn policy_count(scenario: ScenarioKind, family_size: usize) -> usize {
    match scenario {
        ScenarioKind::Coop => 1,
        ScenarioKind::Race => family_size,
    }
}

pub fn policy_of(scenario: ScenarioKind, slot: usize) -> usize {
    match scenario {
        ScenarioKind::Coop => 0,
        ScenarioKind::Race => slot,
    }
}

pub fn train(setup: TrainSetup) -> Result<TrainOutcome, TrainError> {
    let cfg = &setup.config;
    cfg.validate().map_err(TrainError::Config)?;
    let scenario = setup.scenario.scenario;
    let spec = ReplicaSpec::new(setup.mode, setup.replicas, setup.scenario.clone(), setup.profile, setup.seed);
    let mut set = spawn_replicas(&spec, setup.geometry.clone(), setup.workers)?;
    let size = set.family_size();
    let obs_len = set.observation_len();
    let demo_set = match (&setup.demos, cfg.needs_demonstrations()) {
        (None, true) => return Err(LearnError::MissingDemonstrations.into()),
        (Some(d), _) => {
            if d.header.obs_dim != obs_len || d.header.scenario != scenario {
                return Err(TrainError::Config(format!(
                    "demonstrations are {} with {} observations; training {scenario} with {obs_len}",
                    d.header.scenario, d.header.obs_dim
                )));
            }
            Some(DemoSet::from_demonstrations(d))
        }
        (None, false) => None,
    };
    if let Some(dir) = &setup.out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let n_pol = policy_count(scenario, size);
    let mut slots = Vec::new();
    for p in 0..n_pol {
        let mut init = rng_for(setup.seed, STREAM_INIT, p as u64);
        let net = PolicyNet::new(obs_len, scenario, cfg.hidden_units, cfg.num_layers, &mut init);
        let heads = net.heads;
        let csv = match &setup.out_dir {
            Some(dir) => {
                let mut w = BufWriter::new(File::create(metrics_path(dir, p))?);
                writeln!(w, "{METRICS_HEADER}")?;
                Some(w)
            }
            None => None,
        };
        slots.push(PolicySlot {
            learner: PpoLearner::new(net),
            gail: cfg.gail.map(|g| Discriminator::new(obs_len, heads, g.encoding_size, &mut init)),
            icm: cfg.curiosity.map(|c| Icm::new(obs_len, heads, c.encoding_size, &mut init)),
            buffer: Vec::with_capacity(2 * cfg.buffer_size),
            collected: 0,
            consumed: 0,
            episodes: EpisodeStats::default(),
            rng: rng_for(setup.seed, STREAM_UPDATE, p as u64),
            metrics: Vec::new(),
            csv,
            next_checkpoint: cfg.checkpoint_interval,
        });
    }
    let agents = set.agent_count();
    let mut pending: Vec<Option<usize>> = vec![None; agents];
    let mut outcome = TrainOutcome {
        policies: Vec::new(),
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        incidents: Vec::new(),
        episodes: 0,
        successes: 0,
    };
    info!(
        "training {scenario}: {} replicas ({}), {agents} agents, {n_pol} policies, {} steps each",
        setup.replicas, setup.mode, cfg.max_steps
    );
    while slots.iter().any(|s| s.collected < cfg.max_steps) {
        let obs: Vec<Option<Vec<f64>>> = (0..agents)
            .map(|g| set.is_alive(g).then(|| set.observation(g).to_vec()))
            .collect();
        let decisions: Vec<Result<Option<Decision>, LearnError>> = {
            let nets: Vec<&PolicyNet> = slots.iter().map(|s| &s.learner.net).collect();
            let obs = &obs;
            set.par_map_replicas(|_, range, rng| {
                range
                    .map(|g| match &obs[g] {
                        Some(o) => nets[policy_of(scenario, g % size)].sample(o, rng).map(Some),
                        None => Ok(None),
                    })
                    .collect::<Vec<_>>()
            })
            .into_iter()
            .flatten()
            .collect()
        };
        let decisions: Vec<Option<Decision>> = decisions.into_iter().collect::<Result<_, _>>()?;
        let actions: Vec<Option<Action>> = decisions.iter().map(|d| d.map(|d| d.action)).collect();
        let steps = set.step_all(&actions)?;
        for rs in &steps {
            for (s, r) in rs.agents.iter().enumerate() {
                let g = rs.replica * size + s;
                let Some(dec) = decisions[g] else { continue };
                if !r.acted {
                    continue;
                }
                let slot = &mut slots[policy_of(scenario, s)];
                let q = slot.buffer.len();
                if let Some(p) = pending[g].take() {
                    slot.buffer[p].next_value = dec.value;
                    slot.buffer[p].successor = Some(q);
                }
                let episode_end = r.done;
                let next_value = if r.done && r.truncated {
                    slot.learner.net.value(&r.obs)?
                } else {
                    0.0
                };
                slot.buffer.push(Tuple {
                    obs: obs[g].clone().expect("acting agent was alive"),
                    action: dec.action,
                    log_prob: dec.log_prob,
                    value: dec.value,
                    extrinsic: r.reward,
                    next_obs: r.obs.clone(),
                    episode_end,
                    next_value,
                    successor: None,
                });
                slot.collected += 1;
                if !episode_end {
                    pending[g] = Some(q);
                }
            }
            for ep in &rs.episodes {
                outcome.episodes += 1;
                if scenario == ScenarioKind::Coop && ep.causes.iter().all(|c| *c == Termination::Goal) {
                    outcome.successes += 1;
                }
                for s in 0..size {
                    let st = &mut slots[policy_of(scenario, s)].episodes;
                    st.ret += ep.agent_returns[s];
                    st.len += ep.agent_steps[s] as f64;
                    st.count += 1;
                }
            }
        }
        for p in 0..n_pol {
            while slots[p].buffer.len() >= cfg.buffer_size {
                flush(p, &mut slots, &mut pending, &set, scenario, size, cfg, demo_set.as_ref(), &setup, &mut outcome)?;
            }
        }
    }
    for (p, slot) in slots.iter_mut().enumerate() {
        if let Some(dir) = &setup.out_dir {
            let path = checkpoint_path(dir, p, "final");
            Checkpoint::from_policy(&slot.learner.net, slot.consumed, p).save(&path)?;
            outcome.checkpoints.push(path);
        }
        if let Some(w) = &mut slot.csv {
            w.flush()?;
        }
    }
    outcome.metrics = slots.iter().map(|s| s.metrics.clone()).collect();
    outcome.policies = slots.into_iter().map(|s| s.learner.net).collect();
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn flush(
    p: usize,
    slots: &mut [PolicySlot],
    pending: &mut [Option<usize>],
    set: &crate::replica::ReplicaSet,
    scenario: ScenarioKind,
    size: usize,
    cfg: &TrainConfig,
    demos: Option<&DemoSet>,
    setup: &TrainSetup,
    outcome: &mut TrainOutcome,
) -> Result<(), TrainError> {
    let n = cfg.buffer_size;
    let slot = &mut slots[p];
    // Bootstrap agents whose last flushed transition has no successor yet.
    for (g, pend) in pending.iter_mut().enumerate() {
        if policy_of(scenario, g % size) != p {
            continue;
        }
        if let Some(i) = *pend {
            if i < n {
                slot.buffer[i].next_value = slot.learner.net.value(set.observation(g))?;
                *pend = None;
            } else {
                *pend = Some(i - n);
            }
        }
    }
    let mut batch: Vec<Tuple> = slot.buffer.drain(..n).collect();
    for t in &mut slot.buffer {
        t.successor = t.successor.map(|s| s - n);
    }
    for t in &mut batch {
        t.successor = t.successor.filter(|&s| s < n);
    }
    let gail_r: Vec<f64> = match &slot.gail {
        Some(d) => batch.iter().map(|t| d.reward(&t.obs, t.action)).collect(),
        None => vec![0.0; n],
    };
    let cur_r: Vec<f64> = match &slot.icm {
        Some(icm) => batch
            .iter()
            .map(|t| {
                icm.reward(&IcmSample {
                    obs: &t.obs,
                    action: t.action,
                    next_obs: &t.next_obs,
                })
            })
            .collect(),
        None => vec![0.0; n],
    };
    let gae_in: Vec<GaeStep> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| GaeStep {
            reward: aggregate_rewards(t.extrinsic, gail_r[i], cur_r[i], cfg),
            value: t.value,
            next_value: t.next_value,
            episode_end: t.episode_end,
            next: t.successor,
        })
        .collect();
    let (adv, ret) = gae(&gae_in, cfg.gamma, cfg.lambda);
    let mut samples: Vec<Sample> = batch
        .iter()
        .zip(adv.iter().zip(&ret))
        .map(|(t, (&a, &r))| Sample {
            obs: t.obs.clone(),
            action: t.action,
            log_prob: t.log_prob,
            advantage: a,
            ret: r,
        })
        .collect();
    let lr = cfg.lr_at(slot.consumed);
    let report = match slot.learner.update(&mut samples, demos, cfg, lr, &mut slot.rng) {
        Ok(r) => Some(r),
        Err(e @ LearnError::NonFiniteLoss { .. }) => {
            warn!("policy {p} at step {}: {e}", slot.consumed);
            outcome.incidents.push(format!("policy {p} step {}: {e}", slot.consumed));
            None
        }
        Err(e) => return Err(e.into()),
    };
    let policy_obs: Vec<&[f64]> = batch.iter().map(|t| t.obs.as_slice()).collect();
    let policy_actions: Vec<Action> = batch.iter().map(|t| t.action).collect();
    if let (Some(d), Some(gcfg), Some(demo)) = (&mut slot.gail, cfg.gail, demos) {
        if let Err(e) = d.train(&demo.obs, &demo.actions, &policy_obs, &policy_actions, &gcfg, cfg.num_epoch, cfg.batch_size, &mut slot.rng) {
            warn!("policy {p}: {e}");
            outcome.incidents.push(format!("policy {p} step {}: {e}", slot.consumed));
        }
    }
    if let (Some(icm), Some(ccfg)) = (&mut slot.icm, cfg.curiosity) {
        let icm_samples: Vec<IcmSample> = batch
            .iter()
            .map(|t| IcmSample {
                obs: &t.obs,
                action: t.action,
                next_obs: &t.next_obs,
            })
            .collect();
        if let Err(e) = icm.train(&icm_samples, &ccfg, cfg.num_epoch, cfg.batch_size, &mut slot.rng) {
            warn!("policy {p}: {e}");
            outcome.incidents.push(format!("policy {p} step {}: {e}", slot.consumed));
        }
    }
    slot.consumed += n as u64;
    let ep = std::mem::take(&mut slot.episodes);
    let (reward_mean, episode_len_mean) = if ep.count == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (ep.ret / ep.count as f64, ep.len / ep.count as f64)
    };
    let row = MetricsRow {
        step: slot.consumed,
        reward_mean,
        episode_len_mean,
        entropy: report.map_or(f64::NAN, |r| r.entropy),
        bc_loss: report.and_then(|r| r.bc_loss).unwrap_or(f64::NAN),
        gail_reward: if slot.gail.is_some() { mean(gail_r.iter().copied()) } else { f64::NAN },
        curiosity_reward: if slot.icm.is_some() { mean(cur_r.iter().copied()) } else { f64::NAN },
        extrinsic_reward: mean(batch.iter().map(|t| t.extrinsic)),
        kl: report.map_or(f64::NAN, |r| r.approx_kl),
        lr,
    };
    if let Some(w) = &mut slot.csv {
        writeln!(w, "{}", row.csv_line())?;
        w.flush()?;
    }
    info!(
        "policy {p} step {}: reward {:.3} entropy {:.3} kl {:.4}",
        row.step, row.reward_mean, row.entropy, row.kl
    );
    slot.metrics.push(row);
    if cfg.checkpoint_interval > 0 && slot.consumed >= slot.next_checkpoint {
        slot.next_checkpoint += cfg.checkpoint_interval;
        if let Some(dir) = &setup.out_dir {
            let path = checkpoint_path(dir, p, &format!("step{}", slot.consumed));
            Checkpoint::from_policy(&slot.learner.net, slot.consumed, p).save(&path)?;
            outcome.checkpoints.push(path);
        }
    }
    Ok(())
}
