//! Policy evaluation, per-episode KPIs, summary statistics and the
//! sim-to-real gap.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LearnError, ReplicaError, ScenarioError};
use crate::fgm::{fgm_coop_policy, fgm_race_policy, FgmConfig};
use crate::geometry::WorldGeometry;
use crate::policy::PolicyNet;
use crate::randomization::{RandomizationProfile, ReplicaDynamics};
use crate::vehicle::{Action, ScenarioKind, VehicleState};
use crate::world::{EpisodeSummary, ScenarioConfig, World};
use crate::{rng_for, SimRng};

/// Stream id for action sampling during evaluation, indexed by episode.
pub const STREAM_EVAL: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Replica(#[from] ReplicaError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Realm {
    Sim,
    /// Physical slot driven through the digital-twin loop.
    Twin,
}

impl fmt::Display for Realm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Realm::Sim => "sim",
            Realm::Twin => "twin",
        })
    }
}

impl std::str::FromStr for Realm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(Realm::Sim),
            "twin" => Ok(Realm::Twin),
            o => Err(format!("unknown realm `{o}` (expected sim|twin)")),
        }
    }
}

/// Who picks the actions.
#[derive(Debug, Clone)]
pub enum Driver {
    /// One network per policy (race: per slot).
    Policy { nets: Vec<PolicyNet>, greedy: bool },
    Fgm(FgmConfig),
    /// Uniformly random indices; the baseline for learning-progress checks.
    Uniform,
}

impl Driver {
    pub fn check(&self, scenario: ScenarioKind, obs_len: usize, family_size: usize) -> Result<(), EvalError> {
        if let Driver::Fgm(cfg) = self {
            let levels = scenario.action_dims()[0];
            if cfg.fast_throttle >= levels || cfg.slow_throttle >= levels {
                return Err(EvalError::Invalid(format!("follow-the-gap throttle indices exceed the {levels} {scenario} levels")));
            }
            cfg.validate().map_err(EvalError::Invalid)?;
        }
        if let Driver::Policy { nets, .. } = self {
            let need = crate::train::policy_count(scenario, family_size);
            if nets.len() != need {
                return Err(EvalError::Invalid(format!("{scenario} needs {need} policies, got {}", nets.len())));
            }
            for n in nets {
                if n.scenario != scenario {
                    return Err(EvalError::Invalid(format!("checkpoint is for {}, scenario is {scenario}", n.scenario)));
                }
                if n.obs_len() != obs_len {
                    return Err(LearnError::ObservationWidth {
                        expected: n.obs_len(),
                        got: obs_len,
                    }
                    .into());
                }
            }
        }
        Ok(())
    }

    /// Action of slot `slot`; `ego` is the agent's own state estimate (only
    /// the intersection follow-the-gap adapter reads its yaw).
    pub fn act(&self, scenario: ScenarioKind, slot: usize, obs: &[f64], ego: &VehicleState, rng: &mut SimRng) -> Result<Action, LearnError> {
        Ok(match self {
            Driver::Policy { nets, greedy } => {
                let net = &nets[crate::train::policy_of(scenario, slot)];
                if *greedy {
                    net.greedy(obs)?
                } else {
                    net.sample(obs, rng)?.action
                }
            }
            Driver::Fgm(cfg) => match scenario {
                ScenarioKind::Coop => fgm_coop_policy(obs, ego.yaw_rad, cfg),
                ScenarioKind::Race => fgm_race_policy(obs, cfg),
            },
            Driver::Uniform => {
                let [a, b] = scenario.action_dims();
                Action::new(rng.random_range(0..a), rng.random_range(0..b))
            }
        })
    }
}

/// One KPI observation: an intersection episode (all agents aggregated) or
/// one racer in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiRecord {
    pub scenario: ScenarioKind,
    pub policy: String,
    pub realm: Realm,
    pub episode: usize,
    /// Race: the agent; intersection: `None`.
    pub agent: Option<usize>,
    /// Intersection: every agent reached its goal. Race: this agent won.
    pub success: bool,
    pub reward: f64,
    pub duration: f64,
}

pub const KPI_NAMES: [&str; 3] = ["success", "reward", "duration"];

impl KpiRecord {
    pub fn value(&self, kpi: &str) -> f64 {
        match kpi {
            "success" => f64::from(u8::from(self.success)),
            "reward" => self.reward,
            "duration" => self.duration,
            other => panic!("unknown KPI {other}"),
        }
    }
}

/// KPI records of one finished episode.
pub fn records_from_summary(s: &EpisodeSummary, scenario: ScenarioKind, policy: &str, realm: Realm, episode: usize) -> Vec<KpiRecord> {
    match scenario {
        ScenarioKind::Coop => vec![KpiRecord {
            scenario,
            policy: policy.to_string(),
            realm,
            episode,
            agent: None,
            success: s.all_reached_goal(),
            reward: s.agent_returns.iter().sum(),
            duration: s.steps as f64,
        }],
        ScenarioKind::Race => (0..s.agent_returns.len())
            .map(|a| KpiRecord {
                scenario,
                policy: policy.to_string(),
                realm,
                episode,
                agent: Some(a),
                success: s.winner == Some(a),
                reward: s.agent_returns[a],
                duration: s.agent_steps[a] as f64,
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub label: String,
}

/// Run `opts.episodes` episodes of one family in pure simulation.
pub fn evaluate_sim(
    cfg: &ScenarioConfig,
    geometry: Arc<WorldGeometry>,
    profile: RandomizationProfile,
    driver: &Driver,
    opts: &EvalOptions,
) -> Result<Vec<KpiRecord>, EvalError> {
    let mut world = World::single(cfg.clone(), geometry, profile, opts.seed, ReplicaDynamics::default())?;
    driver.check(cfg.scenario, world.observation_len(), world.family_size())?;
    let n = world.agent_count();
    let mut out = Vec::new();
    for ep in 0..opts.episodes {
        let mut rng = rng_for(opts.seed, STREAM_EVAL, ep as u64);
        loop {
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                actions.push(if world.is_alive(i) {
                    Some(driver.act(cfg.scenario, i, world.observation(i), &world.state(i), &mut rng)?)
                } else {
                    None
                });
            }
            let report = world.step(&actions)?;
            if let Some(s) = report.episodes.first() {
                out.extend(records_from_summary(s, cfg.scenario, &opts.label, Realm::Sim, ep));
                break;
            }
        }
    }
    Ok(out)
}

/// Quantile with linear interpolation between closest ranks
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl KpiStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

/// Summary key: policy, realm, KPI, agent (race only).
pub type SummaryKey = (String, Realm, String, Option<usize>);

pub fn summarize(records: &[KpiRecord]) -> Result<BTreeMap<SummaryKey, KpiStats>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Invalid("no KPI records to summarize".into()));
    }
    let scenario = records[0].scenario;
    if let Some(r) = records.iter().find(|r| r.scenario != scenario) {
        return Err(EvalError::Invalid(format!(
            "records mix scenarios ({scenario} and {}); report one scenario at a time",
            r.scenario
        )));
    }
    let mut groups: BTreeMap<SummaryKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        for k in KPI_NAMES {
            groups
                .entry((r.policy.clone(), r.realm, k.to_string(), r.agent))
                .or_default()
                .push(r.value(k));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(k, v)| (k, KpiStats::of(&v).expect("groups are never empty")))
        .collect())
}

/// Mean relative difference between simulated and twin KPIs, in percent.
/// KPIs whose simulated value is exactly zero are skipped with a warning.
pub fn sim2real_gap(sim: &[(String, f64)], twin: &[(String, f64)]) -> Result<f64, EvalError> {
    if sim.len() != twin.len() || sim.iter().any(|(k, _)| !twin.iter().any(|(t, _)| t == k)) {
        return Err(EvalError::Invalid("sim and twin KPI sets differ".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (k, s) in sim {
        let t = twin.iter().find(|(n, _)| n == k).map(|(_, v)| *v).expect("checked above");
        if *s == 0.0 {
            warn!("KPI `{k}` is zero in simulation; skipped in the gap");
            continue;
        }
        total += (s - t).abs() / s.abs();
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::Invalid("every simulated KPI is zero; gap undefined".into()));
    }
    Ok(100.0 * total / used as f64)
}

/// KPI means of one policy in one realm, keyed as `kpi` or `kpi/agentN`.
pub fn kpi_means(stats: &BTreeMap<SummaryKey, KpiStats>, policy: &str, realm: Realm) -> Vec<(String, f64)> {
    stats
        .iter()
        .filter(|((p, r, _, _), _)| p == policy && *r == realm)
        .map(|((_, _, k, a), s)| {
            let name = match a {
                Some(a) => format!("{k}/agent{a}"),
                None => k.clone(),
            };
            (name, s.mean)
        })
        .collect()
}

pub const RECORDS_HEADER: &str = "scenario,policy,realm,episode,agent,success,reward,duration";
pub const SUMMARY_HEADER: &str = "policy,realm,kpi,agent,n,mean,median,q1,q3,min,max";
pub const GAP_HEADER: &str = "policy,gap_pct";

pub fn records_csv(records: &[KpiRecord]) -> String {
    let mut s = format!("{RECORDS_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.policy,
            r.realm,
            r.episode,
            r.agent.map_or(String::new(), |a| a.to_string()),
            u8::from(r.success),
            r.reward,
            r.duration
        ));
    }
    s
}

pub fn parse_records_csv(text: &str) -> Result<Vec<KpiRecord>, EvalError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RECORDS_HEADER) {
        return Err(EvalError::Invalid(format!("KPI file must start with `{RECORDS_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let bad = |m: String| EvalError::Invalid(format!("KPI row {}: {m}", n + 1));
            let v: Vec<&str> = l.split(',').map(str::trim).collect();
            if v.len() != 8 {
                return Err(bad(format!("{} columns, expected 8", v.len())));
            }
            Ok(KpiRecord {
                scenario: v[0].parse().map_err(bad)?,
                policy: v[1].to_string(),
                realm: v[2].parse().map_err(bad)?,
                episode: v[3].parse().map_err(|e| bad(format!("{e}")))?,
                agent: if v[4].is_empty() {
                    None
                } else {
                    Some(v[4].parse().map_err(|e| bad(format!("{e}")))?)
                },
                success: match v[5] {
                    "0" => false,
                    "1" => true,
                    o => return Err(bad(format!("success must be 0 or 1, got {o}"))),
                },
                reward: v[6].parse().map_err(|e| bad(format!("{e}")))?,
                duration: v[7].parse().map_err(|e| bad(format!("{e}")))?,
            })
        })
        .collect()
}

pub fn summary_csv(stats: &BTreeMap<SummaryKey, KpiStats>) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for ((p, r, k, a), st) in stats {
        s.push_str(&format!(
            "{p},{r},{k},{},{},{},{},{},{},{},{}\n",
            a.map_or(String::new(), |a| a.to_string()),
            st.n,
            st.mean,
            st.median,
            st.q1,
            st.q3,
            st.min,
            st.max
        ));
    }
    s
}

/// Gap per policy that has both realms.
pub fn gap_table(stats: &BTreeMap<SummaryKey, KpiStats>) -> Vec<(String, Result<f64, EvalError>)> {
    let mut policies: Vec<&String> = stats.keys().map(|(p, _, _, _)| p).collect();
    policies.dedup();
    policies
        .into_iter()
        .filter(|p| stats.keys().any(|(q, r, _, _)| q == *p && *r == Realm::Twin) && stats.keys().any(|(q, r, _, _)| q == *p && *r == Realm::Sim))
        .map(|p| (p.clone(), sim2real_gap(&kpi_means(stats, p, Realm::Sim), &kpi_means(stats, p, Realm::Twin))))
        .collect()
}
