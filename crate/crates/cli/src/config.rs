//! The experiment configuration file: one JSON document whose defaults are
//! the published hyperparameters. Omitted sections take their defaults;
//! unknown fields are errors.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use twinmarl_core::fgm::FgmConfig;
use twinmarl_core::geometry::WorldGeometry;
use twinmarl_core::ppo::TrainConfig;
use twinmarl_core::randomization::{Degree, RandomizationProfile};
use twinmarl_core::replica::ParallelMode;
use twinmarl_core::vehicle::{DynamicsOffsets, ScenarioKind};
use twinmarl_core::world::ScenarioConfig;
use twinmarl_twin::emulator::{EstimationNoise, LatencyConfig};
use twinmarl_twin::{Clock, PlantEmulatorConfig, ServerOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    /// Randomization degree used for training.
    pub randomization: Degree,
    pub seed: u64,
    /// Scenario parameters; defaults follow `scenario`.
    pub sim: Option<ScenarioConfig>,
    /// Geometry JSON file; the built-in layout when absent.
    pub geometry_path: Option<PathBuf>,
    pub train: Option<TrainConfig>,
    pub parallel: ParallelSettings,
    pub fgm: Option<FgmConfig>,
    pub evaluation: EvalSettings,
    pub twin: TwinSettings,
    pub demo: DemoSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Coop,
            randomization: Degree::Ndr,
            seed: 0,
            sim: None,
            geometry_path: None,
            train: None,
            parallel: ParallelSettings::default(),
            fgm: None,
            evaluation: EvalSettings::default(),
            twin: TwinSettings::default(),
            demo: DemoSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelSettings {
    pub mode: ParallelMode,
    /// Replica count; defaults to the dynamics-grid size under
    /// randomization and to 4 otherwise.
    pub replicas: Option<usize>,
    /// Worker threads; results do not depend on it.
    pub workers: Option<usize>,
}

impl Default for ParallelSettings {
    fn default() -> Self {
        Self {
            mode: ParallelMode::Environments,
            replicas: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    /// Pick the most likely action instead of sampling.
    pub greedy: bool,
    /// Randomization of the simulated realm during evaluation.
    pub randomization: Degree,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 16,
            greedy: false,
            randomization: Degree::Ndr,
        }
    }
}

/// The physical vehicle stand-in and the server loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinSettings {
    pub period_s: f64,
    pub sync_timeout_ticks: u32,
    pub clock: Clock,
    pub plant_offsets: DynamicsOffsets,
    pub estimation_noise: EstimationNoise,
    pub latency: LatencyConfig,
    pub plant_seed: u64,
    pub connect_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for TwinSettings {
    fn default() -> Self {
        Self {
            period_s: twinmarl_core::vehicle::DEFAULT_DT,
            sync_timeout_ticks: 3,
            clock: Clock::Stepped,
            plant_offsets: DynamicsOffsets {
                cg_m: [0.01, 0.0, 0.0],
                suspension_npm: 20.0,
                cornering_nprad: -2.0,
                friction: -0.03,
            },
            estimation_noise: EstimationNoise {
                position_var_m2: 1e-4,
                yaw_var_rad2: 1e-4,
                speed_var_m2ps2: 1e-4,
            },
            latency: LatencyConfig {
                mean_s: 0.02,
                jitter_s: 0.005,
            },
            plant_seed: 1,
            connect_attempts: 5,
            backoff_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSettings {
    pub laps: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self {
            laps: 5,
            max_steps: 20_000,
            seed: 1,
        }
    }
}

/// Command-line overrides of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<ScenarioKind>,
    pub randomization: Option<Degree>,
    pub seed: Option<u64>,
}

/// Parse with field-level diagnostics (`train.batch_size: invalid type ...`).
pub fn parse_config(text: &str) -> anyhow::Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
    })
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            // a run manifest works as a config: its `config` member is used
            if let Ok(m) = serde_json::from_str::<crate::manifest::Manifest>(&text) {
                return Ok(m.config);
            }
            parse_config(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

impl ExperimentConfig {
    /// Apply overrides, fill every defaulted section and validate. The
    /// result serializes to a file that reproduces the run.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(s) = o.scenario {
            self.scenario = s;
        }
        if let Some(d) = o.randomization {
            self.randomization = d;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        let scenario = self.scenario;
        let sim = self.sim.get_or_insert_with(|| ScenarioConfig::for_scenario(scenario));
        if sim.scenario != scenario {
            bail!("config field `sim.scenario`: is {} but the run is {scenario}", sim.scenario);
        }
        let train = self.train.get_or_insert_with(|| TrainConfig::for_scenario(scenario));
        train.validate().map_err(|e| anyhow::anyhow!("config field `train`: {e}"))?;
        let fgm = self.fgm.get_or_insert_with(|| match scenario {
            ScenarioKind::Coop => FgmConfig::coop(),
            ScenarioKind::Race => FgmConfig::race(),
        });
        fgm.validate().map_err(|e| anyhow::anyhow!("config field `fgm`: {e}"))?;
        let profile = RandomizationProfile::new(self.randomization);
        let replicas = *self.parallel.replicas.get_or_insert(if profile.is_active() {
            profile.grids.cardinality(scenario)
        } else {
            4
        });
        if replicas == 0 {
            bail!("config field `parallel.replicas`: must be at least 1");
        }
        profile
            .assign_replica_dynamics(scenario, replicas)
            .map_err(|e| anyhow::anyhow!("config field `parallel.replicas`: {e}"))?;
        self.parallel
            .workers
            .get_or_insert_with(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if self.evaluation.episodes == 0 {
            bail!("config field `evaluation.episodes`: must be at least 1");
        }
        if self.twin.sync_timeout_ticks == 0 {
            bail!("config field `twin.sync_timeout_ticks`: must be at least 1");
        }
        self.plant_config().validate().map_err(|e| anyhow::anyhow!("config field `twin`: {e}"))?;
        if self.demo.laps == 0 {
            bail!("config field `demo.laps`: must be at least 1");
        }
        Ok(self)
    }

    pub fn sim(&self) -> &ScenarioConfig {
        self.sim.as_ref().expect("resolved config")
    }

    pub fn train(&self) -> &TrainConfig {
        self.train.as_ref().expect("resolved config")
    }

    pub fn fgm(&self) -> FgmConfig {
        self.fgm.expect("resolved config")
    }

    pub fn replicas(&self) -> usize {
        self.parallel.replicas.expect("resolved config")
    }

    pub fn workers(&self) -> usize {
        self.parallel.workers.expect("resolved config")
    }

    pub fn profile(&self) -> RandomizationProfile {
        RandomizationProfile::new(self.randomization)
    }

    pub fn geometry(&self) -> anyhow::Result<Arc<WorldGeometry>> {
        let g = match &self.geometry_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading geometry {}", p.display()))?;
                WorldGeometry::from_json_str(&text).with_context(|| format!("geometry {}", p.display()))?
            }
            None => self.sim().default_geometry()?,
        };
        Ok(Arc::new(g))
    }

    pub fn plant_config(&self) -> PlantEmulatorConfig {
        let t = &self.twin;
        let sim = self.sim.clone().unwrap_or_else(|| ScenarioConfig::for_scenario(self.scenario));
        PlantEmulatorConfig {
            scenario: self.scenario,
            vehicle: sim.vehicle,
            offsets: t.plant_offsets,
            noise: t.estimation_noise,
            latency: t.latency,
            period_s: t.period_s,
            clock: t.clock,
            seed: t.plant_seed,
            connect_attempts: t.connect_attempts,
            backoff_ms: t.backoff_ms,
            log_path: None,
        }
    }

    pub fn server_options(&self) -> ServerOptions {
        ServerOptions {
            period: Duration::from_secs_f64(self.twin.period_s),
            sync_timeout_ticks: self.twin.sync_timeout_ticks,
            clock: self.twin.clock,
            trace: None,
            accept_timeout: Duration::from_secs(30),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let c = parse_config("{}").unwrap().resolve(&Overrides::default()).unwrap();
        assert_eq!(c.train().batch_size, 64);
        assert_eq!(c.replicas(), 4);
        assert_eq!(c.evaluation.episodes, 16);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let e = parse_config(r#"{"train": {"batch_size": "x"}}"#).unwrap_err();
        assert!(e.to_string().contains("train.batch_size"), "{e}");
        let e = parse_config(r#"{"trian": {}}"#).unwrap_err();
        assert!(e.to_string().contains("trian"), "{e}");
    }

    #[test]
    fn randomized_runs_default_to_the_grid_size() {
        let o = Overrides {
            randomization: Some(Degree::Ldr),
            ..Overrides::default()
        };
        assert_eq!(ExperimentConfig::default().resolve(&o).unwrap().replicas(), 25);
        let o = Overrides {
            scenario: Some(ScenarioKind::Race),
            randomization: Some(Degree::Hdr),
            ..Overrides::default()
        };
        assert_eq!(ExperimentConfig::default().resolve(&o).unwrap().replicas(), 10);
    }

    #[test]
    fn resolved_config_roundtrips() {
        let c = ExperimentConfig::default().resolve(&Overrides::default()).unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap().resolve(&Overrides::default()).unwrap(), c);
    }
}
