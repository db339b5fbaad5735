//! Single-agent demonstration recording for behavioral cloning and GAIL.
//!
//! File format: line-delimited JSON. The first record is a header; then one
//! `step` record per control step and a `lap` record after every completed
//! lap. Unknown fields are rejected so schema drift is caught on load.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DemoError, FileFormatError};
use crate::geometry::WorldGeometry;
use crate::randomization::{Degree, RandomizationProfile, ReplicaDynamics};
use crate::vehicle::{decode_action, step_vehicle, Action, ScenarioKind, VehicleParams, VehicleState};
use crate::world::{Event, ScenarioConfig, World};

pub const DEMO_SCHEMA: &str = "twinmarl-demonstrations";
pub const DEMO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoHeader {
    pub schema: String,
    pub version: u32,
    pub scenario: ScenarioKind,
    pub obs_dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub laps_requested: usize,
    /// Initial state, for open-loop replay.
    pub spawn: VehicleState,
    pub vehicle: VehicleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoStep {
    pub step: usize,
    pub obs: Vec<f64>,
    pub action: [usize; 2],
    /// State after the action was applied.
    pub state: VehicleState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LapMarker {
    pub lap: usize,
    /// Index of the step record that completed the lap.
    pub step: usize,
    pub lap_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum DemoRecord {
    Header(DemoHeader),
    Step(DemoStep),
    Lap(LapMarker),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstrations {
    pub header: DemoHeader,
    pub steps: Vec<DemoStep>,
    pub laps: Vec<LapMarker>,
}

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observations(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.obs.as_slice()).collect()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| Action::new(s.action[0], s.action[1])).collect()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), FileFormatError> {
        let mut w = BufWriter::new(w);
        let mut line = |rec: &DemoRecord| -> Result<(), FileFormatError> {
            serde_json::to_writer(&mut w, rec).map_err(|e| FileFormatError::Invalid(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&DemoRecord::Header(self.header.clone()))?;
        let mut laps = self.laps.iter().peekable();
        for s in &self.steps {
            line(&DemoRecord::Step(s.clone()))?;
            while let Some(l) = laps.next_if(|l| l.step == s.step) {
                line(&DemoRecord::Lap(l.clone()))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), FileFormatError> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self, FileFormatError> {
        let mut header: Option<DemoHeader> = None;
        let mut steps: Vec<DemoStep> = Vec::new();
        let mut laps = Vec::new();
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| FileFormatError::Record { line: lineno, message };
            let rec: DemoRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            match (rec, &header) {
                (DemoRecord::Header(h), None) => {
                    if h.schema != DEMO_SCHEMA || h.version != DEMO_VERSION {
                        return Err(bad(format!(
                            "unsupported schema {} v{} (expected {DEMO_SCHEMA} v{DEMO_VERSION})",
                            h.schema, h.version
                        )));
                    }
                    header = Some(h);
                }
                (DemoRecord::Header(_), Some(_)) => return Err(bad("duplicate header".into())),
                (_, None) => return Err(bad("first record must be the header".into())),
                (DemoRecord::Step(s), Some(h)) => {
                    if s.obs.len() != h.obs_dim {
                        return Err(bad(format!("observation has {} values, header says {}", s.obs.len(), h.obs_dim)));
                    }
                    if s.obs.iter().any(|v| !v.is_finite()) {
                        return Err(bad("non-finite observation".into()));
                    }
                    decode_action(s.action[0], s.action[1], h.scenario).map_err(|e| bad(e.to_string()))?;
                    if s.step != steps.len() {
                        return Err(bad(format!("step {} out of sequence (expected {})", s.step, steps.len())));
                    }
                    steps.push(s);
                }
                (DemoRecord::Lap(l), Some(_)) => {
                    if l.step + 1 != steps.len() || l.lap != laps.len() + 1 {
                        return Err(bad(format!("lap marker {} does not follow its step", l.lap)));
                    }
                    laps.push(l);
                }
            }
        }
        let header = header.ok_or_else(|| FileFormatError::Invalid("empty demonstration file".into()))?;
        if steps.is_empty() || laps.is_empty() {
            return Err(FileFormatError::Invalid("demonstration file holds no complete lap".into()));
        }
        Ok(Self { header, steps, laps })
    }

    pub fn load(path: &Path) -> Result<Self, FileFormatError> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Re-run the recorded actions open-loop from the recorded spawn.
    pub fn replay(&self) -> Result<Vec<VehicleState>, DemoError> {
        let mut s = self.header.spawn;
        let mut out = Vec::with_capacity(self.steps.len());
        for st in &self.steps {
            let (t, d) = decode_action(st.action[0], st.action[1], self.header.scenario)
                .map_err(|e| DemoError::Scenario(e.into()))?;
            s = step_vehicle(&s, t, d, &self.header.vehicle, self.header.dt).map_err(|e| DemoError::Scenario(e.into()))?;
            out.push(s);
        }
        Ok(out)
    }
}

/// Drive a lone racer with `driver` until `laps` laps are complete.
/// A crash or an exhausted step budget rejects the whole recording.
pub fn record_demonstrations(
    cfg: &ScenarioConfig,
    geometry: &WorldGeometry,
    seed: u64,
    laps: usize,
    max_steps: usize,
    driver: &mut dyn FnMut(&[f64]) -> Action,
) -> Result<Demonstrations, DemoError> {
    if laps == 0 {
        return Err(DemoError::ZeroLaps);
    }
    let mut geo = geometry.clone();
    geo.spawns.truncate(1);
    let mut cfg = cfg.clone();
    cfg.horizon_steps = max_steps;
    let mut world = World::single(
        cfg.clone(),
        Arc::new(geo),
        RandomizationProfile::new(Degree::Ndr),
        seed,
        ReplicaDynamics::default(),
    )?;
    let header = DemoHeader {
        schema: DEMO_SCHEMA.into(),
        version: DEMO_VERSION,
        scenario: cfg.scenario,
        obs_dim: world.observation_len(),
        dt: cfg.dt,
        seed,
        laps_requested: laps,
        spawn: world.state(0),
        vehicle: cfg.vehicle,
    };
    let mut steps = Vec::new();
    let mut markers = Vec::new();
    for step in 0..max_steps {
        let obs = world.observation(0).to_vec();
        let action = driver(&obs);
        let report = world.step(&[Some(action)])?;
        let r = &report.agents[0];
        if r.done && !r.truncated {
            return Err(DemoError::Crashed {
                step,
                completed: markers.len(),
                requested: laps,
            });
        }
        steps.push(DemoStep {
            step,
            obs,
            action: action.indices(),
            state: world.state(0),
        });
        if matches!(r.event, Event::Lap | Event::BestLap) {
            let lap_steps = *world.race_progress(0).lap_times.last().expect("lap just completed");
            markers.push(LapMarker {
                lap: markers.len() + 1,
                step,
                lap_steps,
            });
            if markers.len() == laps {
                return Ok(Demonstrations {
                    header,
                    steps,
                    laps: markers,
                });
            }
        }
    }
    Err(DemoError::Incomplete {
        steps: max_steps,
        completed: markers.len(),
        requested: laps,
    })
}
