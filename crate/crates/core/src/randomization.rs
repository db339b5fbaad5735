//! Systematic domain randomization.
//!
//! Two families of perturbation, both scaled by the degree `xi`:
//! per-step Gaussian noise on observations and actions (`xi * N(0, sigma^2)`,
//! so `xi` multiplies the sample), and per-replica dynamics offsets taken
//! from fixed grids (`xi * [a : s : b]`, replica `i` gets grid point `i`).
//!
//! With `xi = 0` nothing is drawn from the random stream, so the layer is an
//! exact no-op.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::RandomizationError;
use crate::vehicle::{DynamicsOffsets, ScenarioKind, DEFAULT_DT};

/// NDR / LDR / HDR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degree {
    Ndr,
    Ldr,
    Hdr,
}

impl Degree {
    pub fn xi(self) -> f64 {
        match self {
            Degree::Ndr => 0.0,
            Degree::Ldr => 1.0,
            Degree::Hdr => 2.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Degree::Ndr => "ndr",
            Degree::Ldr => "ldr",
            Degree::Hdr => "hdr",
        }
    }

    pub const ALL: [Degree; 3] = [Degree::Ndr, Degree::Ldr, Degree::Hdr];
}

impl std::str::FromStr for Degree {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ndr" => Ok(Degree::Ndr),
            "ldr" => Ok(Degree::Ldr),
            "hdr" => Ok(Degree::Hdr),
            other => Err(format!("unknown randomization degree `{other}` (expected ndr|ldr|hdr)")),
        }
    }
}

impl std::fmt::Display for Degree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Noise variances at `xi = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseVariances {
    pub position_m2: f64,
    pub orientation_rad2: f64,
    pub velocity_mps2: f64,
    pub lidar_m2: f64,
    /// Normalized-command units (full scale = 1).
    pub throttle: f64,
    pub steering: f64,
}

impl Default for NoiseVariances {
    fn default() -> Self {
        Self {
            position_m2: 1e-4,
            orientation_rad2: 3.0625e-4,
            velocity_mps2: 1e-4,
            lidar_m2: 1e-6,
            throttle: 2.5e-3,
            steering: 2.5e-3,
        }
    }
}

/// `[start : step : end]` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub step: f64,
    pub end: f64,
}

impl Grid {
    pub const fn new(start: f64, step: f64, end: f64) -> Self {
        Self { start, step, end }
    }

    /// Number of points. The published steps are rounded values of
    /// `(end - start) / (n - 1)`, so the count is rounded rather than floored.
    pub fn len(&self) -> usize {
        ((self.end - self.start) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    fn check(&self) -> Result<(), RandomizationError> {
        if !(self.step > 0.0 && self.end >= self.start && self.start.is_finite() && self.end.is_finite()) {
            return Err(RandomizationError::BadGrid {
                start: self.start,
                step: self.step,
                end: self.end,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsGrids {
    /// Applied to all three center-of-mass axes with the same index.
    pub cg_m: Grid,
    pub suspension_npm: Grid,
    pub tire_nprad: Grid,
    pub friction: Grid,
    pub comm_delay_s: Grid,
}

impl DynamicsGrids {
    /// Replica count a randomized run of `scenario` needs: the size of the
    /// grids that scenario perturbs.
    pub fn cardinality(&self, scenario: ScenarioKind) -> usize {
        match scenario {
            ScenarioKind::Coop => self.friction.len(),
            ScenarioKind::Race => self.cg_m.len(),
        }
    }
}

impl Default for DynamicsGrids {
    fn default() -> Self {
        Self {
            cg_m: Grid::new(-5e-2, 1.11e-2, 5e-2),
            suspension_npm: Grid::new(-100.0, 22.22, 100.0),
            tire_nprad: Grid::new(-2.5, 5.6e-1, 2.5),
            friction: Grid::new(-1e-1, 8.33e-3, 1e-1),
            comm_delay_s: Grid::new(0.0, 4.17e-4, 1e-2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationProfile {
    pub degree: Degree,
    pub noise: NoiseVariances,
    pub grids: DynamicsGrids,
}

impl Default for RandomizationProfile {
    fn default() -> Self {
        Self::new(Degree::Ndr)
    }
}

impl RandomizationProfile {
    pub fn new(degree: Degree) -> Self {
        Self {
            degree,
            noise: NoiseVariances::default(),
            grids: DynamicsGrids::default(),
        }
    }

    pub fn xi(&self) -> f64 {
        self.degree.xi()
    }

    pub fn is_active(&self) -> bool {
        self.xi() != 0.0
    }

    /// Standard deviations of the observation-noise components for a scenario.
    /// Coop: `[x, y, yaw, v]`. Race: `[v, lidar x 27]`.
    pub fn observation_stds(&self, scenario: ScenarioKind) -> Vec<f64> {
        match scenario {
            ScenarioKind::Coop => vec![
                self.noise.position_m2.sqrt(),
                self.noise.position_m2.sqrt(),
                self.noise.orientation_rad2.sqrt(),
                self.noise.velocity_mps2.sqrt(),
            ],
            ScenarioKind::Race => {
                let mut v = vec![self.noise.velocity_mps2.sqrt()];
                v.extend(std::iter::repeat_n(self.noise.lidar_m2.sqrt(), 27));
                v
            }
        }
    }

    /// Additive observation noise, one independent draw per component.
    pub fn sample_observation_noise<R: Rng + ?Sized>(&self, scenario: ScenarioKind, rng: &mut R) -> Vec<f64> {
        let stds = self.observation_stds(scenario);
        if !self.is_active() {
            return vec![0.0; stds.len()];
        }
        let xi = self.xi();
        stds.iter()
            .map(|s| {
                let z: f64 = rng.sample(StandardNormal);
                xi * s * z
            })
            .collect()
    }

    /// `(throttle delta, steering delta)` in normalized units.
    pub fn sample_action_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        if !self.is_active() {
            return (0.0, 0.0);
        }
        let xi = self.xi();
        let zt: f64 = rng.sample(StandardNormal);
        let zs: f64 = rng.sample(StandardNormal);
        (xi * self.noise.throttle.sqrt() * zt, xi * self.noise.steering.sqrt() * zs)
    }

    /// Per-replica dynamics. Coop replicas vary friction and V2V delay;
    /// race replicas vary center of mass, suspension and tire stiffness.
    pub fn assign_replica_dynamics(
        &self,
        scenario: ScenarioKind,
        k: usize,
    ) -> Result<Vec<ReplicaDynamics>, RandomizationError> {
        if !self.is_active() {
            return Ok(vec![ReplicaDynamics::default(); k]);
        }
        let xi = self.xi();
        let g = &self.grids;
        let rows: Vec<(&'static str, &Grid)> = match scenario {
            ScenarioKind::Coop => vec![("friction", &g.friction), ("comm_delay", &g.comm_delay_s)],
            ScenarioKind::Race => vec![("center_of_mass", &g.cg_m), ("suspension", &g.suspension_npm), ("tire", &g.tire_nprad)],
        };
        for (row, grid) in &rows {
            grid.check()?;
            if grid.len() != k {
                return Err(RandomizationError::ReplicaCount {
                    row,
                    expected: grid.len(),
                    got: k,
                });
            }
        }
        Ok((0..k)
            .map(|i| match scenario {
                ScenarioKind::Coop => ReplicaDynamics {
                    offsets: DynamicsOffsets {
                        friction: xi * g.friction.point(i),
                        ..DynamicsOffsets::default()
                    },
                    comm_delay_s: xi * g.comm_delay_s.point(i),
                },
                ScenarioKind::Race => {
                    let cg = xi * g.cg_m.point(i);
                    ReplicaDynamics {
                        offsets: DynamicsOffsets {
                            cg_m: [cg; 3],
                            suspension_npm: xi * g.suspension_npm.point(i),
                            cornering_nprad: xi * g.tire_nprad.point(i),
                            friction: 0.0,
                        },
                        comm_delay_s: 0.0,
                    }
                }
            })
            .collect())
    }
}

/// Dynamics perturbation owned by one replica.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicaDynamics {
    pub offsets: DynamicsOffsets,
    pub comm_delay_s: f64,
}

impl ReplicaDynamics {
    /// V2V staleness in whole simulation steps (rounded down).
    pub fn delay_steps(&self) -> usize {
        (self.comm_delay_s / DEFAULT_DT + 1e-9).floor() as usize
    }
}

/// Add action noise to decoded commands and clamp to the valid ranges.
pub fn perturb_command(throttle: f64, steer: f64, noise: (f64, f64)) -> (f64, f64) {
    ((throttle + noise.0).clamp(0.0, 1.0), (steer + noise.1).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_cardinalities() {
        let g = DynamicsGrids::default();
        assert_eq!(g.friction.len(), 25);
        assert_eq!(g.comm_delay_s.len(), 25);
        assert_eq!(g.cg_m.len(), 10);
        assert_eq!(g.suspension_npm.len(), 10);
        assert_eq!(g.tire_nprad.len(), 10);
    }

    #[test]
    fn coop_friction_grid_example() {
        let p = RandomizationProfile::new(Degree::Ldr);
        let d = p.assign_replica_dynamics(ScenarioKind::Coop, 25).unwrap();
        assert_eq!(d[0].offsets.friction, -0.1);
        assert!((d[24].offsets.friction - (-0.1 + 24.0 * 8.33e-3)).abs() < 1e-15);
        assert!((d[24].offsets.friction - 0.09992).abs() < 1e-12);
    }

    #[test]
    fn race_suspension_grid_example() {
        let p = RandomizationProfile::new(Degree::Ldr);
        let d = p.assign_replica_dynamics(ScenarioKind::Race, 10).unwrap();
        assert_eq!(d[0].offsets.suspension_npm, -100.0);
        assert!((d[1].offsets.suspension_npm + 77.78).abs() < 1e-9);
        assert!((d[9].offsets.suspension_npm - 99.98).abs() < 1e-9);
        assert_eq!(d[3].offsets.cg_m[0], d[3].offsets.cg_m[2]);
    }

    #[test]
    fn wrong_replica_count_names_expected_k() {
        let p = RandomizationProfile::new(Degree::Hdr);
        let err = p.assign_replica_dynamics(ScenarioKind::Coop, 4).unwrap_err();
        assert_eq!(
            err,
            RandomizationError::ReplicaCount {
                row: "friction",
                expected: 25,
                got: 4
            }
        );
    }

    #[test]
    fn ndr_is_zero_and_draws_nothing() {
        let p = RandomizationProfile::new(Degree::Ndr);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let before = rng.clone();
        assert_eq!(p.sample_observation_noise(ScenarioKind::Coop, &mut rng), vec![0.0; 4]);
        assert_eq!(p.sample_action_noise(&mut rng), (0.0, 0.0));
        assert_eq!(rng, before);
        let d = p.assign_replica_dynamics(ScenarioKind::Race, 7).unwrap();
        assert!(d.iter().all(|r| *r == ReplicaDynamics::default()));
    }

    #[test]
    fn delay_quantization() {
        let max1 = ReplicaDynamics {
            comm_delay_s: 24.0 * 4.17e-4,
            ..Default::default()
        };
        assert_eq!(max1.delay_steps(), 0);
        let max2 = ReplicaDynamics {
            comm_delay_s: 2.0 * 24.0 * 4.17e-4,
            ..Default::default()
        };
        assert_eq!(max2.delay_steps(), 1);
    }

    #[test]
    fn clamped_commands_stay_valid() {
        let p = RandomizationProfile::new(Degree::Hdr);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1_000_000u32 {
            let base = if i % 2 == 0 { 1.0 } else { 0.1 };
            let (t, s) = perturb_command(base, 1.0, p.sample_action_noise(&mut rng));
            assert!((0.0..=1.0).contains(&t));
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
