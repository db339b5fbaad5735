//! Discrete-time Ackermann vehicle model.
//!
//! A kinematic bicycle with torque- and friction-limited longitudinal
//! dynamics. Chassis perturbations (center-of-mass shift, suspension and
//! tire stiffness offsets) have no direct analogue in a bicycle model, so
//! they enter through a smooth drive-force degradation factor in `[0.8, 1]`.
//!
//! Heading convention: positive yaw rotates `+x` toward `+y`, and a positive
//! steering command (`right`) produces a positive yaw rate.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::VehicleError;

pub const GRAVITY: f64 = 9.81;
/// Physics step; one agent decision is taken per step.
pub const DEFAULT_DT: f64 = 0.02;
pub const MAX_DT: f64 = 0.1;

/// Offsets that drive the degradation factor to its floor (the HDR grid
/// endpoints: twice the largest Table-style grid magnitude per axis).
pub const MAX_CG_OFFSET_M: f64 = 0.1;
pub const MAX_SUSPENSION_OFFSET_NPM: f64 = 200.0;
pub const MAX_CORNERING_OFFSET_NPRAD: f64 = 5.0;
const MIN_DRIVE_FACTOR: f64 = 0.8;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut r = angle % TAU;
    if r > PI {
        r -= TAU;
    } else if r <= -PI {
        r += TAU;
    }
    r
}

/// Randomizable physical parameters of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase_m: f64,
    /// Effective translational mass (drivetrain inertia reflected at the wheel included).
    pub mass_kg: f64,
    pub max_torque_nm: f64,
    pub wheel_radius_m: f64,
    pub max_steer_rad: f64,
    /// Longitudinal velocity damping, 1/s.
    pub drag_coeff: f64,
    /// Center-of-mass shift (x, y, z) from the nominal location.
    pub cg_offset_m: [f64; 3],
    pub suspension_stiffness_npm: f64,
    pub cornering_stiffness_nprad: f64,
    pub surface_friction: f64,
    /// Accumulated suspension perturbation relative to the nominal chassis.
    pub suspension_offset_npm: f64,
    /// Accumulated tire-stiffness perturbation relative to the nominal chassis.
    pub cornering_offset_nprad: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase_m: 0.3,
            mass_kg: 85.6,
            max_torque_nm: 85.6,
            wheel_radius_m: 0.25,
            max_steer_rad: 30f64.to_radians(),
            drag_coeff: 1.0,
            cg_offset_m: [0.0; 3],
            suspension_stiffness_npm: 1000.0,
            cornering_stiffness_nprad: 20.0,
            surface_friction: 1.0,
            suspension_offset_npm: 0.0,
            cornering_offset_nprad: 0.0,
        }
    }
}

/// Additive perturbation applied to a [`VehicleParams`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsOffsets {
    pub cg_m: [f64; 3],
    pub suspension_npm: f64,
    pub cornering_nprad: f64,
    pub friction: f64,
}

impl VehicleParams {
    /// Intersection vehicle: same drivetrain, heavier damping (top speed 1 m/s).
    pub fn intersection_default() -> Self {
        Self {
            drag_coeff: 4.0,
            ..Self::default()
        }
    }

    pub fn with_offsets(&self, offsets: &DynamicsOffsets) -> Self {
        let mut p = *self;
        for (c, o) in p.cg_offset_m.iter_mut().zip(offsets.cg_m) {
            *c += o;
        }
        p.suspension_stiffness_npm += offsets.suspension_npm;
        p.suspension_offset_npm += offsets.suspension_npm;
        p.cornering_stiffness_nprad += offsets.cornering_nprad;
        p.cornering_offset_nprad += offsets.cornering_nprad;
        p.surface_friction += offsets.friction;
        p
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        let fields = [
            ("wheelbase_m", self.wheelbase_m),
            ("mass_kg", self.mass_kg),
            ("max_torque_nm", self.max_torque_nm),
            ("wheel_radius_m", self.wheel_radius_m),
            ("max_steer_rad", self.max_steer_rad),
            ("drag_coeff", self.drag_coeff),
            ("cg_offset_m[0]", self.cg_offset_m[0]),
            ("cg_offset_m[1]", self.cg_offset_m[1]),
            ("cg_offset_m[2]", self.cg_offset_m[2]),
            ("suspension_stiffness_npm", self.suspension_stiffness_npm),
            ("cornering_stiffness_nprad", self.cornering_stiffness_nprad),
            ("surface_friction", self.surface_friction),
            ("suspension_offset_npm", self.suspension_offset_npm),
            ("cornering_offset_nprad", self.cornering_offset_nprad),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(VehicleError::NonFinite(name));
            }
        }
        let positive = [
            ("wheelbase_m", self.wheelbase_m),
            ("mass_kg", self.mass_kg),
            ("wheel_radius_m", self.wheel_radius_m),
            ("surface_friction", self.surface_friction),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(VehicleError::OutOfRange {
                    field: name,
                    value: v,
                    expected: "> 0",
                });
            }
        }
        if !(self.max_steer_rad > 0.0 && self.max_steer_rad < PI / 2.0) {
            return Err(VehicleError::OutOfRange {
                field: "max_steer_rad",
                value: self.max_steer_rad,
                expected: "in (0, pi/2)",
            });
        }
        if self.max_torque_nm < 0.0 || self.drag_coeff < 0.0 {
            return Err(VehicleError::OutOfRange {
                field: "max_torque_nm/drag_coeff",
                value: self.max_torque_nm.min(self.drag_coeff),
                expected: ">= 0",
            });
        }
        Ok(())
    }

    /// Drive-force degradation in `[0.8, 1]` from the chassis perturbation.
    pub fn drive_factor(&self) -> f64 {
        let ratios = [
            self.cg_offset_m[0] / MAX_CG_OFFSET_M,
            self.cg_offset_m[1] / MAX_CG_OFFSET_M,
            self.cg_offset_m[2] / MAX_CG_OFFSET_M,
            self.suspension_offset_npm / MAX_SUSPENSION_OFFSET_NPM,
            self.cornering_offset_nprad / MAX_CORNERING_OFFSET_NPRAD,
        ];
        let norm = ratios.iter().map(|r| r * r).sum::<f64>().sqrt();
        let rel = (norm / (ratios.len() as f64).sqrt()).min(1.0);
        1.0 - (1.0 - MIN_DRIVE_FACTOR) * rel
    }

    pub fn friction_limit(&self) -> f64 {
        self.surface_friction * GRAVITY
    }
}

/// Planar pose and forward speed of one agent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x_m: f64,
    pub y_m: f64,
    pub yaw_rad: f64,
    pub speed_mps: f64,
}

impl VehicleState {
    pub fn new(x_m: f64, y_m: f64, yaw_rad: f64, speed_mps: f64) -> Self {
        Self {
            x_m,
            y_m,
            yaw_rad: wrap_angle(yaw_rad),
            speed_mps,
        }
    }

    pub fn position(&self) -> crate::geometry::Vec2 {
        crate::geometry::Vec2::new(self.x_m, self.y_m)
    }

    pub fn is_finite(&self) -> bool {
        self.x_m.is_finite()
            && self.y_m.is_finite()
            && self.yaw_rad.is_finite()
            && self.speed_mps.is_finite()
    }
}

/// Yaw rate of the kinematic bicycle for a normalized steering command.
pub fn yaw_rate(speed_mps: f64, steer_norm: f64, params: &VehicleParams) -> f64 {
    speed_mps * (steer_norm * params.max_steer_rad).tan() / params.wheelbase_m
}

/// Longitudinal acceleration, clamped to the friction circle.
pub fn longitudinal_accel(speed_mps: f64, throttle_norm: f64, params: &VehicleParams) -> f64 {
    let limit = params.friction_limit();
    let drive = (throttle_norm * params.max_torque_nm / (params.wheel_radius_m * params.mass_kg))
        .min(limit);
    let accel = drive * params.drive_factor() - params.drag_coeff * speed_mps;
    accel.clamp(-limit, limit)
}

/// Advance one agent by `dt` seconds. Pure and bitwise deterministic.
pub fn step_vehicle(
    state: &VehicleState,
    throttle_norm: f64,
    steer_norm: f64,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState, VehicleError> {
    let inputs = [
        ("state.x_m", state.x_m),
        ("state.y_m", state.y_m),
        ("state.yaw_rad", state.yaw_rad),
        ("state.speed_mps", state.speed_mps),
        ("throttle_norm", throttle_norm),
        ("steer_norm", steer_norm),
        ("dt", dt),
    ];
    for (name, v) in inputs {
        if !v.is_finite() {
            return Err(VehicleError::NonFinite(name));
        }
    }
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(VehicleError::OutOfRange {
            field: "dt",
            value: dt,
            expected: "in (0, 0.1]",
        });
    }
    params.validate()?;

    let throttle = throttle_norm.clamp(0.0, 1.0);
    let steer = steer_norm.clamp(-1.0, 1.0);
    let v = state.speed_mps.max(0.0);
    let accel = longitudinal_accel(v, throttle, params);
    let omega = yaw_rate(v, steer, params);
    let (sin, cos) = state.yaw_rad.sin_cos();
    Ok(VehicleState {
        x_m: state.x_m + v * cos * dt,
        y_m: state.y_m + v * sin * dt,
        yaw_rad: wrap_angle(state.yaw_rad + omega * dt),
        speed_mps: (v + accel * dt).max(0.0),
    })
}

/// Which of the two scenarios an action belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Coop,
    Race,
}

impl ScenarioKind {
    pub fn throttle_levels(self) -> &'static [f64] {
        match self {
            ScenarioKind::Coop => &[0.5, 1.0],
            ScenarioKind::Race => &[0.1, 0.5, 1.0],
        }
    }

    pub fn action_dims(self) -> [usize; 2] {
        [self.throttle_levels().len(), STEER_LEVELS.len()]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Coop => "coop",
            ScenarioKind::Race => "race",
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coop" => Ok(ScenarioKind::Coop),
            "race" => Ok(ScenarioKind::Race),
            other => Err(format!("unknown scenario `{other}` (expected coop|race)")),
        }
    }
}

/// left, straight, right
pub const STEER_LEVELS: [f64; 3] = [-1.0, 0.0, 1.0];
pub const STEER_STRAIGHT: usize = 1;

/// A discrete joint action: one index per action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Action {
    pub throttle: usize,
    pub steer: usize,
}

impl Action {
    pub fn new(throttle: usize, steer: usize) -> Self {
        Self { throttle, steer }
    }

    pub fn indices(&self) -> [usize; 2] {
        [self.throttle, self.steer]
    }
}

/// Map discrete indices to normalized (throttle, steer) commands.
pub fn decode_action(
    throttle_index: usize,
    steer_index: usize,
    scenario: ScenarioKind,
) -> Result<(f64, f64), VehicleError> {
    let levels = scenario.throttle_levels();
    let throttle = *levels.get(throttle_index).ok_or(VehicleError::ActionIndex {
        head: "throttle",
        index: throttle_index,
        cardinality: levels.len(),
    })?;
    let steer = *STEER_LEVELS.get(steer_index).ok_or(VehicleError::ActionIndex {
        head: "steer",
        index: steer_index,
        cardinality: STEER_LEVELS.len(),
    })?;
    Ok((throttle, steer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VehicleParams {
        VehicleParams::intersection_default()
    }

    #[test]
    fn zero_input_is_fixed_point() {
        let s = VehicleState::default();
        let next = step_vehicle(&s, 0.0, 0.0, &params(), DEFAULT_DT).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn equilibrium_throttle_holds_speed() {
        let p = params();
        let s = VehicleState::new(0.0, 0.0, 0.0, 1.0);
        // drive accel == drag * v
        let throttle = p.drag_coeff * 1.0 * p.wheel_radius_m * p.mass_kg / p.max_torque_nm;
        let next = step_vehicle(&s, throttle, 0.0, &p, 0.02).unwrap();
        assert!((next.x_m - 0.02).abs() < 1e-15);
        assert!((next.speed_mps - 1.0).abs() < 1e-12);
        assert_eq!(next.y_m, 0.0);
    }

    #[test]
    fn full_right_steer_yaw_rate() {
        let p = VehicleParams {
            max_steer_rad: 0.5236,
            wheelbase_m: 0.3,
            ..params()
        };
        let r = yaw_rate(1.0, 1.0, &p);
        assert!((r - 0.5236f64.tan() / 0.3).abs() < 1e-12);
        assert!((r - 1.9245).abs() < 1e-4);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_action(1, 1, ScenarioKind::Coop).unwrap(), (1.0, 0.0));
        assert_eq!(decode_action(0, 0, ScenarioKind::Race).unwrap(), (0.1, -1.0));
        assert!(decode_action(2, 0, ScenarioKind::Coop).is_err());
        assert!(decode_action(0, 3, ScenarioKind::Race).is_err());
    }

    #[test]
    fn non_finite_input_names_field() {
        let s = VehicleState::default();
        let err = step_vehicle(&s, f64::NAN, 0.0, &params(), 0.02).unwrap_err();
        assert!(err.to_string().contains("throttle_norm"));
        let bad = VehicleState {
            yaw_rad: f64::INFINITY,
            ..s
        };
        let err = step_vehicle(&bad, 0.0, 0.0, &params(), 0.02).unwrap_err();
        assert!(err.to_string().contains("state.yaw_rad"));
        assert!(step_vehicle(&s, 0.0, 0.0, &params(), 0.2).is_err());
    }

    #[test]
    fn wrap_angle_cases() {
        assert!((wrap_angle(-6.0) - (TAU - 6.0)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn drive_factor_bounds() {
        let p = params();
        assert_eq!(p.drive_factor(), 1.0);
        let worst = p.with_offsets(&DynamicsOffsets {
            cg_m: [0.1, 0.1, 0.1],
            suspension_npm: 200.0,
            cornering_nprad: 5.0,
            friction: 0.0,
        });
        assert!((worst.drive_factor() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn friction_limits_speed_gain() {
        let p = VehicleParams {
            surface_friction: 0.1,
            ..params()
        };
        let s = VehicleState::default();
        let next = step_vehicle(&s, 1.0, 0.0, &p, 0.02).unwrap();
        assert!(next.speed_mps <= 0.1 * GRAVITY * 0.02 + 1e-15);
    }
}
