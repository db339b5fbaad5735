//! Static scenario geometry and the queries run against it every step:
//! range sensing, collision detection and checkpoint crossing.
//!
//! Geometry is immutable after loading; every query takes `&self` and may
//! be called from any number of threads.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::GeometryError;
use crate::vehicle::VehicleState;

pub const GEOMETRY_VERSION: u32 = 1;
pub const RACE_CHECKPOINTS: usize = 19;
/// Smallest range a beam reports when its origin touches an obstacle.
pub const MIN_RANGE_M: f64 = 1e-6;
const GRID_CELL_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotate by +90 degrees: the "right-hand" side of a heading under the
    /// positive-yaw-is-right convention.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

impl From<&VehicleState> for Pose {
    fn from(s: &VehicleState) -> Self {
        Pose::new(s.x_m, s.y_m, s.yaw_rad)
    }
}

/// Oriented-rectangle collision body centered on the vehicle reference point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub half_length_m: f64,
    pub half_width_m: f64,
}

impl Footprint {
    pub fn new(half_length_m: f64, half_width_m: f64) -> Self {
        Self {
            half_length_m,
            half_width_m,
        }
    }

    pub fn intersection_default() -> Self {
        Self::new(0.12, 0.06)
    }

    pub fn race_default() -> Self {
        Self::new(0.25, 0.15)
    }

    pub fn is_valid(&self) -> bool {
        self.half_length_m > 0.0 && self.half_width_m > 0.0
    }

    /// Corners in order front-left, front-right, rear-right, rear-left.
    pub fn corners(&self, pose: &Pose) -> [Vec2; 4] {
        let c = pose.position();
        let fwd = Vec2::from_angle(pose.yaw);
        let right = fwd.perp();
        let f = fwd * self.half_length_m;
        let r = right * self.half_width_m;
        [c + f - r, c + f + r, c - f + r, c - f - r]
    }

    pub fn edges(&self, pose: &Pose) -> [Segment; 4] {
        let k = self.corners(pose);
        [
            Segment::new(k[0], k[1]),
            Segment::new(k[1], k[2]),
            Segment::new(k[2], k[3]),
            Segment::new(k[3], k[0]),
        ]
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_length_m.hypot(self.half_width_m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    /// Distance along `dir` from `origin` to this segment, if the ray hits it.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        let e = self.b - self.a;
        let denom = dir.cross(e);
        if denom.abs() < 1e-15 {
            return None;
        }
        let w = self.a - origin;
        let t = w.cross(e) / denom;
        let u = w.cross(dir) / denom;
        (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
    }

    /// Proper or touching intersection of two segments.
    pub fn intersects(&self, other: &Segment) -> bool {
        let d1 = self.b - self.a;
        let d2 = other.b - other.a;
        let o1 = d1.cross(other.a - self.a);
        let o2 = d1.cross(other.b - self.a);
        let o3 = d2.cross(self.a - other.a);
        let o4 = d2.cross(self.b - other.a);
        if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
            return true;
        }
        let on = |p: Vec2, s: &Segment, o: f64| {
            o == 0.0
                && p.x >= s.a.x.min(s.b.x)
                && p.x <= s.a.x.max(s.b.x)
                && p.y >= s.a.y.min(s.b.y)
                && p.y <= s.a.y.max(s.b.y)
        };
        on(other.a, self, o1) || on(other.b, self, o2) || on(self.a, other, o3) || on(self.b, other, o4)
    }
}

fn project(points: &[Vec2], axis: Vec2) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

fn separated_on(a: &[Vec2], b: &[Vec2], axis: Vec2) -> bool {
    let (amin, amax) = project(a, axis);
    let (bmin, bmax) = project(b, axis);
    amax < bmin || bmax < amin
}

/// Separating-axis test between an oriented rectangle and a segment.
pub fn rect_hits_segment(corners: &[Vec2; 4], seg: &Segment) -> bool {
    let pts = [seg.a, seg.b];
    let ax1 = corners[1] - corners[0];
    let ax2 = corners[3] - corners[0];
    let ax3 = (seg.b - seg.a).perp();
    !(separated_on(corners, &pts, ax1) || separated_on(corners, &pts, ax2) || separated_on(corners, &pts, ax3))
}

/// Separating-axis test between two oriented rectangles.
pub fn rects_overlap(a: &[Vec2; 4], b: &[Vec2; 4]) -> bool {
    let axes = [a[1] - a[0], a[3] - a[0], b[1] - b[0], b[3] - b[0]];
    !axes.iter().any(|&ax| separated_on(a, b, ax))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polyline {
    #[serde(default)]
    pub closed: bool,
    pub points: Vec<Vec2>,
}

impl Polyline {
    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        let n = self.points.len();
        let count = if self.closed && n > 2 { n } else { n.saturating_sub(1) };
        (0..count).map(move |i| Segment::new(self.points[i], self.points[(i + 1) % n]))
    }
}

/// Axis-aligned goal rectangle owned by one agent slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalRegion {
    pub agent: usize,
    pub min: Vec2,
    pub max: Vec2,
}

impl GoalRegion {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }
}

/// Checkpoint gate. Traveling forward, `a` is on the driver's left and `b`
/// on the driver's right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub a: Vec2,
    pub b: Vec2,
}

impl Gate {
    pub fn segment(&self) -> Segment {
        Segment::new(self.a, self.b)
    }

    /// Unit normal pointing in the direction of travel.
    pub fn forward(&self) -> Vec2 {
        let d = self.b - self.a;
        let n = Vec2::new(d.y, -d.x);
        n * (1.0 / n.norm())
    }

    pub fn midpoint(&self) -> Vec2 {
        (self.a + self.b) * 0.5
    }
}

/// Distribution of initial poses for one agent slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub agent: usize,
    pub pose: Pose,
    /// Alternative lateral offsets (along the heading's right-hand side),
    /// one picked uniformly per reset.
    #[serde(default = "zero_lane")]
    pub lane_offsets_m: Vec<f64>,
    #[serde(default)]
    pub lateral_jitter_m: f64,
    #[serde(default)]
    pub heading_jitter_rad: f64,
}

fn zero_lane() -> Vec<f64> {
    vec![0.0]
}

impl SpawnSpec {
    pub fn fixed(agent: usize, pose: Pose) -> Self {
        Self {
            agent,
            pose,
            lane_offsets_m: vec![0.0],
            lateral_jitter_m: 0.0,
            heading_jitter_rad: 0.0,
        }
    }

    /// Pose for a given lane and jitter draw (`lateral_u`, `heading_u` in [-1, 1]).
    pub fn realize(&self, lane: usize, lateral_u: f64, heading_u: f64) -> Pose {
        let fwd = Vec2::from_angle(self.pose.yaw);
        let offset = self.lane_offsets_m[lane] + lateral_u * self.lateral_jitter_m;
        let p = self.pose.position() + fwd.perp() * offset;
        Pose::new(p.x, p.y, self.pose.yaw + heading_u * self.heading_jitter_rad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Intersection,
    Race,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryDoc {
    version: u32,
    kind: GeometryKind,
    #[serde(default)]
    boundaries: Vec<Polyline>,
    #[serde(default)]
    goal_regions: Vec<GoalRegion>,
    #[serde(default)]
    checkpoints: Vec<Gate>,
    #[serde(default)]
    spawns: Vec<SpawnSpec>,
}

/// Uniform grid over boundary segments for ray and overlap queries.
#[derive(Debug, Clone, Default)]
struct SegmentGrid {
    origin: Vec2,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl SegmentGrid {
    fn build(segments: &[Segment]) -> Self {
        if segments.is_empty() {
            return Self::default();
        }
        let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for s in segments {
            for p in [s.a, s.b] {
                lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
            }
        }
        let origin = lo - Vec2::new(GRID_CELL_M, GRID_CELL_M);
        let nx = (((hi.x - origin.x) / GRID_CELL_M).ceil() as usize + 1).max(1);
        let ny = (((hi.y - origin.y) / GRID_CELL_M).ceil() as usize + 1).max(1);
        let mut cells = vec![Vec::new(); nx * ny];
        let mut grid = Self { origin, nx, ny, cells: Vec::new() };
        for (i, s) in segments.iter().enumerate() {
            let (x0, y0) = grid.cell_of(Vec2::new(s.a.x.min(s.b.x), s.a.y.min(s.b.y)));
            let (x1, y1) = grid.cell_of(Vec2::new(s.a.x.max(s.b.x), s.a.y.max(s.b.y)));
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    cells[cy * nx + cx].push(i as u32);
                }
            }
        }
        grid.cells = cells;
        grid
    }

    fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let cx = ((p.x - self.origin.x) / GRID_CELL_M).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let cy = ((p.y - self.origin.y) / GRID_CELL_M).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (cx, cy)
    }

    fn extent(&self) -> Vec2 {
        self.origin + Vec2::new(self.nx as f64 * GRID_CELL_M, self.ny as f64 * GRID_CELL_M)
    }

    /// Nearest hit along the ray within `max_t`, walking cells front to back.
    fn ray_cast(&self, segments: &[Segment], origin: Vec2, dir: Vec2, max_t: f64) -> Option<f64> {
        if self.cells.is_empty() {
            return None;
        }
        let hi = self.extent();
        // clip the ray to the grid box
        let (mut t0, mut t1) = (0.0f64, max_t);
        for (o, d, lo, hi) in [(origin.x, dir.x, self.origin.x, hi.x), (origin.y, dir.y, self.origin.y, hi.y)] {
            if d.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let (ta, tb) = ((lo - o) / d, (hi - o) / d);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 {
            return None;
        }
        let start = origin + dir * t0;
        let (mut cx, mut cy) = self.cell_of(start);
        let step_x: isize = if dir.x > 0.0 { 1 } else { -1 };
        let step_y: isize = if dir.y > 0.0 { 1 } else { -1 };
        let next_boundary = |c: usize, step: isize, o: f64, d: f64| -> f64 {
            if d.abs() < 1e-300 {
                return f64::INFINITY;
            }
            let edge = o + (c as f64 + if step > 0 { 1.0 } else { 0.0 }) * GRID_CELL_M;
            edge
        };
        let mut t_max_x = if dir.x.abs() < 1e-300 {
            f64::INFINITY
        } else {
            (next_boundary(cx, step_x, self.origin.x, dir.x) - origin.x) / dir.x
        };
        let mut t_max_y = if dir.y.abs() < 1e-300 {
            f64::INFINITY
        } else {
            (next_boundary(cy, step_y, self.origin.y, dir.y) - origin.y) / dir.y
        };
        let t_dx = if dir.x.abs() < 1e-300 { f64::INFINITY } else { GRID_CELL_M / dir.x.abs() };
        let t_dy = if dir.y.abs() < 1e-300 { f64::INFINITY } else { GRID_CELL_M / dir.y.abs() };
        let mut best: Option<f64> = None;
        loop {
            for &i in &self.cells[cy * self.nx + cx] {
                if let Some(t) = segments[i as usize].ray_hit(origin, dir) {
                    if t <= max_t && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
            }
            let t_next = t_max_x.min(t_max_y);
            if best.is_some_and(|b| b <= t_next) || t_next > t1 {
                return best;
            }
            if t_max_x < t_max_y {
                let n = cx as isize + step_x;
                if n < 0 || n >= self.nx as isize {
                    return best;
                }
                cx = n as usize;
                t_max_x += t_dx;
            } else {
                let n = cy as isize + step_y;
                if n < 0 || n >= self.ny as isize {
                    return best;
                }
                cy = n as usize;
                t_max_y += t_dy;
            }
        }
    }

    fn candidates(&self, lo: Vec2, hi: Vec2, out: &mut Vec<u32>) {
        out.clear();
        if self.cells.is_empty() {
            return;
        }
        let (x0, y0) = self.cell_of(lo);
        let (x1, y1) = self.cell_of(hi);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                out.extend_from_slice(&self.cells[cy * self.nx + cx]);
            }
        }
        out.sort_unstable();
        out.dedup();
    }
}

/// Outcome of a collision query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Contact {
    None,
    Boundary,
    Agent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointProgress {
    pub crossed: bool,
    pub lap_completed: bool,
    pub new_index: usize,
}

/// A peer body visible to a query: id, state and collision footprint.
#[derive(Debug, Clone, Copy)]
pub struct PeerBody {
    pub id: usize,
    pub state: VehicleState,
    pub footprint: Footprint,
}

/// Sensor layout for [`WorldGeometry::raycast`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarSpec {
    pub beam_count: usize,
    pub fov_rad: f64,
    pub max_range_m: f64,
    /// `true`: beams at both fov endpoints (spacing fov/(n-1)).
    /// `false`: one endpoint open (spacing fov/n, last beam short of +fov/2).
    #[serde(default = "default_true")]
    pub endpoints_inclusive: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            beam_count: 27,
            fov_rad: 270f64.to_radians(),
            max_range_m: 10.0,
            endpoints_inclusive: true,
        }
    }
}

impl LidarSpec {
    /// Bearing of beam `i` relative to the heading; index 0 at `-fov/2`.
    pub fn bearing(&self, i: usize) -> f64 {
        // Centered integer offsets keep mirrored beams exactly antisymmetric.
        let n = self.beam_count as f64;
        let (center, span) = if self.endpoints_inclusive {
            (0.5 * (n - 1.0), n - 1.0)
        } else {
            (0.5 * n, n)
        };
        self.fov_rad * ((i as f64 - center) / span)
    }
}

#[derive(Debug, Clone)]
pub struct WorldGeometry {
    pub kind: GeometryKind,
    pub boundaries: Vec<Polyline>,
    pub goal_regions: Vec<GoalRegion>,
    pub checkpoints: Vec<Gate>,
    pub spawns: Vec<SpawnSpec>,
    segments: Vec<Segment>,
    grid: SegmentGrid,
}

impl WorldGeometry {
    /// Build and validate. Fails on degenerate polylines, bad goals, a race
    /// geometry without exactly 19 ordered gates, or malformed spawns.
    pub fn new(
        kind: GeometryKind,
        boundaries: Vec<Polyline>,
        goal_regions: Vec<GoalRegion>,
        checkpoints: Vec<Gate>,
        spawns: Vec<SpawnSpec>,
    ) -> Result<Self, GeometryError> {
        let mut g = Self {
            kind,
            boundaries,
            goal_regions,
            checkpoints,
            spawns,
            segments: Vec::new(),
            grid: SegmentGrid::default(),
        };
        g.validate()?;
        g.segments = g.boundaries.iter().flat_map(|p| p.segments()).collect();
        g.grid = SegmentGrid::build(&g.segments);
        Ok(g)
    }

    /// A world without static obstacles.
    pub fn empty(kind: GeometryKind) -> Self {
        Self::new(kind, Vec::new(), Vec::new(), Vec::new(), Vec::new()).expect("empty geometry is valid")
    }

    fn validate(&self) -> Result<(), GeometryError> {
        for (i, poly) in self.boundaries.iter().enumerate() {
            if poly.points.len() < 2 {
                return Err(GeometryError::invalid(format!("boundaries[{i}]"), "polyline needs at least 2 points"));
            }
            for (j, p) in poly.points.iter().enumerate() {
                if !p.is_finite() {
                    return Err(GeometryError::invalid(format!("boundaries[{i}].points[{j}]"), "non-finite coordinate"));
                }
            }
            for (j, s) in poly.segments().enumerate() {
                if s.length() <= 1e-12 {
                    return Err(GeometryError::invalid(
                        format!("boundaries[{i}].points[{j}]"),
                        "zero-length segment",
                    ));
                }
            }
        }
        for (i, g) in self.goal_regions.iter().enumerate() {
            if !(g.min.is_finite() && g.max.is_finite() && g.min.x < g.max.x && g.min.y < g.max.y) {
                return Err(GeometryError::invalid(format!("goal_regions[{i}]"), "min must be strictly below max"));
            }
        }
        if self.kind == GeometryKind::Race && self.checkpoints.len() != RACE_CHECKPOINTS {
            return Err(GeometryError::invalid(
                "checkpoints",
                format!("race geometry needs exactly {RACE_CHECKPOINTS} gates, found {}", self.checkpoints.len()),
            ));
        }
        for (i, gate) in self.checkpoints.iter().enumerate() {
            if !(gate.a.is_finite() && gate.b.is_finite()) || gate.segment().length() <= 1e-12 {
                return Err(GeometryError::invalid(format!("checkpoints[{i}]"), "degenerate gate"));
            }
        }
        let n = self.checkpoints.len();
        if n > 1 {
            for i in 0..n {
                let (g, h) = (&self.checkpoints[i], &self.checkpoints[(i + 1) % n]);
                if g.segment().intersects(&h.segment()) {
                    return Err(GeometryError::invalid(
                        format!("checkpoints[{i}]"),
                        format!("gate intersects gate {}", (i + 1) % n),
                    ));
                }
                if (h.midpoint() - g.midpoint()).dot(g.forward()) <= 0.0 {
                    return Err(GeometryError::invalid(
                        format!("checkpoints[{}]", (i + 1) % n),
                        format!("gate is not ahead of gate {i} along the track direction"),
                    ));
                }
            }
        }
        for (i, s) in self.spawns.iter().enumerate() {
            let finite = s.pose.x.is_finite() && s.pose.y.is_finite() && s.pose.yaw.is_finite();
            if !finite || s.lane_offsets_m.is_empty() || s.lateral_jitter_m < 0.0 || s.heading_jitter_rad < 0.0 {
                return Err(GeometryError::invalid(format!("spawns[{i}]"), "malformed spawn distribution"));
            }
        }
        Ok(())
    }

    /// Every extreme spawn pose must clear the boundaries for this footprint.
    pub fn validate_spawns(&self, footprint: &Footprint) -> Result<(), GeometryError> {
        for (i, s) in self.spawns.iter().enumerate() {
            for lane in 0..s.lane_offsets_m.len() {
                for lat in [-1.0, 0.0, 1.0] {
                    for head in [-1.0, 0.0, 1.0] {
                        let pose = s.realize(lane, lat, head);
                        if self.touches_boundary(&footprint.corners(&pose)) {
                            return Err(GeometryError::invalid(
                                format!("spawns[{i}]"),
                                format!("spawn pose ({:.3}, {:.3}, {:.3}) touches a boundary", pose.x, pose.y, pose.yaw),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, GeometryError> {
        let doc: GeometryDoc = serde_json::from_str(text).map_err(|e| GeometryError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if doc.version != GEOMETRY_VERSION {
            return Err(GeometryError::invalid(
                "version",
                format!("unsupported version {} (expected {GEOMETRY_VERSION})", doc.version),
            ));
        }
        Self::new(doc.kind, doc.boundaries, doc.goal_regions, doc.checkpoints, doc.spawns)
    }

    pub fn to_json_string(&self) -> String {
        let doc = GeometryDoc {
            version: GEOMETRY_VERSION,
            kind: self.kind,
            boundaries: self.boundaries.clone(),
            goal_regions: self.goal_regions.clone(),
            checkpoints: self.checkpoints.clone(),
            spawns: self.spawns.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("geometry serializes")
    }

    /// The bundled closed race loop (oval with one chicane, 19 gates).
    pub fn default_race_track() -> Self {
        Self::from_json_str(include_str!("../data/race_track.json")).expect("bundled track is valid")
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn goal_for(&self, agent: usize) -> Option<&GoalRegion> {
        self.goal_regions.iter().find(|g| g.agent == agent)
    }

    pub fn spawn_for(&self, agent: usize) -> Option<&SpawnSpec> {
        self.spawns.iter().find(|s| s.agent == agent)
    }

    fn touches_boundary(&self, corners: &[Vec2; 4]) -> bool {
        let lo = corners.iter().fold(Vec2::new(f64::INFINITY, f64::INFINITY), |m, p| Vec2::new(m.x.min(p.x), m.y.min(p.y)));
        let hi = corners
            .iter()
            .fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |m, p| Vec2::new(m.x.max(p.x), m.y.max(p.y)));
        let mut cand = Vec::new();
        self.grid.candidates(lo, hi, &mut cand);
        cand.iter().any(|&i| rect_hits_segment(corners, &self.segments[i as usize]))
    }

    /// Range scan from `pose`. Peers must already be filtered by the
    /// perception mask.
    pub fn raycast(&self, pose: &Pose, peers: &[PeerBody], lidar: &LidarSpec) -> Vec<f64> {
        let origin = pose.position();
        let peer_edges: Vec<Segment> = peers
            .iter()
            .filter(|p| (p.state.position() - origin).norm() - p.footprint.bounding_radius() <= lidar.max_range_m)
            .flat_map(|p| p.footprint.edges(&Pose::from(&p.state)))
            .collect();
        (0..lidar.beam_count)
            .map(|i| {
                let dir = Vec2::from_angle(pose.yaw + lidar.bearing(i));
                let mut best = self.grid.ray_cast(&self.segments, origin, dir, lidar.max_range_m);
                for e in &peer_edges {
                    if let Some(t) = e.ray_hit(origin, dir) {
                        if best.is_none_or(|b| t < b) {
                            best = Some(t);
                        }
                    }
                }
                best.map_or(lidar.max_range_m, |t| t.clamp(MIN_RANGE_M, lidar.max_range_m))
            })
            .collect()
    }

    /// First contact of `ego` with a boundary, else with the lowest-id
    /// overlapping peer. Peers must already be filtered by the collision mask.
    pub fn check_collision(&self, ego: &VehicleState, footprint: &Footprint, peers: &[PeerBody]) -> Contact {
        let corners = footprint.corners(&Pose::from(ego));
        if self.touches_boundary(&corners) {
            return Contact::Boundary;
        }
        let reach = footprint.bounding_radius();
        let mut hit: Option<usize> = None;
        for p in peers {
            if (p.state.position() - ego.position()).norm() > reach + p.footprint.bounding_radius() {
                continue;
            }
            if rects_overlap(&corners, &p.footprint.corners(&Pose::from(&p.state))) && hit.is_none_or(|h| p.id < h) {
                hit = Some(p.id);
            }
        }
        hit.map_or(Contact::None, Contact::Agent)
    }

    /// Advance the gate counter if the motion segment crosses the next gate forward.
    pub fn checkpoint_progress(&self, prev: Vec2, new: Vec2, next_index: usize) -> CheckpointProgress {
        let unchanged = CheckpointProgress {
            crossed: false,
            lap_completed: false,
            new_index: next_index,
        };
        let Some(gate) = self.checkpoints.get(next_index) else {
            return unchanged;
        };
        let motion = Segment::new(prev, new);
        let forward = (new - prev).dot(gate.forward()) > 0.0;
        if !(forward && motion.intersects(&gate.segment())) {
            return unchanged;
        }
        let n = self.checkpoints.len();
        CheckpointProgress {
            crossed: true,
            lap_completed: next_index + 1 == n,
            new_index: (next_index + 1) % n,
        }
    }

    /// Reflect the whole world across the line through `pose` along its heading.
    pub fn mirrored_about(&self, pose: &Pose) -> Self {
        let o = pose.position();
        let u = Vec2::from_angle(pose.yaw);
        let m = |p: Vec2| {
            let d = p - o;
            let along = u * d.dot(u);
            o + along * 2.0 - d
        };
        let boundaries = self
            .boundaries
            .iter()
            .map(|pl| Polyline {
                closed: pl.closed,
                points: pl.points.iter().map(|&p| m(p)).collect(),
            })
            .collect();
        Self::new(self.kind, boundaries, Vec::new(), Vec::new(), Vec::new()).expect("mirror of a valid geometry is valid")
    }
}

/// Which way an intersection agent leaves the junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Straight,
    Left,
    Right,
}

/// Dimensions of the generated four-way junction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntersectionConfig {
    pub lane_width_m: f64,
    pub lanes_per_direction: usize,
    pub arm_length_m: f64,
    /// Distance of the spawn point from the arm's closed end.
    pub spawn_setback_m: f64,
    pub spawn_lateral_jitter_m: f64,
    pub spawn_heading_jitter_deg: f64,
    /// Length of each goal rectangle along its arm.
    pub goal_depth_m: f64,
    /// Route of the agent spawned on arm `i` (arm 0 south, then counter to
    /// the yaw direction: west, north, east).
    pub routes: Vec<Route>,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        Self {
            lane_width_m: 0.25,
            lanes_per_direction: 2,
            arm_length_m: 3.0,
            spawn_setback_m: 0.5,
            spawn_lateral_jitter_m: 0.05,
            spawn_heading_jitter_deg: 5.0,
            goal_depth_m: 1.0,
            routes: vec![Route::Straight; 4],
        }
    }
}

/// 4-way junction of two perpendicular 2+2-lane roads with closed arm ends.
/// Agent `i` spawns on arm `i` driving inbound on the right-hand lanes.
pub fn intersection(cfg: &IntersectionConfig) -> Result<WorldGeometry, GeometryError> {
    let half = cfg.lane_width_m * cfg.lanes_per_direction as f64;
    let end = half + cfg.arm_length_m;
    // Outward arm directions; successive arms differ by -90 degrees of yaw.
    let arms = [Vec2::new(0.0, -1.0), Vec2::new(-1.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(1.0, 0.0)];
    let mut boundaries = Vec::new();
    for k in 0..4 {
        let u1 = arms[k];
        let u2 = arms[(k + 1) % 4];
        boundaries.push(Polyline {
            closed: false,
            points: vec![u1 * end + u2 * half, u1 * half + u2 * half, u2 * end + u1 * half],
        });
        let side = u1.perp();
        boundaries.push(Polyline {
            closed: false,
            points: vec![u1 * end + side * half, u1 * end - side * half],
        });
    }
    if cfg.routes.len() != 4 {
        return Err(GeometryError::invalid("routes", "one route per arm (4) required"));
    }
    let mut spawns = Vec::new();
    let mut goals = Vec::new();
    for (agent, &u) in arms.iter().enumerate() {
        let heading = -u;
        let spawn_pos = u * (end - cfg.spawn_setback_m);
        let lanes = (0..cfg.lanes_per_direction).map(|j| (j as f64 + 0.5) * cfg.lane_width_m).collect();
        spawns.push(SpawnSpec {
            agent,
            pose: Pose::new(spawn_pos.x, spawn_pos.y, heading.y.atan2(heading.x)),
            lane_offsets_m: lanes,
            lateral_jitter_m: cfg.spawn_lateral_jitter_m,
            heading_jitter_rad: cfg.spawn_heading_jitter_deg.to_radians(),
        });
        let exit = match cfg.routes[agent] {
            Route::Straight => heading,
            Route::Right => heading.perp(),
            Route::Left => -heading.perp(),
        };
        // outbound lanes sit on the right of the exit heading
        let right = exit.perp();
        let c0 = exit * (end - cfg.goal_depth_m - 0.05);
        let c1 = exit * (end - 0.05) + right * half;
        goals.push(GoalRegion {
            agent,
            min: Vec2::new(c0.x.min(c1.x), c0.y.min(c1.y)),
            max: Vec2::new(c0.x.max(c1.x), c0.y.max(c1.y)),
        });
    }
    WorldGeometry::new(GeometryKind::Intersection, boundaries, goals, Vec::new(), spawns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn wall(a: [f64; 2], b: [f64; 2]) -> Polyline {
        Polyline {
            closed: false,
            points: vec![a.into(), b.into()],
        }
    }

    fn free(polys: Vec<Polyline>) -> WorldGeometry {
        WorldGeometry::new(GeometryKind::Intersection, polys, vec![], vec![], vec![]).unwrap()
    }

    #[test]
    fn empty_world_reads_max_range() {
        let g = WorldGeometry::empty(GeometryKind::Intersection);
        let r = g.raycast(&Pose::new(1.0, 2.0, 0.3), &[], &LidarSpec::default());
        assert_eq!(r, vec![10.0; 27]);
    }

    #[test]
    fn wall_ahead_center_beam() {
        let g = free(vec![wall([3.0, -100.0], [3.0, 100.0])]);
        let r = g.raycast(&Pose::new(0.0, 0.0, 0.0), &[], &LidarSpec::default());
        assert!((r[13] - 3.0).abs() < 1e-12, "{}", r[13]);
        // oblique beams see the same wall farther away, capped at 10
        assert!(r[12] > 3.0 && r[14] > 3.0);
        assert_eq!(r[0], 10.0);
    }

    #[test]
    fn wall_behind_is_outside_fov() {
        let g = free(vec![wall([-0.5, -0.2], [-0.5, 0.2])]);
        let r = g.raycast(&Pose::new(0.0, 0.0, 0.0), &[], &LidarSpec::default());
        assert_eq!(r, vec![10.0; 27]);
    }

    #[test]
    fn open_endpoint_spacing() {
        let spec = LidarSpec {
            endpoints_inclusive: false,
            ..LidarSpec::default()
        };
        assert!((spec.bearing(1) - spec.bearing(0) - 10f64.to_radians()).abs() < 1e-12);
        let inc = LidarSpec::default();
        assert!((inc.bearing(26) - 135f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn identical_rectangles_collide() {
        let g = WorldGeometry::empty(GeometryKind::Intersection);
        let s = VehicleState::new(1.0, 1.0, 0.4, 0.0);
        let fp = Footprint::new(0.2, 0.1);
        let peer = PeerBody { id: 3, state: s, footprint: fp };
        assert_eq!(g.check_collision(&s, &fp, &[peer]), Contact::Agent(3));
    }

    #[test]
    fn centered_in_lane_is_clear() {
        let g = free(vec![wall([-5.0, 0.5], [5.0, 0.5]), wall([-5.0, -0.5], [5.0, -0.5])]);
        let fp = Footprint::new(0.2, 0.1);
        assert_eq!(g.check_collision(&VehicleState::default(), &fp, &[]), Contact::None);
    }

    #[test]
    fn rotated_corner_crosses_boundary() {
        // Center 0.25 m below the line y = 0.5; a 0.2 x 0.2 half-extent box
        // rotated 45 degrees reaches 0.2*sqrt(2) = 0.283 m > 0.25 m.
        let g = free(vec![wall([-5.0, 0.5], [5.0, 0.5])]);
        let fp = Footprint::new(0.2, 0.2);
        let s = VehicleState::new(0.0, 0.25, FRAC_PI_4, 0.0);
        assert_eq!(g.check_collision(&s, &fp, &[]), Contact::Boundary);
        let axis = VehicleState::new(0.0, 0.25, 0.0, 0.0);
        assert_eq!(g.check_collision(&axis, &fp, &[]), Contact::None);
    }

    #[test]
    fn boundary_has_priority_over_peer() {
        let g = free(vec![wall([-5.0, 0.1], [5.0, 0.1])]);
        let fp = Footprint::new(0.2, 0.2);
        let s = VehicleState::default();
        let peers = [
            PeerBody { id: 5, state: s, footprint: fp },
            PeerBody { id: 2, state: s, footprint: fp },
        ];
        assert_eq!(g.check_collision(&s, &fp, &peers), Contact::Boundary);
        let open = WorldGeometry::empty(GeometryKind::Intersection);
        assert_eq!(open.check_collision(&s, &fp, &peers), Contact::Agent(2));
    }

    #[test]
    fn default_track_has_nineteen_gates() {
        let g = WorldGeometry::default_race_track();
        assert_eq!(g.checkpoints.len(), RACE_CHECKPOINTS);
        g.validate_spawns(&Footprint::race_default()).unwrap();
    }

    #[test]
    fn checkpoint_examples() {
        let g = WorldGeometry::default_race_track();
        let gate = g.checkpoints[5];
        let f = gate.forward();
        let m = gate.midpoint();
        let miss = g.checkpoint_progress(m - f * 2.0, m - f * 1.0, 5);
        assert!(!miss.crossed && miss.new_index == 5);
        let fwd = g.checkpoint_progress(m - f * 0.1, m + f * 0.1, 5);
        assert!(fwd.crossed && !fwd.lap_completed && fwd.new_index == 6);
        let back = g.checkpoint_progress(m + f * 0.1, m - f * 0.1, 5);
        assert!(!back.crossed && back.new_index == 5);
        let last = g.checkpoints[18];
        let (lf, lm) = (last.forward(), last.midpoint());
        let lap = g.checkpoint_progress(lm - lf * 0.1, lm + lf * 0.1, 18);
        assert!(lap.crossed && lap.lap_completed && lap.new_index == 0);
        // a gate other than the next one never counts
        let skip = g.checkpoint_progress(m - f * 0.1, m + f * 0.1, 7);
        assert!(!skip.crossed);
    }

    #[test]
    fn race_kind_requires_nineteen_gates() {
        let err = WorldGeometry::new(GeometryKind::Race, vec![], vec![], vec![], vec![]).unwrap_err();
        assert!(err.to_string().contains("19"));
    }

    #[test]
    fn zero_length_segment_rejected_with_path() {
        let text = r#"{"version":1,"kind":"intersection","boundaries":[{"points":[[0,0],[1,0],[1,0]]}]}"#;
        let err = WorldGeometry::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("boundaries[0].points[1]"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\n\"version\": 1,\n\"kind\": \"race\",\n\"boundaries\": [oops]\n}";
        match WorldGeometry::from_json_str(text).unwrap_err() {
            GeometryError::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn intersection_spawns_are_clear() {
        let g = intersection(&IntersectionConfig::default()).unwrap();
        g.validate_spawns(&Footprint::intersection_default()).unwrap();
        assert_eq!(g.goal_regions.len(), 4);
        // spawn is never inside its own goal
        for s in &g.spawns {
            assert!(!g.goal_for(s.agent).unwrap().contains(s.pose.position()));
        }
        let round = WorldGeometry::from_json_str(&g.to_json_string()).unwrap();
        assert_eq!(round.segments().len(), g.segments().len());
    }

    #[test]
    fn grid_raycast_matches_brute_force() {
        let g = WorldGeometry::default_race_track();
        let lidar = LidarSpec::default();
        for k in 0..50 {
            let t = k as f64 * 0.37;
            let pose = Pose::new(3.0 * t.cos() + 4.0, 2.0 * t.sin() + 3.0, t * 1.7);
            let fast = g.raycast(&pose, &[], &lidar);
            for (i, &r) in fast.iter().enumerate() {
                let dir = Vec2::from_angle(pose.yaw + lidar.bearing(i));
                let brute = g
                    .segments()
                    .iter()
                    .filter_map(|s| s.ray_hit(pose.position(), dir))
                    .fold(lidar.max_range_m, f64::min)
                    .max(MIN_RANGE_M);
                assert_eq!(r, brute, "pose {k} beam {i}");
            }
        }
    }
}
