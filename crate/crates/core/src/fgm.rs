//! Follow-the-gap reactive planner, quantized to the discrete action sets.

use serde::{Deserialize, Serialize};

use crate::geometry::{LidarSpec, Vec2};
use crate::vehicle::{wrap_angle, Action, STEER_STRAIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FgmConfig {
    pub safety_bubble_m: f64,
    pub range_threshold_m: f64,
    /// Multiplies the target bearing before the dead-band test.
    pub steer_gain: f64,
    pub steer_deadband_deg: f64,
    /// Throttle index used when the target beam is longer than twice the threshold.
    pub fast_throttle: usize,
    pub slow_throttle: usize,
    /// Intersection adapter: radius of the virtual obstacle drawn for each peer.
    pub peer_radius_m: f64,
    /// Intersection adapter: penalty per radian between a gap and the goal bearing,
    /// in units of beams of gap width.
    pub goal_weight: f64,
    pub lidar: LidarSpec,
}

impl Default for FgmConfig {
    fn default() -> Self {
        Self::race()
    }
}

impl FgmConfig {
    pub fn race() -> Self {
        Self {
            safety_bubble_m: 0.3,
            range_threshold_m: 2.0,
            steer_gain: 1.0,
            steer_deadband_deg: 5.0,
            fast_throttle: 2,
            slow_throttle: 1,
            peer_radius_m: 0.15,
            goal_weight: 10.0,
            lidar: LidarSpec::default(),
        }
    }

    pub fn coop() -> Self {
        Self {
            fast_throttle: 1,
            slow_throttle: 0,
            range_threshold_m: 1.0,
            ..Self::race()
        }
    }

    /// Constant half throttle: the deliberately sub-optimal demonstrator.
    pub fn demonstrator() -> Self {
        Self {
            fast_throttle: 1,
            slow_throttle: 1,
            ..Self::race()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let max = self.lidar.max_range_m;
        if !(self.safety_bubble_m >= 0.0 && self.safety_bubble_m < max) {
            return Err(format!("safety_bubble_m must be in [0, {max})"));
        }
        if !(self.range_threshold_m > 0.0 && self.range_threshold_m < max) {
            return Err(format!("range_threshold_m must be in (0, {max})"));
        }
        Ok(())
    }
}

fn steer_for(bearing: f64, cfg: &FgmConfig) -> usize {
    let b = cfg.steer_gain * bearing;
    let band = cfg.steer_deadband_deg.to_radians();
    if b > band {
        2
    } else if b < -band {
        0
    } else {
        STEER_STRAIGHT
    }
}

/// Zero the beams whose hit points lie within the bubble around the nearest hit.
fn apply_bubble(ranges: &mut [f64], cfg: &FgmConfig) {
    let r_min = ranges.iter().copied().fold(f64::INFINITY, f64::min);
    if r_min >= cfg.lidar.max_range_m {
        return;
    }
    let spacing = cfg.lidar.bearing(1) - cfg.lidar.bearing(0);
    let half = if r_min <= cfg.safety_bubble_m {
        std::f64::consts::PI
    } else {
        (cfg.safety_bubble_m / r_min).asin()
    };
    let reach = (half / spacing).floor() as usize;
    // Symmetric about the nearest beam; equal-range minima are all bubbled so
    // the result does not depend on scan direction.
    let minima: Vec<usize> = ranges
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == r_min)
        .map(|(i, _)| i)
        .collect();
    for m in minima {
        let lo = m.saturating_sub(reach);
        let hi = (m + reach).min(ranges.len() - 1);
        for r in &mut ranges[lo..=hi] {
            *r = 0.0;
        }
    }
}

/// Contiguous runs `[start, end]` with ranges above the threshold.
fn gaps(ranges: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &r) in ranges.iter().enumerate() {
        match (r > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, ranges.len() - 1));
    }
    out
}

/// Pick the candidate with the highest score; exact mirror ties resolve to
/// the one nearest straight ahead, and a remaining tie (a perfectly
/// symmetric scan) yields `None`.
fn pick<T: Copy>(cands: &[(f64, f64, T)]) -> Option<T> {
    let mut best: Option<(f64, f64, T)> = None;
    let mut tied = false;
    for &(score, bearing, item) in cands {
        match best {
            None => best = Some((score, bearing, item)),
            Some((bs, bb, _)) => {
                if score > bs || (score == bs && bearing.abs() < bb.abs()) {
                    best = Some((score, bearing, item));
                    tied = false;
                } else if score == bs && bearing.abs() == bb.abs() {
                    tied = true;
                }
            }
        }
    }
    if tied {
        None
    } else {
        best.map(|b| b.2)
    }
}

/// Decide from a range scan. `goal_bearing` (relative to heading) biases the
/// gap choice and the aim point when given.
pub fn fgm_decide_toward(ranges: &[f64], goal_bearing: Option<f64>, cfg: &FgmConfig) -> Action {
    let lidar = &cfg.lidar;
    let mut masked = ranges.to_vec();
    apply_bubble(&mut masked, cfg);
    let found = gaps(&masked, cfg.range_threshold_m);
    if found.is_empty() {
        let best = ranges.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cands: Vec<(f64, f64, usize)> = ranges
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == best)
            .map(|(i, _)| (0.0, lidar.bearing(i), i))
            .collect();
        let steer = pick(&cands).map_or(STEER_STRAIGHT, |i| steer_for(lidar.bearing(i), cfg));
        return Action::new(0, steer);
    }
    let spacing = lidar.bearing(1) - lidar.bearing(0);
    let cands: Vec<(f64, f64, (usize, usize))> = found
        .iter()
        .map(|&(s, e)| {
            let center = 0.5 * (lidar.bearing(s) + lidar.bearing(e));
            let width = (e - s + 1) as f64;
            let score = match goal_bearing {
                None => width,
                Some(g) => {
                    let aim = g.clamp(lidar.bearing(s), lidar.bearing(e));
                    width - cfg.goal_weight * (aim - g).abs() / spacing
                }
            };
            (score, center, (s, e))
        })
        .collect();
    let Some((s, e)) = pick(&cands) else {
        return Action::new(cfg.slow_throttle, STEER_STRAIGHT);
    };
    let target = match goal_bearing {
        None => 0.5 * (lidar.bearing(s) + lidar.bearing(e)),
        Some(g) => g.clamp(lidar.bearing(s), lidar.bearing(e)),
    };
    // range along the target bearing: the nearer of its two neighbouring beams
    let pos = (target - lidar.bearing(0)) / spacing;
    // snap rounding noise so a target on a beam reads that beam alone, from either side
    let pos = if (pos - pos.round()).abs() < 1e-9 { pos.round() } else { pos };
    let lo = (pos.floor().max(0.0) as usize).min(ranges.len() - 1);
    let hi = (pos.ceil().max(0.0) as usize).min(ranges.len() - 1);
    let target_range = masked[lo].min(masked[hi]);
    let throttle = if target_range > 2.0 * cfg.range_threshold_m {
        cfg.fast_throttle
    } else {
        cfg.slow_throttle
    };
    Action::new(throttle, steer_for(target, cfg))
}

/// Plain follow-the-gap on a lidar scan.
pub fn fgm_decide(ranges: &[f64], cfg: &FgmConfig) -> Action {
    fgm_decide_toward(ranges, None, cfg)
}

/// Race observations carry the speed first; the scan follows.
pub fn fgm_race_policy(obs: &[f64], cfg: &FgmConfig) -> Action {
    fgm_decide(&obs[1..], cfg)
}

/// Synthetic scan for an intersection agent: peers are circles at their
/// relative positions, nothing else is visible. `ego_yaw` comes from the
/// agent's own heading sensor since the observation is heading-free.
pub fn fgm_coop_adapter(obs: &[f64], ego_yaw: f64, cfg: &FgmConfig) -> Vec<f64> {
    let peers = (obs.len() - 2) / 4;
    let lidar = &cfg.lidar;
    let centers: Vec<Vec2> = (0..peers)
        .filter_map(|k| {
            let dx = obs[2 + 2 * k];
            let dy = obs[3 + 2 * k];
            let yaw = obs[2 + 2 * peers + k];
            let v = obs[2 + 3 * peers + k];
            // all-zero slot: masked or finished peer
            if dx == 0.0 && dy == 0.0 && yaw == 0.0 && v == 0.0 {
                None
            } else {
                Some(Vec2::new(dx, dy))
            }
        })
        .collect();
    (0..lidar.beam_count)
        .map(|i| {
            let d = Vec2::from_angle(ego_yaw + lidar.bearing(i));
            let mut best = lidar.max_range_m;
            for c in &centers {
                // |t d - c| = r  =>  t^2 - 2 t (d.c) + |c|^2 - r^2 = 0
                let b = d.dot(*c);
                let disc = b * b - (c.dot(*c) - cfg.peer_radius_m * cfg.peer_radius_m);
                if disc < 0.0 {
                    continue;
                }
                let sq = disc.sqrt();
                let t = if b - sq > 0.0 { b - sq } else { b + sq };
                if t > 0.0 && t < best {
                    best = t;
                }
            }
            best.max(crate::geometry::MIN_RANGE_M)
        })
        .collect()
}

/// Follow-the-gap for an intersection agent, aiming at its goal.
pub fn fgm_coop_policy(obs: &[f64], ego_yaw: f64, cfg: &FgmConfig) -> Action {
    let ranges = fgm_coop_adapter(obs, ego_yaw, cfg);
    let goal_bearing = wrap_angle(obs[1].atan2(obs[0]) - ego_yaw);
    fgm_decide_toward(&ranges, Some(goal_bearing), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_space_goes_straight_fast() {
        let cfg = FgmConfig::race();
        assert_eq!(fgm_decide(&[10.0; 27], &cfg), Action::new(cfg.fast_throttle, STEER_STRAIGHT));
    }

    #[test]
    fn obstacles_right_steer_left() {
        let cfg = FgmConfig::race();
        let mut r = vec![10.0; 27];
        for x in &mut r[14..] {
            *x = 0.8;
        }
        assert_eq!(fgm_decide(&r, &cfg).steer, 0);
    }

    #[test]
    fn emergency_branch() {
        let cfg = FgmConfig::race();
        let mut r = vec![0.2; 27];
        assert_eq!(fgm_decide(&r, &cfg), Action::new(0, STEER_STRAIGHT));
        r[3] = 0.5;
        assert_eq!(fgm_decide(&r, &cfg), Action::new(0, 0));
    }

    #[test]
    fn adapter_peer_ahead() {
        let cfg = FgmConfig::coop();
        let mut obs = vec![0.0; 14];
        obs[0] = 5.0;
        obs[2] = 1.0; // peer 1 m ahead along +x
        obs[11] = 0.5;
        let r = fgm_coop_adapter(&obs, 0.0, &cfg);
        assert!((r[13] - 0.85).abs() < 1e-12, "{}", r[13]);
        assert!(r[12] > 0.85 && r[12] <= 10.0);
        let empty = fgm_coop_adapter(&[0.0; 14], 0.3, &cfg);
        assert_eq!(empty, vec![10.0; 27]);
    }

    #[test]
    fn adapter_ignores_peer_behind() {
        let cfg = FgmConfig::coop();
        let mut obs = vec![0.0; 14];
        obs[2] = -1.0;
        obs[11] = 0.5;
        assert_eq!(fgm_coop_adapter(&obs, 0.0, &cfg), vec![10.0; 27]);
    }
}
