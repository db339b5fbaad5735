//! Cooperative intersection traversal: observation assembly, reward and
//! termination for families of `N` agents that must each reach their goal
//! region without collisions or lane-boundary violations.

use crate::geometry::{Contact, Vec2};
use crate::vehicle::{wrap_angle, ScenarioKind, VehicleState};
use crate::world::{Event, StepReport, Termination, World};

pub const GOAL_REWARD: f64 = 1.0;
pub const PENALTY_GAIN: f64 = 0.425;
pub const RUNNING_GAIN: f64 = 0.01;
pub const RUNNING_EPS: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoopEvent {
    SafeTraversal,
    Violation,
    Running,
}

/// Reward for one agent-step given the fired branch and the goal offset.
pub fn coop_reward(event: CoopEvent, goal_rel: Vec2) -> f64 {
    let dist = goal_rel.norm();
    match event {
        CoopEvent::SafeTraversal => GOAL_REWARD,
        CoopEvent::Violation => -PENALTY_GAIN * dist,
        CoopEvent::Running => RUNNING_GAIN / (RUNNING_EPS + dist),
    }
}

/// Observation of agent `ego`: `[goal_rel(2), peer_pos(2(N-1)), peer_yaw(N-1), peer_speed(N-1)]`.
///
/// `ego_state` is the agent's own (measured) state, `peer_states` holds
/// every family member's shared state, indexed by slot, and `visible[j]`
/// says whether peer `j` is alive and inside the ego's interaction group.
/// Invisible peers contribute zeros; slots never shift.
pub fn coop_observe(ego: usize, ego_state: &VehicleState, goal: Vec2, peer_states: &[VehicleState], visible: &[bool]) -> Vec<f64> {
    let n = peer_states.len();
    let mut obs = vec![0.0; 2 + 4 * (n - 1)];
    let p = ego_state.position();
    obs[0] = goal.x - p.x;
    obs[1] = goal.y - p.y;
    let (pos, rest) = obs[2..].split_at_mut(2 * (n - 1));
    let (yaw, vel) = rest.split_at_mut(n - 1);
    for (k, j) in (0..n).filter(|&j| j != ego).enumerate() {
        if !visible[j] {
            continue;
        }
        let s = &peer_states[j];
        pos[2 * k] = s.x_m - p.x;
        pos[2 * k + 1] = s.y_m - p.y;
        yaw[k] = wrap_angle(s.yaw_rad - ego_state.yaw_rad);
        vel[k] = s.speed_mps;
    }
    obs
}

pub(crate) fn resolve(world: &mut World, report: &mut StepReport) {
    for f in 0..world.families.len() {
        let (first, size) = (world.families[f].first, world.families[f].size);
        let mut finished = Vec::new();
        for s in 0..size {
            let i = first + s;
            if !world.bodies[i].acted {
                continue;
            }
            let pos = world.bodies[i].state.position();
            let goal = world.geometry.goal_for(s).expect("validated at construction");
            let event = if world.contact(i) != Contact::None {
                CoopEvent::Violation
            } else if goal.contains(pos) {
                CoopEvent::SafeTraversal
            } else {
                CoopEvent::Running
            };
            let reward = coop_reward(event, goal.center() - pos);
            let fam = &mut world.families[f];
            fam.returns[s] += reward;
            fam.agent_steps[s] += 1;
            let out = &mut report.agents[i];
            out.acted = true;
            out.reward = reward;
            out.event = match event {
                CoopEvent::SafeTraversal => Event::SafeTraversal,
                CoopEvent::Violation => Event::Violation,
                CoopEvent::Running => Event::Running,
            };
            match event {
                CoopEvent::SafeTraversal => finished.push((s, Termination::Goal)),
                CoopEvent::Violation => finished.push((s, Termination::Violation)),
                CoopEvent::Running => {}
            }
        }
        // Simultaneous resolution: flags change only after every check.
        for (s, cause) in finished {
            world.bodies[first + s].alive = false;
            world.families[f].causes[s] = Some(cause);
            report.agents[first + s].done = true;
        }
        world.advance_clock(f, report);
    }
}

pub(crate) fn refresh(world: &mut World, f: usize, draw_noise: bool) {
    let fam = &mut world.families[f];
    let (first, size) = (fam.first, fam.size);
    if draw_noise || fam.broadcast.is_empty() {
        let mut measured = Vec::with_capacity(size);
        for s in 0..size {
            let b = &world.bodies[first + s];
            let mut m = b.state;
            if draw_noise && (b.alive || b.acted) {
                let w = world.profile.sample_observation_noise(ScenarioKind::Coop, &mut fam.rng);
                m.x_m += w[0];
                m.y_m += w[1];
                m.yaw_rad = wrap_angle(m.yaw_rad + w[2]);
                m.speed_mps += w[3];
            }
            measured.push(m);
        }
        fam.broadcast.push_back(measured);
        while fam.broadcast.len() > fam.delay_steps + 1 {
            fam.broadcast.pop_front();
        }
    }
    let current = fam.broadcast.back().expect("just pushed").clone();
    let shared = &fam.broadcast[fam.broadcast.len().saturating_sub(fam.delay_steps + 1)];
    for s in 0..size {
        let me = &world.bodies[first + s];
        let visible: Vec<bool> = (0..size)
            .map(|j| {
                let b = &world.bodies[first + j];
                j != s && b.alive && b.mask.interaction_group == me.mask.interaction_group
            })
            .collect();
        let goal = world.geometry.goal_for(s).expect("validated at construction").center();
        let mut peers = shared.clone();
        // The ego's own slot is never read from the delayed copy.
        peers[s] = current[s];
        world.obs[first + s] = coop_observe(s, &current[s], goal, &peers, &visible);
    }
}

/// Patch the shared copy of a teleported agent so observations follow it.
pub(crate) fn patch_broadcast(world: &mut World, agent: usize) {
    let (f, s) = (world.bodies[agent].family, world.bodies[agent].slot);
    let state = world.bodies[agent].state;
    for entry in world.families[f].broadcast.iter_mut() {
        entry[s] = state;
    }
}
