//! Head-to-head racing: lidar observation, extrinsic reward with
//! checkpoint/lap/best-lap bonuses, and lap bookkeeping.

use crate::geometry::{CheckpointProgress, Contact, MIN_RANGE_M};
use crate::vehicle::ScenarioKind;
use crate::world::{Event, RaceProgress, StepReport, Termination, World};

pub const COLLISION_REWARD: f64 = -1.0;
pub const CHECKPOINT_REWARD: f64 = 0.01;
pub const LAP_REWARD: f64 = 0.1;
pub const BEST_LAP_REWARD: f64 = 0.7;
pub const SPEED_GAIN: f64 = 0.01;

/// Events observed by one racer during one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RaceEvents {
    pub collision: bool,
    pub checkpoint: bool,
    pub lap: bool,
    pub best_lap: bool,
}

impl RaceEvents {
    /// Branch that pays out, by priority collision > best lap > lap > checkpoint.
    pub fn branch(&self) -> Event {
        if self.collision {
            Event::Collision
        } else if self.best_lap {
            Event::BestLap
        } else if self.lap {
            Event::Lap
        } else if self.checkpoint {
            Event::Checkpoint
        } else {
            Event::Cruise
        }
    }
}

/// Extrinsic reward; exactly one branch applies.
pub fn race_extrinsic_reward(events: &RaceEvents, speed_mps: f64) -> f64 {
    match events.branch() {
        Event::Collision => COLLISION_REWARD,
        Event::BestLap => BEST_LAP_REWARD,
        Event::Lap => LAP_REWARD,
        Event::Checkpoint => CHECKPOINT_REWARD,
        _ => SPEED_GAIN * speed_mps,
    }
}

/// Most laps wins; ties go to more gates passed; a remaining tie has no winner.
pub fn winner(progress: &[RaceProgress]) -> Option<usize> {
    let key = |p: &RaceProgress| (p.laps, p.gates_passed);
    let best = progress.iter().map(key).max()?;
    let mut leaders = progress.iter().enumerate().filter(|(_, p)| key(p) == best);
    let first = leaders.next()?.0;
    if leaders.next().is_some() {
        None
    } else {
        Some(first)
    }
}

/// Update lap bookkeeping for one alive step. Returns the events.
pub fn advance_progress(crossing: Option<CheckpointProgress>, progress: &mut RaceProgress) -> RaceEvents {
    progress.lap_timer += 1;
    let mut events = RaceEvents::default();
    if let Some(c) = crossing {
        if c.crossed {
            events.checkpoint = true;
            progress.gates_passed += 1;
            progress.next_gate = c.new_index;
        }
        if c.lap_completed {
            events.lap = true;
            let t = progress.lap_timer;
            progress.laps += 1;
            progress.lap_times.push(t);
            progress.lap_timer = 0;
            match progress.best_lap {
                Some(b) if t < b => {
                    events.best_lap = true;
                    progress.best_lap = Some(t);
                }
                Some(_) => {}
                None => progress.best_lap = Some(t),
            }
        }
    }
    events
}

pub(crate) fn resolve(world: &mut World, report: &mut StepReport) {
    for f in 0..world.families.len() {
        let (first, size) = (world.families[f].first, world.families[f].size);
        let contacts: Vec<Contact> = (0..size)
            .map(|s| if world.bodies[first + s].acted { world.contact(first + s) } else { Contact::None })
            .collect();
        let mut crashed = Vec::new();
        for s in 0..size {
            let i = first + s;
            let body = &world.bodies[i];
            if !body.acted {
                continue;
            }
            let collided = contacts[s] != Contact::None;
            let next_gate = world.families[f].race[s].next_gate;
            let crossing = if collided {
                None
            } else {
                Some(
                    world
                        .geometry
                        .checkpoint_progress(body.prev_state.position(), body.state.position(), next_gate),
                )
            };
            let speed = body.state.speed_mps;
            let fam = &mut world.families[f];
            let mut events = advance_progress(crossing, &mut fam.race[s]);
            events.collision = collided;
            let reward = race_extrinsic_reward(&events, speed);
            fam.returns[s] += reward;
            fam.agent_steps[s] += 1;
            let out = &mut report.agents[i];
            out.acted = true;
            out.reward = reward;
            out.event = events.branch();
            if collided {
                crashed.push(s);
            }
        }
        for s in crashed {
            world.bodies[first + s].alive = false;
            world.families[f].causes[s] = Some(Termination::Collision);
            report.agents[first + s].done = true;
        }
        world.advance_clock(f, report);
    }
}

pub(crate) fn refresh(world: &mut World, f: usize, draw_noise: bool) {
    let (first, size) = (world.families[f].first, world.families[f].size);
    let max_range = world.cfg.lidar.max_range_m;
    for s in 0..size {
        let i = first + s;
        let b = &world.bodies[i];
        let mut obs = Vec::with_capacity(1 + world.cfg.lidar.beam_count);
        obs.push(b.state.speed_mps);
        obs.extend(world.lidar(i));
        if draw_noise && (b.alive || b.acted) {
            let w = world
                .profile
                .sample_observation_noise(ScenarioKind::Race, &mut world.families[f].rng);
            for (o, n) in obs.iter_mut().zip(&w) {
                *o += n;
            }
            for r in &mut obs[1..] {
                *r = r.clamp(MIN_RANGE_M, max_range);
            }
        }
        world.obs[i] = obs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_constants() {
        let ev = |collision, checkpoint, lap, best_lap| RaceEvents {
            collision,
            checkpoint,
            lap,
            best_lap,
        };
        assert_eq!(race_extrinsic_reward(&ev(true, true, true, true), 3.0), -1.0);
        assert_eq!(race_extrinsic_reward(&ev(false, true, true, true), 3.0), 0.7);
        assert_eq!(race_extrinsic_reward(&ev(false, true, true, false), 3.0), 0.1);
        assert_eq!(race_extrinsic_reward(&ev(false, true, false, false), 3.0), 0.01);
        assert!((race_extrinsic_reward(&RaceEvents::default(), 2.0) - 0.02).abs() < 1e-12);
        assert_eq!(race_extrinsic_reward(&RaceEvents::default(), 0.0), 0.0);
    }

    #[test]
    fn win_rule() {
        let p = |laps, gates_passed| RaceProgress {
            laps,
            gates_passed,
            ..Default::default()
        };
        assert_eq!(winner(&[p(2, 40), p(1, 30)]), Some(0));
        assert_eq!(winner(&[p(1, 20), p(1, 25)]), Some(1));
        assert_eq!(winner(&[p(1, 20), p(1, 20)]), None);
    }

    #[test]
    fn best_lap_only_improves() {
        let mut prog = RaceProgress::default();
        let lap = Some(CheckpointProgress {
            crossed: true,
            lap_completed: true,
            new_index: 0,
        });
        for _ in 0..9 {
            advance_progress(None, &mut prog);
        }
        let e = advance_progress(lap, &mut prog);
        assert!(e.lap && !e.best_lap);
        assert_eq!(prog.best_lap, Some(10));
        for _ in 0..11 {
            advance_progress(None, &mut prog);
        }
        let e = advance_progress(lap, &mut prog);
        assert!(e.lap && !e.best_lap);
        assert_eq!(prog.best_lap, Some(10));
        for _ in 0..4 {
            advance_progress(None, &mut prog);
        }
        let e = advance_progress(lap, &mut prog);
        assert!(e.best_lap);
        assert_eq!(prog.best_lap, Some(5));
        assert_eq!(prog.lap_times, vec![10, 12, 5]);
    }
}
