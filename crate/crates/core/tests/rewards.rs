//! Reward values pinned by hand and checked against live episodes.

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use twinmarl_core::coop::{coop_reward, CoopEvent};
use twinmarl_core::geometry::Vec2;
use twinmarl_core::race::{race_extrinsic_reward, RaceEvents};
use twinmarl_core::randomization::{Degree, RandomizationProfile, ReplicaDynamics};
use twinmarl_core::vehicle::Action;
use twinmarl_core::world::{Event, ScenarioConfig, World};
use twinmarl_core::rng_for;

const TOL: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

#[test]
fn coop_branches_by_hand() {
    let g = Vec2::new(3.0, 4.0);
    assert!(close(coop_reward(CoopEvent::SafeTraversal, g), 1.0));
    assert!(close(coop_reward(CoopEvent::Violation, g), -2.125));
    assert!(close(coop_reward(CoopEvent::Running, g), 0.01 / 5.001));
    assert!(close(coop_reward(CoopEvent::Running, Vec2::new(0.0, 0.0)), 10.0));
    assert!(close(coop_reward(CoopEvent::Violation, Vec2::new(0.0, -2.0)), -0.85));
    // goal reward does not depend on distance
    assert!(close(coop_reward(CoopEvent::SafeTraversal, Vec2::new(40.0, 0.0)), 1.0));
}

#[test]
fn race_branches_by_hand() {
    let ev = |collision, checkpoint, lap, best_lap| RaceEvents {
        collision,
        checkpoint,
        lap,
        best_lap,
    };
    assert!(close(race_extrinsic_reward(&ev(true, true, true, true), 3.0), -1.0));
    assert!(close(race_extrinsic_reward(&ev(false, true, true, true), 3.0), 0.7));
    assert!(close(race_extrinsic_reward(&ev(false, true, true, false), 3.0), 0.1));
    assert!(close(race_extrinsic_reward(&ev(false, true, false, false), 3.0), 0.01));
    assert!(close(race_extrinsic_reward(&ev(false, false, false, false), 2.5), 0.025));
    assert!(close(race_extrinsic_reward(&ev(false, false, false, false), 0.0), 0.0));
}

proptest! {
    #[test]
    fn running_reward_is_positive_and_decreasing(x in -50.0..50.0f64, y in -50.0..50.0f64, s in 1.0..3.0f64) {
        let near = coop_reward(CoopEvent::Running, Vec2::new(x, y));
        let far = coop_reward(CoopEvent::Running, Vec2::new(s * x, s * y));
        prop_assert!(near > 0.0 && near <= 10.0);
        prop_assert!(far <= near);
        prop_assert!(coop_reward(CoopEvent::Violation, Vec2::new(x, y)) <= 0.0);
    }

    #[test]
    fn exactly_one_race_branch(c: bool, k: bool, l: bool, b: bool, v in 0.0..5.0f64) {
        let r = race_extrinsic_reward(&RaceEvents { collision: c, checkpoint: k, lap: l, best_lap: b }, v);
        let expected = if c { -1.0 } else if b { 0.7 } else if l { 0.1 } else if k { 0.01 } else { 0.01 * v };
        prop_assert_eq!(r, expected);
    }
}

/// Running rewards seen in a live noiseless episode follow from the goal
/// offset the agent observes after the step.
#[test]
fn live_coop_rewards_match_observed_goal_offsets() {
    let cfg = ScenarioConfig::coop();
    let geo = Arc::new(cfg.default_geometry().unwrap());
    let n = geo.spawns.len();
    let mut w = World::single(cfg, geo, RandomizationProfile::new(Degree::Ndr), 2, ReplicaDynamics::default()).unwrap();
    let mut rng = rng_for(2, 50, 0);
    let mut checked = [0usize; 3];
    for _ in 0..3000 {
        let acts: Vec<Option<Action>> = (0..n)
            .map(|g| w.is_alive(g).then(|| Action::new(1, rng.random_range(0..3))))
            .collect();
        let r = w.step(&acts).unwrap();
        for a in r.agents.iter().filter(|a| a.acted) {
            let g = Vec2::new(a.obs[0], a.obs[1]);
            let (event, i) = match a.event {
                Event::Running => (CoopEvent::Running, 0),
                Event::Violation => (CoopEvent::Violation, 1),
                Event::SafeTraversal => (CoopEvent::SafeTraversal, 2),
                e => panic!("unexpected coop event {e:?}"),
            };
            assert!(close(a.reward, coop_reward(event, g)), "{:?}: {} vs {}", a.event, a.reward, coop_reward(event, g));
            checked[i] += 1;
        }
    }
    assert!(checked[0] > 0 && checked[1] > 0, "branches seen: {checked:?}");
}
