use std::sync::Arc;

use twinmarl_core::fgm::{fgm_race_policy, FgmConfig};
use twinmarl_core::geometry::WorldGeometry;
use twinmarl_core::randomization::{Degree, RandomizationProfile, ReplicaDynamics};
use twinmarl_core::world::{ScenarioConfig, World};

fn lone_racer(seed: u64) -> World {
    let mut geo = WorldGeometry::default_race_track();
    geo.spawns.truncate(1);
    let mut cfg = ScenarioConfig::race();
    cfg.horizon_steps = 20_000;
    World::single(cfg, Arc::new(geo), RandomizationProfile::new(Degree::Ndr), seed, ReplicaDynamics::default()).unwrap()
}

#[test]
fn fgm_laps_without_collision() {
    for (name, fgm) in [("race", FgmConfig::race()), ("demonstrator", FgmConfig::demonstrator())] {
        let mut w = lone_racer(7);
        let mut steps = 0;
        while w.race_progress(0).laps < 5 {
            let a = fgm_race_policy(w.observation(0), &fgm);
            let r = w.step(&[Some(a)]).unwrap();
            steps += 1;
            assert!(!(r.agents[0].done && !r.agents[0].truncated), "{name}: crashed at step {steps} at {:?}, laps {}", w.state(0), w.race_progress(0).laps);
            assert!(steps < 20_000, "{name}: too slow");
        }
        println!("{name}: 5 laps in {steps} steps, lap times {:?}", w.race_progress(0).lap_times);
    }
}

fn junction(seed: u64) -> World {
    let cfg = ScenarioConfig::coop();
    let geo = Arc::new(cfg.default_geometry().unwrap());
    World::single(cfg, geo, RandomizationProfile::new(Degree::Ndr), seed, ReplicaDynamics::default()).unwrap()
}

#[test]
fn fast_agent_reaches_its_goal_with_the_fixed_bonus() {
    use twinmarl_core::vehicle::Action;
    use twinmarl_core::world::{Event, Termination};
    // agent 0 at full throttle, the others at half: agent 0 usually clears the box first
    let mut reached = 0;
    for seed in 0..10 {
        let mut w = junction(seed);
        let n = w.agent_count();
        let before = reached;
        loop {
            let acts: Vec<Option<Action>> = (0..n).map(|g| w.is_alive(g).then_some(Action::new(usize::from(g == 0), 1))).collect();
            let r = w.step(&acts).unwrap();
            if r.agents[0].event == Event::SafeTraversal {
                assert_eq!(r.agents[0].reward, 1.0);
                assert!(r.agents[0].done && !r.agents[0].truncated);
                reached += 1;
            }
            if let Some(ep) = r.episodes.first() {
                let goal = ep.causes[0] == Termination::Goal;
                assert_eq!(goal, reached > before, "{ep:?}");
                break;
            }
        }
    }
    assert!(reached > 0, "agent 0 never reached its goal");
}

#[test]
fn everyone_straight_at_once_ends_in_violations() {
    use twinmarl_core::vehicle::Action;
    use twinmarl_core::world::Termination;
    let mut w = junction(2);
    let n = w.agent_count();
    loop {
        let acts: Vec<Option<Action>> = (0..n).map(|g| w.is_alive(g).then_some(Action::new(1, 1))).collect();
        let r = w.step(&acts).unwrap();
        if let Some(ep) = r.episodes.first() {
            assert!(ep.causes.contains(&Termination::Violation), "{:?}", ep.causes);
            break;
        }
    }
}
