use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use twinmarl_core::eval::{summarize, kpi_means, sim2real_gap, Driver, Realm};
use twinmarl_core::fgm::FgmConfig;
use twinmarl_core::randomization::RandomizationProfile;
use twinmarl_core::vehicle::ScenarioKind;
use twinmarl_core::world::ScenarioConfig;
use twinmarl_twin::emulator::LatencyConfig;
use twinmarl_twin::session::simulate_reference;
use twinmarl_twin::trace::{read_trace, recorded_outbound, replay, untimed};
use twinmarl_twin::{run_local_twin, serve_twin, Payload, PlantEmulatorConfig, ServerOptions, SessionConfig, TwinSyncMessage};

fn session(scenario: ScenarioConfig, episodes: usize, seed: u64) -> SessionConfig {
    let geometry = Arc::new(scenario.default_geometry().unwrap());
    let fgm = match scenario.scenario {
        ScenarioKind::Coop => FgmConfig::coop(),
        ScenarioKind::Race => FgmConfig::race(),
    };
    SessionConfig {
        scenario,
        geometry,
        profile: RandomizationProfile::default(),
        seed,
        driver: Driver::Fgm(fgm),
        episodes,
        label: "fgm".into(),
    }
}

fn relaxed() -> ServerOptions {
    // stepped clock: the period only sets the sync deadline
    ServerOptions {
        period: Duration::from_millis(500),
        ..ServerOptions::default()
    }
}

fn race_1000() -> ScenarioConfig {
    ScenarioConfig {
        horizon_steps: 1000,
        ..ScenarioConfig::race()
    }
}

#[test]
fn ideal_plant_reproduces_simulation() {
    let cfg = session(race_1000(), 2, 11);
    let plant = PlantEmulatorConfig::ideal(cfg.scenario.scenario, cfg.scenario.vehicle, cfg.scenario.dt);
    let (twin, emu) = run_local_twin(cfg.clone(), &relaxed(), plant).unwrap();
    let (sim_records, sim_traj) = simulate_reference(&cfg).unwrap();
    assert!(twin.sync_losses.is_empty() && twin.error.is_none());
    assert_eq!(twin.trajectory.len(), sim_traj.len());
    assert!(sim_traj.iter().filter(|p| p.episode == 0).count() >= 1000);
    for (a, b) in twin.trajectory.iter().zip(&sim_traj) {
        assert_eq!((a.episode, a.step, a.slot), (b.episode, b.step, b.slot));
        let d = (a.state.x_m - b.state.x_m).hypot(a.state.y_m - b.state.y_m);
        assert!(d < 1e-9, "episode {} step {}: {d} m", a.episode, a.step);
    }
    // both racers take the physical slot once
    assert_eq!(twin.trajectory.last().unwrap().slot, 1);
    let mut all = sim_records;
    all.extend(twin.records.clone());
    let stats = summarize(&all).unwrap();
    let gap = sim2real_gap(&kpi_means(&stats, "fgm", Realm::Sim), &kpi_means(&stats, "fgm", Realm::Twin)).unwrap();
    assert_eq!(gap, 0.0);
    assert_eq!(emu.episodes, 2);
    assert!(emu.rows.iter().all(|r| r.estimate == r.truth));
    assert_eq!(emu.median_action_age(), Some(0.0));
}

#[test]
fn one_tick_latency_shifts_actions_by_one() {
    let cfg = session(ScenarioConfig::coop(), 1, 3);
    let mut plant = PlantEmulatorConfig::ideal(cfg.scenario.scenario, cfg.scenario.vehicle, cfg.scenario.dt);
    plant.latency = LatencyConfig { mean_s: cfg.scenario.dt, jitter_s: 0.0 };
    let (_, emu) = run_local_twin(cfg, &relaxed(), plant).unwrap();
    let applied: Vec<_> = emu.rows.iter().filter_map(|r| r.applied_reply_to.map(|a| (r.step, a))).collect();
    assert!(applied.len() > 10);
    assert!(applied.iter().all(|(step, reply)| step - reply == 1));
}

#[test]
fn latency_and_noise_statistics() {
    let cfg = session(ScenarioConfig::coop(), 3, 5);
    let mut plant = PlantEmulatorConfig::ideal(cfg.scenario.scenario, cfg.scenario.vehicle, 0.02);
    plant.latency = LatencyConfig { mean_s: 0.04, jitter_s: 0.0 };
    plant.noise.position_var_m2 = 1e-4;
    plant.seed = 17;
    let (_, emu) = run_local_twin(cfg, &relaxed(), plant).unwrap();
    assert_eq!(emu.median_action_age(), Some(2.0));
    let sd = emu.position_error_std();
    assert!((sd - 1e-2).abs() < 1e-3, "estimate error std {sd}");
}

#[test]
fn replaying_a_trace_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.ndjson");
    let cfg = session(ScenarioConfig::coop(), 2, 21);
    let mut plant = PlantEmulatorConfig::ideal(cfg.scenario.scenario, cfg.scenario.vehicle, cfg.scenario.dt);
    plant.noise.position_var_m2 = 1e-3;
    plant.latency.mean_s = 0.1;
    plant.seed = 4;
    let opts = ServerOptions {
        trace: Some(path.clone()),
        ..relaxed()
    };
    let (live, _) = run_local_twin(cfg.clone(), &opts, plant).unwrap();
    let events = read_trace(&path).unwrap();
    let (again, out) = replay(cfg, &events).unwrap();
    assert_eq!(again.records, live.records);
    assert_eq!(again.trajectory, live.trajectory);
    assert_eq!(untimed(out), untimed(recorded_outbound(&events)));
}

#[test]
fn every_estimate_gets_one_echoing_answer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.ndjson");
    let cfg = session(ScenarioConfig::coop(), 1, 8);
    let plant = PlantEmulatorConfig::ideal(cfg.scenario.scenario, cfg.scenario.vehicle, cfg.scenario.dt);
    let opts = ServerOptions {
        trace: Some(path.clone()),
        ..relaxed()
    };
    run_local_twin(cfg, &opts, plant).unwrap();
    let events = read_trace(&path).unwrap();
    let mut asked = Vec::new();
    for e in &events {
        if let twinmarl_twin::trace::TraceEvent::In { msgs, .. } = e {
            asked.extend(msgs.iter().map(|m| m.seq));
        }
    }
    let answered: Vec<u64> = recorded_outbound(&events).iter().filter_map(|m| m.action().map(|a| a.0)).collect();
    assert_eq!(asked, answered);
    let out_seqs: Vec<u64> = recorded_outbound(&events).iter().map(|m| m.seq).collect();
    assert!(out_seqs.windows(2).all(|w| w[0] < w[1]));
}

fn send(s: &mut TcpStream, seq: u64, payload: Payload) {
    let m = TwinSyncMessage { agent_id: 0, seq, sent_ns: 0, payload };
    s.write_all(m.encode().as_bytes()).unwrap();
}

fn estimate() -> Payload {
    Payload::StateEstimate { x: 0.0, y: 0.0, yaw: 0.0, v: 0.0 }
}

#[test]
fn silent_plant_triggers_sync_loss_within_three_ticks() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let opts = ServerOptions {
        period: Duration::from_millis(50),
        ..ServerOptions::default()
    };
    let server = thread::spawn(move || serve_twin(session(ScenarioConfig::coop(), 4, 1), listener, &opts));
    let mut s = TcpStream::connect(addr).unwrap();
    send(&mut s, 0, Payload::Hello { version: 1, role: "plant".into() });
    for seq in 1..=5 {
        send(&mut s, seq, estimate());
        thread::sleep(Duration::from_millis(5));
    }
    // the plant dies mid-episode
    let died = Instant::now();
    drop(s);
    let report = server.join().unwrap().unwrap();
    assert!(died.elapsed() < Duration::from_millis(150));
    assert_eq!(report.sync_losses, vec![0]);
    assert!(report.records.is_empty());
}

#[test]
fn stalled_plant_triggers_sync_loss() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let opts = ServerOptions {
        period: Duration::from_millis(30),
        ..ServerOptions::default()
    };
    let server = thread::spawn(move || serve_twin(session(ScenarioConfig::coop(), 4, 1), listener, &opts));
    let mut s = TcpStream::connect(addr).unwrap();
    send(&mut s, 0, Payload::Hello { version: 1, role: "plant".into() });
    send(&mut s, 1, estimate());
    let silent = Instant::now();
    let report = server.join().unwrap().unwrap();
    let waited = silent.elapsed();
    assert_eq!(report.sync_losses, vec![0]);
    assert!(waited >= Duration::from_millis(85) && waited < Duration::from_millis(400), "{waited:?}");
    drop(s);
}

#[test]
fn malformed_message_closes_with_diagnostic() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || serve_twin(session(ScenarioConfig::coop(), 1, 1), listener, &relaxed()));
    let mut s = TcpStream::connect(addr).unwrap();
    send(&mut s, 0, Payload::Hello { version: 1, role: "plant".into() });
    s.write_all(b"{not json}\n").unwrap();
    let report = server.join().unwrap().unwrap();
    assert!(report.error.as_deref().unwrap().contains("malformed"));
    let mut last = None;
    for line in BufReader::new(s).lines() {
        last = Some(TwinSyncMessage::decode(&line.unwrap()).unwrap());
    }
    match last.unwrap().payload {
        Payload::Bye { reason } => assert!(reason.contains("malformed")),
        p => panic!("expected bye, got {p:?}"),
    }
}

#[test]
fn wrong_version_is_refused() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || serve_twin(session(ScenarioConfig::coop(), 1, 1), listener, &relaxed()));
    let mut s = TcpStream::connect(addr).unwrap();
    send(&mut s, 0, Payload::Hello { version: 99, role: "plant".into() });
    let report = server.join().unwrap().unwrap();
    assert!(report.error.unwrap().contains("hello"));
}

#[test]
fn refused_connection_gives_up_after_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut plant = PlantEmulatorConfig::ideal(ScenarioKind::Coop, Default::default(), 0.02);
    plant.connect_attempts = 3;
    plant.backoff_ms = 10;
    let t = Instant::now();
    let err = twinmarl_twin::run_plant_emulator(&plant, &format!("127.0.0.1:{port}")).unwrap_err();
    assert!(matches!(err, twinmarl_twin::TwinError::Connect { attempts: 3, .. }));
    // backoff 10 ms then 20 ms
    assert!(t.elapsed() >= Duration::from_millis(30));
}

#[test]
fn invalid_plant_configs_are_rejected() {
    let base = PlantEmulatorConfig::ideal(ScenarioKind::Coop, Default::default(), 0.02);
    let mut c = base.clone();
    c.latency.mean_s = -0.01;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.noise.yaw_var_rad2 = f64::NAN;
    assert!(c.validate().is_err());
    let mut c = base;
    c.offsets.friction = -10.0;
    assert!(c.validate().is_err());
}

#[test]
fn wall_clock_loop_runs_in_real_time() {
    let scenario = ScenarioConfig {
        horizon_steps: 40,
        ..ScenarioConfig::coop()
    };
    let cfg = session(scenario, 1, 2);
    let mut plant = PlantEmulatorConfig::ideal(cfg.scenario.scenario, cfg.scenario.vehicle, 0.02);
    plant.clock = twinmarl_twin::Clock::Wall;
    let opts = ServerOptions {
        period: Duration::from_millis(20),
        clock: twinmarl_twin::Clock::Wall,
        // a loaded single-core host can starve either thread for a while
        sync_timeout_ticks: 25,
        ..ServerOptions::default()
    };
    let t = Instant::now();
    let (twin, emu) = run_local_twin(cfg, &opts, plant).unwrap();
    assert!(twin.sync_losses.is_empty());
    assert_eq!(twin.records.len(), 1);
    assert!(t.elapsed() >= Duration::from_millis(40 * 20 - 40));
    assert!(!emu.rows.is_empty());
}
