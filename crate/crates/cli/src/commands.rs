//! Subcommand implementations. Each writes its outputs and a manifest into
//! its output location and returns what it computed.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use rand::SeedableRng;
use serde::Serialize;
use twinmarl_core::checkpoint::load_policy;
use twinmarl_core::demo::{record_demonstrations, Demonstrations};
use twinmarl_core::eval::{
    evaluate_sim, gap_table, parse_records_csv, records_csv, summarize, summary_csv, Driver, EvalOptions, KpiRecord, KpiStats, SummaryKey,
};
use twinmarl_core::fgm::fgm_race_policy;
use twinmarl_core::policy::PolicyNet;
use twinmarl_core::randomization::{Degree, RandomizationProfile, ReplicaDynamics};
use twinmarl_core::replica::{bench_csv, benchmark_scaling, BenchRow, ParallelMode, ReplicaSpec};
use twinmarl_core::train::{checkpoint_path, policy_count, train as run_training, TrainOutcome, TrainSetup};
use twinmarl_core::vehicle::ScenarioKind;
use twinmarl_core::world::{FamilySetup, World};
use twinmarl_core::SimRng;
use twinmarl_twin::session::SessionConfig;
use twinmarl_twin::{run_local_twin, run_plant_emulator, serve_twin};

use crate::config::ExperimentConfig;
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::{Cli, PolicyArgs, Realms};

pub const KPI_FILE: &str = "kpi.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GAP_FILE: &str = "gap.csv";
pub const PLOT_FILE: &str = "plot_kpis.gp";

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    mut cfg: ExperimentConfig,
    out: &Path,
    steps: Option<u64>,
    demos: Option<&Path>,
    replicas: Option<usize>,
    workers: Option<usize>,
    mode: Option<ParallelMode>,
) -> anyhow::Result<TrainOutcome> {
    if let Some(s) = steps {
        cfg.train.as_mut().expect("resolved config").max_steps = s;
    }
    if let Some(r) = replicas {
        cfg.parallel.replicas = Some(r);
    }
    if let Some(w) = workers {
        cfg.parallel.workers = Some(w);
    }
    if let Some(m) = mode {
        cfg.parallel.mode = m;
    }
    let cfg = cfg.resolve(&Default::default())?;
    if cfg.parallel.mode == ParallelMode::Instances {
        bail!("training runs replicas in one process; use --mode environments or agents");
    }
    let demos = match demos {
        Some(p) => Some(Demonstrations::load(p).with_context(|| format!("demonstrations {}", p.display()))?),
        None if cfg.train().needs_demonstrations() => {
            bail!("this training configuration uses imitation terms; pass --demos (see `demo-record`)")
        }
        None => None,
    };
    fs::create_dir_all(out)?;
    Manifest::new("train", &cfg).write(&out.join(MANIFEST_FILE))?;
    let t = Instant::now();
    let outcome = run_training(TrainSetup {
        scenario: cfg.sim().clone(),
        geometry: cfg.geometry()?,
        profile: cfg.profile(),
        mode: cfg.parallel.mode,
        replicas: cfg.replicas(),
        workers: cfg.workers(),
        seed: cfg.seed,
        config: cfg.train().clone(),
        demos,
        out_dir: Some(out.to_path_buf()),
    })?;
    for i in &outcome.incidents {
        warn!("{i}");
    }
    println!(
        "trained {} polic{} in {:.1} s; {} episodes, {} successes; outputs in {}",
        outcome.policies.len(),
        if outcome.policies.len() == 1 { "y" } else { "ies" },
        t.elapsed().as_secs_f64(),
        outcome.episodes,
        outcome.successes,
        out.display()
    );
    Ok(outcome)
}

/// Resolve the policy source and its label.
pub fn driver(cfg: &ExperimentConfig, p: &PolicyArgs) -> anyhow::Result<(Driver, String)> {
    if p.fgm {
        return Ok((Driver::Fgm(cfg.fgm()), p.label.clone().unwrap_or_else(|| "fgm".into())));
    }
    if p.uniform {
        return Ok((Driver::Uniform, p.label.clone().unwrap_or_else(|| "uniform".into())));
    }
    if p.checkpoint.is_empty() {
        bail!("choose a policy: --checkpoint, --fgm or --uniform");
    }
    let family = cfg.geometry()?.spawns.len();
    let need = policy_count(cfg.scenario, family);
    let mut files: Vec<PathBuf> = Vec::new();
    for c in &p.checkpoint {
        if c.is_dir() {
            files.extend((0..need).map(|i| checkpoint_path(c, i, "final")));
        } else {
            files.push(c.clone());
        }
    }
    let nets = files
        .iter()
        .map(|f| load_policy(f).with_context(|| format!("checkpoint {}", f.display())))
        .collect::<anyhow::Result<Vec<PolicyNet>>>()?;
    let label = p.label.clone().unwrap_or_else(|| cfg.randomization.label().to_string());
    Ok((
        Driver::Policy {
            nets,
            greedy: cfg.evaluation.greedy,
        },
        label,
    ))
}

fn session_config(cfg: &ExperimentConfig, driver: Driver, label: &str, episodes: usize) -> anyhow::Result<SessionConfig> {
    Ok(SessionConfig {
        scenario: cfg.sim().clone(),
        geometry: cfg.geometry()?,
        profile: RandomizationProfile::new(cfg.evaluation.randomization),
        seed: cfg.seed,
        driver,
        episodes,
        label: label.to_string(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: &PolicyArgs,
    realm: Realms,
    episodes: Option<usize>,
    out: &Path,
    listen: Option<&str>,
    trace: Option<&Path>,
) -> anyhow::Result<Vec<KpiRecord>> {
    let (driver, label) = driver(cfg, policy)?;
    let episodes = episodes.unwrap_or(cfg.evaluation.episodes);
    if episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    fs::create_dir_all(out)?;
    Manifest::new("evaluate", cfg).write(&out.join(MANIFEST_FILE))?;
    let mut records = Vec::new();
    if matches!(realm, Realms::Sim | Realms::Both) {
        let opts = EvalOptions {
            episodes,
            seed: cfg.seed,
            label: label.clone(),
        };
        records.extend(evaluate_sim(
            cfg.sim(),
            cfg.geometry()?,
            RandomizationProfile::new(cfg.evaluation.randomization),
            &driver,
            &opts,
        )?);
    }
    if matches!(realm, Realms::Twin | Realms::Both) {
        let session = session_config(cfg, driver, &label, episodes)?;
        let mut opts = cfg.server_options();
        opts.trace = trace.map(Path::to_path_buf);
        let report = match listen {
            None => run_local_twin(session, &opts, cfg.plant_config())?.0,
            Some(addr) => {
                let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
                info!("waiting for a plant emulator on {addr}");
                serve_twin(session, listener, &opts)?
            }
        };
        if let Some(e) = &report.error {
            bail!("twin session failed: {e}");
        }
        if !report.sync_losses.is_empty() {
            bail!("twin session lost sync in episode(s) {:?}", report.sync_losses);
        }
        records.extend(report.records);
    }
    write(&out.join(KPI_FILE), &records_csv(&records))?;
    println!("{} KPI records for `{label}` in {}", records.len(), out.join(KPI_FILE).display());
    Ok(records)
}

fn bench_policy(cfg: &ExperimentConfig, family: usize) -> PolicyNet {
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let t = cfg.train();
    PolicyNet::new(cfg.sim().observation_len(family), cfg.scenario, t.hidden_units, t.num_layers, &mut rng)
}

/// Scaling sweep. Randomization is off so that every k is valid; the
/// policy is an untrained network so inference cost is included.
pub fn benchmark(cli: &Cli, cfg: &ExperimentConfig, ks: &[usize], mode: ParallelMode, budget: usize, workers: Option<usize>, out: &Path) -> anyhow::Result<Vec<BenchRow>> {
    if ks.is_empty() || ks.contains(&0) || budget == 0 {
        bail!("--k values and --budget must be positive");
    }
    let geometry = cfg.geometry()?;
    let workers = workers.unwrap_or(cfg.workers());
    fs::create_dir_all(out)?;
    Manifest::new("benchmark-parallel", cfg).write(&out.join(MANIFEST_FILE))?;
    let rows = match mode {
        ParallelMode::Instances => {
            let exe = std::env::current_exe()?;
            let mut rows: Vec<BenchRow> = Vec::new();
            for &k in ks {
                let share = budget.div_ceil(k);
                let t = Instant::now();
                let children = (0..k)
                    .map(|r| {
                        let mut c = Process::new(&exe);
                        if let Some(p) = &cli.config {
                            c.arg("--config").arg(p);
                        }
                        c.args(["--scenario", &cfg.scenario.to_string(), "--seed", &cfg.seed.to_string()]);
                        c.args(["bench-worker", "--replica", &r.to_string(), "--budget", &share.to_string()]);
                        c.spawn().context("starting a benchmark instance")
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                for mut ch in children {
                    if !ch.wait()?.success() {
                        bail!("a benchmark instance failed");
                    }
                }
                let secs = t.elapsed().as_secs_f64();
                let base = rows.first().map_or(secs, |r| r.wall_clock_s);
                info!("k={k}: {secs:.3} s");
                rows.push(BenchRow {
                    k,
                    mode,
                    wall_clock_s: secs,
                    agent_steps_per_s: (share * k) as f64 / secs,
                    reduction_pct: 100.0 * (1.0 - secs / base),
                });
            }
            rows
        }
        _ => {
            let net = bench_policy(cfg, geometry.spawns.len());
            let act = |obs: &[f64], rng: &mut SimRng| net.sample(obs, rng).expect("benchmark observation width").action;
            let spec = ReplicaSpec::new(mode, 1, cfg.sim().clone(), RandomizationProfile::new(Degree::Ndr), cfg.seed);
            benchmark_scaling(&spec, geometry, ks, workers, budget, &act)?
        }
    };
    let path = out.join(format!("scaling_{}_{}.csv", cfg.scenario, mode));
    write(&path, &bench_csv(&rows))?;
    print!("{}", bench_csv(&rows));
    Ok(rows)
}

/// One out-of-process replica: gather `budget` agent-steps and exit.
pub fn bench_worker(cfg: &ExperimentConfig, replica: usize, budget: usize) -> anyhow::Result<()> {
    let geometry = cfg.geometry()?;
    let size = geometry.spawns.len();
    let net = bench_policy(cfg, size);
    let mut world = World::new(
        cfg.sim().clone(),
        geometry,
        RandomizationProfile::new(Degree::Ndr),
        cfg.seed,
        vec![FamilySetup::isolated(replica, size, ReplicaDynamics::default())],
    )?;
    let mut rng = twinmarl_core::rng_for(cfg.seed, twinmarl_core::replica::STREAM_POLICY, replica as u64);
    let mut gathered = 0;
    while gathered < budget {
        let mut actions = Vec::with_capacity(size);
        for i in 0..size {
            actions.push(if world.is_alive(i) {
                gathered += 1;
                Some(net.sample(world.observation(i), &mut rng)?.action)
            } else {
                None
            });
        }
        world.step(&actions)?;
    }
    Ok(())
}

pub fn twin_serve(cfg: &ExperimentConfig, policy: &PolicyArgs, addr: &str, episodes: Option<usize>, trace: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let (driver, label) = driver(cfg, policy)?;
    let session = session_config(cfg, driver, &label, episodes.unwrap_or(cfg.evaluation.episodes))?;
    fs::create_dir_all(out)?;
    Manifest::new("twin-serve", cfg).write(&out.join(MANIFEST_FILE))?;
    let mut opts = cfg.server_options();
    opts.trace = trace.map(Path::to_path_buf);
    opts.accept_timeout = std::time::Duration::from_secs(3600);
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("twin server listening on {}", listener.local_addr()?);
    let report = serve_twin(session, listener, &opts)?;
    write(&out.join(KPI_FILE), &records_csv(&report.records))?;
    println!(
        "{} episodes complete, {} KPI records, sync losses: {:?}",
        report.completed,
        report.records.len(),
        report.sync_losses
    );
    if let Some(e) = report.error {
        bail!("session closed: {e}");
    }
    if !report.sync_losses.is_empty() {
        bail!("sync-loss in episode(s) {:?}", report.sync_losses);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PlantSummary {
    steps: usize,
    episodes: u64,
    estimate_error_std_m: f64,
    median_action_age_ticks: Option<f64>,
    stop_reason: Option<String>,
}

pub fn twin_emulate(cfg: &ExperimentConfig, connect: &str, log: Option<PathBuf>, out: &Path) -> anyhow::Result<()> {
    let mut plant = cfg.plant_config();
    plant.log_path = log;
    fs::create_dir_all(out)?;
    Manifest::new("twin-emulate", cfg).write(&out.join(MANIFEST_FILE))?;
    let r = run_plant_emulator(&plant, connect)?;
    let summary = PlantSummary {
        steps: r.rows.len(),
        episodes: r.episodes,
        estimate_error_std_m: r.position_error_std(),
        median_action_age_ticks: r.median_action_age(),
        stop_reason: r.bye_reason.clone(),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    write(&out.join("plant_report.json"), &(text.clone() + "\n"))?;
    println!("{text}");
    Ok(())
}

pub fn demo_record(cfg: &ExperimentConfig, laps: Option<usize>, out: &Path) -> anyhow::Result<Demonstrations> {
    if cfg.scenario != ScenarioKind::Race {
        bail!("demonstrations are recorded on the race track; pass --scenario race");
    }
    let laps = laps.unwrap_or(cfg.demo.laps);
    let fgm = cfg.fgm();
    let geometry = cfg.geometry()?;
    let demos = record_demonstrations(cfg.sim(), &geometry, cfg.demo.seed, laps, cfg.demo.max_steps, &mut |o| fgm_race_policy(o, &fgm))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    demos.save(out)?;
    let mut m = out.as_os_str().to_owned();
    m.push(".manifest.json");
    Manifest::new("demo-record", cfg).write(Path::new(&m))?;
    println!("{} steps over {laps} laps written to {}", demos.len(), out.display());
    Ok(demos)
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub stats: std::collections::BTreeMap<SummaryKey, KpiStats>,
    pub gaps: Vec<(String, Option<f64>)>,
}

const PLOT_STUB: &str = r#"# Box plots from summary.csv; any tool that reads CSV works equally well.
# Columns: policy,realm,kpi,agent,n,mean,median,q1,q3,min,max
set datafile separator ','
set terminal pngcairo size 900,500
set style fill empty
set boxwidth 0.4
set xtics rotate by -30
do for [k in "success reward duration"] {
    set output k.'.png'
    set title k
    plot 'summary.csv' every ::1 using 0:(strcol(3) eq k ? $8 : NaN):10:11:9:xticlabels(strcol(1).'/'.strcol(2)) \
         with candlesticks whiskerbars notitle, \
         '' every ::1 using 0:(strcol(3) eq k ? $7 : NaN):7:7:7 with candlesticks lw 2 notitle
}
"#;

pub fn report(_cfg: &ExperimentConfig, inputs: &[PathBuf], out: &Path) -> anyhow::Result<ReportOutput> {
    let mut records = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        records.extend(parse_records_csv(&text).with_context(|| format!("in {}", p.display()))?);
    }
    let stats = summarize(&records)?;
    let gaps: Vec<(String, Option<f64>)> = gap_table(&stats)
        .into_iter()
        .map(|(p, g)| match g {
            Ok(v) => (p, Some(v)),
            Err(e) => {
                warn!("gap for `{p}` undefined: {e}");
                (p, None)
            }
        })
        .collect();
    fs::create_dir_all(out)?;
    Manifest::new("report", _cfg).write(&out.join(MANIFEST_FILE))?;
    write(&out.join(SUMMARY_FILE), &summary_csv(&stats))?;
    let mut g = String::from(twinmarl_core::eval::GAP_HEADER);
    g.push('\n');
    for (p, v) in &gaps {
        g.push_str(&format!("{p},{}\n", v.map_or("NaN".into(), |v| v.to_string())));
    }
    write(&out.join(GAP_FILE), &g)?;
    write(&out.join(PLOT_FILE), PLOT_STUB)?;
    println!("{:<10} {:<5} {:<9} {:>5} {:>10} {:>10} {:>10} {:>10}", "policy", "realm", "kpi", "agent", "mean", "median", "q1", "q3");
    for ((p, r, k, a), s) in &stats {
        let a = a.map_or("-".into(), |a| a.to_string());
        println!("{p:<10} {r:<5} {k:<9} {a:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", s.mean, s.median, s.q1, s.q3);
    }
    for (p, v) in &gaps {
        match v {
            Some(v) => println!("sim-to-twin gap {p}: {v:.2}%"),
            None => println!("sim-to-twin gap {p}: undefined"),
        }
    }
    Ok(ReportOutput { stats, gaps })
}
