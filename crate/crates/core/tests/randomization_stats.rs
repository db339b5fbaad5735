//! Sampling statistics of the randomization layer.

use rand::SeedableRng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use twinmarl_core::randomization::{Degree, DynamicsGrids, RandomizationProfile};
use twinmarl_core::vehicle::ScenarioKind;
use twinmarl_core::SimRng;

const N: usize = 100_000;

/// Per-component samples of observation noise followed by the two action components.
fn draws(degree: Degree, kind: ScenarioKind, seed: u64) -> Vec<Vec<f64>> {
    let p = RandomizationProfile::new(degree);
    let mut rng = SimRng::seed_from_u64(seed);
    let width = p.observation_stds(kind).len() + 2;
    let mut cols = vec![Vec::with_capacity(N); width];
    for _ in 0..N {
        let o = p.sample_observation_noise(kind, &mut rng);
        let (t, s) = p.sample_action_noise(&mut rng);
        for (c, v) in cols.iter_mut().zip(o.into_iter().chain([t, s])) {
            c.push(v);
        }
    }
    cols
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standard deviations at xi = 1, straight from the variance table.
fn table(kind: ScenarioKind) -> Vec<f64> {
    let mut v = match kind {
        ScenarioKind::Coop => vec![1e-4, 1e-4, 3.0625e-4, 1e-4],
        ScenarioKind::Race => {
            let mut v = vec![1e-4];
            v.extend([1e-6; 27]);
            v
        }
    };
    v.extend([2.5e-3, 2.5e-3]);
    v.into_iter().map(f64::sqrt).collect()
}

#[test]
fn unit_degree_noise_matches_the_table_within_two_percent() {
    for kind in [ScenarioKind::Coop, ScenarioKind::Race] {
        let cols = draws(Degree::Ldr, kind, 1);
        for (i, (c, want)) in cols.iter().zip(table(kind)).enumerate() {
            let sd = variance(c).sqrt();
            assert!((sd / want - 1.0).abs() < 0.02, "{kind} component {i}: {sd} vs {want}");
            let mean = c.iter().sum::<f64>() / N as f64;
            assert!(mean.abs() < 5.0 * want / (N as f64).sqrt(), "{kind} component {i} biased");
        }
    }
}

#[test]
fn doubling_the_degree_quadruples_the_variance() {
    let chi = ChiSquared::new((N - 1) as f64).unwrap();
    // two-sided 99.9% acceptance band for (n-1) s^2 / sigma^2
    let (lo, hi) = (chi.inverse_cdf(0.0005), chi.inverse_cdf(0.9995));
    for kind in [ScenarioKind::Coop, ScenarioKind::Race] {
        let cols = draws(Degree::Hdr, kind, 2);
        for (i, (c, sd1)) in cols.iter().zip(table(kind)).enumerate() {
            let stat = (N - 1) as f64 * variance(c) / (4.0 * sd1 * sd1);
            assert!(lo < stat && stat < hi, "{kind} component {i}: statistic {stat} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn grids_have_the_published_sizes_and_endpoints() {
    let g = DynamicsGrids::default();
    assert_eq!(g.cardinality(ScenarioKind::Coop), 25);
    assert_eq!(g.cardinality(ScenarioKind::Race), 10);
    for (grid, n, a, b) in [
        (g.friction, 25, -0.1, 0.1),
        (g.comm_delay_s, 25, 0.0, 0.01),
        (g.cg_m, 10, -0.05, 0.05),
        (g.suspension_npm, 10, -100.0, 100.0),
        (g.tire_nprad, 10, -2.5, 2.5),
    ] {
        let pts = grid.points();
        assert_eq!(pts.len(), n);
        assert_eq!(pts[0], a);
        // published steps are rounded, so the last point lands within half a step of b
        assert!((pts[n - 1] - b).abs() < grid.step / 2.0, "{pts:?}");
        assert!(pts.windows(2).all(|w| w[1] > w[0]));
    }
    for degree in [Degree::Ldr, Degree::Hdr] {
        let p = RandomizationProfile::new(degree);
        let d = p.assign_replica_dynamics(ScenarioKind::Coop, 25).unwrap();
        assert_eq!(d[0].offsets.friction, -0.1 * degree.xi());
        let r = p.assign_replica_dynamics(ScenarioKind::Race, 10).unwrap();
        assert_eq!(r[0].offsets.cornering_nprad, -2.5 * degree.xi());
        assert!(p.assign_replica_dynamics(ScenarioKind::Race, 25).is_err());
    }
}
