//! Learning math against independent oracles: finite-difference gradients,
//! brute-force advantages, and probability invariants.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use twinmarl_core::curiosity::{Icm, IcmSample};
use twinmarl_core::gail::Discriminator;
use twinmarl_core::nn::{clip_grad_norm, softmax};
use twinmarl_core::policy::{categorical, PolicyNet};
use twinmarl_core::ppo::{approx_kl, clipped_surrogate, gae, ppo_loss_and_grad, GaeStep, LossWeights, Sample};
use twinmarl_core::vehicle::{Action, ScenarioKind};
use twinmarl_core::SimRng;

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    d / s.max(1e-300)
}

/// Every trainable part of the learner: policy (actor + critic), discriminator
/// and curiosity module. Their losses touch disjoint parameters, so the total
/// is their sum.
struct Fixture {
    net: PolicyNet,
    disc: Discriminator,
    icm: Icm,
    samples: Vec<Sample>,
    demo_obs: Vec<Vec<f64>>,
    demo_act: Vec<Action>,
    next_obs: Vec<Vec<f64>>,
    weights: LossWeights,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = SimRng::seed_from_u64(seed);
        let obs_len = 5;
        let kind = ScenarioKind::Race;
        let [t, s] = kind.action_dims();
        let mut net = PolicyNet::new(obs_len, kind, 8, 2, &mut rng);
        // move away from the tiny output initialization so curvature matters
        for p in net.actor.params.iter_mut() {
            *p += 0.3 * normal(&mut rng);
        }
        let obs = |rng: &mut SimRng| (0..obs_len).map(|_| normal(rng)).collect::<Vec<f64>>();
        let act = |rng: &mut SimRng| Action::new(rng.random_range(0..t), rng.random_range(0..s));
        let mut samples = Vec::new();
        for i in 0..10 {
            let o = obs(&mut rng);
            let a = act(&mut rng);
            let lp = net.forward(&o).unwrap().log_prob(a);
            // a few far outside the clip range, the rest well inside it
            let shift = if i % 4 == 0 { 0.6 * if i % 8 == 0 { 1.0 } else { -1.0 } } else { 0.08 * normal(&mut rng).clamp(-1.0, 1.0) };
            samples.push(Sample {
                obs: o,
                action: a,
                log_prob: lp + shift,
                advantage: normal(&mut rng),
                ret: normal(&mut rng),
            });
        }
        let demo_obs = (0..6).map(|_| obs(&mut rng)).collect();
        let demo_act = (0..6).map(|_| act(&mut rng)).collect();
        let next_obs = (0..10).map(|_| obs(&mut rng)).collect();
        let disc = Discriminator::new(obs_len, net.heads, 8, &mut rng);
        let icm = Icm::new(obs_len, net.heads, 6, &mut rng);
        Self {
            net,
            disc,
            icm,
            samples,
            demo_obs,
            demo_act,
            next_obs,
            weights: LossWeights {
                epsilon: 0.2,
                beta: 0.05,
                value_coef: 0.5,
                bc_eta: Some(0.7),
            },
        }
    }

    fn params(&self) -> Vec<f64> {
        [&self.net.actor.params, &self.net.critic.params, &self.disc.net.params, &self.icm.encoder.params, &self.icm.forward.params, &self.icm.inverse.params]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    fn set_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for v in [
            &mut self.net.actor.params,
            &mut self.net.critic.params,
            &mut self.disc.net.params,
            &mut self.icm.encoder.params,
            &mut self.icm.forward.params,
            &mut self.icm.inverse.params,
        ] {
            let n = v.len();
            v.copy_from_slice(&p[off..off + n]);
            off += n;
        }
    }

    fn loss_and_grad(&self) -> (f64, Vec<f64>) {
        let batch: Vec<&Sample> = self.samples.iter().collect();
        let dobs: Vec<&[f64]> = self.demo_obs.iter().map(Vec::as_slice).collect();
        let (parts, ga, gc) = ppo_loss_and_grad(&self.net, &batch, Some((&dobs, &self.demo_act)), &self.weights);
        let pol: Vec<(&[f64], Action)> = self.samples.iter().map(|s| (s.obs.as_slice(), s.action)).collect();
        let dem: Vec<(&[f64], Action)> = dobs.iter().copied().zip(self.demo_act.iter().copied()).collect();
        let (dl, gd) = self.disc.loss_and_grad(&dem, &pol);
        let icm_batch: Vec<IcmSample> = self
            .samples
            .iter()
            .zip(&self.next_obs)
            .map(|(s, n)| IcmSample {
                obs: &s.obs,
                action: s.action,
                next_obs: n,
            })
            .collect();
        let (il, gi) = self.icm.loss_and_grad(&icm_batch);
        let g = [ga, gc, gd, gi.encoder, gi.forward, gi.inverse].concat();
        (parts.total + dl + il, g)
    }
}

#[test]
fn total_loss_gradient_matches_central_differences() {
    for seed in 0..3 {
        let mut f = Fixture::new(seed);
        let (_, analytic) = f.loss_and_grad();
        let p0 = f.params();
        let h = 1e-6;
        let mut numeric = vec![0.0; p0.len()];
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] = p0[i] + h;
            f.set_params(&p);
            let up = f.loss_and_grad().0;
            p[i] = p0[i] - h;
            f.set_params(&p);
            let down = f.loss_and_grad().0;
            numeric[i] = (up - down) / (2.0 * h);
        }
        f.set_params(&p0);
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-4, "seed {seed}: relative error {e:e} over {} parameters", p0.len());
    }
}

/// Brute force: discounted sum of TD residuals along one agent's episode.
fn gae_oracle(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let next = |t: usize| if t + 1 < t_len { values[t + 1] } else { bootstrap };
    (0..t_len)
        .map(|t| (t..t_len).map(|k| (gamma * lambda).powi((k - t) as i32) * (rewards[k] + gamma * next(k) - values[k])).sum())
        .collect()
}

/// Monte-Carlo return minus value (the λ = 1 special case, computed directly).
fn mc_advantage(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let t_len = rewards.len();
    (0..t_len)
        .map(|t| {
            let g: f64 = (t..t_len).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
            g + gamma.powi((t_len - t) as i32) * bootstrap - values[t]
        })
        .collect()
}

struct Episode {
    rewards: Vec<f64>,
    values: Vec<f64>,
    bootstrap: f64,
}

/// Interleave episodes into one batch the way agents share a buffer.
fn interleave(eps: &[Episode], rng: &mut SimRng) -> (Vec<GaeStep>, Vec<(usize, usize)>) {
    let mut cursor = vec![0usize; eps.len()];
    let mut last: Vec<Option<usize>> = vec![None; eps.len()];
    let mut steps: Vec<GaeStep> = Vec::new();
    let mut origin = Vec::new();
    loop {
        let open: Vec<usize> = (0..eps.len()).filter(|&e| cursor[e] < eps[e].rewards.len()).collect();
        if open.is_empty() {
            break;
        }
        let e = open[rng.random_range(0..open.len())];
        let t = cursor[e];
        let ep = &eps[e];
        let end = t + 1 == ep.rewards.len();
        let i = steps.len();
        if let Some(prev) = last[e] {
            steps[prev].next = Some(i);
        }
        steps.push(GaeStep {
            reward: ep.rewards[t],
            value: ep.values[t],
            next_value: if end { ep.bootstrap } else { ep.values[t + 1] },
            episode_end: end,
            next: None,
        });
        origin.push((e, t));
        last[e] = Some(i);
        cursor[e] += 1;
    }
    (steps, origin)
}

#[test]
fn gae_matches_brute_force_on_logged_episodes() {
    let mut rng = SimRng::seed_from_u64(17);
    let eps: Vec<Episode> = (0..100)
        .map(|_| {
            let n = rng.random_range(1..80);
            let truncated = rng.random_bool(0.3);
            Episode {
                rewards: (0..n).map(|_| normal(&mut rng)).collect(),
                values: (0..n).map(|_| normal(&mut rng)).collect(),
                bootstrap: if truncated { normal(&mut rng) } else { 0.0 },
            }
        })
        .collect();
    let (steps, origin) = interleave(&eps, &mut rng);
    let gamma = 0.99;
    let (adv, ret) = gae(&steps, gamma, 1.0);
    let mut worst: f64 = 0.0;
    for (i, &(e, t)) in origin.iter().enumerate() {
        let oracle = mc_advantage(&eps[e].rewards, &eps[e].values, eps[e].bootstrap, gamma);
        worst = worst.max((adv[i] - oracle[t]).abs());
        assert!((ret[i] - (adv[i] + eps[e].values[t])).abs() < 1e-12);
    }
    assert!(worst <= 1e-9, "max deviation {worst:e}");
    for lambda in [0.0, 0.5, 0.98] {
        let (adv, _) = gae(&steps, gamma, lambda);
        for (i, &(e, t)) in origin.iter().enumerate() {
            let oracle = gae_oracle(&eps[e].rewards, &eps[e].values, eps[e].bootstrap, gamma, lambda);
            assert!((adv[i] - oracle[t]).abs() <= 1e-9, "lambda {lambda}");
        }
    }
}

proptest! {
    #[test]
    fn surrogate_is_the_pessimistic_branch(ratio in 0.0..3.0f64, adv in -5.0..5.0f64, eps in 0.05..0.5f64) {
        let s = clipped_surrogate(ratio, adv, eps);
        prop_assert!(s <= ratio * adv + 1e-15);
        prop_assert!(s <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv + 1e-15);
        prop_assert!(s == ratio * adv || s == ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
    }

    #[test]
    fn kl_estimate_is_non_negative(a in -10.0..0.0f64, b in -10.0..0.0f64) {
        prop_assert!(approx_kl(a, b) >= 0.0);
        prop_assert_eq!(approx_kl(a, a), 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0..50.0f64, 1..8)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn categorical_draws_are_in_range(z in prop::collection::vec(-5.0..5.0f64, 1..6), u in 0.0..1.0f64) {
        let p = softmax(&z);
        let i = categorical(&p, u);
        prop_assert!(i < p.len());
        // inverse CDF: the cumulative mass before i is at most u
        prop_assert!(p[..i].iter().sum::<f64>() <= u + 1e-12);
    }

    #[test]
    fn policy_heads_are_distributions(seed in 0u64..1000, obs in prop::collection::vec(-3.0..3.0f64, 4)) {
        let mut rng = SimRng::seed_from_u64(seed);
        for kind in [ScenarioKind::Coop, ScenarioKind::Race] {
            let net = PolicyNet::new(4, kind, 6, 2, &mut rng);
            let out = net.forward(&obs).unwrap();
            for (h, dim) in out.probs.iter().zip(kind.action_dims()) {
                prop_assert_eq!(h.len(), dim);
                prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let d = net.sample(&obs, &mut rng).unwrap();
            prop_assert!((d.log_prob - out.log_prob(d.action)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_clipping_caps_the_norm(g in prop::collection::vec(-10.0..10.0f64, 1..20), cap in 0.01..5.0f64) {
        let mut v = g.clone();
        let before = clip_grad_norm(&mut v, cap);
        let after = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= cap * (1.0 + 1e-12) || after == before);
        prop_assert!(after <= before + 1e-12);
    }
}
