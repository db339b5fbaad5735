//! Adversarial imitation: a discriminator over (observation, action) pairs
//! whose confidence that a pair came from the demonstrations becomes a reward.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::LearnError;
use crate::nn::{clip_grad_norm, sigmoid, Adam, Mlp, MlpCache};
use crate::ppo::GailConfig;
use crate::vehicle::Action;
use crate::SimRng;

pub const GAIL_REWARD_MAX: f64 = 10.0;

/// `-ln(1 - d)` clipped to `[0, 10]`.
pub fn gail_reward_from_prob(d: f64) -> f64 {
    (-(1.0 - d).ln()).clamp(0.0, GAIL_REWARD_MAX)
}

/// Same as [`gail_reward_from_prob`] from the discriminator logit, without
/// the cancellation of `1 - sigmoid(z)`: `-ln(1 - sigmoid(z)) = softplus(z)`.
pub fn gail_reward_from_logit(z: f64) -> f64 {
    softplus(z).clamp(0.0, GAIL_REWARD_MAX)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub heads: [usize; 2],
    pub net: Mlp,
    opt: Adam,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(obs_len: usize, heads: [usize; 2], encoding: usize, rng: &mut R) -> Self {
        let net = Mlp::new(&[obs_len + heads[0] + heads[1], encoding, encoding, 1], 1.0, rng);
        let opt = Adam::new(net.param_count());
        Self { heads, net, opt }
    }

    /// Observation followed by one-hot throttle and steering.
    pub fn input(&self, obs: &[f64], a: Action) -> Vec<f64> {
        let mut x = Vec::with_capacity(obs.len() + self.heads[0] + self.heads[1]);
        x.extend_from_slice(obs);
        x.extend((0..self.heads[0]).map(|j| if j == a.throttle { 1.0 } else { 0.0 }));
        x.extend((0..self.heads[1]).map(|j| if j == a.steer { 1.0 } else { 0.0 }));
        x
    }

    pub fn logit(&self, obs: &[f64], a: Action) -> f64 {
        self.net.forward(&self.input(obs, a))[0]
    }

    /// Probability that the pair was demonstrated.
    pub fn prob(&self, obs: &[f64], a: Action) -> f64 {
        sigmoid(self.logit(obs, a))
    }

    pub fn reward(&self, obs: &[f64], a: Action) -> f64 {
        gail_reward_from_logit(self.logit(obs, a))
    }

    /// Mean binary cross-entropy (demo label 1, policy label 0) over both
    /// batches, with its parameter gradient.
    pub fn loss_and_grad(&self, demo: &[(&[f64], Action)], policy: &[(&[f64], Action)]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.net.param_count()];
        let mut cache = MlpCache::default();
        let n = (demo.len() + policy.len()).max(1) as f64;
        let mut loss = 0.0;
        for (pairs, label) in [(demo, 1.0), (policy, 0.0)] {
            for &(o, a) in pairs {
                let z = self.net.forward_cached(&self.input(o, a), &mut cache)[0];
                // BCE with logits: softplus(z) - y z
                loss += (softplus(z) - label * z) / n;
                self.net.backward(&mut cache, &[(sigmoid(z) - label) / n], &mut g, None);
            }
        }
        (loss, g)
    }

    /// Train for `epochs` passes over the policy pairs, each minibatch matched
    /// with an equally sized random demonstration batch. Returns the mean loss.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        demo_obs: &[Vec<f64>],
        demo_actions: &[Action],
        policy_obs: &[&[f64]],
        policy_actions: &[Action],
        cfg: &GailConfig,
        epochs: usize,
        batch: usize,
        rng: &mut SimRng,
    ) -> Result<f64, LearnError> {
        let snapshot = (self.net.clone(), self.opt.clone());
        let mut order: Vec<usize> = (0..policy_obs.len()).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                let pol: Vec<(&[f64], Action)> = chunk.iter().map(|&i| (policy_obs[i], policy_actions[i])).collect();
                let dem: Vec<(&[f64], Action)> = (0..chunk.len())
                    .map(|_| {
                        let i = rng.random_range(0..demo_obs.len());
                        (demo_obs[i].as_slice(), demo_actions[i])
                    })
                    .collect();
                let (loss, mut g) = self.loss_and_grad(&dem, &pol);
                if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    (self.net, self.opt) = snapshot;
                    return Err(LearnError::NonFiniteLoss { what: "gail" });
                }
                clip_grad_norm(&mut g, 0.5);
                self.opt.step(&mut self.net.params, &g, cfg.learning_rate);
                total += loss;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}
