//! Actor-critic network with one categorical head per action dimension.
//!
//! The actor and the critic are separate trunks of the same shape; the
//! actor's output is the concatenated logits of the throttle and steering
//! heads.

use rand::Rng;

use crate::error::LearnError;
use crate::nn::{log_softmax, Mlp};
use crate::vehicle::{Action, ScenarioKind};

/// Sum over heads of the categorical entropies.
pub fn entropy(probs: &[Vec<f64>; 2]) -> f64 {
    probs
        .iter()
        .flat_map(|p| p.iter())
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Inverse-CDF draw from a categorical distribution given `u` in `[0, 1)`.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub log_probs: [Vec<f64>; 2],
    pub probs: [Vec<f64>; 2],
    pub value: f64,
}

impl PolicyOutput {
    pub fn log_prob(&self, a: Action) -> f64 {
        self.log_probs[0][a.throttle] + self.log_probs[1][a.steer]
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    pub fn greedy(&self) -> Action {
        let arg = |p: &Vec<f64>| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        Action::new(arg(&self.probs[0]), arg(&self.probs[1]))
    }
}

/// A sampled action with the quantities PPO needs later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub scenario: ScenarioKind,
    pub heads: [usize; 2],
    pub actor: Mlp,
    pub critic: Mlp,
}

fn layer_sizes(obs_len: usize, hidden: usize, layers: usize, out: usize) -> Vec<usize> {
    let mut s = vec![obs_len];
    s.extend(std::iter::repeat_n(hidden, layers));
    s.push(out);
    s
}

impl PolicyNet {
    /// Random initialization; the actor's output layer is scaled down so the
    /// initial policy is close to uniform.
    pub fn new<R: Rng + ?Sized>(obs_len: usize, scenario: ScenarioKind, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let heads = scenario.action_dims();
        Self {
            scenario,
            heads,
            actor: Mlp::new(&layer_sizes(obs_len, hidden, layers, heads[0] + heads[1]), 0.01, rng),
            critic: Mlp::new(&layer_sizes(obs_len, hidden, layers, 1), 1.0, rng),
        }
    }

    /// All-zero weights: uniform heads and zero value everywhere.
    pub fn zeros(obs_len: usize, scenario: ScenarioKind, hidden: usize, layers: usize) -> Self {
        let heads = scenario.action_dims();
        Self {
            scenario,
            heads,
            actor: Mlp::zeros(&layer_sizes(obs_len, hidden, layers, heads[0] + heads[1])),
            critic: Mlp::zeros(&layer_sizes(obs_len, hidden, layers, 1)),
        }
    }

    pub fn obs_len(&self) -> usize {
        self.actor.input_len()
    }

    pub fn hidden(&self) -> (usize, usize) {
        let s = self.actor.sizes();
        (s[1], s.len() - 2)
    }

    pub fn check_obs(&self, obs: &[f64]) -> Result<(), LearnError> {
        if obs.len() != self.obs_len() {
            return Err(LearnError::ObservationWidth {
                expected: self.obs_len(),
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// Per-head log-probabilities from concatenated logits.
    pub fn split_log_probs(&self, logits: &[f64]) -> [Vec<f64>; 2] {
        let (a, b) = logits.split_at(self.heads[0]);
        [log_softmax(a), log_softmax(b)]
    }

    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput, LearnError> {
        self.check_obs(obs)?;
        let log_probs = self.split_log_probs(&self.actor.forward(obs));
        let probs = [
            log_probs[0].iter().map(|v| v.exp()).collect(),
            log_probs[1].iter().map(|v| v.exp()).collect(),
        ];
        Ok(PolicyOutput {
            log_probs,
            probs,
            value: self.critic.forward(obs)[0],
        })
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, LearnError> {
        self.check_obs(obs)?;
        Ok(self.critic.forward(obs)[0])
    }

    /// Sample one action; draws exactly one uniform per head.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Decision, LearnError> {
        let out = self.forward(obs)?;
        let u0: f64 = rng.random();
        let u1: f64 = rng.random();
        let action = Action::new(categorical(&out.probs[0], u0), categorical(&out.probs[1], u1));
        Ok(Decision {
            action,
            log_prob: out.log_prob(action),
            value: out.value,
        })
    }

    /// Most likely action of each head.
    pub fn greedy(&self, obs: &[f64]) -> Result<Action, LearnError> {
        Ok(self.forward(obs)?.greedy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_uniform_heads() {
        let net = PolicyNet::zeros(14, ScenarioKind::Coop, 128, 3);
        let out = net.forward(&[0.7; 14]).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.probs[0].iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert!(out.probs[1].iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let expected = 2f64.ln() + 3f64.ln();
        assert!((out.entropy() - expected).abs() < 1e-15);
    }

    #[test]
    fn head_cardinalities_follow_scenario() {
        let mut rng = crate::SimRng::seed_from_u64(3);
        let coop = PolicyNet::new(14, ScenarioKind::Coop, 16, 3, &mut rng);
        let race = PolicyNet::new(28, ScenarioKind::Race, 16, 3, &mut rng);
        assert_eq!(coop.actor.output_len(), 5);
        assert_eq!(race.actor.output_len(), 6);
        let out = race.forward(&[1.0; 28]).unwrap();
        for p in &out.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(coop.forward(&[0.0; 3]), Err(LearnError::ObservationWidth { .. })));
    }

    #[test]
    fn categorical_inverse_cdf() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(categorical(&p, 0.0), 0);
        assert_eq!(categorical(&p, 0.19), 0);
        assert_eq!(categorical(&p, 0.2), 1);
        assert_eq!(categorical(&p, 0.75), 2);
        assert_eq!(categorical(&p, 0.999_999_999), 2);
    }
}
