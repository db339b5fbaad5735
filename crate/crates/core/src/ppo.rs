//! Proximal policy optimization with an optional behavioral-cloning term.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::LearnError;
use crate::nn::{clip_grad_norm, Adam, MlpCache};
use crate::policy::PolicyNet;
use crate::vehicle::{Action, ScenarioKind};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    /// Weight η of the return objective; the cloning loss gets `1 - η`.
    pub strength: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { strength: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GailConfig {
    pub gamma: f64,
    pub strength: f64,
    pub encoding_size: usize,
    pub learning_rate: f64,
}

impl Default for GailConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            strength: 1e-2,
            encoding_size: 128,
            learning_rate: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CuriosityConfig {
    pub gamma: f64,
    pub strength: f64,
    pub encoding_size: usize,
    pub learning_rate: f64,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            strength: 2e-2,
            encoding_size: 256,
            learning_rate: 3e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub buffer_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Entropy bonus coefficient.
    pub beta: f64,
    /// Surrogate clip range.
    pub epsilon: f64,
    /// GAE λ.
    pub lambda: f64,
    pub num_epoch: usize,
    /// Agent-steps per policy.
    pub max_steps: u64,
    pub gamma: f64,
    pub kl_threshold: f64,
    pub value_coef: f64,
    /// Global gradient-norm cap per network; 0 disables.
    pub max_grad_norm: f64,
    pub normalize_advantage: bool,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub extrinsic_strength: f64,
    pub bc: Option<BcConfig>,
    pub gail: Option<GailConfig>,
    pub curiosity: Option<CuriosityConfig>,
    /// Agent-steps per policy between checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            buffer_size: 1024,
            learning_rate: 3e-4,
            lr_schedule: LrSchedule::Linear,
            beta: 1e-3,
            epsilon: 0.2,
            lambda: 0.98,
            num_epoch: 3,
            max_steps: 1_000_000,
            gamma: 0.99,
            kl_threshold: 0.02,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            normalize_advantage: true,
            hidden_units: 128,
            num_layers: 3,
            extrinsic_strength: 1.0,
            bc: None,
            gail: None,
            curiosity: None,
            checkpoint_interval: 50_000,
        }
    }
}

impl TrainConfig {
    /// Intersection: extrinsic reward only.
    pub fn coop() -> Self {
        Self::default()
    }

    /// Racing: behavioral cloning, GAIL and curiosity on top of PPO.
    pub fn race() -> Self {
        Self {
            bc: Some(BcConfig::default()),
            gail: Some(GailConfig::default()),
            curiosity: Some(CuriosityConfig::default()),
            ..Self::default()
        }
    }

    pub fn for_scenario(s: ScenarioKind) -> Self {
        match s {
            ScenarioKind::Coop => Self::coop(),
            ScenarioKind::Race => Self::race(),
        }
    }

    pub fn needs_demonstrations(&self) -> bool {
        self.bc.is_some_and(|b| b.strength < 1.0) || self.gail.is_some()
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            errs.push("need 0 < batch_size <= buffer_size".to_string());
        }
        if !(self.learning_rate > 0.0) {
            errs.push("learning_rate must be positive".into());
        }
        if !(self.epsilon > 0.0) {
            errs.push("epsilon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            errs.push("need lambda in [0, 1] and gamma in (0, 1]".into());
        }
        if self.num_epoch == 0 || self.max_steps == 0 {
            errs.push("num_epoch and max_steps must be positive".into());
        }
        if self.hidden_units == 0 || self.num_layers == 0 {
            errs.push("network needs at least one hidden layer of one unit".into());
        }
        if let Some(bc) = self.bc {
            if !(bc.strength > 0.0 && bc.strength <= 1.0) {
                errs.push("bc.strength must be in (0, 1]".into());
            }
        }
        if self.gail.is_some_and(|g| g.encoding_size == 0 || !(g.learning_rate > 0.0))
            || self.curiosity.is_some_and(|c| c.encoding_size == 0 || !(c.learning_rate > 0.0))
        {
            errs.push("reward-signal networks need positive encoding size and learning rate".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }

    /// Learning rate after `step` agent-steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => self.learning_rate * (1.0 - step as f64 / self.max_steps as f64).max(0.0),
        }
    }
}

/// Weighted sum of the reward sources.
pub fn aggregate_rewards(extrinsic: f64, gail: f64, curiosity: f64, cfg: &TrainConfig) -> f64 {
    let mut r = cfg.extrinsic_strength * extrinsic;
    if let Some(g) = cfg.gail {
        r += g.strength * gail;
    }
    if let Some(c) = cfg.curiosity {
        r += c.strength * curiosity;
    }
    r
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Non-negative KL estimate `(r - 1) - ln r` with `r = p_new / p_old`.
pub fn approx_kl(log_prob_old: f64, log_prob_new: f64) -> f64 {
    let log_r = log_prob_new - log_prob_old;
    log_r.exp() - 1.0 - log_r
}

/// One transition as seen by advantage estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeStep {
    pub reward: f64,
    pub value: f64,
    /// Bootstrap value of the next observation; 0 after a terminal step.
    pub next_value: f64,
    /// Episode ended here (terminal or truncated): do not chain.
    pub episode_end: bool,
    /// Index of the same agent's next transition in this batch.
    pub next: Option<usize>,
}

/// Generalized advantage estimation over interleaved agents.
/// Successors must have larger indices. Returns `(advantages, returns)`.
pub fn gae(steps: &[GaeStep], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = vec![0.0; steps.len()];
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let delta = s.reward + gamma * s.next_value - s.value;
        let carry = match s.next {
            Some(n) if !s.episode_end => {
                debug_assert!(n > t, "successor must follow");
                gamma * lambda * adv[n]
            }
            _ => 0.0,
        };
        adv[t] = delta + carry;
    }
    let ret = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

/// Transition ready for optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Demonstration pairs for the cloning term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemoSet {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl DemoSet {
    pub fn from_demonstrations(d: &crate::demo::Demonstrations) -> Self {
        Self {
            obs: d.steps.iter().map(|s| s.obs.clone()).collect(),
            actions: d.actions(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Coefficients of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub epsilon: f64,
    pub beta: f64,
    pub value_coef: f64,
    /// η when demonstrations are used.
    pub bc_eta: Option<f64>,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            epsilon: cfg.epsilon,
            beta: cfg.beta,
            value_coef: cfg.value_coef,
            bc_eta: cfg.bc.map(|b| b.strength),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// Mean negative clipped surrogate.
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub bc: Option<f64>,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub total: f64,
}

/// Mean over the batch of the per-sample sum over heads of the cross-entropy
/// against the demonstrated indices.
pub fn bc_loss(net: &PolicyNet, obs: &[&[f64]], actions: &[Action]) -> f64 {
    let n = obs.len().max(1) as f64;
    obs.iter()
        .zip(actions)
        .map(|(o, a)| {
            let lp = net.split_log_probs(&net.actor.forward(o));
            -(lp[0][a.throttle] + lp[1][a.steer])
        })
        .sum::<f64>()
        / n
}

/// Loss of a minibatch and its gradients w.r.t. the actor and critic
/// parameters:
/// `w * (-surrogate + c_v * value_mse - beta * entropy) + (1 - η) * bc`,
/// with `w = η` when a demonstration batch is given and 1 otherwise.
pub fn ppo_loss_and_grad(
    net: &PolicyNet,
    batch: &[&Sample],
    demo: Option<(&[&[f64]], &[Action])>,
    w: &LossWeights,
) -> (LossParts, Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; net.actor.param_count()];
    let mut gc = vec![0.0; net.critic.param_count()];
    let mut parts = LossParts::default();
    let (rl_w, bc_w) = match (demo, w.bc_eta) {
        (Some(_), Some(eta)) => (eta, 1.0 - eta),
        _ => (1.0, 0.0),
    };
    let n = batch.len() as f64;
    let mut cache = MlpCache::default();
    let mut gout = vec![0.0; net.actor.output_len()];
    let h0 = net.heads[0];
    for s in batch {
        let logits = net.actor.forward_cached(&s.obs, &mut cache);
        let lp = net.split_log_probs(logits);
        let new_lp = lp[0][s.action.throttle] + lp[1][s.action.steer];
        let ratio = (new_lp - s.log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - w.epsilon, 1.0 + w.epsilon) * s.advantage;
        let surr = unclipped.min(clipped);
        parts.policy -= surr / n;
        parts.approx_kl += approx_kl(s.log_prob, new_lp) / n;
        if clipped < unclipped {
            parts.clip_fraction += 1.0 / n;
        }
        // d(-surr)/d(log pi); zero when the clipped branch is active.
        let dlogp = if unclipped <= clipped { -ratio * s.advantage } else { 0.0 };
        let mut ent = 0.0;
        for (h, (head, a)) in lp.iter().zip([s.action.throttle, s.action.steer]).enumerate() {
            let off = if h == 0 { 0 } else { h0 };
            let h_ent: f64 = head.iter().map(|l| -l.exp() * l).sum();
            ent += h_ent;
            for (j, l) in head.iter().enumerate() {
                let p = l.exp();
                let onehot = if j == a { 1.0 } else { 0.0 };
                // d(log pi)/dz = onehot - p; dH/dz = -p (ln p + H)
                let dent = -p * (l + h_ent);
                gout[off + j] = rl_w * (dlogp * (onehot - p) - w.beta * dent) / n;
            }
        }
        parts.entropy += ent / n;
        net.actor.backward(&mut cache, &gout, &mut ga, None);

        let v = net.critic.forward_cached(&s.obs, &mut cache)[0];
        let err = v - s.ret;
        parts.value += err * err / n;
        net.critic.backward(&mut cache, &[rl_w * w.value_coef * 2.0 * err / n], &mut gc, None);
    }
    parts.total = rl_w * (parts.policy + w.value_coef * parts.value - w.beta * parts.entropy);
    if let (Some((obs, acts)), true) = (demo, bc_w > 0.0) {
        let m = obs.len() as f64;
        let mut bc = 0.0;
        for (o, a) in obs.iter().zip(acts) {
            let logits = net.actor.forward_cached(o, &mut cache);
            let lp = net.split_log_probs(logits);
            bc -= (lp[0][a.throttle] + lp[1][a.steer]) / m;
            for (h, (head, ai)) in lp.iter().zip([a.throttle, a.steer]).enumerate() {
                let off = if h == 0 { 0 } else { h0 };
                for (j, l) in head.iter().enumerate() {
                    let onehot = if j == ai { 1.0 } else { 0.0 };
                    gout[off + j] = bc_w * (l.exp() - onehot) / m;
                }
            }
            net.actor.backward(&mut cache, &gout, &mut ga, None);
        }
        parts.bc = Some(bc);
        parts.total += bc_w * bc;
    }
    (parts, ga, gc)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean entropy (sum over heads) seen in the first epoch.
    pub entropy: f64,
    /// Mean approximate KL of the last epoch run.
    pub approx_kl: f64,
    pub bc_loss: Option<f64>,
    pub clip_fraction: f64,
    pub epochs_run: usize,
}

/// A policy with its optimizers.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub net: PolicyNet,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl PpoLearner {
    pub fn new(net: PolicyNet) -> Self {
        let actor_opt = Adam::new(net.actor.param_count());
        let critic_opt = Adam::new(net.critic.param_count());
        Self {
            net,
            actor_opt,
            critic_opt,
        }
    }

    /// Run up to `num_epoch` epochs of minibatch updates over `samples`.
    /// On a non-finite loss every weight and optimizer moment is restored.
    pub fn update(
        &mut self,
        samples: &mut [Sample],
        demos: Option<&DemoSet>,
        cfg: &TrainConfig,
        lr: f64,
        rng: &mut SimRng,
    ) -> Result<UpdateReport, LearnError> {
        if samples.is_empty() {
            return Err(LearnError::BufferSize {
                expected: cfg.buffer_size,
                got: 0,
            });
        }
        if cfg.bc.is_some() && demos.is_none_or(|d| d.is_empty()) {
            return Err(LearnError::MissingDemonstrations);
        }
        if cfg.normalize_advantage && samples.len() > 1 {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt() + 1e-8;
            samples.iter_mut().for_each(|s| s.advantage = (s.advantage - mean) / sd);
        }
        let snapshot = (self.net.clone(), self.actor_opt.clone(), self.critic_opt.clone());
        let weights = LossWeights::from_config(cfg);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut demo_order: Vec<usize> = demos.map_or(Vec::new(), |d| (0..d.len()).collect());
        let mut demo_pos = demo_order.len();
        let mut report = UpdateReport::default();
        for epoch in 0..cfg.num_epoch {
            order.shuffle(rng);
            let mut sums = LossParts::default();
            let mut bc_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let demo_idx: Vec<usize> = if let (Some(d), Some(_)) = (demos, cfg.bc) {
                    (0..cfg.batch_size.min(d.len()))
                        .map(|_| {
                            if demo_pos == demo_order.len() {
                                demo_order.shuffle(rng);
                                demo_pos = 0;
                            }
                            demo_pos += 1;
                            demo_order[demo_pos - 1]
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let demo_batch = demos.filter(|_| !demo_idx.is_empty()).map(|d| {
                    (
                        demo_idx.iter().map(|&i| d.obs[i].as_slice()).collect::<Vec<_>>(),
                        demo_idx.iter().map(|&i| d.actions[i]).collect::<Vec<_>>(),
                    )
                });
                let (parts, mut ga, mut gc) = ppo_loss_and_grad(
                    &self.net,
                    &batch,
                    demo_batch.as_ref().map(|(o, a)| (o.as_slice(), a.as_slice())),
                    &weights,
                );
                let finite = parts.total.is_finite() && ga.iter().chain(&gc).all(|g| g.is_finite());
                if !finite {
                    (self.net, self.actor_opt, self.critic_opt) = snapshot;
                    return Err(LearnError::NonFiniteLoss { what: "ppo" });
                }
                clip_grad_norm(&mut ga, cfg.max_grad_norm);
                clip_grad_norm(&mut gc, cfg.max_grad_norm);
                self.actor_opt.step(&mut self.net.actor.params, &ga, lr);
                self.critic_opt.step(&mut self.net.critic.params, &gc, lr);
                sums.policy += parts.policy;
                sums.value += parts.value;
                sums.entropy += parts.entropy;
                sums.approx_kl += parts.approx_kl;
                sums.clip_fraction += parts.clip_fraction;
                bc_sum += parts.bc.unwrap_or(0.0);
                batches += 1;
            }
            let b = batches as f64;
            report.policy_loss = sums.policy / b;
            report.value_loss = sums.value / b;
            report.approx_kl = sums.approx_kl / b;
            report.clip_fraction = sums.clip_fraction / b;
            report.bc_loss = cfg.bc.and(demos).map(|_| bc_sum / b);
            if epoch == 0 {
                report.entropy = sums.entropy / b;
            }
            report.epochs_run = epoch + 1;
            if report.approx_kl > cfg.kl_threshold {
                log::debug!("approx KL {:.4} above {:.4}; stopping after epoch {}", report.approx_kl, cfg.kl_threshold, epoch + 1);
                break;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_example() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn kl_of_identical_policies_is_zero() {
        assert_eq!(approx_kl(-1.3, -1.3), 0.0);
        assert!(approx_kl(-1.3, -0.2) > 0.0 && approx_kl(-0.2, -1.3) > 0.0);
    }

    #[test]
    fn one_step_terminal_advantage() {
        let s = GaeStep {
            reward: 1.0,
            value: 0.0,
            next_value: 0.0,
            episode_end: true,
            next: None,
        };
        let (a, r) = gae(&[s], 0.99, 0.98);
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 3e-4);
        assert_eq!(cfg.lr_at(cfg.max_steps), 0.0);
        assert!((cfg.lr_at(cfg.max_steps / 4) - 2.25e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(2 * cfg.max_steps), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let race = TrainConfig::race();
        assert!((aggregate_rewards(1.0, 0.6931, 2.0, &race) - 1.046931).abs() < 1e-12);
        assert_eq!(aggregate_rewards(0.0, 0.0, 0.0, &race), 0.0);
        let coop = TrainConfig::coop();
        assert_eq!(aggregate_rewards(0.37, 5.0, 9.0, &coop), 0.37);
    }

    #[test]
    fn table_defaults() {
        let c = TrainConfig::race();
        assert_eq!((c.batch_size, c.buffer_size, c.num_epoch), (64, 1024, 3));
        assert_eq!((c.beta, c.epsilon, c.lambda, c.gamma), (1e-3, 0.2, 0.98, 0.99));
        assert_eq!(c.bc.unwrap().strength, 0.5);
        assert_eq!(c.gail.unwrap().encoding_size, 128);
        assert_eq!(c.curiosity.unwrap().encoding_size, 256);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn uniform_race_bc_loss() {
        let net = PolicyNet::zeros(28, ScenarioKind::Race, 8, 1);
        let obs = [0.5; 28];
        let l = bc_loss(&net, &[&obs[..], &obs[..]], &[Action::new(0, 2), Action::new(2, 1)]);
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!((l - 2.197).abs() < 1e-3);
    }
}
