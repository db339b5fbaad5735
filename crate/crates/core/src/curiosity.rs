//! Intrinsic curiosity: reward equal to the error of a learned forward model
//! in a learned encoding space.
//!
//! The encoder is shaped by an inverse model that predicts the action from
//! consecutive encodings, and also by the forward loss itself.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::LearnError;
use crate::nn::{clip_grad_norm, log_softmax, Adam, Mlp};
use crate::ppo::CuriosityConfig;
use crate::vehicle::Action;
use crate::SimRng;

pub const FORWARD_WEIGHT: f64 = 0.2;
pub const INVERSE_WEIGHT: f64 = 0.8;

/// `½‖predicted − actual‖²`.
pub fn prediction_reward(predicted: &[f64], actual: &[f64]) -> f64 {
    0.5 * predicted.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>()
}

/// One transition seen by the curiosity module.
#[derive(Debug, Clone, Copy)]
pub struct IcmSample<'a> {
    pub obs: &'a [f64],
    pub action: Action,
    pub next_obs: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmGrads {
    pub encoder: Vec<f64>,
    pub forward: Vec<f64>,
    pub inverse: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Icm {
    pub heads: [usize; 2],
    pub encoder: Mlp,
    pub forward: Mlp,
    pub inverse: Mlp,
    opts: [Adam; 3],
}

impl Icm {
    pub fn new<R: Rng + ?Sized>(obs_len: usize, heads: [usize; 2], encoding: usize, rng: &mut R) -> Self {
        let n_act = heads[0] + heads[1];
        let encoder = Mlp::new(&[obs_len, encoding, encoding], 1.0, rng);
        let forward = Mlp::new(&[encoding + n_act, encoding, encoding], 1.0, rng);
        let inverse = Mlp::new(&[2 * encoding, encoding, n_act], 1.0, rng);
        let opts = [
            Adam::new(encoder.param_count()),
            Adam::new(forward.param_count()),
            Adam::new(inverse.param_count()),
        ];
        Self {
            heads,
            encoder,
            forward,
            inverse,
            opts,
        }
    }

    fn forward_input(&self, phi: &[f64], a: Action) -> Vec<f64> {
        let mut x = phi.to_vec();
        x.extend((0..self.heads[0]).map(|j| if j == a.throttle { 1.0 } else { 0.0 }));
        x.extend((0..self.heads[1]).map(|j| if j == a.steer { 1.0 } else { 0.0 }));
        x
    }

    pub fn encode(&self, obs: &[f64]) -> Vec<f64> {
        self.encoder.forward(obs)
    }

    /// Predicted encoding of the next observation.
    pub fn predict(&self, obs: &[f64], a: Action) -> Vec<f64> {
        self.forward.forward(&self.forward_input(&self.encode(obs), a))
    }

    pub fn reward(&self, s: &IcmSample) -> f64 {
        prediction_reward(&self.predict(s.obs, s.action), &self.encode(s.next_obs))
    }

    /// `0.2 * forward + 0.8 * inverse` averaged over the batch, with gradients.
    pub fn loss_and_grad(&self, batch: &[IcmSample]) -> (f64, IcmGrads) {
        let mut g = IcmGrads {
            encoder: vec![0.0; self.encoder.param_count()],
            forward: vec![0.0; self.forward.param_count()],
            inverse: vec![0.0; self.inverse.param_count()],
        };
        let n = batch.len().max(1) as f64;
        let e = self.encoder.output_len();
        let (mut c_enc, mut c_next, mut c_fwd, mut c_inv) = Default::default();
        let (mut gi_fwd, mut gi_inv) = (Vec::new(), Vec::new());
        let mut loss = 0.0;
        for s in batch {
            let phi = self.encoder.forward_cached(s.obs, &mut c_enc).to_vec();
            let phi_next = self.encoder.forward_cached(s.next_obs, &mut c_next).to_vec();
            let pred = self.forward.forward_cached(&self.forward_input(&phi, s.action), &mut c_fwd).to_vec();
            let fwd_loss = prediction_reward(&pred, &phi_next);
            let mut both = phi.clone();
            both.extend_from_slice(&phi_next);
            let logits = self.inverse.forward_cached(&both, &mut c_inv).to_vec();
            let (z0, z1) = logits.split_at(self.heads[0]);
            let (l0, l1) = (log_softmax(z0), log_softmax(z1));
            let inv_loss = -(l0[s.action.throttle] + l1[s.action.steer]);
            loss += (FORWARD_WEIGHT * fwd_loss + INVERSE_WEIGHT * inv_loss) / n;

            let d_pred: Vec<f64> = pred.iter().zip(&phi_next).map(|(p, t)| FORWARD_WEIGHT * (p - t) / n).collect();
            self.forward.backward(&mut c_fwd, &d_pred, &mut g.forward, Some(&mut gi_fwd));
            let mut d_logits = Vec::with_capacity(logits.len());
            for (l, a) in [(&l0, s.action.throttle), (&l1, s.action.steer)] {
                d_logits.extend(l.iter().enumerate().map(|(j, v)| {
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    INVERSE_WEIGHT * (v.exp() - onehot) / n
                }));
            }
            self.inverse.backward(&mut c_inv, &d_logits, &mut g.inverse, Some(&mut gi_inv));
            let d_phi: Vec<f64> = (0..e).map(|k| gi_fwd[k] + gi_inv[k]).collect();
            let d_next: Vec<f64> = (0..e).map(|k| gi_inv[e + k] - d_pred[k]).collect();
            self.encoder.backward(&mut c_enc, &d_phi, &mut g.encoder, None);
            self.encoder.backward(&mut c_next, &d_next, &mut g.encoder, None);
        }
        (loss, g)
    }

    /// Minibatch training over the flushed transitions. Returns the mean loss.
    pub fn train(&mut self, samples: &[IcmSample], cfg: &CuriosityConfig, epochs: usize, batch: usize, rng: &mut SimRng) -> Result<f64, LearnError> {
        let snapshot = self.clone();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                let b: Vec<IcmSample> = chunk.iter().map(|&i| samples[i]).collect();
                let (loss, mut g) = self.loss_and_grad(&b);
                let finite = loss.is_finite() && g.encoder.iter().chain(&g.forward).chain(&g.inverse).all(|v| v.is_finite());
                if !finite {
                    *self = snapshot;
                    return Err(LearnError::NonFiniteLoss { what: "curiosity" });
                }
                for (net, (grad, opt)) in [&mut self.encoder, &mut self.forward, &mut self.inverse]
                    .into_iter()
                    .zip([&mut g.encoder, &mut g.forward, &mut g.inverse].into_iter().zip(self.opts.iter_mut()))
                {
                    clip_grad_norm(grad, 0.5);
                    opt.step(&mut net.params, grad, cfg.learning_rate);
                }
                total += loss;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        assert_eq!(prediction_reward(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        // error vector (2, 0): norm 2
        assert_eq!(prediction_reward(&[3.0, 1.0], &[1.0, 1.0]), 2.0);
        let s = 2f64.sqrt();
        assert!((prediction_reward(&[s, s], &[0.0, 0.0]) - 2.0).abs() < 1e-15);
    }
}
