//! Fully connected networks in f64 with manual backpropagation.
//!
//! Weights of a layer are stored input-major (`w[i * out + o]`), so the
//! forward pass is a sequence of axpy updates and every output accumulates
//! its inputs in the same fixed order. Results are therefore bitwise
//! identical whether a sample is evaluated alone or inside a minibatch.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Fixed-order dot product with four partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

/// Multilayer perceptron: swish on every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass, reused across calls.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    grad: Vec<f64>,
    grad_next: Vec<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        let mut layers = Vec::new();
        let mut off = 0;
        for win in sizes.windows(2) {
            let (inp, out) = (win[0], win[1]);
            layers.push(Layer {
                inp,
                out,
                w: off,
                b: off + inp * out,
            });
            off += inp * out + out;
        }
        Self {
            sizes: sizes.to_vec(),
            layers,
            params: vec![0.0; off],
        }
    }

    /// Normal(0, 1/fan_in) weights, zero biases; the output layer is scaled
    /// by `out_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(sizes);
        let last = m.layers.len() - 1;
        for (l, layer) in m.layers.clone().iter().enumerate() {
            let scale = (1.0 / layer.inp as f64).sqrt() * if l == last { out_scale } else { 1.0 };
            for p in &mut m.params[layer.w..layer.w + layer.inp * layer.out] {
                let z: f64 = rng.sample(StandardNormal);
                *p = z * scale;
            }
        }
        m
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_forward(&self, l: usize, x: &[f64], pre: &mut Vec<f64>) {
        let layer = self.layers[l];
        pre.clear();
        pre.extend_from_slice(&self.params[layer.b..layer.b + layer.out]);
        let w = &self.params[layer.w..layer.w + layer.inp * layer.out];
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * layer.out..(i + 1) * layer.out];
            for (p, wv) in pre.iter_mut().zip(row) {
                *p += xi * wv;
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(x, &mut cache).to_vec()
    }

    /// Forward pass keeping what `backward` needs. Returns the output.
    pub fn forward_cached<'c>(&self, x: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        assert_eq!(x.len(), self.input_len(), "network input width");
        let n = self.layers.len();
        cache.acts.resize_with(n + 1, Vec::new);
        cache.pre.resize_with(n, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for l in 0..n {
            let (done, rest) = cache.acts.split_at_mut(l + 1);
            let input = &done[l];
            self.layer_forward(l, input, &mut cache.pre[l]);
            let out = &mut rest[0];
            out.clear();
            if l + 1 < n {
                out.extend(cache.pre[l].iter().map(|&v| swish(v)));
            } else {
                out.extend_from_slice(&cache.pre[l]);
            }
        }
        &cache.acts[n]
    }

    /// Accumulate `dL/dparams` into `grads` given `dL/doutput` for the pass
    /// held in `cache`. With `grad_input`, also returns `dL/dinput`.
    pub fn backward(&self, cache: &mut MlpCache, grad_out: &[f64], grads: &mut [f64], grad_input: Option<&mut Vec<f64>>) {
        let n = self.layers.len();
        cache.grad.clear();
        cache.grad.extend_from_slice(grad_out);
        let want_input = grad_input.is_some();
        for l in (0..n).rev() {
            let layer = self.layers[l];
            if l + 1 < n {
                for (g, &p) in cache.grad.iter_mut().zip(&cache.pre[l]) {
                    *g *= swish_grad(p);
                }
            }
            let x = &cache.acts[l];
            for (gb, g) in grads[layer.b..layer.b + layer.out].iter_mut().zip(&cache.grad) {
                *gb += g;
            }
            let w = &self.params[layer.w..layer.w + layer.inp * layer.out];
            let gw = &mut grads[layer.w..layer.w + layer.inp * layer.out];
            let need_prev = l > 0 || want_input;
            cache.grad_next.clear();
            for (i, &xi) in x.iter().enumerate() {
                let row = &mut gw[i * layer.out..(i + 1) * layer.out];
                for (r, g) in row.iter_mut().zip(&cache.grad) {
                    *r += xi * g;
                }
                if need_prev {
                    cache.grad_next.push(dot(&w[i * layer.out..(i + 1) * layer.out], &cache.grad));
                }
            }
            std::mem::swap(&mut cache.grad, &mut cache.grad_next);
        }
        if let Some(gi) = grad_input {
            gi.clear();
            gi.extend_from_slice(&cache.grad);
        }
    }
}

/// Adam with externally supplied learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Rescale `grads` so its L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
