//! Dense tanh networks with hand-written reverse-mode gradients.
//!
//! Parameters of an [`Mlp`] live in one flat vector so optimizers and
//! checkpoints can treat a network as a plain slice. Layer `l` stores its
//! `out x in` weight matrix row-major followed by its `out` biases.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    widths: Vec<usize>,
    params: Vec<T>,
}

/// Activations recorded by a forward pass; `acts[0]` is the input and the
/// last entry is the (linear) output.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("trace has an output")
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            widths: widths.to_vec(),
            params: vec![T::zero(); param_count(widths)],
        }
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`; the output layer is further
    /// scaled by `output_gain`. Biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(widths);
        let layers = widths.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            let std = gain / (n_in as f64).sqrt();
            for p in &mut net.params[off..off + n_in * n_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = T::lit(z * std);
            }
            off += n_in * n_out + n_out;
        }
        net
    }

    pub fn from_params(widths: &[usize], params: Vec<T>) -> Result<Self> {
        let expected = param_count(widths);
        if params.len() != expected || widths.len() < 2 {
            return Err(Error::Dimension {
                what: "mlp parameters",
                expected,
                actual: params.len(),
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the weights and biases of the output layer.
    pub fn zero_output_layer(&mut self) {
        let l = self.widths.len() - 2;
        let n = self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        let len = self.params.len();
        self.params[len - n..].iter_mut().for_each(|p| *p = T::zero());
    }

    pub fn forward(&self, x: &[T]) -> Result<Trace<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "mlp input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let z = b[o] + dot(&w[o * n_in..(o + 1) * n_in], input);
                out.push(if l + 1 < layers { z.tanh() } else { z });
            }
            acts.push(out);
            off += n_in * n_out + n_out;
        }
        Ok(Trace { acts })
    }

    /// Same network with `extra` additional inputs appended whose weights
    /// are zero, so outputs ignore them until trained.
    pub fn with_extra_inputs(&self, extra: usize) -> Self {
        let mut widths = self.widths.clone();
        let (n_in, n_out) = (widths[0], widths[1]);
        widths[0] += extra;
        let mut params = Vec::with_capacity(param_count(&widths));
        for o in 0..n_out {
            params.extend_from_slice(&self.params[o * n_in..(o + 1) * n_in]);
            params.extend(std::iter::repeat(T::zero()).take(extra));
        }
        params.extend_from_slice(&self.params[n_in * n_out..]);
        Self { widths, params }
    }

    pub fn predict(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x)?.acts.pop().unwrap())
    }

    /// Back-propagates `grad_out` (dL/d output) through the trace,
    /// accumulating parameter gradients into `grads` and returning dL/d input.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &[T], grads: &mut [T]) -> Vec<T> {
        self.backward_impl(trace, grad_out, grads, true)
    }

    /// As [`Mlp::backward`] but skips the input gradient.
    pub fn backward_params(&self, trace: &Trace<T>, grad_out: &[T], grads: &mut [T]) {
        self.backward_impl(trace, grad_out, grads, false);
    }

    fn backward_impl(&self, trace: &Trace<T>, grad_out: &[T], grads: &mut [T], input_grad: bool) -> Vec<T> {
        debug_assert_eq!(grads.len(), self.params.len());
        debug_assert_eq!(grad_out.len(), self.output_dim());
        let layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &trace.acts[l];
            let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.params[off..off + n_in * n_out];
            let mut g_in = vec![T::zero(); n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                gb[o] += d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                let wrow = &w[o * n_in..(o + 1) * n_in];
                for (g, x) in grow.iter_mut().zip(input) {
                    *g += d * *x;
                }
                if l > 0 || input_grad {
                    for (g, w) in g_in.iter_mut().zip(wrow) {
                        *g += d * *w;
                    }
                }
            }
            if l > 0 {
                for (g, a) in g_in.iter_mut().zip(input) {
                    *g *= T::one() - *a * *a;
                }
            }
            delta = g_in;
        }
        delta
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorise it.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = T::lit(eps);
        self
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grads` (jointly across all slices) to an L2 norm of at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> T {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&g| g * g)
        .sum::<T>()
        .sqrt();
    let max = T::lit(max_norm);
    if norm > max {
        let scale = max / (norm + T::lit(1e-6));
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

pub const N_ACTIONS: usize = 4;

/// Categorical actor and scalar critic, each a `input -> hidden... -> head` MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy<T> {
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub value: T,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

impl<T: Scalar> MlpPolicy<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut aw = vec![input_dim];
        aw.extend_from_slice(hidden);
        let mut cw = aw.clone();
        aw.push(N_ACTIONS);
        cw.push(1);
        Self {
            actor: Mlp::new(&aw, 0.01, rng),
            critic: Mlp::new(&cw, 1.0, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let mut aw = vec![input_dim];
        aw.extend_from_slice(hidden);
        let mut cw = aw.clone();
        aw.push(N_ACTIONS);
        cw.push(1);
        Self {
            actor: Mlp::zeros(&aw),
            critic: Mlp::zeros(&cw),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.critic.num_params()
    }

    /// Widens both networks by `extra` zero-weighted inputs.
    pub fn with_extra_inputs(&self, extra: usize) -> Self {
        Self {
            actor: self.actor.with_extra_inputs(extra),
            critic: self.critic.with_extra_inputs(extra),
        }
    }

    /// Actor parameters followed by critic parameters.
    pub fn flat_params(&self) -> Vec<T> {
        let mut v = self.actor.params().to_vec();
        v.extend_from_slice(self.critic.params());
        v
    }

    pub fn forward(&self, obs: &[T]) -> Result<PolicyOutput<T>> {
        let logits = self.actor.predict(obs)?;
        let value = self.critic.predict(obs)?[0];
        Ok(PolicyOutput {
            probs: softmax(&logits),
            logits,
            value,
        })
    }

    pub fn greedy(&self, obs: &[T]) -> Result<usize> {
        Ok(crate::scalar::argmax(&self.actor.predict(obs)?))
    }
}
