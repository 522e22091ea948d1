//! Dense-layer machinery shared by the radiance MLP, the feature encoders,
//! and the motion-conditioned predictor networks: batched matrix products,
//! activations, exact manual backprop, and the Adam optimizer.
//!
//! All buffers are row-major `f64`; a network's parameters live in one flat
//! `Vec<f64>` so optimizers, checkpoints, and finite-difference probes can
//! address them uniformly.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::math::flt;

/// Curvature scale of the smooth ReLU; sqrt(eps) is the softening width.
pub const SMOOTH_RELU_EPS: f64 = 1e-2;

/// C-infinity ReLU substitute: `0.5 * (x + sqrt(x^2 + eps))`.
#[inline(always)]
pub fn smooth_relu(x: f64) -> f64 {
    0.5 * (x + flt::sqrt(x * x + SMOOTH_RELU_EPS))
}

#[inline(always)]
pub fn smooth_relu_deriv(x: f64) -> f64 {
    0.5 * (1.0 + x / flt::sqrt(x * x + SMOOTH_RELU_EPS))
}

/// Numerically stable softplus; large inputs pass through.
#[inline(always)]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        flt::exp(x)
    } else {
        flt::ln_1p(flt::exp(x))
    }
}

/// d softplus / dx = sigmoid.
#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + flt::exp(-x))
    } else {
        let e = flt::exp(x);
        e / (1.0 + e)
    }
}

#[inline(always)]
pub fn sigmoid_deriv_from_value(s: f64) -> f64 {
    s * (1.0 - s)
}

/// `c = a @ b + beta * c` where `a` is (m x k) and `b` is (k x n), row-major.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a^T @ b + beta * c` where `a` is stored (k x m) and `b` is (k x n).
pub fn matmul_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a @ b^T + beta * c` where `a` is (m x k) and `b` is stored (n x k).
pub fn matmul_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One fully connected layer; parameters are `[W (in x out), b (out)]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize) -> Dense {
        Dense { in_dim, out_dim }
    }

    pub fn param_len(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        debug_assert_eq!(params.len(), self.param_len());
        let bound = flt::sqrt(6.0 / (self.in_dim + self.out_dim) as f64);
        for w in params[..self.in_dim * self.out_dim].iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        for b in params[self.in_dim * self.out_dim..].iter_mut() {
            *b = 0.0;
        }
    }

    /// `y = x @ W + b` for a (batch x in_dim) input.
    pub fn forward(&self, params: &[f64], x: &[f64], batch: usize, y: &mut [f64]) {
        debug_assert_eq!(params.len(), self.param_len());
        debug_assert_eq!(x.len(), batch * self.in_dim);
        debug_assert_eq!(y.len(), batch * self.out_dim);
        let (w, b) = params.split_at(self.in_dim * self.out_dim);
        for row in 0..batch {
            y[row * self.out_dim..(row + 1) * self.out_dim].copy_from_slice(b);
        }
        matmul(batch, self.in_dim, self.out_dim, x, w, 1.0, y);
    }

    /// Accumulates `grad_params += [x^T @ grad_y, colsum(grad_y)]` and writes
    /// `grad_x = grad_y @ W^T`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        grad_y: &[f64],
        batch: usize,
        grad_params: &mut [f64],
        grad_x: &mut [f64],
    ) {
        debug_assert_eq!(grad_params.len(), self.param_len());
        debug_assert_eq!(grad_x.len(), batch * self.in_dim);
        let w = &params[..self.in_dim * self.out_dim];
        let (gw, gb) = grad_params.split_at_mut(self.in_dim * self.out_dim);
        matmul_at_b(self.in_dim, batch, self.out_dim, x, grad_y, 1.0, gw);
        for row in 0..batch {
            let g = &grad_y[row * self.out_dim..(row + 1) * self.out_dim];
            for (acc, gi) in gb.iter_mut().zip(g.iter()) {
                *acc += *gi;
            }
        }
        matmul_a_bt(batch, self.out_dim, self.in_dim, grad_y, w, 0.0, grad_x);
    }
}

pub fn apply_smooth_relu(pre: &[f64], out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(pre.iter()) {
        *o = smooth_relu(p);
    }
}

/// `grad_pre = grad_out * s'(pre)`, in place over `grad_out`.
pub fn smooth_relu_backward_inplace(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre.iter()) {
        *g *= smooth_relu_deriv(p);
    }
}

/// Plain feedforward MLP: smooth-ReLU hidden layers, linear output.
/// Used for the motion-conditioned deformation predictors.
#[derive(Clone, Debug)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Dense>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Cached per-layer inputs and pre-activations from a forward pass.
pub struct MlpCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`. When `zero_init_output` is set the
    /// final layer starts at exactly zero so the network output is zero.
    pub fn new<R: Rng>(dims: &[usize], zero_init_output: bool, rng: &mut R) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        let mut offsets = vec![0];
        for w in dims.windows(2) {
            let layer = Dense::new(w[0], w[1]);
            offsets.push(offsets.last().unwrap() + layer.param_len());
            layers.push(layer);
        }
        let mut params = vec![0.0; *offsets.last().unwrap()];
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let slot = &mut params[offsets[i]..offsets[i + 1]];
            if i == last && zero_init_output {
                slot.fill(0.0);
            } else {
                layer.init(slot, rng);
            }
        }
        Mlp { dims: dims.to_vec(), layers, offsets, params }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        self.forward_with_cache(x, batch).0
    }

    pub fn forward_with_cache(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpCache) {
        assert_eq!(x.len(), batch * self.input_dim(), "mlp input shape mismatch");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = vec![0.0; batch * layer.out_dim];
            layer.forward(&self.params[self.offsets[i]..self.offsets[i + 1]], &cur, batch, &mut pre);
            inputs.push(cur);
            let out = if i == last {
                pre.clone()
            } else {
                let mut o = vec![0.0; pre.len()];
                apply_smooth_relu(&pre, &mut o);
                o
            };
            preacts.push(pre);
            cur = out;
        }
        (cur, MlpCache { batch, inputs, preacts })
    }

    /// Returns `(grad_params, grad_input)` for the cached forward pass.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let batch = cache.batch;
        assert_eq!(grad_out.len(), batch * self.output_dim(), "mlp grad shape mismatch");
        let mut grad_params = vec![0.0; self.params.len()];
        let mut grad = grad_out.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i != last {
                smooth_relu_backward_inplace(&cache.preacts[i], &mut grad);
            }
            let layer = &self.layers[i];
            let mut grad_in = vec![0.0; batch * layer.in_dim];
            layer.backward(
                &self.params[self.offsets[i]..self.offsets[i + 1]],
                &cache.inputs[i],
                &grad,
                batch,
                &mut grad_params[self.offsets[i]..self.offsets[i + 1]],
                &mut grad_in,
            );
            grad = grad_in;
        }
        (grad_params, grad)
    }
}

/// Adam with bias correction; one instance per parameter block.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_len: usize, learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam gradient count mismatch");
        self.step += 1;
        let b1t = 1.0 - flt::powi(self.beta1, self.step as i32);
        let b2t = 1.0 - flt::powi(self.beta2, self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.learning_rate * m_hat / (flt::sqrt(v_hat) + self.epsilon);
        }
    }
}
