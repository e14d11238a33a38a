use crate::params::{AdamState, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment buffers live in the [`ParamStore`]; the step
/// counter lives here.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0 }
    }

    /// Applies one update to every trainable parameter. A trainable parameter
    /// without a gradient buffer is treated as having a zero gradient.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.step_scaled(store, lr, 1.0);
    }

    /// Like [`Adam::step`] with every gradient multiplied by `grad_scale`
    /// first, which is how clipping is applied without rewriting the buffers.
    pub fn step_scaled<F: Real>(&mut self, store: &mut ParamStore<F>, lr: f64, grad_scale: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let k = Coefs {
            b1: F::from_f64(beta1),
            b2: F::from_f64(beta2),
            c1: F::from_f64(1.0 - beta1),
            c2: F::from_f64(1.0 - beta2),
            step_size: F::from_f64(lr / bc1),
            inv_sqrt_bc2: F::from_f64(1.0 / bc2.sqrt()),
            eps: F::from_f64(eps),
            scale: F::from_f64(grad_scale),
            tiny: F::min_positive_value(),
        };
        for p in store.iter_mut().filter(|p| p.trainable) {
            let n = p.value.numel();
            let state = p.adam.get_or_insert_with(|| AdamState { m: vec![F::zero(); n], v: vec![F::zero(); n] });
            let value = p.value.data_mut();
            let (m, v) = (&mut state.m[..], &mut state.v[..]);
            match (p.grad.as_ref(), lr != 0.0, grad_scale == 1.0) {
                (Some(g), true, true) => update::<F, true, false>(value, m, v, g.data(), &k),
                (Some(g), true, false) => update::<F, true, true>(value, m, v, g.data(), &k),
                (Some(g), false, _) => update::<F, false, true>(value, m, v, g.data(), &k),
                (None, apply, _) => {
                    let zeros = vec![F::zero(); n];
                    if apply {
                        update::<F, true, false>(value, m, v, &zeros, &k)
                    } else {
                        update::<F, false, false>(value, m, v, &zeros, &k)
                    }
                }
            }
        }
    }
}

struct Coefs<F> {
    b1: F,
    b2: F,
    c1: F,
    c2: F,
    step_size: F,
    inv_sqrt_bc2: F,
    eps: F,
    scale: F,
    tiny: F,
}

// Branch-free inner loop; the flags are resolved at compile time so the
// loop vectorizes.
#[inline(always)]
fn update<F: Real, const APPLY: bool, const SCALE: bool>(value: &mut [F], m: &mut [F], v: &mut [F], grad: &[F], k: &Coefs<F>) {
    for (((x, m), v), &g) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
        let g = if SCALE { g * k.scale } else { g };
        *m = flush(k.b1 * *m + k.c1 * g, k.tiny);
        *v = flush(k.b2 * *v + k.c2 * g * g, k.tiny);
        if APPLY {
            *x -= k.step_size * *m / (v.sqrt() * k.inv_sqrt_bc2 + k.eps);
        }
    }
}

// Moments of rarely updated parameters decay geometrically; subnormal values
// would make every later step crawl.
#[inline(always)]
fn flush<F: Real>(x: F, tiny: F) -> F {
    if x.abs() < tiny {
        F::zero()
    } else {
        x
    }
}

/// Global L2 norm over the gradients of trainable parameters.
pub fn grad_norm<F: Real>(store: &ParamStore<F>) -> f64 {
    store
        .iter()
        .filter(|p| p.trainable)
        .filter_map(|p| p.grad.as_ref())
        .map(|g| sum_squares(g.data()))
        .sum::<f64>()
        .sqrt()
}

// Eight independent accumulators break the add dependency chain.
fn sum_squares<F: Real>(xs: &[F]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|x| x.as_f64() * x.as_f64()).sum();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            let v = x.as_f64();
            *a += v * v;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Rescales all gradients so that their global norm is at most `max_norm`.
/// Returns the norm measured before clipping. Leaves the buffers untouched
/// when the norm is already within bounds.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Inverse square root schedule with linear warmup:
/// `max_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: u64, max_lr: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    max_lr * (step / warmup).min((warmup / step).sqrt())
}
