//! AdamW with decoupled weight decay, the warmup/decay schedule and global
//! gradient-norm clipping.

use numcore::{Float, ParamStore};

use crate::config::OptimConfig;
use crate::error::{Result, VlkdError};

/// Linear ramp from 0 to `base` over the first `⌈warmup_fraction · total⌉`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warmup = ((warmup_fraction * total as f64).ceil() as usize).clamp(1, total);
    if step <= warmup {
        base * step as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

fn trainable<'a, T: Float>(stores: &'a [&mut ParamStore<T>]) -> impl Iterator<Item = &'a [T]> + 'a {
    stores
        .iter()
        .flat_map(|s| s.iter())
        .filter(|(_, p)| !p.frozen)
        .filter_map(|(_, p)| p.tensor.grad())
}

/// Global ℓ2 norm over all trainable gradients; scales them by
/// `max_norm / norm` when the norm exceeds `max_norm`. Returns the norm
/// observed before scaling.
pub fn clip_grad_norm<T: Float>(stores: &mut [&mut ParamStore<T>], max_norm: f64) -> f64 {
    let norm = trainable(stores)
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for s in stores.iter_mut() {
            for (_, p) in s.iter_mut() {
                if p.frozen {
                    continue;
                }
                if let Some(g) = p.tensor.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&OptimConfig> for AdamWParams {
    fn from(c: &OptimConfig) -> Self {
        AdamWParams {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Moment buffers indexed by (store position, parameter index).
#[derive(Debug, Clone)]
pub struct AdamW<T: Float> {
    pub hp: AdamWParams,
    m: Vec<Vec<Vec<T>>>,
    v: Vec<Vec<Vec<T>>>,
    step: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(hp: AdamWParams) -> Self {
        AdamW {
            hp,
            m: vec![],
            v: vec![],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter.
    ///
    /// Missing gradients count as zero. Frozen parameters are skipped, but a
    /// frozen parameter carrying a nonzero gradient is an invariant
    /// violation. Non-finite gradients abort before any parameter moves.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], lr: f64) -> Result<()> {
        for s in stores.iter() {
            for (_, p) in s.iter() {
                let Some(g) = p.tensor.grad() else { continue };
                if p.frozen && g.iter().any(|v| *v != T::zero()) {
                    return Err(VlkdError::Invariant(format!("frozen parameter `{}` received a gradient", p.name)));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(VlkdError::Diverged {
                        step: self.step as usize,
                        detail: format!("non-finite gradient in `{}`", p.name),
                    });
                }
            }
        }
        while self.m.len() < stores.len() {
            self.m.push(vec![]);
            self.v.push(vec![]);
        }
        self.step += 1;
        let t = self.step as i32;
        let hp = self.hp;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
        for (si, s) in stores.iter_mut().enumerate() {
            let (ms, vs) = (&mut self.m[si], &mut self.v[si]);
            if ms.len() != s.len() {
                *ms = s.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
                *vs = ms.clone();
            }
            for (pi, (_, p)) in s.iter_mut().enumerate() {
                if p.frozen {
                    continue;
                }
                let decay = if p.decay { T::of(1.0 - lr * hp.weight_decay) } else { T::one() };
                let grad = p.tensor.grad().map(<[T]>::to_vec);
                let (m, v) = (&mut ms[pi], &mut vs[pi]);
                let data = p.tensor.data_mut();
                for i in 0..data.len() {
                    let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                    m[i] = b1 * m[i] + one_b1 * g;
                    v[i] = b2 * v[i] + one_b2 * g * g;
                    let m_hat = m[i].as_f64() / bc1;
                    let v_hat = v[i].as_f64() / bc2;
                    data[i] = data[i] * decay - T::of(lr * m_hat / (v_hat.sqrt() + hp.eps));
                }
            }
        }
        Ok(())
    }
}
