//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Element, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates per parameter; weight decay applies to tensors of rank
/// two or more (weights and kernels, not biases or norm gains).
pub struct AdamW<F: Element> {
    cfg: AdamWConfig,
    m: ParamSet<F>,
    v: ParamSet<F>,
    step: u64,
}

impl<F: Element> AdamW<F> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<F>) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let moments = self.m.entries_mut().zip(self.v.entries_mut());
        for ((name, theta), ((_, m), (_, v))) in params.entries_mut().zip(moments) {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if g.dims() != theta.dims() {
                return Err(Error::mismatch("adamw", g.dims(), theta.dims()));
            }
            let decay = if theta.rank() >= 2 {
                1.0 - lr * c.weight_decay
            } else {
                1.0
            };
            let decay = F::lit(decay);
            let (lr_f, bc1_f, bc2_f, eps) = (F::lit(lr), F::lit(bc1), F::lit(bc2), F::lit(c.eps));
            let th = theta.elems_mut();
            let (me, ve) = (m.elems_mut(), v.elems_mut());
            for i in 0..th.len() {
                let gi = g.elems()[i];
                me[i] = b1 * me[i] + one_b1 * gi;
                ve[i] = b2 * ve[i] + one_b2 * gi * gi;
                let mhat = me[i] / bc1_f;
                let vhat = ve[i] / bc2_f;
                th[i] = th[i] * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay to
/// 0 at `total` steps.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 3e-4), 0.0);
        assert_eq!(lr_at(10, 100, 10, 3e-4), 3e-4);
        assert!(lr_at(100, 100, 10, 3e-4).abs() < 1e-20);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!((lr_at(5, 100, 10, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // loss = (w - 3)², w0 = 1 → g = -4
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::new([1, 1], vec![1.0]).unwrap())
            .unwrap();
        let mut grads = ParamSet::new();
        grads
            .insert("w", Tensor::new([1, 1], vec![-4.0]).unwrap())
            .unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &grads, 0.01).unwrap();
        let m = 0.1 * -4.0;
        let v = 0.001 * 16.0;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expect = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * mhat / (f64::sqrt(vhat) + 1e-8);
        assert!((ps.get("w").unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("b", Tensor::new([1], vec![2.0]).unwrap())
            .unwrap();
        let grads = ps.zeros_like();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &ps,
        );
        opt.step(&mut ps, &grads, 0.1).unwrap();
        assert_eq!(ps.get("b").unwrap().item(), 2.0);
    }
}
