//! Adam with decoupled weight decay and a warm-up plus cosine schedule.

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 3e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn check_shapes(&self, params: &[Tensor<f32>]) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|((p, m), v)| p.shape() == m.shape() && p.shape() == v.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("optimizer state does not mirror the parameters".into()))
        }
    }
}

impl AdamW {
    /// Updates `param` in place from `grad` at learning rate `lr`. `decay`
    /// selects whether weight decay applies to this parameter.
    pub fn update(
        &self,
        param: &mut Tensor<f32>,
        grad: &[f32],
        m: &mut Tensor<f32>,
        v: &mut Tensor<f32>,
        step: u64,
        lr: f64,
        decay: bool,
    ) {
        let t = step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let shrink = if decay { 1.0 - lr * self.weight_decay } else { 1.0 };
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g as f64;
            let mi = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
            let vi = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
            *m = mi as f32;
            *v = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            *p = (*p as f64 * shrink - update) as f32;
        }
    }
}

/// Learning rate at 0-based `step` of `total`: linear warm-up over the first
/// `warmup` steps, then cosine decay to zero.
pub fn schedule(base: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut p = Tensor::new([3], vec![1.0f32, 1.0, 1.0]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p));
        opt.update(&mut p, &[2.0, -0.5, 0.0], &mut st.m[0], &mut st.v[0], 1, 0.1, true);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let opt = AdamW { weight_decay: 0.5, ..AdamW::default() };
        let mut p = Tensor::new([1], vec![2.0f32]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p));
        opt.update(&mut p, &[0.0], &mut st.m[0], &mut st.v[0], 1, 0.1, true);
        assert!((p.data()[0] - 2.0 * 0.95).abs() < 1e-6);
        let mut q = Tensor::new([1], vec![2.0f32]).unwrap();
        opt.update(&mut q, &[0.0], &mut st.m[0], &mut st.v[0], 1, 0.1, false);
        assert_eq!(q.data()[0], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut p = Tensor::new([2], vec![3.0f32, -2.0]).unwrap();
        let mut st = OptimizerState::new(std::slice::from_ref(&p));
        for step in 1..=2000 {
            let g: Vec<f32> = p.data().iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g, &mut st.m[0], &mut st.v[0], step, 0.05, false);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        assert!((schedule(1.0, 0, 100, 5) - 0.2).abs() < 1e-12);
        assert!((schedule(1.0, 4, 100, 5) - 1.0).abs() < 1e-12);
        assert!((schedule(1.0, 5, 100, 5) - 1.0).abs() < 1e-12);
        assert!(schedule(1.0, 99, 100, 5) < 1e-3);
        let lrs: Vec<f64> = (5..100).map(|s| schedule(1.0, s, 100, 5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
