//! Decoupled-weight-decay adaptive-moment optimizer with a cosine
//! learning-rate schedule. Only prompt and neck tensors are ever handed to
//! it; the backbone stays frozen.

use crate::error::{CppError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// lr(step) = lr_final + (lr_init - lr_final) * (1 + cos(pi step/total)) / 2.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_init: f64, lr_final: f64, total_steps: usize) -> Result<Self> {
        if !(lr_init > 0.0 && lr_final > 0.0 && lr_init.is_finite() && lr_final.is_finite()) {
            return Err(CppError::Config(format!(
                "learning rates must be positive, got {lr_init} -> {lr_final}"
            )));
        }
        if lr_final > lr_init {
            return Err(CppError::Config(format!(
                "final learning rate {lr_final} above initial {lr_init}"
            )));
        }
        Ok(CosineSchedule { lr_init, lr_final, total_steps })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.lr_final;
        }
        let frac = step as f64 / self.total_steps as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// First/second moment accumulators, one pair per trainable tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    weight_decay: f64,
    step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(tensor_lens: &[usize], weight_decay: f64) -> Result<Self> {
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(CppError::Config(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(AdamW {
            weight_decay,
            step_count: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One update over all tensors. Decay is decoupled: parameters shrink by
    /// lr * weight_decay * p independently of the moment estimates.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CppError::Shape(format!(
                "{} param / {} grad tensors for optimizer of {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(CppError::Shape(format!(
                    "tensor {i}: param {} / grad {} vs state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..self.m.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut *params[i];
            let g = grads[i];
            for j in 0..p.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_both_endpoints() {
        let s = CosineSchedule::new(1e-3, 1e-6, 100).unwrap();
        assert!((s.lr(0) - 1e-3).abs() < 1e-18);
        assert_eq!(s.lr(100), 1e-6);
        assert_eq!(s.lr(250), 1e-6);
        // Halfway: mean of the endpoints.
        assert!((s.lr(50) - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
        // Monotone nonincreasing.
        let mut prev = f64::INFINITY;
        for step in 0..=100 {
            let lr = s.lr(step);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn schedule_rejects_bad_rates() {
        assert!(CosineSchedule::new(0.0, 1e-6, 10).is_err());
        assert!(CosineSchedule::new(1e-6, 1e-3, 10).is_err());
        assert!(CosineSchedule::new(1e-3, f64::NAN, 10).is_err());
    }

    #[test]
    fn zero_gradients_and_zero_decay_leave_params_unchanged() {
        let mut opt = AdamW::new(&[3, 2], 0.0).unwrap();
        let mut a = [0.5, -1.25, 7.0];
        let mut b = [2.0, 3.0];
        let za = [0.0; 3];
        let zb = [0.0; 2];
        for _ in 0..5 {
            opt.step(&mut [&mut a, &mut b], &[&za, &zb], 1e-2).unwrap();
        }
        assert_eq!(a, [0.5, -1.25, 7.0]);
        assert_eq!(b, [2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::new(&[3], 0.0).unwrap();
        let mut a = [0.0; 2];
        let g = [0.0; 3];
        assert!(matches!(
            opt.step(&mut [&mut a], &[&g], 1e-3),
            Err(CppError::Shape(_))
        ));
        let mut a3 = [0.0; 3];
        assert!(matches!(
            opt.step(&mut [&mut a3, &mut a], &[&g, &g], 1e-3),
            Err(CppError::Shape(_))
        ));
    }

    #[test]
    fn quadratic_converges_within_two_thousand_steps() {
        // f(x) = (x - 3)^2, gradient 2(x - 3), from x = 0, cosine schedule
        // over the full budget.
        let schedule = CosineSchedule::new(0.05, 1e-4, 2000).unwrap();
        let mut opt = AdamW::new(&[1], 0.0).unwrap();
        let mut x = [0.0f64];
        let mut converged_at = None;
        for step in 0..2000 {
            let g = [2.0 * (x[0] - 3.0)];
            opt.step(&mut [&mut x], &[&g], schedule.lr(step)).unwrap();
            if (x[0] - 3.0).abs() < 1e-6 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(
            converged_at.is_some(),
            "no convergence: final x = {}, |x - 3| = {:e}",
            x[0],
            (x[0] - 3.0).abs()
        );
    }

    #[test]
    fn decay_shrinks_parameters_without_gradients() {
        let mut opt = AdamW::new(&[1], 0.1).unwrap();
        let mut x = [10.0f64];
        let g = [0.0];
        opt.step(&mut [&mut x], &[&g], 0.5).unwrap();
        // Pure decay: x -= lr * wd * x.
        assert!((x[0] - (10.0 - 0.5 * 0.1 * 10.0)).abs() < 1e-12);
    }
}
