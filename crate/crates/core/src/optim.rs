//! Adam with per-group learning rates and a cosine-annealed schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::ClassId;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    LoraA(usize),
    LoraB(usize),
    Prototype(ClassId),
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    moments: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step; bias corrections use the step count.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert!(self.step > 0, "begin_step not called");
        let mom = self.moments.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            mom.m[i] = BETA1 * mom.m[i] + (1.0 - BETA1) * g;
            mom.v[i] = BETA2 * mom.v[i] + (1.0 - BETA2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let m_hat = mom.m[i] / c1;
            let v_hat = mom.v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

/// `base · ½(1 + cos(π · step / total))`, clamped at 0 past `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let progress = (step as f64 / self.total_steps as f64).min(1.0);
        (0.5 * (1.0 + (PI * progress).cos())).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Adam::new();
        let mut p = vec![1.0, -2.0];
        opt.begin_step();
        opt.update(ParamKey::LoraA(0), &mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new();
        let mut p = vec![5.0];
        for _ in 0..2000 {
            opt.begin_step();
            let g = vec![2.0 * (p[0] - 1.5)];
            opt.update(ParamKey::Prototype(0), &mut p, &g, 0.05);
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut opt = Adam::new();
        let mut p: Vec<f64> = vec![0.1, -0.0, 3.0];
        let before: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        opt.begin_step();
        opt.update(ParamKey::LoraB(1), &mut p, &[1.0, 2.0, -1.0], 0.0);
        assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule { total_steps: 10 };
        assert_eq!(s.factor(0), 1.0);
        assert!((s.factor(5) - 0.5).abs() < 1e-12);
        assert!(s.factor(10).abs() < 1e-12);
        assert!(s.factor(50).abs() < 1e-12);
        assert!(s.factor(3) > s.factor(4));
    }
}
