use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Step learning-rate schedule: the rate during epoch `e` (0-based) is the
/// base rate times every multiplier whose milestone is `<= e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    /// 1e-3, halved at epochs 3, 6, 9 and 13.
    pub fn halving() -> Self {
        LrSchedule { base_lr: 1e-3, milestones: vec![(3, 0.5), (6, 0.5), (9, 0.5), (13, 0.5)] }
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule { base_lr: lr, milestones: vec![] }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones.iter().filter(|(e, _)| *e <= epoch).fold(self.base_lr, |lr, (_, m)| lr * m)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::halving()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub schedule: LrSchedule,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, schedule: LrSchedule) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: schedule.base_lr,
            schedule,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the schedule for the given 0-based epoch.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.schedule.lr_at(epoch);
    }

    /// One update. Every parameter must carry a gradient; use
    /// [`Adam::step_allow_missing`] for partially-used parameter sets.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step_allow_missing(params)
    }

    /// Like [`Adam::step`] but parameters without gradients are left untouched.
    pub fn step_allow_missing(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, set has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &p.grad else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::scalar(x));
        ps
    }

    #[test]
    fn step_descends_square() {
        let mut ps = one_param(1.0);
        let mut opt = Adam::new(&ps, LrSchedule::constant(1e-3));
        let id = ps.id("x").unwrap();
        ps.accumulate_grad(id, &[2.0]);
        opt.step(&mut ps).unwrap();
        let x = ps.value(id).item();
        assert!(x < 1.0 && x > 0.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut ps = one_param(0.25);
        let mut opt = Adam::new(&ps, LrSchedule::halving());
        let id = ps.id("x").unwrap();
        ps.accumulate_grad(id, &[0.0]);
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.value(id).item(), 0.25);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = one_param(1.0);
        let mut opt = Adam::new(&ps, LrSchedule::halving());
        assert!(matches!(opt.step(&mut ps), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn schedule_halves_at_milestones() {
        let s = LrSchedule::halving();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(2), 1e-3);
        assert_eq!(s.lr_at(3), 5e-4);
        assert_eq!(s.lr_at(6), 2.5e-4);
        assert_eq!(s.lr_at(15), 1e-3 / 16.0);
    }
}
