//! Adam with bias correction, plus global-norm gradient clipping.

use ndarray::Array2;

use crate::embednet::params::ParamSet;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Default cap on the global gradient norm during training.
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    /// State shapes are taken from the parameter set the optimizer will
    /// drive; moments start at zero.
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid("Adam", "learning rate must be positive"));
        }
        let m = params.iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
        let v = params.iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
        Ok(Adam { lr, t: 0, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all tensors; `grads` must align with the set's
    /// insertion order (as produced by `Binding::grads`).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "Adam::step",
                format!("{} grads for {} tensors", grads.len(), params.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..grads.len() {
            if grads[i].dim() != params.tensor(i).dim() {
                return Err(Error::shape(
                    "Adam::step",
                    format!("grad {i}: {:?} vs {:?}", grads[i].dim(), params.tensor(i).dim()),
                ));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&grads[i]).for_each(|m, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&grads[i]).for_each(|v, &g| {
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            });
            let lr = self.lr;
            let p = params.tensor_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
            });
        }
        Ok(())
    }
}

/// Scales all gradients down so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g.iter().map(|&v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_param(value: Array2<f64>) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", value).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = one_param(array![[1.5, -2.0]]);
        let before = ps.get("w").unwrap().clone();
        let mut opt = Adam::new(&ps, 1e-2).unwrap();
        for _ in 0..3 {
            opt.step(&mut ps, &[Array2::zeros((1, 2))]).unwrap();
        }
        assert_eq!(*ps.get("w").unwrap(), before);
    }

    #[test]
    fn first_step_is_signed_unit_scale() {
        // At t=1 the bias-corrected moments are m=g and v=g*g, so the
        // update is -lr * g / (|g| + eps), about -lr * sign(g).
        let mut ps = one_param(array![[0.0, 0.0]]);
        let mut opt = Adam::new(&ps, 1e-3).unwrap();
        let g = array![[0.5, -3.0]];
        opt.step(&mut ps, &[g.clone()]).unwrap();
        let w = ps.get("w").unwrap();
        for j in 0..2 {
            let expect = -1e-3 * g[[0, j]] / (g[[0, j]].abs() + ADAM_EPS);
            assert!((w[[0, j]] - expect).abs() < 1e-15, "{} vs {}", w[[0, j]], expect);
        }
    }

    #[test]
    fn steps_descend_a_quadratic() {
        // Minimize (w - 3)^2 by feeding its gradient 2(w - 3).
        let mut ps = one_param(array![[0.0]]);
        let mut opt = Adam::new(&ps, 0.05).unwrap();
        for _ in 0..500 {
            let w = ps.get("w").unwrap()[[0, 0]];
            let g = array![[2.0 * (w - 3.0)]];
            opt.step(&mut ps, &[g]).unwrap();
        }
        let w = ps.get("w").unwrap()[[0, 0]];
        assert!((w - 3.0).abs() < 0.05, "converged to {w}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![array![[3.0, 0.0]], array![[0.0, 4.0]]];
        // Joint norm is 5; cap at 2.5 halves everything.
        let before = clip_global_norm(&mut grads, 2.5);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads[0][[0, 0]] - 1.5).abs() < 1e-12);
        assert!((grads[1][[0, 1]] - 2.0).abs() < 1e-12);
        // Under the cap nothing changes.
        let mut small = vec![array![[0.3]]];
        let n = clip_global_norm(&mut small, 2.5);
        assert!((n - 0.3).abs() < 1e-12);
        assert_eq!(small[0][[0, 0]], 0.3);
    }
}
