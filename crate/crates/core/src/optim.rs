//! Adam.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::model::ModelParameters;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every parameter named in
    /// `grads`. Parameters without a gradient are not touched.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let mut data = p.data().to_vec();
            for (((x, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            params.set(name, Tensor::checked(p.shape().to_vec(), data, "adam update")?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParameters {
        let mut p = ModelParameters::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut opt = Adam::default();
        opt.step(&mut p, &[("w".into(), Tensor::new(vec![1], vec![3.0]).unwrap())], 0.1).unwrap();
        // Bias correction makes the first step lr * g / |g|.
        assert!((p.require("w").unwrap().data()[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut p = single(0.123456789);
        let before = p.clone();
        let mut opt = Adam::default();
        opt.step(&mut p, &[("w".into(), Tensor::new(vec![1], vec![-2.0]).unwrap())], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = single(5.0);
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let x = p.require("w").unwrap().data()[0];
            opt.step(&mut p, &[("w".into(), Tensor::new(vec![1], vec![2.0 * (x - 1.0)]).unwrap())], 0.05).unwrap();
        }
        assert!((p.require("w").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}
