use std::collections::BTreeMap;

use super::{NnError, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created lazily (zeros) the first
/// time a parameter is seen.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<(), NnError> {
        // Validate everything first so a bad gradient leaves state untouched.
        for (name, t) in params.iter() {
            match t.grad() {
                Some(g) if g.len() == t.len() => {}
                Some(g) => {
                    return Err(NnError::Shape {
                        op: "adam",
                        expected: t.shape().to_vec(),
                        actual: vec![g.len()],
                    })
                }
                None => return Err(NnError::Config(format!("no gradient for `{name}`"))),
            }
            if let Some(m) = self.first.get(name) {
                if m.len() != t.len() {
                    return Err(NnError::Shape {
                        op: "adam",
                        expected: t.shape().to_vec(),
                        actual: vec![m.len()],
                    });
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let n = t.len();
            let grad = t.grad().expect("validated").to_vec();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((p, g), mi), vi) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    fn scalar_param(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0);
        p.get_mut("x").unwrap().set_grad(vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        adam.step(&mut p).unwrap();
        assert!((p.get("x").unwrap().data()[0] + 0.01).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = scalar_param(0.37);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        for _ in 0..10 {
            p.get_mut("x").unwrap().set_grad(vec![0.0]).unwrap();
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data()[0], 0.37);
    }

    #[test]
    fn minimises_a_square() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        for _ in 0..100 {
            let mut g = Graph::new();
            let b = g.bind(&p);
            let x = b.get("x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut p).unwrap();
            adam.step(&mut p).unwrap();
        }
        let x = p.get("x").unwrap().data()[0];
        assert!(x.abs() < 1.0, "|x| = {x}");
    }

    #[test]
    fn missing_or_mismatched_gradient_is_rejected() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        assert!(adam.step(&mut p).is_err());
        assert!(p.get_mut("x").unwrap().set_grad(vec![1.0, 2.0]).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
