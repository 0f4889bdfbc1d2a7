use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
///
/// Moment buffers are created on the first step from the parameter shapes and
/// must keep matching them afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::Shape(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NumericsError::Shape(format!(
                    "adam: parameter {i} is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(NumericsError::Shape("adam: parameter set changed between steps".into()));
        }

        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_scalar(adam: &mut Adam, p: &mut Tensor, g: f64) {
        adam.step(&mut [p], &[Tensor::scalar(g)]).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = p.clone();
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so p = 1 - 0.1 / (1 + 1e-8)
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut p = Tensor::scalar(1.0);
        step_scalar(&mut adam, &mut p, 1.0);
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item().unwrap() - expected).abs() < 1e-15);
        assert!((p.item().unwrap() - 0.9).abs() < 1e-8);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let mut p = Tensor::scalar(0.0);
        step_scalar(&mut adam, &mut p, 0.5);
        let after_one = p.item().unwrap();
        step_scalar(&mut adam, &mut p, 0.5);
        assert!(after_one < 0.0);
        assert!(p.item().unwrap() < after_one);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::zeros(2, 2);
        assert!(adam.step(&mut [&mut p], &[Tensor::zeros(1, 2)]).is_err());
        assert!(adam.step(&mut [&mut p], &[]).is_err());
    }

    proptest! {
        #[test]
        fn sign_step_without_averaging(g in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-4f64..1.0) {
            prop_assume!(g.iter().all(|v| v.abs() > 1e-3));
            let mut adam = Adam::new(AdamConfig { lr, beta1: 0.0, beta2: 0.0, epsilon: 0.0 });
            let n = g.len();
            let mut p = Tensor::zeros(1, n);
            adam.step(&mut [&mut p], &[Tensor::new(1, n, g.clone()).unwrap()]).unwrap();
            for (pv, gv) in p.data().iter().zip(&g) {
                prop_assert!((pv + lr * gv.signum()).abs() <= 1e-12 * lr.max(1.0));
            }
        }
    }
}
