use crate::autodiff::ParamStore;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update from the gradients held in `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TrainError> {
        if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(TrainError::NonFiniteGradient { param: p.name.clone() });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::new([1], vec![theta]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.75);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.by_name("theta").unwrap().value.data(), &[0.75]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        s.iter_mut().next().unwrap().grad[0] = 1.0;
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.by_name("theta").unwrap().value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(
            &s,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        for _ in 0..100 {
            let theta = s.by_name("theta").unwrap().value.data()[0];
            s.iter_mut().next().unwrap().grad[0] = 2.0 * theta;
            adam.step(&mut s).unwrap();
        }
        assert!(s.by_name("theta").unwrap().value.data()[0].abs() < 0.1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.iter_mut().next().unwrap().grad[0] = f64::NAN;
        let mut adam = Adam::new(&s, AdamConfig::default());
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(adam.steps(), 0);
    }
}
