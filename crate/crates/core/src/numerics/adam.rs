use super::tensor::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are kept per parameter, in store
/// order, and allocated on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using the gradients stored on each tensor. Every
    /// parameter must carry a gradient; the store is left untouched otherwise.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        for ((i, (_, tensor)), (m, v)) in params
            .iter_mut()
            .enumerate()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            debug_assert_eq!(m.len(), tensor.len(), "param {i}");
            let grad = tensor.grad().expect("checked above").to_vec();
            for (((p, &g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        if let Some(g) = grad {
            t.accumulate_grad(&[g]).unwrap();
        }
        s.insert("theta", t).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(1.5, Some(0.0));
        let mut adam = Adam::new(1e-3, (0.9, 0.999), 1e-8);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get("theta").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0, Some(1.0));
        let mut adam = Adam::new(0.01, (0.9, 0.999), 1e-8);
        adam.step(&mut s).unwrap();
        let theta = s.get("theta").unwrap().data()[0];
        // bias-corrected moments are both exactly 1 after one step
        assert!((theta + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn moments_accumulate_across_steps() {
        // Hand trace with g = 1 then g = 1 (gradient not cleared):
        // m1 = 0.1, v1 = 0.001 -> update lr
        // m2 = 0.19, v2 = 0.001999 -> mhat = 1, vhat = 1 -> update lr again.
        // With a changing gradient the second update differs from the first.
        let mut once = scalar_store(0.0, Some(2.0));
        let mut adam_once = Adam::new(0.1, (0.9, 0.999), 1e-8);
        adam_once.step(&mut once).unwrap();

        let mut twice = scalar_store(0.0, Some(2.0));
        let mut adam_twice = Adam::new(0.1, (0.9, 0.999), 1e-8);
        adam_twice.step(&mut twice).unwrap();
        adam_twice.step(&mut twice).unwrap();
        let a = once.get("theta").unwrap().data()[0];
        let b = twice.get("theta").unwrap().data()[0];
        assert!((a + 0.1).abs() < 1e-8);
        assert!((b + 0.2).abs() < 1e-8);
        assert_ne!(a, b);
        assert_eq!(adam_twice.steps(), 2);

        // second step with a different gradient: m2 = 0.9·0.2 + 0.1·(-1) = 0.08,
        // v2 = 0.999·0.004 + 0.001·1 = 0.004996
        let mut s = scalar_store(0.0, Some(2.0));
        let mut adam = Adam::new(0.1, (0.9, 0.999), 0.0);
        adam.step(&mut s).unwrap();
        s.zero_grad();
        s.get_mut("theta").unwrap().accumulate_grad(&[-1.0]).unwrap();
        adam.step(&mut s).unwrap();
        let mhat = 0.08 / (1.0 - 0.81);
        let vhat: f64 = 0.004_996 / (1.0 - 0.998_001);
        let expected = -0.1 - 0.1 * mhat / vhat.sqrt();
        assert!((s.get("theta").unwrap().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut s = scalar_store(0.0, None);
        let mut adam = Adam::new(0.1, (0.9, 0.999), 1e-8);
        assert!(matches!(adam.step(&mut s), Err(Error::MissingGradient(n)) if n == "theta"));
        assert_eq!(s.get("theta").unwrap().data(), &[0.0]);
    }
}
