use serde::{Deserialize, Serialize};

use crate::error::{CenError, Result};

/// ADAM constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set, laid out tensor by tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, tensor_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn check_shapes(&self, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CenError::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(CenError::Contract(format!(
                    "tensor {t}: expected length {}, params {} grads {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        Ok(())
    }

    /// One bias-corrected ADAM update. A non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        self.check_shapes(params, grads)?;
        for (t, g) in grads.iter().enumerate() {
            if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
                return Err(CenError::Numeric(format!(
                    "non-finite gradient in tensor {t} at {idx}"
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = flush_subnormal(beta1 * *m + (1.0 - beta1) * g);
                *v = flush_subnormal(beta2 * *v + (1.0 - beta2) * g * g);
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Moments of parameters whose gradient stays zero decay geometrically and
/// would spend hundreds of steps as subnormals, which are very slow on common
/// hardware. Values that small contribute nothing to the update.
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(state: &mut AdamState, p: &mut Vec<f64>, g: &[f64]) -> Result<()> {
        let mut params = [p.as_mut_slice()];
        state.step(&mut params, &[g])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![0.5, -2.0, 3.0];
        for _ in 0..50 {
            run(&mut s, &mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0, 3.0]);
        assert_eq!(s.step, 50);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after one step with g = 1, so Δ = α / (1 + ε).
        let mut s = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = vec![0.0];
        run(&mut s, &mut p, &[1.0]).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn equal_gradients_give_equal_updates() {
        let mut s = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, 1.0];
        for step in 0..10 {
            let g = (step as f64).sin();
            run(&mut s, &mut p, &[g, g]).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut s = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, 2.0];
        let err = run(&mut s, &mut p, &[0.1, f64::NAN]).unwrap_err();
        assert!(matches!(err, CenError::Numeric(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 0);
        assert!(s.m[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decayed_moments_never_become_subnormal() {
        let mut s = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = vec![0.0];
        run(&mut s, &mut p, &[1e-3]).unwrap();
        for _ in 0..8000 {
            run(&mut s, &mut p, &[0.0]).unwrap();
            assert!(!s.m[0][0].is_subnormal() && !s.v[0][0].is_subnormal());
        }
        assert_eq!(s.m[0][0], 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, 2.0, 3.0];
        assert!(matches!(run(&mut s, &mut p, &[0.0; 3]), Err(CenError::Contract(_))));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut s = AdamState::new(AdamConfig::default(), &[4]);
        let mut p = vec![0.0; 4];
        for k in 0..20 {
            let g: Vec<f64> = (0..4).map(|i| ((k * 7 + i) as f64).cos() * 3.0).collect();
            run(&mut s, &mut p, &g).unwrap();
            assert!(s.v[0].iter().all(|&v| v >= 0.0));
        }
    }
}
