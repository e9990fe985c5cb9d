//! Adam with bias correction, and the central-difference gradient oracle.

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One descent step on `params` along `grads` (a minimization step).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(CalibError::invalid(format!(
                "adam: {} params, {} grads, state sized {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        let bad: Vec<usize> = grads
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_finite())
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(CalibError::numerical(format!("non-finite gradient at indices {bad:?}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Central differences `(f(x + hᵢeᵢ) − f(x − hᵢeᵢ)) / 2hᵢ` with `hᵢ = h·max(1, |xᵢ|)`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let hi = h * x[i].abs().max(1.0);
            probe[i] = x[i] + hi;
            let up = f(&probe);
            probe[i] = x[i] - hi;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * hi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut st = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        for _ in 0..10 {
            st.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let mut st = AdamState::new(4, lr);
        let start = vec![0.5, 0.5, 0.5, 0.5];
        let g = [3.0, -0.2, 1e-3, -50.0];
        let mut p = start.clone();
        st.step(&mut p, &g).unwrap();
        for i in 0..4 {
            let expected = -lr * g[i].signum();
            assert!(((p[i] - start[i]) - expected).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut st = AdamState::new(2, 0.05);
            let mut p = vec![2.0, -1.0];
            for _ in 0..100 {
                let g = [2.0 * p[0], 4.0 * p[1] * p[1] * p[1]];
                st.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_reports_indices() {
        let mut st = AdamState::new(3, 0.1);
        let mut p = vec![0.0; 3];
        let err = st.step(&mut p, &[0.0, f64::NAN, f64::INFINITY]).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"), "{err}");
        assert!(st.step(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn finite_differences_exact_cases() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|x| 2.0 * x[0] - 7.0 * x[1] + 1.0, &[0.3, -4.0], FD_STEP);
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 7.0).abs() < 1e-9);
    }
}
