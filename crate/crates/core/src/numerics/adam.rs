use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Bias-corrected Adam with classic (coupled) L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk + wd * *w;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = Matrix::from_rows(&[[0.5, -0.25, 1.0]]).unwrap();
        let before = p.clone();
        let g = Matrix::from_rows(&[[3.0, -0.5, 1e-2]]).unwrap();
        let mut st = AdamState::new(cfg(1e-3, 0.0), &[(1, 3)]);
        st.update(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for k in 0..3 {
            let delta = p.get(0, k) - before.get(0, k);
            let want = -1e-3 * g.get(0, k).signum();
            assert!((delta - want).abs() < 1e-8, "{delta} vs {want}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Matrix::from_rows(&[[0.5, -0.25]]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(cfg(1e-2, 0.0), &[(1, 2)]);
        for _ in 0..5 {
            st.update(&mut [&mut p], &[Matrix::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn converges_on_quadratic() {
        let c = [0.3, -0.7, 0.2, 0.9];
        let mut p = Matrix::zeros(1, 4);
        let dist = |p: &Matrix| p.data().iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let initial = dist(&p);
        let mut st = AdamState::new(cfg(0.05, 0.0), &[(1, 4)]);
        for _ in 0..50 {
            let g = Matrix::from_fn(1, 4, |_, k| 2.0 * (p.get(0, k) - c[k]));
            st.update(&mut [&mut p], &[g]).unwrap();
        }
        assert!(dist(&p) < initial / 10.0, "{} vs {}", dist(&p), initial);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::new(cfg(1e-3, 0.0), &[(2, 2)]);
        assert!(st.update(&mut [&mut p], &[Matrix::zeros(1, 2)]).is_err());
        assert_eq!(st.step, 0);
    }
}
