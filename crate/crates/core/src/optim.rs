//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd { lr },
            OptimizerKind::Adam => Self::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self {
            Self::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Self::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    params[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_untouched() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = vec![0.25, -1.5];
            let mut opt = Optimizer::new(kind, 0.1, 2);
            for _ in 0..10 {
                opt.step(&mut p, &[0.0, 0.0]);
            }
            assert_eq!(p, vec![0.25, -1.5]);
        }
    }

    #[test]
    fn adam_minimizes_a_bowl() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }
}
