//! Plain SGD and bias-corrected Adam over any [`Params`] structure.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Params;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug)]
struct Moments<P> {
    first: P,
    second: P,
    t: i32,
}

#[derive(Clone, Debug)]
pub struct Optimizer<P> {
    kind: OptimizerKind,
    lr: f64,
    moments: Option<Moments<P>>,
}

impl<P: Params + Clone> Optimizer<P> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, moments: None }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update. A non-finite gradient is reported as divergence
    /// (epoch and batch 0; the trainer fills in its position) and leaves the
    /// parameters untouched.
    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        for (name, g) in grads.named_tensors("") {
            if !g.is_finite() {
                return Err(Error::Divergence {
                    epoch: 0,
                    batch: 0,
                    detail: format!("non-finite gradient in {name}"),
                });
            }
        }
        let lr = self.lr;
        let gs: Vec<&[f64]> = grads.named_tensors("").into_iter().map(|(_, t)| t.data()).collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(gs) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let m = self.moments.get_or_insert_with(|| Moments {
                    first: grads.zeros_like(),
                    second: grads.zeros_like(),
                    t: 0,
                });
                m.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(m.t);
                let c2 = 1.0 - ADAM_BETA2.powi(m.t);
                let firsts = m.first.tensors_mut();
                let seconds = m.second.tensors_mut();
                for (((p, g), m1), m2) in params.tensors_mut().into_iter().zip(gs).zip(firsts).zip(seconds) {
                    let it = p.data_mut().iter_mut().zip(g).zip(m1.data_mut()).zip(m2.data_mut());
                    for (((pv, &gv), mv), vv) in it {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_examples() {
        let mut theta = Tensor::vector(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut theta, &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(theta.data(), &[1.0]);
        opt.step(&mut theta, &Tensor::vector(vec![2.0])).unwrap();
        assert!((theta.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for scale in [1e-6, 1e-2, 1.0, 1e4] {
            let mut theta = Tensor::vector(vec![0.0, 0.0]);
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
            opt.step(&mut theta, &Tensor::vector(vec![scale, -scale])).unwrap();
            // m̂ = g and v̂ = g², so the step is lr · g / (|g| + ε).
            let expected = 1e-3 * scale / (scale + ADAM_EPSILON);
            assert!((theta.data()[0] + expected).abs() < 1e-15);
            assert!((theta.data()[1] - expected).abs() < 1e-15);
            assert!((theta.data()[0].abs() - 1e-3).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut theta = Tensor::vector(vec![0.5, -2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
        for _ in 0..3 {
            opt.step(&mut theta, &Tensor::vector(vec![1.0, 3.0])).unwrap();
        }
        assert_eq!(theta.data(), &[0.5, -2.0]);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut theta = Tensor::vector(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let err = opt.step(&mut theta, &Tensor::vector(vec![f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(theta.data(), &[1.0]);
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert_eq!(OptimizerKind::Sgd.to_string(), "sgd");
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
