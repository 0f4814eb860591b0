//! Momentum SGD and Adam over the model's parameter arrays.

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::ModelParameters;

use super::config::OptimizerKind;

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    /// Velocity (SGD) or first moment (Adam), one per parameter array.
    first: Vec<Array>,
    /// Second moment (Adam only).
    second: Vec<Array>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParameters) -> Self {
        let zeros: Vec<Array> = params.named_arrays().iter().map(|(_, a)| Array::zeros(a.shape())).collect();
        Self {
            kind,
            step: 0,
            second: if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() },
            first: zeros,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_mut(&mut self) -> &mut [Array] {
        &mut self.first
    }

    /// One update with gradients ordered as [`ModelParameters::named_arrays`].
    /// SGD: `v = μ v + g; p -= lr v`. Adam uses `μ` as its first-moment decay.
    pub fn apply(&mut self, params: &mut ModelParameters, grads: &[Array], lr: f64, momentum: f64) -> Result<()> {
        let mut slots = params.arrays_mut();
        if grads.len() != slots.len() || self.first.len() != slots.len() {
            return Err(Error::CountMismatch {
                what: "optimizer gradients",
                expected: slots.len(),
                found: grads.len(),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), v) in slots.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - momentum.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in slots.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((pi, gi), mi), vi) in it {
                        *mi = momentum * *mi + (1.0 - momentum) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }

    /// State arrays named after the parameters they belong to.
    pub fn named_arrays(&self, param_names: &[String]) -> Vec<(String, Array)> {
        let mut out = vec![("optimizer/step".to_string(), Array::scalar(self.step as f64))];
        let prefix = match self.kind {
            OptimizerKind::Sgd => "momentum",
            OptimizerKind::Adam => "adam_m",
        };
        out.extend(
            param_names
                .iter()
                .zip(&self.first)
                .map(|(n, a)| (format!("{prefix}/{n}"), a.clone())),
        );
        out.extend(
            param_names
                .iter()
                .zip(&self.second)
                .map(|(n, a)| (format!("adam_v/{n}"), a.clone())),
        );
        out
    }

    pub fn from_named(kind: OptimizerKind, param_names: &[String], arrays: Vec<(String, Array)>) -> Result<Self> {
        let mut it = arrays.into_iter();
        let step = match it.next() {
            Some((n, a)) if n == "optimizer/step" && a.len() == 1 => a.item() as u64,
            _ => return Err(Error::InvalidArgument("missing optimizer step counter".into())),
        };
        let mut take = |prefix: &str| -> Result<Vec<Array>> {
            param_names
                .iter()
                .map(|n| match it.next() {
                    Some((name, a)) if name == format!("{prefix}/{n}") => Ok(a),
                    Some((name, _)) => Err(Error::InvalidArgument(format!("expected '{prefix}/{n}', found '{name}'"))),
                    None => Err(Error::InvalidArgument(format!("missing '{prefix}/{n}'"))),
                })
                .collect()
        };
        let (first, second) = match kind {
            OptimizerKind::Sgd => (take("momentum")?, Vec::new()),
            OptimizerKind::Adam => {
                let m = take("adam_m")?;
                (m, take("adam_v")?)
            }
        };
        if it.next().is_some() {
            return Err(Error::InvalidArgument("unexpected extra arrays".into()));
        }
        Ok(Self {
            kind,
            step,
            first,
            second,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParameters {
        ModelParameters::new(
            ModelConfig {
                n_local: 4,
                n_global: 2,
                d_local: 2,
                d_global: 2,
                d_corr: 2,
                d_motion: 2,
                d_hidden: 2,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut p = tiny();
        let before = p.arrays();
        let grads: Vec<Array> = before.iter().map(|a| Array::filled(a.shape(), 1.0)).collect();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, &p);
        opt.apply(&mut p, &grads, 0.1, 0.9).unwrap();
        opt.apply(&mut p, &grads, 0.1, 0.9).unwrap();
        // v1 = 1, v2 = 1.9: total step 0.1 * 2.9
        for (a, b) in p.arrays().iter().zip(&before) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.29).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = tiny();
            let before = p.clone();
            let grads: Vec<Array> = p.arrays().iter().map(|a| Array::zeros(a.shape())).collect();
            let mut opt = OptimizerState::new(kind, &p);
            opt.apply(&mut p, &grads, 0.1, 0.9).unwrap();
            assert_eq!(p, before);
        }
    }
}
