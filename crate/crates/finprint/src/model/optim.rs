//! SGD (with optional momentum) and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, ParamTensors, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyper-parameters plus accumulated state.
///
/// `t` increments by exactly one per applied step. Moment buffers are
/// allocated lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// SGD velocity or Adam first moment.
    pub m: Option<ParamTensors>,
    /// Adam second moment.
    pub v: Option<ParamTensors>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            t: 0,
            m: None,
            v: None,
        }
    }

    /// Adam with the customary betas 0.9 / 0.999 and eps 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        }
    }
}

/// One optimizer step. Consumes and returns `(weights, state)` so a step is
/// an explicit transition; results are deterministic.
pub fn apply_update(
    mut w: Weights,
    grads: &Gradients,
    mut opt: OptimizerState,
) -> Result<(Weights, OptimizerState)> {
    if !grads.all_finite() {
        return Err(Error::Numeric {
            layer: "optimizer".into(),
            msg: "non-finite gradient".into(),
        });
    }
    for ((wn, ws, _), (gn, gs, _)) in w
        .tensors
        .named_slices()
        .iter()
        .zip(grads.named_slices().iter())
    {
        if wn != gn || ws.len() != gs.len() {
            return Err(Error::Contract(format!(
                "gradient tensor {gn} does not match weight tensor {wn}"
            )));
        }
    }

    opt.t += 1;
    match opt.kind {
        OptimizerKind::Sgd => {
            let mut vel = opt.m.take().unwrap_or_else(|| ParamTensors::zeros(&w.config));
            let lr = opt.learning_rate;
            let mu = opt.momentum;
            for ((ws, gs), vs) in w
                .tensors
                .slices_mut()
                .into_iter()
                .zip(grads.named_slices().into_iter().map(|(_, s, _)| s))
                .zip(vel.slices_mut())
            {
                for i in 0..ws.len() {
                    vs[i] = mu * vs[i] + gs[i];
                    ws[i] -= lr * vs[i];
                }
            }
            opt.m = Some(vel);
        }
        OptimizerKind::Adam => {
            let mut m = opt.m.take().unwrap_or_else(|| ParamTensors::zeros(&w.config));
            let mut v = opt.v.take().unwrap_or_else(|| ParamTensors::zeros(&w.config));
            let lr = opt.learning_rate;
            let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
            let bc1 = 1.0 - b1.powi(opt.t as i32);
            let bc2 = 1.0 - b2.powi(opt.t as i32);
            for (((ws, gs), ms), vs) in w
                .tensors
                .slices_mut()
                .into_iter()
                .zip(grads.named_slices().into_iter().map(|(_, s, _)| s))
                .zip(m.slices_mut())
                .zip(v.slices_mut())
            {
                for i in 0..ws.len() {
                    ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
                    vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    ws[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            opt.m = Some(m);
            opt.v = Some(v);
        }
    }
    if !w.tensors.all_finite() {
        return Err(Error::Numeric {
            layer: "optimizer".into(),
            msg: "non-finite weight after update".into(),
        });
    }
    Ok((w, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, EncoderConfig};
    use crate::rng::RngState;
    use approx::assert_relative_eq;

    fn toy() -> Weights {
        let cfg = EncoderConfig {
            input: (4, 4, 1),
            conv_blocks: vec![],
            embed_dim: 2,
        };
        init(&cfg, &RngState::new(1)).unwrap()
    }

    #[test]
    fn sgd_basic_step() {
        // lr 0.1 on w = 1, g = 0.5 -> w = 0.95
        let mut w = toy();
        w.tensors.dense_w.fill(1.0);
        let mut g = ParamTensors::zeros(&w.config);
        g.dense_w.fill(0.5);
        let opt = OptimizerState::sgd(0.1, 0.0);
        let (w2, opt2) = apply_update(w, &g, opt).unwrap();
        assert_relative_eq!(w2.tensors.dense_w[(0, 0)], 0.95, epsilon = 1e-15);
        assert_eq!(opt2.t, 1);
    }

    #[test]
    fn zero_gradients_leave_weights_unchanged() {
        let w = toy();
        let before = w.tensors.clone();
        let g = ParamTensors::zeros(&w.config);
        let (w2, _) = apply_update(w, &g, OptimizerState::sgd(0.1, 0.9)).unwrap();
        assert_eq!(w2.tensors, before);
    }

    #[test]
    fn adam_first_step_magnitude_near_lr() {
        // With a constant gradient, the first bias-corrected Adam step is
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut w = toy();
        w.tensors.dense_w.fill(0.0);
        let mut g = ParamTensors::zeros(&w.config);
        g.dense_w.fill(0.3);
        let lr = 1e-3;
        let (w2, opt2) = apply_update(w, &g, OptimizerState::adam(lr)).unwrap();
        for &v in w2.tensors.dense_w.iter() {
            assert_relative_eq!(v, -lr, max_relative = 1e-6);
        }
        assert_eq!(opt2.t, 1);
    }

    #[test]
    fn t_increments_per_step() {
        let w = toy();
        let g = ParamTensors::zeros(&w.config);
        let mut state = OptimizerState::adam(1e-3);
        let mut weights = w;
        for expect in 1..=3 {
            let (w2, s2) = apply_update(weights, &g, state).unwrap();
            weights = w2;
            state = s2;
            assert_eq!(state.t, expect);
        }
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let w = toy();
        let mut g = ParamTensors::zeros(&w.config);
        g.dense_b[0] = f64::NAN;
        assert!(apply_update(w, &g, OptimizerState::sgd(0.1, 0.0)).is_err());
    }
}
