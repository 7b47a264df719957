//! Parameter update rules: SGD with momentum/dampening and AdamW.
//!
//! Both flavors apply weight decay in decoupled form, i.e. as a direct shrink
//! of the parameter rather than an addition to the gradient. Momentum and
//! second-moment buffers start at zero, so the very first SGD step moves by
//! `lr * (1 - dampening) * g`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    Sgd,
    AdamW,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerHyper {
    pub mode: OptimizerMode,
    pub momentum: f64,
    pub dampening: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerHyper {
    pub fn sgd(momentum: f64, dampening: f64) -> Self {
        OptimizerHyper {
            mode: OptimizerMode::Sgd,
            momentum,
            dampening,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adamw() -> Self {
        OptimizerHyper {
            mode: OptimizerMode::AdamW,
            momentum: 0.0,
            dampening: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter buffers, aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    hyper: OptimizerHyper,
    momentum: Vec<Option<Tensor<F>>>,
    second: Vec<Option<Tensor<F>>>,
    step_count: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(hyper: OptimizerHyper, n_params: usize) -> Self {
        OptimizerState {
            hyper,
            momentum: vec![None; n_params],
            second: vec![None; n_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hyper(&self) -> &OptimizerHyper {
        &self.hyper
    }

    /// Buffers for checkpointing: (kind, param index, tensor).
    pub fn buffers(&self) -> impl Iterator<Item = (&'static str, usize, &Tensor<F>)> {
        let m = self.momentum.iter().enumerate().filter_map(|(i, t)| Some(("m", i, t.as_ref()?)));
        let v = self.second.iter().enumerate().filter_map(|(i, t)| Some(("v", i, t.as_ref()?)));
        m.chain(v)
    }

    pub fn restore_buffer(&mut self, kind: &str, index: usize, tensor: Tensor<F>) -> Result<()> {
        let slot = match kind {
            "m" => &mut self.momentum,
            "v" => &mut self.second,
            other => return Err(Error::Checkpoint(format!("unknown optimizer buffer {other:?}"))),
        };
        if index >= slot.len() {
            return Err(Error::Checkpoint(format!("optimizer buffer index {index} out of range")));
        }
        slot[index] = Some(tensor);
        Ok(())
    }

    pub fn set_step_count(&mut self, count: u64) {
        self.step_count = count;
    }

    /// Apply one update. `grads[i]` pairs with parameter `i` of the store;
    /// parameters without a gradient are left untouched (aside from nothing:
    /// decoupled decay applies only where a gradient was produced).
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &[Option<Tensor<F>>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "gradient list has {} entries for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count;
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            let id = crate::tensor::ParamId(i);
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?} of shape {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
            let p = params.get(id);
            let updated = match self.hyper.mode {
                OptimizerMode::Sgd => {
                    let mu = F::from_f64(self.hyper.momentum);
                    let damp = F::from_f64(1.0 - self.hyper.dampening);
                    let buf = match &self.momentum[i] {
                        Some(prev) => prev.zip(g, |b, gv| mu * b + damp * gv)?,
                        None => g.scale(damp),
                    };
                    let lr_f = F::from_f64(lr);
                    let decay = F::from_f64(lr * weight_decay);
                    let new_p = p.zip(&buf, |pv, bv| pv - lr_f * bv - decay * pv)?;
                    self.momentum[i] = Some(buf);
                    new_p
                }
                OptimizerMode::AdamW => {
                    let b1 = F::from_f64(self.hyper.beta1);
                    let b2 = F::from_f64(self.hyper.beta2);
                    let one = F::one();
                    let m = match &self.momentum[i] {
                        Some(prev) => prev.zip(g, |mv, gv| b1 * mv + (one - b1) * gv)?,
                        None => g.scale(one - b1),
                    };
                    let v = match &self.second[i] {
                        Some(prev) => prev.zip(g, |vv, gv| b2 * vv + (one - b2) * gv * gv)?,
                        None => g.map(|gv| (one - b2) * gv * gv),
                    };
                    let bc1 = F::from_f64(1.0 - self.hyper.beta1.powi(t as i32));
                    let bc2 = F::from_f64(1.0 - self.hyper.beta2.powi(t as i32));
                    let eps = F::from_f64(self.hyper.eps);
                    let lr_f = F::from_f64(lr);
                    let decay = F::from_f64(lr * weight_decay);
                    let update = m.zip(&v, |mv, vv| {
                        let m_hat = mv / bc1;
                        let v_hat = vv / bc2;
                        m_hat / (v_hat.sqrt() + eps)
                    })?;
                    let new_p = p.zip(&update, |pv, uv| pv - lr_f * uv - decay * pv)?;
                    self.momentum[i] = Some(m);
                    self.second[i] = Some(v);
                    new_p
                }
            };
            params.set(id, updated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(v)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameters_unchanged() {
        for hyper in [OptimizerHyper::sgd(0.9, 0.9), OptimizerHyper::adamw()] {
            let (mut store, id) = scalar_store(1.25);
            let mut opt = OptimizerState::new(hyper, 1);
            let grads = vec![Some(Tensor::scalar(0.0))];
            opt.step(&mut store, &grads, 0.1, 0.0).unwrap();
            assert_eq!(store.get(id).data(), &[1.25]);
        }
    }

    #[test]
    fn sgd_first_step_matches_hand_oracle() {
        // Hand-stepped: buf = (1 - dampening) * g, p' = p - lr * buf.
        let (p0, g, lr, damp) = (2.0, 0.5, 0.1, 0.9);
        let expect = p0 - lr * (1.0 - damp) * g;
        let (mut store, id) = scalar_store(p0);
        let mut opt = OptimizerState::new(OptimizerHyper::sgd(0.9, damp), 1);
        opt.step(&mut store, &[Some(Tensor::scalar(g))], lr, 0.0).unwrap();
        assert!((store.get(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_hand_oracle() {
        // Hand-stepped: m = (1-b1) g, v = (1-b2) g^2, with bias correction at t=1
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps), then
        // decoupled decay subtracts lr * wd * p.
        let (p0, g, lr, wd) = (1.0, 0.3, 0.01, 0.05);
        let eps = 1e-8;
        let m_hat = g;
        let v_hat: f64 = g * g;
        let expect = p0 - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * p0;
        let (mut store, id) = scalar_store(p0);
        let mut opt = OptimizerState::new(OptimizerHyper::adamw(), 1);
        opt.step(&mut store, &[Some(Tensor::scalar(g))], lr, wd).unwrap();
        assert!((store.get(id).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn negative_learning_rate_is_parameter_error() {
        let (mut store, _) = scalar_store(1.0);
        let mut opt = OptimizerState::new(OptimizerHyper::adamw(), 1);
        let err = opt.step(&mut store, &[None], -0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn sgd_two_steps_accumulate_momentum() {
        // Step 1: buf1 = 0.1 g ; step 2: buf2 = 0.9 buf1 + 0.1 g.
        let (p0, g, lr) = (1.0, 1.0, 0.5);
        let buf1 = 0.1 * g;
        let p1 = p0 - lr * buf1;
        let buf2: f64 = 0.9 * buf1 + 0.1 * g;
        let p2 = p1 - lr * buf2;
        let (mut store, id) = scalar_store(p0);
        let mut opt = OptimizerState::new(OptimizerHyper::sgd(0.9, 0.9), 1);
        opt.step(&mut store, &[Some(Tensor::scalar(g))], lr, 0.0).unwrap();
        opt.step(&mut store, &[Some(Tensor::scalar(g))], lr, 0.0).unwrap();
        assert!((store.get(id).data()[0] - p2).abs() < 1e-15);
    }
}
