use std::collections::BTreeMap;

use crate::error::{bail, Result};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adaptive-moment (Adam) state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_: &str, t: &Tensor| Tensor::zeros(t.shape());
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: params.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
            second: params.iter().map(|(n, t)| (n.to_string(), zeros(n, t))).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
///
/// Fails without touching any parameter if a gradient or moment is missing
/// or mis-shaped.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    for (name, slot) in params.slots_mut() {
        let Some(grad) = &slot.grad else {
            bail!(Contract, "parameter {name:?} has no gradient");
        };
        match (state.first.get(name), state.second.get(name)) {
            (Some(m), Some(v)) if m.same_shape(&slot.value) && v.same_shape(&slot.value) => {}
            _ => bail!(Contract, "optimizer has no moments for {name:?}"),
        }
        if !grad.same_shape(&slot.value) {
            bail!(Contract, "gradient shape mismatch for {name:?}");
        }
    }
    if state.first.len() != params.len() {
        bail!(Contract, "optimizer tracks parameters absent from the store");
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, slot) in params.slots_mut() {
        let grad = slot.grad.as_mut().expect("checked above");
        let m = state.first.get_mut(name).expect("checked above");
        let v = state.second.get_mut(name).expect("checked above");
        for (((p, g), mi), vi) in slot
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(1.5);
        let mut st = OptimizerState::new(&p, 1e-3);
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::new(&p, 1e-3);
        p.accumulate_grad("w", &Tensor::vector(vec![1.0]), 1.0).unwrap();
        adam_step(&mut p, &mut st).unwrap();
        // m_hat = 1, v_hat = 1 → Δ = lr / (1 + 1e-8)
        let w = p.get("w").unwrap().item();
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn scalar_trace_matches_hand_recurrence() {
        let grads = [1.0, 1.0, -0.5, 2.0];
        let mut p = scalar_store(0.3);
        let mut st = OptimizerState::new(&p, 0.01);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            p.accumulate_grad("w", &Tensor::vector(vec![g]), 1.0).unwrap();
            adam_step(&mut p, &mut st).unwrap();
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((p.get("w").unwrap().item() - w).abs() < 1e-14, "step {t}");
        }
        // a constant gradient yields a constant bias-corrected update
        let mut q = scalar_store(0.0);
        let mut sq = OptimizerState::new(&q, 0.01);
        let mut deltas = vec![];
        for g in [0.7, 0.7] {
            let before = q.get("w").unwrap().item();
            q.accumulate_grad("w", &Tensor::vector(vec![g]), 1.0).unwrap();
            adam_step(&mut q, &mut sq).unwrap();
            deltas.push(q.get("w").unwrap().item() - before);
        }
        assert!((deltas[0] - deltas[1]).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::new(&p, 1e-3);
        p.drop_grad("w");
        assert!(matches!(
            adam_step(&mut p, &mut st),
            Err(crate::Error::Contract(_))
        ));
        // parameter added after the state was built
        let mut p = scalar_store(0.0);
        let mut st = OptimizerState::new(&p, 1e-3);
        p.insert("extra", Tensor::zeros(&[2])).unwrap();
        assert!(adam_step(&mut p, &mut st).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
