use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore, Parameter};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: BETA1, beta2: BETA2, eps: EPS, weight_decay, step: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Ids holding moment buffers.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    /// Updates every unfrozen parameter from its stored gradient (missing
    /// gradients count as zero). `lr` gives the rate per parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: impl Fn(&Parameter<T>) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = T::of(self.eps);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let rate = T::of(lr(p));
            let decay = T::one() - rate * T::of(self.weight_decay);
            let n = p.tensor.numel();
            let st = self.state.entry(id).or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
            let grad = p.tensor.grad.take();
            let values = p.tensor.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                values[i] = values[i] * decay - rate * mhat / (vhat.sqrt() + eps);
            }
            p.tensor.grad = grad;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64], grad: Option<&[f64]>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("x.w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        if let Some(g) = grad {
            s.get_mut(id).tensor.grad = Some(g.to_vec());
        }
        s
    }

    #[test]
    fn zero_grad_zero_decay_unchanged() {
        let mut s = store(&[1.5, -2.0], Some(&[0.0, 0.0]));
        AdamW::new(0.0).step(&mut s, |_| 1e-3);
        assert_eq!(s.by_name("x.w").unwrap().tensor.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let mut s = store(&[0.0, 0.0, 0.0], Some(&[3.0, -0.5, 1e-3]));
        AdamW::new(0.0).step(&mut s, |_| 0.1);
        let d = s.by_name("x.w").unwrap().tensor.data().to_vec();
        assert!(d[0] < 0.0 && d[1] > 0.0 && d[2] < 0.0);
        // first bias-corrected step has magnitude lr * |g| / (|g| + eps)
        assert!((d[0] + 0.1 * 3.0 / (3.0 + EPS)).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut s = store(&[2.0, -4.0], None);
        let lr = 0.05;
        AdamW::new(WEIGHT_DECAY).step(&mut s, |_| lr);
        let d = s.by_name("x.w").unwrap().tensor.data();
        assert_eq!(d, &[2.0 * (1.0 - lr * 0.01), -4.0 * (1.0 - lr * 0.01)]);
    }

    #[test]
    fn frozen_untouched_and_untracked() {
        let mut s = store(&[1.0], Some(&[1.0]));
        s.set_frozen_components(&["x"]);
        let mut opt = AdamW::new(WEIGHT_DECAY);
        opt.step(&mut s, |_| 1.0);
        assert_eq!(s.by_name("x.w").unwrap().tensor.data(), &[1.0]);
        assert_eq!(opt.tracked().count(), 0);
    }
}
