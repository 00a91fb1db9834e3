//! Named parameter storage plus the Adam optimizer.

use super::Scalar;
use ndarray::ArrayD;
use std::collections::HashSet;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

struct Param<T> {
    name: String,
    value: ArrayD<T>,
    grad: ArrayD<T>,
    // Adam state
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// Flat store of named parameters with their gradients and optimizer state.
///
/// Layers hold [`ParamId`]s; models own the store. Iteration order is
/// insertion order, which keeps checkpoints and weight hashes stable.
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            value,
            grad,
            m,
            v,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Little-endian `f32` bytes of one parameter, for hashing and
    /// freeze-contract checks.
    pub fn value_bytes(&self, id: ParamId) -> Vec<u8> {
        let p = &self.params[id.0];
        let mut out = Vec::with_capacity(p.value.len() * 4);
        for &x in p.value.iter() {
            out.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
        out
    }
}

/// Adam with the usual bias correction. `step` must be called once per
/// optimizer step; frozen parameters receive no update and no state decay.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        lr: f64,
        frozen: &HashSet<ParamId>,
    ) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let eps = T::from_f64(self.eps);
        let corr1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        for (idx, p) in store.params.iter_mut().enumerate() {
            if frozen.contains(&ParamId(idx)) {
                continue;
            }
            let value = p.value.as_slice_mut().unwrap();
            let grad = p.grad.as_slice().unwrap();
            let m = p.m.as_slice_mut().unwrap();
            let v = p.v.as_slice_mut().unwrap();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                value[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
