//! Adam with bias correction, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2, eps) = (F::lit(BETA1), F::lit(BETA2), F::lit(EPS));
        let (lr, c1, c2) = (F::lit(lr), F::lit(c1), F::lit(c2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = store.grad(id).clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((mv, vv), &gv) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            }
            let p = store.value_mut(id);
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / c1;
                let vhat = vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moments as named tensors (`m/<name>`, `v/<name>`).
    pub fn named_moments(&self, store: &ParamStore<F>) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (p, (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("m/{}", p.name), m.clone()));
            out.push((format!("v/{}", p.name), v.clone()));
        }
        out
    }

    pub fn from_named(store: &ParamStore<F>, t: u64, moments: &[(String, Tensor<F>)]) -> Result<Self> {
        let mut s = Self::new(store);
        s.t = t;
        if moments.len() != 2 * store.len() {
            return Err(Error::Format(format!(
                "{} moment tensors for {} parameters",
                moments.len(),
                store.len()
            )));
        }
        for (name, tensor) in moments {
            let (slot, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad moment name {name}")))?;
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Format(format!("moment for unknown parameter {pname}")))?;
            if tensor.shape() != store.value(id).shape() {
                return Err(Error::Format(format!("moment {name} has the wrong shape")));
            }
            match slot {
                "m" => s.m[id.index()] = tensor.clone(),
                "v" => s.v[id.index()] = tensor.clone(),
                _ => return Err(Error::Format(format!("bad moment name {name}"))),
            }
        }
        Ok(s)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
