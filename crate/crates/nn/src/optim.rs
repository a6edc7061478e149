use crate::error::{NnError, Result};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<E: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Real> AdamW<E> {
    pub fn new(config: AdamWConfig, params: &ParamStore<E>) -> Self {
        let m: Vec<Vec<E>> = params.iter().map(|(_, _, t)| vec![E::zero(); t.len()]).collect();
        AdamW { config, step: 0, v: m.clone(), m }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[E] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[E] {
        &self.v[i]
    }

    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &Gradients<E>) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(NnError::Shape("gradient set does not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradient passed to AdamW".into()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (E::c(c.beta1), E::c(c.beta2));
        let (one_b1, one_b2) = (E::c(1.0 - c.beta1), E::c(1.0 - c.beta2));
        let lr = E::c(c.lr);
        let decay = E::c(c.lr * c.weight_decay);
        let (bc1, bc2, eps) = (E::c(bc1), E::c(bc2), E::c(c.eps));
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let p = params.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(NnError::Shape(format!("gradient {i} has {} entries, parameter {}", g.len(), p.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] = p[k] - decay * p[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
