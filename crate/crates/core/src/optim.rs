//! Gradient-descent optimizers over [`ParamSet`] buffers.
//!
//! State buffers follow the parameter visiting order, so they can be saved
//! and restored by name alongside the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::tensor::{lit, Real};

fn flat<T: Real, P: ParamSet<T>>(p: &P) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    p.visit(&mut |_, v| out.push(v.to_vec()));
    out
}

fn zeros_like<T: Real, P: ParamSet<T>>(p: &P) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    p.visit(&mut |_, v| out.push(vec![T::zero(); v.len()]));
    out
}

/// SGD with heavy-ball momentum: `v = mu v + g; theta -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new<P: ParamSet<T>>(params: &P, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: zeros_like(params),
        }
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) {
        let g = flat(grads);
        let (lr, mu) = (lit::<T>(self.lr), lit::<T>(self.momentum));
        let mut i = 0;
        let vel = &mut self.velocity;
        params.visit_mut(&mut |_, p| {
            for ((w, v), &gi) in p.iter_mut().zip(vel[i].iter_mut()).zip(&g[i]) {
                *v = mu * *v + gi;
                *w = *w - lr * *v;
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamSet<T>>(params: &P, lr: f64) -> Self {
        Self {
            lr,
            hyper: AdamHyper::default(),
            t: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) {
        let g = flat(grads);
        self.t += 1;
        let h = self.hyper;
        let c1 = 1.0 - h.beta1.powi(self.t as i32);
        let c2 = 1.0 - h.beta2.powi(self.t as i32);
        let (b1, b2) = (lit::<T>(h.beta1), lit::<T>(h.beta2));
        let (lr, eps) = (lit::<T>(self.lr), lit::<T>(h.eps));
        let (c1, c2) = (lit::<T>(c1), lit::<T>(c2));
        let one = T::one();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut(&mut |_, p| {
            for (j, w) in p.iter_mut().enumerate() {
                let gi = g[i][j];
                let m = &mut ms[i][j];
                let v = &mut vs[i][j];
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                *w = *w - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Copies named buffers into `dst` (same visiting order and sizes).
pub fn load_buffers<T: Real>(dst: &mut [Vec<T>], src: Vec<Vec<T>>) -> Result<()> {
    if dst.len() != src.len() || dst.iter().zip(&src).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s);
    Ok(())
}
