//! Parameter storage, initializers, and optimizers.

use crate::error::{Error, Result};
use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat store of learnable tensors and their gradient accumulators.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Params {
    vals: Vec<ArrayD<f32>>,
    grads: Vec<ArrayD<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: ArrayD<f32>) -> ParamId {
        let id = ParamId(self.vals.len());
        self.grads.push(ArrayD::zeros(v.raw_dim()));
        self.vals.push(v);
        id
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.vals[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.vals[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f32> {
        &self.grads[id.0]
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &ArrayD<f32>) {
        self.grads[id.0] += g;
    }

    pub fn scale_grads(&mut self, ids: &[ParamId], s: f32) {
        for id in ids {
            self.grads[id.0].mapv_inplace(|v| v * s);
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..self.vals.len()).map(ParamId).collect()
    }

    pub fn n_elems(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.vals[id.0].len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.vals.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// He-style init for a conv weight (cout, cin_per_group, k, k).
pub fn conv_init(rng: &mut impl Rng, cout: usize, cpg: usize, k: usize) -> ArrayD<f32> {
    let fan_in = (cpg * k * k) as f32;
    let std = (2.0 / fan_in).sqrt();
    Array4::from_shape_fn((cout, cpg, k, k), |_| {
        // Box-Muller from two uniforms keeps us off rand_distr for one use.
        let u1: f32 = rng.gen_range(1e-7..1.0f32);
        let u2: f32 = rng.gen_range(0.0..1.0f32);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    })
    .into_dyn()
}

/// 1x1 conv weight initialized to the identity map (cout == cin).
pub fn identity_conv_init(c: usize) -> ArrayD<f32> {
    let mut w = Array4::<f32>::zeros((c, c, 1, 1));
    for i in 0..c {
        w[[i, i, 0, 0]] = 1.0;
    }
    w.into_dyn()
}

pub fn zeros_init(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn vec_init(rng: &mut impl Rng, n: usize, scale: f32) -> ArrayD<f32> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-scale..scale)).into_dyn()
}

/// SGD with momentum and decoupled-from-nothing classic L2 weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub ids: Vec<ParamId>,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    vel: Vec<ArrayD<f32>>,
}

impl SgdMomentum {
    pub fn new(ids: Vec<ParamId>, params: &Params, lr: f32, momentum: f32, wd: f32) -> Self {
        let vel = ids
            .iter()
            .map(|id| ArrayD::zeros(params.get(*id).raw_dim()))
            .collect();
        Self {
            ids,
            lr,
            momentum,
            weight_decay: wd,
            vel,
        }
    }

    pub fn step(&mut self, params: &mut Params) {
        for (i, id) in self.ids.iter().enumerate() {
            let g = params.grad(*id).clone();
            let v = &mut self.vel[i];
            let w = params.get(*id).clone();
            *v = &*v * self.momentum + &g + &w * self.weight_decay;
            let upd = &*v * self.lr;
            *params.get_mut(*id) -= &upd;
        }
    }
}

/// Adam, used for architecture parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub ids: Vec<ParamId>,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(ids: Vec<ParamId>, params: &Params, lr: f32, wd: f32) -> Self {
        let m = ids
            .iter()
            .map(|id| ArrayD::zeros(params.get(*id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|id| ArrayD::zeros(params.get(*id).raw_dim()))
            .collect();
        Self {
            ids,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut Params) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, id) in self.ids.iter().enumerate() {
            let mut g = params.grad(*id).clone();
            if self.weight_decay != 0.0 {
                g += &(params.get(*id) * self.weight_decay);
            }
            self.m[i] = &self.m[i] * self.beta1 + &g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &(&g * &g) * (1.0 - self.beta2);
            let mhat = &self.m[i] / b1t;
            let vhat = &self.v[i] / b2t;
            let upd = mhat / (vhat.mapv(f32::sqrt) + self.eps) * self.lr;
            *params.get_mut(*id) -= &upd;
        }
    }
}

/// Two optimizers must never share a parameter.
pub fn assert_disjoint(a: &[ParamId], b: &[ParamId]) -> Result<()> {
    let sa: HashSet<_> = a.iter().collect();
    for id in b {
        if sa.contains(id) {
            return Err(Error::config(format!(
                "parameter {:?} owned by both optimizers",
                id
            )));
        }
    }
    Ok(())
}
