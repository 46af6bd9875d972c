//! Adam with bias correction. State is a flat list of first/second moment
//! tensors aligned index-for-index with the parameter list; the pairing is a
//! caller invariant and any shape drift panics.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update over every parameter tensor.
    pub fn step(&mut self, hp: &AdamParams, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "adam_step: state built for {} tensors, got {}",
            self.m.len(),
            params.len()
        );
        assert_eq!(
            params.len(),
            grads.len(),
            "adam_step: gradient count mismatch"
        );
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            assert_eq!(
                params[i].shape(),
                grads[i].shape(),
                "adam_step: tensor {} shape mismatch {:?} vs {:?}",
                i,
                params[i].shape(),
                grads[i].shape()
            );
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
        for (i, p) in params.iter().enumerate() {
            p.assert_finite(&format!("adam_step tensor {}", i));
        }
    }
}
