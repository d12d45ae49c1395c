//! Adam with per-parameter moment buffers keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::Parameterized;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Updated
    /// parameters are replaced by fresh trainable leaves.
    pub fn step<P: Parameterized<f32>>(&mut self, params: &mut P, grads: &Gradients<f32>) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, t| {
            let Some(g) = grads.get_slice(t) else { return };
            let m = m_all.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = v_all.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = t.to_vec();
            for i in 0..data.len() {
                let gi = g[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
            *t = Tensor::var(data, t.shape()).expect("shape is unchanged");
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::join;

    #[derive(Clone)]
    struct One(Tensor<f32>);

    impl Parameterized<f32> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<f32>)) {
            f(join(prefix, "w"), &self.0)
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f32>)) {
            f(join(prefix, "w"), &mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = One(Tensor::var(vec![1.0, -2.0], &[2]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        });
        let loss = p.0.square().sum_all();
        let grads = loss.backward().unwrap();
        opt.step(&mut p, &grads);
        assert!((p.0.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.0.data()[1] + 1.9).abs() < 1e-6);
        assert!(p.0.requires_grad());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = One(Tensor::var(vec![3.0], &[1]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        for _ in 0..500 {
            let grads = p.0.affine(1.0, -1.0).square().sum_all().backward().unwrap();
            opt.step(&mut p, &grads);
        }
        assert!((p.0.data()[0] - 1.0).abs() < 1e-2);
    }
}
