use serde::{Deserialize, Serialize};

use crate::graph::Grads;
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Parameters absent from `grads` did not enter the graph
    /// and are skipped, moments included.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn grads_for(params: &ParamSet, g_val: &[f64]) -> Grads {
        // loss = sum(w * c) has gradient c with respect to w
        let mut g = Graph::new();
        let id = params.ids().next().unwrap();
        let w = g.param(params, id);
        let c = g.constant(Tensor::new(vec![g_val.len()], g_val.to_vec()).unwrap());
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = grads_for(&p, &[0.0, 0.0, 0.0]);
        opt.step(&mut p, &g);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn unused_parameters_are_skipped() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        p.add("unused", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = grads_for(&p, &[1.0, -1.0]);
        opt.step(&mut p, &g);
        let ids: Vec<_> = p.ids().collect();
        assert_ne!(p.get(ids[0]).data(), &[1.0, 2.0]);
        assert_eq!(p.get(ids[1]).data(), &[3.0, 4.0]);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &p);
        let g = grads_for(&p, &[3.0, -1e-3, 250.0, -7.0]);
        opt.step(&mut p, &g);
        let id = p.ids().next().unwrap();
        for (v, gv) in p.get(id).data().iter().zip([3.0, -1e-3, 250.0, -7.0f64]) {
            assert!(v.abs() <= cfg.lr * (1.0 + 1e-6));
            assert_eq!(v.signum(), -gv.signum());
        }
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let w0 = [0.3, -1.2];
        let gs = [[0.5, -2.0], [-0.25, 4.0]];
        // independent scalar Adam
        let mut want = w0;
        for (j, w) in want.iter_mut().enumerate() {
            let (mut m, mut v) = (0.0f64, 0.0f64);
            for (t, g) in gs.iter().enumerate() {
                let t = (t + 1) as i32;
                m = 0.9 * m + 0.1 * g[j];
                v = 0.999 * v + 0.001 * g[j] * g[j];
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                *w -= cfg.lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(vec![2], w0.to_vec()).unwrap());
        let mut opt = Adam::new(cfg, &p);
        for g in gs {
            let gr = grads_for(&p, &g);
            opt.step(&mut p, &gr);
        }
        let id = p.ids().next().unwrap();
        for (a, b) in p.get(id).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(opt.steps(), 2);
    }
}
