//! Adam with decoupled weight decay.

use std::collections::{BTreeMap, BTreeSet};

use crate::params::ParamStore;
use crate::tape::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every name in `trainable`; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, trainable: &BTreeSet<String>, grads: &BTreeMap<String, Mat>) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for name in trainable {
            let p = params.get_mut(name).expect("trainable parameter in store");
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(p.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(p.raw_dim()));
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Mat::zeros(p.raw_dim());
                    &zero
                }
            };
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * (mhat / (vhat.sqrt() + EPS) + self.weight_decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -2.0]]);
        store.insert("frozen", array![[5.0]]);
        let trainable: BTreeSet<String> = ["w".to_string()].into();
        let grads: BTreeMap<String, Mat> = [("w".to_string(), array![[0.5, -3.0]])].into();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &trainable, &grads);
        // bias-corrected first step is g/|g| up to eps
        assert!((store["w"][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((store["w"][[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(store["frozen"][[0, 0]], 5.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut store = ParamStore::new();
        store.insert("w", array![[0.3, 0.7]]);
        let before = store.clone();
        let trainable: BTreeSet<String> = ["w".to_string()].into();
        let grads: BTreeMap<String, Mat> = [("w".to_string(), array![[1.0, 1.0]])].into();
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut store, &trainable, &grads);
        assert_eq!(store, before);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        store.insert("w", array![[2.0]]);
        let trainable: BTreeSet<String> = ["w".to_string()].into();
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &trainable, &BTreeMap::new());
        // zero gradient: only the decay term acts
        assert!((store["w"][[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
