//! Named parameter tensors and the graph context that binds them to a tape.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Element count of tensors whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, m)| m.len())
            .sum()
    }

    /// Every value rounded through `f32`.
    pub fn round_to_f32(&mut self) {
        for m in self.tensors.values_mut() {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

impl std::ops::Index<&str> for ParamStore {
    type Output = Mat;

    fn index(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }
}

impl std::ops::Index<&String> for ParamStore {
    type Output = Mat;

    fn index(&self, name: &String) -> &Mat {
        &self[name.as_str()]
    }
}

pub fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    if std == 0.0 {
        return Mat::zeros((rows, cols));
    }
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || n.sample(rng))
}

/// Binds parameters to a tape; names outside `trainable` become constants.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    trainable: &'a BTreeSet<String>,
    lora_scale: f64,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            trainable,
            lora_scale: 0.0,
        }
    }

    /// Sets the factor applied to low-rank adapter outputs.
    pub fn with_lora_scale(mut self, scale: f64) -> Self {
        self.lora_scale = scale;
        self
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// # Panics
    /// If `name` is not in the store; model code only asks for names it created.
    pub fn p(&mut self, name: &str) -> Var {
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        let trainable = self.trainable.contains(name);
        self.tape.param(name, value, trainable)
    }

    /// Gradients of `root` for every trainable parameter that was bound.
    pub fn param_grads(&self, root: Var) -> BTreeMap<String, Mat> {
        let mut grads = self.tape.backward(root);
        let mut out = BTreeMap::new();
        let bound: Vec<(String, Var)> = self
            .tape
            .bound_params()
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        for (name, v) in bound {
            if !self.trainable.contains(&name) {
                continue;
            }
            let g = grads
                .take(v)
                .unwrap_or_else(|| Mat::zeros(self.params.get(&name).expect("bound").raw_dim()));
            out.insert(name, g);
        }
        out
    }
}
