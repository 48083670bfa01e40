//! Low-rank adapters and the policy deciding which tensors train.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{normal_mat, ParamStore};
use crate::tape::Mat;

/// Namespace for adapter tensors inside a store or checkpoint.
pub const ADAPTER_PREFIX: &str = "lora.";

pub fn adapter_names(layer: &str) -> (String, String) {
    (format!("{ADAPTER_PREFIX}{layer}.a"), format!("{ADAPTER_PREFIX}{layer}.b"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Linear layer names; `None` means the query and value projections of
    /// every reasoner block.
    pub targets: Option<Vec<String>>,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            targets: None,
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(invalid!("lora rank must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid!("lora alpha must be positive, got {}", self.alpha));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(invalid!("lora init_std must be non-negative"));
        }
        Ok(())
    }
}

/// A linear layer with a frozen base weight and a trainable low-rank update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub weight: Mat,
    pub a: Mat,
    pub b: Mat,
    pub scale: f64,
}

pub fn wrap_linear(weight: &Mat, cfg: &LoraConfig, rng: &mut impl Rng) -> Result<AdaptedLinear> {
    cfg.validate()?;
    let (d_out, d_in) = weight.dim();
    if cfg.rank > d_out.min(d_in) {
        return Err(invalid!(
            "lora rank {} exceeds min({d_out}, {d_in})",
            cfg.rank
        ));
    }
    Ok(AdaptedLinear {
        weight: weight.clone(),
        a: normal_mat(rng, cfg.rank, d_in, cfg.init_std),
        b: Mat::zeros((d_out, cfg.rank)),
        scale: cfg.scale(),
    })
}

impl AdaptedLinear {
    /// Rows of `x` mapped through `W + scale·B·A`, without forming the sum.
    pub fn forward(&self, x: &Mat) -> Mat {
        let base = x.dot(&self.weight.t());
        let low = x.dot(&self.a.t()).dot(&self.b.t());
        base + low * self.scale
    }

    pub fn merge(&self) -> Mat {
        &self.weight + &(self.b.dot(&self.a) * self.scale)
    }

    pub fn extra_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Adds zero-initialised adapters for each target layer to `store`.
pub fn attach_adapters(
    store: &mut ParamStore,
    targets: &[String],
    cfg: &LoraConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    for layer in targets {
        let w = store
            .get(&format!("{layer}.weight"))
            .ok_or_else(|| Error::Config(format!("lora target `{layer}` is not a linear layer")))?;
        let wrapped = wrap_linear(w, cfg, rng)?;
        let (a, b) = adapter_names(layer);
        store.insert(a, wrapped.a);
        store.insert(b, wrapped.b);
    }
    Ok(())
}

/// Folds every adapter into its base weight and drops the adapter tensors.
pub fn merge_adapters(store: &ParamStore, scale: f64) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, m) in store.iter() {
        if !name.starts_with(ADAPTER_PREFIX) {
            out.insert(name, m.clone());
        }
    }
    for (name, a) in store.iter() {
        let Some(layer) = name
            .strip_prefix(ADAPTER_PREFIX)
            .and_then(|n| n.strip_suffix(".a"))
        else {
            continue;
        };
        let b = &store[&format!("{ADAPTER_PREFIX}{layer}.b")];
        let w = out
            .get_mut(&format!("{layer}.weight"))
            .expect("adapter without base layer");
        *w = &*w + &(b.dot(a) * scale);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Frozen,
    LoraAdapted,
    FullyTrainable,
    FromScratch,
}

impl ParamRole {
    pub fn trains(self) -> bool {
        self != ParamRole::Frozen
    }
}

/// One role per parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    roles: BTreeMap<String, ParamRole>,
}

impl FreezePolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, name: impl Into<String>, role: ParamRole) {
        self.roles.insert(name.into(), role);
    }

    pub fn role(&self, name: &str) -> Option<ParamRole> {
        self.roles.get(name).copied()
    }

    pub fn names_with(&self, role: ParamRole) -> BTreeSet<String> {
        self.roles
            .iter()
            .filter(|(_, &r)| r == role)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamRole)> {
        self.roles.iter().map(|(n, &r)| (n.as_str(), r))
    }
}

/// Checks that `policy` covers exactly the tensors of `store` and returns the
/// names the optimizer may update.
pub fn apply_freeze_policy(store: &ParamStore, policy: &FreezePolicy) -> Result<BTreeSet<String>> {
    for (name, _) in policy.iter() {
        if !store.contains(name) {
            return Err(Error::Config(format!("freeze policy names unknown parameter `{name}`")));
        }
    }
    for name in store.names() {
        if policy.role(name).is_none() {
            return Err(Error::Config(format!("freeze policy does not cover `{name}`")));
        }
    }
    Ok(policy
        .iter()
        .filter(|(_, r)| r.trains())
        .map(|(n, _)| n.to_string())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn default_scale_is_four() {
        assert_eq!(LoraConfig::default().scale(), 4.0);
    }

    #[test]
    fn fresh_adapter_is_identity_on_base() {
        let mut r = rng();
        let w = normal_mat(&mut r, 6, 5, 1.0);
        let cfg = LoraConfig { rank: 2, ..LoraConfig::default() };
        let ad = wrap_linear(&w, &cfg, &mut r).unwrap();
        let x = normal_mat(&mut r, 3, 5, 1.0);
        assert_eq!(ad.forward(&x), x.dot(&w.t()));
        assert_eq!(ad.merge(), w);
        assert_eq!(ad.extra_params(), 2 * (6 + 5));
    }

    #[test]
    fn hand_rank_one_case() {
        let ad = AdaptedLinear {
            weight: array![[1.0, 0.0], [0.0, 1.0]],
            a: array![[1.0, 0.0]],
            b: array![[1.0], [0.0]],
            scale: 1.0,
        };
        let x = array![[3.0, -2.0]];
        assert_eq!(ad.forward(&x), array![[6.0, -2.0]]);
    }

    #[test]
    fn merged_forward_matches_adapted() {
        let mut r = rng();
        let w = normal_mat(&mut r, 10, 9, 1.0);
        let mut ad = wrap_linear(&w, &LoraConfig::default(), &mut r).unwrap();
        ad.b = normal_mat(&mut r, 10, 8, 0.5);
        let merged = ad.merge();
        let x = normal_mat(&mut r, 100, 9, 1.0);
        let d = (ad.forward(&x) - x.dot(&merged.t())).mapv(f64::abs);
        assert!(d.iter().all(|&v| v < 1e-10));
        // wrapping the merged weight again and merging changes nothing
        let again = wrap_linear(&merged, &LoraConfig::default(), &mut r).unwrap();
        let d2 = (again.forward(&x) - x.dot(&again.merge().t())).mapv(f64::abs);
        assert!(d2.iter().all(|&v| v < 1e-10));
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let w = Mat::zeros((4, 3));
        let cfg = LoraConfig { rank: 4, ..LoraConfig::default() };
        assert!(matches!(wrap_linear(&w, &cfg, &mut rng()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn attach_rejects_unknown_layer() {
        let mut store = ParamStore::new();
        store.insert("blk.q.weight", Mat::zeros((8, 8)));
        let err = attach_adapters(&mut store, &["blk.qq".to_string()], &LoraConfig::default(), &mut rng());
        assert!(matches!(err, Err(Error::Config(_))));
        attach_adapters(&mut store, &["blk.q".to_string()], &LoraConfig::default(), &mut rng()).unwrap();
        assert_eq!(store.count_prefix(ADAPTER_PREFIX), 8 * (8 + 8));
    }

    #[test]
    fn merge_adapters_folds_into_base() {
        let mut r = rng();
        let mut store = ParamStore::new();
        store.insert("l.weight", normal_mat(&mut r, 4, 4, 1.0));
        store.insert("l.bias", Mat::zeros((1, 4)));
        let cfg = LoraConfig { rank: 2, ..LoraConfig::default() };
        attach_adapters(&mut store, &["l".to_string()], &cfg, &mut r).unwrap();
        *store.get_mut("lora.l.b").unwrap() = normal_mat(&mut r, 4, 2, 1.0);
        let merged = merge_adapters(&store, cfg.scale());
        assert_eq!(merged.len(), 2);
        let ad = AdaptedLinear {
            weight: store["l.weight"].clone(),
            a: store["lora.l.a"].clone(),
            b: store["lora.l.b"].clone(),
            scale: cfg.scale(),
        };
        assert_eq!(merged["l.weight"], ad.merge());
    }

    #[test]
    fn policy_must_partition_store() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Mat::zeros((1, 1)));
        store.insert("dec.w", Mat::zeros((1, 1)));
        let mut p = FreezePolicy::new();
        p.assign("enc.w", ParamRole::Frozen);
        assert!(matches!(apply_freeze_policy(&store, &p), Err(Error::Config(_))));
        p.assign("dec.w", ParamRole::FullyTrainable);
        let t = apply_freeze_policy(&store, &p).unwrap();
        assert_eq!(t.into_iter().collect::<Vec<_>>(), vec!["dec.w".to_string()]);
        p.assign("dec.ww", ParamRole::FullyTrainable);
        assert!(matches!(apply_freeze_policy(&store, &p), Err(Error::Config(_))));
    }
}
