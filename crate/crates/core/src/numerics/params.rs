//! Named parameter storage and the per-forward binding of parameters to
//! graph leaves.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::real::Real;
use super::tensor::Tensor;
use super::var::Var;
use crate::error::{Error, Result};

/// Master weights (always `f64`) keyed by dotted path, plus frozen prefixes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor<f64>>,
    frozen: BTreeSet<String>,
}

fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.starts_with(prefix)
            && (prefix.ends_with('.') || name.as_bytes().get(prefix.len()) == Some(&b'.')))
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: format!("parameter `{name}`") });
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f64>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Marks every parameter under `prefix` as frozen.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn unfreeze(&mut self, prefix: &str) {
        self.frozen.remove(prefix);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| has_prefix(name, p))
    }

    /// Names under `prefix` (all names for an empty prefix).
    pub fn names_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names()
            .filter(move |n| prefix.is_empty() || has_prefix(n, prefix))
    }

    /// SHA-256 over names, shapes and exact bit patterns of every tensor
    /// under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for name in self.names_under(prefix) {
            let t = &self.tensors[name];
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every tensor of `other` under `prefix` into `self`, replacing
    /// existing entries.
    pub fn copy_from(&mut self, other: &ParameterSet, prefix: &str) -> usize {
        let mut n = 0;
        for name in other.names_under(prefix) {
            self.tensors.insert(name.to_string(), other.tensors[name].clone());
            n += 1;
        }
        n
    }

    /// Adds every tensor of `other` (names must not collide).
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        for p in other.frozen {
            self.frozen.insert(p);
        }
        Ok(())
    }

    pub fn init_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Replaces every all-zero `.weight` tensor with `N(0, std²)` draws.
    /// Probes use this so zero-initialized read-outs do not hide a path.
    pub fn randomize_zero_weights(&mut self, std: f64, rng: &mut impl Rng) -> Result<usize> {
        let zero: Vec<String> = self
            .tensors
            .iter()
            .filter(|(n, t)| n.ends_with(".weight") && t.data().iter().all(|&v| v == 0.0))
            .map(|(n, _)| n.clone())
            .collect();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        for n in &zero {
            let t = self.tensors.get_mut(n).expect("listed above");
            t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        Ok(zero.len())
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::filled(shape.to_vec(), value))
    }
}

/// Binds parameter sets to graph leaves for one forward/backward pass.
///
/// Each name becomes one leaf, created on first use and shared by later
/// uses. Frozen names (from the sets or from [`Session::freeze`]) become
/// constants. With `trainable = false` every parameter is a constant and no
/// graph is kept.
pub struct Session<'a, T: Real> {
    sets: Vec<&'a ParameterSet>,
    extra_frozen: Vec<String>,
    trainable: bool,
    leaves: RefCell<HashMap<String, Var<T>>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn train(params: &'a ParameterSet) -> Self {
        Self::with_sets(vec![params], true)
    }

    pub fn eval(params: &'a ParameterSet) -> Self {
        Self::with_sets(vec![params], false)
    }

    pub fn with_sets(sets: Vec<&'a ParameterSet>, trainable: bool) -> Self {
        Self {
            sets,
            extra_frozen: Vec::new(),
            trainable,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Treats names under `prefix` as constants for this session only.
    pub fn freeze(mut self, prefix: impl Into<String>) -> Self {
        self.extra_frozen.push(prefix.into());
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn frozen(&self, name: &str) -> bool {
        !self.trainable
            || self.extra_frozen.iter().any(|p| has_prefix(name, p))
            || self.sets.iter().any(|s| s.contains(name) && s.is_frozen(name))
    }

    pub fn tensor(&self, name: &str) -> Result<&'a Tensor<f64>> {
        for s in &self.sets {
            if let Ok(t) = s.get(name) {
                return Ok(t);
            }
        }
        Err(Error::UnknownParameter(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sets.iter().any(|s| s.contains(name))
    }

    /// Leaf for parameter `name`.
    pub fn p(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = Tensor::<T>::from_f64(self.tensor(name)?);
        let v = Var::leaf(t, !self.frozen(name))?;
        self.leaves.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients accumulated into every leaf used so far, in `f64`.
    /// Frozen leaves report nothing.
    pub fn grads(&self) -> BTreeMap<String, Tensor<f64>> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| {
                let g = match v.grad() {
                    Some(g) => g.to_f64(),
                    None => Tensor::zeros(v.shape().to_vec()),
                };
                (k.clone(), g)
            })
            .collect()
    }

    /// Names bound so far.
    pub fn used(&self) -> Vec<String> {
        let mut v: Vec<String> = self.leaves.borrow().keys().cloned().collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_matching_respects_path_segments() {
        assert!(has_prefix("encoder.conv.weight", "encoder"));
        assert!(has_prefix("encoder.conv.weight", "encoder."));
        assert!(!has_prefix("encoder2.conv", "encoder"));
        assert!(has_prefix("encoder", "encoder"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::new();
        p.init_const("a.w", &[2], 1.0).unwrap();
        assert!(matches!(p.init_const("a.w", &[2], 1.0), Err(Error::DuplicateParameter(_))));
    }

    #[test]
    fn session_freezes_and_shares_leaves() {
        let mut p = ParameterSet::new();
        p.init_const("enc.w", &[2], 1.0).unwrap();
        p.init_const("dec.w", &[2], 2.0).unwrap();
        p.freeze("dec");
        let s: Session<f64> = Session::train(&p);
        let a = s.p("enc.w").unwrap();
        let b = s.p("dec.w").unwrap();
        let y = a.mul(&b).unwrap().add(&s.p("enc.w").unwrap()).unwrap().sum().unwrap();
        y.backward().unwrap();
        let g = s.grads();
        assert_eq!(g["enc.w"].data(), &[3.0, 3.0]);
        assert!(!g.contains_key("dec.w"));
    }

    #[test]
    fn fingerprint_changes_with_bits() {
        let mut p = ParameterSet::new();
        p.init_const("x", &[1], 0.0).unwrap();
        let f0 = p.fingerprint("");
        p.get_mut("x").unwrap().data_mut()[0] = -0.0;
        assert_ne!(f0, p.fingerprint(""));
    }
}
