//! Named, ordered parameter collections and their binding onto a tape.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{name} is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &ParamStore, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape(
                "param layout",
                format!("{what}: parameter sets differ in names or shapes"),
            ))
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// SHA-256 over names, shapes and value bits; equal iff bit-identical.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Copy with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.push(format!("{prefix}{n}"), t.clone())
                .expect("prefixing keeps names unique");
        }
        out
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone()).expect("source names are unique");
            }
        }
        out
    }

    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.push(n, t)?;
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as gradient leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A parameter store's tape handles for one step.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Binds `store`'s names to vars already on a tape, in store order.
    pub fn from_vars(store: &'a ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::shape(
                "Bound::from_vars",
                format!("{} vars for {} parameters", vars.len(), store.len()),
            ));
        }
        Ok(Bound { store, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.position(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Normal(0, σ²) resampled until inside ±2σ.
pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.push("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.push("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut s = ParamStore::new();
        s.push("w", Tensor::matrix(1, 2, vec![1.0, 2.0])).unwrap();
        let before = s.checksum();
        s.get_mut("w").unwrap().data_mut()[1] = 2.0 + f64::EPSILON * 2.0;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn trunc_normal_stays_in_band() {
        let t = trunc_normal(50, 50, 0.02, &mut seeded(0));
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn prefix_round_trip() {
        let mut s = ParamStore::new();
        s.push("x", Tensor::scalar(1.0)).unwrap();
        assert_eq!(s.prefixed("student.").strip_prefix("student."), s);
    }
}
