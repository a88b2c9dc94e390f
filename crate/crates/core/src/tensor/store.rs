//! Named parameter collections.

use indexmap::IndexMap;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from dotted names to tensors. Iteration order is insertion
/// order, which fixes the order of every sweep over the parameters.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn set_requires_grad(&mut self, name: &str, on: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))?
            .set_requires_grad(on);
        Ok(())
    }

    /// Identical names, order, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    /// Copy of the entries whose name satisfies `keep`, in order.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParameterStore {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v)))
                .collect(),
        }
    }
}

/// Parameter name to tape variable, for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} is not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParameterStore::new();
        s.insert("b.w", Tensor::zeros([1])).unwrap();
        s.insert("a.w", Tensor::zeros([1])).unwrap();
        assert!(s.insert("b.w", Tensor::zeros([1])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["b.w", "a.w"]);
    }
}
