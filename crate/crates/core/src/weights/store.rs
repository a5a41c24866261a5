use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_NAME_BYTES: usize = 256;

/// Ordered collection of named fp32 tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a tensor; names must be unique, non-empty and at most 256 bytes.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_NAME_BYTES {
            return Err(Error::Data(format!(
                "tensor name must be 1..={MAX_NAME_BYTES} bytes, got {} bytes",
                name.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Data(format!("duplicate tensor name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Inserts or overwrites in place, keeping the original position.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].1 = tensor;
                Ok(())
            }
            None => self.insert(name, tensor),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Returns a store without the named entries, preserving order.
    pub fn without(&self, drop: &[String]) -> WeightStore {
        let mut out = WeightStore::new();
        for (name, t) in self.iter() {
            if !drop.iter().any(|d| d == name) {
                out.insert(name, t.clone()).expect("names already validated");
            }
        }
        out
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl FromIterator<(String, Tensor)> for WeightStore {
    /// Panics on invalid or duplicate names.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut store = WeightStore::new();
        for (name, t) in iter {
            store.insert(name, t).expect("invalid tensor name");
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_validated() {
        let mut s = WeightStore::new();
        s.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![1])).is_err());
        assert!(s.insert("", Tensor::zeros(vec![1])).is_err());
        assert!(s.insert("x".repeat(257), Tensor::zeros(vec![1])).is_err());
        s.insert("x".repeat(256), Tensor::zeros(vec![1])).unwrap();
    }

    #[test]
    fn set_keeps_position() {
        let mut s: WeightStore = [("a", 1.0), ("b", 2.0)]
            .into_iter()
            .map(|(n, v)| (n.to_string(), Tensor::full(vec![1], v)))
            .collect();
        s.set("a", Tensor::full(vec![2], 3.0)).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.get("a").unwrap().shape(), &[2]);
    }
}
