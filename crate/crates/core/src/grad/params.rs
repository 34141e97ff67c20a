use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named array inside a [`ParamTree`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named collection of real arrays (rank 0, 1 or 2) backed by one flat buffer.
///
/// Every trainable quantity lives here: flow weights, the mean-field prior,
/// direction logits and inference-function logits. Gradients are returned as
/// a tree of the same layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    values: Vec<f64>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an array and returns the flat offset of its first element.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<usize> {
        if shape.len() > 2 {
            return Err(Error::Shape(format!("{name}: rank {} > 2", shape.len())));
        }
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::Shape(format!(
                "{name}: shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                node: None,
                detail: format!("{name}[{i}] is not finite"),
            });
        }
        let offset = self.values.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        self.values.extend(values);
        Ok(offset)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            index: self.index.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entry(name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.index.get(name).map(|&i| self.entries[i].clone())?;
        Some(&mut self.values[e.offset..e.offset + e.len()])
    }

    /// Total number of scalars.
    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Builds a tree with this layout holding `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, tree holds {}",
                flat.len(),
                self.values.len()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                node: None,
                detail: format!("flat value {i} is not finite"),
            });
        }
        Ok(Self {
            entries: self.entries.clone(),
            index: self.index.clone(),
            values: flat.to_vec(),
        })
    }

    /// Rebuilds a tree from serialized entries and values.
    pub fn from_parts(entries: Vec<ParamEntry>, values: Vec<f64>) -> Result<Self> {
        let mut tree = Self::new();
        for e in &entries {
            let end = e.offset + e.len();
            if e.offset != tree.values.len() || end > values.len() {
                return Err(Error::Shape(format!("entry {} has inconsistent offset", e.name)));
            }
            tree.insert(&e.name, &e.shape, values[e.offset..end].to_vec())?;
        }
        if tree.values.len() != values.len() {
            return Err(Error::Shape("trailing values after last entry".into()));
        }
        Ok(tree)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries == other.entries
    }

    /// `self += scale * other`, requiring identical layouts.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("a", &[], vec![1.0]).unwrap();
        t.insert("b", &[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        t.insert("c", &[2], vec![-1.0, 0.5]).unwrap();
        t
    }

    #[test]
    fn layout_and_lookup() {
        let t = tree();
        assert_eq!(t.total_dim(), 9);
        assert_eq!(t.get("b").unwrap()[4], 4.0);
        assert_eq!(t.entry("c").unwrap().offset, 7);
        assert!(t.get("missing").is_none());
    }

    #[test]
    fn rejects_duplicates_and_bad_values() {
        let mut t = tree();
        assert!(t.insert("a", &[1], vec![0.0]).is_err());
        assert!(t.insert("d", &[2], vec![0.0]).is_err());
        assert!(t.insert("e", &[1], vec![f64::NAN]).is_err());
        assert!(t.insert("f", &[1, 1, 1], vec![0.0]).is_err());
        assert!(t.unflatten(&[0.0; 3]).is_err());
    }

    #[test]
    fn from_parts_roundtrip() {
        let t = tree();
        let back = ParamTree::from_parts(t.entries().to_vec(), t.flatten()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(vals in proptest::collection::vec(-1e6f64..1e6, 9)) {
            let t = tree().unflatten(&vals).unwrap();
            prop_assert_eq!(t.flatten(), vals);
            prop_assert_eq!(t.unflatten(&t.flatten()).unwrap(), t);
        }
    }
}
