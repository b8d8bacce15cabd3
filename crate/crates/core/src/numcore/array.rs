//! Dense 64-bit arrays and the named stores built from them.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns when viewed as a matrix: the last axis is the column
    /// axis and every leading axis folds into rows. A vector is one row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a named array. Names must be unique and values finite.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { name });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all arrays.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// A store with the same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names (in order) and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "stores hold {} and {} arrays",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb {
                return Err(Error::Shape(format!("key `{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Shape(format!(
                    "`{ka}` has shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Returns the name of the first array holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
    }
}

/// Gradients of a scalar with respect to every array of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore(ParamStore);

impl GradStore {
    /// Builds a gradient store directly; the layout must mirror `params`.
    pub fn from_parts(params: &ParamStore, grads: ParamStore) -> Result<Self> {
        params.check_same_layout(&grads)?;
        Ok(Self(grads))
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.0.iter()
    }

    pub fn as_store(&self) -> &ParamStore {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(_, a)| a.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_kept() {
        let mut s = ParamStore::new();
        s.insert("z", Array::scalar(1.0)).unwrap();
        s.insert("a", Array::scalar(2.0)).unwrap();
        s.insert("m", Array::scalar(3.0)).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }

    #[test]
    fn duplicate_and_non_finite_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Array::scalar(1.0)).unwrap();
        assert!(s.insert("w", Array::scalar(2.0)).is_err());
        let err = s.insert("bad", Array::scalar(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn layout_check_catches_shape_changes() {
        let mut a = ParamStore::new();
        a.insert("w", Array::zeros(&[2, 3])).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Array::zeros(&[3, 2])).unwrap();
        assert!(a.check_same_layout(&b).is_err());
        assert!(a.check_same_layout(&a.zeros_like()).is_ok());
    }

    #[test]
    fn matrix_dims_fold_leading_axes() {
        assert_eq!(Array::zeros(&[5]).matrix_dims(), (1, 5));
        assert_eq!(Array::zeros(&[2, 3, 4]).matrix_dims(), (6, 4));
        assert!(Array::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
