use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use ndarray::ArrayD;
use ndarray_npy::{NpzReader, NpzWriter};

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Named, ordered collection of parameter tensors.
///
/// Tensors are reference counted so that binding them onto a graph does not
/// copy; an in-place update copies only if a graph still holds the tensor.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every tensor on `g`, in order.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.values.iter().map(|v| g.shared(v.clone(), trainable)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| Arc::new(v.mapv(|x| U::lit(x.to_f64c()))))
                .collect(),
        }
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn save_npz(&self, path: &Path) -> Result<()> {
        let mut npz = NpzWriter::new(File::create(path)?);
        for (name, v) in self.iter() {
            npz.add_array(name, v)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        }
        npz.finish()
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// Loads values into a store with the same layout as `self`.
    pub fn load_npz(&self, path: &Path) -> Result<ParamStore<T>> {
        let ck = |e: &dyn std::fmt::Display| Error::Checkpoint(format!("{}: {e}", path.display()));
        let mut npz = NpzReader::new(File::open(path)?).map_err(|e| ck(&e))?;
        let mut out = self.clone();
        for (i, name) in self.names.iter().enumerate() {
            let v: ArrayD<T> = npz.by_name(name).map_err(|e| ck(&format!("{name}: {e}")))?;
            if v.shape() != self.values[i].shape() {
                return Err(ck(&format!(
                    "{name} has shape {:?}, expected {:?}",
                    v.shape(),
                    self.values[i].shape()
                )));
            }
            out.values[i] = Arc::new(v);
        }
        Ok(out)
    }
}
