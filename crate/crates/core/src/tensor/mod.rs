//! Dense tensors, parameter storage and a tape-based reverse-mode
//! differentiation engine.
//!
//! Values flowing through a [`Graph`] are row-major matrices. Parameters
//! live in a [`ParamStore`] outside the graph; a graph borrows them
//! read-only for one forward/backward pass and reports the accumulated
//! gradients per [`ParamId`].

mod checkpoint;
mod graph;

pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file};
pub use graph::{log_sum_exp, softmax_in_place, Gradients, Graph, Var};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

/// An n-dimensional array of 64-bit reals, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Uniform Glorot initialization for a weight of the given shape.
    pub fn glorot<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let (fan_in, fan_out) = match shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, *n),
            [r, c, ..] => (*r, *c),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, limit: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape viewed as a matrix: the last dimension is the column count and
    /// everything before it is folded into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            dims => {
                let cols = dims[dims.len() - 1];
                (dims[..dims.len() - 1].iter().product(), cols)
            }
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.matrix_dims();
        self.data[row * cols + col]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named model parameters. Names are unique; ids are dense and stable in
/// insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(false);
        id
    }

    /// Adds a parameter that takes part in the forward pass but never
    /// receives gradient (e.g. fixed pretrained vectors).
    pub fn add_frozen(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = self.add(name, tensor);
        self.frozen[id.0] = true;
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.ids()
            .filter(|&id| !self.is_frozen(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites parameter values from a list of named tensors. Every
    /// parameter must be present with an identical shape; unknown names are
    /// ignored so the list may also carry optimizer state.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for idx in 0..self.tensors.len() {
            let name = &self.names[idx];
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != self.tensors[idx].shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: self.tensors[idx].shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            self.tensors[idx] = (*src).clone();
        }
        Ok(())
    }
}
