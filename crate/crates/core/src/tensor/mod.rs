//! Dense f64 tensors with an optional reverse-mode tape.

mod checkpoint;
mod ops;
mod optim;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{AdamConfig, LionConfig, OptimizerKind, OptimizerState};
pub use tape::{BackwardFn, Gradients, Tape};

use std::fmt;

use tape::NodeRef;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; tape linkage is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            node: None,
        })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Only meaningful on untracked tensors
    /// (parameters between optimizer steps); tape linkage is dropped.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<Tape> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    /// Same values, no tape linkage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Build a tensor from a custom differentiable op. `make_backward` is only
    /// invoked when some input is tracked; it must return one gradient per
    /// input, each of that input's length.
    pub fn from_op<F>(inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>, make_backward: F) -> Tensor
    where
        F: FnOnce() -> BackwardFn,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tape = inputs.iter().find_map(|t| t.node.as_ref().map(|n| n.tape.clone()));
        let node = tape.map(|tape| {
            let ids = inputs
                .iter()
                .map(|t| {
                    t.node.as_ref().map(|n| {
                        assert!(n.tape.same(&tape), "operands recorded on different tapes");
                        n.id
                    })
                })
                .collect();
            let id = tape.record(ids, data.len(), make_backward());
            NodeRef { tape, id }
        });
        Tensor { shape, data, node }
    }
}
