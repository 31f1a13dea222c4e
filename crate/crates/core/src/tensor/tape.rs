use std::sync::{Arc, Mutex, MutexGuard};

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the upstream gradient of an op's output to one gradient per input
/// (in the order the inputs were recorded).
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

struct Node {
    inputs: Vec<Option<usize>>,
    len: usize,
    backward: Option<BackwardFn>,
}

/// Append-only record of operations. Values only land on a tape when at least
/// one operand is already tracked, so code without leaves runs tape-free.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Arc<Mutex<Vec<Node>>>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Vec<Node>> {
        self.nodes.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Register `value` as a trainable leaf and return its tracked copy.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(Node {
            inputs: Vec::new(),
            len: value.numel(),
            backward: None,
        });
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.lock();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn record(&self, inputs: Vec<Option<usize>>, len: usize, backward: BackwardFn) -> usize {
        self.push(Node {
            inputs,
            len,
            backward: Some(backward),
        })
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        let root = match &loss.node {
            Some(n) if n.tape.same(self) => n.id,
            _ => return Err(Error::Untracked),
        };
        let nodes = self.lock();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parts = bw(&g);
                debug_assert_eq!(parts.len(), node.inputs.len());
                for (input, part) in node.inputs.iter().zip(parts) {
                    let Some(input) = *input else { continue };
                    debug_assert_eq!(part.len(), nodes[input].len);
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, p)| *a += p),
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.clone(),
            grads,
        })
    }
}

/// Result of a backward pass; query with the tracked leaf tensors.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`; zeros when `t` is unreachable or untracked.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        let data = match &t.node {
            Some(n) if n.tape.same(&self.tape) => self.grads.get(n.id).cloned().flatten(),
            _ => None,
        };
        Tensor {
            shape: t.shape.clone(),
            data: data.unwrap_or_else(|| vec![0.0; t.numel()]),
            node: None,
        }
    }
}
