//! Define-by-run computation graph. Nodes are appended in execution order, so
//! the vector itself is a topological order and backward is a single reverse
//! sweep. The graph is consumed by `backward` and must not be reused.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops::{self, Op};
use super::{GradCell, NodeRef, Tensor};
use crate::error::{Error, Result};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<u32>,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub cell: Option<Arc<GradCell>>,
    pub requires: bool,
}

/// Computation graph for one forward (+ optional backward) pass.
pub struct Graph {
    gid: u64,
    recording: bool,
    consumed: bool,
    pub(crate) nodes: Vec<Node>,
    leaves: HashMap<usize, u32>,
}

impl Graph {
    /// Recording graph: ops append nodes and `backward` works.
    pub fn new() -> Graph {
        Graph {
            gid: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            recording: true,
            consumed: false,
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    /// Inference graph: ops compute values only; no tape is kept.
    pub fn inference() -> Graph {
        Graph {
            gid: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            recording: false,
            consumed: false,
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Bind a tensor as an input of the next op, deduplicating leaves so a
    /// parameter used twice accumulates both gradient contributions.
    pub(crate) fn register(&mut self, t: &Tensor) -> u32 {
        if let Some(nr) = t.node {
            if nr.graph == self.gid {
                return nr.index;
            }
        }
        // Leaf identity: the grad cell for parameters (clones share it),
        // otherwise the data buffer.
        let key = match t.grad_cell() {
            Some(cell) => Arc::as_ptr(cell) as usize,
            None => t.data_arc().as_ptr() as usize,
        };
        if let Some(&idx) = self.leaves.get(&key) {
            return idx;
        }
        let idx = self.push_node(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            data: Arc::clone(t.data_arc()),
            cell: t.grad_cell().cloned(),
            requires: t.requires_grad(),
        });
        self.leaves.insert(key, idx);
        idx
    }

    fn push_node(&mut self, node: Node) -> u32 {
        let idx = self.nodes.len() as u32;
        self.nodes.push(node);
        idx
    }

    /// Record an op result (or just wrap the value when not recording).
    pub(crate) fn emit(
        &mut self,
        op: Op,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Tensor {
        let requires = inputs.iter().any(|t| t.requires_grad());
        let data = Arc::new(data);
        if !self.recording {
            return Tensor::from_parts(data, shape, requires, None);
        }
        let input_ids: Vec<u32> = inputs.iter().map(|t| self.register(t)).collect();
        let idx = self.push_node(Node {
            op,
            inputs: input_ids,
            shape: shape.clone(),
            data: Arc::clone(&data),
            cell: None,
            requires,
        });
        Tensor::from_parts(
            data,
            shape,
            requires,
            Some(NodeRef {
                graph: self.gid,
                index: idx,
            }),
        )
    }

    /// Like `emit` but shares the input's buffer (views such as reshape).
    pub(crate) fn emit_shared(
        &mut self,
        op: Op,
        input: &Tensor,
        shape: Vec<usize>,
    ) -> Tensor {
        let requires = input.requires_grad();
        let data = Arc::clone(input.data_arc());
        if !self.recording {
            return Tensor::from_parts(data, shape, requires, None);
        }
        let input_ids = vec![self.register(input)];
        let idx = self.push_node(Node {
            op,
            inputs: input_ids,
            shape: shape.clone(),
            data: Arc::clone(&data),
            cell: None,
            requires,
        });
        Tensor::from_parts(
            data,
            shape,
            requires,
            Some(NodeRef {
                graph: self.gid,
                index: idx,
            }),
        )
    }

    /// Reverse-mode sweep from a scalar loss. Populates the grad cells of all
    /// reachable leaf parameters (and clears cells of registered leaves the
    /// loss does not depend on). Consumes the tape: a second call without a
    /// fresh forward pass is a contract error.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "backward called twice on the same graph; rebuild the forward pass",
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.consumed = true;

        let loss_idx = match loss.node {
            Some(nr) if nr.graph == self.gid => nr.index as usize,
            // A constant scalar never touched this graph: nothing depends on
            // anything, so there are no gradients to produce.
            _ => {
                if self.recording {
                    self.release();
                    return Ok(());
                } else {
                    return Err(Error::contract(
                        "backward on an inference graph (no tape was recorded)",
                    ));
                }
            }
        };

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_idx] = Some(vec![1.0]);

        for i in (0..=loss_idx).rev() {
            let node = &self.nodes[i];
            if !node.requires || matches!(node.op, Op::Leaf) {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            ops::backward_op(&self.nodes, i, &gout, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(cell) = &node.cell {
                cell.store(grads[i].take());
            }
        }
        self.release();
        Ok(())
    }

    fn release(&mut self) {
        self.nodes.clear();
        self.leaves.clear();
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}
