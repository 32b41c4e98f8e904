use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Records differentiable operations for one forward pass.
///
/// The tape is consumed by [`Tape::backward`]; a second call fails until
/// [`Tape::reset`] is used.
pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A value living on a [`Tape`]. Untracked values carry no node id.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) value: Arc<Tensor>,
    pub(crate) id: Option<usize>,
}

/// Gradients of the leaves reachable from a backward root.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|id| self.by_id.get(&id))
    }

    /// Gradient of `var`, or zeros when the root did not depend on it.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A tape that never records; every [`Var`] is a constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_arc(Arc::new(value))
    }

    pub fn leaf_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        let id = if self.recording {
            Some(self.push_node(Vec::new(), None))
        } else {
            None
        };
        Var {
            tape: self,
            value,
            id,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Arc::new(value),
            id: None,
        }
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        Var {
            tape: self,
            value,
            id: None,
        }
    }

    fn push_node(&self, parents: Vec<Option<usize>>, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    /// Register the result of an operation. `make_backward` is only invoked
    /// when at least one parent is tracked.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[&Var<'_>], make_backward: F) -> Var<'_>
    where
        F: FnOnce() -> BackwardFn,
    {
        let ids: Vec<Option<usize>> = parents.iter().map(|p| p.id).collect();
        let id = if self.recording && ids.iter().any(Option::is_some) {
            Some(self.push_node(ids, Some(make_backward())))
        } else {
            None
        };
        Var {
            tape: self,
            value: Arc::new(value),
            id,
        }
    }

    /// Drop all recorded nodes and re-arm the tape.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if self.consumed.get() {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        let root_id = root
            .id
            .ok_or_else(|| Error::Contract("backward root is not attached to the tape".into()))?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root_id + 1);
        grads.resize_with(root_id + 1, || None);
        grads[root_id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::default();

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    out.by_id.insert(id, g);
                }
                Some(bw) => {
                    let parent_grads = bw(&g);
                    for (pid, pg) in node.parents.iter().zip(parent_grads) {
                        let (Some(pid), Some(pg)) = (pid, pg) else {
                            continue;
                        };
                        match &mut grads[*pid] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                    *a += *b;
                                }
                            }
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("id", &self.id)
            .finish()
    }
}
