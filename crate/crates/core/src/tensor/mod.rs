//! Dense row-major tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is an immutable value. When it was produced by an operation
//! whose inputs live on a [`Tape`] and require gradients, the operation is
//! recorded on that tape together with a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks the tape once in reverse creation
//! order, which is a valid reverse topological order because every node's
//! inputs are created before it.
//!
//! Tensors without a tape are constants: operations on them compute values
//! and record nothing, which is what inference uses.

mod elementwise;
pub mod gradcheck;
mod linalg;
mod nnops;
pub mod optim;
mod shape_ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

pub use nnops::Conv2dSpec;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a leaf that will receive a gradient.
    pub fn leaf(&self, shape: &[usize], data: Arc<Vec<f64>>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        let id = self.push(Node {
            inputs: Vec::new(),
            backward: None,
        });
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

#[derive(Clone, Debug)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::Contract(format!(
            "shape {shape:?} holds {n} values but data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn from_arc(shape: &[usize], data: Arc<Vec<f64>>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[], value)
    }

    pub fn vector(values: &[f64]) -> Tensor {
        Tensor {
            shape: vec![values.len()],
            data: Arc::new(values.to_vec()),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Whether gradients will flow into this tensor's history.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// A constant copy sharing the same storage, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                self.shape
            )));
        }
        let node = self.node.as_ref().ok_or_else(|| {
            TensorError::Contract("backward() on a tensor that is not on a tape".into())
        })?;
        let nodes = node.tape.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; node.id + 1];
        grads[node.id] = Some(vec![1.0]);
        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let n = &nodes[id];
            match &n.backward {
                None => grads[id] = Some(g),
                Some(f) => {
                    let contributions = f(&g);
                    debug_assert_eq!(contributions.len(), n.inputs.len());
                    for (input, contribution) in n.inputs.iter().zip(contributions) {
                        let (Some(input), Some(c)) = (input, contribution) else {
                            continue;
                        };
                        match &mut grads[*input] {
                            Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
        }
        // Only leaves keep their gradient; interior entries were consumed.
        Ok(Gradients {
            tape: node.tape.clone(),
            grads,
        })
    }

    /// Records a new node if any input is tracked; otherwise returns a constant.
    fn record(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(existing) if !existing.same(&n.tape) => {
                        return Err(TensorError::Contract(
                            "operands recorded on different tapes".into(),
                        ))
                    }
                    _ => {}
                }
            }
        }
        let data = Arc::new(data);
        let node = match tape {
            None => None,
            Some(tape) => {
                let ids = inputs.iter().map(|t| t.node.as_ref().map(|n| n.id)).collect();
                let id = tape.push(Node {
                    inputs: ids,
                    backward: Some(Box::new(backward)),
                });
                Some(NodeRef {
                    tape: tape.clone(),
                    id,
                })
            }
        };
        Ok(Tensor { shape, data, node })
    }

    fn data_arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, if `t` is a leaf it reached.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.as_ref()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        self.grads.get(node.id)?.as_deref()
    }

    /// Like [`Gradients::get`] but returns zeros for unreached leaves.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
