//! Dense row-major `f64` tensors with a dynamically recorded reverse-mode graph.
//!
//! Every operation that has at least one input requiring a gradient stores a
//! [`ComputationRecord`] on its output. [`Tensor::backward`] walks that graph in
//! reverse topological order and accumulates one gradient per node.

mod conv;
pub mod counter;
pub mod gradcheck;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use conv::Conv2dSpec;
pub use ops::{rule, FnRule};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of a recorded operation.
///
/// `grad` is the upstream gradient of the output; the rule returns one entry per
/// input, `None` where the input does not require a gradient.
pub trait BackwardRule: Send + Sync {
    fn backward(&self, inputs: &[Tensor], output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// What an operation remembers for its backward pass.
pub struct ComputationRecord {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    rule: Box<dyn BackwardRule>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    record: Option<ComputationRecord>,
}

/// Immutable tensor handle. Cloning is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape);
        if self.numel() <= 16 {
            s.field("data", &self.inner.data);
        }
        s.field("requires_grad", &self.inner.requires_grad);
        if let Some(r) = &self.inner.record {
            s.field("op", &r.op);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a constant tensor, checking that `data` fills `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that collects a gradient during backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::new(shape, data)?;
        Ok(Self::raw(t.inner.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::raw(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::raw(vec![1], vec![value], false, None)
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::raw(vec![n, n], data, false, None)
    }

    fn raw(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        record: Option<ComputationRecord>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                record,
            }),
        }
    }

    /// Output of a differentiable operation. The record is kept only when some
    /// input requires a gradient.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        rule: impl BackwardRule + 'static,
    ) -> Tensor {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let record = requires_grad.then(|| ComputationRecord {
            op,
            inputs,
            rule: Box::new(rule),
        });
        Self::raw(shape, data, requires_grad, record)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn record(&self) -> Option<&ComputationRecord> {
        self.inner.record.as_ref()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(self.shape()).enumerate() {
            assert!(
                ix < ext,
                "index {index:?} out of bounds for axis {i} of {:?}",
                self.shape()
            );
            flat = flat * ext + ix;
        }
        self.inner.data[flat]
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Fresh leaf carrying these values that requires a gradient.
    pub fn as_param(&self) -> Tensor {
        Self::raw(self.inner.shape.clone(), self.to_vec(), true, None)
    }

    /// Reverse-mode pass from a scalar root.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.backward_with(vec![1.0]))
    }

    /// Reverse-mode pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.numel());
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        if self.requires_grad() {
            grads.insert(self.id(), seed);
        }
        for node in order.iter().rev() {
            let Some(record) = node.record() else {
                continue;
            };
            let Some(grad) = grads.get(&node.id()) else {
                continue;
            };
            let input_grads = record.rule.backward(&record.inputs, node.data(), grad);
            debug_assert_eq!(
                input_grads.len(),
                record.inputs.len(),
                "rule for {}",
                record.op
            );
            for (input, g) in record.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(
                    g.len(),
                    input.numel(),
                    "grad length for input of {}",
                    record.op
                );
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(input.id(), g);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(record) = node.record() {
                for input in &record.inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients accumulated by one backward pass, keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, zeros when `t` did not influence the root.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
