//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: flat row-major storage, a tape of
//! executed operations, and an enum-dispatched backward pass. It is generic
//! over the element type so the same code trains in `f32` and verifies
//! gradients in `f64`.
//!
//! Gradients accumulate into per-tensor buffers that outlive the tape, so a
//! parameter keeps its gradient across forward passes until `zero_grad` is
//! called. Running `backward` twice on one tape therefore doubles every
//! gradient exactly.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::{grad_check, grad_check_subset};
pub use optim::{Adam, Sgd};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Scalar type of a tensor: `f32` for training, `f64` for verification.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Forward-pass mode for operations that behave differently in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct TensorInner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
}

/// Shared handle to a dense row-major array.
///
/// Cloning is cheap; both handles see the same storage. Handles are
/// single-threaded (`Rc`), matching the one-tape-per-thread concurrency
/// model; plain weight vectors are what crosses threads.
pub struct Tensor<E: Element> {
    inner: Rc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn from_parts(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal the product of the extents"
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn constant(shape: &[usize], data: Vec<E>) -> Self {
        Self::from_parts(shape.to_vec(), data, false)
    }

    /// Trainable parameter: participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        Self::from_parts(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![E::zero(); n])
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(&[], vec![v])
    }

    pub(crate) fn result(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        Self::from_parts(shape, data, requires_grad)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Replace the stored values. Used by optimizers and checkpoint loading.
    pub fn set_data(&self, data: &[E]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn map_data(&self, f: impl FnMut(&mut E)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> E {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() requires a single-element tensor");
        d[0]
    }

    /// Current gradient, or `None` if nothing has been accumulated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

pub(crate) struct Record<E: Element> {
    pub op: ops::Op<E>,
    pub inputs: Vec<Tensor<E>>,
    pub output: Tensor<E>,
}

/// Ordered record of executed differentiable operations.
///
/// Operations append themselves during the forward pass; `backward` walks
/// the records once in reverse. Inputs always precede the operations that
/// consume them because records are appended at execution time.
pub struct Tape<E: Element> {
    records: RefCell<Vec<Record<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    pub(crate) fn push(&self, op: ops::Op<E>, inputs: Vec<Tensor<E>>, output: Tensor<E>) {
        // Constant-only subgraphs never reach backward; skip the record.
        if output.requires_grad() {
            self.records.borrow_mut().push(Record { op, inputs, output });
        }
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Local adjoints are computed first and flushed into each tensor's
    /// persistent gradient accumulator at the end, so repeated calls add
    /// identical contributions.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::State(
                "backward on a tensor that does not require gradients".into(),
            ));
        }

        let mut adjoints: HashMap<u64, Vec<E>> = HashMap::new();
        let mut handles: HashMap<u64, Tensor<E>> = HashMap::new();
        adjoints.insert(loss.id(), vec![E::one()]);
        handles.insert(loss.id(), loss.clone());

        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let out_adj = match adjoints.get(&rec.output.id()) {
                Some(a) => a.clone(),
                None => continue, // not on a path to the loss
            };
            let contributions = ops::backward(&rec.op, &rec.inputs, &rec.output, &out_adj);
            for (input, contrib) in rec.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !input.requires_grad() {
                    continue;
                }
                handles.entry(input.id()).or_insert_with(|| input.clone());
                match adjoints.entry(input.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, c) in e.get_mut().iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(contrib);
                    }
                }
            }
        }
        drop(records);

        for (id, adj) in adjoints {
            handles[&id].accumulate_grad(&adj);
        }
        Ok(())
    }
}

pub(crate) fn shape_of(t: &Tensor<impl Element>) -> String {
    format!("{:?}", t.shape())
}

/// Fill a tensor-sized buffer from a uniform distribution, used by
/// parameter initializers.
pub fn uniform_init<E: Element>(
    rng: &mut impl rand::Rng,
    n: usize,
    low: f64,
    high: f64,
) -> Vec<E> {
    (0..n)
        .map(|_| E::from_f64(rng.gen_range(low..high)))
        .collect()
}
