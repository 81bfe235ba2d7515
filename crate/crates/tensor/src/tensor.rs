use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::Op;
use crate::shape::numel;

/// Stable identity of a tensor node, used to key gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TensorId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

pub(crate) struct Inner<E: Element> {
    pub(crate) id: TensorId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<E>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<E>>,
}

/// Immutable, reference-counted n-dimensional array.
///
/// Results of operations on tensors that require gradients keep a link to
/// their inputs; the graph lives exactly as long as the tensors that
/// reference it and is released when the loss is dropped.
pub struct Tensor<E: Element>(pub(crate) Arc<Inner<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub(crate) fn from_parts(
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Op<E>>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape,
            data: Arc::new(data),
            requires_grad,
            op,
        }))
    }

    pub(crate) fn from_shared(
        data: Arc<Vec<E>>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Op<E>>,
    ) -> Self {
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Constant tensor (never receives gradients).
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.with_grad())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| E::from_f64_lossy(v)).collect(), shape)
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::from_parts(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    /// Same values as a fresh leaf that records gradients.
    pub fn with_grad(&self) -> Self {
        Self::from_shared(Arc::clone(&self.0.data), self.0.shape.clone(), true, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_shared(Arc::clone(&self.0.data), self.0.shape.clone(), false, None)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub(crate) fn op(&self) -> Option<&Op<E>> {
        self.0.op.as_ref()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.0.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(TensorError::Shape {
                op: "item",
                msg: format!("expected one element, got shape {:?}", self.shape()),
            });
        }
        Ok(self.0.data[0])
    }

    pub fn get(&self, index: &[usize]) -> E {
        let mut off = 0;
        for (&i, &d) in index.iter().zip(self.shape()) {
            debug_assert!(i < d);
            off = off * d + i;
        }
        self.0.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context))
        }
    }

    /// Converts element type; the result is a constant.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.data().iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect(),
            self.shape().to_vec(),
            false,
            None,
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.to_f64_lossy()).collect()
    }
}
