use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;

use super::tape::NodeId;

/// Shared handle to a row-major value buffer plus bookkeeping for the tape.
///
/// Cloning a `Tensor` clones the handle, not the data; ops record these
/// handles so backward rules can read the values they saw at forward time.
#[derive(Clone)]
pub struct Tensor<F: Real> {
    inner: Rc<Inner<F>>,
}

struct Inner<F: Real> {
    shape: Vec<usize>,
    values: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: bool,
    // (tape id, node id) of the most recent registration.
    binding: Cell<Option<(u64, NodeId)>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tensor<F> {
    fn new(values: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if numel_of(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel_of(&shape), values.len()),
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                binding: Cell::new(None),
            }),
        })
    }

    pub fn from_vec(values: Vec<F>, shape: &[usize]) -> Result<Self> {
        Self::new(values, shape.to_vec(), false)
    }

    /// Grad-requiring leaf; the optimizer and grad-check operate on these.
    pub fn param(values: Vec<F>, shape: &[usize]) -> Result<Self> {
        Self::new(values, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![F::zero(); numel_of(shape)], shape.to_vec(), false).expect("consistent")
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![v], Vec::new(), false).expect("consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn values(&self) -> Ref<'_, Vec<F>> {
        self.inner.values.borrow()
    }

    pub(crate) fn values_mut(&self) -> RefMut<'_, Vec<F>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.values.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        let v = self.inner.values.borrow();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", self.inner.shape);
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    /// Accumulated gradient, or zeros if no backward pass has touched this
    /// leaf since the last reset.
    pub fn grad_or_zeros(&self) -> Vec<F> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![F::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[F]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Overwrite values in place (optimizer updates). Shape is fixed at
    /// construction, so only the contents move.
    pub fn set_values(&self, new: &[F]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), new.len(), "set_values length mismatch");
        v.copy_from_slice(new);
    }

    /// Deep copy with no grad, no binding, no grad requirement. Snapshots for
    /// diagnostics probes use this so they can never disturb training state.
    pub fn detached_copy(&self) -> Tensor<F> {
        Tensor::new(self.to_vec(), self.inner.shape.clone(), false).expect("consistent")
    }

    /// Deep copy that is itself a grad-requiring leaf.
    pub fn param_copy(&self) -> Tensor<F> {
        Tensor::new(self.to_vec(), self.inner.shape.clone(), true).expect("consistent")
    }

    pub fn ptr_eq(&self, other: &Tensor<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn binding(&self) -> Option<(u64, NodeId)> {
        self.inner.binding.get()
    }

    pub(crate) fn set_binding(&self, tape_id: u64, node: NodeId) {
        self.inner.binding.set(Some((tape_id, node)));
    }
}

impl<F: Real> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_value_count() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).is_ok());
    }

    #[test]
    fn scalar_has_rank_zero_and_one_value() {
        let s = Tensor::scalar(4.0f64);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let t = Tensor::param(vec![1.0f64, 2.0], &[2]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, -0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
        assert_eq!(t.grad_or_zeros(), vec![0.0, 0.0]);
    }
}
