//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are value-semantic handles: cloning shares the immutable data
//! buffer, and a tensor can cross threads freely. Differentiation happens
//! through an explicit [`Graph`], built define-by-run: every op records a node,
//! `backward` on a scalar loss walks the tape in reverse and deposits gradients
//! into the grad cells of the leaf tensors that were created with
//! `requires_grad` (parameters). A graph is confined to one thread for its
//! forward+backward lifetime and is consumed by `backward`.

mod graph;
mod kernels;
mod ops;

pub mod compose;
pub mod gradcheck;

pub use graph::Graph;

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Shared slot a backward pass writes a leaf gradient into.
#[derive(Debug, Default)]
pub(crate) struct GradCell(Mutex<Option<Vec<f64>>>);

impl GradCell {
    pub fn store(&self, g: Option<Vec<f64>>) {
        *self.0.lock().unwrap() = g;
    }
    pub fn take(&self) -> Option<Vec<f64>> {
        self.0.lock().unwrap().take()
    }
    pub fn peek(&self) -> Option<Vec<f64>> {
        self.0.lock().unwrap().clone()
    }
}

/// Identity of a node inside a specific graph instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub graph: u64,
    pub index: u32,
}

/// Dense n-dimensional value, row-major, optionally tracked for gradients.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Arc<GradCell>>,
    requires: bool,
    pub(crate) node: Option<NodeRef>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: None,
            requires: false,
            node: None,
        })
    }

    /// Leaf parameter: participates in backward and receives a gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::from_vec(data, shape)?;
        t.grad = Some(Arc::new(GradCell::default()));
        t.requires = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel_of(shape)], shape).expect("consistent")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(vec![value; numel_of(shape)], shape).expect("consistent")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[]).expect("consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub(crate) fn grad_cell(&self) -> Option<&Arc<GradCell>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires
    }

    /// Scalar extraction; errors on non-scalar tensors.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element by multi-index (row-major). Panics on rank mismatch.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, &ix) in index.iter().enumerate() {
            assert!(ix < self.shape[i], "index out of bounds");
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// Copy of the gradient, if a backward pass populated one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().and_then(|c| c.peek())
    }

    /// Move the gradient out, leaving the cell empty.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().and_then(|c| c.take())
    }

    /// Same values, no gradient tracking, no graph binding.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad: None,
            requires: false,
            node: None,
        }
    }

    /// Mutate the underlying values in place (copy-on-write if shared).
    /// Any graph binding is dropped since recorded activations become stale.
    pub fn apply_update(&mut self, f: impl FnOnce(&mut [f64])) {
        self.node = None;
        let data: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        f(data.as_mut_slice());
    }

    pub(crate) fn from_parts(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires: bool,
        node: Option<NodeRef>,
    ) -> Tensor {
        Tensor {
            shape,
            data,
            grad: None,
            requires,
            node,
        }
    }
}

#[cfg(test)]
mod type_tests {
    use super::*;

    #[test]
    fn shape_data_must_agree() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).is_ok());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.5).item().unwrap(), 4.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }

    #[test]
    fn clones_share_data() {
        let t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let u = t.clone();
        assert_eq!(t.data().as_ptr(), u.data().as_ptr());
    }

    #[test]
    fn update_is_copy_on_write() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let u = t.clone();
        t.apply_update(|d| d[0] = 9.0);
        assert_eq!(t.data(), &[9.0, 2.0]);
        assert_eq!(u.data(), &[1.0, 2.0]);
    }

    #[test]
    fn tensors_are_send_sync() {
        fn check<T: Send + Sync>() {}
        check::<Tensor>();
    }
}
