//! Dense linear algebra, reverse-mode differentiation, optimizers and
//! seeded randomness.

mod adam;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{plateau_decay, AdamState, Plateau, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, DEFAULT_LR};
pub use rng::{derive_seed, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, DEFAULT_CONDITION_CAP};

pub(crate) use tape::softmax_cols;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix is singular or ill-conditioned (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("loss must be a 1x1 tensor, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// An ordered collection of parameter tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector in [`ParamSet::tensors`] order.
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_len(), "shape mismatch: flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn shapes(&self) -> Vec<[usize; 2]> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }
}

impl ParamSet for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

/// Flattens a gradient list in the same order as [`ParamSet::flatten`].
pub fn flatten_tensors(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits a flat vector back into tensors of the given shapes.
pub fn unflatten(flat: &[f64], shapes: &[[usize; 2]]) -> Vec<Tensor> {
    let mut offset = 0;
    let out = shapes
        .iter()
        .map(|&[r, c]| {
            let t = Tensor::new(r, c, flat[offset..offset + r * c].to_vec());
            offset += r * c;
            t
        })
        .collect();
    assert_eq!(offset, flat.len(), "shape mismatch: flat length does not match shapes");
    out
}
