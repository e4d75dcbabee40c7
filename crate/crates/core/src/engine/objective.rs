use ndarray::{Array2, Axis};

use super::{EngineError, Network};
use crate::data::Dataset;

/// Rows per chunk when sweeping the whole training set.
const FULL_PASS_CHUNK: usize = 1024;

/// A finite-sum objective over `n_examples()` training examples.
pub trait Objective {
    fn n_weights(&self) -> usize;

    fn n_examples(&self) -> usize;

    /// Mean loss over the examples in `batch`, writing its gradient into
    /// `grad`.
    fn loss_grad(&self, w: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64, EngineError>;

    /// Held-out accuracy in `[0, 1]`.
    fn val_accuracy(&self, w: &[f64]) -> Result<f64, EngineError>;
}

/// Dataset-mean gradient `(1/N) sum_i grad F(x_i, y_i)`, without weight decay.
pub fn full_gradient<O: Objective + ?Sized>(obj: &O, w: &[f64]) -> Result<Vec<f64>, EngineError> {
    let n = obj.n_examples();
    if n == 0 {
        return Err(EngineError::EmptyBatch);
    }
    let mut total = vec![0.0; obj.n_weights()];
    let mut chunk_grad = vec![0.0; obj.n_weights()];
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(FULL_PASS_CHUNK) {
        obj.loss_grad(w, chunk, &mut chunk_grad)?;
        let weight = chunk.len() as f64 / n as f64;
        for (t, g) in total.iter_mut().zip(&chunk_grad) {
            *t += weight * g;
        }
    }
    Ok(total)
}

pub fn full_gradient_norm<O: Objective + ?Sized>(obj: &O, w: &[f64]) -> Result<f64, EngineError> {
    Ok(full_gradient(obj, w)?.iter().map(|g| g * g).sum::<f64>().sqrt())
}

/// Cross-entropy classification of a [`Dataset`] by a [`Network`].
pub struct Supervised<'a> {
    pub network: &'a Network,
    pub data: &'a Dataset,
}

impl<'a> Supervised<'a> {
    pub fn new(network: &'a Network, data: &'a Dataset) -> Result<Self, EngineError> {
        if data.dim() != network.input_dim() {
            return Err(EngineError::DimensionMismatch {
                expected: network.input_dim(),
                got: data.dim(),
            });
        }
        if data.classes() != network.classes() {
            return Err(EngineError::DimensionMismatch {
                expected: network.classes(),
                got: data.classes(),
            });
        }
        Ok(Self { network, data })
    }
}

impl Objective for Supervised<'_> {
    fn n_weights(&self) -> usize {
        self.network.n_weights()
    }

    fn n_examples(&self) -> usize {
        self.data.train.len()
    }

    fn loss_grad(&self, w: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64, EngineError> {
        let train = &self.data.train;
        let x: Array2<f64> = train.features.select(Axis(0), batch);
        let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        self.network.loss_and_grad(w, &x.view(), &y, Some(grad))
    }

    fn val_accuracy(&self, w: &[f64]) -> Result<f64, EngineError> {
        let val = &self.data.val;
        if val.is_empty() {
            return Err(EngineError::EmptyBatch);
        }
        let predicted = self.network.predict(w, &val.features.view())?;
        let correct = predicted.iter().zip(&val.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / val.len() as f64)
    }
}
