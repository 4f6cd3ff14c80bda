//! Minimal deterministic reverse-mode autodiff over dense 2D tensors.
//!
//! The operator set is exactly what the detection pipeline needs: dilated
//! 1D convolution, stride-1 max pooling, linear layers, ReLU, feature
//! concatenation, elementwise averaging, segment-of-interest max pooling,
//! and the classification/regression losses. Everything is generic over the
//! scalar type so gradient checks can run in f64 while training runs in f32.

mod adam;
mod graph;
mod params;
#[cfg(test)]
mod tests;

pub use adam::AdamState;
pub use graph::{sigmoid, softmax, Graph, ValueRef};
pub use params::{ParamStore, TensorError};

use num_traits::{Float, NumCast};

/// Scalar type the engine runs on.
pub trait Real:
    Float + NumCast + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        NumCast::from(v).unwrap()
    }
    fn into_f64(self) -> f64 {
        NumCast::from(self).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major 2D tensor. A feature map stores one temporal cell per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub data: Vec<F>,
    pub rows: usize,
    pub cols: usize,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { data: vec![F::zero(); rows * cols], rows, cols }
    }

    pub fn from_vec(data: Vec<F>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { data, rows, cols }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { data: vec![v], rows: 1, cols: 1 }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { data, rows: r, cols: c }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor<F>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A T×D feature map for one stream of one video plus its temporal rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<F> {
    pub data: Tensor<F>,
    pub cells_per_second: f64,
}

impl<F: Real> FeatureGrid<F> {
    pub fn new(data: Tensor<F>, cells_per_second: f64) -> Self {
        assert!(data.rows >= 1 && data.cols >= 1, "feature grid must be at least 1x1");
        assert!(cells_per_second > 0.0, "cells_per_second must be positive");
        FeatureGrid { data, cells_per_second }
    }

    /// Temporal length in cells.
    pub fn len(&self) -> usize {
        self.data.rows
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows == 0
    }

    /// Feature dimensionality per cell.
    pub fn dim(&self) -> usize {
        self.data.cols
    }
}
