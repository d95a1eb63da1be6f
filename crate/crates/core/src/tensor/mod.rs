//! Dense row-major `f64` tensors and the reverse-mode machinery built on them.
//!
//! Everything the models compute — convolutions, gates, memory reads and
//! writes, losses — runs through [`Tensor`] values and the recording
//! [`tape::Tape`]. All arithmetic is 64-bit with fixed summation order, so
//! identical seeds and inputs reproduce bit-identical results.

pub mod adagrad;
pub mod gradcheck;
pub mod tape;

#[cfg(test)]
mod tape_tests;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// `grad` is an optional same-length buffer populated for trainable
/// parameters after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid("Tensor::new", format!("zero extent in {:?}", shape)));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for shape {:?}", numel, shape),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, grad: None }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Seeded uniform values in `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape, data, grad: None }
    }

    /// Glorot-style uniform init for a weight with the given fan-in/out.
    pub fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(shape, bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Element of a 2-d tensor at `(row, col)`.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer (same length as the values).
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "Tensor::set_grad",
                format!("{}", self.data.len()),
                format!("{}", grad.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Inverted dropout on a plain tensor.
///
/// In training mode each element is zeroed with probability `p` and the
/// survivors are scaled by `1/(1-p)`; in evaluation mode the input passes
/// through unchanged.
pub fn dropout_apply(x: &Tensor, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    let mask = dropout_mask(x.numel(), p, training, rng)?;
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Builds the keep/scale mask used by dropout: entries are either `0` or
/// `1/(1-p)`. Evaluation mode returns an all-ones mask.
pub(crate) fn dropout_mask(len: usize, p: f64, training: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("p={} outside [0, 1)", p)));
    }
    if !training || p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep_scale = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
        .collect())
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    format!("{:?}", shape)
}
