//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value once built; gradient bookkeeping lives
//! in [`crate::tape::Tape`], which wraps tensors as leaves that may or may not
//! require gradients.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Initialization recipe for [`Tensor::new`].
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Normal { seed: u64, mean: f64, std: f64 },
    FromValues(Vec<f64>),
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("tensor needs at least one dimension");
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return shape_err(format!("dimension {pos} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        let numel = check_dims(shape)?;
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Normal { seed, mean, std } => {
                let mut rng = Rng::new(seed);
                (0..numel).map(|_| mean + std * rng.normal()).collect()
            }
            Init::FromValues(values) => {
                if values.len() != numel {
                    return shape_err(format!(
                        "{} values for shape {shape:?} ({numel} elements)",
                        values.len()
                    ));
                }
                values
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Init::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Init::FromValues(data))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = check_dims(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    /// Normal draws taken from an existing stream.
    pub fn randn(shape: &[usize], rng: &mut Rng, mean: f64, std: f64) -> Result<Self> {
        let numel = check_dims(shape)?;
        let data = (0..numel).map(|_| mean + std * rng.normal()).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn uniform(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Result<Self> {
        let numel = check_dims(shape)?;
        let data = (0..numel).map(|_| rng.uniform_range(lo, hi)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return shape_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel = check_dims(shape)?;
        if numel != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stack 2-D `[T, D]` tensors of equal row length along the row axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let rows = first.rows();
        if parts.iter().any(|p| p.rank() != 2 || p.rows() != rows) {
            return shape_err("concat_cols needs 2-D tensors with equal row counts");
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor::from_parts(vec![rows, width], data))
    }
}
