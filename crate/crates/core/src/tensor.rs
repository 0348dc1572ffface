//! Dense row-major `f32` tensor used for features, activations, and weights.

use crate::error::{Error, Result};
use crate::lstg::Container;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the innermost dimension (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    /// Product of all but the innermost dimension.
    pub fn rows(&self) -> usize {
        match self.dims.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows (along the leading axis) in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let w: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Tensor { dims, data }
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_columns(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map(|t| t.rows()).unwrap_or(0);
        if parts.iter().any(|t| t.rank() != 2 || t.rows() != rows) {
            return Err(Error::ShapeMismatch(format!(
                "cannot concatenate {:?}",
                parts.iter().map(|t| t.dims().to_vec()).collect::<Vec<_>>()
            )));
        }
        let width: usize = parts.iter().map(|t| t.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(r));
            }
        }
        Ok(Tensor {
            dims: vec![rows, width],
            data,
        })
    }

    pub fn from_container(c: &Container, name: &str) -> Result<Self> {
        let (dims, data) = c.f32(name)?;
        Self::new(dims.to_vec(), data.to_vec())
    }

    pub fn insert_into(&self, c: &mut Container, name: &str) -> Result<()> {
        c.insert_f32(name, &self.dims, self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.gather_rows(&[1, 0]).data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
        let u = Tensor::filled(vec![2, 1], 9.0);
        let c = Tensor::concat_columns(&[&t, &u]).unwrap();
        assert_eq!(c.dims(), &[2, 4]);
        assert_eq!(c.row(1), &[3.0, 4.0, 5.0, 9.0]);
        assert!(Tensor::concat_columns(&[&t, &Tensor::zeros(vec![3, 1])]).is_err());
    }
}
