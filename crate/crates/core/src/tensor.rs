//! Dense row-major f64 tensor.
//!
//! Compute happens in 64-bit throughout; the 32-bit truncation lives only
//! at the file-format boundary (see `io`).

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expect
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Entries drawn i.i.d. from N(0, scale^2).
    pub fn randn(dims: &[usize], scale: f64, rng: &mut Rng) -> Self {
        let len = dims.iter().product();
        let data = (0..len).map(|_| scale * rng.next_normal()).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what} contains a non-finite value at flat index {i}"
            ))),
        }
    }

    /// Flat offset of a multi-index. Debug builds bounds-check each axis.
    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (axis, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.dims[axis], "index {i} out of axis {axis}");
            off = off * self.dims[axis] + i;
        }
        off
    }

    #[inline]
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: &[usize]) -> &mut f64 {
        let off = self.offset(idx);
        &mut self.data[off]
    }
}

/// In-place numerically stable softmax of each contiguous row of `row_len`.
///
/// Shared by the dense and streaming attention paths so that both produce
/// bit-identical probabilities for identical logits.
pub fn softmax_rows(buf: &mut [f64], row_len: usize) {
    debug_assert!(row_len > 0 && buf.len().is_multiple_of(row_len));
    for row in buf.chunks_mut(row_len) {
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Plain dot product with a fixed left-to-right accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut buf = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows(&mut buf, 3);
        for row in buf.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut buf = vec![1000.0, 1000.0];
        softmax_rows(&mut buf, 2);
        assert!((buf[0] - 0.5).abs() < 1e-12);
        assert!(buf.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ensure_finite_reports_position() {
        let t = Tensor::from_vec(&[3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let err = t.ensure_finite("probe").unwrap_err();
        assert!(err.to_string().contains("index 1"));
    }
}
