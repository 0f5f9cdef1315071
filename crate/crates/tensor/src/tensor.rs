//! Dense row-major tensors over f64 with shape-checked kernels.

use std::sync::Arc;

use thiserror::Error;

/// Errors raised by tensor construction and shape-checked operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f64, index: usize },
    #[error("{op}: shapes {left:?} and {right:?} do not match")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("matmul inner dimensions disagree: [{m}, {k}] x [{k2}, {n}]")]
    MatmulInner {
        m: usize,
        k: usize,
        k2: usize,
        n: usize,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("reshape from {from:?} to {to:?} changes the element count")]
    ReshapeCount { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("every position is masked out; need at least one survivor")]
    AllMasked,
    #[error("{op}: mask length {mask} does not match dimension {dim}")]
    MaskLength {
        op: &'static str,
        mask: usize,
        dim: usize,
    },
    #[error("{op}: row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: expected a scalar (shape [1]), got {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("binary label must be 0 or 1, got {0}")]
    BadLabel(f64),
    #[error("tape mismatch: variables belong to different tapes")]
    TapeMismatch,
}

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite
    /// values. This is the checked boundary for data entering the engine.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { value, index });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Internal constructor for values produced by the engine's own kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; len])
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Scalar accessor for shape-[1] tensors.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.shape != [1] {
            return Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ReshapeCount {
                from: self.shape.clone(),
                to: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "elementwise_mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Matrix product of two rank-2 tensors, [m, k] x [k, n] -> [m, n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        if other.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::MatmulInner { m, k, k2, n });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        // Row-times-row accumulation keeps both streams contiguous.
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
        let err = Tensor::new(&[1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 0, .. }));
    }

    #[test]
    fn matmul_small_known() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        assert!(matches!(err, TensorError::MatmulInner { k: 3, k2: 4, .. }));
    }

    #[test]
    fn matmul_against_index_loops() {
        // Independent triple-loop oracle on a fixed pseudo-random case.
        let m = 5;
        let k = 7;
        let n = 4;
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 + 11) % 19) as f64 - 9.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 + 5) % 23) as f64 - 11.0).collect();
        let ta = Tensor::new(&[m, k], a.clone()).unwrap();
        let tb = Tensor::new(&[k, n], b.clone()).unwrap();
        let tc = ta.matmul(&tb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                assert_eq!(tc.at2(i, j), s);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.at2(2, 1), 6.0);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn reshape_shares_data_and_checks_count() {
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.reshape(&[6]).unwrap().shape(), &[6]);
        assert!(matches!(
            t.reshape(&[4]).unwrap_err(),
            TensorError::ReshapeCount { .. }
        ));
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(
            a.add(&b).unwrap_err(),
            TensorError::ShapeMismatch { op: "add", .. }
        ));
    }
}

/// C = A * B^T for rank-2 tensors, [m, k] x [n, k] -> [m, n]. Internal
/// backward-pass kernel; shapes are the caller's responsibility.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(b.shape()[1], k);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// C = A^T * B for rank-2 tensors, [m, k] x [m, n] -> [k, n]. Internal
/// backward-pass kernel; shapes are the caller's responsibility.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], m);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let brow = &bd[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::from_parts(vec![k, n], out)
}
