//! Dense row-major tensor of 64-bit floats.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                node: "tensor".into(),
                expected: format!("{shape:?} ({expected} elements, all dims > 0)"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of leading-dimension entries (batch size for (B, ...) tensors).
    pub fn outer(&self) -> usize {
        self.shape[0]
    }

    /// Element count of one leading-dimension entry.
    pub fn inner_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Borrow row `i` of the leading dimension as a flat slice.
    pub fn outer_slice(&self, i: usize) -> &[f64] {
        let n = self.inner_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copy row `i` of the leading dimension into its own tensor of shape
    /// `(1, rest...)`.
    pub fn single(&self, i: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.outer_slice(i).to_vec(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape {
                node: "reshape".into(),
                expected: format!("{} elements", self.data.len()),
                got: format!("{shape:?} ({expected} elements)"),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C = A (m x k) * B (k x n) + beta * C, all row-major.
pub(crate) fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A (m x k) * B^T where B is (n x k) row-major.
pub(crate) fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A^T * B where A is (k x m) row-major and B is (k x n) row-major.
pub(crate) fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn outer_slicing() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.outer_slice(1), &[4., 5., 6.]);
        let s = t.single(0);
        assert_eq!(s.shape(), &[1, 3]);
        assert_eq!(s.data(), &[1., 2., 3.]);
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let b = [7., 8., 9., 10., 11., 12.]; // 3x2
        let mut c = vec![0.0; 4];
        mm_nn(2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, vec![58., 64., 139., 154.]);

        // A (2x3) * B^T with B (2x3): same as A * B' where B' = B^T (3x2).
        let bt = [7., 9., 11., 8., 10., 12.]; // 2x3 row-major == b transposed
        let mut c2 = vec![0.0; 4];
        mm_nt(2, 3, 2, &a, &bt, 0.0, &mut c2);
        assert_eq!(c2, c);

        // A^T (3x2 from 2x3) * B (2x2).
        let b2 = [1., 2., 3., 4.]; // 2x2
        let mut c3 = vec![0.0; 6];
        mm_tn(3, 2, 2, &a, &b2, 0.0, &mut c3);
        // naive
        let mut want = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for l in 0..2 {
                    want[i * 2 + j] += a[l * 3 + i] * b2[l * 2 + j];
                }
            }
        }
        assert_eq!(c3, want);
    }
}
