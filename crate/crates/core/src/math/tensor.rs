//! Dense row-major tensors of `f64`.
//!
//! Every op in this crate works on rank-1 or rank-2 tensors. A rank-1 tensor of
//! length `n` behaves as a `[1, n]` row wherever a matrix is expected.

use std::fmt;

use super::MathError;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, MathError> {
        if shape.contains(&0) {
            return Err(MathError::InvalidShape {
                shape,
                reason: "dimensions must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MathError::InvalidShape {
                shape,
                reason: "data length does not match the product of dimensions",
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a `[rows, cols]` matrix. Panics on a length mismatch; use [`Tensor::new`]
    /// for fallible construction.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_rows(1, n, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_rows(1, 1, vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Number of rows when viewed as a matrix.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, MathError> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(MathError::InvalidShape {
                shape,
                reason: "reshape must preserve the element count",
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `c = a·b` (or with either operand transposed), `alpha` scaled and added onto `c`
/// scaled by `beta`. Shapes are in logical (post-transpose) terms: `a` is `m×k`,
/// `b` is `k×n`, `c` is `m×n`; storage is row-major for the untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the
    // three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
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
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);

        // aᵀ·a with a stored 2x3 → 3x3
        let mut c = [0.0; 9];
        gemm(3, 2, 3, &a, true, &a, false, 0.0, &mut c);
        assert_eq!(c[0], 1.0 + 16.0);
        assert_eq!(c[1], 2.0 + 20.0);
        assert_eq!(c[8], 9.0 + 36.0);

        // a·aᵀ → 2x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &a, true, 0.0, &mut c);
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
    }
}
