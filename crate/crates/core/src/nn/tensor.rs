//! Dense row-major `f64` tensors and the GEMM entry point used by every layer.

use std::fmt;

/// A contiguous row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Wraps `data` with `shape`. Panics if the element counts disagree.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Same data, new shape. Panics if the element counts disagree.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A strided matrix view used to describe GEMM operands.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` matrix starting at `offset` with row stride `ld`.
    pub fn rm(data: &'a [f64], offset: usize, ld: usize) -> Self {
        MatRef {
            data,
            offset,
            rs: ld,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with row stride `ld`.
    pub fn tr(data: &'a [f64], offset: usize, ld: usize) -> Self {
        MatRef {
            data,
            offset,
            rs: 1,
            cs: ld,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

/// `C = alpha * A(m×k) · B(k×n) + beta * C`, with `C` row-major with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_offset + (m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_offset + i * ldc..c_offset + i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every operand extent was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, MatRef::rm(&a, 0, 3), MatRef::rm(&b, 0, 4), 0.0, &mut c, 0, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // (Aᵀ)ᵀ via a transposed view of a 3x2 storage.
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (k, i))).map(|(k, i)| a[i * 3 + k]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, MatRef::tr(&at, 0, 2), MatRef::rm(&b, 0, 4), 0.0, &mut c2, 0, 4);
        assert_eq!(c, c2);
    }
}
