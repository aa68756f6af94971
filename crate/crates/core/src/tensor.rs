//! Dense row-major tensors and the small linear-algebra kernels used by the
//! closed-form solvers.
//!
//! Everything is `f64` in memory. Matrices are rank-2 tensors; there are no
//! views or strides, matrices here are at most a few hundred rows.

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NdTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(shape_err(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let (r, c) = self.dims2();
        (0..r).map(|i| self.data[i * c..(i + 1) * c].to_vec()).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor. Panics otherwise.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign_scaled(&mut self, other: &Self, s: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(shape_err(format!(
                "matmul needs matrices, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, n) = self.dims2();
        let (n2, k) = other.dims2();
        if n != n2 {
            return Err(shape_err(format!("matmul {m}x{n} by {n2}x{k}")));
        }
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let row = &mut out[i * k..(i + 1) * k];
            for p in 0..n {
                let a = self.data[i * n + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * k..(p + 1) * k];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { shape: vec![m, k], data: out })
    }

    /// Appends a column of ones: the homogeneous lift of a point matrix.
    pub fn homogeneous(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(r * (c + 1));
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
            out.push(1.0);
        }
        Self { shape: vec![r, c + 1], data: out }
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let (_, c) = self.dims2();
        Self { shape: vec![end - start, c], data: self.data[start * c..end * c].to_vec() }
    }

    /// Stacks `extra` zero rows below a matrix.
    pub fn pad_rows(&self, extra: usize) -> Self {
        let (r, c) = self.dims2();
        let mut data = self.data.clone();
        data.resize((r + extra) * c, 0.0);
        Self { shape: vec![r + extra, c], data }
    }
}

/// Partial-pivot LU factorization of a square matrix, reusable across
/// right-hand sides (the adjoint of a solve needs `Mᵀ` too, see
/// [`LuFactors::solve_transposed`]).
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

/// Pivot threshold relative to the largest entry of the pivot's column in the
/// input. Per-column scaling keeps saddle-point systems such as the TPS block
/// matrix at large λ, whose late pivots shrink like 1/λ, from being rejected.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

impl LuFactors {
    pub fn factor(m: &NdTensor) -> Result<Self> {
        if m.ndim() != 2 || m.shape[0] != m.shape[1] {
            return Err(shape_err(format!("expected square matrix, got {:?}", m.shape)));
        }
        let n = m.shape[0];
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        if !m.all_finite() {
            return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
        }
        let col_max: Vec<f64> = (0..n).map(|k| (0..n).fold(0.0f64, |a, i| a.max(m.data[i * n + k].abs()))).collect();
        for k in 0..n {
            let threshold = PIVOT_TOLERANCE * col_max[k];
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax < threshold || pmax == 0.0 {
                return Err(Error::SingularMatrix { pivot: pmax, threshold });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    /// Solves `M X = B`.
    pub fn solve(&self, b: &NdTensor) -> Result<NdTensor> {
        let n = self.n;
        let k = self.check_rhs(b)?;
        let mut x = vec![0.0; n * k];
        for i in 0..n {
            x[i * k..(i + 1) * k].copy_from_slice(&b.data[self.perm[i] * k..(self.perm[i] + 1) * k]);
        }
        // forward substitution with unit-lower L
        for i in 0..n {
            for p in 0..i {
                let l = self.lu[i * n + p];
                if l != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= l * x[p * k + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for p in i + 1..n {
                let u = self.lu[i * n + p];
                if u != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= u * x[p * k + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..k {
                x[i * k + c] /= d;
            }
        }
        NdTensor::new(vec![n, k], x)
    }

    /// Solves `Mᵀ X = B` with the same factors (`PM = LU` so `Mᵀ = Uᵀ Lᵀ P`).
    pub fn solve_transposed(&self, b: &NdTensor) -> Result<NdTensor> {
        let n = self.n;
        let k = self.check_rhs(b)?;
        let mut y = b.data.clone();
        // Uᵀ y = b
        for i in 0..n {
            for p in 0..i {
                let u = self.lu[p * n + i];
                if u != 0.0 {
                    for c in 0..k {
                        y[i * k + c] -= u * y[p * k + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..k {
                y[i * k + c] /= d;
            }
        }
        // Lᵀ z = y
        for i in (0..n).rev() {
            for p in i + 1..n {
                let l = self.lu[p * n + i];
                if l != 0.0 {
                    for c in 0..k {
                        y[i * k + c] -= l * y[p * k + c];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * k];
        for i in 0..n {
            x[self.perm[i] * k..(self.perm[i] + 1) * k].copy_from_slice(&y[i * k..(i + 1) * k]);
        }
        NdTensor::new(vec![n, k], x)
    }

    fn check_rhs(&self, b: &NdTensor) -> Result<usize> {
        if b.ndim() != 2 || b.shape[0] != self.n {
            return Err(shape_err(format!(
                "right-hand side {:?} for a {}x{} system",
                b.shape, self.n, self.n
            )));
        }
        Ok(b.shape[1])
    }
}

/// Solves `M X = B` by partial-pivot LU.
pub fn solve_linear(m: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
    LuFactors::factor(m)?.solve(b)
}

pub fn matmul(a: &NdTensor, b: &NdTensor) -> Result<NdTensor> {
    a.matmul(b)
}
