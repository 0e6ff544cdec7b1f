use super::{Real, TensorError};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` rows; handy in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::InvalidArgument { op: "from_rows", detail: "ragged rows".into() });
            }
            data.extend(r.iter().map(|&v| T::lit(v)));
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalar(self.shape.clone()))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::InvalidArgument { op, detail: format!("expected a matrix, got shape {:?}", self.shape) }),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Elementwise `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op: "add_assign", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Matrix product of two rank-2 tensors without a tape.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, self, other, &mut out, T::zero());
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor<T>, TensorError> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Max absolute elementwise difference; `inf` when shapes differ.
    /// Rows `index` of a tensor viewed as `[rows, ...]`.
    pub fn select_rows(&self, index: &[usize]) -> Result<Tensor<T>, TensorError> {
        let rows = *self.shape.first().ok_or(TensorError::InvalidArgument { op: "select_rows", detail: "rank-0 tensor".into() })?;
        let width = self.data.len().checked_div(rows).unwrap_or(0);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(TensorError::InvalidArgument { op: "select_rows", detail: format!("row {i} out of {rows}") });
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }
}

/// `out ← op(A)·op(B) + beta·out` for rank-2 `a`, `b`.
///
/// Shapes must already be validated: with `ta`, `a` is stored `[k, m]`,
/// otherwise `[m, k]`; likewise `b` is `[n, k]` with `tb`, else `[k, n]`.
pub(crate) fn gemm<T: Real>(ta: bool, tb: bool, a: &Tensor<T>, b: &Tensor<T>, out: &mut [T], beta: T) {
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: strides describe the row-major buffers of `a`, `b` (sizes checked
    // by callers) and `out` is a distinct m×n buffer.
    unsafe {
        T::gemm(m, k, n, T::one(), a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, out.as_mut_ptr(), n as isize, 1);
    }
}
