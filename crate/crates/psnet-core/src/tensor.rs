//! Dense row-major tensors over a switchable scalar precision.
//!
//! All numeric state in the crate lives in [`Tensor`]. The element type is
//! generic over [`Real`]: `f64` for oracle/gradient-check builds, `f32` for
//! training. Tensors are immutable values once constructed; every operation
//! allocates its output.

use std::fmt;

/// Scalar element type: `f32` in training mode, `f64` in oracle mode.
pub trait Real:
    Copy
    + Clone
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Bit width of the mantissa-carrying type, for reporting.
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Total order on raw values, used for canonical reduction orders.
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BITS: u32 = 32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        f32::total_cmp(self, other)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BITS: u32 = 64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        f64::total_cmp(self, other)
    }
}

/// Errors raised by tensor and graph operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("attention: query row {row} has no unmasked keys")]
    FullyMaskedRow { row: usize },
    #[error("cross entropy: every target position is padding")]
    AllPadTargets,
    #[error("cross entropy: target id {id} at position {pos} exceeds vocabulary size {vocab}")]
    TargetOutOfRange { id: usize, pos: usize, vocab: usize },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense N-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Row-major 2-D constructor from nested rows; rows must agree in length.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadShape {
                    op: "from_rows",
                    expected: "equal-length rows",
                    got: vec![rows.len(), row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::ZERO; numel],
        }
    }

    pub fn filled(shape: &[usize], value: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, R::ONE)
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> R {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> R {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[R] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element precision, rounding through `f64`.
    pub fn cast<Q: Real>(&self) -> Tensor<Q> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| Q::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute element, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }
}

/// `out += a * b` where `a` is m-by-k and `b` is k-by-n, all row-major.
///
/// The k-loop runs over `b` rows so the inner update walks contiguous
/// slices and vectorizes.
pub(crate) fn matmul_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn matmul_raw<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a^T * b` where `a` is m-by-k and `b` is m-by-n, yielding k-by-n.
pub(crate) fn matmul_at_b_acc<R: Real>(
    a: &[R],
    b: &[R],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [R],
) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_ij;
            }
        }
    }
}

/// `out += a * b^T` where `a` is m-by-k and `b` is n-by-k, yielding m-by-n.
pub(crate) fn matmul_a_bt_acc<R: Real>(
    a: &[R],
    b: &[R],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [R],
) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn shape_product_equals_len() {
        let t = Tensor::<f32>::zeros(&[3, 4, 2]);
        assert_eq!(t.numel(), 24);
        assert_eq!(t.shape(), &[3, 4, 2]);
    }

    #[test]
    fn matmul_raw_hand_case() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul_raw(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = [1.0f64, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0f64, 1.0, 0.0, -1.0, 1.0, 3.0]; // 3x2
        let c = matmul_raw(&a, &b, 2, 3, 2);
        // a^T is 3x2: check (a^T)^T b == a b via matmul_at_b on explicit transpose
        let mut at = [0.0f64; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c1 = vec![0.0f64; 4];
        matmul_at_b_acc(&at, &b, 3, 2, 2, &mut c1);
        assert_eq!(c1, c);
        let mut bt = [0.0f64; 6];
        for i in 0..3 {
            for j in 0..2 {
                bt[j * 3 + i] = b[i * 2 + j];
            }
        }
        let mut c2 = vec![0.0f64; 4];
        matmul_a_bt_acc(&a, &bt, 2, 3, 2, &mut c2);
        assert_eq!(c2, c);
    }
}
