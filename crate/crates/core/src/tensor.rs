//! Dense 64-bit float tensors in row-major order.
//!
//! Plain values with no graph attachment; the tape in [`crate::graph`]
//! wraps them into differentiable nodes. Tensors are immutable once built
//! and safe to share across threads.

use crate::error::AutodiffError;

/// Dense row-major float tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::Contract(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(AutodiffError::Contract(format!(
                "data length {} does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Row-major matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(AutodiffError::Contract("ragged rows".into()));
        }
        Tensor::new(vec![n, m], rows.concat())
    }

    /// Marks the tensor as a differentiation root; the tape allocates a
    /// gradient for leaves created from it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a rank-2 tensor; rank-1 is read as a single row.
    pub fn dims2(&self) -> Result<(usize, usize), AutodiffError> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(AutodiffError::Contract(format!(
                "expected rank <= 2, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64, AutodiffError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(AutodiffError::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = (self.shape[0], self.shape[1]);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C += A * B over raw row-major buffers, with optional transposition of
/// either operand expressed through strides (no copies).
///
/// `m, k, n` are the logical dimensions of the product: A is m×k, B is k×n,
/// C is m×n. When `ta` is set, the buffer `a` holds the k×m row-major
/// transpose of A; likewise `tb` for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fresh-output convenience wrapper over [`gemm_acc`].
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, ta, b, tb, &mut c);
    c
}

/// C = beta*C + alpha*A*B with explicit row/column strides on all three
/// operands; the attention kernel uses this to address per-head column
/// blocks of packed [rows × d_model] buffers without copying.
///
/// Safety contract (checked by callers, not here): every index reachable
/// from the given dims and strides lies inside the respective slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[f64],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        );
    }
}
