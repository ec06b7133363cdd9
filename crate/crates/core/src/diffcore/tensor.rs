use std::fmt;

use crate::scalar::Real;

/// Error type shared by tensor construction, tape evaluation and the
/// optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffError {
    /// Operand shapes are incompatible with the requested op.
    ShapeMismatch { op: &'static str, detail: String },
    /// A primitive produced NaN or infinity; `context` names the op or the
    /// parameter whose gradient went bad.
    NonFinite { context: String },
    /// A matrix inverse or log-determinant hit a (numerically) singular input.
    Singular { op: &'static str, detail: String },
    /// Parameter name registered twice.
    DuplicateParam { name: String },
    /// Index or node id outside the recorded range.
    BadIndex { op: &'static str, detail: String },
}

impl fmt::Display for DiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            DiffError::NonFinite { context } => {
                write!(f, "non-finite value produced by {context}")
            }
            DiffError::Singular { op, detail } => {
                write!(f, "singular matrix in {op}: {detail}")
            }
            DiffError::DuplicateParam { name } => {
                write!(f, "parameter registered twice: {name}")
            }
            DiffError::BadIndex { op, detail } => write!(f, "bad index in {op}: {detail}"),
        }
    }
}

impl std::error::Error for DiffError {}

/// Dense row-major matrix of scalars. Everything the tape touches is 2-D;
/// scalars are 1x1 and per-point columns are Nx1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, DiffError> {
        if rows == 0 || cols == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "from_vec",
                detail: format!("dimensions must be positive, got {rows}x{cols}"),
            });
        }
        if data.len() != rows * cols {
            return Err(DiffError::ShapeMismatch {
                op: "from_vec",
                detail: format!("buffer length {} does not match {rows}x{cols}", data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows: rows.max(1),
            cols: cols.max(1),
            data: vec![F::zero(); rows.max(1) * cols.max(1)],
        }
    }

    pub fn full(rows: usize, cols: usize, value: F) -> Self {
        let mut t = Self::zeros(rows, cols);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self @ other`, plain row-major triple loop ordered for cache locality.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>, DiffError> {
        if self.cols != other.rows {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "{}x{} @ {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor<F> {
        let mut out = vec![F::zero(); self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Inverse and determinant of a square matrix by Gauss-Jordan elimination
    /// with partial pivoting. Errors when a pivot vanishes exactly.
    pub fn invert_square(&self) -> Result<(Tensor<F>, F), DiffError> {
        if self.rows != self.cols {
            return Err(DiffError::ShapeMismatch {
                op: "invert_square",
                detail: format!("{}x{} is not square", self.rows, self.cols),
            });
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut inv = Tensor::<F>::identity(n).data;
        let mut det = F::one();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[col * n + col].abs();
            for r in (col + 1)..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == F::zero() || !best.is_finite() {
                return Err(DiffError::Singular {
                    op: "invert_square",
                    detail: format!("zero pivot in column {col}"),
                });
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                    inv.swap(col * n + j, pivot * n + j);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            let inv_p = F::one() / p;
            for j in 0..n {
                a[col * n + j] *= inv_p;
                inv[col * n + j] *= inv_p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[r * n + col];
                if factor == F::zero() {
                    continue;
                }
                for j in 0..n {
                    let s = a[col * n + j];
                    let t = inv[col * n + j];
                    a[r * n + j] -= factor * s;
                    inv[r * n + j] -= factor * t;
                }
            }
        }
        Ok((
            Tensor {
                rows: n,
                cols: n,
                data: inv,
            },
            det,
        ))
    }
}
