use crate::{Error, Result};

/// A dense row-major tensor of 64-bit floats.
///
/// Rank 0 (empty shape) is a scalar. All shape dimensions must be strictly
/// positive and the data length must equal the product of the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                detail: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds an `n x d` matrix from `n * d` row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [n, _] => *n,
            [n] => *n,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, d] => *d,
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self @ rhs` for 2-D tensors, backed by a blocked GEMM kernel.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::matmul",
                    detail: format!("lhs must be 2-D, got {:?}", self.shape),
                })
            }
        };
        let (k2, n) = match rhs.shape.as_slice() {
            [k2, n] => (*k2, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::matmul",
                    detail: format!("rhs must be 2-D, got {:?}", rhs.shape),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::matmul",
                detail: format!("inner dims differ: {:?} vs {:?}", self.shape, rhs.shape),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(false, false, m, k, n, 1.0, &self.data, &rhs.data, 0.0, &mut out.data);
        Ok(out)
    }

    /// Adds a length-`d` row vector to every row of an `n x d` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = match self.shape.as_slice() {
            [n, d] => (*n, *d),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::add_row",
                    detail: format!("expected 2-D lhs, got {:?}", self.shape),
                })
            }
        };
        if bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                context: "Tensor::add_row",
                detail: format!("bias shape {:?} does not match width {d}", bias.shape()),
            });
        }
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..d {
                out.data[i * d + j] += bias.data[j];
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Tensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self) -> Tensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = softplus(*v);
        }
        out
    }

    /// Repeats each row `m` times: `[n, d] -> [n * m, d]`.
    pub fn repeat_rows(&self, m: usize) -> Result<Tensor> {
        let (n, d) = match self.shape.as_slice() {
            [n, d] => (*n, *d),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::repeat_rows",
                    detail: format!("expected 2-D input, got {:?}", self.shape),
                })
            }
        };
        let mut data = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for _ in 0..m {
                data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
            }
        }
        Tensor::new(vec![n * m, d], data)
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, d1) = (self.rows(), self.cols());
        let (n2, d2) = (rhs.rows(), rhs.cols());
        if n != n2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::concat_cols",
                detail: format!("row counts differ: {n} vs {n2}"),
            });
        }
        let mut data = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            data.extend_from_slice(&self.data[i * d1..(i + 1) * d1]);
            data.extend_from_slice(&rhs.data[i * d2..(i + 1) * d2]);
        }
        Tensor::new(vec![n, d1 + d2], data)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`, `c` is `m x n`.
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    // Strides express the transpose without copying.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
