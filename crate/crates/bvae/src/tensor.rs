//! Dense row-major f64 tensors (rank 1 and 2 in practice) with the handful of
//! kernels the autodiff graph needs. Shape or domain violations panic with the
//! offending operation named; every public op checks its output for NaN/inf
//! so numerical failures surface at the op that produced them, not later.

use matrixmultiply::dgemm;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;

/// Dense row-major tensor. `data.len() == shape.iter().product()`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TensorRepr {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let r = TensorRepr::deserialize(d)?;
        let n: usize = r.shape.iter().product();
        if n != r.data.len() {
            return Err(D::Error::custom(format!(
                "tensor shape {:?} wants {} values, got {}",
                r.shape,
                n,
                r.data.len()
            )));
        }
        Ok(Tensor {
            shape: r.shape,
            data: r.data,
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, .. ; {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Rank-0 stand-in: a single-element rank-1 tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "from_vec: shape {:?} wants {} values, got {}",
            shape,
            n,
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item: tensor has shape {:?}, expected one element",
            self.shape
        );
        self.data[0]
    }

    /// Rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows: rank-{} tensor unsupported", r),
        }
    }

    /// Columns of a rank-2 tensor (or its length for rank-1).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols: rank-{} tensor unsupported", r),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let c = self.cols();
        self.data[row * c + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.data.len(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// Panics if any element is NaN or infinite. `op` names the producer.
    pub fn assert_finite(&self, op: &str) {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                panic!(
                    "non-finite value {} at flat index {} produced by `{}` (shape {:?})",
                    v, i, op, self.shape
                );
            }
        }
    }

    // ---- elementwise ----

    fn check_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape, other.shape,
            "{}: shape mismatch {:?} vs {:?}",
            op, self.shape, other.shape
        );
    }

    /// Elementwise combine. Broadcasting is limited to scalar-with-tensor and
    /// equal shapes; anything else panics.
    pub fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let out = if self.numel() == 1 && other.numel() != 1 {
            let a = self.data[0];
            Tensor {
                shape: other.shape.clone(),
                data: other.data.iter().map(|&b| f(a, b)).collect(),
            }
        } else if other.numel() == 1 && self.numel() != 1 {
            let b = other.data[0];
            Tensor {
                shape: self.shape.clone(),
                data: self.data.iter().map(|&a| f(a, b)).collect(),
            }
        } else {
            self.check_same_shape(other, op);
            Tensor {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            }
        };
        out.assert_finite(op);
        out
    }

    pub fn map(&self, op: &str, f: impl Fn(f64) -> f64) -> Tensor {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        };
        out.assert_finite(op);
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map("scale", |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map("add_scalar", |a| a + c)
    }

    /// In-place `self += other`, same shape required. Used by gradient
    /// accumulators; skips the finite sweep (callers re-check at op level).
    pub fn add_assign(&mut self, other: &Tensor) {
        self.check_same_shape(other, "add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    // ---- row broadcast: rank-2 `self` with rank-1 `row` of matching width ----

    fn check_row(&self, row: &Tensor, op: &str) {
        assert_eq!(self.shape.len(), 2, "{}: left operand must be rank 2", op);
        assert_eq!(row.shape.len(), 1, "{}: row operand must be rank 1", op);
        assert_eq!(
            self.shape[1], row.shape[0],
            "{}: width mismatch {:?} vs {:?}",
            op, self.shape, row.shape
        );
    }

    pub fn zip_row(&self, row: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.check_row(row, op);
        let n = self.shape[1];
        let mut data = Vec::with_capacity(self.data.len());
        for r in self.data.chunks_exact(n) {
            for (a, b) in r.iter().zip(&row.data) {
                data.push(f(*a, *b));
            }
        }
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.assert_finite(op);
        out
    }

    pub fn add_row(&self, row: &Tensor) -> Tensor {
        self.zip_row(row, "add_row", |a, b| a + b)
    }

    pub fn sub_row(&self, row: &Tensor) -> Tensor {
        self.zip_row(row, "sub_row", |a, b| a - b)
    }

    pub fn mul_row(&self, row: &Tensor) -> Tensor {
        self.zip_row(row, "mul_row", |a, b| a * b)
    }

    // ---- reductions ----

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        assert!(!self.data.is_empty(), "mean: empty tensor");
        self.sum() / self.data.len() as f64
    }

    /// Row sums of a rank-2 tensor: `[m, n] -> [m]`.
    pub fn sum_rows(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "sum_rows: rank-2 tensor required");
        let n = self.shape[1];
        let data: Vec<f64> = self.data.chunks_exact(n).map(|r| r.iter().sum()).collect();
        Tensor {
            shape: vec![self.shape[0]],
            data,
        }
    }

    /// Column sums of a rank-2 tensor: `[m, n] -> [n]`.
    pub fn col_sums(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "col_sums: rank-2 tensor required");
        let n = self.shape[1];
        let mut out = vec![0.0; n];
        for r in self.data.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![n],
            data: out,
        }
    }

    /// Copy of columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert_eq!(self.shape.len(), 2, "slice_cols: rank-2 tensor required");
        let n = self.shape[1];
        assert!(
            start + len <= n,
            "slice_cols: columns [{}, {}) out of range for width {}",
            start,
            start + len,
            n
        );
        let mut data = Vec::with_capacity(self.shape[0] * len);
        for r in self.data.chunks_exact(n) {
            data.extend_from_slice(&r[start..start + len]);
        }
        Tensor {
            shape: vec![self.shape[0], len],
            data,
        }
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose: rank-2 tensor required");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data,
        }
    }

    // ---- matmul ----

    fn gemm_shapes(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> (usize, usize, usize) {
        assert_eq!(a.shape.len(), 2, "matmul: left operand must be rank 2");
        assert_eq!(b.shape.len(), 2, "matmul: right operand must be rank 2");
        let (am, ak) = if ta {
            (a.shape[1], a.shape[0])
        } else {
            (a.shape[0], a.shape[1])
        };
        let (bk, bn) = if tb {
            (b.shape[1], b.shape[0])
        } else {
            (b.shape[0], b.shape[1])
        };
        assert_eq!(
            ak,
            bk,
            "matmul: inner dimensions differ, {:?}{} x {:?}{}",
            a.shape,
            if ta { "^T" } else { "" },
            b.shape,
            if tb { "^T" } else { "" }
        );
        (am, ak, bn)
    }

    fn gemm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (m, k, n) = Tensor::gemm_shapes(a, b, ta, tb);
        let mut out = Tensor::zeros(&[m, n]);
        // Row-major strides; a transposed operand swaps its stride pair.
        let (rsa, csa) = if ta {
            (1, a.shape[1] as isize)
        } else {
            (a.shape[1] as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, b.shape[1] as isize)
        } else {
            (b.shape[1] as isize, 1)
        };
        unsafe {
            dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out.assert_finite("matmul");
        out
    }

    /// `self x other`, both rank 2.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        Tensor::gemm(self, other, false, false)
    }

    /// `self^T x other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        Tensor::gemm(self, other, true, false)
    }

    /// `self x other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        Tensor::gemm(self, other, false, true)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.check_same_shape(other, "max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element (distinguishes -0.0/0.0,
    /// unlike `==`). Used by determinism tests.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
