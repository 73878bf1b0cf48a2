//! Dense row-major matrices and the kernels used by the encoder and losses.
//!
//! All reductions run in fixed left-to-right order so that identical inputs
//! produce bit-identical outputs regardless of call site.

use std::io::{Read, Write};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::Real;

/// Row norms below this are treated as degenerate (true zero rows, not small
/// embeddings).
pub const EPS_NORM: f64 = 1e-12;

const MAGIC: &[u8; 4] = b"DLAB";
const FORMAT_VERSION: u32 = 1;

/// Dense row-major matrix. Rows and columns are always >= 1 and every entry
/// of a constructed matrix is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F: Scalar = Real> {
    rows: usize,
    cols: usize,
    values: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    /// Builds a matrix from row-major values, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::parameter(
                "shape",
                format!("rows and cols must be >= 1, got {rows}x{cols}"),
            ));
        }
        if values.len() != rows * cols {
            return Err(Error::parameter(
                "values",
                format!(
                    "expected {} values for {rows}x{cols}, got {}",
                    rows * cols,
                    values.len()
                ),
            ));
        }
        let m = Matrix { rows, cols, values };
        m.check_finite("matrix construction")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = F::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::parameter("rows", "need at least one non-empty row"));
        }
        let cols = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::parameter(
                    "rows",
                    format!("row {i} has {} entries, expected {cols}", row.len()),
                ));
            }
            values.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        for v in &self.values {
            if !v.is_finite() {
                return Err(Error::NonFinite(context.to_string()));
            }
        }
        Ok(())
    }

    fn shape_error(op: &'static str, a: &Self, b: &Self) -> Error {
        Error::Shape {
            op,
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        }
    }

    /// Standard matrix product, inner loop in fixed index order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Self::shape_error("matmul", self, other));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                let lhs = &other.values[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs.iter()) {
                    *d = *d + a * b;
                }
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// Element-wise sum. When `other` is a single row, it is broadcast over
    /// every row of `self` (bias addition).
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.same_shape(other) {
            let values = self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a + b)
                .collect();
            return Matrix::new(self.rows, self.cols, values);
        }
        if other.rows == 1 && other.cols == self.cols {
            let mut out = self.clone();
            for r in 0..self.rows {
                for (d, &b) in out.row_mut(r).iter_mut().zip(&other.values) {
                    *d = *d + b;
                }
            }
            return Ok(out);
        }
        Err(Self::shape_error("add", self, other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Self::shape_error("sub", self, other));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix::new(self.rows, self.cols, values)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Self::shape_error("hadamard", self, other));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .collect();
        Matrix::new(self.rows, self.cols, values)
    }

    pub fn scale(&self, factor: F) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of all entries, left-to-right.
    pub fn sum(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.values {
            acc = acc + v;
        }
        acc
    }

    /// Euclidean norm of each row, left-to-right accumulation.
    pub fn row_norms(&self) -> Vec<F> {
        (0..self.rows)
            .map(|r| {
                let mut acc = F::zero();
                for &v in self.row(r) {
                    acc = acc + v * v;
                }
                acc.sqrt()
            })
            .collect()
    }

    /// Normalizes every row to unit Euclidean norm.
    ///
    /// Rows with norm <= [`EPS_NORM`] are rejected: they are true zero rows,
    /// not small embeddings.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let eps = F::from_f64(EPS_NORM).unwrap();
        let norms = self.row_norms();
        let mut out = self.clone();
        for (r, &norm) in norms.iter().enumerate() {
            if norm <= eps {
                return Err(Error::DegenerateRow {
                    row: r,
                    norm: norm.to_f64().unwrap_or(0.0),
                    eps: EPS_NORM,
                });
            }
            let inv = F::one() / norm;
            for v in out.row_mut(r) {
                *v = *v * inv;
            }
        }
        out.check_finite("l2_normalize_rows")?;
        Ok(out)
    }

    /// Row-wise temperature softmax.
    pub fn softmax_rows(&self, temperature: F) -> Result<Self> {
        let mut out = Self::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let sm = softmax_row(self.row(r), temperature)?;
            out.row_mut(r).copy_from_slice(&sm);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.values {
            acc = acc + v * v;
        }
        acc.sqrt()
    }

    /// Serializes as magic `DLAB`, format version u32, rows u64, cols u64,
    /// then row-major 64-bit floats, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.values {
            let v = v
                .to_f64()
                .ok_or_else(|| Error::NonFinite("matrix serialization".into()))?;
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one serialized matrix, validating magic, version and finiteness.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                what: "matrix",
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "matrix",
                message: format!("unsupported format version {version}"),
            });
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let rows = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        let cols = u64::from_le_bytes(buf8) as usize;
        if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 30) {
            return Err(Error::Format {
                what: "matrix",
                message: format!("implausible shape {rows}x{cols}"),
            });
        }
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf8)?;
            let v = f64::from_le_bytes(buf8);
            let v =
                F::from_f64(v).ok_or_else(|| Error::NonFinite("matrix deserialization".into()))?;
            values.push(v);
        }
        Matrix::new(rows, cols, values)
    }
}

/// Temperature softmax of one row with max-subtraction; the temperatures in
/// use go down to 0.01, which naive exponentiation does not survive.
pub fn softmax_row<F: Scalar>(v: &[F], temperature: F) -> Result<Vec<F>> {
    if temperature <= F::zero() {
        return Err(Error::parameter(
            "temperature",
            format!("must be > 0, got {temperature}"),
        ));
    }
    if v.is_empty() {
        return Err(Error::parameter("values", "softmax of an empty sequence"));
    }
    let mut max = v[0];
    for &x in v {
        if !x.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        if x > max {
            max = x;
        }
    }
    let exps: Vec<F> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let mut total = F::zero();
    for &e in &exps {
        total = total + e;
    }
    Ok(exps.iter().map(|&e| e / total).collect())
}
