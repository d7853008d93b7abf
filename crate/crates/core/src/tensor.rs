//! Dense real matrices, seeded sampling and content hashing.
//!
//! All arithmetic is carried out in `f64`. Reductions use a fixed summation
//! order so that every operation is bit-reproducible for identical inputs,
//! independent of thread scheduling.
//!
//! Random draws come from ChaCha8 seeded with a 64-bit value. Per-layer and
//! per-factor seeds are derived with [`derive_seed`], a SHA-256 of the base
//! seed and a pair of labels, so the value a layer receives never depends on
//! the order in which layers are processed.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Storage precision for serialized tensors and content digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Row-major dense matrix with finite entries and non-zero dimensions.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            f.debug_struct("Matrix")
                .field("rows", &self.rows)
                .field("cols", &self.cols)
                .field("data", &self.data)
                .finish()
        } else {
            write!(f, "Matrix({}x{})", self.rows, self.cols)
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::invalid("matrix size overflows usize"))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("construction")?;
        Ok(m)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Matrix::new(rows, cols, vec![value; rows.saturating_mul(cols)])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_cols {
                return Err(Error::invalid(format!(
                    "ragged rows: row 0 has {n_cols} values, row {i} has {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(n_rows, n_cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.saturating_mul(cols));
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Wraps a buffer produced by an internal kernel, checking finiteness.
    pub(crate) fn from_kernel(rows: usize, cols: usize, data: Vec<f64>, op: &'static str) -> Result<Self> {
        debug_assert_eq!(data.len(), rows * cols);
        let m = Matrix { rows, cols, data };
        m.ensure_finite(op)?;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            })
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x + y).collect();
        Matrix::from_kernel(self.rows, self.cols, data, "add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x - y).collect();
        Matrix::from_kernel(self.rows, self.cols, data, "sub")
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        let data = self.data.iter().map(|x| x * factor).collect();
        Matrix::from_kernel(self.rows, self.cols, data, "scale")
    }

    pub fn frobenius_sq(&self) -> f64 {
        sum_sq(&self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise absolute difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
    }

    /// Copy with every entry rounded through `dtype`.
    pub fn rounded_to(&self, dtype: Dtype) -> Matrix {
        match dtype {
            Dtype::F64 => self.clone(),
            Dtype::F32 => Matrix {
                rows: self.rows,
                cols: self.cols,
                data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            },
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }
}

/// Sum of squares with four interleaved accumulators combined in a fixed order.
pub(crate) fn sum_sq(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = xs.chunks_exact(4);
    let tail = chunks.remainder();
    for c in chunks {
        acc[0] += c[0] * c[0];
        acc[1] += c[1] * c[1];
        acc[2] += c[2] * c[2];
        acc[3] += c[3] * c[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for v in tail {
        s += v * v;
    }
    s
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let cx = x.chunks_exact(4);
    let cy = y.chunks_exact(4);
    let (tx, ty) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in tx.iter().zip(ty) {
        s += a * b;
    }
    s
}

/// `out = lhs (m×n) · rhs (n×p)`, all row-major slices.
pub(crate) fn gemm_nn(out: &mut [f64], lhs: &[f64], rhs: &[f64], m: usize, n: usize, p: usize) {
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (q, &l) in lhs[i * n..(i + 1) * n].iter().enumerate() {
            let rrow = &rhs[q * p..(q + 1) * p];
            for (o, &r) in orow.iter_mut().zip(rrow) {
                *o += l * r;
            }
        }
    }
}

/// `out = lhsᵀ · rhs` where lhs is n×m and rhs is n×p.
pub(crate) fn gemm_tn(out: &mut [f64], lhs: &[f64], rhs: &[f64], n: usize, m: usize, p: usize) {
    out.fill(0.0);
    for q in 0..n {
        let rrow = &rhs[q * p..(q + 1) * p];
        for (i, &l) in lhs[q * m..(q + 1) * m].iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &r) in orow.iter_mut().zip(rrow) {
                *o += l * r;
            }
        }
    }
}

/// `out = lhs · rhsᵀ` where lhs is m×n and rhs is p×n.
pub(crate) fn gemm_nt(out: &mut [f64], lhs: &[f64], rhs: &[f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let lrow = &lhs[i * n..(i + 1) * n];
        for j in 0..p {
            out[i * p + j] = dot(lrow, &rhs[j * n..(j + 1) * n]);
        }
    }
}

/// Standard matrix product with a fixed loop order.
pub fn matmul(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        });
    }
    let mut out = vec![0.0; lhs.rows * rhs.cols];
    gemm_nn(&mut out, &lhs.data, &rhs.data, lhs.rows, lhs.cols, rhs.cols);
    Matrix::from_kernel(lhs.rows, rhs.cols, out, "matmul")
}

/// `lhsᵀ · rhs` without materializing the transpose.
pub fn matmul_tn(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.rows != rhs.rows {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        });
    }
    let mut out = vec![0.0; lhs.cols * rhs.cols];
    gemm_tn(&mut out, &lhs.data, &rhs.data, lhs.rows, lhs.cols, rhs.cols);
    Matrix::from_kernel(lhs.cols, rhs.cols, out, "matmul_tn")
}

/// `lhs · rhsᵀ` without materializing the transpose.
pub fn matmul_nt(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: lhs.shape(),
            rhs: rhs.shape(),
        });
    }
    let mut out = vec![0.0; lhs.rows * rhs.rows];
    gemm_nt(&mut out, &lhs.data, &rhs.data, lhs.rows, lhs.cols, rhs.rows);
    Matrix::from_kernel(lhs.rows, rhs.rows, out, "matmul_nt")
}

/// Mean of squared entrywise differences.
pub fn mse(x: &Matrix, y: &Matrix) -> Result<f64> {
    Ok(frobenius_sq_diff(x, y)? / x.len() as f64)
}

/// `‖x − y‖²_F`.
pub fn frobenius_sq_diff(x: &Matrix, y: &Matrix) -> Result<f64> {
    x.same_shape(y, "mse")?;
    let mut acc = [0.0f64; 4];
    let cx = x.data.chunks_exact(4);
    let cy = y.data.chunks_exact(4);
    let (tx, ty) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for l in 0..4 {
            let d = a[l] - b[l];
            acc[l] += d * d;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in tx.iter().zip(ty) {
        let d = a - b;
        s += d * d;
    }
    Ok(s)
}

/// Distributions used by the initialization strategies.
///
/// Kaiming kinds use fan-in mode with gain √2: the normal variant has
/// standard deviation √(2/fan_in) and the uniform variant is bounded by
/// ±√(6/fan_in).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistributionSpec {
    Normal { mean: f64, std: f64 },
    KaimingNormal { fan_in: usize },
    KaimingUniform { fan_in: usize },
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistributionSpec::Normal { mean, std } => {
                if !mean.is_finite() {
                    return Err(Error::invalid(format!("normal mean must be finite, got {mean}")));
                }
                if !(std.is_finite() && std > 0.0) {
                    return Err(Error::invalid(format!("normal std must be > 0, got {std}")));
                }
            }
            DistributionSpec::KaimingNormal { fan_in } | DistributionSpec::KaimingUniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::invalid("kaiming fan_in must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Population standard deviation of the distribution.
    pub fn std(&self) -> f64 {
        match *self {
            DistributionSpec::Normal { std, .. } => std,
            DistributionSpec::KaimingNormal { fan_in } => (2.0 / fan_in as f64).sqrt(),
            // U(-b, b) has variance b²/3 = 2/fan_in.
            DistributionSpec::KaimingUniform { fan_in } => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Deterministic draw of a `rows × cols` matrix from `spec`.
pub fn sample(spec: &DistributionSpec, rows: usize, cols: usize, seed: u64) -> Result<Matrix> {
    spec.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "sample shape must be positive, got {rows}x{cols}"
        )));
    }
    let n = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = match *spec {
        DistributionSpec::Normal { mean, std } => {
            let dist = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
            dist.sample_iter(&mut rng).take(n).collect()
        }
        DistributionSpec::KaimingNormal { fan_in } => {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::invalid(e.to_string()))?;
            dist.sample_iter(&mut rng).take(n).collect()
        }
        DistributionSpec::KaimingUniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
            dist.sample_iter(&mut rng).take(n).collect()
        }
    };
    Matrix::from_kernel(rows, cols, data, "sample")
}

/// Derives an independent 64-bit seed from a base seed and two labels.
///
/// Labels are length-prefixed so that `("ab", "c")` and `("a", "bc")` differ.
pub fn derive_seed(base: u64, name: &str, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"inilora-seed\0");
    h.update(base.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((role.len() as u64).to_le_bytes());
    h.update(role.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// SHA-256 hex digest of a matrix at 64-bit storage precision.
pub fn content_hash(m: &Matrix) -> String {
    content_hash_as(m, Dtype::F64)
}

/// SHA-256 hex digest over `(rows, cols, dtype, little-endian payload)`.
pub fn content_hash_as(m: &Matrix, dtype: Dtype) -> String {
    let mut h = Sha256::new();
    h.update((m.rows as u64).to_le_bytes());
    h.update((m.cols as u64).to_le_bytes());
    h.update([dtype.code()]);
    match dtype {
        Dtype::F64 => {
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for v in &m.data {
                h.update((*v as f32).to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let p = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[5.0], &[6.0]])).unwrap();
        assert_eq!(p, m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = m(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        assert_eq!(matmul(&x, &Matrix::identity(2)).unwrap(), x);
        assert_eq!(matmul(&Matrix::zeros(2, 2), &x).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = sample(&DistributionSpec::Normal { mean: 0.0, std: 1.0 }, 5, 7, 1).unwrap();
        let b = sample(&DistributionSpec::Normal { mean: 0.0, std: 1.0 }, 5, 3, 2).unwrap();
        let c = sample(&DistributionSpec::Normal { mean: 0.0, std: 1.0 }, 4, 7, 3).unwrap();
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = matmul(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&tn_ref).unwrap() < 1e-12);
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = matmul(&a, &c.transpose()).unwrap();
        assert!(nt.max_abs_diff(&nt_ref).unwrap() < 1e-12);
    }

    #[test]
    fn mse_values() {
        let x = m(&[&[0.0, 0.0]]);
        let y = m(&[&[3.0, 4.0]]);
        assert_eq!(mse(&x, &y).unwrap(), 12.5);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let x2 = x.scale(2.0).unwrap();
        let y2 = y.scale(2.0).unwrap();
        assert_eq!(mse(&x2, &y2).unwrap(), 4.0 * mse(&x, &y).unwrap());
        assert!(mse(&x, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn overflow_is_caught() {
        let big = Matrix::filled(1, 1, 1e300).unwrap();
        assert!(matches!(big.scale(1e300), Err(Error::NonFinite(_))));
        assert!(matches!(matmul(&big, &big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn serde_rejects_invalid_matrix() {
        let bad = r#"{"rows":1,"cols":2,"data":[1.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
        let good = r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#;
        assert_eq!(serde_json::from_str::<Matrix>(good).unwrap().shape(), (1, 2));
    }

    #[test]
    fn sample_is_deterministic() {
        let spec = DistributionSpec::Normal { mean: 0.0, std: 0.5 };
        let a = sample(&spec, 16, 9, 42).unwrap();
        let b = sample(&spec, 16, 9, 42).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample(&spec, 16, 9, 43).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn sample_rejects_bad_specs() {
        assert!(sample(&DistributionSpec::Normal { mean: 0.0, std: 0.0 }, 2, 2, 0).is_err());
        assert!(sample(&DistributionSpec::Normal { mean: 0.0, std: -1.0 }, 2, 2, 0).is_err());
        assert!(sample(&DistributionSpec::KaimingNormal { fan_in: 0 }, 2, 2, 0).is_err());
        assert!(sample(&DistributionSpec::KaimingUniform { fan_in: 0 }, 2, 2, 0).is_err());
    }

    #[test]
    fn kaiming_uniform_respects_bound() {
        let m = sample(&DistributionSpec::KaimingUniform { fan_in: 24 }, 100, 100, 9).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(m.max_abs() <= bound);
        assert!(m.max_abs() > 0.95 * bound);
    }

    #[test]
    fn hash_properties() {
        let x = m(&[&[1.0, -2.0, 3.0]]);
        assert_eq!(content_hash(&x), content_hash(&x.clone()));
        let flipped = m(&[&[-1.0, -2.0, 3.0]]);
        assert_ne!(content_hash(&x), content_hash(&flipped));
        assert_ne!(
            content_hash(&Matrix::zeros(2, 3)),
            content_hash(&Matrix::zeros(3, 2))
        );
        assert_ne!(content_hash_as(&x, Dtype::F32), content_hash_as(&x, Dtype::F64));
        assert_eq!(content_hash(&x).len(), 64);
    }

    #[test]
    fn derived_seeds_are_label_sensitive() {
        let s = derive_seed(7, "layer.0", "query");
        assert_eq!(s, derive_seed(7, "layer.0", "query"));
        assert_ne!(s, derive_seed(8, "layer.0", "query"));
        assert_ne!(s, derive_seed(7, "layer.0", "value"));
        assert_ne!(derive_seed(7, "ab", "c"), derive_seed(7, "a", "bc"));
    }
}
