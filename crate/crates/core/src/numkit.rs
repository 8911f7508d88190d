//! Small dense linear algebra, deterministic randomness, and the tolerance
//! policy used by every other module.
//!
//! Design constraints this module owns:
//!
//! * **64-bit everywhere.** The verification targets residuals around
//!   1e-10..1e-12, so the kit's own numeric noise must stay below that.
//! * **Deterministic reduction order.** Every accumulated sum (matrix
//!   products, dot products, norms) runs left-to-right over the inner
//!   dimension in row-major order. The product kernel uses the i-k-j loop
//!   order: each output entry accumulates its terms in ascending inner
//!   index, which vectorizes without reassociation, so results are
//!   bit-identical across runs and IEEE-754 platforms.
//! * **Seeded, stream-separated randomness.** [`RngStream`] derives a
//!   ChaCha8 key from `(seed, stream_id)`; identical pairs give identical
//!   sequences everywhere, distinct stream ids on one seed give unrelated
//!   sequences.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

// ---------------------------------------------------------------------------
// Tolerance policy
// ---------------------------------------------------------------------------

/// Absolute/relative tolerance pair used by comparisons and assertions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerance {
    /// Default tolerance for theorem-level checks.
    pub const THEOREM: Tolerance = Tolerance { abs: 1e-9, rel: 1e-9 };

    /// Absolute floor for "this gradient is exactly zero" assertions at desk
    /// scale (D ≤ 64, n ≤ 256).
    pub const ZERO_ASSERTION: Tolerance = Tolerance { abs: 1e-8, rel: 0.0 };

    /// Construct a tolerance; both components must be nonnegative.
    pub fn new(abs: f64, rel: f64) -> Self {
        assert!(abs >= 0.0 && rel >= 0.0, "tolerance components must be >= 0");
        Tolerance { abs, rel }
    }

    /// Scale the tolerance by √(dims·batch) for comparisons of norms over a
    /// D×n object, so the per-entry budget stays constant as sizes grow.
    pub fn scaled_for_norm(&self, dims: usize, batch: usize) -> Tolerance {
        let s = ((dims * batch) as f64).sqrt();
        Tolerance { abs: self.abs * s, rel: self.rel }
    }
}

/// True iff `|a − b| ≤ tol.abs + tol.rel·max(|a|,|b|)`. NaN compares false.
pub fn close(a: f64, b: f64, tol: Tolerance) -> bool {
    let diff = (a - b).abs();
    diff <= tol.abs + tol.rel * a.abs().max(b.abs())
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense 64-bit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(len: usize) -> Self {
        Vector { data: vec![0.0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Vector { data: vec![1.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Left-to-right dot product.
    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        dot_slices(&self.data, &other.data)
    }

    /// Euclidean norm (left-to-right accumulation).
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Left-to-right sum of entries.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector::new(self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Vector::new(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Vector::new(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Left-to-right dot product over slices.
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major 64-bit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data; errors if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "{}×{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from explicit rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::Shape(format!(
                    "ragged rows: expected {}, got {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector::new(self.row(r).to_vec())
    }

    pub fn col_vector(&self, c: usize) -> Vector {
        debug_assert!(c < self.cols);
        Vector::new((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Frobenius norm (left-to-right accumulation of squares).
    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix–vector product; each output entry accumulates left to right.
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec: shape mismatch");
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            out.push(dot_slices(self.row(r), v.as_slice()));
        }
        Vector::new(out)
    }
}

/// Standard matrix product `a·b` with a pinned accumulation order: every
/// entry `(i,j)` sums `a[i,p]·b[p,j]` over ascending `p`.
///
/// # Errors
/// Shape error when `a.cols != b.rows`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CoreError::Shape(format!(
            "matmul: {}×{} times {}×{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    Ok(Matrix { rows: m, cols: n, data: c })
}

/// `aᵀ·b` without materializing the transpose; same per-entry accumulation
/// order (ascending inner index) as [`matmul`].
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(CoreError::Shape(format!(
            "matmul_at: ({}×{})ᵀ times {}×{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
    Ok(Matrix { rows: m, cols: n, data: c })
}

/// `a·bᵀ`; each entry is a row·row dot product accumulated left to right.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(CoreError::Shape(format!(
            "matmul_bt: {}×{} times ({}×{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, n) = (a.rows, b.rows);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = dot_slices(a.row(i), b.row(j));
        }
    }
    Ok(Matrix { rows: m, cols: n, data: c })
}

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

/// Seeded random stream. Identical `(seed, stream_id)` pairs produce
/// identical sequences on every platform; distinct stream ids on the same
/// seed produce unrelated sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    /// Create the stream identified by `(seed, stream_id)`. The ChaCha8 key
    /// is expanded from the pair with splitmix64; the odd-constant multiply
    /// keeps distinct stream ids on one seed at distinct keys.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut state = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream_id.wrapping_add(1));
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        RngStream { seed, stream_id, rng: ChaCha8Rng::from_seed(key) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Next standard-normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Next draw uniform in `[0, bound)`.
    pub fn uniform_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        self.rng.random_range(0..bound)
    }
}

/// `rows×cols` matrix of i.i.d. `N(mean, std²)` entries drawn row-major from
/// `rng`.
///
/// # Errors
/// Domain error when `std < 0`.
pub fn gaussian_matrix(
    rng: &mut RngStream,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
) -> Result<Matrix> {
    if std < 0.0 {
        return Err(CoreError::Domain(format!("gaussian_matrix: std = {std} < 0")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(mean + std * rng.normal());
    }
    Matrix::from_vec(rows, cols, data)
}

/// Length-`len` vector of i.i.d. `N(mean, std²)` entries.
///
/// # Errors
/// Domain error when `std < 0`.
pub fn gaussian_vector(rng: &mut RngStream, len: usize, mean: f64, std: f64) -> Result<Vector> {
    if std < 0.0 {
        return Err(CoreError::Domain(format!("gaussian_vector: std = {std} < 0")));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(mean + std * rng.normal());
    }
    Ok(Vector::new(data))
}

// ---------------------------------------------------------------------------
// Symmetric eigenvalues (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric matrix, ascending. Uses cyclic Jacobi
/// rotations — deterministic sweep order, adequate for the small symmetric
/// matrices this crate produces (rank checks on n×n Jacobians, n ≤ 256).
///
/// The input is symmetrized as `(M + Mᵀ)/2` first, so tiny asymmetries from
/// upstream arithmetic do not matter.
///
/// # Errors
/// Shape error for non-square input.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows != m.cols {
        return Err(CoreError::Shape(format!("sym_eigenvalues: {}×{}", m.rows, m.cols)));
    }
    let n = m.rows;
    let mut a: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            0.5 * (m.get(i, j) + m.get(j, i))
        })
        .collect();
    let scale = m.frobenius_norm().max(1.0);
    for _sweep in 0..60 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).expect("eigenvalues are finite"));
    Ok(eigs)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
