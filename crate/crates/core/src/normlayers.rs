//! Batch- and layer-normalization forwards, batch vs population statistics,
//! and the analytic Jacobian of the standardization phase.
//!
//! Conventions, fixed here and relied on everywhere downstream:
//!
//! * Data is `D×n`: row `d` is one feature observed across `n` samples.
//! * Variance is the **biased**, divide-by-`n` form. This is what makes
//!   `y_dᵀy_d = n` hold exactly for standardized rows, which in turn is what
//!   puts `y_d` in the null space of the train-mode Jacobian.
//! * Forward passes accept any `ε ≥ 0`; the closed-form train Jacobian
//!   refuses `ε ≠ 0` instead of approximating, because its null-space
//!   structure is exact only at `ε = 0`.
//! * Degenerate (zero-variance) rows or columns are rejected with an error
//!   naming the offending index, never smoothed over.

use crate::error::{CoreError, Result};
use crate::numkit::{Matrix, Vector};

/// Which statistics a [`StandardizedBatch`] was standardized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardizeMode {
    /// Statistics computed from the batch itself (training forward).
    TrainBatchStats,
    /// Frozen population statistics (inference forward).
    EvalPopulationStats,
}

/// Learned scale/shift of the affine phase.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vector,
    pub beta: Vector,
    pub epsilon: f64,
}

impl BnParams {
    /// γ = 1, β = 0, given ε: the identity affine.
    pub fn identity(dims: usize, epsilon: f64) -> Self {
        BnParams { gamma: Vector::ones(dims), beta: Vector::zeros(dims), epsilon }
    }
}

/// Per-dimension mean and standard deviation of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vector,
    pub sigma: Vector,
}

/// Running population statistics accumulated across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationStats {
    pub mu_pop: Vector,
    pub sigma_pop: Vector,
    pub batches_seen: u64,
}

impl PopulationStats {
    /// Fresh accumulator: μ = 0, σ = 1, nothing seen yet.
    pub fn fresh(dims: usize) -> Self {
        PopulationStats {
            mu_pop: Vector::zeros(dims),
            sigma_pop: Vector::ones(dims),
            batches_seen: 0,
        }
    }

    /// Population stats that exactly equal one batch's stats (momentum-1
    /// snapshot). Used when eval-mode outputs must reproduce a specific
    /// training batch.
    pub fn from_batch(stats: &BatchStats) -> Self {
        PopulationStats {
            mu_pop: stats.mu.clone(),
            sigma_pop: stats.sigma.clone(),
            batches_seen: 1,
        }
    }
}

/// Output of a standardization phase: the standardized values plus the
/// statistics and mode that produced them.
///
/// When produced by [`standardize_batch`] with ε = 0, every row of `y` has
/// mean within 1e-10 of zero and sample second moment within 1e-10 of one.
/// (Per-sample standardization from [`standardize_layer`] shares this type
/// but normalizes columns, so that row invariant does not apply to it.)
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedBatch {
    pub y: Matrix,
    pub stats: BatchStats,
    pub mode: StandardizeMode,
    pub epsilon: f64,
}

impl StandardizedBatch {
    pub fn dims(&self) -> usize {
        self.y.rows()
    }

    pub fn batch(&self) -> usize {
        self.y.cols()
    }

    /// Recover the input this batch was standardized from:
    /// `x_d = √(σ_d² + ε)·y_d + μ_d·1_n`, valid in both modes since `stats`
    /// always holds the statistics actually used.
    pub fn reconstruct_input(&self) -> Matrix {
        let mut x = Matrix::zeros(self.dims(), self.batch());
        for d in 0..self.dims() {
            let sd = (self.stats.sigma[d] * self.stats.sigma[d] + self.epsilon).sqrt();
            let mu = self.stats.mu[d];
            for i in 0..self.batch() {
                x.set(d, i, sd * self.y.get(d, i) + mu);
            }
        }
        x
    }
}

/// Standardize each row of `x` with statistics computed from `x` itself:
/// `y_d = (x_d − μ_d·1_n)/√(σ_d² + ε)`, with μ the row mean and σ² the
/// biased (divide-by-n) row variance.
///
/// # Errors
/// * Shape error when `n < 2`.
/// * Degenerate-dimension error naming `d` when `ε = 0` and row `d` has zero
///   sample variance.
pub fn standardize_batch(x: &Matrix, epsilon: f64) -> Result<StandardizedBatch> {
    if x.cols() < 2 {
        return Err(CoreError::Shape(format!(
            "standardize_batch: need n ≥ 2 samples, got {}",
            x.cols()
        )));
    }
    if epsilon < 0.0 {
        return Err(CoreError::Domain(format!("standardize_batch: ε = {epsilon} < 0")));
    }
    let (dims, n) = (x.rows(), x.cols());
    let inv_n = 1.0 / n as f64;
    let mut mu = Vector::zeros(dims);
    let mut sigma = Vector::zeros(dims);
    let mut y = Matrix::zeros(dims, n);
    for d in 0..dims {
        let row = x.row(d);
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = 0.0;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_n;
        if var == 0.0 && epsilon == 0.0 {
            return Err(CoreError::DegenerateDim {
                d,
                reason: "row has zero sample variance and ε = 0".to_string(),
            });
        }
        let sd = var.sqrt();
        let denom = (var + epsilon).sqrt();
        mu[d] = mean;
        sigma[d] = sd;
        for i in 0..n {
            y.set(d, i, (row[i] - mean) / denom);
        }
    }
    Ok(StandardizedBatch {
        y,
        stats: BatchStats { mu, sigma },
        mode: StandardizeMode::TrainBatchStats,
        epsilon,
    })
}

/// Standardize each row of `x` with **frozen** population statistics:
/// `y_d = (x_d − μ_pop_d·1_n)/√(σ_pop_d² + ε)`. Each sample is transformed
/// independently — no cross-sample coupling.
///
/// # Errors
/// * Shape error when `x.rows() != ps` dimension count.
/// * Domain error when some `σ_pop_d = 0` and `ε = 0`.
pub fn standardize_eval(x: &Matrix, ps: &PopulationStats, epsilon: f64) -> Result<StandardizedBatch> {
    if x.rows() != ps.mu_pop.len() {
        return Err(CoreError::Shape(format!(
            "standardize_eval: x has {} rows, population stats have {}",
            x.rows(),
            ps.mu_pop.len()
        )));
    }
    if epsilon < 0.0 {
        return Err(CoreError::Domain(format!("standardize_eval: ε = {epsilon} < 0")));
    }
    let (dims, n) = (x.rows(), x.cols());
    let mut y = Matrix::zeros(dims, n);
    for d in 0..dims {
        let sd = ps.sigma_pop[d];
        if sd == 0.0 && epsilon == 0.0 {
            return Err(CoreError::Domain(format!(
                "standardize_eval: σ_pop[{d}] = 0 with ε = 0"
            )));
        }
        let denom = (sd * sd + epsilon).sqrt();
        let mu = ps.mu_pop[d];
        for i in 0..n {
            y.set(d, i, (x.get(d, i) - mu) / denom);
        }
    }
    Ok(StandardizedBatch {
        y,
        stats: BatchStats { mu: ps.mu_pop.clone(), sigma: ps.sigma_pop.clone() },
        mode: StandardizeMode::EvalPopulationStats,
        epsilon,
    })
}

/// Affine phase: `Z = diag(γ)·Y + β·1_nᵀ`.
///
/// # Errors
/// Shape error when `γ`/`β` length differs from the batch's dimension count.
pub fn affine(yb: &StandardizedBatch, p: &BnParams) -> Result<Matrix> {
    let dims = yb.dims();
    if p.gamma.len() != dims || p.beta.len() != dims {
        return Err(CoreError::Shape(format!(
            "affine: batch has D = {dims}, γ has {}, β has {}",
            p.gamma.len(),
            p.beta.len()
        )));
    }
    let n = yb.batch();
    let mut z = Matrix::zeros(dims, n);
    for d in 0..dims {
        let (g, b) = (p.gamma[d], p.beta[d]);
        for i in 0..n {
            z.set(d, i, g * yb.y.get(d, i) + b);
        }
    }
    Ok(z)
}

/// Layer normalization: standardize each **column** (sample) of `x` over its
/// `D` dimensions, biased variance, `y_{:,i} = (x_{:,i} − m_i·1_D)/√(s_i² + ε)`.
///
/// The returned batch carries per-sample statistics (`mu`/`sigma` of length
/// `n`) and mode `TrainBatchStats` — they were computed from the data.
///
/// # Errors
/// * Shape error when `D < 2`.
/// * Degenerate-sample error naming `i` when `ε = 0` and column `i` has zero
///   variance.
pub fn standardize_layer(x: &Matrix, epsilon: f64) -> Result<StandardizedBatch> {
    if x.rows() < 2 {
        return Err(CoreError::Shape(format!(
            "standardize_layer: need D ≥ 2 dimensions, got {}",
            x.rows()
        )));
    }
    if epsilon < 0.0 {
        return Err(CoreError::Domain(format!("standardize_layer: ε = {epsilon} < 0")));
    }
    let (dims, n) = (x.rows(), x.cols());
    let inv_d = 1.0 / dims as f64;
    let mut mu = Vector::zeros(n);
    let mut sigma = Vector::zeros(n);
    let mut y = Matrix::zeros(dims, n);
    for i in 0..n {
        let mut mean = 0.0;
        for d in 0..dims {
            mean += x.get(d, i);
        }
        mean *= inv_d;
        let mut var = 0.0;
        for d in 0..dims {
            let c = x.get(d, i) - mean;
            var += c * c;
        }
        var *= inv_d;
        if var == 0.0 && epsilon == 0.0 {
            return Err(CoreError::DegenerateSample {
                i,
                reason: "column has zero variance over dimensions and ε = 0".to_string(),
            });
        }
        let denom = (var + epsilon).sqrt();
        mu[i] = mean;
        sigma[i] = var.sqrt();
        for d in 0..dims {
            y.set(d, i, (x.get(d, i) - mean) / denom);
        }
    }
    Ok(StandardizedBatch {
        y,
        stats: BatchStats { mu, sigma },
        mode: StandardizeMode::TrainBatchStats,
        epsilon,
    })
}

/// Exponential-moving-average update of population statistics:
/// `new = (1 − momentum)·old + momentum·batch`, applied to μ and σ;
/// `batches_seen` increments.
///
/// # Errors
/// Domain error unless `0 < momentum ≤ 1`; shape error on dimension mismatch.
pub fn update_population(
    ps: &PopulationStats,
    stats: &BatchStats,
    momentum: f64,
) -> Result<PopulationStats> {
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(CoreError::Domain(format!(
            "update_population: momentum must satisfy 0 < m ≤ 1, got {momentum}"
        )));
    }
    let dims = ps.mu_pop.len();
    if stats.mu.len() != dims || stats.sigma.len() != dims {
        return Err(CoreError::Shape(format!(
            "update_population: population has D = {dims}, batch stats have {}",
            stats.mu.len()
        )));
    }
    let keep = 1.0 - momentum;
    let mut mu = Vector::zeros(dims);
    let mut sigma = Vector::zeros(dims);
    for d in 0..dims {
        mu[d] = keep * ps.mu_pop[d] + momentum * stats.mu[d];
        sigma[d] = keep * ps.sigma_pop[d] + momentum * stats.sigma[d];
    }
    Ok(PopulationStats { mu_pop: mu, sigma_pop: sigma, batches_seen: ps.batches_seen + 1 })
}

/// Analytic Jacobian of train-mode standardization for dimension `d`:
/// `J_d = (1/σ_d)·(I − (1/n)·1_n·1_nᵀ − (1/n)·y_d·y_dᵀ)`, an n×n symmetric
/// matrix built from the stored `σ_d` and standardized row `y_d`.
///
/// Its null space contains `1_n` (mean subtraction) and `y_d` (variance
/// rescaling): both directions are annihilated exactly. This closed form
/// assumes ε = 0 and batch statistics; anything else is refused.
///
/// # Errors
/// * Index error when `d ≥ D`.
/// * Unsupported-mode error when `yb.epsilon ≠ 0` or `yb.mode` is eval.
pub fn jacobian_std_train(yb: &StandardizedBatch, d: usize) -> Result<Matrix> {
    if d >= yb.dims() {
        return Err(CoreError::IndexOutOfRange { index: d, len: yb.dims() });
    }
    if yb.epsilon != 0.0 {
        return Err(CoreError::UnsupportedMode(format!(
            "jacobian_std_train: closed form requires ε = 0, batch has ε = {}",
            yb.epsilon
        )));
    }
    if yb.mode != StandardizeMode::TrainBatchStats {
        return Err(CoreError::UnsupportedMode(
            "jacobian_std_train: batch was standardized with population statistics".to_string(),
        ));
    }
    let n = yb.batch();
    let inv_n = 1.0 / n as f64;
    let inv_sigma = 1.0 / yb.stats.sigma[d];
    let yd = yb.y.row(d);
    let mut j = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let delta = if a == b { 1.0 } else { 0.0 };
            j.set(a, b, inv_sigma * (delta - inv_n - inv_n * yd[a] * yd[b]));
        }
    }
    Ok(j)
}

/// Jacobian of eval-mode standardization for dimension `d` at batch size
/// `n`: the diagonal matrix `(1/σ_pop_d)·I_n` (each sample scaled
/// independently — no mean/variance feedback, hence no null space).
///
/// # Errors
/// * Index error when `d` is out of range.
/// * Domain error when `σ_pop_d = 0`.
pub fn jacobian_std_eval(ps: &PopulationStats, d: usize, n: usize) -> Result<Matrix> {
    if d >= ps.sigma_pop.len() {
        return Err(CoreError::IndexOutOfRange { index: d, len: ps.sigma_pop.len() });
    }
    let sd = ps.sigma_pop[d];
    if sd == 0.0 {
        return Err(CoreError::Domain(format!("jacobian_std_eval: σ_pop[{d}] = 0")));
    }
    Ok(Matrix::identity(n).scaled(1.0 / sd))
}
