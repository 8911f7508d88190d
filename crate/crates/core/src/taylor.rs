//! Taylor-model extraction for black-box scalar losses, the batch-loss term
//! decomposition, the linear/non projection split, and per-sample model
//! averaging.
//!
//! A loss is an opaque evaluator `Vector(D) → f64`. [`fit_taylor`] recovers
//! its value, gradient, and an equivalent Hessian at an expansion point by
//! central finite differences; [`decompose_batch_loss`] then splits the summed
//! batch loss into constant, gradient, diagonal-Hessian, off-diagonal-Hessian
//! and remainder terms, and attributes the off-diagonal term per dimension to
//! a *linear* part (the component of every feature row collinear with row
//! `d`) and a *non* part (the orthogonal residue). That split is the heart of
//! the verification engine: under batch standardization the linear part dies
//! in the backward pass while the non part survives.

use crate::error::{CoreError, Result};
use crate::numkit::{Matrix, Vector};

/// Black-box scalar loss on one sample's feature vector.
///
/// Implementations must be deterministic (same input, same output) and finite
/// on the domain they are evaluated over; non-finite values surface as
/// evaluation errors from the callers that probe them.
pub trait LossFn {
    fn eval(&self, y: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> LossFn for F {
    fn eval(&self, y: &[f64]) -> f64 {
        self(y)
    }
}

fn eval_checked<L: LossFn + ?Sized>(loss: &L, point: &[f64]) -> Result<f64> {
    let v = loss.eval(point);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Evaluation { point: point.to_vec() })
    }
}

/// Second-order model of a loss at an expansion point: value gradient `g`,
/// symmetrized Hessian `h`, and `h = h_diag + h_off` with `h_diag` diagonal
/// and `h_off` zero on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorModel {
    pub y_tilde: Vector,
    pub g: Vector,
    pub h: Matrix,
    pub h_diag: Matrix,
    pub h_off: Matrix,
}

impl TaylorModel {
    /// Assemble a model from an expansion point, gradient, and Hessian. The
    /// Hessian is symmetrized as `(H + Hᵀ)/2` before the diagonal split.
    ///
    /// # Errors
    /// Shape error when dimensions disagree or `h` is not square.
    pub fn new(y_tilde: Vector, g: Vector, h: Matrix) -> Result<Self> {
        let dims = y_tilde.len();
        if g.len() != dims || h.rows() != dims || h.cols() != dims {
            return Err(CoreError::Shape(format!(
                "TaylorModel: ỹ has D = {dims}, g has {}, H is {}×{}",
                g.len(),
                h.rows(),
                h.cols()
            )));
        }
        let sym = h.add(&h.transpose()).scaled(0.5);
        let mut h_diag = Matrix::zeros(dims, dims);
        let mut h_off = sym.clone();
        for d in 0..dims {
            h_diag.set(d, d, sym.get(d, d));
            h_off.set(d, d, 0.0);
        }
        Ok(TaylorModel { y_tilde, g, h: sym, h_diag, h_off })
    }

    pub fn dims(&self) -> usize {
        self.y_tilde.len()
    }
}

/// Batch loss split into its compositional terms, plus the per-dimension
/// linear/non attribution of the off-diagonal term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDecomposition {
    /// `n · loss(ỹ)`.
    pub constant: f64,
    /// `Σ_i (y^(i) − ỹ)ᵀ g`.
    pub grad_term: f64,
    /// `½ Σ_i (y^(i) − ỹ)ᵀ H^diag (y^(i) − ỹ)`.
    pub diag_term: f64,
    /// `½ Σ_i (y^(i) − ỹ)ᵀ H^off (y^(i) − ỹ)`.
    pub off_term: f64,
    /// `Σ_i loss(y^(i))` minus everything above; never evaluated directly.
    pub remainder: f64,
    /// `Σ_i loss(y^(i))`.
    pub total: f64,
    /// `L_d^linear = ‖y_d‖ · H^off_{d,:} · λ_d`, the collinear share of row
    /// `d`'s off-diagonal contribution.
    pub per_dim_linear: Vector,
    /// `L_d^non = H^off_{d,:} · (Y^non − ỹ·1ᵀ) · y_d`, the residual share.
    pub per_dim_non: Vector,
}

/// Per-sample Taylor models split into their batch average and zero-mean
/// deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseTwoModel {
    pub g_bar: Vector,
    pub h_bar: Matrix,
    pub g_prime: Vec<Vector>,
    pub h_prime: Vec<Matrix>,
}

/// Fit a [`TaylorModel`] to `loss` at `y_tilde` by central finite
/// differences.
///
/// Per-coordinate gradient step `step·(1 + |ỹ_j|)`; the Hessian stencil uses
/// ten times that step (second-order stencils lose precision faster). The
/// diagonal uses `(f₊ − 2f₀ + f₋)/h²`, off-diagonal pairs use the four-point
/// cross stencil `/(4·h_j·h_k)`, and the result is symmetrized.
///
/// # Errors
/// * Domain error when `step ≤ 0`.
/// * Evaluation error carrying the offending point when `loss` returns a
///   non-finite value anywhere on the stencil.
pub fn fit_taylor<L: LossFn + ?Sized>(
    loss: &L,
    y_tilde: &Vector,
    step: f64,
) -> Result<TaylorModel> {
    if step <= 0.0 {
        return Err(CoreError::Domain(format!("fit_taylor: step = {step} must be > 0")));
    }
    let dims = y_tilde.len();
    let base = y_tilde.as_slice().to_vec();
    let f0 = eval_checked(loss, &base)?;

    let gstep: Vec<f64> = base.iter().map(|v| step * (1.0 + v.abs())).collect();
    let hstep: Vec<f64> = gstep.iter().map(|h| 10.0 * h).collect();

    let mut g = Vector::zeros(dims);
    for j in 0..dims {
        let mut p = base.clone();
        p[j] = base[j] + gstep[j];
        let fp = eval_checked(loss, &p)?;
        p[j] = base[j] - gstep[j];
        let fm = eval_checked(loss, &p)?;
        g[j] = (fp - fm) / (2.0 * gstep[j]);
    }

    let mut h = Matrix::zeros(dims, dims);
    // Diagonal: three-point second-difference stencil (re-evaluates f at the
    // wider Hessian step).
    let fh0 = f0;
    for j in 0..dims {
        let mut p = base.clone();
        p[j] = base[j] + hstep[j];
        let fp = eval_checked(loss, &p)?;
        p[j] = base[j] - hstep[j];
        let fm = eval_checked(loss, &p)?;
        h.set(j, j, (fp - 2.0 * fh0 + fm) / (hstep[j] * hstep[j]));
    }
    // Off-diagonal: four-point cross stencil on each unordered pair.
    for j in 0..dims {
        for k in (j + 1)..dims {
            let mut p = base.clone();
            let probe = |sj: f64, sk: f64, p: &mut Vec<f64>| -> Result<f64> {
                p[j] = base[j] + sj * hstep[j];
                p[k] = base[k] + sk * hstep[k];
                let v = eval_checked(loss, p);
                p[j] = base[j];
                p[k] = base[k];
                v
            };
            let fpp = probe(1.0, 1.0, &mut p)?;
            let fpm = probe(1.0, -1.0, &mut p)?;
            let fmp = probe(-1.0, 1.0, &mut p)?;
            let fmm = probe(-1.0, -1.0, &mut p)?;
            let hjk = (fpp - fpm - fmp + fmm) / (4.0 * hstep[j] * hstep[k]);
            h.set(j, k, hjk);
            h.set(k, j, hjk);
        }
    }
    TaylorModel::new(y_tilde.clone(), g, h)
}

/// [`fit_taylor`] at the default base step 1e-4.
pub fn fit_taylor_default<L: LossFn + ?Sized>(loss: &L, y_tilde: &Vector) -> Result<TaylorModel> {
    fit_taylor(loss, y_tilde, 1e-4)
}

/// Split the batch loss `Σ_i loss(y^(i))` into the terms of `model`'s
/// expansion, plus the per-dimension linear/non attribution of the
/// off-diagonal term.
///
/// # Errors
/// * Shape error on dimension mismatch.
/// * Degenerate-dimension error when some row `y_d` has zero norm (the
///   projection direction is undefined).
/// * Evaluation error if `loss` is non-finite at `ỹ` or any sample.
pub fn decompose_batch_loss<L: LossFn + ?Sized>(
    model: &TaylorModel,
    y: &Matrix,
    loss: &L,
) -> Result<LossDecomposition> {
    let dims = model.dims();
    if y.rows() != dims {
        return Err(CoreError::Shape(format!(
            "decompose_batch_loss: model has D = {dims}, batch has {} rows",
            y.rows()
        )));
    }
    let n = y.cols();
    let f_tilde = eval_checked(loss, model.y_tilde.as_slice())?;
    let constant = n as f64 * f_tilde;

    let mut grad_term = 0.0;
    let mut diag_term = 0.0;
    let mut off_term = 0.0;
    let mut total = 0.0;
    let mut dev = vec![0.0; dims];
    let mut sample = vec![0.0; dims];
    for i in 0..n {
        for d in 0..dims {
            sample[d] = y.get(d, i);
            dev[d] = sample[d] - model.y_tilde[d];
        }
        total += eval_checked(loss, &sample)?;
        for d in 0..dims {
            grad_term += dev[d] * model.g[d];
            diag_term += 0.5 * model.h_diag.get(d, d) * dev[d] * dev[d];
        }
        for d in 0..dims {
            let mut acc = 0.0;
            for k in 0..dims {
                acc += model.h_off.get(d, k) * dev[k];
            }
            off_term += 0.5 * dev[d] * acc;
        }
    }
    let remainder = total - (constant + grad_term + diag_term + off_term);

    // Per-dimension attribution of the off term. λ_d[j] = o_dᵀ·y_j with
    // o_d = y_d/‖y_d‖; the non part contracts H^off_{d,:} against the
    // projection residue Y^non (shifted by ỹ).
    let mut per_dim_linear = Vector::zeros(dims);
    let mut per_dim_non = Vector::zeros(dims);
    for d in 0..dims {
        let yd = y.row_vector(d);
        let norm_d = yd.norm();
        if norm_d == 0.0 {
            return Err(CoreError::DegenerateDim {
                d,
                reason: "row has zero norm; projection direction undefined".to_string(),
            });
        }
        let (_, y_non) = project_linear(y, d)?;
        let mut lin = 0.0;
        let mut non = 0.0;
        for j in 0..dims {
            let hdj = model.h_off.get(d, j);
            if hdj == 0.0 {
                continue;
            }
            // λ_d[j] = (y_jᵀ·y_d)/‖y_d‖
            let lambda_j = y.row_vector(j).dot(&yd) / norm_d;
            lin += hdj * lambda_j;
            // (Y^non − ỹ1ᵀ) row j dotted with y_d
            let mut row_dot = 0.0;
            for i in 0..n {
                row_dot += (y_non.get(j, i) - model.y_tilde[j]) * yd[i];
            }
            non += hdj * row_dot;
        }
        per_dim_linear[d] = norm_d * lin;
        per_dim_non[d] = non;
    }

    Ok(LossDecomposition {
        constant,
        grad_term,
        diag_term,
        off_term,
        remainder,
        total,
        per_dim_linear,
        per_dim_non,
    })
}

/// Split every row of `y` into its component along row `d` and the residue:
/// `Y = Y^linear + Y^non` with `Y^linear` row `j` equal to `c_j·y_d`,
/// `c_j = (y_jᵀ·y_d)/(y_dᵀ·y_d)`.
///
/// The Gram-ratio form is used instead of normalizing `y_d` first: when a row
/// is an exact floating-point multiple of `y_d`, the ratio and product round
/// to the row itself and its `Y^non` row is exactly zero. Row `d` of `Y^non`
/// is exactly zero always (`c_d = 1`).
///
/// # Errors
/// Degenerate-dimension error when `‖y_d‖ = 0`; index error when `d` is out
/// of range.
pub fn project_linear(y: &Matrix, d: usize) -> Result<(Matrix, Matrix)> {
    if d >= y.rows() {
        return Err(CoreError::IndexOutOfRange { index: d, len: y.rows() });
    }
    let yd = y.row_vector(d);
    let gram = yd.dot(&yd);
    if gram == 0.0 {
        return Err(CoreError::DegenerateDim {
            d,
            reason: "row has zero norm; projection direction undefined".to_string(),
        });
    }
    let (dims, n) = (y.rows(), y.cols());
    let mut y_linear = Matrix::zeros(dims, n);
    let mut y_non = Matrix::zeros(dims, n);
    for j in 0..dims {
        if j == d {
            // c_d = gram/gram = 1 exactly; the residue row is written as
            // exact zeros rather than y_d − y_d.
            for i in 0..n {
                y_linear.set(j, i, yd[i]);
            }
            continue;
        }
        let c = y.row_vector(j).dot(&yd) / gram;
        for i in 0..n {
            let lin = c * yd[i];
            y_linear.set(j, i, lin);
            y_non.set(j, i, y.get(j, i) - lin);
        }
    }
    Ok((y_linear, y_non))
}

/// Average per-sample Taylor models into a shared mean model plus zero-mean
/// deviations: `ḡ = (1/n)Σ g^(i)`, `H̄ = (1/n)Σ H^(i)`, primes are the
/// differences.
///
/// # Errors
/// Shape/domain error when the list is empty or the models disagree on `ỹ`
/// or dimension.
pub fn case2_split(models: &[TaylorModel]) -> Result<CaseTwoModel> {
    let first = models
        .first()
        .ok_or_else(|| CoreError::Domain("case2_split: need at least one model".to_string()))?;
    let dims = first.dims();
    for (i, m) in models.iter().enumerate() {
        if m.dims() != dims {
            return Err(CoreError::Shape(format!(
                "case2_split: model {i} has D = {}, expected {dims}",
                m.dims()
            )));
        }
        if m.y_tilde != first.y_tilde {
            return Err(CoreError::Domain(format!(
                "case2_split: model {i} was expanded at a different ỹ"
            )));
        }
    }
    let n = models.len() as f64;
    let mut g_bar = Vector::zeros(dims);
    let mut h_bar = Matrix::zeros(dims, dims);
    for m in models {
        g_bar = g_bar.add(&m.g);
        h_bar = h_bar.add(&m.h);
    }
    g_bar = g_bar.scaled(1.0 / n);
    h_bar = h_bar.scaled(1.0 / n);
    let g_prime = models.iter().map(|m| m.g.sub(&g_bar)).collect();
    let h_prime = models.iter().map(|m| m.h.sub(&h_bar)).collect();
    Ok(CaseTwoModel { g_bar, h_bar, g_prime, h_prime })
}

/// The scalar sigmoid cross-entropy loss `L(z) = −log(e^z/(1+e^z))`,
/// evaluated as `softplus(−z)` so large `|z|` neither overflows nor
/// catastrophically cancels.
pub fn sigmoid_loss(z: f64) -> f64 {
    softplus(-z)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `m`-th derivative of [`sigmoid_loss`] (`m ≥ 1`).
///
/// Every derivative has the rational form `L^(m)(z) = N_m(e^z)/(1+e^z)^m`
/// with `N_m` a polynomial of degree `m − 1`. Differentiating once more gives
/// the coefficient recurrence
/// `c_j^(m+1) = j·c_j^(m) + (j − 1 − m)·c_{j−1}^(m)` seeded by `N_1 = −1`.
/// The value is evaluated in log-space — each monomial becomes
/// `c_j·exp(j·z − m·softplus(z))`, whose exponent is never positive — so the
/// tails decay to zero instead of overflowing.
///
/// # Errors
/// Domain error when `m = 0` (the loss itself is [`sigmoid_loss`]).
pub fn sigmoid_loss_derivative(m: u32, z: f64) -> Result<f64> {
    if m == 0 {
        return Err(CoreError::Domain(
            "sigmoid_loss_derivative: m = 0 is the loss itself, not a derivative".to_string(),
        ));
    }
    // Build N_m's coefficients: c[j] multiplies e^{jz}.
    let mut c: Vec<f64> = vec![-1.0]; // N_1 = −1
    for order in 1..m {
        let mut next = vec![0.0; c.len() + 1];
        for (j, &cj) in c.iter().enumerate() {
            let j_f = j as f64;
            next[j] += j_f * cj;
            next[j + 1] += (j_f - order as f64) * cj;
        }
        c = next;
    }
    let sp = softplus(z);
    let mut acc = 0.0;
    for (j, &cj) in c.iter().enumerate() {
        if cj == 0.0 {
            continue;
        }
        acc += cj * (j as f64 * z - m as f64 * sp).exp();
    }
    Ok(acc)
}
