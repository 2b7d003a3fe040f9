//! ℓ1-penalized factor analysis against a fixed target covariance.
//!
//! Minimizes `log|Ω̃| + tr(Ω̃⁻¹ Ω̄) + λ‖B̃‖₁` over `Ω̃ = B̃B̃ᵀ + Σ̃` for a given
//! factor dimension, by EM: the target `Ω̄` plays the role of the observed
//! second-moment matrix and the factors are the missing data. The M-step for
//! the loadings is a lasso problem per row, solved by cyclic coordinate
//! descent with soft thresholding.

mod path;

pub use path::{fit_path, lambda_grid, lambda_grid_from_fit, FitPath, LambdaGrid, PathConfig};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{chol_log_det, symmetrize, CovMatrix, LoadingsMatrix, UniquenessDiag};

/// Column max-abs below this counts as a zeroed column.
pub const ZERO_COLUMN_TOL: f64 = 1e-12;

const CD_MAX_SWEEPS: usize = 100;
const CD_TOL: f64 = 1e-12;
const M2_RIDGE: f64 = 1e-10;

/// One converged (or iteration-capped) point of the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedFit {
    #[serde(with = "rows")]
    pub loadings: DMatrix<f64>,
    pub uniqueness: Vec<f64>,
    pub k_tilde: usize,
    pub lambda: f64,
    pub lambda_index: usize,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub zero_columns: Vec<usize>,
    pub effective_k: usize,
    /// Some `σ̃_j²` sits on the uniqueness floor.
    pub floor_active: bool,
    /// The factor second-moment matrix needed a ridge at some iteration.
    pub ridged: bool,
}

impl PenalizedFit {
    pub fn loadings_matrix(&self) -> LoadingsMatrix {
        LoadingsMatrix::new(self.loadings.clone()).expect("fit loadings are finite")
    }

    pub fn uniqueness_diag(&self) -> UniquenessDiag {
        UniquenessDiag::from_slice(&self.uniqueness).expect("fit uniqueness is above the floor")
    }

    /// `Ω̂ = B̂B̂ᵀ + Σ̂`.
    pub fn covariance(&self) -> CovMatrix {
        crate::model::assemble_cov(&self.loadings_matrix(), &self.uniqueness_diag()).expect("shapes agree")
    }

    /// Fits with a zeroed column are dropped from the loss summary.
    pub fn has_zero_columns(&self) -> bool {
        !self.zero_columns.is_empty()
    }
}

/// Penalized objective `log|BBᵀ+Σ| + tr((BBᵀ+Σ)⁻¹ Ω̄) + λ‖B‖₁`.
pub fn objective(
    loadings: &LoadingsMatrix,
    uniqueness: &UniquenessDiag,
    omega_bar: &CovMatrix,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidValue(format!("lambda must be >= 0, got {lambda}")));
    }
    check_shapes(loadings.as_matrix(), uniqueness.as_vector(), omega_bar)?;
    objective_raw(loadings.as_matrix(), uniqueness.as_vector(), omega_bar.as_matrix(), lambda)
}

pub(crate) fn objective_raw(b: &DMatrix<f64>, s: &DVector<f64>, target: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let mut omega = b * b.transpose();
    for j in 0..s.len() {
        omega[(j, j)] += s[j];
    }
    let chol = Cholesky::new(symmetrize(omega)).ok_or(Error::NotPositiveDefinite("fitted covariance"))?;
    let fit = chol_log_det(&chol) + chol.solve(target).trace();
    Ok(fit + lambda * b.iter().map(|v| v.abs()).sum::<f64>())
}

/// `sign(z) · max(|z| − γ, 0)`.
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Expected complete-data sufficient statistics at the current iterate.
#[derive(Debug, Clone)]
pub struct EStep {
    /// `k × p` cross moments `E[f yᵀ] = BᵀΔΩ̄`.
    pub cross: DMatrix<f64>,
    /// `k × k` factor second moments `I − BᵀΔB + BᵀΔΩ̄ΔB`.
    pub second: DMatrix<f64>,
    pub ridged: bool,
}

/// E-step with `Δ = (BBᵀ + Σ)⁻¹`, via `BᵀΔ = (I + BᵀΣ⁻¹B)⁻¹BᵀΣ⁻¹`.
pub fn e_step(b: &DMatrix<f64>, s: &DVector<f64>, target: &DMatrix<f64>) -> Result<EStep> {
    let k = b.ncols();
    let mut scaled_t = b.transpose();
    for (j, mut col) in scaled_t.column_iter_mut().enumerate() {
        col /= s[j];
    }
    let mut inner = &scaled_t * b;
    for q in 0..k {
        inner[(q, q)] += 1.0;
    }
    let inner = Cholesky::new(symmetrize(inner)).ok_or(Error::NotPositiveDefinite("I + BᵀΣ⁻¹B"))?;
    // G = BᵀΔ, and I − GB equals (I + BᵀΣ⁻¹B)⁻¹.
    let g = inner.solve(&scaled_t);
    let cross = &g * target;
    let mut second = symmetrize(inner.inverse() + &cross * g.transpose());
    let mut ridged = false;
    if Cholesky::new(second.clone()).is_none() {
        for q in 0..k {
            second[(q, q)] += M2_RIDGE;
        }
        ridged = true;
    }
    Ok(EStep { cross, second, ridged })
}

/// Result of one EM sweep.
#[derive(Debug, Clone)]
pub struct EmUpdate {
    pub loadings: DMatrix<f64>,
    pub uniqueness: DVector<f64>,
    pub ridged: bool,
}

/// One EM sweep: E-step, per-row lasso coordinate descent for the loadings
/// with the current `σ_j²`, then the closed-form `σ_j²` update clamped to
/// `floor`.
pub fn em_step(
    loadings: &LoadingsMatrix,
    uniqueness: &UniquenessDiag,
    omega_bar: &CovMatrix,
    lambda: f64,
    floor: f64,
) -> Result<EmUpdate> {
    check_shapes(loadings.as_matrix(), uniqueness.as_vector(), omega_bar)?;
    em_step_raw(loadings.as_matrix(), uniqueness.as_vector(), omega_bar.as_matrix(), lambda, floor)
}

pub(crate) fn em_step_raw(
    b: &DMatrix<f64>,
    s: &DVector<f64>,
    target: &DMatrix<f64>,
    lambda: f64,
    floor: f64,
) -> Result<EmUpdate> {
    let (p, k) = b.shape();
    let stats = e_step(b, s, target)?;
    let m2 = &stats.second;
    let mut next_b = b.clone();
    let mut next_s = s.clone();
    let mut row = DVector::zeros(k);
    for j in 0..p {
        let c = stats.cross.column(j);
        for q in 0..k {
            row[q] = b[(j, q)];
        }
        let gamma = 0.5 * lambda * s[j];
        lasso_row(m2, &c.into_owned(), gamma, &mut row);
        let bc = row.dot(&c);
        let quad = (m2 * &row).dot(&row);
        next_s[j] = (target[(j, j)] - 2.0 * bc + quad).max(floor);
        for q in 0..k {
            next_b[(j, q)] = row[q];
        }
    }
    Ok(EmUpdate {
        loadings: next_b,
        uniqueness: next_s,
        ridged: stats.ridged,
    })
}

/// Cyclic coordinate descent on `bᵀ M₂ b − 2 cᵀ b + 2γ‖b‖₁`, which is the
/// row surrogate `(1/σ²)(bᵀM₂b − 2cᵀb) + λ‖b‖₁` scaled by `σ²` with
/// `γ = λσ²/2`. Each coordinate moves to
/// `S(c_q − Σ_{r≠q} M₂[q,r] b_r, γ) / M₂[q,q]`.
fn lasso_row(m2: &DMatrix<f64>, c: &DVector<f64>, gamma: f64, b: &mut DVector<f64>) {
    let k = b.len();
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for q in 0..k {
            let mut z = c[q];
            for r in 0..k {
                if r != q {
                    z -= m2[(q, r)] * b[r];
                }
            }
            let updated = soft_threshold(z, gamma) / m2[(q, q)];
            max_change = max_change.max((updated - b[q]).abs());
            max_abs = max_abs.max(updated.abs());
            b[q] = updated;
        }
        if max_change <= CD_TOL * max_abs.max(1.0) {
            break;
        }
    }
}

/// Settings for a single solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub floor: f64,
}

/// Iterates [`em_step`] from the given start until the relative objective
/// change drops below `tol` or `max_iter` sweeps have run.
pub fn solve(
    omega_bar: &CovMatrix,
    start_b: DMatrix<f64>,
    start_s: DVector<f64>,
    lambda: f64,
    lambda_index: usize,
    opts: SolveOptions,
) -> Result<PenalizedFit> {
    let target = omega_bar.as_matrix();
    let mut b = start_b;
    let mut s = start_s.map(|v| v.max(opts.floor));
    let mut obj = objective_raw(&b, &s, target, lambda)?;
    let mut converged = false;
    let mut ridged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let upd = em_step_raw(&b, &s, target, lambda, opts.floor)?;
        iterations += 1;
        ridged |= upd.ridged;
        let next = objective_raw(&upd.loadings, &upd.uniqueness, target, lambda)?;
        b = upd.loadings;
        s = upd.uniqueness;
        let change = (obj - next).abs();
        obj = next;
        if change <= opts.tol * obj.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(finish_fit(b, s, lambda, lambda_index, obj, iterations, converged, ridged, opts.floor))
}

#[allow(clippy::too_many_arguments)]
fn finish_fit(
    b: DMatrix<f64>,
    s: DVector<f64>,
    lambda: f64,
    lambda_index: usize,
    objective: f64,
    iterations: usize,
    converged: bool,
    ridged: bool,
    floor: f64,
) -> PenalizedFit {
    let k_tilde = b.ncols();
    let zero_columns: Vec<usize> = (0..k_tilde)
        .filter(|&q| b.column(q).iter().all(|v| v.abs() < ZERO_COLUMN_TOL))
        .collect();
    let floor_active = s.iter().any(|&v| v <= floor);
    PenalizedFit {
        effective_k: k_tilde - zero_columns.len(),
        zero_columns,
        loadings: b,
        uniqueness: s.as_slice().to_vec(),
        k_tilde,
        lambda,
        lambda_index,
        objective,
        iterations,
        converged,
        floor_active,
        ridged,
    }
}

/// Analytic gradient of the smooth part `log|Ω̃| + tr(Ω̃⁻¹Ω̄)`: with
/// `W = Δ − ΔΩ̄Δ`, it is `2WB` for the loadings and `diag(W)` for `Σ̃`.
pub fn smooth_gradient(
    loadings: &LoadingsMatrix,
    uniqueness: &UniquenessDiag,
    omega_bar: &CovMatrix,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_shapes(loadings.as_matrix(), uniqueness.as_vector(), omega_bar)?;
    let fit = crate::model::assemble_cov(loadings, uniqueness)?;
    let delta = fit.cholesky()?.inverse();
    let w = &delta - &delta * omega_bar.as_matrix() * &delta;
    Ok((2.0 * &w * loadings.as_matrix(), w.diagonal()))
}

fn check_shapes(b: &DMatrix<f64>, s: &DVector<f64>, target: &CovMatrix) -> Result<()> {
    if b.nrows() != s.len() || s.len() != target.p() {
        return Err(Error::Dimension(format!(
            "loadings {}x{}, uniqueness {}, target {}x{}",
            b.nrows(),
            b.ncols(),
            s.len(),
            target.p(),
            target.p()
        )));
    }
    Ok(())
}

/// Serde adapter for matrices as nested row arrays.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}
