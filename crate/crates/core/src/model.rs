//! Covariance algebra for the Gaussian factor model `y = B f + e`.
//!
//! The implied covariance is `Ω = B Bᵀ + Σ` with `Σ` diagonal. Everything in
//! this module is a pure function of its inputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative tolerance used when validating symmetry of covariance inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A `p × k` matrix of factor loadings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingsMatrix(DMatrix<f64>);

impl LoadingsMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "loadings must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("loadings contain non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(p: usize, k: usize) -> Self {
        Self(DMatrix::zeros(p, k))
    }

    /// Builds a matrix from row-major values.
    pub fn from_row_slice(p: usize, k: usize, values: &[f64]) -> Result<Self> {
        if values.len() != p * k {
            return Err(Error::Dimension(format!(
                "expected {} loadings for {p}x{k}, got {}",
                p * k,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(p, k, values))
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p() * self.k());
        for j in 0..self.p() {
            for q in 0..self.k() {
                out.push(self.0[(j, q)]);
            }
        }
        out
    }

    /// `B Bᵀ`, symmetrized.
    pub fn gram(&self) -> DMatrix<f64> {
        let g = &self.0 * self.0.transpose();
        symmetrize(g)
    }

    /// Indices of columns whose largest absolute entry is below `tol`.
    pub fn zero_columns(&self, tol: f64) -> Vec<usize> {
        (0..self.k())
            .filter(|&q| self.0.column(q).iter().all(|v| v.abs() < tol))
            .collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }
}

/// Strictly positive idiosyncratic variances, the diagonal of `Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessDiag(DVector<f64>);

impl UniquenessDiag {
    pub fn new(variances: DVector<f64>) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::Dimension("uniqueness vector is empty".into()));
        }
        if let Some((j, v)) = variances
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidValue(format!(
                "uniqueness entry {j} must be positive and finite, got {v}"
            )));
        }
        Ok(Self(variances))
    }

    pub fn from_slice(variances: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(variances))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// A symmetric `p × p` covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(DMatrix<f64>);

impl CovMatrix {
    /// Validates squareness, finiteness and symmetry (relative `1e-12`).
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "covariance must be square and non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("covariance contains non-finite entries".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let p = values.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidValue(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(values))
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    pub fn from_row_slice(p: usize, values: &[f64]) -> Result<Self> {
        if values.len() != p * p {
            return Err(Error::Dimension(format!(
                "expected {} entries for {p}x{p}, got {}",
                p * p,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(p, p, values))
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    /// Cholesky factor; failure means the matrix is not positive definite.
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.0.clone()).ok_or(Error::NotPositiveDefinite("cholesky failed"))
    }

    pub fn log_det(&self) -> Result<f64> {
        Ok(chol_log_det(&self.cholesky()?))
    }

    /// SHA-256 of the little-endian row-major entries, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.p() as u64).to_le_bytes());
        for i in 0..self.p() {
            for j in 0..self.p() {
                hasher.update(self.0[(i, j)].to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Retained posterior draws of `(B, Σ)` at a fixed working dimension `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    loadings: Vec<LoadingsMatrix>,
    uniqueness: Vec<UniquenessDiag>,
    provenance: String,
}

impl PosteriorDraws {
    pub fn new(
        loadings: Vec<LoadingsMatrix>,
        uniqueness: Vec<UniquenessDiag>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if loadings.is_empty() {
            return Err(Error::InvalidValue("posterior draws must contain at least one draw".into()));
        }
        if loadings.len() != uniqueness.len() {
            return Err(Error::Dimension(format!(
                "{} loadings draws but {} uniqueness draws",
                loadings.len(),
                uniqueness.len()
            )));
        }
        let (p, k) = (loadings[0].p(), loadings[0].k());
        for (m, (b, s)) in loadings.iter().zip(&uniqueness).enumerate() {
            if b.p() != p || b.k() != k || s.len() != p {
                return Err(Error::Dimension(format!(
                    "draw {m} has shape ({}x{}, {}) but draw 0 has ({p}x{k}, {p})",
                    b.p(),
                    b.k(),
                    s.len()
                )));
            }
        }
        Ok(Self {
            loadings,
            uniqueness,
            provenance: provenance.into(),
        })
    }

    pub fn p(&self) -> usize {
        self.loadings[0].p()
    }

    pub fn k(&self) -> usize {
        self.loadings[0].k()
    }

    pub fn len(&self) -> usize {
        self.loadings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loadings.is_empty()
    }

    pub fn loadings(&self) -> &[LoadingsMatrix] {
        &self.loadings
    }

    pub fn uniqueness(&self) -> &[UniquenessDiag] {
        &self.uniqueness
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `Ω_(m) = B_(m) B_(m)ᵀ + Σ_(m)`.
    pub fn draw_cov(&self, m: usize) -> CovMatrix {
        assemble_unchecked(&self.loadings[m], &self.uniqueness[m])
    }

    /// Applies `f` to every loadings draw, keeping the uniqueness draws.
    pub fn map_loadings(&self, f: impl Fn(&LoadingsMatrix) -> LoadingsMatrix) -> Result<Self> {
        Self::new(
            self.loadings.iter().map(f).collect(),
            self.uniqueness.clone(),
            self.provenance.clone(),
        )
    }
}

/// `B Bᵀ + diag(S)`.
pub fn assemble_cov(loadings: &LoadingsMatrix, uniqueness: &UniquenessDiag) -> Result<CovMatrix> {
    if loadings.p() != uniqueness.len() {
        return Err(Error::Dimension(format!(
            "loadings have {} rows but uniqueness has {} entries",
            loadings.p(),
            uniqueness.len()
        )));
    }
    Ok(assemble_unchecked(loadings, uniqueness))
}

fn assemble_unchecked(loadings: &LoadingsMatrix, uniqueness: &UniquenessDiag) -> CovMatrix {
    let mut omega = loadings.gram();
    for (j, s) in uniqueness.as_slice().iter().enumerate() {
        omega[(j, j)] += s;
    }
    CovMatrix(omega)
}

/// Gaussian negative log-likelihood loss `log|fit| + tr(fit⁻¹ target)`.
pub fn stein_loss(fit: &CovMatrix, target: &CovMatrix) -> Result<f64> {
    SteinEvaluator::new(fit)?.loss(target)
}

/// Evaluates the loss for one fixed fit against many targets, factoring the
/// fit once.
#[derive(Debug, Clone)]
pub struct SteinEvaluator {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    inverse: DMatrix<f64>,
}

impl SteinEvaluator {
    pub fn new(fit: &CovMatrix) -> Result<Self> {
        let chol = fit.cholesky()?;
        let log_det = chol_log_det(&chol);
        let inverse = chol.inverse();
        Ok(Self {
            chol,
            log_det,
            inverse,
        })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn p(&self) -> usize {
        self.inverse.nrows()
    }

    pub fn loss(&self, target: &CovMatrix) -> Result<f64> {
        if target.p() != self.p() {
            return Err(Error::Dimension(format!(
                "fit is {0}x{0} but target is {1}x{1}",
                self.p(),
                target.p()
            )));
        }
        let solved = self.chol.solve(target.as_matrix());
        Ok(self.log_det + solved.trace())
    }

    /// Loss against a target given in factored form, `tr(fit⁻¹ (B Bᵀ + Σ))`
    /// computed as `‖L⁻¹ B‖² + Σ_j (fit⁻¹)_jj σ_j²`.
    pub fn loss_factored(&self, loadings: &LoadingsMatrix, uniqueness: &UniquenessDiag) -> f64 {
        let l = self.chol.l_dirty();
        let whitened = l
            .solve_lower_triangular(loadings.as_matrix())
            .expect("cholesky factor has a positive diagonal");
        let diag: f64 = uniqueness
            .as_slice()
            .iter()
            .enumerate()
            .map(|(j, s)| self.inverse[(j, j)] * s)
            .sum();
        self.log_det + whitened.norm_squared() + diag
    }
}

/// `(1/M) Σ_m (B_(m) B_(m)ᵀ + Σ_(m))`.
pub fn posterior_mean_cov(draws: &PosteriorDraws) -> CovMatrix {
    let p = draws.p();
    let mut acc = DMatrix::zeros(p, p);
    for (b, s) in draws.loadings().iter().zip(draws.uniqueness()) {
        acc += b.gram();
        for (j, v) in s.as_slice().iter().enumerate() {
            acc[(j, j)] += v;
        }
    }
    acc /= draws.len() as f64;
    CovMatrix(symmetrize(acc))
}

/// Root mean squared error over all `p²` entries.
pub fn rmse(est: &CovMatrix, truth: &CovMatrix) -> Result<f64> {
    if est.p() != truth.p() {
        return Err(Error::Dimension(format!(
            "estimate is {0}x{0} but truth is {1}x{1}",
            est.p(),
            truth.p()
        )));
    }
    let p = est.p() as f64;
    let sq: f64 = (est.as_matrix() - truth.as_matrix()).norm_squared();
    Ok((sq / (p * p)).sqrt())
}

/// Rotates `raw` (p × k, k ≤ p) to positive lower triangular form `L = raw Q`
/// with `Q` orthogonal, so `L Lᵀ = raw rawᵀ`. Uses a QR factorization of
/// `rawᵀ` followed by a sign flip of each column to make the diagonal
/// positive.
pub fn plt_rotate(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = raw.shape();
    assert!(k <= p, "PLT rotation needs k <= p");
    let r = raw.transpose().qr().r();
    let mut lower = r.transpose();
    for q in 0..k {
        if lower[(q, q)] < 0.0 {
            lower.column_mut(q).neg_mut();
        }
        for j in 0..q {
            lower[(j, q)] = 0.0;
        }
    }
    lower
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

impl From<CovMatrix> for DMatrix<f64> {
    fn from(c: CovMatrix) -> Self {
        c.0
    }
}
