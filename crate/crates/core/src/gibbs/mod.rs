//! Gibbs sampler for the Gaussian factor model.
//!
//! Two loadings priors are built in: independent `N(0, η)` entries with no
//! constraint, and the positive lower triangular (PLT) restriction where
//! `b_jq = 0` for `q > j` and the diagonal is truncated to be positive.
//! Uniqueness variances and `η` get inverse-gamma priors. Factors are sampled
//! explicitly every sweep.

mod io;
pub mod truncnorm;

pub use io::{read_draws, read_draws_csv, write_draws, write_draws_csv, DRAWS_MAGIC, DRAWS_VERSION};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{plt_rotate, LoadingsMatrix, PosteriorDraws, UniquenessDiag};
use crate::rng::{stream_rng, Stream};

const INIT_UNIQUENESS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Unconstrained,
    Plt,
}

/// Inverse-gamma `(shape, scale)` hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite() && self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(field, "inverse-gamma shape and scale must be positive"));
        }
        Ok(())
    }

    /// Posterior draw after adding `extra_shape` and `extra_scale`.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, extra_shape: f64, extra_scale: f64) -> f64 {
        let shape = self.shape + extra_shape;
        let scale = self.scale + extra_scale;
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        scale / g
    }
}

impl Default for InvGamma {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub family: PriorFamily,
    /// Prior on the common loadings variance `η`.
    pub loading_variance: InvGamma,
    /// Prior on each uniqueness variance `σ_j²`.
    pub uniqueness: InvGamma,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            family: PriorFamily::Unconstrained,
            loading_variance: InvGamma::default(),
            uniqueness: InvGamma::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        self.loading_variance.validate("sampler.prior.loading_variance")?;
        self.uniqueness.validate("sampler.prior.uniqueness")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub k: usize,
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            iterations: 10_000,
            burnin: 5_000,
            thin: 1,
            seed: 1,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("sampler.chain.k", "must be at least 1"));
        }
        if self.thin == 0 {
            return Err(Error::config("sampler.chain.thin", "must be at least 1"));
        }
        if self.burnin >= self.iterations {
            return Err(Error::config(
                "sampler.chain.burnin",
                format!("must be below iterations ({} >= {})", self.burnin, self.iterations),
            ));
        }
        if self.retained() == 0 {
            return Err(Error::config("sampler.chain.thin", "no draws would be retained"));
        }
        Ok(())
    }

    /// Number of retained draws, `(iterations − burnin) / thin`.
    pub fn retained(&self) -> usize {
        self.iterations.saturating_sub(self.burnin) / self.thin.max(1)
    }
}

/// Runs one chain and returns the retained draws. Centers `data` in place if
/// it is not centered yet.
pub fn run_gibbs(data: &mut Dataset, prior: &PriorConfig, chain: &ChainConfig) -> Result<PosteriorDraws> {
    prior.validate()?;
    chain.validate()?;
    if chain.k > data.p() {
        return Err(Error::config(
            "sampler.chain.k",
            format!("working dimension {} exceeds p = {}", chain.k, data.p()),
        ));
    }
    if !data.is_centered() {
        data.center();
    }
    let mut state = GibbsState::initialize(data, prior, chain.k);
    let mut rng = stream_rng(chain.seed, Stream::Sampler);
    let mut loadings = Vec::with_capacity(chain.retained());
    let mut uniqueness = Vec::with_capacity(chain.retained());
    for sweep in 1..=chain.iterations {
        state.sweep(data.rows(), &mut rng, sweep)?;
        if sweep > chain.burnin && (sweep - chain.burnin).is_multiple_of(chain.thin) {
            loadings.push(LoadingsMatrix::new(state.loadings.clone())?);
            uniqueness.push(UniquenessDiag::new(state.uniqueness.clone())?);
        }
    }
    let label = match prior.family {
        PriorFamily::Unconstrained => "gibbs/unconstrained",
        PriorFamily::Plt => "gibbs/plt",
    };
    PosteriorDraws::new(loadings, uniqueness, label)
}

/// Current values of every block of the chain.
#[derive(Debug, Clone)]
pub struct GibbsState {
    pub prior: PriorConfig,
    pub loadings: DMatrix<f64>,
    pub uniqueness: DVector<f64>,
    pub eta: f64,
    pub factors: DMatrix<f64>,
}

impl GibbsState {
    /// Loadings from the leading eigenpairs of the sample second moment,
    /// `B = V_k Λ_k^{1/2}`; uniqueness from the residual diagonal.
    pub fn initialize(data: &Dataset, prior: &PriorConfig, k: usize) -> Self {
        let p = data.p();
        let s = data.second_moment();
        let eig = SymmetricEigen::new(s.clone());
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut b = DMatrix::zeros(p, k);
        for (q, &idx) in order.iter().take(k).enumerate() {
            let scale = eig.eigenvalues[idx].max(0.0).sqrt();
            b.set_column(q, &(eig.eigenvectors.column(idx) * scale));
        }
        if prior.family == PriorFamily::Plt {
            b = plt_rotate(&b);
            for q in 0..k {
                if b[(q, q)] <= 0.0 {
                    b[(q, q)] = 1e-3;
                }
            }
        }
        let gram = &b * b.transpose();
        // Shrink the start slightly so the residual diagonal stays positive.
        b *= 0.9;
        let uniqueness =
            DVector::from_fn(p, |j, _| (s[(j, j)] - 0.81 * gram[(j, j)]).max(INIT_UNIQUENESS_FLOOR));
        let eta = (b.norm_squared() / (p * k) as f64).max(1e-2);
        Self {
            prior: *prior,
            loadings: b,
            uniqueness,
            eta,
            factors: DMatrix::zeros(data.n(), k),
        }
    }

    pub fn k(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, y: &DMatrix<f64>, rng: &mut R, sweep: usize) -> Result<()> {
        self.sample_factors(y, rng);
        check_finite(self.factors.iter(), sweep, "factors")?;
        self.sample_loadings(y, rng)
            .map_err(|_| Error::Sampler { sweep, block: "loadings" })?;
        check_finite(self.loadings.iter(), sweep, "loadings")?;
        self.sample_uniqueness(y, rng);
        if self.uniqueness.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Sampler { sweep, block: "uniqueness" });
        }
        self.sample_eta(rng);
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Sampler { sweep, block: "eta" });
        }
        Ok(())
    }

    /// `f_i ~ N(V Bᵀ Σ⁻¹ y_i, V)`, `V = (I + Bᵀ Σ⁻¹ B)⁻¹`.
    pub fn sample_factors<R: Rng + ?Sized>(&mut self, y: &DMatrix<f64>, rng: &mut R) {
        let k = self.k();
        let n = y.nrows();
        let mut scaled = self.loadings.clone();
        for (j, mut row) in scaled.row_iter_mut().enumerate() {
            row /= self.uniqueness[j];
        }
        // precision = I + Bᵀ Σ⁻¹ B
        let mut precision = self.loadings.transpose() * &scaled;
        for q in 0..k {
            precision[(q, q)] += 1.0;
        }
        let chol = match Cholesky::new(precision) {
            Some(c) => c,
            None => {
                self.factors.fill(f64::NAN);
                return;
            }
        };
        // Row i of `y Σ⁻¹ B` is the canonical mean parameter of f_i.
        let canonical = y * &scaled;
        let mean = chol.solve(&canonical.transpose());
        let z = DMatrix::from_fn(k, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = chol
            .l_dirty()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("cholesky diagonal is positive");
        self.factors = (mean + noise).transpose();
    }

    /// Row-wise conjugate normal update of the loadings.
    pub fn sample_loadings<R: Rng + ?Sized>(&mut self, y: &DMatrix<f64>, rng: &mut R) -> Result<()> {
        let k = self.k();
        let p = y.ncols();
        let ftf = self.factors.transpose() * &self.factors;
        let fty = self.factors.transpose() * y;
        let prior_precision = self.eta.recip();
        for j in 0..p {
            let s2 = self.uniqueness[j];
            let active = match self.prior.family {
                PriorFamily::Plt => (j + 1).min(k),
                PriorFamily::Unconstrained => k,
            };
            let mut precision = DMatrix::from_fn(active, active, |a, b| ftf[(a, b)] / s2);
            for q in 0..active {
                precision[(q, q)] += prior_precision;
            }
            let rhs = DVector::from_fn(active, |q, _| fty[(q, j)] / s2);
            let constrained = self.prior.family == PriorFamily::Plt && j < k;
            let row = if constrained {
                sample_plt_row(&precision, &rhs, self.loadings[(j, j)], rng)
            } else {
                sample_gaussian(&precision, &rhs, rng)
            };
            let Some(row) = row else {
                return Err(Error::Sampler { sweep: 0, block: "loadings" });
            };
            for q in 0..k {
                self.loadings[(j, q)] = if q < active { row[q] } else { 0.0 };
            }
        }
        Ok(())
    }

    /// `σ_j² ~ IG(a + n/2, b + ‖y_j − F b_j‖²/2)`.
    pub fn sample_uniqueness<R: Rng + ?Sized>(&mut self, y: &DMatrix<f64>, rng: &mut R) {
        let n = y.nrows() as f64;
        let fitted = &self.factors * self.loadings.transpose();
        for j in 0..y.ncols() {
            let rss: f64 = y.column(j).iter().zip(fitted.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            self.uniqueness[j] = self.prior.uniqueness.sample(rng, 0.5 * n, 0.5 * rss);
        }
    }

    /// `η ~ IG(a + d/2, b + Σ b²/2)` over the `d` free loadings.
    pub fn sample_eta<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (p, k) = self.loadings.shape();
        let free = match self.prior.family {
            PriorFamily::Unconstrained => p * k,
            PriorFamily::Plt => p * k - k * (k - 1) / 2,
        };
        let ss = self.loadings.norm_squared();
        self.eta = self.prior.loading_variance.sample(rng, 0.5 * free as f64, 0.5 * ss);
    }
}

/// Draw from `N(Λ⁻¹ h, Λ⁻¹)` given precision `Λ` and canonical mean `h`.
fn sample_gaussian<R: Rng + ?Sized>(precision: &DMatrix<f64>, h: &DVector<f64>, rng: &mut R) -> Option<DVector<f64>> {
    let chol: Cholesky<f64, Dyn> = Cholesky::new(precision.clone())?;
    let mean = chol.solve(h);
    let z = DVector::from_fn(h.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol.l_dirty().transpose().solve_upper_triangular(&z)?;
    Some(mean + noise)
}

/// PLT row `j < k`: the free block `0..j` given the diagonal, then the
/// diagonal given the free block from its positive-truncated conditional.
fn sample_plt_row<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    h: &DVector<f64>,
    current_diag: f64,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let d = precision.nrows() - 1;
    let mut row = DVector::zeros(d + 1);
    let diag_prev = if current_diag > 0.0 { current_diag } else { 1e-3 };
    if d > 0 {
        let lam_ff = precision.view((0, 0), (d, d)).into_owned();
        let lam_fd = precision.view((0, d), (d, 1)).column(0).into_owned();
        let h_free = h.rows(0, d) - lam_fd * diag_prev;
        let free = sample_gaussian(&lam_ff, &h_free, rng)?;
        row.rows_mut(0, d).copy_from(&free);
    }
    let lam_dd = precision[(d, d)];
    let cross: f64 = (0..d).map(|q| precision[(d, q)] * row[q]).sum();
    let mean = (h[d] - cross) / lam_dd;
    if !(mean.is_finite() && lam_dd > 0.0) {
        return None;
    }
    row[d] = truncnorm::sample_positive(rng, mean, lam_dd.sqrt().recip());
    Some(row)
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>, sweep: usize, block: &'static str) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Sampler { sweep, block })
    }
}

/// Convenience handle for tests and callers that want the sampler's RNG.
pub fn sampler_rng(seed: u64) -> ChaCha20Rng {
    stream_rng(seed, Stream::Sampler)
}
