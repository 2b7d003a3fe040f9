//! Warm-started solution paths over a `(k̃, λ)` grid.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{e_step, solve, PenalizedFit, SolveOptions};
use crate::error::{Error, Result};
use crate::model::CovMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    /// Candidate factor dimensions.
    pub k_range: Vec<usize>,
    /// Number of nonzero penalty levels after `λ₀ = 0`.
    pub path_length: usize,
    /// Fit `λ₀ = 0` only (dimension selection without sparsity).
    pub unpenalized_only: bool,
    /// Smallest nonzero `λ` as a fraction of `λ_max`.
    pub lambda_min_ratio: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub uniqueness_floor: f64,
    pub restarts: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            k_range: (1..=5).collect(),
            path_length: 10,
            unpenalized_only: false,
            lambda_min_ratio: 1e-3,
            tol: 1e-8,
            max_iter: 2000,
            uniqueness_floor: 1e-6,
            restarts: 1,
        }
    }
}

impl PathConfig {
    pub fn with_k_up_to(k: usize) -> Self {
        Self {
            k_range: (1..=k).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_range.is_empty() || self.k_range.contains(&0) {
            return Err(Error::config("path.k_range", "must be a nonempty set of positive dimensions"));
        }
        if self.path_length == 0 {
            return Err(Error::config("path.path_length", "must be at least 1"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::config("path.tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("path.max_iter", "must be at least 1"));
        }
        if !(self.uniqueness_floor > 0.0 && self.uniqueness_floor.is_finite()) {
            return Err(Error::config("path.uniqueness_floor", "must be positive"));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::config("path.lambda_min_ratio", "must lie in (0, 1)"));
        }
        if self.restarts == 0 {
            return Err(Error::config("path.restarts", "must be at least 1"));
        }
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            floor: self.uniqueness_floor,
        }
    }

    /// Sorted, deduplicated dimensions.
    pub fn dimensions(&self) -> Vec<usize> {
        let mut ks = self.k_range.clone();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Penalty levels for one dimension: `λ₀ = 0` then `l` increasing values
/// ending at `λ_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub k_tilde: usize,
    pub values: Vec<f64>,
    pub lambda_max: f64,
    /// `λ_max` evaluated to zero and was replaced by 1.
    pub fallback: bool,
}

/// Grid for dimension `k_tilde`: solves the unpenalized problem first and
/// derives `λ_max` from it (see [`lambda_grid_from_fit`]).
pub fn lambda_grid(omega_bar: &CovMatrix, k_tilde: usize, l: usize, config: &PathConfig) -> Result<LambdaGrid> {
    let (b, s) = eigen_start(omega_bar, k_tilde, config.uniqueness_floor);
    let fit0 = solve(omega_bar, b, s, 0.0, 0, config.solve_options())?;
    lambda_grid_from_fit(omega_bar, &fit0, l, config.lambda_min_ratio)
}

/// `λ_max = max_{j,q} 2 |E[f yᵀ]_{qj}| / σ̂_j²` at the unpenalized fit: the
/// soft-threshold level at which the coordinate-descent update of every
/// loading, starting from zero, stays at zero. The smooth gradient itself
/// vanishes at `B = 0` for every target, so it cannot set the scale. A
/// diagonal target gives `λ_max = 0`, replaced by 1 and flagged.
pub fn lambda_grid_from_fit(
    omega_bar: &CovMatrix,
    unpenalized: &PenalizedFit,
    l: usize,
    min_ratio: f64,
) -> Result<LambdaGrid> {
    if l == 0 {
        return Err(Error::InvalidValue("path length must be at least 1".into()));
    }
    let s = DVector::from_column_slice(&unpenalized.uniqueness);
    let stats = e_step(&unpenalized.loadings, &s, omega_bar.as_matrix())?;
    let mut lambda_max: f64 = 0.0;
    for j in 0..s.len() {
        for q in 0..stats.cross.nrows() {
            lambda_max = lambda_max.max(2.0 * stats.cross[(q, j)].abs() / s[j]);
        }
    }
    // A diagonal target carries no covariance for the loadings to explain.
    let m = omega_bar.as_matrix();
    let scale = m.diagonal().amax();
    let off_diagonal = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].abs())
        .fold(0.0, f64::max);
    if off_diagonal <= 1e-12 * scale {
        lambda_max = 0.0;
    }
    let fallback = lambda_max.is_nan() || lambda_max <= 1e-10;
    if fallback {
        lambda_max = 1.0;
    }
    let mut values = vec![0.0];
    if l == 1 {
        values.push(lambda_max);
    } else {
        let steps = (l - 1) as f64;
        for i in 0..l {
            values.push(lambda_max * min_ratio.powf(1.0 - i as f64 / steps));
        }
        *values.last_mut().unwrap() = lambda_max;
    }
    Ok(LambdaGrid {
        k_tilde: unpenalized.k_tilde,
        values,
        lambda_max,
        fallback,
    })
}

/// Probabilistic-PCA start: leading eigenvectors scaled by
/// `sqrt(λ_q − ψ)` with `ψ` the mean trailing eigenvalue.
pub(crate) fn eigen_start(omega_bar: &CovMatrix, k: usize, floor: f64) -> (DMatrix<f64>, DVector<f64>) {
    let target = omega_bar.as_matrix();
    let p = target.nrows();
    let eig = SymmetricEigen::new(target.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let psi = if k < p {
        order[k..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (p - k) as f64
    } else {
        0.5 * eig.eigenvalues[order[p - 1]]
    };
    let mut b = DMatrix::zeros(p, k);
    for (q, &idx) in order.iter().enumerate().take(k) {
        let scale = (eig.eigenvalues[idx] - psi).max(1e-6).sqrt();
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // Fix the eigenvector sign so the start does not depend on solver
        // internals: largest-magnitude entry positive.
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        b.set_column(q, &(v * scale));
    }
    let gram = &b * b.transpose();
    let s = DVector::from_fn(p, |j, _| (target[(j, j)] - gram[(j, j)]).max(floor).max(1e-3 * target[(j, j)]));
    (b, s)
}

/// All fits on the grid, ordered by `k̃` then `λ` index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPath {
    pub fits: Vec<PenalizedFit>,
    pub grids: Vec<LambdaGrid>,
    pub omega_bar_digest: String,
}

impl FitPath {
    pub fn get(&self, k_tilde: usize, lambda_index: usize) -> Option<&PenalizedFit> {
        self.fits
            .iter()
            .find(|f| f.k_tilde == k_tilde && f.lambda_index == lambda_index)
    }

    pub fn for_dimension(&self, k_tilde: usize) -> impl Iterator<Item = &PenalizedFit> {
        self.fits.iter().filter(move |f| f.k_tilde == k_tilde)
    }

    pub fn dimensions(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.fits.iter().map(|f| f.k_tilde).collect();
        ks.dedup();
        ks
    }

    pub fn p(&self) -> usize {
        self.fits.first().map_or(0, |f| f.loadings.nrows())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit path serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// One headerless CSV per fit named `loadings_k{k}_l{index}.csv`.
    pub fn write_loadings_csv(&self, dir: &Path) -> Result<()> {
        for f in &self.fits {
            let path = dir.join(format!("loadings_k{}_l{}.csv", f.k_tilde, f.lambda_index));
            crate::datagen::write_matrix_csv(&path, &f.loadings)?;
        }
        Ok(())
    }
}

/// Solves every `(k̃, λ)` point. Dimensions run in parallel; within one
/// dimension each `λ` warm-starts from the previous solution and `λ₀`
/// starts from the eigen start.
pub fn fit_path(omega_bar: &CovMatrix, config: &PathConfig) -> Result<FitPath> {
    config.validate()?;
    omega_bar.cholesky()?;
    let p = omega_bar.p();
    if let Some(&k) = config.k_range.iter().find(|&&k| k > p) {
        return Err(Error::config("path.k_range", format!("dimension {k} exceeds p = {p}")));
    }
    let per_k: Vec<(Vec<PenalizedFit>, Option<LambdaGrid>)> = config
        .dimensions()
        .par_iter()
        .map(|&k| dimension_path(omega_bar, k, config))
        .collect::<Result<_>>()?;
    let mut fits = Vec::new();
    let mut grids = Vec::new();
    for (f, g) in per_k {
        fits.extend(f);
        grids.extend(g);
    }
    Ok(FitPath {
        fits,
        grids,
        omega_bar_digest: omega_bar.digest(),
    })
}

fn dimension_path(omega_bar: &CovMatrix, k: usize, config: &PathConfig) -> Result<(Vec<PenalizedFit>, Option<LambdaGrid>)> {
    let at = |idx: usize| move |e: Error| Error::Path {
        k_tilde: k,
        lambda_index: idx,
        source: Box::new(e),
    };
    let (b, s) = eigen_start(omega_bar, k, config.uniqueness_floor);
    let fit0 = solve_with_restarts(omega_bar, b, s, 0.0, 0, config).map_err(at(0))?;
    if config.unpenalized_only {
        return Ok((vec![fit0], None));
    }
    let grid = lambda_grid_from_fit(omega_bar, &fit0, config.path_length, config.lambda_min_ratio).map_err(at(0))?;
    let mut fits = vec![fit0];
    for (idx, &lambda) in grid.values.iter().enumerate().skip(1) {
        let warm = fits.last().unwrap();
        let b = warm.loadings.clone();
        let s = DVector::from_column_slice(&warm.uniqueness);
        let fit = solve_with_restarts(omega_bar, b, s, lambda, idx, config).map_err(at(idx))?;
        fits.push(fit);
    }
    Ok((fits, Some(grid)))
}

/// The given start plus `restarts − 1` perturbed starts (randomly rotated
/// and jittered, seeded by `(k̃, λ index, restart)`); lowest objective wins.
fn solve_with_restarts(
    omega_bar: &CovMatrix,
    b: DMatrix<f64>,
    s: DVector<f64>,
    lambda: f64,
    idx: usize,
    config: &PathConfig,
) -> Result<PenalizedFit> {
    let opts = config.solve_options();
    let mut best = solve(omega_bar, b.clone(), s.clone(), lambda, idx, opts)?;
    let (p, k) = b.shape();
    for r in 1..config.restarts {
        let seed = ((k as u64) << 40) ^ ((idx as u64) << 20) ^ r as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = raw.qr().q();
        let scale = b.amax().max(0.1);
        let jitter = DMatrix::from_fn(p, k, |_, _| 0.1 * scale * rng.sample::<f64, _>(StandardNormal));
        let start = &b * q + jitter;
        let cand = solve(omega_bar, start, s.clone(), lambda, idx, opts)?;
        if cand.objective < best.objective {
            best = cand;
        }
    }
    Ok(best)
}
