//! Posterior loss summary over a fit path and the selection rule.
//!
//! Every fit `Ω̂_{k̃,λ}` is scored against each posterior draw
//! `Ω_(m) = B_(m)B_(m)ᵀ + Σ_(m)`. The working-dimension unpenalized fit (the
//! full model) supplies a loss distribution whose `q`-quantile is the
//! acceptance threshold; the selection is the smallest feasible `k̃` and,
//! within it, the largest feasible `λ`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoadingsMatrix, PosteriorDraws, SteinEvaluator};
use crate::pfa::{FitPath, PenalizedFit};

/// Losses of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEntry {
    pub k_tilde: usize,
    pub lambda_index: usize,
    pub lambda: f64,
    /// `None` for excluded fits.
    pub expected_loss: Option<f64>,
    pub excluded: bool,
    pub sparsity: f64,
    pub per_draw: Option<Vec<f64>>,
}

impl LossEntry {
    pub fn key(&self) -> (usize, usize) {
        (self.k_tilde, self.lambda_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrid {
    pub entries: Vec<LossEntry>,
    pub full_model_key: (usize, usize),
    pub draws: usize,
}

impl LossGrid {
    pub fn get(&self, k_tilde: usize, lambda_index: usize) -> Option<&LossEntry> {
        self.entries.iter().find(|e| e.key() == (k_tilde, lambda_index))
    }

    pub fn full_model(&self) -> &LossEntry {
        self.get(self.full_model_key.0, self.full_model_key.1)
            .expect("grid always holds its full model")
    }

    /// Per-draw losses of the full model.
    pub fn full_model_losses(&self) -> &[f64] {
        self.full_model()
            .per_draw
            .as_deref()
            .expect("full-model losses are always retained")
    }
}

/// Loss grid keeping per-draw losses for the full model only.
pub fn loss_grid(path: &FitPath, draws: &PosteriorDraws) -> Result<LossGrid> {
    loss_grid_with(path, draws, false)
}

/// Loss grid; `retain_all` keeps per-draw losses for every unexcluded fit.
pub fn loss_grid_with(path: &FitPath, draws: &PosteriorDraws, retain_all: bool) -> Result<LossGrid> {
    let k = draws.k();
    let full_model_key = (k, 0);
    let full = path.get(k, 0).ok_or(Error::MissingFullModel(k))?;
    if full.has_zero_columns() {
        return Err(Error::InvalidValue(format!(
            "full model (k̃ = {k}, λ = 0) has zeroed columns {:?}",
            full.zero_columns
        )));
    }
    if path.p() != draws.p() {
        return Err(Error::Dimension(format!(
            "fit path has p = {} but draws have p = {}",
            path.p(),
            draws.p()
        )));
    }
    let entries = path
        .fits
        .iter()
        .map(|fit| {
            let keep = retain_all || (fit.k_tilde, fit.lambda_index) == full_model_key;
            score_fit(fit, draws, keep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGrid {
        entries,
        full_model_key,
        draws: draws.len(),
    })
}

fn score_fit(fit: &PenalizedFit, draws: &PosteriorDraws, keep: bool) -> Result<LossEntry> {
    let mut entry = LossEntry {
        k_tilde: fit.k_tilde,
        lambda_index: fit.lambda_index,
        lambda: fit.lambda,
        expected_loss: None,
        excluded: fit.has_zero_columns(),
        sparsity: sparsity(&fit.loadings_matrix()),
        per_draw: None,
    };
    if entry.excluded {
        return Ok(entry);
    }
    let losses = per_draw_losses(fit, draws)?;
    entry.expected_loss = Some(pairwise_sum(&losses) / losses.len() as f64);
    if keep {
        entry.per_draw = Some(losses);
    }
    Ok(entry)
}

/// `stein_loss(Ω̂, Ω_(m))` for every draw, in draw order.
pub fn per_draw_losses(fit: &PenalizedFit, draws: &PosteriorDraws) -> Result<Vec<f64>> {
    let eval = SteinEvaluator::new(&fit.covariance())?;
    Ok(draws
        .loadings()
        .par_iter()
        .zip(draws.uniqueness().par_iter())
        .map(|(b, s)| eval.loss_factored(b, s))
        .collect())
}

/// Pairwise summation with a fixed split, independent of thread count.
fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Type-7 empirical quantile of the full model's per-draw losses.
pub fn full_model_quantile(grid: &LossGrid, q: f64) -> Result<f64> {
    quantile(grid.full_model_losses(), q)
}

/// Type-7 empirical quantile: linear interpolation between order statistics
/// at position `(n − 1) q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidValue(format!("quantile level {q} is outside (0, 1)")));
    }
    if values.is_empty() {
        return Err(Error::InvalidValue("quantile of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Fraction of entries that are exactly zero.
pub fn sparsity(b: &LoadingsMatrix) -> f64 {
    let m = b.as_matrix();
    let zeros = m.iter().filter(|&&v| v == 0.0).count();
    zeros as f64 / m.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k_tilde: usize,
    pub lambda_index: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k_selected: usize,
    pub lambda_selected: f64,
    pub lambda_index: usize,
    /// Quantile level that produced `threshold`, when known.
    pub quantile: Option<f64>,
    pub threshold: f64,
    pub expected_loss: f64,
    pub sparsity: f64,
    pub feasible_set: Vec<GridPoint>,
    /// No grid point met the threshold; the full model is returned.
    pub fallback: bool,
}

impl SelectionResult {
    pub fn key(&self) -> (usize, usize) {
        (self.k_selected, self.lambda_index)
    }

    pub fn is_feasible(&self, k_tilde: usize, lambda_index: usize) -> bool {
        self.feasible_set
            .iter()
            .any(|g| g.k_tilde == k_tilde && g.lambda_index == lambda_index)
    }
}

/// Applies the selection rule at a fixed threshold.
pub fn select(grid: &LossGrid, threshold: f64) -> SelectionResult {
    let feasible: Vec<&LossEntry> = grid
        .entries
        .iter()
        .filter(|e| !e.excluded && e.expected_loss.is_some_and(|l| l <= threshold))
        .collect();
    let chosen = feasible
        .iter()
        .min_by(|a, b| {
            a.k_tilde
                .cmp(&b.k_tilde)
                .then(b.lambda.total_cmp(&a.lambda))
                .then(b.lambda_index.cmp(&a.lambda_index))
        })
        .copied();
    let fallback = chosen.is_none();
    let chosen = chosen.unwrap_or_else(|| grid.full_model());
    SelectionResult {
        k_selected: chosen.k_tilde,
        lambda_selected: chosen.lambda,
        lambda_index: chosen.lambda_index,
        quantile: None,
        threshold,
        expected_loss: chosen.expected_loss.expect("selected entries are scored"),
        sparsity: chosen.sparsity,
        feasible_set: feasible
            .iter()
            .map(|e| GridPoint {
                k_tilde: e.k_tilde,
                lambda_index: e.lambda_index,
                lambda: e.lambda,
            })
            .collect(),
        fallback,
    }
}

/// Threshold at the `q`-quantile of the full model's losses, then [`select`].
pub fn select_at_quantile(grid: &LossGrid, q: f64) -> Result<SelectionResult> {
    let threshold = full_model_quantile(grid, q)?;
    let mut result = select(grid, threshold);
    result.quantile = Some(q);
    Ok(result)
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub k_tilde: usize,
    pub lambda_index: usize,
    pub lambda: f64,
    pub expected_loss: Option<f64>,
    pub excluded: bool,
    pub feasible: bool,
    pub selected: bool,
}

pub fn summary_rows(grid: &LossGrid, selection: &SelectionResult) -> Vec<SummaryRow> {
    grid.entries
        .iter()
        .map(|e| SummaryRow {
            k_tilde: e.k_tilde,
            lambda_index: e.lambda_index,
            lambda: e.lambda,
            expected_loss: e.expected_loss,
            excluded: e.excluded,
            feasible: selection.is_feasible(e.k_tilde, e.lambda_index),
            selected: e.key() == selection.key(),
        })
        .collect()
}

/// Writes `summary.csv`, `fullmodel_losses.csv` and `selection.json` into
/// `dir`.
pub fn emit_summary(grid: &LossGrid, selection: &SelectionResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::datagen::csv_err(&path, e))?;
    for row in summary_rows(grid, selection) {
        w.serialize(row).map_err(|e| crate::datagen::csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("fullmodel_losses.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::datagen::csv_err(&path, e))?;
    w.write_record(["draw", "loss"]).map_err(|e| crate::datagen::csv_err(&path, e))?;
    for (m, loss) in grid.full_model_losses().iter().enumerate() {
        w.serialize((m, loss)).map_err(|e| crate::datagen::csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("selection.json");
    let text = serde_json::to_string_pretty(selection).expect("selection serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::datagen::csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .map_err(|e| crate::datagen::csv_err(path, e))
}

pub fn read_selection_json(path: &Path) -> Result<SelectionResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_cov, posterior_mean_cov, UniquenessDiag};
    use crate::pfa::{fit_path, PathConfig};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_draws(seed: u64, m: usize, p: usize, k: usize) -> PosteriorDraws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DMatrix::from_fn(p, k, |_, _| rng.random_range(-1.0..1.0));
        let mut loadings = Vec::new();
        let mut uniq = Vec::new();
        for _ in 0..m {
            let noise = DMatrix::from_fn(p, k, |_, _| 0.1 * rng.random_range(-1.0..1.0));
            loadings.push(LoadingsMatrix::new(&base + noise).unwrap());
            uniq.push(UniquenessDiag::new(nalgebra::DVector::from_fn(p, |_, _| rng.random_range(0.3..0.6))).unwrap());
        }
        PosteriorDraws::new(loadings, uniq, "test").unwrap()
    }

    fn path_for(draws: &PosteriorDraws, l: usize) -> FitPath {
        let omega_bar = posterior_mean_cov(draws);
        let config = PathConfig {
            k_range: (1..=draws.k()).collect(),
            path_length: l,
            ..PathConfig::default()
        };
        fit_path(&omega_bar, &config).unwrap()
    }

    /// Independent quantile oracle: sort, then interpolate by hand.
    fn oracle_quantile(xs: &[f64], q: f64) -> f64 {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = q * (v.len() as f64 - 1.0);
        let i = pos as usize;
        if i + 1 >= v.len() {
            return v[v.len() - 1];
        }
        let w = pos - i as f64;
        (1.0 - w) * v[i] + w * v[i + 1]
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(), 3.0);
        for q in [0.01, 0.5, 0.95] {
            assert_eq!(quantile(&[2.5; 7], q).unwrap(), 2.5);
        }
        assert_eq!(quantile(&[4.0], 0.3).unwrap(), 4.0);
        assert!(quantile(&[1.0], 0.0).is_err());
        assert!(quantile(&[1.0], 1.0).is_err());
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn quantile_matches_oracle_on_5000_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..5000).map(|_| rng.random_range(-3.0..10.0)).collect();
        for q in [0.9, 0.95, 0.99] {
            assert!((quantile(&xs, q).unwrap() - oracle_quantile(&xs, q)).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&LoadingsMatrix::zeros(4, 3)), 1.0);
        let dense = LoadingsMatrix::new(DMatrix::from_fn(5, 2, |i, j| 1.0 + (i + j) as f64)).unwrap();
        assert_eq!(sparsity(&dense), 0.0);
        let mut m = DMatrix::from_element(8, 2, 0.5);
        m[(0, 1)] = 0.0;
        m[(3, 0)] = 0.0;
        m[(7, 1)] = 0.0;
        assert_eq!(sparsity(&LoadingsMatrix::new(m).unwrap()), 3.0 / 16.0);
    }

    #[test]
    fn single_exact_draw_gives_log_det_plus_p() {
        let draws = fake_draws(2, 1, 4, 1);
        let path = path_for(&draws, 3);
        let grid = loss_grid(&path, &draws).unwrap();
        let fit = path.get(1, 0).unwrap();
        let target = draws.draw_cov(0);
        let e = grid.get(1, 0).unwrap().expected_loss.unwrap();
        let direct = crate::model::stein_loss(&fit.covariance(), &target).unwrap();
        assert!((e - direct).abs() < 1e-12);
        // A fit equal to the draw attains log|Ω̂| + p.
        let b = draws.loadings()[0].clone();
        let s = draws.uniqueness()[0].clone();
        let omega = assemble_cov(&b, &s).unwrap();
        let exact = crate::model::stein_loss(&omega, &target).unwrap();
        assert!((exact - (omega.log_det().unwrap() + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn expected_loss_identity() {
        let draws = fake_draws(3, 200, 6, 2);
        let path = path_for(&draws, 4);
        let grid = loss_grid_with(&path, &draws, true).unwrap();
        let omega_bar = posterior_mean_cov(&draws);
        for e in grid.entries.iter().filter(|e| !e.excluded) {
            let fit = path.get(e.k_tilde, e.lambda_index).unwrap();
            let closed = crate::model::stein_loss(&fit.covariance(), &omega_bar).unwrap();
            let got = e.expected_loss.unwrap();
            assert!((got - closed).abs() <= 1e-8 * closed.abs().max(1.0));
            let mean = e.per_draw.as_ref().unwrap().iter().sum::<f64>() / 200.0;
            assert!((got - mean).abs() <= 1e-10 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn missing_full_model_is_an_error() {
        let draws = fake_draws(4, 20, 5, 2);
        let omega_bar = posterior_mean_cov(&draws);
        let path = fit_path(&omega_bar, &PathConfig::with_k_up_to(1)).unwrap();
        assert!(matches!(loss_grid(&path, &draws), Err(Error::MissingFullModel(2))));
    }

    #[test]
    fn excluded_fits_are_never_feasible() {
        let draws = fake_draws(5, 50, 6, 2);
        let path = path_for(&draws, 5);
        let grid = loss_grid(&path, &draws).unwrap();
        let last = grid.get(2, 5).unwrap();
        assert!(last.excluded);
        assert!(last.expected_loss.is_none());
        let sel = select(&grid, f64::MAX);
        for g in &sel.feasible_set {
            assert!(!grid.get(g.k_tilde, g.lambda_index).unwrap().excluded);
        }
        assert!(!grid.full_model().excluded);
    }

    #[test]
    fn huge_threshold_picks_smallest_dimension_largest_lambda() {
        let draws = fake_draws(6, 50, 6, 3);
        let path = path_for(&draws, 5);
        let grid = loss_grid(&path, &draws).unwrap();
        let sel = select(&grid, 1e300);
        assert!(!sel.fallback);
        assert_eq!(sel.k_selected, 1);
        let best = grid
            .entries
            .iter()
            .filter(|e| e.k_tilde == 1 && !e.excluded)
            .map(|e| e.lambda_index)
            .max()
            .unwrap();
        assert_eq!(sel.lambda_index, best);
    }

    #[test]
    fn low_threshold_falls_back_to_full_model() {
        let draws = fake_draws(7, 50, 6, 2);
        let path = path_for(&draws, 3);
        let grid = loss_grid(&path, &draws).unwrap();
        let sel = select(&grid, -1e300);
        assert!(sel.fallback);
        assert!(sel.feasible_set.is_empty());
        assert_eq!(sel.key(), (2, 0));
    }

    #[test]
    fn only_full_model_selects_it() {
        let draws = fake_draws(8, 50, 5, 2);
        let omega_bar = posterior_mean_cov(&draws);
        let config = PathConfig {
            k_range: vec![2],
            unpenalized_only: true,
            ..PathConfig::default()
        };
        let path = fit_path(&omega_bar, &config).unwrap();
        let grid = loss_grid(&path, &draws).unwrap();
        let sel = select_at_quantile(&grid, 0.95).unwrap();
        assert_eq!(sel.key(), (2, 0));
        assert!(!sel.fallback);
    }

    #[test]
    fn selection_meets_threshold_and_is_minimal() {
        let draws = fake_draws(9, 300, 7, 3);
        let path = path_for(&draws, 6);
        let grid = loss_grid(&path, &draws).unwrap();
        let sel = select_at_quantile(&grid, 0.95).unwrap();
        assert!(sel.expected_loss <= sel.threshold);
        assert!(sel.feasible_set.iter().all(|g| g.k_tilde >= sel.k_selected));
        assert_eq!(sel.quantile, Some(0.95));
    }

    #[test]
    fn emitted_files_round_trip() {
        let draws = fake_draws(10, 100, 6, 2);
        let path = path_for(&draws, 4);
        let grid = loss_grid(&path, &draws).unwrap();
        let sel = select_at_quantile(&grid, 0.95).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_summary(&grid, &sel, dir.path()).unwrap();

        let rows = read_summary_csv(&dir.path().join("summary.csv")).unwrap();
        assert_eq!(rows.len(), grid.entries.len());
        assert_eq!(rows.iter().filter(|r| r.selected).count(), 1);
        for (row, e) in rows.iter().zip(&grid.entries) {
            assert_eq!(row.expected_loss.map(f64::to_bits), e.expected_loss.map(f64::to_bits));
            assert_eq!(row.lambda.to_bits(), e.lambda.to_bits());
            let recomputed = !row.excluded && row.expected_loss.is_some_and(|l| l <= sel.threshold);
            assert_eq!(row.feasible, recomputed);
        }

        let mut r = csv::Reader::from_path(dir.path().join("fullmodel_losses.csv")).unwrap();
        let losses: Vec<f64> = r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(losses, grid.full_model_losses());

        let back = read_selection_json(&dir.path().join("selection.json")).unwrap();
        assert_eq!(back, sel);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&xs) - xs.iter().sum::<f64>()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn feasible_set_grows_with_quantile(seed in any::<u64>()) {
            let draws = fake_draws(seed, 80, 6, 3);
            let path = path_for(&draws, 4);
            let grid = loss_grid(&path, &draws).unwrap();
            let lo = select_at_quantile(&grid, 0.95).unwrap();
            let hi = select_at_quantile(&grid, 0.99).unwrap();
            for g in &lo.feasible_set {
                prop_assert!(hi.is_feasible(g.k_tilde, g.lambda_index));
            }
            prop_assert!(hi.k_selected <= lo.k_selected);
        }

        #[test]
        fn rotating_draws_changes_nothing(seed in any::<u64>()) {
            let draws = fake_draws(seed, 60, 6, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).qr().q();
            let rotated = draws
                .map_loadings(|b| LoadingsMatrix::new(b.as_matrix() * &q).unwrap())
                .unwrap();
            let path = path_for(&draws, 4);
            let a = loss_grid(&path, &draws).unwrap();
            let b = loss_grid(&path, &rotated).unwrap();
            for (x, y) in a.full_model_losses().iter().zip(b.full_model_losses()) {
                prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
            }
            let sa = select_at_quantile(&a, 0.95).unwrap();
            let sb = select_at_quantile(&b, 0.95).unwrap();
            prop_assert_eq!(sa.key(), sb.key());
        }
    }
}
