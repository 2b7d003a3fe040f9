//! End-to-end pipeline and the replicated simulation benchmark.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{GenerationConfig, RunConfig};
use crate::datagen::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::gibbs::{run_gibbs, ChainConfig, PriorConfig};
use crate::model::{posterior_mean_cov, rmse, CovMatrix, PosteriorDraws};
use crate::pfa::{fit_path, FitPath, PathConfig};
use crate::summary::{loss_grid, select_at_quantile, LossGrid, SelectionResult};

/// Everything produced by one pass of sample → fit → summarize.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub draws: PosteriorDraws,
    pub omega_bar: CovMatrix,
    pub path: FitPath,
    pub grid: LossGrid,
    pub selections: Vec<SelectionResult>,
}

impl PipelineRun {
    /// `Ω̂` of the selection at `quantiles[i]`.
    pub fn selected_cov(&self, i: usize) -> CovMatrix {
        let sel = &self.selections[i];
        self.path
            .get(sel.k_selected, sel.lambda_index)
            .expect("selection refers to a fit in the path")
            .covariance()
    }
}

pub fn run_pipeline(
    data: &mut Dataset,
    prior: &PriorConfig,
    chain: &ChainConfig,
    path_config: &PathConfig,
    quantiles: &[f64],
) -> Result<PipelineRun> {
    let draws = run_gibbs(data, prior, chain)?;
    let omega_bar = posterior_mean_cov(&draws);
    let path = fit_path(&omega_bar, path_config)?;
    let grid = loss_grid(&path, &draws)?;
    let selections = quantiles
        .iter()
        .map(|&q| select_at_quantile(&grid, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineRun {
        draws,
        omega_bar,
        path,
        grid,
        selections,
    })
}

/// Per-quantile result of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicatePick {
    pub quantile: f64,
    pub k_selected: usize,
    pub correct: bool,
    pub rmse: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub scenario: String,
    pub replicate: usize,
    pub seed: u64,
    pub k0: usize,
    /// Empty when the replicate failed.
    pub picks: Vec<ReplicatePick>,
    /// Smallest `stein_loss(Ω̂, Ω̄) − (log|Ω̄| + p)` over the path.
    pub min_bound_gap: f64,
    pub error: Option<String>,
}

/// Runs one replicate of one scenario.
pub fn run_replicate(config: &RunConfig, gen: &GenerationConfig, scenario: &str, r: usize) -> ReplicateRecord {
    let chain = config.bench_chain(r);
    let mut record = ReplicateRecord {
        scenario: scenario.to_string(),
        replicate: r,
        seed: chain.seed,
        k0: gen.true_k(),
        picks: Vec::new(),
        min_bound_gap: f64::NAN,
        error: None,
    };
    let outcome = (|| -> Result<(GroundTruth, PipelineRun)> {
        let (truth, mut data) = gen.simulate(r)?;
        let run = run_pipeline(
            &mut data,
            &config.sampler.prior,
            &chain,
            &config.bench_path(),
            &config.bench.quantiles,
        )?;
        Ok((truth, run))
    })();
    match outcome {
        Ok((truth, run)) => {
            record.min_bound_gap = lower_bound_gap(&run);
            for (i, sel) in run.selections.iter().enumerate() {
                let err = rmse(&run.selected_cov(i), &truth.omega).expect("shapes agree");
                record.picks.push(ReplicatePick {
                    quantile: config.bench.quantiles[i],
                    k_selected: sel.k_selected,
                    correct: sel.k_selected == record.k0,
                    rmse: err,
                    fallback: sel.fallback,
                });
            }
        }
        Err(e) => {
            log::warn!("{scenario} replicate {r} failed: {e}");
            record.error = Some(e.to_string());
        }
    }
    record
}

/// `min over fits of stein_loss(Ω̂, Ω̄) − (log|Ω̄| + p)`; never below zero
/// for a correct loss.
pub fn lower_bound_gap(run: &PipelineRun) -> f64 {
    let bound = run.omega_bar.log_det().expect("posterior mean is positive definite") + run.omega_bar.p() as f64;
    run.path
        .fits
        .iter()
        .map(|f| crate::model::stein_loss(&f.covariance(), &run.omega_bar).expect("fits are positive definite") - bound)
        .fold(f64::INFINITY, f64::min)
}

/// One line of the bench report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub quantile: f64,
    pub replicates: usize,
    pub failed: usize,
    pub correct: usize,
    pub proportion: f64,
    pub rmse_q1: f64,
    pub rmse_median: f64,
    pub rmse_q3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config_digest: String,
    pub records: Vec<ReplicateRecord>,
    pub rows: Vec<ScenarioRow>,
}

/// Every scenario × replicate, in parallel; records are ordered by scenario
/// then replicate index.
pub fn run_bench(config: &RunConfig) -> Result<BenchReport> {
    config.validate()?;
    let jobs: Vec<(String, GenerationConfig, usize)> = config
        .scenarios()
        .into_iter()
        .flat_map(|(name, gen)| (0..gen.replicates).map(move |r| (name.clone(), gen.clone(), r)))
        .collect();
    let records: Vec<ReplicateRecord> = jobs
        .par_iter()
        .map(|(name, gen, r)| {
            let rec = run_replicate(config, gen, name, *r);
            log::info!(
                "{name} replicate {r}: {}",
                match &rec.error {
                    Some(e) => format!("failed ({e})"),
                    None => rec
                        .picks
                        .iter()
                        .map(|p| format!("q={} k̃={}", p.quantile, p.k_selected))
                        .collect::<Vec<_>>()
                        .join(", "),
                }
            );
            rec
        })
        .collect();
    let rows = summarize_records(&records, &config.bench.quantiles);
    Ok(BenchReport {
        config_digest: config.digest(),
        records,
        rows,
    })
}

pub fn summarize_records(records: &[ReplicateRecord], quantiles: &[f64]) -> Vec<ScenarioRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.scenario.as_str()) {
            names.push(&r.scenario);
        }
    }
    let mut rows = Vec::new();
    for name in names {
        let recs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.scenario == name).collect();
        let failed = recs.iter().filter(|r| r.error.is_some()).count();
        for &q in quantiles {
            let picks: Vec<&ReplicatePick> = recs
                .iter()
                .flat_map(|r| r.picks.iter().filter(|p| p.quantile == q))
                .collect();
            let correct = picks.iter().filter(|p| p.correct).count();
            let errs: Vec<f64> = picks.iter().map(|p| p.rmse).collect();
            let quart = |level: f64| crate::summary::quantile(&errs, level).unwrap_or(f64::NAN);
            rows.push(ScenarioRow {
                scenario: name.to_string(),
                quantile: q,
                replicates: recs.len(),
                failed,
                correct,
                proportion: if picks.is_empty() {
                    f64::NAN
                } else {
                    correct as f64 / picks.len() as f64
                },
                rmse_q1: quart(0.25),
                rmse_median: quart(0.5),
                rmse_q3: quart(0.75),
            });
        }
    }
    rows
}

#[derive(Serialize)]
struct RecordRow<'a> {
    scenario: &'a str,
    replicate: usize,
    seed: u64,
    k0: usize,
    quantile: Option<f64>,
    k_selected: Option<usize>,
    correct: Option<bool>,
    rmse: Option<f64>,
    error: Option<&'a str>,
}

impl BenchReport {
    pub fn row(&self, scenario: &str, quantile: f64) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.quantile == quantile)
    }

    /// Writes `bench_report.csv` (one row per scenario and quantile) and
    /// `bench_replicates.csv` (one row per replicate and quantile; failed
    /// replicates appear once with their error).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("bench_report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| crate::datagen::csv_err(&path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| crate::datagen::csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("bench_replicates.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| crate::datagen::csv_err(&path, e))?;
        for r in &self.records {
            let base = RecordRow {
                scenario: &r.scenario,
                replicate: r.replicate,
                seed: r.seed,
                k0: r.k0,
                quantile: None,
                k_selected: None,
                correct: None,
                rmse: None,
                error: r.error.as_deref(),
            };
            if r.picks.is_empty() {
                w.serialize(&base).map_err(|e| crate::datagen::csv_err(&path, e))?;
            }
            for p in &r.picks {
                let row = RecordRow {
                    quantile: Some(p.quantile),
                    k_selected: Some(p.k_selected),
                    correct: Some(p.correct),
                    rmse: Some(p.rmse),
                    ..base
                };
                w.serialize(&row).map_err(|e| crate::datagen::csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pick(q: f64, k: usize, k0: usize, rmse: f64) -> ReplicatePick {
        ReplicatePick {
            quantile: q,
            k_selected: k,
            correct: k == k0,
            rmse,
            fallback: false,
        }
    }

    fn record(r: usize, picks: Vec<ReplicatePick>, error: Option<&str>) -> ReplicateRecord {
        ReplicateRecord {
            scenario: "s".into(),
            replicate: r,
            seed: r as u64,
            k0: 3,
            picks,
            min_bound_gap: 0.0,
            error: error.map(String::from),
        }
    }

    #[test]
    fn failed_replicates_are_counted_not_dropped() {
        let records = vec![
            record(0, vec![pick(0.95, 3, 3, 0.1)], None),
            record(1, vec![pick(0.95, 2, 3, 0.3)], None),
            record(2, vec![], Some("boom")),
            record(3, vec![pick(0.95, 3, 3, 0.2)], None),
        ];
        let rows = summarize_records(&records, &[0.95]);
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.replicates, 4);
        assert_eq!(row.failed, 1);
        assert_eq!(row.correct, 2);
        assert!((row.proportion - 2.0 / 3.0).abs() < 1e-15);
        assert!((row.rmse_median - 0.2).abs() < 1e-15);
    }

    #[test]
    fn report_files_are_written() {
        let records = vec![record(0, vec![pick(0.95, 3, 3, 0.1)], None), record(1, vec![], Some("bad"))];
        let report = BenchReport {
            config_digest: "d".into(),
            rows: summarize_records(&records, &[0.95]),
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("bench_replicates.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("bad"));
        let mut r = csv::Reader::from_path(dir.path().join("bench_report.csv")).unwrap();
        assert_eq!(r.records().count(), 1);
    }

    #[test]
    fn small_bench_is_deterministic() {
        let text = "[generation]\np = 6\nk0 = 2\nn = 60\nreplicates = 2\n\
                    [sampler.chain]\nk = 3\n[path]\nk_range = [1, 2, 3]\n\
                    [bench]\niterations = 300\nburnin = 150\n";
        let config = RunConfig::from_toml(text).unwrap();
        let a = run_bench(&config).unwrap();
        let b = run_bench(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 2);
        assert_eq!(a.rows.len(), 2);
        assert!(a.records.iter().all(|r| r.error.is_none() && r.min_bound_gap > -1e-9));
    }
}
