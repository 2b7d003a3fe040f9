//! Synthetic data for the toy example and the simulation study.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{assemble_cov, plt_rotate, CovMatrix, LoadingsMatrix, UniquenessDiag};
use crate::rng::{stream_rng, Stream};

/// Harman's eight physical variables, two-factor loadings (column-major).
const HARMAN_LOADINGS: [[f64; 8]; 2] = [
    [0.879, 0.919, 0.890, 0.858, 0.238, 0.183, 0.135, 0.250],
    [0.272, 0.210, 0.182, 0.246, 0.900, 0.792, 0.729, 0.684],
];

/// The generating `(B₀, Σ₀)` and the implied `Ω₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub loadings: LoadingsMatrix,
    pub uniqueness: UniquenessDiag,
    pub omega: CovMatrix,
}

impl GroundTruth {
    pub fn new(loadings: LoadingsMatrix, uniqueness: UniquenessDiag) -> Result<Self> {
        let omega = assemble_cov(&loadings, &uniqueness)?;
        Ok(Self {
            loadings,
            uniqueness,
            omega,
        })
    }

    /// `Σ₀ = σ² I_p`.
    pub fn isotropic(loadings: LoadingsMatrix, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidValue(format!("sigma must be positive, got {sigma}")));
        }
        let p = loadings.p();
        let uniqueness = UniquenessDiag::new(DVector::from_element(p, sigma * sigma))?;
        Self::new(loadings, uniqueness)
    }

    pub fn p(&self) -> usize {
        self.loadings.p()
    }

    pub fn k0(&self) -> usize {
        self.loadings.k()
    }
}

/// Observations stored as an `n × p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: DMatrix<f64>,
    centered: bool,
}

impl Dataset {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() < 2 || rows.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "dataset needs n >= 2 and p >= 1, got {}x{}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("dataset contains non-finite values".into()));
        }
        Ok(Self {
            rows,
            centered: false,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Subtracts column means in place and sets the centered flag.
    pub fn center(&mut self) {
        let n = self.n() as f64;
        for mut col in self.rows.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
        }
        self.centered = true;
    }

    /// `(1/n) Yᵀ Y` of the (assumed centered) rows.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let m = self.rows.transpose() * &self.rows / self.n() as f64;
        crate::model::symmetrize(m)
    }

    /// Headered CSV, columns `v1..vp`, shortest round-trip decimal floats.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = (1..=self.p()).map(|j| format!("v{j}")).collect();
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for row in self.rows.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let p = r.headers().map_err(|e| csv_err(path, e))?.len();
        let mut values = Vec::new();
        let mut n = 0;
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if rec.len() != p {
                return Err(Error::format(path, format!("row {n} has {} fields, expected {p}", rec.len())));
            }
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("not a number: `{field}`")))?;
                values.push(v);
            }
            n += 1;
        }
        Self::new(DMatrix::from_row_slice(n, p, &values))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Toy-example truth: Harman loadings with `Σ₀ = diag(I − B₀B₀ᵀ)`.
pub fn harman_toy_truth() -> GroundTruth {
    let b = DMatrix::from_fn(8, 2, |j, q| HARMAN_LOADINGS[q][j]);
    let loadings = LoadingsMatrix::new(b).expect("constant loadings are finite");
    let gram = loadings.gram();
    let uniqueness = UniquenessDiag::new(DVector::from_fn(8, |j, _| 1.0 - gram[(j, j)]))
        .expect("Harman communalities are below one");
    GroundTruth::new(loadings, uniqueness).expect("shapes agree")
}

/// Standard normal `p × k0` draw rotated to positive lower triangular form.
pub fn random_plt_loadings(p: usize, k0: usize, seed: u64) -> Result<LoadingsMatrix> {
    let raw = raw_loadings_draw(p, k0, seed)?;
    LoadingsMatrix::new(plt_rotate(&raw))
}

/// The unrotated draw behind [`random_plt_loadings`] for the same seed.
pub fn raw_loadings_draw(p: usize, k0: usize, seed: u64) -> Result<DMatrix<f64>> {
    if k0 == 0 || k0 > p {
        return Err(Error::InvalidValue(format!("need 1 <= k0 <= p, got k0={k0}, p={p}")));
    }
    let mut rng = stream_rng(seed, Stream::Loadings);
    Ok(DMatrix::from_fn(p, k0, |_, _| rng.sample(StandardNormal)))
}

/// `y_i = B₀ f_i + ε_i`, `f_i ~ N(0, I)`, `ε_i ~ N(0, Σ₀)`.
pub fn simulate_normal(truth: &GroundTruth, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, Stream::Data);
    simulate_with(truth, n, |_| 1.0, &mut rng)
}

/// Multivariate-t factors and errors with `nu` degrees of freedom: each
/// vector is a normal draw divided by its own `sqrt(χ²_ν / ν)`.
pub fn simulate_t(truth: &GroundTruth, n: usize, nu: f64, seed: u64) -> Result<Dataset> {
    if !(nu.is_finite() && nu > 2.0) {
        return Err(Error::InvalidValue(format!(
            "degrees of freedom must exceed 2, got {nu}"
        )));
    }
    let chi = ChiSquared::new(nu).expect("nu > 2");
    let mut rng = stream_rng(seed, Stream::Data);
    simulate_with(truth, n, |rng| (chi.sample(rng) / nu).sqrt().recip(), &mut rng)
}

fn simulate_with<R: Rng>(
    truth: &GroundTruth,
    n: usize,
    mut mixing: impl FnMut(&mut R) -> f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidValue(format!("sample size must be >= 2, got {n}")));
    }
    let (p, k) = (truth.p(), truth.k0());
    let b = truth.loadings.as_matrix();
    let sd: Vec<f64> = truth.uniqueness.as_slice().iter().map(|s| s.sqrt()).collect();
    let mut rows = DMatrix::zeros(n, p);
    let mut f = DVector::zeros(k);
    for i in 0..n {
        let wf = mixing(rng);
        for q in 0..k {
            f[q] = wf * rng.sample::<f64, _>(StandardNormal);
        }
        let we = mixing(rng);
        let signal = b * &f;
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            rows[(i, j)] = signal[j] + we * sd[j] * e;
        }
    }
    Dataset::new(rows)
}

/// Writes a matrix as headerless row-major CSV.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut values = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if *ncols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::format(path, "ragged matrix rows"));
        }
        for field in rec.iter() {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("not a number: `{field}`")))?,
            );
        }
        nrows += 1;
    }
    let ncols = ncols.ok_or_else(|| Error::format(path, "empty matrix file"))?;
    Ok(DMatrix::from_row_slice(nrows, ncols, &values))
}
