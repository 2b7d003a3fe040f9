//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! output_dir = "out"
//!
//! [generation]
//! truth = "random"        # or "harman"
//! p = 15
//! k0 = 3
//! n = 100
//! sigma = 0.5
//! dist = "normal"         # or "t"
//! nu = 10.0
//! replicates = 30
//! base_seed = 1
//!
//! [sampler.prior]
//! family = "unconstrained"
//!
//! [sampler.chain]
//! k = 5
//! iterations = 10000
//! burnin = 5000
//!
//! [path]
//! k_range = [1, 2, 3, 4, 5]
//! path_length = 10
//!
//! [summary]
//! quantile = 0.95
//!
//! [bench]
//! iterations = 6000
//! burnin = 3000
//! quantiles = [0.95, 0.99]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{self, Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::gibbs::{ChainConfig, PriorConfig};
use crate::pfa::PathConfig;
use crate::rng::replicate_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataDistribution {
    Normal,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthKind {
    /// Standard normal loadings rotated to PLT form, `Σ₀ = σ² I`.
    Random,
    /// Fixed eight-variable two-factor loadings; `p`, `k0` and `sigma` are
    /// ignored.
    Harman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub truth: TruthKind,
    pub p: usize,
    pub k0: usize,
    pub n: usize,
    pub sigma: f64,
    pub dist: DataDistribution,
    pub nu: f64,
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            truth: TruthKind::Random,
            p: 15,
            k0: 3,
            n: 100,
            sigma: 0.5,
            dist: DataDistribution::Normal,
            nu: 10.0,
            replicates: 30,
            base_seed: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.truth == TruthKind::Random {
            if self.p == 0 {
                return Err(Error::config("generation.p", "must be at least 1"));
            }
            if self.k0 == 0 || self.k0 > self.p {
                return Err(Error::config("generation.k0", format!("must lie in 1..={}", self.p)));
            }
            if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                return Err(Error::config("generation.sigma", "must be positive"));
            }
        }
        if self.n < 2 {
            return Err(Error::config("generation.n", "must be at least 2"));
        }
        if self.dist == DataDistribution::T && !(self.nu > 2.0 && self.nu.is_finite()) {
            return Err(Error::config("generation.nu", "must exceed 2 for t data"));
        }
        if self.replicates == 0 {
            return Err(Error::config("generation.replicates", "must be at least 1"));
        }
        Ok(())
    }

    /// Variable count of the generated data.
    pub fn dim(&self) -> usize {
        match self.truth {
            TruthKind::Random => self.p,
            TruthKind::Harman => 8,
        }
    }

    pub fn true_k(&self) -> usize {
        match self.truth {
            TruthKind::Random => self.k0,
            TruthKind::Harman => 2,
        }
    }

    /// Truth and data for replicate `r`, seeded by `base_seed + r`.
    pub fn simulate(&self, r: usize) -> Result<(GroundTruth, Dataset)> {
        let seed = replicate_seed(self.base_seed, r);
        let truth = match self.truth {
            TruthKind::Random => {
                GroundTruth::isotropic(datagen::random_plt_loadings(self.p, self.k0, seed)?, self.sigma)?
            }
            TruthKind::Harman => datagen::harman_toy_truth(),
        };
        let data = match self.dist {
            DataDistribution::Normal => datagen::simulate_normal(&truth, self.n, seed)?,
            DataDistribution::T => datagen::simulate_t(&truth, self.n, self.nu, seed)?,
        };
        Ok((truth, data))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub prior: PriorConfig,
    pub chain: ChainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    pub quantile: f64,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self { quantile: 0.95 }
    }
}

/// Overrides of the generation block for one bench scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: Option<String>,
    pub n: Option<usize>,
    pub sigma: Option<f64>,
    pub dist: Option<DataDistribution>,
    pub nu: Option<f64>,
}

impl Scenario {
    pub fn apply(&self, base: &GenerationConfig) -> GenerationConfig {
        GenerationConfig {
            n: self.n.unwrap_or(base.n),
            sigma: self.sigma.unwrap_or(base.sigma),
            dist: self.dist.unwrap_or(base.dist),
            nu: self.nu.unwrap_or(base.nu),
            ..base.clone()
        }
    }

    /// `name`, or a label built from the generation settings.
    pub fn label(&self, gen: &GenerationConfig) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match gen.dist {
            DataDistribution::Normal => format!("normal_n{}_sigma{}", gen.n, gen.sigma),
            DataDistribution::T => format!("t{}_n{}_sigma{}", gen.nu, gen.n, gen.sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Sweeps per chain in the bench (replaces `sampler.chain.iterations`).
    pub iterations: usize,
    pub burnin: usize,
    pub quantiles: Vec<f64>,
    /// Empty means one scenario given by the generation block.
    pub scenarios: Vec<Scenario>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            burnin: 3000,
            quantiles: vec![0.95, 0.99],
            scenarios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub generation: GenerationConfig,
    pub sampler: SamplerConfig,
    pub path: PathConfig,
    pub summary: SummaryConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            generation: GenerationConfig::default(),
            sampler: SamplerConfig::default(),
            path: PathConfig::default(),
            summary: SummaryConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn check_quantile(field: &str, q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("{q} is outside (0, 1)")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.sampler.prior.validate()?;
        self.sampler.chain.validate()?;
        self.path.validate()?;
        check_quantile("summary.quantile", self.summary.quantile)?;
        let k = self.sampler.chain.k;
        let p = self.generation.dim();
        if k > p {
            return Err(Error::config("sampler.chain.k", format!("working dimension {k} exceeds p = {p}")));
        }
        if !self.path.k_range.contains(&k) {
            return Err(Error::config(
                "path.k_range",
                format!("must include the working dimension k = {k}"),
            ));
        }
        if let Some(&bad) = self.path.k_range.iter().find(|&&kt| kt > k) {
            return Err(Error::config("path.k_range", format!("dimension {bad} exceeds k = {k}")));
        }
        if self.bench.burnin >= self.bench.iterations {
            return Err(Error::config("bench.burnin", "must be below bench.iterations"));
        }
        if self.bench.quantiles.is_empty() {
            return Err(Error::config("bench.quantiles", "must be nonempty"));
        }
        for &q in &self.bench.quantiles {
            check_quantile("bench.quantiles", q)?;
        }
        for (i, s) in self.bench.scenarios.iter().enumerate() {
            s.apply(&self.generation)
                .validate()
                .map_err(|e| Error::config(format!("bench.scenarios[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Chain settings for replicate `r`: sampler seed `base_seed + r`.
    pub fn chain_for(&self, r: usize) -> ChainConfig {
        ChainConfig {
            seed: replicate_seed(self.generation.base_seed, r),
            ..self.sampler.chain
        }
    }

    /// Path settings used by the bench: `λ = 0` for every `k̃ ≤ k`.
    pub fn bench_path(&self) -> PathConfig {
        PathConfig {
            k_range: (1..=self.sampler.chain.k).collect(),
            unpenalized_only: true,
            ..self.path.clone()
        }
    }

    pub fn bench_chain(&self, r: usize) -> ChainConfig {
        ChainConfig {
            iterations: self.bench.iterations,
            burnin: self.bench.burnin,
            ..self.chain_for(r)
        }
    }

    /// Generation settings of every bench scenario with its label.
    pub fn scenarios(&self) -> Vec<(String, GenerationConfig)> {
        if self.bench.scenarios.is_empty() {
            let s = Scenario::default();
            return vec![(s.label(&self.generation), self.generation.clone())];
        }
        self.bench
            .scenarios
            .iter()
            .map(|s| {
                let g = s.apply(&self.generation);
                (s.label(&g), g)
            })
            .collect()
    }
}
