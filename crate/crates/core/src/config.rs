//! Experiment configuration (TOML).
//!
//! Sections: `[transition_high]`, `[transition_low_2f]`,
//! `[transition_low_1f]`, `[collateral]`, `[loan]`, `[grid]`,
//! `[experiments]` (with one sub-table per stage). Seeds come from the
//! file or the CLI; nothing reads the wall clock. A `scale_divisor`
//! shrinks the large scenario/path counts uniformly so full-scale runs
//! stay expressible in the same file.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{stationary_distribution, StateSpaceSpec};
use crate::error::{Error, Result};
use crate::lgd::{CollateralParams, LgdContext};
use crate::loss::LoanSpec;
use crate::transition::calibrate::CalibrationOptions;
use crate::transition::TransitionModelParams;

fn default_one() -> usize {
    1
}

/// Covariance/initial-covariance specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    /// The keyword "stationary".
    Keyword(String),
    Diag(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

/// One transition-model parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionParamsConfig {
    pub ratings: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    /// Loading matrix, R² rows (row-major over (i,j)) of d entries.
    pub k: Vec<Vec<f64>>,
    /// Level matrix, R rows of R entries.
    pub g: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<Vec<f64>>,
    /// Initial covariance; defaults to the stationary covariance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<CovSpec>,
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl TransitionParamsConfig {
    fn square(&self, full: &Option<Vec<Vec<f64>>>, diag: &Option<Vec<f64>>, what: &str) -> Result<DMatrix<f64>> {
        let d = self.dim;
        match (full, diag) {
            (Some(rows), None) => matrix_from_rows(rows, d, d, what),
            (None, Some(values)) => {
                if values.len() != d {
                    return Err(Error::Config(format!("{what} diagonal must have {d} entries")));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_row_slice(values)))
            }
            (None, None) => Err(Error::Config(format!("{what} missing (provide `{what}` or `{what}_diag`)"))),
            (Some(_), Some(_)) => Err(Error::Config(format!("give either `{what}` or `{what}_diag`, not both"))),
        }
    }

    pub fn to_params(&self) -> Result<TransitionModelParams> {
        let d = self.dim;
        let r = self.ratings;
        let a = self.square(&self.a, &self.a_diag, "a")?;
        let q = self.square(&self.q, &self.q_diag, "q")?;
        let k = matrix_from_rows(&self.k, r * r, d, "k")?;
        let g = matrix_from_rows(&self.g, r, r, "g")?;
        let a0 = match &self.a0 {
            Some(v) => {
                if v.len() != d {
                    return Err(Error::Config("a0 must have `dim` entries".into()));
                }
                DVector::from_row_slice(v)
            }
            None => DVector::zeros(d),
        };
        let p0 = match &self.p0 {
            Some(CovSpec::Keyword(word)) if word == "stationary" => None,
            Some(CovSpec::Keyword(word)) => {
                return Err(Error::Config(format!("unknown p0 keyword {word:?} (expected \"stationary\")")));
            }
            Some(CovSpec::Diag(values)) => {
                if values.len() != d {
                    return Err(Error::Config("p0 diagonal must have `dim` entries".into()));
                }
                Some(DMatrix::from_diagonal(&DVector::from_row_slice(values)))
            }
            Some(CovSpec::Full(rows)) => Some(matrix_from_rows(rows, d, d, "p0")?),
            None => None,
        };
        let p0 = match p0 {
            Some(m) => m,
            None => {
                let probe = StateSpaceSpec::new(a.clone(), q.clone(), a0.clone(), DMatrix::zeros(d, d))?;
                stationary_distribution(&probe)?.cov
            }
        };
        let spec = StateSpaceSpec::new(a, q, a0, p0)?;
        TransitionModelParams::new(r, spec, k, g)
    }

    /// Export full matrices (used to persist calibrated parameters).
    pub fn from_params(params: &TransitionModelParams) -> Self {
        let r = params.num_ratings();
        let d = params.dim();
        let spec = params.state_space();
        let to_rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
        };
        let initial = spec.initial_belief();
        TransitionParamsConfig {
            ratings: r,
            dim: d,
            a: Some(to_rows(spec.transition_matrix())),
            a_diag: None,
            q: Some(to_rows(spec.process_noise_cov())),
            q_diag: None,
            k: to_rows(params.loading()),
            g: to_rows(params.level()),
            a0: Some(initial.mean.iter().cloned().collect()),
            p0: Some(CovSpec::Full(to_rows(&initial.cov))),
        }
    }
}

/// How a low-dimensional model is initialized before calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LowModelInit {
    Keyword(String),
    Explicit(TransitionParamsConfig),
}

fn default_auto() -> LowModelInit {
    LowModelInit::Keyword("auto".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowModelConfig {
    pub dim: usize,
    #[serde(default = "default_auto")]
    pub init: LowModelInit,
    #[serde(default = "LowModelConfig::default_max_evals")]
    pub max_evals: usize,
    #[serde(default = "LowModelConfig::default_restarts")]
    pub restarts: usize,
}

impl LowModelConfig {
    fn default_max_evals() -> usize {
        8_000
    }

    fn default_restarts() -> usize {
        2
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions { max_evals: self.max_evals, restarts: self.restarts, ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollateralConfig {
    pub drift: f64,
    pub ar_coeff: f64,
    pub vol: f64,
    #[serde(default)]
    pub initial_log_return: f64,
}

impl CollateralConfig {
    pub fn to_params(&self) -> Result<CollateralParams> {
        CollateralParams::new(self.drift, self.ar_coeff, self.vol, self.initial_log_return)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoanConfig {
    pub maturity: usize,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupon: Option<f64>,
    #[serde(default)]
    pub principal: f64,
    #[serde(default = "LoanConfig::default_strict")]
    pub strict_pc_term: bool,
    /// "unit" or "amortizing".
    #[serde(default = "LoanConfig::default_ead")]
    pub ead: String,
}

impl LoanConfig {
    fn default_strict() -> bool {
        true
    }

    fn default_ead() -> String {
        "unit".into()
    }

    pub fn to_loan(&self) -> Result<LoanSpec> {
        let mut loan = LoanSpec::new(self.maturity, self.horizon)?
            .with_principal(self.principal)
            .with_strict_pc_term(self.strict_pc_term);
        if let Some(c) = self.coupon {
            loan = loan.with_coupon(c);
        }
        Ok(loan)
    }

    /// Post-horizon LGD context for a given initial loan-to-value.
    pub fn lgd_context(&self, ltv0: f64) -> Result<LgdContext> {
        let post = self.maturity - self.horizon;
        match self.ead.as_str() {
            "unit" => LgdContext::unit_bullet(ltv0, post),
            "amortizing" => LgdContext::amortizing(ltv0, post),
            other => Err(Error::Config(format!("unknown EAD schedule {other:?} (expected \"unit\" or \"amortizing\")"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default = "GridConfig::default_nodes")]
    pub nodes_per_dim: usize,
    #[serde(default = "GridConfig::default_sigma_mult")]
    pub sigma_mult: f64,
    #[serde(default = "GridConfig::default_fill")]
    pub fill_points: usize,
    #[serde(default = "GridConfig::default_paths")]
    pub training_paths: usize,
    #[serde(default = "GridConfig::default_weight")]
    pub pseudo_count_weight: f64,
    #[serde(default = "GridConfig::default_knn")]
    pub knn: usize,
    #[serde(default = "GridConfig::default_power")]
    pub idw_power: f64,
}

impl GridConfig {
    fn default_nodes() -> usize {
        15
    }
    fn default_sigma_mult() -> f64 {
        4.0
    }
    fn default_fill() -> usize {
        1000
    }
    fn default_paths() -> usize {
        1000
    }
    fn default_weight() -> f64 {
        crate::projection::DEFAULT_PSEUDO_COUNT_WEIGHT
    }
    fn default_knn() -> usize {
        8
    }
    fn default_power() -> f64 {
        2.0
    }
}

/// Obligor population: one count for every performing rating, or a
/// per-rating list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObligorPopulation {
    Uniform(u64),
    PerRating(Vec<u64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatagenConfig {
    #[serde(default = "DatagenConfig::default_periods")]
    pub periods: usize,
    #[serde(default = "DatagenConfig::default_obligors")]
    pub obligors_per_rating: ObligorPopulation,
}

impl DatagenConfig {
    fn default_periods() -> usize {
        120
    }
    fn default_obligors() -> ObligorPopulation {
        ObligorPopulation::Uniform(10_000)
    }

    /// Initial counts per rating (the absorbing default starts empty).
    pub fn initial_counts(&self, num_ratings: usize) -> crate::error::Result<Vec<u64>> {
        let mut counts = match &self.obligors_per_rating {
            ObligorPopulation::Uniform(n) => vec![*n; num_ratings],
            ObligorPopulation::PerRating(v) => {
                if v.len() != num_ratings - 1 && v.len() != num_ratings {
                    return Err(crate::error::Error::Config(format!(
                        "obligors_per_rating must list {} performing ratings",
                        num_ratings - 1
                    )));
                }
                let mut counts = v.clone();
                counts.resize(num_ratings, 0);
                counts
            }
        };
        counts[num_ratings - 1] = 0;
        Ok(counts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionStageConfig {
    #[serde(default = "ProjectionStageConfig::default_scenarios")]
    pub scenarios: usize,
}

impl ProjectionStageConfig {
    fn default_scenarios() -> usize {
        100
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConvergenceConfig {
    #[serde(default = "McConvergenceConfig::default_points")]
    pub points: usize,
    #[serde(default = "McConvergenceConfig::default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default = "McConvergenceConfig::default_benchmark")]
    pub benchmark_paths: usize,
    #[serde(default = "McConvergenceConfig::default_seeds")]
    pub study_seeds: usize,
    /// Tolerance envelope for the 1000-path run (periods k >= 2).
    #[serde(default = "McConvergenceConfig::default_envelope")]
    pub envelope: f64,
    /// Floor on the benchmark EPD when forming relative differences.
    #[serde(default = "McConvergenceConfig::default_floor")]
    pub rel_floor: f64,
}

impl McConvergenceConfig {
    fn default_points() -> usize {
        100
    }
    fn default_budgets() -> Vec<usize> {
        vec![500, 1000, 5000, 10_000]
    }
    fn default_benchmark() -> usize {
        20_000
    }
    fn default_seeds() -> usize {
        5
    }
    fn default_envelope() -> f64 {
        0.15
    }
    fn default_floor() -> f64 {
        1e-4
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpdGridConfig {
    #[serde(default = "EpdGridConfig::default_scenarios")]
    pub test_scenarios: usize,
    #[serde(default = "EpdGridConfig::default_benchmark")]
    pub benchmark_paths: usize,
    #[serde(default = "McConvergenceConfig::default_floor")]
    pub rel_floor: f64,
}

impl EpdGridConfig {
    fn default_scenarios() -> usize {
        1000
    }
    fn default_benchmark() -> usize {
        20_000
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElgdConfig {
    #[serde(default = "ElgdConfig::default_ltv")]
    pub ltv0: Vec<f64>,
    #[serde(default = "ElgdConfig::default_lc0")]
    pub lc0: Vec<f64>,
    #[serde(default = "ElgdConfig::default_horizons")]
    pub horizons: usize,
    #[serde(default = "ElgdConfig::default_paths")]
    pub mc_paths: usize,
}

impl ElgdConfig {
    fn default_ltv() -> Vec<f64> {
        vec![0.8, 1.0, 1.5, 2.0]
    }
    fn default_lc0() -> Vec<f64> {
        vec![-0.1, 0.0, 0.1]
    }
    fn default_horizons() -> usize {
        30
    }
    fn default_paths() -> usize {
        1_000_000
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossStageConfig {
    #[serde(default = "LossStageConfig::default_scenarios")]
    pub scenarios: usize,
    #[serde(default = "LossStageConfig::default_benchmark")]
    pub benchmark_paths: usize,
    #[serde(default = "LossStageConfig::default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default = "LossStageConfig::default_ltv")]
    pub ltv0: f64,
}

impl LossStageConfig {
    fn default_scenarios() -> usize {
        1_000_000
    }
    fn default_benchmark() -> usize {
        1_000
    }
    fn default_quantiles() -> Vec<f64> {
        vec![0.95, 0.99, 0.999]
    }
    fn default_ltv() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentsConfig {
    /// Global seed; required (no wall-clock seeding anywhere).
    pub seed: u64,
    /// Uniform divisor applied to the large scenario/path counts.
    #[serde(default = "default_one")]
    pub scale_divisor: usize,
    #[serde(default = "defaults::datagen")]
    pub datagen: DatagenConfig,
    #[serde(default = "defaults::projection")]
    pub projection: ProjectionStageConfig,
    #[serde(default = "defaults::mc_convergence")]
    pub mc_convergence: McConvergenceConfig,
    #[serde(default = "defaults::epd_grid")]
    pub epd_grid: EpdGridConfig,
    #[serde(default = "defaults::elgd")]
    pub elgd: ElgdConfig,
    #[serde(default = "defaults::loss")]
    pub loss: LossStageConfig,
}

mod defaults {
    use super::*;

    pub fn datagen() -> DatagenConfig {
        DatagenConfig { periods: DatagenConfig::default_periods(), obligors_per_rating: DatagenConfig::default_obligors() }
    }
    pub fn projection() -> ProjectionStageConfig {
        ProjectionStageConfig { scenarios: ProjectionStageConfig::default_scenarios() }
    }
    pub fn mc_convergence() -> McConvergenceConfig {
        McConvergenceConfig {
            points: McConvergenceConfig::default_points(),
            budgets: McConvergenceConfig::default_budgets(),
            benchmark_paths: McConvergenceConfig::default_benchmark(),
            study_seeds: McConvergenceConfig::default_seeds(),
            envelope: McConvergenceConfig::default_envelope(),
            rel_floor: McConvergenceConfig::default_floor(),
        }
    }
    pub fn epd_grid() -> EpdGridConfig {
        EpdGridConfig {
            test_scenarios: EpdGridConfig::default_scenarios(),
            benchmark_paths: EpdGridConfig::default_benchmark(),
            rel_floor: McConvergenceConfig::default_floor(),
        }
    }
    pub fn elgd() -> ElgdConfig {
        ElgdConfig {
            ltv0: ElgdConfig::default_ltv(),
            lc0: ElgdConfig::default_lc0(),
            horizons: ElgdConfig::default_horizons(),
            mc_paths: ElgdConfig::default_paths(),
        }
    }
    pub fn loss() -> LossStageConfig {
        LossStageConfig {
            scenarios: LossStageConfig::default_scenarios(),
            benchmark_paths: LossStageConfig::default_benchmark(),
            quantiles: LossStageConfig::default_quantiles(),
            ltv0: LossStageConfig::default_ltv(),
        }
    }
}

/// Full experiment configuration plus the digest of its source text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub transition_high: TransitionParamsConfig,
    pub transition_low_2f: LowModelConfig,
    pub transition_low_1f: LowModelConfig,
    pub collateral: CollateralConfig,
    pub loan: LoanConfig,
    pub grid: GridConfig,
    pub experiments: ExperimentsConfig,
    #[serde(skip)]
    digest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text)?;
        config.digest = sha256_hex(text.as_bytes());
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    /// SHA-256 of the configuration text.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// SHA-256 of the model parameter sections only.
    pub fn params_digest(&self) -> String {
        #[derive(Serialize)]
        struct ParamsOnly<'a> {
            transition_high: &'a TransitionParamsConfig,
            collateral: &'a CollateralConfig,
            loan: &'a LoanConfig,
            grid: &'a GridConfig,
        }
        let body = toml::to_string(&ParamsOnly {
            transition_high: &self.transition_high,
            collateral: &self.collateral,
            loan: &self.loan,
            grid: &self.grid,
        })
        .unwrap_or_default();
        sha256_hex(body.as_bytes())
    }

    fn validate(&self) -> Result<()> {
        if self.experiments.scale_divisor == 0 {
            return Err(Error::Config("scale_divisor must be at least 1".into()));
        }
        if self.loan.maturity <= self.loan.horizon || self.loan.horizon != 1 {
            return Err(Error::Config("loan must have maturity > horizon = 1".into()));
        }
        if self.experiments.loss.quantiles.iter().any(|&q| !(0.0 < q && q < 1.0)) {
            return Err(Error::Config("loss quantiles must lie in (0, 1)".into()));
        }
        if self.experiments.mc_convergence.budgets.is_empty() {
            return Err(Error::Config("mc_convergence needs at least one path budget".into()));
        }
        if self.experiments.elgd.horizons == 0 || self.experiments.elgd.ltv0.is_empty() || self.experiments.elgd.lc0.is_empty()
        {
            return Err(Error::Config("elgd stage needs horizons >= 1 and non-empty grids".into()));
        }
        self.transition_high.to_params().map_err(|e| Error::Config(format!("transition_high: {e}")))?;
        self.collateral.to_params().map_err(|e| Error::Config(format!("collateral: {e}")))?;
        self.loan.to_loan().map_err(|e| Error::Config(format!("loan: {e}")))?;
        Ok(())
    }

    /// Divide `count` by the scale divisor with a floor.
    pub fn scaled(&self, count: usize, minimum: usize) -> usize {
        (count / self.experiments.scale_divisor).max(minimum)
    }
}
