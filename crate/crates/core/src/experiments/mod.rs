//! Batch experiment stages behind the CLI.
//!
//! A run is a sequence of stages, each of which reads its inputs from the
//! output directory (so stages are individually resumable), writes CSV
//! result tables prefixed by a manifest comment line, and records a JSON
//! manifest with the wall time. Stage order for a full run:
//! datagen -> calibrate -> projection -> mc_convergence -> epd_grid ->
//! elgd -> loss.

mod calibrate_stage;
mod datagen;
mod elgd_stage;
mod epd_grid;
mod loss_stage;
mod mc_convergence;
mod projection_stage;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bayes::stationary_distribution;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grid::Projector;
use crate::projection::{pca_fit, ProjectionProblem};
use crate::rng::RngStream;
use crate::transition::{FactorPath, TransitionModelParams};

pub const COUNTS_FILE: &str = "counts.csv";
pub const CALIBRATION_REPORT_FILE: &str = "calibration_report.csv";
pub const PROJECTION_ERRORS_FILE: &str = "projection_errors.csv";
pub const PROJECTION_COORDS_FILE: &str = "projection_coords.csv";
pub const PROJECTION_SUMMARY_FILE: &str = "projection_summary.csv";
pub const MC_CONVERGENCE_FILE: &str = "mc_convergence.csv";
pub const MC_CONVERGENCE_SUMMARY_FILE: &str = "mc_convergence_summary.csv";
pub const EPD_ERRORS_FILE: &str = "epd_errors.csv";
pub const ELGD_FILE: &str = "elgd.csv";
pub const LOSS_METRICS_FILE: &str = "loss_metrics.csv";

/// Projection-method labels used in file names and CSV columns.
pub const METHOD_BAYES_2F: &str = "bayesian_2f";
pub const METHOD_PCA_2: &str = "pca_2";
pub const METHOD_BAYES_1F: &str = "bayesian_1f";
pub const METHOD_PCA_1: &str = "pca_1";
pub const METHOD_BENCHMARK: &str = "benchmark";

pub fn params_file(label: &str) -> String {
    format!("params_{label}.toml")
}

pub fn grid_points_file(method: &str) -> String {
    format!("grid_points_{method}.csv")
}

pub fn grid_targets_file(method: &str) -> String {
    format!("grid_targets_{method}.csv")
}

pub fn losses_file(method: &str) -> String {
    format!("losses_{method}.csv")
}

/// Pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Datagen,
    Calibrate,
    Projection,
    McConvergence,
    EpdGrid,
    Elgd,
    Loss,
    All,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Datagen => "datagen",
            Stage::Calibrate => "calibrate",
            Stage::Projection => "projection",
            Stage::McConvergence => "mc_convergence",
            Stage::EpdGrid => "epd_grid",
            Stage::Elgd => "elgd",
            Stage::Loss => "loss",
            Stage::All => "all",
        }
    }

    pub const ORDERED: [Stage; 7] = [
        Stage::Datagen,
        Stage::Calibrate,
        Stage::Projection,
        Stage::McConvergence,
        Stage::EpdGrid,
        Stage::Elgd,
        Stage::Loss,
    ];
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "datagen" => Ok(Stage::Datagen),
            "calibrate" => Ok(Stage::Calibrate),
            "projection" => Ok(Stage::Projection),
            "mc_convergence" | "mc" => Ok(Stage::McConvergence),
            "epd_grid" | "epd" => Ok(Stage::EpdGrid),
            "elgd" => Ok(Stage::Elgd),
            "loss" => Ok(Stage::Loss),
            "all" => Ok(Stage::All),
            other => Err(Error::Config(format!(
                "unknown stage {other:?} (expected datagen|calibrate|projection|mc_convergence|epd_grid|elgd|loss|all)"
            ))),
        }
    }
}

/// Everything a stage needs to run.
pub struct StageContext<'a> {
    pub config: &'a ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl<'a> StageContext<'a> {
    pub fn new(config: &'a ExperimentConfig, out_dir: &Path, seed_override: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(StageContext {
            config,
            out_dir: out_dir.to_path_buf(),
            seed: seed_override.unwrap_or(config.experiments.seed),
        })
    }

    pub fn stream(&self, domain: u64, index: u64) -> RngStream {
        RngStream::new(self.seed, domain, index)
    }

    /// CSV writer whose first line is the manifest comment.
    pub(crate) fn csv_writer(&self, stage: Stage, filename: &str) -> Result<csv::Writer<std::fs::File>> {
        use std::io::Write;
        let path = self.out_dir.join(filename);
        let mut file = std::fs::File::create(&path)?;
        writeln!(
            file,
            "# manifest stage={} seed={} config={} params={}",
            stage.name(),
            self.seed,
            self.config.digest(),
            self.config.params_digest()
        )?;
        Ok(csv::Writer::from_writer(file))
    }

    pub(crate) fn require_file(&self, filename: &str, produced_by: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(filename);
        if !path.exists() {
            return Err(Error::Config(format!(
                "{filename} not found in {}; run the {produced_by} stage first",
                self.out_dir.display()
            )));
        }
        Ok(path)
    }
}

/// Outcome of one stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub files: Vec<String>,
    pub wall_seconds: f64,
}

fn write_stage_manifest(ctx: &StageContext<'_>, report: &StageReport) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        stage: &'a str,
        seed: u64,
        config_digest: &'a str,
        params_digest: String,
        wall_seconds: f64,
        files: &'a [String],
    }
    let manifest = Manifest {
        stage: &report.stage,
        seed: ctx.seed,
        config_digest: ctx.config.digest(),
        params_digest: ctx.config.params_digest(),
        wall_seconds: report.wall_seconds,
        files: &report.files,
    };
    let path = ctx.out_dir.join(format!("manifest_{}.json", report.stage));
    std::fs::write(path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

/// Run one stage (or the whole ordered pipeline for [`Stage::All`]).
pub fn run_stage(stage: Stage, ctx: &StageContext<'_>) -> Result<Vec<StageReport>> {
    let stages: &[Stage] = match stage {
        Stage::All => &Stage::ORDERED,
        _ => std::slice::from_ref(&stage),
    };
    let mut reports = Vec::new();
    for &st in stages {
        let start = Instant::now();
        let files = match st {
            Stage::Datagen => datagen::run(ctx),
            Stage::Calibrate => calibrate_stage::run(ctx),
            Stage::Projection => projection_stage::run(ctx),
            Stage::McConvergence => mc_convergence::run(ctx),
            Stage::EpdGrid => epd_grid::run(ctx),
            Stage::Elgd => elgd_stage::run(ctx),
            Stage::Loss => loss_stage::run(ctx),
            Stage::All => unreachable!(),
        }
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("stage {}: {m}", st.name())),
            Error::Contract(m) => Error::Contract(format!("stage {}: {m}", st.name())),
            Error::Numerical(m) => Error::Numerical(format!("stage {}: {m}", st.name())),
            other => other,
        })?;
        let report = StageReport {
            stage: st.name().to_string(),
            files,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        write_stage_manifest(ctx, &report)?;
        log::info!("stage {} finished in {:.2}s", report.stage, report.wall_seconds);
        reports.push(report);
    }
    Ok(reports)
}

// ----- helpers shared by several stages -----

pub(crate) fn high_params(ctx: &StageContext<'_>) -> Result<TransitionModelParams> {
    ctx.config.transition_high.to_params()
}

/// Load calibrated low-dimensional parameters written by the calibrate
/// stage.
pub(crate) fn load_calibrated(ctx: &StageContext<'_>, label: &str) -> Result<TransitionModelParams> {
    let path = ctx.require_file(&params_file(label), "calibrate")?;
    let text = std::fs::read_to_string(path)?;
    let config: crate::config::TransitionParamsConfig = toml::from_str(&text)?;
    config.to_params()
}

/// The factor history behind the calibration data: smoothed means under
/// the benchmark model over the generated migration counts. This is the
/// factor series a practitioner extracts from the same historical window
/// every other model is calibrated on, and it is what the waterfall's PCA
/// bases are fitted to.
pub(crate) fn historical_factors(ctx: &StageContext<'_>, high: &TransitionModelParams) -> Result<FactorPath> {
    let counts_path = ctx.require_file(COUNTS_FILE, "datagen")?;
    let counts = crate::transition::MigrationCounts::load_csv(&counts_path)?;
    let observations = crate::transition::count_observations(high, &counts)?;
    let estimate = crate::bayes::mode_estimate(
        &observations,
        high.state_space(),
        crate::bayes::MODE_TOL,
        crate::bayes::MODE_MAX_ITER,
    )?;
    FactorPath::new(estimate.smoothed.iter().map(|b| b.mean.clone()).collect())
}

/// The four projection methods of the waterfall, keyed by label.
pub(crate) fn build_projectors(
    ctx: &StageContext<'_>,
    high: &TransitionModelParams,
) -> Result<Vec<(&'static str, Projector)>> {
    let low2 = load_calibrated(ctx, "2f")?;
    let low1 = load_calibrated(ctx, "1f")?;
    let history = historical_factors(ctx, high)?;
    let sample = [history];
    let pca2 = pca_fit(&sample, 2)?;
    let pca1 = pca_fit(&sample, 1)?;
    let weight = ctx.config.grid.pseudo_count_weight;
    let horizon = ctx.config.loan.horizon;
    let bayes = |low: TransitionModelParams| -> Result<Projector> {
        let initial = stationary_distribution(low.state_space())?;
        Ok(Projector::Bayesian(ProjectionProblem::new(low, initial, horizon, weight)?))
    };
    Ok(vec![
        (METHOD_BAYES_2F, bayes(low2)?),
        (METHOD_PCA_2, Projector::Pca(pca2)),
        (METHOD_BAYES_1F, bayes(low1)?),
        (METHOD_PCA_1, Projector::Pca(pca1)),
    ])
}

/// Relative Frobenius distance between transition matrices over the
/// performing rows.
pub(crate) fn transition_rel_error(
    estimate: &crate::transition::TransitionMatrix,
    truth: &crate::transition::TransitionMatrix,
    rows: Option<usize>,
) -> f64 {
    let r = truth.num_ratings();
    let take = rows.unwrap_or(r - 1);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..take {
        for j in 0..r {
            let diff = estimate.prob(i, j) - truth.prob(i, j);
            num += diff * diff;
            den += truth.prob(i, j) * truth.prob(i, j);
        }
    }
    (num / den).sqrt()
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
