//! Calibration of the low-dimensional transition models on the generated
//! migration data.

use crate::config::{LowModelConfig, LowModelInit, TransitionParamsConfig};
use crate::error::{Error, Result};
use crate::transition::calibrate::{approximate_log_likelihood, calibrate, initial_params_from_counts};
use crate::transition::MigrationCounts;

use super::{params_file, Stage, StageContext, CALIBRATION_REPORT_FILE, COUNTS_FILE};

fn calibrate_one(
    counts: &MigrationCounts,
    cfg: &LowModelConfig,
) -> Result<(crate::transition::TransitionModelParams, f64, f64)> {
    let init = match &cfg.init {
        LowModelInit::Keyword(word) if word == "auto" => initial_params_from_counts(counts, cfg.dim)?,
        LowModelInit::Keyword(word) => {
            return Err(Error::Config(format!("unknown init keyword {word:?} (expected \"auto\")")));
        }
        LowModelInit::Explicit(params) => params.to_params()?,
    };
    let options = cfg.calibration_options();
    let ll_init = approximate_log_likelihood(&init, counts, options.mode_tol, options.mode_max_iter)?;
    let calibrated = calibrate(counts, cfg.dim, &init, &options)?;
    let ll_final = approximate_log_likelihood(&calibrated, counts, options.mode_tol, options.mode_max_iter)?;
    Ok((calibrated, ll_init, ll_final))
}

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let counts_path = ctx.require_file(COUNTS_FILE, "datagen")?;
    let counts = MigrationCounts::load_csv(&counts_path)?;

    let jobs: [(&str, &LowModelConfig); 2] =
        [("2f", &ctx.config.transition_low_2f), ("1f", &ctx.config.transition_low_1f)];

    let mut files = Vec::new();
    let mut report = ctx.csv_writer(Stage::Calibrate, CALIBRATION_REPORT_FILE)?;
    report.write_record(["model", "dim", "loglik_init", "loglik_final"])?;
    for (label, cfg) in jobs {
        let (params, ll_init, ll_final) = calibrate_one(&counts, cfg)?;
        let file = params_file(label);
        let exported = TransitionParamsConfig::from_params(&params);
        let text = toml::to_string(&exported).map_err(|e| Error::Config(format!("serialize {file}: {e}")))?;
        std::fs::write(ctx.out_dir.join(&file), text)?;
        report.write_record([
            label.to_string(),
            cfg.dim.to_string(),
            ll_init.to_string(),
            ll_final.to_string(),
        ])?;
        log::info!("calibrated {label}: loglik {ll_init:.3} -> {ll_final:.3}");
        files.push(file);
    }
    report.flush()?;
    files.push(CALIBRATION_REPORT_FILE.to_string());
    Ok(files)
}
