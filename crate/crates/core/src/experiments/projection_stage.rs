//! Projection comparison: relative transition-probability errors of the
//! Bayesian and PCA projections on fresh benchmark scenarios.

use rayon::prelude::*;

use crate::error::Result;
use crate::rng::domains;
use crate::transition::{simulate_factors, FactorStart};

use super::{
    build_projectors, high_params, median, transition_rel_error, Stage, StageContext, PROJECTION_COORDS_FILE,
    PROJECTION_ERRORS_FILE, PROJECTION_SUMMARY_FILE,
};

struct ScenarioRow {
    scenario: usize,
    method: &'static str,
    coords: Vec<f64>,
    rel_error: f64,
    rel_error_rating1: f64,
}

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let high = high_params(ctx)?;
    let projectors = build_projectors(ctx, &high)?;
    let horizon = ctx.config.loan.horizon;
    let n_scenarios = ctx.config.scaled(ctx.config.experiments.projection.scenarios, 10);

    let rows: Vec<Vec<ScenarioRow>> = (0..n_scenarios)
        .into_par_iter()
        .map(|scenario| -> Result<Vec<ScenarioRow>> {
            let mut rng = ctx.stream(domains::PROJECTION_SCENARIOS, scenario as u64).rng();
            let path = simulate_factors(&high, horizon + 1, &FactorStart::Initial, &mut rng)
                .map_err(|e| e.in_scenario(scenario))?;
            let truth = high.transition_matrix(path.value(horizon));
            projectors
                .iter()
                .map(|(method, projector)| {
                    let (coords, estimate) = projector
                        .projected_transition(&high, &path, horizon)
                        .map_err(|e| e.in_scenario(scenario))?;
                    Ok(ScenarioRow {
                        scenario,
                        method,
                        coords,
                        rel_error: transition_rel_error(&estimate, &truth, None),
                        rel_error_rating1: transition_rel_error(&estimate, &truth, Some(1)),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let max_dim = projectors.iter().map(|(_, p)| p.dim_low()).max().unwrap_or(0);

    let mut errors = ctx.csv_writer(Stage::Projection, PROJECTION_ERRORS_FILE)?;
    errors.write_record(["scenario", "method", "rel_error", "rel_error_rating1"])?;
    let mut coords_file = ctx.csv_writer(Stage::Projection, PROJECTION_COORDS_FILE)?;
    let mut header = vec!["scenario".to_string(), "k".to_string()];
    for c in 1..=max_dim {
        header.push(format!("coord_{c}"));
    }
    header.push("method".to_string());
    coords_file.write_record(&header)?;

    for scenario_rows in &rows {
        for row in scenario_rows {
            errors.write_record([
                row.scenario.to_string(),
                row.method.to_string(),
                row.rel_error.to_string(),
                row.rel_error_rating1.to_string(),
            ])?;
            let mut record = vec![row.scenario.to_string(), horizon.to_string()];
            for c in 0..max_dim {
                record.push(row.coords.get(c).map(|v| v.to_string()).unwrap_or_default());
            }
            record.push(row.method.to_string());
            coords_file.write_record(&record)?;
        }
    }
    errors.flush()?;
    coords_file.flush()?;

    let mut summary = ctx.csv_writer(Stage::Projection, PROJECTION_SUMMARY_FILE)?;
    summary.write_record(["method", "median_rel_error", "mean_rel_error"])?;
    for (method, _) in &projectors {
        let mut values: Vec<f64> =
            rows.iter().flatten().filter(|r| r.method == *method).map(|r| r.rel_error).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let med = median(&mut values);
        summary.write_record([method.to_string(), med.to_string(), mean.to_string()])?;
        log::info!("projection {method}: median rel T error {med:.4}");
    }
    summary.flush()?;

    Ok(vec![
        PROJECTION_ERRORS_FILE.to_string(),
        PROJECTION_COORDS_FILE.to_string(),
        PROJECTION_SUMMARY_FILE.to_string(),
    ])
}
