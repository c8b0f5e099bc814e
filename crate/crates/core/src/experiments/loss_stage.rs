//! Loss-distribution construction and risk-metric comparison: benchmark
//! (direct Monte Carlo EPD per scenario) against the grid-based methods.

use crate::error::Result;
use crate::grid::ValuationGrid;
use crate::loss::{build_loss_distribution, risk_metrics, EpdSource, LossDistribution, RatingMetrics};
use crate::rng::domains;

use super::{
    build_projectors, grid_points_file, grid_targets_file, high_params, losses_file, Stage, StageContext,
    LOSS_METRICS_FILE, METHOD_BENCHMARK,
};

fn metric_label(level: f64) -> String {
    let scaled = level * 100.0;
    if (scaled - scaled.round()).abs() < 1e-9 {
        format!("var{}", scaled.round() as u64)
    } else {
        format!("var{scaled}")
    }
}

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let config = ctx.config;
    let cfg = &config.experiments.loss;
    let high = high_params(ctx)?;
    let projectors = build_projectors(ctx, &high)?;
    let loan = config.loan.to_loan()?;
    let collateral = config.collateral.to_params()?;
    let lgd_context = config.loan.lgd_context(cfg.ltv0)?;
    let n_scenarios = config.scaled(cfg.scenarios, 100);
    let benchmark_paths = config.scaled(cfg.benchmark_paths, 100);
    let stream = ctx.stream(domains::LOSS_SCENARIOS, 0);

    // Load the grids persisted by the epd_grid stage.
    let mut grids: Vec<(&'static str, ValuationGrid)> = Vec::new();
    for (method, _) in &projectors {
        let points = ctx.require_file(&grid_points_file(method), "epd_grid")?;
        let targets = ctx.require_file(&grid_targets_file(method), "epd_grid")?;
        let grid = ValuationGrid::load_csv(&points, &targets, config.loan.horizon, config.grid.knn, config.grid.idw_power)?;
        grids.push((method, grid));
    }

    let mut files = Vec::new();
    let write_losses = |method: &str, dist: &LossDistribution| -> Result<String> {
        let file = losses_file(method);
        let mut writer = ctx.csv_writer(Stage::Loss, &file)?;
        writer.write_record(["scenario", "rating", "loss"])?;
        for rating in 0..dist.num_ratings() {
            for (scenario, loss) in dist.losses(rating).iter().enumerate() {
                writer.write_record([scenario.to_string(), (rating + 1).to_string(), loss.to_string()])?;
            }
        }
        writer.flush()?;
        Ok(file)
    };

    let benchmark = build_loss_distribution(
        &loan,
        &EpdSource::DirectMonteCarlo { n_paths: benchmark_paths },
        &high,
        &collateral,
        &lgd_context,
        n_scenarios,
        stream,
    )?;
    files.push(write_losses(METHOD_BENCHMARK, &benchmark)?);
    let benchmark_metrics = risk_metrics(&benchmark, &cfg.quantiles)?;

    let mut method_metrics: Vec<(&'static str, Vec<RatingMetrics>)> = Vec::new();
    for ((method, projector), (_, grid)) in projectors.iter().zip(&grids) {
        let dist = build_loss_distribution(
            &loan,
            &EpdSource::Grid { grid, projector },
            &high,
            &collateral,
            &lgd_context,
            n_scenarios,
            stream,
        )?;
        files.push(write_losses(method, &dist)?);
        method_metrics.push((method, risk_metrics(&dist, &cfg.quantiles)?));
        log::info!("loss distribution built for {method}");
    }

    let mut writer = ctx.csv_writer(Stage::Loss, LOSS_METRICS_FILE)?;
    writer.write_record(["rating", "metric", "method", "value", "rel_diff_vs_benchmark"])?;
    let mut emit = |rating: usize, metric: &str, method: &str, value: f64, reference: f64| -> Result<()> {
        let rel = if reference != 0.0 { (value - reference).abs() / reference.abs() } else { f64::NAN };
        writer.write_record([
            (rating + 1).to_string(),
            metric.to_string(),
            method.to_string(),
            value.to_string(),
            rel.to_string(),
        ])?;
        Ok(())
    };
    for (rating, bench) in benchmark_metrics.iter().enumerate() {
        emit(rating, "el", METHOD_BENCHMARK, bench.expected_loss, bench.expected_loss)?;
        for &(level, value) in &bench.value_at_risk {
            emit(rating, &metric_label(level), METHOD_BENCHMARK, value, value)?;
        }
        for (method, metrics) in &method_metrics {
            let m = &metrics[rating];
            emit(rating, "el", method, m.expected_loss, bench.expected_loss)?;
            for (&(level, value), &(_, reference)) in m.value_at_risk.iter().zip(&bench.value_at_risk) {
                emit(rating, &metric_label(level), method, value, reference)?;
            }
        }
    }
    writer.flush()?;
    files.push(LOSS_METRICS_FILE.to_string());
    Ok(files)
}
