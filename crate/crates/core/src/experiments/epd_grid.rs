//! Grid training for every projection method plus expected-PD accuracy
//! against per-scenario Monte Carlo benchmarks.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::{assemble_grid, grid_starting_points, simulate_grid_targets, GridSpec, ValuationGrid};
use crate::rng::domains;
use crate::transition::{expected_pd_curves, simulate_factors, FactorStart};

use super::{
    build_projectors, grid_points_file, grid_targets_file, high_params, Stage, StageContext, EPD_ERRORS_FILE,
};

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let config = ctx.config;
    let high = high_params(ctx)?;
    let projectors = build_projectors(ctx, &high)?;
    let horizon = config.loan.horizon;
    let maturity = config.loan.maturity;

    let grid_spec = GridSpec {
        nodes_per_dim: config.grid.nodes_per_dim,
        sigma_mult: config.grid.sigma_mult,
        fill_points: config.scaled(config.grid.fill_points, 10),
    };
    let training_paths = config.scaled(config.grid.training_paths, 100);

    // Shared Monte Carlo targets; one projection pass per method.
    let points = grid_starting_points(&high, &grid_spec, ctx.stream(domains::GRID_TRAINING, 0))?;
    let curves = simulate_grid_targets(&high, &points, maturity, training_paths, ctx.stream(domains::GRID_TRAINING, 1))?;
    log::info!("trained {} grid points with {training_paths} paths each", points.len());

    let mut files = Vec::new();
    let mut grids: Vec<(&'static str, ValuationGrid)> = Vec::new();
    for (method, projector) in &projectors {
        let grid = assemble_grid(
            &high,
            &points,
            &curves,
            projector,
            horizon,
            maturity,
            config.grid.knn,
            config.grid.idw_power,
        )?;
        let points_file = grid_points_file(method);
        let targets_file = grid_targets_file(method);
        let mut w = ctx.csv_writer(Stage::EpdGrid, &points_file)?;
        grid.write_points_csv(&mut w)?;
        w.flush()?;
        let mut w = ctx.csv_writer(Stage::EpdGrid, &targets_file)?;
        grid.write_targets_csv(&mut w)?;
        w.flush()?;
        files.push(points_file);
        files.push(targets_file);
        grids.push((method, grid));
    }

    // Accuracy on fresh scenarios against direct Monte Carlo benchmarks.
    let n_test = config.scaled(config.experiments.epd_grid.test_scenarios, 20);
    let benchmark_paths = config.scaled(config.experiments.epd_grid.benchmark_paths, 100);
    let rel_floor = config.experiments.epd_grid.rel_floor;
    let num_ratings = high.num_ratings() - 1;

    // errors[scenario][method][rating][k-1]
    let errors: Vec<Vec<Vec<Vec<f64>>>> = (0..n_test)
        .into_par_iter()
        .map(|scenario| -> Result<Vec<Vec<Vec<f64>>>> {
            let stream = ctx.stream(domains::EPD_TEST, scenario as u64);
            let mut rng = stream.substream(0).rng();
            let path = simulate_factors(&high, horizon + 1, &FactorStart::Initial, &mut rng)
                .map_err(|e| e.in_scenario(scenario))?;
            let bench = expected_pd_curves(&high, path.value(horizon), maturity, benchmark_paths, stream.substream(1))
                .map_err(|e| e.in_scenario(scenario))?;
            grids
                .iter()
                .zip(&projectors)
                .map(|((_, grid), (_, projector))| {
                    let coords = projector
                        .project_scenario(&high, &path, horizon)
                        .map_err(|e| e.in_scenario(scenario))?;
                    (0..num_ratings)
                        .map(|rating| {
                            let estimate = grid.query(&coords, rating).map_err(|e| e.in_scenario(scenario))?;
                            Ok((0..maturity)
                                .map(|k| (estimate[k] - bench[rating][k]).abs() / bench[rating][k].max(rel_floor))
                                .collect())
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut writer = ctx.csv_writer(Stage::EpdGrid, EPD_ERRORS_FILE)?;
    writer.write_record(["method", "rating", "k", "avg_rel_error"])?;
    for (mi, (method, _)) in grids.iter().enumerate() {
        for rating in 0..num_ratings {
            for k in 1..=maturity {
                let avg = errors.iter().map(|e| e[mi][rating][k - 1]).sum::<f64>() / n_test as f64;
                writer.write_record([
                    method.to_string(),
                    (rating + 1).to_string(),
                    k.to_string(),
                    avg.to_string(),
                ])?;
            }
        }
    }
    writer.flush()?;
    files.push(EPD_ERRORS_FILE.to_string());
    Ok(files)
}
