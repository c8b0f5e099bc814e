//! Monte Carlo convergence study for the expected-PD estimation: relative
//! differences of smaller path budgets against a large-budget benchmark,
//! repeated over independent study seeds.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bayes::stationary_distribution;
use crate::error::Result;
use crate::math::psd_sqrt;
use crate::rng::domains;
use crate::transition::expected_pd_curves;

use super::{high_params, Stage, StageContext, MC_CONVERGENCE_FILE, MC_CONVERGENCE_SUMMARY_FILE};

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let cfg = &ctx.config.experiments.mc_convergence;
    let high = high_params(ctx)?;
    let maturity = ctx.config.loan.maturity;
    let n_points = ctx.config.scaled(cfg.points, 10);
    let budgets: Vec<usize> = cfg.budgets.iter().map(|&b| ctx.config.scaled(b, 50)).collect();
    let benchmark_paths = ctx.config.scaled(cfg.benchmark_paths, 100);
    let num_ratings = high.num_ratings() - 1;

    // Fixed starting points shared by all study seeds.
    let stationary = stationary_distribution(high.state_space())?;
    let sqrt_cov = psd_sqrt(&stationary.cov);
    let mut rng = ctx.stream(domains::MC_STUDY, u64::MAX >> 16).rng();
    let points: Vec<DVector<f64>> = (0..n_points)
        .map(|_| &sqrt_cov * DVector::from_fn(high.dim(), |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let runs_per_point = budgets.len() + 1;
    let stream_index = |seed_idx: usize, point: usize, run: usize| -> u64 {
        ((seed_idx * n_points + point) * runs_per_point + run) as u64
    };

    // rows[(seed, budget)][rating][k-1] = max relative diff over points
    let mut writer = ctx.csv_writer(Stage::McConvergence, MC_CONVERGENCE_FILE)?;
    writer.write_record(["study_seed", "budget", "rating", "k", "max_rel_diff"])?;
    let mut per_budget_means: Vec<Vec<f64>> = vec![Vec::new(); budgets.len()];

    for seed_idx in 0..cfg.study_seeds {
        // Per point: benchmark + all budget estimates.
        let diffs: Vec<Vec<Vec<Vec<f64>>>> = points
            .par_iter()
            .enumerate()
            .map(|(p, point)| -> Result<Vec<Vec<Vec<f64>>>> {
                let bench = expected_pd_curves(
                    &high,
                    point,
                    maturity,
                    benchmark_paths,
                    ctx.stream(domains::MC_STUDY, stream_index(seed_idx, p, 0)),
                )?;
                budgets
                    .iter()
                    .enumerate()
                    .map(|(bi, &budget)| {
                        // An estimate with the benchmark's budget reuses the
                        // benchmark stream and differs by exactly zero.
                        let run = if budget == benchmark_paths { 0 } else { bi + 1 };
                        let est = expected_pd_curves(
                            &high,
                            point,
                            maturity,
                            budget,
                            ctx.stream(domains::MC_STUDY, stream_index(seed_idx, p, run)),
                        )?;
                        Ok((0..num_ratings)
                            .map(|rating| {
                                (0..maturity)
                                    .map(|k| {
                                        let denom = bench[rating][k].max(cfg.rel_floor);
                                        (est[rating][k] - bench[rating][k]).abs() / denom
                                    })
                                    .collect()
                            })
                            .collect())
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;

        for (bi, &budget) in budgets.iter().enumerate() {
            let mut post_horizon_values = Vec::new();
            for rating in 0..num_ratings {
                for k in 1..=maturity {
                    let max_diff = diffs
                        .iter()
                        .map(|point_diffs| point_diffs[bi][rating][k - 1])
                        .fold(0.0f64, f64::max);
                    writer.write_record([
                        seed_idx.to_string(),
                        budget.to_string(),
                        (rating + 1).to_string(),
                        k.to_string(),
                        max_diff.to_string(),
                    ])?;
                    if k >= 2 {
                        post_horizon_values.push(max_diff);
                    }
                }
            }
            let mean = post_horizon_values.iter().sum::<f64>() / post_horizon_values.len() as f64;
            per_budget_means[bi].push(mean);
        }
    }
    writer.flush()?;

    let mut summary = ctx.csv_writer(Stage::McConvergence, MC_CONVERGENCE_SUMMARY_FILE)?;
    summary.write_record(["budget", "mean_max_rel_diff", "envelope", "benchmark_paths"])?;
    for (bi, &budget) in budgets.iter().enumerate() {
        let mean = per_budget_means[bi].iter().sum::<f64>() / per_budget_means[bi].len() as f64;
        summary.write_record([
            budget.to_string(),
            mean.to_string(),
            cfg.envelope.to_string(),
            benchmark_paths.to_string(),
        ])?;
        log::info!("mc convergence: budget {budget} mean max rel diff {mean:.4}");
    }
    summary.flush()?;

    Ok(vec![MC_CONVERGENCE_FILE.to_string(), MC_CONVERGENCE_SUMMARY_FILE.to_string()])
}
