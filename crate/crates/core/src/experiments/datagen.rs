//! Calibration-data generation: simulate migration counts from the
//! benchmark model over the calibration horizon.

use crate::error::Result;
use crate::rng::domains;
use crate::transition::{simulate_factors, simulate_migrations, FactorStart};

use super::{high_params, Stage, StageContext, COUNTS_FILE};

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let cfg = &ctx.config.experiments.datagen;
    let high = high_params(ctx)?;
    let mut rng = ctx.stream(domains::DATAGEN, 0).rng();
    let path = simulate_factors(&high, cfg.periods, &FactorStart::Initial, &mut rng)?;

    let initial = cfg.initial_counts(high.num_ratings())?;
    let counts = simulate_migrations(&high, &path, &initial, &mut rng)?;

    let mut writer = ctx.csv_writer(Stage::Datagen, COUNTS_FILE)?;
    counts.write_csv(&mut writer)?;
    writer.flush()?;
    Ok(vec![COUNTS_FILE.to_string()])
}
