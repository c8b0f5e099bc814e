//! Expected-LGD validation: closed form against Monte Carlo on the
//! (LTV0, lc0, horizon) grid.

use crate::error::Result;
use crate::lgd::{elgd_closed_form, elgd_monte_carlo};
use crate::rng::domains;

use super::{Stage, StageContext, ELGD_FILE};

pub fn run(ctx: &StageContext<'_>) -> Result<Vec<String>> {
    let cfg = &ctx.config.experiments.elgd;
    let base = ctx.config.collateral.to_params()?;
    let mc_paths = ctx.config.scaled(cfg.mc_paths, 10_000);

    let mut writer = ctx.csv_writer(Stage::Elgd, ELGD_FILE)?;
    writer.write_record(["t", "ltv0", "lc0", "elgd_closed", "elgd_mc", "se"])?;
    let mut index = 0u64;
    for &ltv0 in &cfg.ltv0 {
        let context = ctx.config.loan.lgd_context(ltv0)?;
        for &lc0 in &cfg.lc0 {
            let params = base.at_initial_log_return(lc0);
            for t in 1..=cfg.horizons {
                let strike = context.strike(t.min(context.horizon_count()));
                let closed = elgd_closed_form(&params, strike, t)?;
                let (mc, se) = elgd_monte_carlo(&params, strike, t, mc_paths, ctx.stream(domains::ELGD_MC, index))?;
                writer.write_record([
                    t.to_string(),
                    ltv0.to_string(),
                    lc0.to_string(),
                    closed.to_string(),
                    mc.to_string(),
                    se.to_string(),
                ])?;
                index += 1;
            }
        }
    }
    writer.flush()?;
    Ok(vec![ELGD_FILE.to_string()])
}
