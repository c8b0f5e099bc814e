//! Per-scenario loan losses and risk metrics.
//!
//! For a performing unit loan at horizon h = 1 with maturity n the loss,
//! conditioned on the horizon information, is
//!
//! ```text
//! L = sum_{k=2..n} d_k s EPD(k) + d_n EPD(n)
//!     - sum_{k=2..n} d_k EAD_k (EPD(k) - EPD(k-1)) (1 - ELGD(k)),
//! ```
//!
//! with EPD the expected cumulative PD curve (first entry = PD at the
//! horizon itself) and ELGD the expected LGD curve. The unit coefficient
//! on EPD(n) is kept even though the experiments set the principal
//! repayment to zero; `strict_pc_term = false` replaces it by the actual
//! principal so the inconsistency is testable either way.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Projector, ValuationGrid};
use crate::lgd::{elgd_closed_form, CollateralParams, LgdContext};
use crate::rng::RngStream;
use crate::transition::{expected_pd_curves, simulate_factors, FactorStart, TransitionModelParams};

/// Contract terms of the valued loan.
#[derive(Debug, Clone)]
pub struct LoanSpec {
    maturity: usize,
    horizon: usize,
    coupon: Option<f64>,
    principal: f64,
    ead: Vec<f64>,
    discounts: Vec<f64>,
    strict_pc_term: bool,
}

impl LoanSpec {
    /// Unit bullet loan: coupon 1/n, principal 0, EAD = 1, no discounting.
    pub fn new(maturity: usize, horizon: usize) -> Result<Self> {
        if !(maturity > horizon && horizon >= 1) {
            return Err(Error::Contract("need maturity > horizon >= 1".into()));
        }
        Ok(LoanSpec {
            maturity,
            horizon,
            coupon: None,
            principal: 0.0,
            ead: vec![1.0; maturity + 1],
            discounts: vec![1.0; maturity + 1],
            strict_pc_term: true,
        })
    }

    pub fn with_coupon(mut self, coupon: f64) -> Self {
        self.coupon = Some(coupon);
        self
    }

    pub fn with_principal(mut self, principal: f64) -> Self {
        self.principal = principal;
        self
    }

    pub fn with_strict_pc_term(mut self, on: bool) -> Self {
        self.strict_pc_term = on;
        self
    }

    /// EAD_k for k = 0..n.
    pub fn with_ead_schedule(mut self, ead: Vec<f64>) -> Result<Self> {
        if ead.len() != self.maturity + 1 || ead.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Contract("EAD schedule must be positive with n+1 entries".into()));
        }
        self.ead = ead;
        Ok(self)
    }

    /// Discount factors d_k for k = 0..n, each in (0, 1].
    pub fn with_discounts(mut self, discounts: Vec<f64>) -> Result<Self> {
        if discounts.len() != self.maturity + 1 || discounts.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::Contract("discount factors must lie in (0, 1] with n+1 entries".into()));
        }
        self.discounts = discounts;
        Ok(self)
    }

    pub fn maturity(&self) -> usize {
        self.maturity
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Per-period coupon; defaults to 1/n.
    pub fn coupon(&self) -> f64 {
        self.coupon.unwrap_or(1.0 / self.maturity as f64)
    }
}

/// Loss of a performing loan from its EPD and ELGD curves.
///
/// `epd` covers k = 1..n (first entry is the PD at the horizon itself, as
/// stored by the valuation grid); `elgd` covers k = 2..n. Only h = 1 is
/// supported, matching the curve conventions.
pub fn loan_loss(loan: &LoanSpec, epd: &[f64], elgd: &[f64]) -> Result<f64> {
    let n = loan.maturity;
    if loan.horizon != 1 {
        return Err(Error::Contract("the loss formula is implemented for horizon h = 1".into()));
    }
    if epd.len() != n {
        return Err(Error::Contract(format!("EPD curve must cover k = 1..{n}, got {} entries", epd.len())));
    }
    if elgd.len() != n - 1 {
        return Err(Error::Contract(format!(
            "ELGD curve must cover k = 2..{n}, got {} entries",
            elgd.len()
        )));
    }
    let mut prev = 0.0;
    for (idx, &p) in epd.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("EPD({}) = {p} outside [0, 1]", idx + 1)));
        }
        if p < prev - 1e-9 {
            return Err(Error::Contract(format!("EPD curve decreases at k = {}", idx + 1)));
        }
        prev = p;
    }
    if elgd.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(Error::Contract("ELGD entries must lie in [0, 1]".into()));
    }

    let s = loan.coupon();
    let mut loss = 0.0;
    for k in 2..=n {
        loss += loan.discounts[k] * s * epd[k - 1];
    }
    let pc_coefficient = if loan.strict_pc_term { 1.0 } else { loan.principal };
    loss += loan.discounts[n] * pc_coefficient * epd[n - 1];
    for k in 2..=n {
        let increment = epd[k - 1] - epd[k - 2];
        loss -= loan.discounts[k] * loan.ead[k] * increment * (1.0 - elgd[k - 2]);
    }
    Ok(loss)
}

/// How per-scenario EPD curves are produced.
pub enum EpdSource<'a> {
    /// Trained valuation grid queried at the projected coordinates.
    Grid { grid: &'a ValuationGrid, projector: &'a Projector },
    /// Direct Monte Carlo from the simulated horizon factor (benchmark).
    DirectMonteCarlo { n_paths: usize },
}

/// Per-scenario losses for every performing initial rating.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDistribution {
    /// losses[rating][scenario]
    losses: Vec<Vec<f64>>,
}

impl LossDistribution {
    pub fn num_ratings(&self) -> usize {
        self.losses.len()
    }

    pub fn num_scenarios(&self) -> usize {
        self.losses.first().map_or(0, Vec::len)
    }

    pub fn losses(&self, rating: usize) -> &[f64] {
        &self.losses[rating]
    }
}

/// Simulate the loss distribution.
///
/// Per scenario: draw the factor path to h+1 and the collateral log-return
/// to h, produce the EPD curve per rating from `source`, build the ELGD
/// curve from the closed form conditioned on the simulated lc_h, and
/// evaluate [`loan_loss`]. Scenario-level failures abort the whole run.
pub fn build_loss_distribution(
    loan: &LoanSpec,
    source: &EpdSource<'_>,
    high: &TransitionModelParams,
    collateral: &CollateralParams,
    lgd_context: &LgdContext,
    n_scenarios: usize,
    stream: RngStream,
) -> Result<LossDistribution> {
    if n_scenarios == 0 {
        return Err(Error::Contract("need at least one scenario".into()));
    }
    let h = loan.horizon;
    if h != 1 {
        return Err(Error::Contract("the simulation pipeline is implemented for horizon h = 1".into()));
    }
    let n = loan.maturity;
    if lgd_context.horizon_count() < n - h {
        return Err(Error::Contract("LGD context does not cover the post-horizon periods".into()));
    }
    if let EpdSource::Grid { grid, .. } = source {
        if grid.maturity() < n {
            return Err(Error::Contract("grid maturity is shorter than the loan".into()));
        }
    }
    let num_ratings = high.num_ratings() - 1;

    let per_scenario: Vec<Vec<f64>> = (0..n_scenarios)
        .into_par_iter()
        .map(|scenario| -> Result<Vec<f64>> {
            let scenario_stream = stream.substream(scenario as u64);
            let mut rng = scenario_stream.substream(0).rng();
            let path = simulate_factors(high, h + 1, &FactorStart::Initial, &mut rng)
                .map_err(|e| e.in_scenario(scenario))?;
            let mut lc = collateral.initial_log_return;
            for _ in 0..h {
                lc = collateral.drift + collateral.ar_coeff * lc + collateral.vol * rng.sample::<f64, _>(StandardNormal);
            }

            let epd_curves: Vec<Vec<f64>> = match source {
                EpdSource::Grid { grid, projector } => {
                    let coords = projector
                        .project_scenario(high, &path, h)
                        .map_err(|e| e.in_scenario(scenario))?;
                    (0..num_ratings)
                        .map(|rating| grid.query(&coords, rating).map_err(|e| e.in_scenario(scenario)))
                        .collect::<Result<_>>()?
                }
                EpdSource::DirectMonteCarlo { n_paths } => {
                    expected_pd_curves(high, path.value(h), n, *n_paths, scenario_stream.substream(1))
                        .map_err(|e| e.in_scenario(scenario))?
                }
            };

            let conditioned = collateral.at_initial_log_return(lc);
            let elgd: Vec<f64> = (2..=n)
                .map(|k| {
                    let t = k - h;
                    elgd_closed_form(&conditioned, lgd_context.strike(t), t).map_err(|e| e.in_scenario(scenario))
                })
                .collect::<Result<_>>()?;

            (0..num_ratings)
                .map(|rating| loan_loss(loan, &epd_curves[rating], &elgd).map_err(|e| e.in_scenario(scenario)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut losses = vec![Vec::with_capacity(n_scenarios); num_ratings];
    for scenario_losses in per_scenario {
        for (rating, value) in scenario_losses.into_iter().enumerate() {
            losses[rating].push(value);
        }
    }
    Ok(LossDistribution { losses })
}

/// Risk metrics of one rating's loss distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMetrics {
    pub rating: usize,
    pub expected_loss: f64,
    /// (quantile level, VaR) pairs in the requested order.
    pub value_at_risk: Vec<(f64, f64)>,
}

/// Expected loss and empirical VaR per rating.
///
/// VaR_q is the lower order statistic at index ceil(q N) (no
/// interpolation, reproducible across implementations). A warning is
/// logged when the scenario count is too small to support the highest
/// requested level (fewer than 10 tail observations).
pub fn risk_metrics(dist: &LossDistribution, quantiles: &[f64]) -> Result<Vec<RatingMetrics>> {
    if dist.num_scenarios() == 0 {
        return Err(Error::Contract("loss distribution is empty".into()));
    }
    if quantiles.iter().any(|&q| !(0.0 < q && q < 1.0)) {
        return Err(Error::Contract("quantile levels must lie in (0, 1)".into()));
    }
    let n = dist.num_scenarios();
    if let Some(&q_max) = quantiles.iter().max_by(|a, b| a.total_cmp(b)) {
        let needed = (10.0 / (1.0 - q_max)).ceil() as usize;
        if n < needed {
            log::warn!("{n} scenarios support the {q_max} quantile poorly (want >= {needed})");
        }
    }
    let mut out = Vec::with_capacity(dist.num_ratings());
    for rating in 0..dist.num_ratings() {
        let losses = dist.losses(rating);
        let expected_loss = losses.iter().sum::<f64>() / n as f64;
        let mut sorted = losses.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let value_at_risk = quantiles
            .iter()
            .map(|&q| {
                let index = ((q * n as f64).ceil() as usize).clamp(1, n);
                (q, sorted[index - 1])
            })
            .collect();
        out.push(RatingMetrics { rating, expected_loss, value_at_risk });
    }
    Ok(out)
}
