//! Collateral-driven loss-given-default.
//!
//! Collateral log-returns follow an AR(1) process
//!
//! ```text
//! lc_k = c + x lc_{k-1} + sigma z_k,   z_k ~ N(0, 1),
//! ```
//!
//! so the cumulated log-return log(c_t/c_0) given lc_0 is Gaussian with
//!
//! ```text
//! mu_t    = c sum_{i=1..t} a_i + a_t x lc_0,
//! Omega_t = sigma^2 sum_{i=1..t} a_i^2,
//! a_k     = 1 + x a_{k-1},  a_0 = 0   (= (1 - x^k)/(1 - x) for x != 1),
//! ```
//!
//! and the expected LGD of the put-like payoff (1 - K_t c_t/c_0)^+ has the
//! Black-Scholes-type closed form
//!
//! ```text
//! ELGD_t = Phi(-d2) - K_t exp(mu_t + Omega_t/2) Phi(-d1),
//! d1 = (ln K_t + mu_t + Omega_t)/sqrt(Omega_t),  d2 = (ln K_t + mu_t)/sqrt(Omega_t).
//! ```
//!
//! A Monte Carlo estimator cross-validates the formula.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::normal_cdf;
use crate::rng::RngStream;

/// AR(1) collateral log-return parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollateralParams {
    /// Drift c.
    pub drift: f64,
    /// AR coefficient x, |x| < 1.
    pub ar_coeff: f64,
    /// Innovation volatility sigma >= 0.
    pub vol: f64,
    /// Log-return at the conditioning time, lc_0.
    pub initial_log_return: f64,
}

impl CollateralParams {
    pub fn new(drift: f64, ar_coeff: f64, vol: f64, initial_log_return: f64) -> Result<Self> {
        if !(ar_coeff.abs() < 1.0) {
            return Err(Error::Contract("AR coefficient must satisfy |x| < 1".into()));
        }
        if !(vol >= 0.0) {
            return Err(Error::Contract("volatility must be nonnegative".into()));
        }
        Ok(CollateralParams { drift, ar_coeff, vol, initial_log_return })
    }

    /// Same parameters conditioned at a different point (replaces lc_0);
    /// used when re-anchoring the formula at the simulation horizon.
    pub fn at_initial_log_return(self, lc0: f64) -> Self {
        CollateralParams { initial_log_return: lc0, ..self }
    }
}

/// Strike schedule K_k = (1/LTV0) * (EAD_0 / EAD_k).
#[derive(Debug, Clone, PartialEq)]
pub struct LgdContext {
    ltv0: f64,
    ead_schedule: Vec<f64>,
}

impl LgdContext {
    /// `ead_schedule[k]` is EAD_k for k = 0..n; entries must be positive.
    pub fn new(ltv0: f64, ead_schedule: Vec<f64>) -> Result<Self> {
        if !(ltv0 > 0.0) {
            return Err(Error::Contract("initial loan-to-value must be positive".into()));
        }
        if ead_schedule.is_empty() || ead_schedule.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Contract("EAD schedule entries must be positive".into()));
        }
        Ok(LgdContext { ltv0, ead_schedule })
    }

    /// Unit bullet exposure: EAD_k = 1 for k = 0..n.
    pub fn unit_bullet(ltv0: f64, n: usize) -> Result<Self> {
        LgdContext::new(ltv0, vec![1.0; n + 1])
    }

    /// Linear amortization EAD_k proportional to (n - k + 1), so that
    /// EAD_0/EAD_k = n/(n - k + 1) under a per-period repayment of 1.
    pub fn amortizing(ltv0: f64, n: usize) -> Result<Self> {
        let schedule = (0..=n).map(|k| (n - k + 1) as f64).collect();
        LgdContext::new(ltv0, schedule)
    }

    pub fn ltv0(&self) -> f64 {
        self.ltv0
    }

    pub fn horizon_count(&self) -> usize {
        self.ead_schedule.len() - 1
    }

    /// Strike K_t = (1/LTV0) (EAD_0/EAD_t); entries are positive.
    pub fn strike(&self, t: usize) -> f64 {
        (1.0 / self.ltv0) * (self.ead_schedule[0] / self.ead_schedule[t])
    }
}

/// The recursion a_k = 1 + x a_{k-1}, a_0 = 0, returned for k = 0..t.
pub fn a_sequence(x: f64, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t + 1);
    out.push(0.0);
    for _ in 1..=t {
        let prev = *out.last().unwrap();
        out.push(1.0 + x * prev);
    }
    out
}

/// Mean and variance of log(c_t/c_0) given lc_0; t >= 1.
pub fn collateral_log_moments(params: &CollateralParams, t: usize) -> (f64, f64) {
    assert!(t >= 1, "moments are defined from t = 1");
    let a = a_sequence(params.ar_coeff, t);
    let sum_a: f64 = a[1..].iter().sum();
    let sum_a2: f64 = a[1..].iter().map(|v| v * v).sum();
    let mu = params.drift * sum_a + a[t] * params.ar_coeff * params.initial_log_return;
    let omega = params.vol * params.vol * sum_a2;
    (mu, omega)
}

/// Closed-form expected LGD at horizon t for a strike K_t > 0.
///
/// Degenerate collateral (Omega_t = 0) falls back to the deterministic
/// limit (1 - K_t e^{mu_t})^+. The value always lies in [0, 1].
pub fn elgd_closed_form(params: &CollateralParams, strike: f64, t: usize) -> Result<f64> {
    if !(strike > 0.0) {
        return Err(Error::Contract("strike must be positive".into()));
    }
    if t == 0 {
        return Err(Error::Contract("horizon t must be at least 1".into()));
    }
    let (mu, omega) = collateral_log_moments(params, t);
    let value = if omega <= 0.0 {
        (1.0 - strike * mu.exp()).max(0.0)
    } else {
        let sqrt_omega = omega.sqrt();
        let d1 = (strike.ln() + mu + omega) / sqrt_omega;
        let d2 = (strike.ln() + mu) / sqrt_omega;
        normal_cdf(-d2) - strike * (mu + 0.5 * omega).exp() * normal_cdf(-d1)
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Monte Carlo estimate of E[(1 - K_t c_t/c_0)^+] with its standard error.
///
/// Paths are simulated on per-chunk counter-based substreams and reduced
/// in a fixed order, so the estimate is deterministic and independent of
/// thread scheduling.
pub fn elgd_monte_carlo(
    params: &CollateralParams,
    strike: f64,
    t: usize,
    n_paths: usize,
    stream: RngStream,
) -> Result<(f64, f64)> {
    if !(strike > 0.0) {
        return Err(Error::Contract("strike must be positive".into()));
    }
    if t == 0 {
        return Err(Error::Contract("horizon t must be at least 1".into()));
    }
    if n_paths < 100 {
        return Err(Error::Contract("need at least 100 paths".into()));
    }
    const CHUNK: usize = 8192;
    let chunks = n_paths.div_ceil(CHUNK);
    let partials: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream.substream(chunk as u64).rng();
            let lo = chunk * CHUNK;
            let hi = ((chunk + 1) * CHUNK).min(n_paths);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in lo..hi {
                let mut lc = params.initial_log_return;
                let mut cum = 0.0;
                for _ in 0..t {
                    lc = params.drift + params.ar_coeff * lc + params.vol * rng.sample::<f64, _>(StandardNormal);
                    cum += lc;
                }
                let payoff = (1.0 - strike * cum.exp()).max(0.0);
                sum += payoff;
                sum_sq += payoff * payoff;
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = partials.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let n = n_paths as f64;
    let mean = sum / n;
    let variance = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (variance / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::domains;
    use approx::assert_abs_diff_eq;

    fn paper_params(lc0: f64) -> CollateralParams {
        CollateralParams::new(0.0, 0.73, 0.04, lc0).unwrap()
    }

    #[test]
    fn a_sequence_basics() {
        assert_eq!(a_sequence(0.0, 5), vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let a = a_sequence(0.73, 2);
        assert_abs_diff_eq!(a[2], 1.73, epsilon = 1e-15);
    }

    #[test]
    fn a_sequence_matches_closed_form() {
        for &x in &[-0.9, -0.5, 0.0, 0.3, 0.73, 0.99] {
            let a = a_sequence(x, 50);
            for k in 1..=50 {
                let closed = if x == 1.0 { k as f64 } else { (1.0 - x.powi(k as i32)) / (1.0 - x) };
                assert_abs_diff_eq!(a[k], closed, epsilon = 1e-12 * closed.abs().max(1.0));
            }
        }
    }

    #[test]
    fn log_moments_single_period() {
        let params = CollateralParams::new(0.05, 0.4, 0.2, -0.3).unwrap();
        let (mu, omega) = collateral_log_moments(&params, 1);
        assert_abs_diff_eq!(mu, 0.05 + 0.4 * -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(omega, 0.04, epsilon = 1e-15);
    }

    #[test]
    fn log_moments_paper_arithmetic() {
        // c=0, x=0.73, sigma=0.04, lc0=0, t=3:
        // mu = 0, Omega = 0.0016 (1 + 1.73^2 + (1 + 0.73*1.73)^2)
        let (mu, omega) = collateral_log_moments(&paper_params(0.0), 3);
        assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-15);
        let a3 = 1.0 + 0.73 * 1.73;
        assert_abs_diff_eq!(omega, 0.0016 * (1.0 + 1.73f64.powi(2) + a3 * a3), epsilon = 1e-15);
    }

    #[test]
    fn elgd_limits() {
        let params = paper_params(0.0);
        // Worthless collateral ratio: K -> 0+ drives ELGD -> 1.
        let near_one = elgd_closed_form(&params, 1e-12, 5).unwrap();
        assert!(near_one > 1.0 - 1e-9);
        // Deterministic collateral: sigma = 0, lc0 = 0, c = 0.
        let det = CollateralParams::new(0.0, 0.73, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(elgd_closed_form(&det, 0.8, 7).unwrap(), 0.2, epsilon = 1e-14);
        assert_eq!(elgd_closed_form(&det, 1.5, 7).unwrap(), 0.0);
    }

    #[test]
    fn elgd_monte_carlo_degenerate_cases() {
        let det = CollateralParams::new(0.0, 0.73, 0.0, 0.0).unwrap();
        let stream = RngStream::new(11, domains::TESTS, 20);
        let (estimate, se) = elgd_monte_carlo(&det, 0.8, 7, 200, stream).unwrap();
        assert_abs_diff_eq!(estimate, 0.2, epsilon = 1e-14);
        assert_eq!(se, 0.0);

        // Deep in-the-money loss: a vanishing strike (worthless collateral
        // ratio) forces payoff ~ 1; a huge strike forces payoff 0.
        let params = paper_params(0.0);
        let (estimate, _) = elgd_monte_carlo(&params, 1e-9, 3, 10_000, stream).unwrap();
        assert!(estimate > 0.999_999);
        let (estimate, _) = elgd_monte_carlo(&params, 1e6, 3, 10_000, stream).unwrap();
        assert_eq!(estimate, 0.0);
    }

    #[test]
    fn elgd_nonincreasing_in_initial_log_return() {
        // Higher initial collateral return lowers the expected loss (x > 0).
        let strike = 1.0;
        for t in [1usize, 5, 20] {
            let mut prev = f64::INFINITY;
            for step in 0..20 {
                let lc0 = -0.5 + step as f64 * 0.05;
                let value = elgd_closed_form(&paper_params(lc0), strike, t).unwrap();
                assert!(value <= prev + 1e-12);
                prev = value;
            }
        }
    }

    #[test]
    fn elgd_respects_jensen_lower_bound() {
        // ELGD_t >= (1 - K_t E[c_t/c_0])^+ with E[c_t/c_0] = e^{mu + Omega/2}.
        for &lc0 in &[-0.1, 0.0, 0.1] {
            let params = paper_params(lc0);
            for t in 1..=30 {
                for &ltv in &[0.8, 1.0, 1.5, 2.0] {
                    let strike = 1.0 / ltv;
                    let (mu, omega) = collateral_log_moments(&params, t);
                    let bound = (1.0 - strike * (mu + 0.5 * omega).exp()).max(0.0);
                    let value = elgd_closed_form(&params, strike, t).unwrap();
                    assert!(value >= bound - 1e-12);
                    assert!((0.0..=1.0).contains(&value));
                }
            }
        }
    }

    #[test]
    fn closed_form_matches_monte_carlo_spot_checks() {
        let stream = RngStream::new(7, domains::TESTS, 21);
        for &(ltv, lc0, t) in &[(0.8, 0.0, 5usize), (1.0, -0.1, 15), (2.0, 0.1, 30)] {
            let params = paper_params(lc0);
            let strike = 1.0 / ltv;
            let closed = elgd_closed_form(&params, strike, t).unwrap();
            let (mc, se) = elgd_monte_carlo(&params, strike, t, 200_000, stream.substream(t as u64)).unwrap();
            assert!(
                (closed - mc).abs() <= 3.5 * se.max(1e-9),
                "ltv={ltv} lc0={lc0} t={t}: closed {closed} vs mc {mc} (se {se})"
            );
        }
    }

    #[test]
    fn strike_schedules() {
        let unit = LgdContext::unit_bullet(0.8, 30).unwrap();
        for t in 1..=30 {
            assert_abs_diff_eq!(unit.strike(t), 1.25, epsilon = 1e-15);
        }
        let amort = LgdContext::amortizing(1.0, 4).unwrap();
        // EAD = [5,4,3,2,1]; K_t = EAD_0/EAD_t.
        assert_abs_diff_eq!(amort.strike(1), 5.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(amort.strike(4), 5.0, epsilon = 1e-15);
    }
}
