//! Approximate maximum-likelihood calibration of the transition model.
//!
//! The objective is the Laplace-approximate log-likelihood produced by
//! mode estimation over the migration counts. Free parameters: the
//! diagonal of A (atanh-transformed to stay inside (-1, 1)), the diagonal
//! of Q (log-transformed), all loading rows for non-diagonal performing
//! transitions, and the positive level entries of performing rows
//! (log-transformed, rows renormalized after every unpack). The initial
//! state prior is tied to the dynamics: a0 = 0, P0 = stationary(A, Q).

use nalgebra::{DMatrix, DVector};

use crate::bayes::{mode_estimate, StateSpaceSpec, MODE_MAX_ITER};
use crate::error::{Error, Result};
use crate::optim::{minimize, NelderMeadOptions};

use super::{count_observations, MigrationCounts, TransitionModelParams};

/// Calibration controls.
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    /// Objective-evaluation budget; 0 returns the initial parameters.
    pub max_evals: usize,
    pub restarts: usize,
    /// Simplex f-spread tolerance (absolute, in log-likelihood units).
    pub f_tol: f64,
    pub initial_step: f64,
    pub mode_tol: f64,
    pub mode_max_iter: usize,
    /// Fail with best-so-far parameters when the optimizer exhausts its
    /// budget without meeting a tolerance.
    pub require_convergence: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            max_evals: 8_000,
            restarts: 2,
            f_tol: 1e-4,
            initial_step: 0.15,
            mode_tol: 1e-6,
            mode_max_iter: MODE_MAX_ITER,
            require_convergence: false,
        }
    }
}

/// Laplace-approximate log-likelihood of `params` on `counts` via mode
/// estimation, with the calibration prior (a0 = 0, P0 = stationary).
pub fn approximate_log_likelihood(
    params: &TransitionModelParams,
    counts: &MigrationCounts,
    mode_tol: f64,
    mode_max_iter: usize,
) -> Result<f64> {
    let stationary = crate::bayes::stationary_distribution(params.state_space())?;
    let spec = params.state_space().with_initial(&stationary)?;
    let params = params.with_state_space(spec)?;
    let obs = count_observations(&params, counts)?;
    let estimate = mode_estimate(&obs, params.state_space(), mode_tol, mode_max_iter)?;
    Ok(estimate.log_likelihood)
}

/// Maps the free parameters onto an unconstrained vector and back.
struct Packing {
    num_ratings: usize,
    dim: usize,
    /// Loading rows (i*R + j) that are free.
    free_loading_rows: Vec<usize>,
    /// Level cells (i, j) that are free (positive in the template).
    free_level_cells: Vec<(usize, usize)>,
    template: TransitionModelParams,
}

const A_BOUND: f64 = 0.999;
const Q_FLOOR: f64 = 1e-8;

impl Packing {
    fn new(template: &TransitionModelParams) -> Self {
        let r = template.num_ratings();
        let d = template.dim();
        let mut free_loading_rows = Vec::new();
        let mut free_level_cells = Vec::new();
        for i in 0..r - 1 {
            for j in 0..r {
                if i != j {
                    free_loading_rows.push(i * r + j);
                }
                if template.level()[(i, j)] > 0.0 {
                    free_level_cells.push((i, j));
                }
            }
        }
        Packing { num_ratings: r, dim: d, free_loading_rows, free_level_cells, template: template.clone() }
    }

    fn len(&self) -> usize {
        2 * self.dim + self.free_loading_rows.len() * self.dim + self.free_level_cells.len()
    }

    fn pack(&self, params: &TransitionModelParams) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        let a = params.state_space().transition_matrix();
        let q = params.state_space().process_noise_cov();
        for i in 0..self.dim {
            // Inverse of the unpack map a = tanh(v) * A_BOUND.
            v.push((a[(i, i)] / A_BOUND).clamp(-0.999_999, 0.999_999).atanh());
        }
        for i in 0..self.dim {
            v.push(q[(i, i)].max(Q_FLOOR).ln());
        }
        for &row in &self.free_loading_rows {
            for col in 0..self.dim {
                v.push(params.loading()[(row, col)]);
            }
        }
        for &(i, j) in &self.free_level_cells {
            v.push(params.level()[(i, j)].max(1e-12).ln());
        }
        v
    }

    fn unpack(&self, v: &[f64]) -> Result<TransitionModelParams> {
        if v.len() != self.len() {
            return Err(Error::Contract("parameter vector length mismatch".into()));
        }
        let d = self.dim;
        let r = self.num_ratings;
        let mut idx = 0;
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            a[(i, i)] = v[idx].tanh() * A_BOUND;
            idx += 1;
        }
        let mut q = DMatrix::zeros(d, d);
        for i in 0..d {
            q[(i, i)] = v[idx].exp().max(Q_FLOOR);
            idx += 1;
        }
        let mut loading = self.template.loading().clone();
        for &row in &self.free_loading_rows {
            for col in 0..d {
                loading[(row, col)] = v[idx];
                idx += 1;
            }
        }
        let mut level = self.template.level().clone();
        for &(i, j) in &self.free_level_cells {
            level[(i, j)] = v[idx].exp();
            idx += 1;
        }
        // Diagonal stationary covariance has a closed form.
        let mut p0 = DMatrix::zeros(d, d);
        for i in 0..d {
            p0[(i, i)] = q[(i, i)] / (1.0 - a[(i, i)] * a[(i, i)]);
        }
        let spec = StateSpaceSpec::new(a, q, DVector::zeros(d), p0)?;
        TransitionModelParams::new(r, spec, loading, level)
    }
}

/// Calibrate a `dim`-factor model by local search from `init`.
///
/// `init` fixes the sparsity pattern (zero loading rows, absorbing level
/// row); dimensions enter through `init` and must equal `dim`. Level rows
/// are renormalized after every step by the parameter constructor.
pub fn calibrate(
    counts: &MigrationCounts,
    dim: usize,
    init: &TransitionModelParams,
    options: &CalibrationOptions,
) -> Result<TransitionModelParams> {
    if init.dim() != dim {
        return Err(Error::Contract(format!(
            "init has {} factors but calibration was asked for {dim}",
            init.dim()
        )));
    }
    if init.num_ratings() != counts.num_ratings() {
        return Err(Error::Contract("init and counts disagree on the number of ratings".into()));
    }
    if options.max_evals == 0 {
        return Ok(init.clone());
    }

    let packing = Packing::new(init);
    let x0 = packing.pack(init);
    let objective = |v: &[f64]| -> f64 {
        match packing.unpack(v) {
            Ok(params) => {
                match approximate_log_likelihood(&params, counts, options.mode_tol, options.mode_max_iter) {
                    Ok(ll) if ll.is_finite() => -ll,
                    _ => f64::INFINITY,
                }
            }
            Err(_) => f64::INFINITY,
        }
    };
    let nm_opts = NelderMeadOptions {
        max_evals: options.max_evals,
        f_tol: options.f_tol,
        x_tol: 1e-7,
        initial_step: options.initial_step,
        restarts: options.restarts,
    };
    let result = minimize(objective, &x0, &nm_opts);
    let best = packing.unpack(&result.x)?;
    if result.f.is_infinite() {
        return Err(Error::Calibration {
            message: "objective never became finite".into(),
            best: Box::new(best),
        });
    }
    if options.require_convergence && !result.converged {
        return Err(Error::Calibration {
            message: format!("optimizer exhausted {} evaluations without converging", result.evals),
            best: Box::new(best),
        });
    }
    Ok(best)
}

/// Moment/SVD-based starting point for calibration.
///
/// Level = smoothed pooled migration frequencies. Signals: per-period
/// log-odds against the diagonal reference, level-adjusted, decomposed by
/// SVD; the top-`dim` directions become loading columns (scaled so every
/// factor has unit stationary variance) and an AR(1) fit of the factor
/// scores gives A and Q.
pub fn initial_params_from_counts(counts: &MigrationCounts, dim: usize) -> Result<TransitionModelParams> {
    let r = counts.num_ratings();
    if dim == 0 {
        return Err(Error::Contract("factor dimension must be positive".into()));
    }
    let periods = counts.periods();

    // Pooled level estimate with light smoothing so no cell is ever zero.
    let mut level = DMatrix::zeros(r, r);
    for i in 0..r - 1 {
        for j in 0..r {
            let total: u64 = (1..=periods).map(|k| counts.matrix(k)[(i, j)]).sum();
            level[(i, j)] = total as f64 + 0.5;
        }
    }
    level[(r - 1, r - 1)] = 1.0;

    let g_norm = {
        let mut g = level.clone();
        for i in 0..r - 1 {
            let s: f64 = g.row(i).iter().sum();
            for j in 0..r {
                g[(i, j)] /= s;
            }
        }
        g
    };

    // Off-diagonal performing cells carry the signal.
    let mut cells = Vec::new();
    for i in 0..r - 1 {
        for j in 0..r {
            if i != j {
                cells.push((i, j));
            }
        }
    }
    let mut usable_rows = Vec::new();
    for k in 1..=periods {
        let ok = (0..r - 1).all(|i| counts.row_total(k, i) >= 30);
        if ok {
            usable_rows.push(k);
        }
    }
    if usable_rows.len() < 2 * dim + 2 {
        return Err(Error::Contract(format!(
            "only {} usable periods; not enough to initialize a {dim}-factor model",
            usable_rows.len()
        )));
    }

    let mut theta_hat = DMatrix::zeros(usable_rows.len(), cells.len());
    for (row, &k) in usable_rows.iter().enumerate() {
        let m = counts.matrix(k);
        for (col, &(i, j)) in cells.iter().enumerate() {
            let mij = m[(i, j)] as f64 + 0.5;
            let mii = m[(i, i)] as f64 + 0.5;
            let level_odds = (g_norm[(i, j)] / g_norm[(i, i)]).ln();
            theta_hat[(row, col)] = (mij / mii).ln() - level_odds;
        }
    }
    // Center columns.
    for col in 0..cells.len() {
        let mean: f64 = theta_hat.column(col).iter().sum::<f64>() / usable_rows.len() as f64;
        for row in 0..usable_rows.len() {
            theta_hat[(row, col)] -= mean;
        }
    }

    let svd = theta_hat.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    if svd.singular_values.len() < dim {
        return Err(Error::Numerical("signal matrix has lower rank than the requested dimension".into()));
    }

    let t_used = usable_rows.len() as f64;
    let mut loading = DMatrix::zeros(r * r, dim);
    let mut a_diag = vec![0.0; dim];
    let mut q_diag = vec![0.0; dim];
    for f in 0..dim {
        let sigma = svd.singular_values[f];
        // Scores u_col * sigma have sample variance sigma^2 / T.
        let score_sd = (sigma * sigma / t_used).sqrt().max(1e-6);
        for (col, &(i, j)) in cells.iter().enumerate() {
            loading[(i * r + j, f)] = v_t[(f, col)] * score_sd;
        }
        // AR(1) fit on the normalized scores.
        let scores: Vec<f64> = (0..usable_rows.len()).map(|row| u[(row, f)] * sigma / score_sd).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for w in 1..scores.len() {
            num += scores[w] * scores[w - 1];
            den += scores[w - 1] * scores[w - 1];
        }
        let a = if den > 0.0 { (num / den).clamp(-0.9, 0.9) } else { 0.0 };
        a_diag[f] = a;
        q_diag[f] = 1.0 - a * a; // unit stationary variance by construction
    }

    let a = DMatrix::from_diagonal(&DVector::from_vec(a_diag));
    let q = DMatrix::from_diagonal(&DVector::from_vec(q_diag));
    let spec = StateSpaceSpec::new(a, q, DVector::zeros(dim), DMatrix::identity(dim, dim))?;
    TransitionModelParams::new(r, spec, loading, g_norm)
}
