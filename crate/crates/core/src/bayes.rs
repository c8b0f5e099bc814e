//! Linear-Gaussian state-space machinery.
//!
//! State dynamics are time-invariant:
//!
//! ```text
//! x_k = A x_{k-1} + eta_k,   eta_k ~ N(0, Q),   x_0 ~ N(a0, P0)
//! ```
//!
//! The module provides the Kalman prediction/update pair in Joseph form,
//! the Rauch-Tung-Striebel smoother, the stationary distribution of the
//! state process, and iterated mode estimation for non-Gaussian
//! observation densities: the observation log-density is expanded to
//! second order around the current smoothed trajectory, the resulting
//! linear-Gaussian model is filtered and smoothed, and the procedure is
//! repeated until the smoothed mean trajectory stops moving. At the fixed
//! point the smoothed means are the joint posterior mode and the Gaussian
//! model yields a Laplace approximation of the log-likelihood.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{asymmetry, gaussian_log_density, is_symmetric_psd, spectral_radius, symmetrize, PSD_TOL};

/// Condition-number threshold above which an innovation covariance is
/// ridge-regularized before inversion. The projection algorithm feeds
/// near-noiseless synthetic observations, which is where this matters.
pub const CONDITION_LIMIT: f64 = 1e12;
const RIDGE: f64 = 1e-12;

/// Default convergence tolerance for [`mode_estimate`] (max-norm change of
/// the smoothed mean trajectory).
pub const MODE_TOL: f64 = 1e-8;
/// Default iteration budget for [`mode_estimate`].
pub const MODE_MAX_ITER: usize = 50;

/// Time-invariant linear-Gaussian state dynamics plus initial belief.
#[derive(Debug, Clone)]
pub struct StateSpaceSpec {
    transition: DMatrix<f64>,
    process_noise: DMatrix<f64>,
    initial_mean: DVector<f64>,
    initial_cov: DMatrix<f64>,
}

impl StateSpaceSpec {
    /// Validates dimensions and that `process_noise` and `initial_cov` are
    /// symmetric PSD to 1e-10.
    pub fn new(
        transition: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        initial_mean: DVector<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = transition.nrows();
        if d == 0 || transition.ncols() != d {
            return Err(Error::Contract("transition matrix A must be square and non-empty".into()));
        }
        if process_noise.shape() != (d, d) {
            return Err(Error::Contract("process noise Q must match the state dimension".into()));
        }
        if initial_mean.len() != d || initial_cov.shape() != (d, d) {
            return Err(Error::Contract("initial belief must match the state dimension".into()));
        }
        if !is_symmetric_psd(&process_noise, PSD_TOL) {
            return Err(Error::Contract("Q must be symmetric PSD".into()));
        }
        if !is_symmetric_psd(&initial_cov, PSD_TOL) {
            return Err(Error::Contract("P0 must be symmetric PSD".into()));
        }
        Ok(StateSpaceSpec { transition, process_noise, initial_mean, initial_cov })
    }

    pub fn dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn process_noise_cov(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    pub fn initial_belief(&self) -> GaussianBelief {
        GaussianBelief { mean: self.initial_mean.clone(), cov: self.initial_cov.clone() }
    }

    /// Same dynamics with a replaced initial belief (used by the projection
    /// to select PiT point-mass or TtC stationary starts).
    pub fn with_initial(&self, belief: &GaussianBelief) -> Result<Self> {
        StateSpaceSpec::new(
            self.transition.clone(),
            self.process_noise.clone(),
            belief.mean.clone(),
            belief.cov.clone(),
        )
    }
}

/// Gaussian state distribution (filtered, predicted or smoothed).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validates that `cov` is symmetric PSD to 1e-10.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Contract("belief covariance must be d x d".into()));
        }
        if !is_symmetric_psd(&cov, PSD_TOL) {
            return Err(Error::Contract("belief covariance must be symmetric PSD".into()));
        }
        Ok(GaussianBelief { mean, cov })
    }

    /// Point mass at `mean` (zero covariance).
    pub fn point(mean: DVector<f64>) -> Self {
        let d = mean.len();
        GaussianBelief { mean, cov: DMatrix::zeros(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One prediction step: prior at time k from the posterior at k-1.
///
/// mean' = A mean, cov' = A cov Aᵀ + Q, symmetrized before return.
pub fn kalman_predict(belief: &GaussianBelief, spec: &StateSpaceSpec) -> Result<GaussianBelief> {
    if belief.dim() != spec.dim() {
        return Err(Error::Contract(format!(
            "belief dimension {} does not match state dimension {}",
            belief.dim(),
            spec.dim()
        )));
    }
    let a = &spec.transition;
    let mean = a * &belief.mean;
    let cov = symmetrize(&(a * &belief.cov * a.transpose() + &spec.process_noise));
    Ok(GaussianBelief { mean, cov })
}

/// Cholesky with the ridge policy: if the factorization fails or the
/// diagonal-based condition estimate exceeds [`CONDITION_LIMIT`], add
/// 1e-12·I and retry. Returns the factor and the matrix actually used.
fn cholesky_regularized(
    m: &DMatrix<f64>,
    what: &str,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let sym = symmetrize(m);
    if let Some(chol) = sym.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for d in diag.iter() {
            lo = lo.min(*d);
            hi = hi.max(*d);
        }
        let cond_estimate = (hi / lo).powi(2);
        if cond_estimate <= CONDITION_LIMIT {
            return Ok((chol, sym));
        }
    }
    let n = sym.nrows();
    let ridged = &sym + DMatrix::<f64>::identity(n, n) * RIDGE;
    match ridged.clone().cholesky() {
        Some(chol) => Ok((chol, ridged)),
        None => {
            let eig = sym.symmetric_eigen();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for l in eig.eigenvalues.iter() {
                lo = lo.min(l.abs());
                hi = hi.max(l.abs());
            }
            Err(Error::Numerical(format!(
                "{what} is numerically singular (condition estimate {:.3e})",
                if lo > 0.0 { hi / lo } else { f64::INFINITY }
            )))
        }
    }
}

/// Joseph-stabilized Kalman update with a linear-Gaussian observation
/// `y ~ N(H x, R)`. Returns the posterior and the log-likelihood increment
/// `log N(y; H mean, S)` with `S = H cov Hᵀ + R`.
pub fn kalman_update_linear(
    prior: &GaussianBelief,
    h: &DMatrix<f64>,
    r_obs: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(GaussianBelief, f64)> {
    let d = prior.dim();
    let m = h.nrows();
    if h.ncols() != d || r_obs.shape() != (m, m) || y.len() != m {
        return Err(Error::Contract("observation dimensions are inconsistent".into()));
    }
    let s = h * &prior.cov * h.transpose() + r_obs;
    let (chol, s_used) = cholesky_regularized(&s, "innovation covariance")?;

    let predicted = h * &prior.mean;
    let innovation = y - &predicted;
    let gain = (&prior.cov * h.transpose()) * chol.inverse();

    let mean = &prior.mean + &gain * &innovation;
    let i_kh = DMatrix::<f64>::identity(d, d) - &gain * h;
    let cov = symmetrize(&(&i_kh * &prior.cov * i_kh.transpose() + &gain * r_obs * gain.transpose()));

    let loglik = gaussian_log_density(y, &predicted, &s_used)
        .ok_or_else(|| Error::Numerical("innovation covariance lost positive definiteness".into()))?;
    Ok((GaussianBelief { mean, cov }, loglik))
}

/// RTS smoother over a forward filter pass.
///
/// `filtered[k]` holds the (prior, posterior) pair at step k = 1..T, as
/// produced by alternating [`kalman_predict`] / [`kalman_update_linear`].
/// The final smoothed belief equals the final filtered posterior exactly.
pub fn rts_smoother(
    filtered: &[(GaussianBelief, GaussianBelief)],
    spec: &StateSpaceSpec,
) -> Result<Vec<GaussianBelief>> {
    if filtered.is_empty() {
        return Err(Error::Contract("smoother needs at least one filter step".into()));
    }
    let t = filtered.len();
    let a = &spec.transition;
    let mut smoothed = vec![filtered[t - 1].1.clone(); t];
    for k in (0..t - 1).rev() {
        let posterior = &filtered[k].1;
        let next_prior = &filtered[k + 1].0;
        let (chol, _) = cholesky_regularized(&next_prior.cov, "predicted covariance in smoother gain")?;
        // G_k = P_k|k Aᵀ (P_{k+1|k})⁻¹
        let gain = (&posterior.cov * a.transpose()) * chol.inverse();
        let mean = &posterior.mean + &gain * (&smoothed[k + 1].mean - &next_prior.mean);
        let cov = symmetrize(
            &(&posterior.cov + &gain * (&smoothed[k + 1].cov - &next_prior.cov) * gain.transpose()),
        );
        smoothed[k] = GaussianBelief { mean, cov };
    }
    Ok(smoothed)
}

/// Non-Gaussian observation density with derivatives in the state.
///
/// Implementations must return a symmetric Hessian, negative semi-definite
/// for log-concave densities (the multinomial-logit density used by the
/// transition model is log-concave).
pub trait ObservationModel {
    fn log_density(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Observation dimension m (informational; the linearized pseudo
    /// observation always lives in state space).
    fn obs_dim(&self) -> usize;
}

/// Linear-Gaussian observation `y ~ N(H x, R)`, mostly used to cross-check
/// that mode estimation collapses onto the Kalman smoother.
#[derive(Debug, Clone)]
pub struct GaussianObservation {
    y: DVector<f64>,
    h: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianObservation {
    pub fn new(y: DVector<f64>, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let m = y.len();
        if h.nrows() != m || r.shape() != (m, m) {
            return Err(Error::Contract("observation dimensions are inconsistent".into()));
        }
        let chol = symmetrize(&r)
            .cholesky()
            .ok_or_else(|| Error::Contract("observation noise R must be positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianObservation { y, h, r_inv: chol.inverse(), log_norm })
    }
}

impl ObservationModel for GaussianObservation {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let resid = &self.y - &self.h * x;
        self.log_norm - 0.5 * (&resid.transpose() * &self.r_inv * &resid)[(0, 0)]
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let resid = &self.y - &self.h * x;
        self.h.transpose() * &self.r_inv * resid
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        -(self.h.transpose() * &self.r_inv * &self.h)
    }

    fn obs_dim(&self) -> usize {
        self.y.len()
    }
}

/// Result of [`mode_estimate`].
#[derive(Debug, Clone)]
pub struct ModeEstimate {
    /// Smoothed Gaussian approximations around the posterior mode, k = 1..T.
    pub smoothed: Vec<GaussianBelief>,
    /// Laplace-approximate log-likelihood log p(y_{1:T}).
    pub log_likelihood: f64,
    /// Iterations actually used.
    pub iterations: usize,
    /// Max-norm trajectory change per iteration (monitoring/convergence).
    pub deltas: Vec<f64>,
}

struct Linearized {
    /// Synthetic observation z_k (None when the observation carries no
    /// information, e.g. a multinomial with zero trials).
    pseudo_obs: Option<(DVector<f64>, DMatrix<f64>)>,
}

fn linearize<O: ObservationModel>(obs: &O, x: &DVector<f64>) -> Result<Linearized> {
    let grad = obs.gradient(x);
    let hess = obs.hessian(x);
    if asymmetry(&hess) > 1e-8 * (1.0 + hess.amax()) {
        return Err(Error::Numerical("observation Hessian is not symmetric".into()));
    }
    if grad.amax() == 0.0 && hess.amax() == 0.0 {
        // Flat likelihood: treat the period as missing data.
        return Ok(Linearized { pseudo_obs: None });
    }
    let d = x.len();
    let mut precision = symmetrize(&(-hess));
    for i in 0..d {
        precision[(i, i)] += RIDGE;
    }
    let chol = match precision.clone().cholesky() {
        Some(chol) => chol,
        None => {
            // Classify the failure: indefinite Hessians are a contract
            // breach (cannot occur for log-concave densities); singular
            // PSD ones just need a stronger ridge.
            let eig = precision.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |acc, &l| acc.min(l));
            if min_eig < -1e-8 * (1.0 + precision.amax()) {
                return Err(Error::Numerical("observation Hessian is indefinite".into()));
            }
            let bump = 1e-8 * (1.0 + precision.amax());
            for i in 0..d {
                precision[(i, i)] += bump;
            }
            precision
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("linearized observation precision is singular".into()))?
        }
    };
    let r = chol.inverse();
    // z = x + (-H)^{-1} g matches gradient and Hessian of the true density.
    let z = x + &r * grad;
    Ok(Linearized { pseudo_obs: Some((z, symmetrize(&r))) })
}

/// Joint log-posterior of a trajectory (up to a constant), used only to
/// damp the Newton step; Q is ridged so Q = 0 corner cases stay comparable.
fn trajectory_objective<O: ObservationModel>(
    obs: &[O],
    spec: &StateSpaceSpec,
    traj: &[DVector<f64>],
) -> f64 {
    let d = spec.dim();
    let a = &spec.transition;
    let q_ridged = &spec.process_noise + DMatrix::<f64>::identity(d, d) * RIDGE;
    let first_cov = symmetrize(&(a * &spec.initial_cov * a.transpose())) + &q_ridged;
    let mut value = gaussian_log_density(&traj[0], &(a * &spec.initial_mean), &first_cov).unwrap_or(f64::NEG_INFINITY);
    for k in 1..traj.len() {
        value += gaussian_log_density(&traj[k], &(a * &traj[k - 1]), &q_ridged).unwrap_or(f64::NEG_INFINITY);
    }
    for (k, o) in obs.iter().enumerate() {
        value += o.log_density(&traj[k]);
    }
    value
}

/// Iterated mode estimation for a sequence of (possibly non-Gaussian)
/// observations, k = 1..T.
///
/// Returns the smoothed Gaussian approximations around the posterior mode
/// and the Laplace-approximate log-likelihood used for calibration. The
/// linearization trajectory starts at the prior mean path (a0 propagated
/// through A) and each Newton step is backtracked when it would decrease
/// the joint posterior density.
pub fn mode_estimate<O: ObservationModel>(
    obs: &[O],
    spec: &StateSpaceSpec,
    tol: f64,
    max_iter: usize,
) -> Result<ModeEstimate> {
    if obs.is_empty() {
        return Err(Error::Contract("mode estimation needs at least one observation".into()));
    }
    if tol <= 0.0 {
        return Err(Error::Contract("mode estimation tolerance must be positive".into()));
    }
    let t = obs.len();
    let a = &spec.transition;

    // Prior mean path.
    let mut trajectory: Vec<DVector<f64>> = Vec::with_capacity(t);
    let mut mean = spec.initial_mean.clone();
    for _ in 0..t {
        mean = a * &mean;
        trajectory.push(mean.clone());
    }

    let mut deltas = Vec::new();
    let mut current_obj = trajectory_objective(obs, spec, &trajectory);

    for iteration in 1..=max_iter {
        let mut filtered = Vec::with_capacity(t);
        let mut belief = spec.initial_belief();
        let mut gauss_loglik = 0.0;
        let mut informative = vec![false; t];
        let mut pseudo: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(t);
        let identity = DMatrix::<f64>::identity(spec.dim(), spec.dim());

        for (k, o) in obs.iter().enumerate() {
            let prior = kalman_predict(&belief, spec)?;
            let lin = linearize(o, &trajectory[k])?;
            let posterior = match lin.pseudo_obs {
                Some((z, r)) => {
                    let (post, ll) = kalman_update_linear(&prior, &identity, &r, &z)?;
                    gauss_loglik += ll;
                    informative[k] = true;
                    pseudo.push((z, r));
                    post
                }
                None => {
                    pseudo.push((DVector::zeros(spec.dim()), DMatrix::zeros(spec.dim(), spec.dim())));
                    prior.clone()
                }
            };
            belief = posterior.clone();
            filtered.push((prior, posterior));
        }

        let smoothed = rts_smoother(&filtered, spec)?;
        let proposal: Vec<DVector<f64>> = smoothed.iter().map(|b| b.mean.clone()).collect();

        // Backtrack the Newton step if the joint posterior got worse.
        let mut accepted = proposal.clone();
        let mut accepted_obj = trajectory_objective(obs, spec, &accepted);
        if accepted_obj < current_obj {
            let mut step = 0.5;
            for _ in 0..8 {
                let damped: Vec<DVector<f64>> = trajectory
                    .iter()
                    .zip(&proposal)
                    .map(|(old, new)| old + (new - old) * step)
                    .collect();
                let obj = trajectory_objective(obs, spec, &damped);
                if obj > accepted_obj {
                    accepted = damped;
                    accepted_obj = obj;
                }
                if obj > current_obj {
                    break;
                }
                step *= 0.5;
            }
        }

        let delta = trajectory
            .iter()
            .zip(&accepted)
            .map(|(old, new)| (new - old).amax())
            .fold(0.0f64, f64::max);
        deltas.push(delta);
        trajectory = accepted;
        current_obj = accepted_obj;

        if delta < tol {
            // Laplace correction: exact observation density minus the
            // Gaussian pseudo density, both at the mode.
            let mut loglik = gauss_loglik;
            for (k, o) in obs.iter().enumerate() {
                if informative[k] {
                    let x_hat = &smoothed[k].mean;
                    let (z, r) = &pseudo[k];
                    let pseudo_ld = gaussian_log_density(z, x_hat, r)
                        .ok_or_else(|| Error::Numerical("degenerate pseudo observation".into()))?;
                    loglik += o.log_density(x_hat) - pseudo_ld;
                }
            }
            return Ok(ModeEstimate { smoothed, log_likelihood: loglik, iterations: iteration, deltas });
        }
    }

    Err(Error::ModeNonConvergence {
        iterations: max_iter,
        last_delta: *deltas.last().unwrap_or(&f64::NAN),
    })
}

/// Stationary distribution of the state process: mean 0 and the fixed
/// point of `P = A P Aᵀ + Q`, iterated to 1e-12.
pub fn stationary_distribution(spec: &StateSpaceSpec) -> Result<GaussianBelief> {
    let rho = spectral_radius(&spec.transition);
    if rho >= 1.0 {
        return Err(Error::Domain(format!(
            "stationary distribution requires spectral radius < 1 (got {rho:.6})"
        )));
    }
    let a = &spec.transition;
    let mut p = spec.process_noise.clone();
    for _ in 0..10_000 {
        let next = symmetrize(&(a * &p * a.transpose() + &spec.process_noise));
        let change = (&next - &p).amax();
        p = next;
        if change < 1e-12 {
            return Ok(GaussianBelief { mean: DVector::zeros(spec.dim()), cov: p });
        }
    }
    Err(Error::Numerical("Lyapunov fixed-point iteration did not reach 1e-12 in 10000 iterations".into()))
}
