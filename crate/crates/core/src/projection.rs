//! Dimension-reduction projections of factor paths.
//!
//! The Bayesian route treats the high-dimensional model's transition
//! matrices T(x_{k,H}) as observations of a calibrated low-dimensional
//! model: each matrix is converted to pseudo-counts N0 * T_ij per rating
//! row (the multinomial mode is invariant to the scale of N0, which only
//! sets the observation precision), mode estimation runs the filter and
//! smoother under the low model, and the smoothed means are the projected
//! coordinates. The PCA route projects factor vectors onto the leading
//! principal components of a stationary factor sample and reconstructs
//! into the high model.

use nalgebra::{DMatrix, DVector};

use crate::bayes::{mode_estimate, GaussianBelief, MODE_MAX_ITER, MODE_TOL};
use crate::error::{Error, Result};
use crate::transition::{FactorPath, MultinomialObservation, TransitionModelParams};

/// Default pseudo-count weight per rating row when conditioning on
/// transition probabilities.
pub const DEFAULT_PSEUDO_COUNT_WEIGHT: f64 = 1e5;

/// A projection of a high-dimensional transition model onto a
/// low-dimensional one.
#[derive(Debug, Clone)]
pub struct ProjectionProblem {
    low_params: TransitionModelParams,
    initial_low: GaussianBelief,
    horizon: usize,
    pseudo_count_weight: f64,
}

impl ProjectionProblem {
    /// `initial_low` is p(x_0 | psi_L): a point mass for point-in-time or
    /// the stationary distribution for through-the-cycle starts.
    pub fn new(
        low_params: TransitionModelParams,
        initial_low: GaussianBelief,
        horizon: usize,
        pseudo_count_weight: f64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Contract("projection horizon must be at least 1".into()));
        }
        if initial_low.dim() != low_params.dim() {
            return Err(Error::Contract("initial density dimension must match the low model".into()));
        }
        if !(pseudo_count_weight > 0.0) {
            return Err(Error::Contract("pseudo-count weight must be positive".into()));
        }
        Ok(ProjectionProblem { low_params, initial_low, horizon, pseudo_count_weight })
    }

    pub fn low_params(&self) -> &TransitionModelParams {
        &self.low_params
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn low_spec_with_initial(&self) -> Result<crate::bayes::StateSpaceSpec> {
        self.low_params.state_space().with_initial(&self.initial_low)
    }
}

fn pseudo_counts(high: &TransitionModelParams, x: &DVector<f64>, weight: f64) -> DMatrix<f64> {
    let t = high.transition_matrix(x);
    t.matrix() * weight
}

/// Project a simulated high-dimensional path onto the low model.
///
/// `high_path` must cover k = 0..h+1 (one period beyond the horizon so the
/// smoother refines the horizon state). Returns the smoothed means for
/// k = 1..h; the output is deterministic given the inputs.
pub fn project_bayesian(
    problem: &ProjectionProblem,
    high_params: &TransitionModelParams,
    high_path: &FactorPath,
) -> Result<FactorPath> {
    let h = problem.horizon;
    if high_path.periods() < h + 1 {
        return Err(Error::Contract(format!(
            "projection needs the path up to h+1 = {} periods, got {}",
            h + 1,
            high_path.periods()
        )));
    }
    if high_params.num_ratings() != problem.low_params.num_ratings() {
        return Err(Error::Contract("high and low models must share the rating scale".into()));
    }
    let low = &problem.low_params;
    let observations: Vec<MultinomialObservation<'_>> = (1..=h + 1)
        .map(|k| {
            MultinomialObservation::new(low, pseudo_counts(high_params, high_path.value(k), problem.pseudo_count_weight))
        })
        .collect::<Result<_>>()?;
    let spec = problem.low_spec_with_initial()?;
    let estimate = mode_estimate(&observations, &spec, MODE_TOL, MODE_MAX_ITER)?;
    let values = estimate.smoothed[..h].iter().map(|b| b.mean.clone()).collect();
    FactorPath::new(values)
}

/// Project a single factor point (a grid training point): one observation
/// T(x) at k = 1, smoothed mean at k = 1 under the low model.
pub fn project_bayesian_point(
    problem: &ProjectionProblem,
    high_params: &TransitionModelParams,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let obs = vec![MultinomialObservation::new(
        &problem.low_params,
        pseudo_counts(high_params, x, problem.pseudo_count_weight),
    )?];
    let spec = problem.low_spec_with_initial()?;
    let estimate = mode_estimate(&obs, &spec, MODE_TOL, MODE_MAX_ITER)?;
    Ok(estimate.smoothed[0].mean.clone())
}

/// PCA basis fitted on pooled factor vectors.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    mean: DVector<f64>,
    /// d x L, columns ordered by descending eigenvalue; the largest-
    /// magnitude entry of each column is positive.
    components: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

impl PcaBasis {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Fraction of total sample variance captured per retained component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l / self.total_variance).collect()
    }
}

/// Fit a PCA basis on the pooled vectors of the sample paths.
pub fn pca_fit(sample_paths: &[FactorPath], n_components: usize) -> Result<PcaBasis> {
    let pooled: Vec<&DVector<f64>> = sample_paths.iter().flat_map(|p| p.values().iter()).collect();
    if pooled.is_empty() {
        return Err(Error::Contract("PCA needs a non-empty sample".into()));
    }
    let d = pooled[0].len();
    if n_components == 0 || n_components > d {
        return Err(Error::Contract("component count must be in 1..=d".into()));
    }
    if pooled.len() < 10 * d {
        return Err(Error::Contract(format!(
            "PCA sample too small: {} vectors for dimension {d} (need at least {})",
            pooled.len(),
            10 * d
        )));
    }
    let n = pooled.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in &pooled {
        mean += *v;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in &pooled {
        let centered = *v - &mean;
        cov.ger(1.0, &centered, &centered, 1.0);
    }
    cov /= n - 1.0;

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total_variance: f64 = eig.eigenvalues.iter().sum();

    let scale = eig.eigenvalues[order[0]].max(1.0);
    if eig.eigenvalues[order[n_components - 1]] <= 1e-12 * scale {
        return Err(Error::Numerical(format!(
            "sample covariance is rank deficient below {n_components} components"
        )));
    }

    let mut components = DMatrix::zeros(d, n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    for (col, &idx) in order.iter().take(n_components).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // Sign convention: largest-magnitude entry positive.
        let lead = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        components.set_column(col, &v);
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(PcaBasis { mean, components, eigenvalues, total_variance })
}

/// PCA scores and high-space reconstruction of a path.
///
/// scores_k = Wᵀ(x_k - mean); reconstructed_k = mean + W scores_k. The
/// reconstructed path is what the high model's transition map is applied
/// to when PCA coordinates must produce transition probabilities.
pub fn project_pca(basis: &PcaBasis, high_path: &FactorPath) -> (FactorPath, FactorPath) {
    let mut scores = Vec::with_capacity(high_path.values().len());
    let mut reconstructed = Vec::with_capacity(high_path.values().len());
    for x in high_path.values() {
        let s = basis.components.transpose() * (x - &basis.mean);
        let rec = &basis.mean + &basis.components * &s;
        scores.push(s);
        reconstructed.push(rec);
    }
    (FactorPath::new(scores).expect("non-empty path"), FactorPath::new(reconstructed).expect("non-empty path"))
}

/// Score a single point (used by grid training).
pub fn project_pca_point(basis: &PcaBasis, x: &DVector<f64>) -> DVector<f64> {
    basis.components.transpose() * (x - &basis.mean)
}

/// Reconstruct a single score vector into the high space.
pub fn reconstruct_pca_point(basis: &PcaBasis, scores: &DVector<f64>) -> DVector<f64> {
    &basis.mean + &basis.components * scores
}
