//! Latent-factor multinomial-logit rating transition model.
//!
//! Transition probabilities at time k follow
//!
//! ```text
//! T_ij(x_k) = g_ij exp(theta_ij) / sum_j g_ij exp(theta_ij),
//! theta = K x_k  (R^2-vector, row-major over (i,j) pairs),
//! x_k = A x_{k-1} + eta_k,  eta_k ~ N(0, Q).
//! ```
//!
//! The last rating is the absorbing default state: its transition row is
//! hard-coded to the unit vector and its loading rows are zero. Loading
//! rows for diagonal transitions (i,i) are zero as the identifiability
//! reference, and level rows are normalized to sum to one; the level/signal
//! split is otherwise not identifiable.
//!
//! Migration counts per (rating, period) are multinomial given the factor
//! path, which yields the log-likelihood used for calibration and the
//! log-concave observation density used by mode estimation.

pub mod calibrate;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::bayes::{self, GaussianBelief, ObservationModel, StateSpaceSpec};
use crate::error::{Error, Result};
use crate::math::{ln_factorial, psd_sqrt};
use crate::rng::{RngStream, StreamRng};

/// Parameter bundle of the transition model: (A, Q, a0, P0) inside the
/// state-space spec plus the loading matrix K (R²×d) and level matrix G.
#[derive(Debug, Clone)]
pub struct TransitionModelParams {
    num_ratings: usize,
    state_space: StateSpaceSpec,
    loading: DMatrix<f64>,
    level: DMatrix<f64>,
    log_level: DMatrix<f64>,
}

impl TransitionModelParams {
    /// Build and normalize a parameter set.
    ///
    /// Enforced on construction: level rows are renormalized to sum to 1
    /// (entries must be nonnegative with a positive row sum), the default
    /// row of G becomes the exact unit vector, and the loading rows for
    /// diagonal transitions and for the default block are zeroed.
    pub fn new(
        num_ratings: usize,
        state_space: StateSpaceSpec,
        loading: DMatrix<f64>,
        level: DMatrix<f64>,
    ) -> Result<Self> {
        let r = num_ratings;
        let d = state_space.dim();
        if r < 2 {
            return Err(Error::Contract("need at least one performing and one default rating".into()));
        }
        if loading.shape() != (r * r, d) {
            return Err(Error::Contract(format!(
                "loading matrix must be R²×d = {}×{}, got {}×{}",
                r * r,
                d,
                loading.nrows(),
                loading.ncols()
            )));
        }
        if level.shape() != (r, r) {
            return Err(Error::Contract("level matrix must be R×R".into()));
        }
        if level.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return Err(Error::Contract("level entries must be finite and nonnegative".into()));
        }

        let mut level = level;
        let default = r - 1;
        for i in 0..default {
            let row_sum: f64 = level.row(i).iter().sum();
            if row_sum <= 0.0 {
                return Err(Error::Contract(format!("level row {i} must have a positive sum")));
            }
            for j in 0..r {
                level[(i, j)] /= row_sum;
            }
        }
        for j in 0..r {
            level[(default, j)] = if j == default { 1.0 } else { 0.0 };
        }

        let mut loading = loading;
        for i in 0..r {
            for col in 0..d {
                loading[(i * r + i, col)] = 0.0; // diagonal reference category
                loading[(default * r + i, col)] = 0.0; // absorbing default block
            }
        }

        let log_level = level.map(|g| if g > 0.0 { g.ln() } else { f64::NEG_INFINITY });
        Ok(TransitionModelParams { num_ratings, state_space, loading, level, log_level })
    }

    pub fn num_ratings(&self) -> usize {
        self.num_ratings
    }

    pub fn dim(&self) -> usize {
        self.state_space.dim()
    }

    /// Index of the absorbing default rating (last row/column).
    pub fn default_index(&self) -> usize {
        self.num_ratings - 1
    }

    pub fn state_space(&self) -> &StateSpaceSpec {
        &self.state_space
    }

    pub fn loading(&self) -> &DMatrix<f64> {
        &self.loading
    }

    pub fn level(&self) -> &DMatrix<f64> {
        &self.level
    }

    /// Same K/G with replaced state dynamics (used by calibration).
    pub fn with_state_space(&self, state_space: StateSpaceSpec) -> Result<Self> {
        TransitionModelParams::new(self.num_ratings, state_space, self.loading.clone(), self.level.clone())
    }

    /// One-period transition matrix at factor value `x`.
    ///
    /// Every row sums to 1 within 1e-12; the default row is exactly
    /// (0,...,0,1). Softmax uses max-subtraction, so no overflow for any x.
    ///
    /// Panics if `x` does not match the factor dimension (programming
    /// error; the operation itself is total).
    pub fn transition_matrix(&self, x: &DVector<f64>) -> TransitionMatrix {
        let mut out = DMatrix::zeros(self.num_ratings, self.num_ratings);
        let mut theta = DVector::zeros(self.num_ratings * self.num_ratings);
        self.transition_matrix_into(x, &mut theta, &mut out);
        TransitionMatrix { probs: out }
    }

    /// Allocation-free variant for hot loops; `theta` must be R²-long and
    /// `out` R×R.
    pub fn transition_matrix_into(&self, x: &DVector<f64>, theta: &mut DVector<f64>, out: &mut DMatrix<f64>) {
        let r = self.num_ratings;
        assert_eq!(x.len(), self.dim(), "factor dimension mismatch");
        assert_eq!(theta.len(), r * r);
        assert_eq!(out.shape(), (r, r));
        theta.gemv(1.0, &self.loading, x, 0.0);
        for i in 0..r - 1 {
            let mut max_w = f64::NEG_INFINITY;
            for j in 0..r {
                let w = self.log_level[(i, j)] + theta[i * r + j];
                out[(i, j)] = w;
                max_w = max_w.max(w);
            }
            let mut sum = 0.0;
            for j in 0..r {
                let s = (out[(i, j)] - max_w).exp(); // exp(-inf) = 0 for zero levels
                out[(i, j)] = s;
                sum += s;
            }
            for j in 0..r {
                out[(i, j)] /= sum;
            }
        }
        let default = r - 1;
        for j in 0..r {
            out[(default, j)] = if j == default { 1.0 } else { 0.0 };
        }
    }
}

/// Row-stochastic one-period migration matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    probs: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn num_ratings(&self) -> usize {
        self.probs.nrows()
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.probs[(from, to)]
    }

    /// One-period default probability from `from`.
    pub fn default_prob(&self, from: usize) -> f64 {
        self.probs[(from, self.probs.ncols() - 1)]
    }
}

/// Time-indexed latent factor vectors. `values[0]` is the state at time 0;
/// the transition over period k is driven by `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPath {
    values: Vec<DVector<f64>>,
}

impl FactorPath {
    pub fn new(values: Vec<DVector<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("factor path cannot be empty".into()));
        }
        let d = values[0].len();
        if values.iter().any(|v| v.len() != d) {
            return Err(Error::Contract("factor path entries must share a dimension".into()));
        }
        Ok(FactorPath { values })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Number of periods covered (length minus the time-0 entry).
    pub fn periods(&self) -> usize {
        self.values.len() - 1
    }

    pub fn value(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }
}

/// Time-indexed migration count matrices m_{ij,k}, k = 1..T.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationCounts {
    counts: Vec<DMatrix<u64>>,
    num_ratings: usize,
}

impl MigrationCounts {
    pub fn new(counts: Vec<DMatrix<u64>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Contract("migration counts need at least one period".into()));
        }
        let r = counts[0].nrows();
        if r < 2 || counts.iter().any(|m| m.shape() != (r, r)) {
            return Err(Error::Contract("count matrices must be square R×R with consistent R".into()));
        }
        let default = r - 1;
        for (k, m) in counts.iter().enumerate() {
            for j in 0..default {
                if m[(default, j)] != 0 {
                    return Err(Error::Contract(format!(
                        "period {}: default row counts must be concentrated on the default column",
                        k + 1
                    )));
                }
            }
        }
        Ok(MigrationCounts { counts, num_ratings: r })
    }

    pub fn num_ratings(&self) -> usize {
        self.num_ratings
    }

    pub fn periods(&self) -> usize {
        self.counts.len()
    }

    /// Count matrix of period k (1-based).
    pub fn matrix(&self, k: usize) -> &DMatrix<u64> {
        &self.counts[k - 1]
    }

    pub fn matrices(&self) -> &[DMatrix<u64>] {
        &self.counts
    }

    /// Row total N_{i,k} (1-based period).
    pub fn row_total(&self, k: usize, i: usize) -> u64 {
        self.counts[k - 1].row(i).iter().sum()
    }

    /// Write as CSV with columns (period, from_rating, to_rating, count);
    /// ratings and periods are 1-based in the file.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        self.write_csv(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    /// Write the header and records into an existing CSV writer.
    pub fn write_csv<W: std::io::Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        writer.write_record(["period", "from_rating", "to_rating", "count"])?;
        for (idx, m) in self.counts.iter().enumerate() {
            for i in 0..self.num_ratings {
                for j in 0..self.num_ratings {
                    writer.write_record([
                        (idx + 1).to_string(),
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        m[(i, j)].to_string(),
                    ])?;
                }
            }
        }
        Ok(())
    }

    pub fn load_csv(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)?;
        let mut cells: Vec<(usize, usize, usize, u64)> = Vec::new();
        let mut max_period = 0usize;
        let mut max_rating = 0usize;
        for record in reader.records() {
            let record = record?;
            let parse = |idx: usize| -> Result<usize> {
                record
                    .get(idx)
                    .and_then(|s| s.trim().parse::<usize>().ok())
                    .ok_or_else(|| Error::Contract(format!("bad migration CSV field in {record:?}")))
            };
            let (period, from, to) = (parse(0)?, parse(1)?, parse(2)?);
            let count = record
                .get(3)
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| Error::Contract(format!("bad count field in {record:?}")))?;
            if period == 0 || from == 0 || to == 0 {
                return Err(Error::Contract("migration CSV uses 1-based period and ratings".into()));
            }
            max_period = max_period.max(period);
            max_rating = max_rating.max(from.max(to));
            cells.push((period, from, to, count));
        }
        if max_period == 0 {
            return Err(Error::Contract("migration CSV holds no rows".into()));
        }
        let mut counts = vec![DMatrix::<u64>::zeros(max_rating, max_rating); max_period];
        for (period, from, to, count) in cells {
            counts[period - 1][(from - 1, to - 1)] += count;
        }
        MigrationCounts::new(counts)
    }
}

/// Multinomial migration log-likelihood of a parameter set on counts along
/// a given factor path, combinatorial constants included so values are
/// comparable across parameterizations.
///
/// Terms with m = 0 contribute nothing even when T = 0; m > 0 on a
/// zero-probability cell yields -inf (a valid likelihood value).
pub fn log_likelihood(params: &TransitionModelParams, counts: &MigrationCounts, path: &FactorPath) -> Result<f64> {
    if counts.num_ratings() != params.num_ratings() {
        return Err(Error::Contract("counts and parameters disagree on the number of ratings".into()));
    }
    if path.periods() != counts.periods() {
        return Err(Error::Contract(format!(
            "counts cover {} periods but the factor path covers {}",
            counts.periods(),
            path.periods()
        )));
    }
    let r = params.num_ratings();
    let mut total = 0.0;
    let mut theta = DVector::zeros(r * r);
    let mut t_mat = DMatrix::zeros(r, r);
    for k in 1..=counts.periods() {
        params.transition_matrix_into(path.value(k), &mut theta, &mut t_mat);
        let m = counts.matrix(k);
        for i in 0..r {
            let n_total: u64 = m.row(i).iter().sum();
            if n_total == 0 {
                continue;
            }
            let mut log_const = ln_factorial(n_total as f64);
            for j in 0..r {
                let mij = m[(i, j)];
                if mij > 0 {
                    let t = t_mat[(i, j)];
                    if t <= 0.0 {
                        return Ok(f64::NEG_INFINITY);
                    }
                    total += mij as f64 * t.ln();
                    log_const -= ln_factorial(mij as f64);
                }
            }
            total += log_const;
        }
    }
    Ok(total)
}

/// Starting state of a factor simulation.
#[derive(Debug, Clone)]
pub enum FactorStart {
    /// Fixed initial vector (point-in-time).
    Point(DVector<f64>),
    /// Draw x_0 from the stationary distribution (through-the-cycle).
    Stationary,
    /// Draw x_0 from the model's own initial belief N(a0, P0).
    Initial,
}

/// Simulate x_0..x_T under the model dynamics. Deterministic given
/// (params, t, start, stream).
pub fn simulate_factors(
    params: &TransitionModelParams,
    t: usize,
    start: &FactorStart,
    rng: &mut StreamRng,
) -> Result<FactorPath> {
    if t == 0 {
        return Err(Error::Contract("simulation horizon must be at least 1".into()));
    }
    let spec = params.state_space();
    let d = spec.dim();
    let q_sqrt = psd_sqrt(spec.process_noise_cov());
    let x0 = match start {
        FactorStart::Point(v) => {
            if v.len() != d {
                return Err(Error::Contract("starting point dimension mismatch".into()));
            }
            v.clone()
        }
        FactorStart::Stationary => {
            let st = bayes::stationary_distribution(spec)?;
            let sqrt = psd_sqrt(&st.cov);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &st.mean + sqrt * z
        }
        FactorStart::Initial => {
            let belief = spec.initial_belief();
            let sqrt = psd_sqrt(&belief.cov);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            &belief.mean + sqrt * z
        }
    };
    let mut values = Vec::with_capacity(t + 1);
    values.push(x0);
    for _ in 0..t {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let next = params.state_space().transition_matrix() * values.last().unwrap() + &q_sqrt * z;
        values.push(next);
    }
    FactorPath::new(values)
}

/// One multinomial draw via sequential conditional binomials.
fn multinomial_draw(n: u64, probs: &[f64], rng: &mut StreamRng) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut remaining = n;
    let mut prob_left = 1.0f64;
    for j in 0..probs.len() {
        if remaining == 0 {
            break;
        }
        if j == probs.len() - 1 {
            out[j] = remaining;
            break;
        }
        let p = if prob_left > 0.0 { (probs[j] / prob_left).clamp(0.0, 1.0) } else { 0.0 };
        let draw = if p >= 1.0 {
            remaining
        } else if p <= 0.0 {
            0
        } else {
            Binomial::new(remaining, p).expect("valid binomial").sample(rng)
        };
        out[j] = draw;
        remaining -= draw;
        prob_left -= probs[j];
    }
    out
}

/// Simulate obligor migrations along a factor path.
///
/// `initial_counts[i]` obligors start in rating i; each period every
/// rating's population takes one multinomial draw from its transition row
/// (distributionally identical to per-obligor draws). Defaulted obligors
/// stay defaulted through the absorbing default row.
pub fn simulate_migrations(
    params: &TransitionModelParams,
    path: &FactorPath,
    initial_counts: &[u64],
    rng: &mut StreamRng,
) -> Result<MigrationCounts> {
    let r = params.num_ratings();
    if initial_counts.len() != r {
        return Err(Error::Contract("initial counts must have one entry per rating".into()));
    }
    if path.dim() != params.dim() {
        return Err(Error::Contract("factor path dimension mismatch".into()));
    }
    let default = params.default_index();
    let mut population: Vec<u64> = initial_counts.to_vec();
    let mut theta = DVector::zeros(r * r);
    let mut t_mat = DMatrix::zeros(r, r);
    let mut out = Vec::with_capacity(path.periods());
    let mut row_probs = vec![0.0f64; r];
    for k in 1..=path.periods() {
        params.transition_matrix_into(path.value(k), &mut theta, &mut t_mat);
        let mut counts = DMatrix::<u64>::zeros(r, r);
        let mut next_population = vec![0u64; r];
        for i in 0..r {
            if population[i] == 0 {
                continue;
            }
            if i == default {
                counts[(default, default)] += population[i];
                next_population[default] += population[i];
                continue;
            }
            for j in 0..r {
                row_probs[j] = t_mat[(i, j)];
            }
            let draws = multinomial_draw(population[i], &row_probs, rng);
            for j in 0..r {
                counts[(i, j)] += draws[j];
                next_population[j] += draws[j];
            }
        }
        population = next_population;
        out.push(counts);
    }
    MigrationCounts::new(out)
}

/// Cumulative default probability term structure for an obligor starting
/// in `initial_rating`: entry k is (prod_{j=1..k} T(x_j))_{r,D}, k = 1..T.
pub fn cumulative_pd(params: &TransitionModelParams, path: &FactorPath, initial_rating: usize) -> Result<Vec<f64>> {
    let r = params.num_ratings();
    if initial_rating >= params.default_index() {
        return Err(Error::Contract("initial rating must be performing".into()));
    }
    if path.dim() != params.dim() {
        return Err(Error::Contract("factor path dimension mismatch".into()));
    }
    let default = params.default_index();
    let mut theta = DVector::zeros(r * r);
    let mut t_mat = DMatrix::zeros(r, r);
    let mut row = DVector::zeros(r);
    row[initial_rating] = 1.0;
    let mut next = DVector::zeros(r);
    let mut out = Vec::with_capacity(path.periods());
    for k in 1..=path.periods() {
        params.transition_matrix_into(path.value(k), &mut theta, &mut t_mat);
        next.gemv_tr(1.0, &t_mat, &row, 0.0); // rowᵀ T
        std::mem::swap(&mut row, &mut next);
        out.push(row[default]);
    }
    Ok(out)
}

/// Expected cumulative PD curves from a fixed factor value at the horizon.
///
/// The first period is driven by `start` itself (deterministic across
/// paths); periods 2..maturity draw fresh continuations. Returns one curve
/// of length `maturity` per performing rating, averaged over `n_paths`.
pub fn expected_pd_curves(
    params: &TransitionModelParams,
    start: &DVector<f64>,
    maturity: usize,
    n_paths: usize,
    stream: RngStream,
) -> Result<Vec<Vec<f64>>> {
    if maturity == 0 || n_paths == 0 {
        return Err(Error::Contract("maturity and path count must be positive".into()));
    }
    if start.len() != params.dim() {
        return Err(Error::Contract("starting point dimension mismatch".into()));
    }
    let r = params.num_ratings();
    let performing = r - 1;
    let default = params.default_index();
    let a = params.state_space().transition_matrix();
    let q_sqrt = psd_sqrt(params.state_space().process_noise_cov());

    let mut theta = DVector::zeros(r * r);
    let mut t_mat = DMatrix::zeros(r, r);
    params.transition_matrix_into(start, &mut theta, &mut t_mat);
    // After period 1 the occupancy rows are the rows of T(start).
    let mut first_rows = DMatrix::zeros(performing, r);
    for i in 0..performing {
        for j in 0..r {
            first_rows[(i, j)] = t_mat[(i, j)];
        }
    }

    let mut sums = vec![vec![0.0f64; maturity]; performing];
    let mut occupancy = DMatrix::zeros(performing, r);
    let mut occupancy_next = DMatrix::zeros(performing, r);
    let d = params.dim();
    let mut x = DVector::zeros(d);
    let mut noise = DVector::zeros(d);

    for path in 0..n_paths {
        let mut rng = stream.substream(path as u64).rng();
        occupancy.copy_from(&first_rows);
        for i in 0..performing {
            sums[i][0] += occupancy[(i, default)];
        }
        x.copy_from(start);
        for k in 1..maturity {
            for i in 0..d {
                noise[i] = rng.sample::<f64, _>(StandardNormal);
            }
            let drifted = a * &x + &q_sqrt * &noise;
            x.copy_from(&drifted);
            params.transition_matrix_into(&x, &mut theta, &mut t_mat);
            occupancy_next.gemm(1.0, &occupancy, &t_mat, 0.0);
            std::mem::swap(&mut occupancy, &mut occupancy_next);
            for i in 0..performing {
                sums[i][k] += occupancy[(i, default)];
            }
        }
    }
    for curve in &mut sums {
        for v in curve.iter_mut() {
            *v /= n_paths as f64;
        }
    }
    Ok(sums)
}

/// Multinomial-logit observation density of one period's (possibly
/// fractional) migration counts, with gradient and Hessian in the factor.
#[derive(Debug, Clone)]
pub struct MultinomialObservation<'a> {
    params: &'a TransitionModelParams,
    counts: DMatrix<f64>,
    row_totals: Vec<f64>,
    log_const: f64,
}

impl<'a> MultinomialObservation<'a> {
    /// `counts` may be real-valued (the projection feeds pseudo-counts
    /// N0 · T); entries must be nonnegative.
    pub fn new(params: &'a TransitionModelParams, counts: DMatrix<f64>) -> Result<Self> {
        let r = params.num_ratings();
        if counts.shape() != (r, r) {
            return Err(Error::Contract("observation counts must be R×R".into()));
        }
        if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::Contract("observation counts must be finite and nonnegative".into()));
        }
        let mut row_totals = vec![0.0; r];
        let mut log_const = 0.0;
        for i in 0..r {
            let n: f64 = counts.row(i).iter().sum();
            row_totals[i] = n;
            if n > 0.0 {
                log_const += ln_factorial(n);
                for j in 0..r {
                    if counts[(i, j)] > 0.0 {
                        log_const -= ln_factorial(counts[(i, j)]);
                    }
                }
            }
        }
        Ok(MultinomialObservation { params, counts, row_totals, log_const })
    }

    fn transition(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let r = self.params.num_ratings();
        let mut theta = DVector::zeros(r * r);
        let mut t_mat = DMatrix::zeros(r, r);
        self.params.transition_matrix_into(x, &mut theta, &mut t_mat);
        t_mat
    }
}

impl ObservationModel for MultinomialObservation<'_> {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let t_mat = self.transition(x);
        let r = self.params.num_ratings();
        let mut total = self.log_const;
        for i in 0..r {
            if self.row_totals[i] == 0.0 {
                continue;
            }
            for j in 0..r {
                let m = self.counts[(i, j)];
                if m > 0.0 {
                    let t = t_mat[(i, j)];
                    if t <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    total += m * t.ln();
                }
            }
        }
        total
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let t_mat = self.transition(x);
        let r = self.params.num_ratings();
        let d = self.params.dim();
        let loading = self.params.loading();
        let mut grad = DVector::zeros(d);
        for i in 0..self.params.default_index() {
            let n = self.row_totals[i];
            if n == 0.0 {
                continue;
            }
            for j in 0..r {
                let resid = self.counts[(i, j)] - n * t_mat[(i, j)];
                if resid != 0.0 {
                    for col in 0..d {
                        grad[col] += resid * loading[(i * r + j, col)];
                    }
                }
            }
        }
        grad
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let t_mat = self.transition(x);
        let r = self.params.num_ratings();
        let d = self.params.dim();
        let loading = self.params.loading();
        let mut hess = DMatrix::zeros(d, d);
        // -sum_i N_i K_iᵀ (diag(T_i) - T_i T_iᵀ) K_i over performing rows.
        let mut weighted = DMatrix::zeros(r, d);
        for i in 0..self.params.default_index() {
            let n = self.row_totals[i];
            if n == 0.0 {
                continue;
            }
            let block_start = i * r;
            for j in 0..r {
                for col in 0..d {
                    weighted[(j, col)] = loading[(block_start + j, col)];
                }
            }
            // mean-center the loading rows under T_i, then accumulate the
            // weighted Gram matrix: K̃ᵀ diag(T) K̃ with K̃ = K - 1·(Tᵀ K)
            let mut mean_row = vec![0.0f64; d];
            for j in 0..r {
                let t = t_mat[(i, j)];
                for col in 0..d {
                    mean_row[col] += t * weighted[(j, col)];
                }
            }
            for j in 0..r {
                let t = t_mat[(i, j)];
                if t == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let ka = weighted[(j, a)] - mean_row[a];
                    for b in 0..d {
                        let kb = weighted[(j, b)] - mean_row[b];
                        hess[(a, b)] -= n * t * ka * kb;
                    }
                }
            }
        }
        hess
    }

    fn obs_dim(&self) -> usize {
        self.params.num_ratings() * self.params.num_ratings()
    }
}

/// Wrap integer migration counts as per-period observation models.
pub fn count_observations<'a>(
    params: &'a TransitionModelParams,
    counts: &MigrationCounts,
) -> Result<Vec<MultinomialObservation<'a>>> {
    (1..=counts.periods())
        .map(|k| {
            let m = counts.matrix(k).map(|c| c as f64);
            MultinomialObservation::new(params, m)
        })
        .collect()
}

/// The published benchmark parameter block (four factors, four ratings).
pub fn benchmark_params() -> TransitionModelParams {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.6, 0.95, 0.9, 0.5]));
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.6, 0.1, 0.1, 0.7]));
    #[rustfmt::skip]
    let loading = DMatrix::from_row_slice(16, 4, &[
         0.00,  0.00,  0.00,  0.00,
         0.20,  0.04,  0.06,  0.10,
         0.12, -0.36,  0.12, -0.04,
         0.38, -0.28, -0.26, -0.08,
        -0.17,  0.34,  0.18, -0.01,
         0.00,  0.00,  0.00,  0.00,
         0.02, -0.27,  0.08, -0.01,
        -0.07, -0.14,  0.16, -0.05,
        -0.22, -0.11,  0.01,  0.12,
        -0.03, -0.20,  0.01,  0.22,
         0.00,  0.00,  0.00,  0.00,
        -0.08,  0.09, -0.05, -0.03,
         0.00,  0.00,  0.00,  0.00,
         0.00,  0.00,  0.00,  0.00,
         0.00,  0.00,  0.00,  0.00,
         0.00,  0.00,  0.00,  0.00,
    ]);
    #[rustfmt::skip]
    let level = DMatrix::from_row_slice(4, 4, &[
        0.95, 0.03, 0.0198, 0.0002,
        0.05, 0.90, 0.04,   0.01,
        0.05, 0.12, 0.78,   0.05,
        0.00, 0.00, 0.00,   1.00,
    ]);
    let spec = StateSpaceSpec::new(a, q, DVector::zeros(4), DMatrix::zeros(4, 4)).unwrap();
    let mut params = TransitionModelParams::new(4, spec, loading, level).unwrap();
    // Through-the-cycle initial distribution.
    let stationary = bayes::stationary_distribution(params.state_space()).unwrap();
    let spec = params.state_space().with_initial(&stationary).unwrap();
    params = params.with_state_space(spec).unwrap();
    params
}

/// Initial belief helper shared by calibration and projection defaults.
pub fn stationary_initial(params: &TransitionModelParams) -> Result<GaussianBelief> {
    bayes::stationary_distribution(params.state_space())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::domains;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_rating_params(g_perform: [f64; 2], k_offdiag: &[f64]) -> TransitionModelParams {
        let d = k_offdiag.len();
        let spec = StateSpaceSpec::new(
            DMatrix::identity(d, d) * 0.8,
            DMatrix::identity(d, d) * 0.3,
            DVector::zeros(d),
            DMatrix::identity(d, d),
        )
        .unwrap();
        let mut loading = DMatrix::zeros(4, d);
        for (col, &v) in k_offdiag.iter().enumerate() {
            loading[(1, col)] = v; // transition (1 -> 2): row index 0*2+1
        }
        let level = DMatrix::from_row_slice(2, 2, &[g_perform[0], g_perform[1], 0.0, 1.0]);
        TransitionModelParams::new(2, spec, loading, level).unwrap()
    }

    #[test]
    fn zero_factor_reproduces_level_matrix() {
        let params = benchmark_params();
        let t = params.transition_matrix(&DVector::zeros(4));
        let g = params.level();
        assert!((t.matrix() - g).amax() < 1e-14);
        assert_abs_diff_eq!(t.prob(0, 0), 0.95, epsilon = 1e-14);
        assert_abs_diff_eq!(t.prob(0, 1), 0.03, epsilon = 1e-14);
        assert_abs_diff_eq!(t.prob(0, 2), 0.0198, epsilon = 1e-14);
        assert_abs_diff_eq!(t.prob(0, 3), 0.0002, epsilon = 1e-14);
    }

    #[test]
    fn analytic_two_state_softmax() {
        // g = (0.5, 0.5), theta = (0, ln 3) -> row (0.25, 0.75)
        let params = two_rating_params([0.5, 0.5], &[1.0]);
        let x = DVector::from_element(1, 3.0f64.ln());
        let t = params.transition_matrix(&x);
        assert_abs_diff_eq!(t.prob(0, 0), 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(t.prob(0, 1), 0.75, epsilon = 1e-14);
    }

    #[test]
    fn default_row_is_exact_unit_vector() {
        let params = benchmark_params();
        let t = params.transition_matrix(&DVector::from_vec(vec![30.0, -40.0, 25.0, -60.0]));
        assert_eq!(t.prob(3, 3), 1.0);
        assert_eq!(t.prob(3, 0), 0.0);
        assert_eq!(t.prob(3, 1), 0.0);
        assert_eq!(t.prob(3, 2), 0.0);
    }

    #[test]
    fn level_scale_invariance() {
        // Scaling a level row before construction leaves T unchanged.
        let base = benchmark_params();
        let mut scaled_level = base.level().clone();
        for j in 0..4 {
            scaled_level[(1, j)] *= 17.5;
        }
        let scaled = TransitionModelParams::new(4, base.state_space().clone(), base.loading().clone(), scaled_level)
            .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.8, 1.2, 0.5]);
        let t0 = base.transition_matrix(&x);
        let t1 = scaled.transition_matrix(&x);
        assert!((t0.matrix() - t1.matrix()).amax() < 1e-14);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_for_bounded_factors(
            x0 in -50.0f64..50.0, x1 in -50.0f64..50.0, x2 in -50.0f64..50.0, x3 in -50.0f64..50.0,
        ) {
            let params = benchmark_params();
            let t = params.transition_matrix(&DVector::from_vec(vec![x0, x1, x2, x3]));
            for i in 0..4 {
                let sum: f64 = t.matrix().row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(t.matrix().row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn cumulative_pd_monotone_in_unit_interval(seed in 0u64..1000) {
            let params = benchmark_params();
            let mut rng = RngStream::new(seed, domains::TESTS, 11).rng();
            let path = simulate_factors(&params, 12, &FactorStart::Stationary, &mut rng).unwrap();
            for rating in 0..3 {
                let pd = cumulative_pd(&params, &path, rating).unwrap();
                let mut prev = 0.0;
                for &p in &pd {
                    prop_assert!(p >= prev - 1e-15);
                    prop_assert!((0.0..=1.0).contains(&p));
                    prev = p;
                }
            }
        }
    }

    #[test]
    fn log_likelihood_zero_counts_is_zero() {
        let params = benchmark_params();
        let counts = MigrationCounts::new(vec![DMatrix::zeros(4, 4); 3]).unwrap();
        let path = FactorPath::new(vec![DVector::zeros(4); 4]).unwrap();
        assert_eq!(log_likelihood(&params, &counts, &path).unwrap(), 0.0);
    }

    #[test]
    fn log_likelihood_two_state_analytic() {
        // One period, m = (2, 1) on T row (0.5, 0.5): log(3 * 0.125)
        let params = two_rating_params([0.5, 0.5], &[1.0]);
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = 2;
        m[(0, 1)] = 1;
        let counts = MigrationCounts::new(vec![m]).unwrap();
        let path = FactorPath::new(vec![DVector::zeros(1), DVector::zeros(1)]).unwrap();
        let value = log_likelihood(&params, &counts, &path).unwrap();
        assert_abs_diff_eq!(value, 0.375f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn log_likelihood_zero_probability_with_counts_is_neg_infinity() {
        let params = two_rating_params([1.0, 0.0], &[1.0]);
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1;
        let counts = MigrationCounts::new(vec![m]).unwrap();
        let path = FactorPath::new(vec![DVector::zeros(1), DVector::zeros(1)]).unwrap();
        assert_eq!(log_likelihood(&params, &counts, &path).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn simulate_factors_degenerate_dynamics() {
        // Q = 0, A = I: constant path. Q = 0, A = diag(a): x_k = a^k x0.
        let d = 2;
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.4]));
        let spec = StateSpaceSpec::new(a, DMatrix::zeros(d, d), DVector::zeros(d), DMatrix::zeros(d, d)).unwrap();
        let level = DMatrix::from_row_slice(3, 3, &[0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.0, 0.0, 1.0]);
        let params = TransitionModelParams::new(3, spec, DMatrix::zeros(9, 2), level.clone()).unwrap();
        let x0 = DVector::from_vec(vec![2.0, 1.0]);
        let mut rng = RngStream::new(3, domains::TESTS, 0).rng();
        let path = simulate_factors(&params, 4, &FactorStart::Point(x0.clone()), &mut rng).unwrap();
        for k in 0..=4 {
            assert_abs_diff_eq!(path.value(k)[0], 0.5f64.powi(k as i32) * 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(path.value(k)[1], (-0.4f64).powi(k as i32) * 1.0, epsilon = 1e-12);
        }

        let spec_id = StateSpaceSpec::new(
            DMatrix::identity(d, d),
            DMatrix::zeros(d, d),
            DVector::zeros(d),
            DMatrix::zeros(d, d),
        )
        .unwrap();
        let params_id = TransitionModelParams::new(3, spec_id, DMatrix::zeros(9, 2), level).unwrap();
        let path = simulate_factors(&params_id, 4, &FactorStart::Point(x0.clone()), &mut rng).unwrap();
        for k in 0..=4 {
            assert!((path.value(k) - &x0).amax() < 1e-15);
        }
    }

    #[test]
    fn simulate_factors_is_reproducible() {
        let params = benchmark_params();
        let a = simulate_factors(&params, 10, &FactorStart::Stationary, &mut RngStream::new(9, domains::TESTS, 1).rng())
            .unwrap();
        let b = simulate_factors(&params, 10, &FactorStart::Stationary, &mut RngStream::new(9, domains::TESTS, 1).rng())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn migrations_identity_transitions_stay_diagonal() {
        let d = 1;
        let spec = StateSpaceSpec::new(
            DMatrix::identity(d, d),
            DMatrix::zeros(d, d),
            DVector::zeros(d),
            DMatrix::zeros(d, d),
        )
        .unwrap();
        let level = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let params = TransitionModelParams::new(3, spec, DMatrix::zeros(9, 1), level).unwrap();
        let path = FactorPath::new(vec![DVector::zeros(1); 6]).unwrap();
        let mut rng = RngStream::new(1, domains::TESTS, 2).rng();
        let counts = simulate_migrations(&params, &path, &[100, 50, 7], &mut rng).unwrap();
        for k in 1..=5 {
            let m = counts.matrix(k);
            assert_eq!(m[(0, 0)], 100);
            assert_eq!(m[(1, 1)], 50);
            assert_eq!(m[(2, 2)], 7);
            assert_eq!(m.iter().map(|&c| c).sum::<u64>(), 157);
        }
    }

    #[test]
    fn migrations_default_is_absorbing() {
        let params = benchmark_params();
        let path = FactorPath::new(vec![DVector::zeros(4); 4]).unwrap();
        let mut rng = RngStream::new(2, domains::TESTS, 3).rng();
        let counts = simulate_migrations(&params, &path, &[0, 0, 0, 1], &mut rng).unwrap();
        for k in 1..=3 {
            assert_eq!(counts.matrix(k)[(3, 3)], 1);
        }
    }

    #[test]
    fn cumulative_pd_identity_transitions_is_zero() {
        let spec = StateSpaceSpec::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let level = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let params = TransitionModelParams::new(2, spec, DMatrix::zeros(4, 1), level).unwrap();
        let path = FactorPath::new(vec![DVector::zeros(1); 11]).unwrap();
        let pd = cumulative_pd(&params, &path, 0).unwrap();
        assert!(pd.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn cumulative_pd_constant_hazard_analytic() {
        // R=2 with constant one-period PD p: PD(k) = 1 - (1-p)^k.
        let p = 0.07;
        let params = two_rating_params([1.0 - p, p], &[0.0]);
        let path = FactorPath::new(vec![DVector::zeros(1); 13]).unwrap();
        let pd = cumulative_pd(&params, &path, 0).unwrap();
        for (idx, &value) in pd.iter().enumerate() {
            let k = idx as i32 + 1;
            assert_abs_diff_eq!(value, 1.0 - (1.0 - p).powi(k), epsilon = 1e-13);
        }
    }

    #[test]
    fn multinomial_observation_flat_when_empty() {
        use crate::bayes::{mode_estimate, MODE_MAX_ITER, MODE_TOL};
        // A single observation with zero trials leaves the prior untouched.
        let params = two_rating_params([0.9, 0.1], &[1.0]);
        let obs = vec![MultinomialObservation::new(&params, DMatrix::zeros(2, 2)).unwrap()];
        let spec = params.state_space();
        let result = mode_estimate(&obs, spec, MODE_TOL, MODE_MAX_ITER).unwrap();
        let prior = crate::bayes::kalman_predict(&spec.initial_belief(), spec).unwrap();
        assert_abs_diff_eq!(result.smoothed[0].mean[0], prior.mean[0], epsilon = 1e-12);
        assert_abs_diff_eq!(result.smoothed[0].cov[(0, 0)], prior.cov[(0, 0)], epsilon = 1e-12);
        assert_eq!(result.log_likelihood, 0.0);
    }

    #[test]
    fn multinomial_gradient_hessian_match_finite_differences() {
        let params = benchmark_params();
        let mut counts = DMatrix::zeros(4, 4);
        counts[(0, 0)] = 900.0;
        counts[(0, 1)] = 60.0;
        counts[(0, 2)] = 35.0;
        counts[(0, 3)] = 5.0;
        counts[(1, 0)] = 40.0;
        counts[(1, 1)] = 880.0;
        counts[(1, 2)] = 60.0;
        counts[(1, 3)] = 20.0;
        counts[(2, 2)] = 500.0;
        counts[(2, 3)] = 30.0;
        let obs = MultinomialObservation::new(&params, counts).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.3, 0.7, -0.2]);
        let grad = obs.gradient(&x);
        let hess = obs.hessian(&x);
        let eps = 1e-6;
        for c in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += eps;
            xm[c] -= eps;
            let fd = (obs.log_density(&xp) - obs.log_density(&xm)) / (2.0 * eps);
            assert_abs_diff_eq!(grad[c], fd, epsilon = 1e-4);
            let gp = obs.gradient(&xp);
            let gm = obs.gradient(&xm);
            for rrow in 0..4 {
                let fd2 = (gp[rrow] - gm[rrow]) / (2.0 * eps);
                assert_abs_diff_eq!(hess[(rrow, c)], fd2, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn multinomial_hessian_negative_semidefinite_at_random_points() {
        let params = benchmark_params();
        let mut counts = DMatrix::zeros(4, 4);
        for i in 0..3 {
            for j in 0..4 {
                counts[(i, j)] = 10.0 + (i * 4 + j) as f64;
            }
        }
        counts[(3, 3)] = 25.0;
        let obs = MultinomialObservation::new(&params, counts).unwrap();
        let mut rng = RngStream::new(5, domains::TESTS, 4).rng();
        for _ in 0..100 {
            let x = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let hess = obs.hessian(&x);
            let eig = crate::math::symmetrize(&hess).symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l <= 1e-9), "indefinite Hessian at {x:?}");
        }
    }

    #[test]
    fn counts_csv_round_trip() {
        let params = benchmark_params();
        let mut rng = RngStream::new(4, domains::TESTS, 5).rng();
        let path = simulate_factors(&params, 6, &FactorStart::Stationary, &mut rng).unwrap();
        let counts = simulate_migrations(&params, &path, &[500, 300, 200, 10], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("counts.csv");
        counts.save_csv(&file).unwrap();
        let loaded = MigrationCounts::load_csv(&file).unwrap();
        assert_eq!(counts, loaded);
    }
}
