//! Shared test support: a brute-force discretized-Bayes oracle.
// Each integration-test binary compiles its own copy; not all of them use
// every oracle.
#![allow(dead_code)]
//!
//! The oracle represents filtering/smoothing densities on a dense
//! equispaced grid and evaluates the prediction/update/backward integrals
//! by direct summation. Equispaced quadrature is spectrally accurate for
//! smooth rapidly-decaying integrands, so a 2001-point grid resolves the
//! 1-D fixtures far below the 1e-4 comparison tolerance. It shares no
//! code with the Kalman/mode-estimation implementation it checks.

use nalgebra::DMatrix;

pub struct Grid1d {
    pub points: Vec<f64>,
    pub step: f64,
}

impl Grid1d {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        let step = (hi - lo) / (n - 1) as f64;
        Grid1d { points: (0..n).map(|i| lo + step * i as f64).collect(), step }
    }
}

fn normal_density(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    (-0.5 * z * z / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

fn normalize(density: &mut [f64], step: f64) {
    let mass: f64 = density.iter().sum::<f64>() * step;
    for v in density.iter_mut() {
        *v /= mass;
    }
}

fn mean_of(density: &[f64], grid: &Grid1d) -> f64 {
    density.iter().zip(&grid.points).map(|(p, x)| p * x).sum::<f64>() * grid.step
}

/// Argmax of a log-density on the grid, refined by a three-point parabola.
fn refined_mode(log_density: &[f64], grid: &Grid1d) -> f64 {
    let (mut best, mut best_val) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in log_density.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    if best == 0 || best + 1 == log_density.len() {
        return grid.points[best];
    }
    let (lm, l0, lp) = (log_density[best - 1], log_density[best], log_density[best + 1]);
    let denom = lm - 2.0 * l0 + lp;
    let offset = if denom < 0.0 { 0.5 * (lm - lp) / denom } else { 0.0 };
    grid.points[best] + offset.clamp(-0.5, 0.5) * grid.step
}

pub struct Oracle1dResult {
    pub filter_means: Vec<f64>,
    pub smoother_means: Vec<f64>,
    pub smoother_modes: Vec<f64>,
}

/// Exact (discretized) filter and smoother for a 1-D model
/// `x_k = a x_{k-1} + N(0, q)`, `x_0 ~ N(m0, p0)`, with arbitrary
/// per-period observation log-likelihoods evaluated pointwise.
pub fn oracle_1d<F: Fn(usize, f64) -> f64>(
    a: f64,
    q: f64,
    m0: f64,
    p0: f64,
    n_obs: usize,
    log_lik: F,
    grid: &Grid1d,
) -> Oracle1dResult {
    let n = grid.points.len();
    // Transition kernel K[i][j] = p(x_i | x_j).
    let mut kernel = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            kernel[(i, j)] = normal_density(grid.points[i], a * grid.points[j], q);
        }
    }

    // Likelihood tables, max-normalized in log space.
    let mut likelihood: Vec<Vec<f64>> = Vec::with_capacity(n_obs);
    for k in 0..n_obs {
        let logs: Vec<f64> = grid.points.iter().map(|&x| log_lik(k, x)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        likelihood.push(logs.iter().map(|&l| (l - max).exp()).collect());
    }

    // Forward pass.
    let mut posterior: Vec<f64> = grid.points.iter().map(|&x| normal_density(x, m0, p0)).collect();
    normalize(&mut posterior, grid.step);
    let mut posteriors: Vec<Vec<f64>> = Vec::with_capacity(n_obs);
    let mut filter_means = Vec::with_capacity(n_obs);
    for lik in likelihood.iter() {
        let mut prior = vec![0.0f64; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += kernel[(i, j)] * posterior[j];
            }
            prior[i] = acc * grid.step;
        }
        let mut post: Vec<f64> = prior.iter().zip(lik).map(|(p, l)| p * l).collect();
        normalize(&mut post, grid.step);
        filter_means.push(mean_of(&post, grid));
        posteriors.push(post.clone());
        posterior = post;
    }

    // Backward pass: beta_k(x) = p(y_{k+1:T} | x_k) up to scale.
    let mut beta = vec![1.0f64; n];
    let mut smoother_means = vec![0.0; n_obs];
    let mut smoother_modes = vec![0.0; n_obs];
    for k in (0..n_obs).rev() {
        let mut smoothed: Vec<f64> = posteriors[k].iter().zip(&beta).map(|(a, b)| a * b).collect();
        normalize(&mut smoothed, grid.step);
        smoother_means[k] = mean_of(&smoothed, grid);
        let log_smoothed: Vec<f64> = smoothed.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
        smoother_modes[k] = refined_mode(&log_smoothed, grid);

        if k > 0 {
            // beta_{k-1}(x_j) = int p(x|x_j) lik_k(x) beta_k(x) dx
            let weighted: Vec<f64> = likelihood[k].iter().zip(&beta).map(|(l, b)| l * b).collect();
            let mut next = vec![0.0f64; n];
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += kernel[(i, j)] * weighted[i];
                }
                next[j] = acc * grid.step;
            }
            let max = next.iter().cloned().fold(0.0f64, f64::max);
            for v in next.iter_mut() {
                *v /= max;
            }
            beta = next;
        }
    }

    Oracle1dResult { filter_means, smoother_means, smoother_modes }
}

/// Joint posterior mode trajectory by max-product dynamic programming on
/// the grid, polished by coordinate-wise parabolic sweeps on the exact
/// continuous joint log-density. This is the object mode estimation
/// computes (the smoothed means at its fixed point are the joint mode).
pub fn oracle_1d_joint_mode<F: Fn(usize, f64) -> f64>(
    a: f64,
    q: f64,
    m0: f64,
    p0: f64,
    n_obs: usize,
    log_lik: F,
    grid: &Grid1d,
) -> Vec<f64> {
    let n = grid.points.len();
    // x_0 marginalized: x_1 ~ N(a m0, a^2 p0 + q).
    let first_var = a * a * p0 + q;
    let log_kernel = |to: f64, from: f64| -> f64 {
        let z = to - a * from;
        -0.5 * z * z / q
    };

    let mut score: Vec<f64> = grid
        .points
        .iter()
        .map(|&x| {
            let z = x - a * m0;
            -0.5 * z * z / first_var + log_lik(0, x)
        })
        .collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n_obs);
    back.push(vec![0; n]);
    for k in 1..n_obs {
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut arg = vec![0usize; n];
        for (i, &xi) in grid.points.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0;
            for (j, &xj) in grid.points.iter().enumerate() {
                let v = score[j] + log_kernel(xi, xj);
                if v > best {
                    best = v;
                    best_j = j;
                }
            }
            next[i] = best + log_lik(k, xi);
            arg[i] = best_j;
        }
        score = next;
        back.push(arg);
    }
    let mut idx = (0..n).max_by(|&i, &j| score[i].total_cmp(&score[j])).unwrap();
    let mut indices = vec![0usize; n_obs];
    for k in (0..n_obs).rev() {
        indices[k] = idx;
        idx = back[k][idx];
    }
    let mut trajectory: Vec<f64> = indices.iter().map(|&i| grid.points[i]).collect();

    // Coordinate-wise parabolic polish on the continuous joint density.
    let joint = |traj: &[f64], k: usize, x: f64| -> f64 {
        let mut value = if k == 0 {
            let z = x - a * m0;
            -0.5 * z * z / first_var
        } else {
            log_kernel(x, traj[k - 1])
        };
        if k + 1 < n_obs {
            value += log_kernel(traj[k + 1], x);
        }
        value + log_lik(k, x)
    };
    let mut h = grid.step;
    for _sweep in 0..4 {
        for k in 0..n_obs {
            let x = trajectory[k];
            let (fm, f0, fp) = (joint(&trajectory, k, x - h), joint(&trajectory, k, x), joint(&trajectory, k, x + h));
            let denom = fm - 2.0 * f0 + fp;
            if denom < 0.0 {
                trajectory[k] = x + (0.5 * (fm - fp) / denom).clamp(-1.0, 1.0) * h;
            }
        }
        h *= 0.25;
    }
    trajectory
}

pub struct Oracle2dResult {
    /// Per step, the (mean_x1, mean_x2) of the filtered posterior.
    pub filter_means: Vec<(f64, f64)>,
    pub smoother_means: Vec<(f64, f64)>,
}

/// Discretized filter/smoother for a 2-D model with diagonal dynamics
/// `x_k = diag(a) x_{k-1} + N(0, diag(q))`, initial N(m0, diag(p0)), and
/// pointwise observation log-likelihoods. The separable kernel makes the
/// prediction a pair of matrix products.
#[allow(clippy::too_many_arguments)]
pub fn oracle_2d<F: Fn(usize, f64, f64) -> f64>(
    a: [f64; 2],
    q: [f64; 2],
    m0: [f64; 2],
    p0: [f64; 2],
    n_obs: usize,
    log_lik: F,
    grid: &Grid1d,
) -> Oracle2dResult {
    let n = grid.points.len();
    let mut kernel = [DMatrix::<f64>::zeros(n, n), DMatrix::<f64>::zeros(n, n)];
    for axis in 0..2 {
        for j in 0..n {
            for i in 0..n {
                kernel[axis][(i, j)] = normal_density(grid.points[i], a[axis] * grid.points[j], q[axis]);
            }
        }
    }

    let mut likelihood: Vec<DMatrix<f64>> = Vec::with_capacity(n_obs);
    for k in 0..n_obs {
        let mut logs = DMatrix::<f64>::zeros(n, n);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                let v = log_lik(k, grid.points[i], grid.points[j]);
                logs[(i, j)] = v;
                max = max.max(v);
            }
        }
        likelihood.push(logs.map(|v| (v - max).exp()));
    }

    let normalize2 = |density: &mut DMatrix<f64>| {
        let mass = density.sum() * grid.step * grid.step;
        *density /= mass;
    };
    let mean2 = |density: &DMatrix<f64>| -> (f64, f64) {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                m1 += grid.points[i] * density[(i, j)];
                m2 += grid.points[j] * density[(i, j)];
            }
        }
        (m1 * grid.step * grid.step, m2 * grid.step * grid.step)
    };

    let mut posterior = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            posterior[(i, j)] =
                normal_density(grid.points[i], m0[0], p0[0]) * normal_density(grid.points[j], m0[1], p0[1]);
        }
    }
    normalize2(&mut posterior);

    let mut posteriors = Vec::with_capacity(n_obs);
    let mut filter_means = Vec::with_capacity(n_obs);
    let scale = grid.step * grid.step;
    for lik in likelihood.iter() {
        // prior = K1 posterior K2ᵀ dx²  (separable transition kernel)
        let prior = (&kernel[0] * &posterior * kernel[1].transpose()) * scale;
        let mut post = prior.component_mul(lik);
        normalize2(&mut post);
        filter_means.push(mean2(&post));
        posteriors.push(post.clone());
        posterior = post;
    }

    let mut beta = DMatrix::<f64>::from_element(n, n, 1.0);
    let mut smoother_means = vec![(0.0, 0.0); n_obs];
    for k in (0..n_obs).rev() {
        let mut smoothed = posteriors[k].component_mul(&beta);
        normalize2(&mut smoothed);
        smoother_means[k] = mean2(&smoothed);
        if k > 0 {
            let weighted = likelihood[k].component_mul(&beta);
            let mut next = (kernel[0].transpose() * weighted * &kernel[1]) * scale;
            let max = next.amax();
            next /= max;
            beta = next;
        }
    }

    Oracle2dResult { filter_means, smoother_means }
}
