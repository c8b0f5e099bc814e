//! Derivative-free local minimization (Nelder-Mead).
//!
//! Deterministic: the simplex trajectory depends only on the starting
//! point, the step sizes and the objective. Used by the transition-model
//! calibration on transformed (unconstrained) parameters.

/// Nelder-Mead controls.
#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Total objective-evaluation budget across restarts.
    pub max_evals: usize,
    /// Stop when the simplex f-spread falls below this.
    pub f_tol: f64,
    /// Stop when the simplex max coordinate spread falls below this.
    pub x_tol: f64,
    /// Initial simplex displacement per coordinate.
    pub initial_step: f64,
    /// Restarts: rebuild the simplex around the incumbent best point.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_evals: 10_000, f_tol: 1e-9, x_tol: 1e-9, initial_step: 0.1, restarts: 1 }
    }
}

/// Minimization outcome; `converged` means a tolerance was met before the
/// evaluation budget ran out (on the final restart).
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` starting from `x0`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> OptimResult {
    let n = x0.len();
    assert!(n > 0, "cannot optimize a zero-dimensional problem");
    let mut evals = 0usize;
    let mut best_x = x0.to_vec();
    let mut best_f = f(&best_x);
    evals += 1;
    if opts.max_evals == 0 {
        return OptimResult { x: best_x, f: best_f, evals, converged: false };
    }
    let mut converged = false;

    for _restart in 0..=opts.restarts {
        if evals >= opts.max_evals {
            break;
        }
        // Simplex around the incumbent best point.
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        let mut values: Vec<f64> = Vec::with_capacity(n + 1);
        simplex.push(best_x.clone());
        values.push(best_f);
        for i in 0..n {
            let mut v = best_x.clone();
            let step = opts.initial_step * v[i].abs().max(1.0);
            v[i] += step;
            let fv = f(&v);
            evals += 1;
            simplex.push(v);
            values.push(fv);
            if evals >= opts.max_evals {
                break;
            }
        }
        while simplex.len() < n + 1 {
            simplex.push(best_x.clone());
            values.push(best_f);
        }

        converged = false;
        while evals < opts.max_evals {
            // Order the simplex.
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let lo = order[0];
            let hi = order[n];
            let second_hi = order[n - 1];
            if values[lo] < best_f {
                best_f = values[lo];
                best_x = simplex[lo].clone();
            }
            let spread_f = values[hi] - values[lo];
            let spread_x = (0..n)
                .map(|i| {
                    let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
                    for v in &simplex {
                        mn = mn.min(v[i]);
                        mx = mx.max(v[i]);
                    }
                    mx - mn
                })
                .fold(0.0f64, f64::max);
            if spread_f.abs() < opts.f_tol || spread_x < opts.x_tol {
                converged = true;
                break;
            }

            // Centroid of all but the worst vertex.
            let mut centroid = vec![0.0; n];
            for (idx, v) in simplex.iter().enumerate() {
                if idx == hi {
                    continue;
                }
                for i in 0..n {
                    centroid[i] += v[i];
                }
            }
            for c in centroid.iter_mut() {
                *c /= n as f64;
            }

            let blend = |t: f64| -> Vec<f64> {
                (0..n).map(|i| centroid[i] + t * (centroid[i] - simplex[hi][i])).collect()
            };

            let reflected = blend(1.0);
            let f_reflected = f(&reflected);
            evals += 1;
            if f_reflected < values[lo] {
                let expanded = blend(2.0);
                let f_expanded = f(&expanded);
                evals += 1;
                if f_expanded < f_reflected {
                    simplex[hi] = expanded;
                    values[hi] = f_expanded;
                } else {
                    simplex[hi] = reflected;
                    values[hi] = f_reflected;
                }
            } else if f_reflected < values[second_hi] {
                simplex[hi] = reflected;
                values[hi] = f_reflected;
            } else {
                let contracted = if f_reflected < values[hi] { blend(0.5) } else { blend(-0.5) };
                let f_contracted = f(&contracted);
                evals += 1;
                if f_contracted < values[hi].min(f_reflected) {
                    simplex[hi] = contracted;
                    values[hi] = f_contracted;
                } else {
                    // Shrink toward the best vertex.
                    let anchor = simplex[lo].clone();
                    for (idx, v) in simplex.iter_mut().enumerate() {
                        if idx == lo {
                            continue;
                        }
                        for i in 0..n {
                            v[i] = anchor[i] + 0.5 * (v[i] - anchor[i]);
                        }
                        values[idx] = f(v);
                        evals += 1;
                        if evals >= opts.max_evals {
                            break;
                        }
                    }
                }
            }
        }
        for (idx, fv) in values.iter().enumerate() {
            if *fv < best_f {
                best_f = *fv;
                best_x = simplex[idx].clone();
            }
        }
    }

    OptimResult { x: best_x, f: best_f, evals, converged }
}
