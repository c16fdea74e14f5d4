//! Small damped Gauss-Newton (Levenberg-style) engine for the fit models
//! used in the analysis chain.

/// A nonlinear scalar model y(t; θ) with analytic Jacobian.
pub struct FitModel {
    pub dim: usize,
    pub eval: fn(&[f64], f64) -> f64,
    /// Writes ∂y/∂θᵢ into `out`.
    pub jacobian: fn(&[f64], f64, &mut [f64]),
}

/// A e^{−t/τ} cos(ωt + φ) + offset, θ = [A, τ, ω, φ, offset].
pub const DAMPED_COSINE: FitModel = FitModel {
    dim: 5,
    eval: |p, t| p[0] * (-t / p[1]).exp() * (p[2] * t + p[3]).cos() + p[4],
    jacobian: |p, t, out| {
        let decay = (-t / p[1]).exp();
        let arg = p[2] * t + p[3];
        let (s, c) = arg.sin_cos();
        out[0] = decay * c;
        out[1] = p[0] * decay * c * t / (p[1] * p[1]);
        out[2] = -p[0] * decay * s * t;
        out[3] = -p[0] * decay * s;
        out[4] = 1.0;
    },
};

/// A e^{−t/τ}, θ = [A, τ].
pub const EXPONENTIAL_DECAY: FitModel = FitModel {
    dim: 2,
    eval: |p, t| p[0] * (-t / p[1]).exp(),
    jacobian: |p, t, out| {
        let decay = (-t / p[1]).exp();
        out[0] = decay;
        out[1] = p[0] * decay * t / (p[1] * p[1]);
    },
};

pub struct FitCore {
    pub params: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub residual_rms: f64,
    pub converged: bool,
}

const MAX_ITER: usize = 200;
const REL_TOL: f64 = 1e-8;

/// Weighted least squares with adaptive damping. `stderr`, when present,
/// supplies 1/σ² weights; otherwise unit weights are used.
pub fn levenberg_marquardt(
    times: &[f64],
    values: &[f64],
    stderr: Option<&[f64]>,
    model: &FitModel,
    init: &[f64],
) -> FitCore {
    assert_eq!(init.len(), model.dim);
    let n = times.len();
    let dim = model.dim;
    let weights: Vec<f64> = match stderr {
        Some(s) => s
            .iter()
            .map(|x| if *x > 0.0 { 1.0 / (x * x) } else { 1.0 })
            .collect(),
        None => vec![1.0; n],
    };

    let chi2 = |p: &[f64]| -> f64 {
        times
            .iter()
            .zip(values)
            .zip(&weights)
            .map(|((&t, &y), &w)| {
                let r = y - (model.eval)(p, t);
                w * r * r
            })
            .sum()
    };

    let mut params = init.to_vec();
    let mut cost = chi2(&params);
    let mut lambda = 1e-3;
    let mut converged = false;

    let mut jrow = vec![0.0; dim];
    for _ in 0..MAX_ITER {
        // Normal equations J^T W J and J^T W r.
        let mut jtj = vec![0.0; dim * dim];
        let mut jtr = vec![0.0; dim];
        for ((&t, &y), &w) in times.iter().zip(values).zip(&weights) {
            (model.jacobian)(&params, t, &mut jrow);
            let r = y - (model.eval)(&params, t);
            for a in 0..dim {
                jtr[a] += w * jrow[a] * r;
                for b in a..dim {
                    jtj[a * dim + b] += w * jrow[a] * jrow[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                jtj[a * dim + b] = jtj[b * dim + a];
            }
        }

        // Gradient small => done (gradient of chi2 is -2 J^T W r).
        let gnorm = jtr.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = cost.max(1e-300);
        if gnorm <= REL_TOL * scale.sqrt().max(1e-300) {
            converged = true;
            break;
        }

        // Damped step: (J^T W J + lambda diag) dp = J^T W r.
        let mut stepped = false;
        for _try in 0..12 {
            let mut m = jtj.clone();
            for a in 0..dim {
                m[a * dim + a] += lambda * jtj[a * dim + a].max(1e-300);
            }
            if let Some(dp) = solve_sym(&m, &jtr, dim) {
                let trial: Vec<f64> =
                    params.iter().zip(&dp).map(|(p, d)| p + d).collect();
                let trial_cost = chi2(&trial);
                if trial_cost <= cost {
                    let rel_step = dp
                        .iter()
                        .zip(&params)
                        .map(|(d, p)| (d / p.abs().max(1e-30)).abs())
                        .fold(0.0f64, f64::max);
                    let rel_drop = (cost - trial_cost) / cost.max(1e-300);
                    params = trial;
                    cost = trial_cost;
                    lambda = (lambda * 0.3).max(1e-14);
                    stepped = true;
                    if rel_step < REL_TOL || rel_drop < REL_TOL * REL_TOL {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if converged || !stepped {
            converged = converged || cost <= 1e-28;
            break;
        }
    }

    // Linearized covariance at the optimum, scaled by the reduced chi2
    // (floored so perfect fits still report positive uncertainties).
    let dof = (n as f64 - dim as f64).max(1.0);
    let value_scale = values
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let chi2_red = (cost / dof).max((f64::EPSILON * value_scale).powi(2));
    let mut jtw = vec![0.0; dim * dim];
    for (&t, &w) in times.iter().zip(&weights) {
        (model.jacobian)(&params, t, &mut jrow);
        for a in 0..dim {
            for b in a..dim {
                jtw[a * dim + b] += w * jrow[a] * jrow[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            jtw[a * dim + b] = jtw[b * dim + a];
        }
    }
    let sigmas = match invert_sym(&jtw, dim) {
        Some(inv) => (0..dim)
            .map(|a| (inv[a * dim + a].max(0.0) * chi2_red).sqrt())
            .collect(),
        None => vec![f64::NAN; dim],
    };
    let converged = converged && sigmas.iter().all(|s| s.is_finite() && *s > 0.0);

    FitCore {
        params,
        sigmas,
        residual_rms: (cost / n as f64).sqrt(),
        converged,
    }
}

/// Largest relative deviation between the analytic Jacobian and central
/// finite differences over the given evaluation times.
pub fn max_jacobian_deviation(model: &FitModel, params: &[f64], times: &[f64]) -> f64 {
    let dim = model.dim;
    let mut analytic = vec![0.0; dim];
    let mut worst: f64 = 0.0;
    for &t in times {
        (model.jacobian)(params, t, &mut analytic);
        for a in 0..dim {
            let h = 1e-6 * params[a].abs().max(1e-12);
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[a] += h;
            minus[a] -= h;
            let fd = ((model.eval)(&plus, t) - (model.eval)(&minus, t)) / (2.0 * h);
            let scale = analytic[a].abs().max(fd.abs()).max(1e-9);
            worst = worst.max((analytic[a] - fd).abs() / scale);
        }
    }
    worst
}

/// Solve the small symmetric positive system M x = b by Gaussian elimination
/// with partial pivoting.
fn solve_sym(m: &[f64], b: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let mut x = b.to_vec();
    for col in 0..dim {
        let mut piv = col;
        for row in (col + 1)..dim {
            if a[row * dim + col].abs() > a[piv * dim + col].abs() {
                piv = row;
            }
        }
        if a[piv * dim + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..dim {
                a.swap(col * dim + k, piv * dim + k);
            }
            x.swap(col, piv);
        }
        let d = a[col * dim + col];
        for row in (col + 1)..dim {
            let f = a[row * dim + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..dim {
                a[row * dim + k] -= f * a[col * dim + k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..dim).rev() {
        let mut s = x[col];
        for k in (col + 1)..dim {
            s -= a[col * dim + k] * x[k];
        }
        x[col] = s / a[col * dim + col];
    }
    Some(x)
}

fn invert_sym(m: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; dim * dim];
    let mut e = vec![0.0; dim];
    for col in 0..dim {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[col] = 1.0;
        let x = solve_sym(m, &e, dim)?;
        for row in 0..dim {
            inv[row * dim + col] = x[row];
        }
    }
    Some(inv)
}
