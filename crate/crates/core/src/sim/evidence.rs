//! Geometry-to-evidence fitting: maximum-likelihood logistic regression
//! with a ridge fallback under separation, temperature calibration, and
//! the Youden screening threshold.

use crate::error::SimError;
use crate::policy::sigmoid;

pub const EVIDENCE_DIM: usize = 5;

#[derive(Debug, Clone)]
pub struct EvidenceFit {
    pub weights: [f64; EVIDENCE_DIM],
    pub ridge_fallback: bool,
    pub iterations: usize,
}

/// `ln(1 + e^w)` without overflow or cancellation.
fn softplus(w: f64) -> f64 {
    if w > 0.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

/// Per-sample logistic NLL `-ln sigma((2y-1) s)` in cancellation-free form.
fn logistic_nll(score: f64, y: u8) -> f64 {
    softplus(if y == 1 { -score } else { score })
}

fn nll(weights: &[f64; EVIDENCE_DIM], xs: &[[f64; EVIDENCE_DIM]], ys: &[u8], ridge: f64) -> f64 {
    let mut acc = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let s: f64 = weights.iter().zip(x).map(|(w, v)| w * v).sum();
        acc += logistic_nll(s, y);
    }
    acc + 0.5 * ridge * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Gaussian elimination with partial pivoting; returns None when singular.
fn solve_linear(a: &mut [[f64; EVIDENCE_DIM]; EVIDENCE_DIM], b: &mut [f64; EVIDENCE_DIM]) -> Option<[f64; EVIDENCE_DIM]> {
    let n = EVIDENCE_DIM;
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; EVIDENCE_DIM];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

fn newton(
    xs: &[[f64; EVIDENCE_DIM]],
    ys: &[u8],
    ridge: f64,
) -> Option<(EvidenceFit, bool)> {
    let mut w = [0.0; EVIDENCE_DIM];
    for iter in 0..100 {
        let mut grad = [0.0; EVIDENCE_DIM];
        let mut hess = [[0.0; EVIDENCE_DIM]; EVIDENCE_DIM];
        let mut all_separated = true;
        for (x, &y) in xs.iter().zip(ys) {
            let s: f64 = w.iter().zip(x).map(|(wv, xv)| wv * xv).sum();
            let p = sigmoid(s);
            let resid = p - y as f64;
            let curv = (p * (1.0 - p)).max(1e-12);
            for r in 0..EVIDENCE_DIM {
                grad[r] += resid * x[r];
                for c in 0..EVIDENCE_DIM {
                    hess[r][c] += curv * x[r] * x[c];
                }
            }
            if (y == 1 && s <= 0.0) || (y == 0 && s >= 0.0) {
                all_separated = false;
            }
        }
        for r in 0..EVIDENCE_DIM {
            grad[r] += ridge * w[r];
            hess[r][r] += ridge;
        }
        let g_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if g_inf < 1e-8 {
            return Some((
                EvidenceFit {
                    weights: w,
                    ridge_fallback: ridge > 0.0,
                    iterations: iter,
                },
                false,
            ));
        }
        let w_inf = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if ridge == 0.0 && all_separated && w_inf > 10.0 {
            // weights diverging while training data is perfectly split

            return Some((
                EvidenceFit {
                    weights: w,
                    ridge_fallback: false,
                    iterations: iter,
                },
                true,
            ));
        }
        let mut h = hess;
        let mut g = grad;
        let delta = solve_linear(&mut h, &mut g)?;
        // backtracking on the NLL
        let base = nll(&w, xs, ys, ridge);
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = w;
            for r in 0..EVIDENCE_DIM {
                cand[r] -= step * delta[r];
            }
            if nll(&cand, xs, ys, ridge) < base {
                w = cand;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            return Some((
                EvidenceFit {
                    weights: w,
                    ridge_fallback: ridge > 0.0,
                    iterations: iter,
                },
                false,
            ));
        }
    }
    Some((
        EvidenceFit {
            weights: w,
            ridge_fallback: ridge > 0.0,
            iterations: 100,
        },
        false,
    ))
}

/// Maximum-likelihood logistic fit of the label on the geometry features.
/// Perfect separation (or a singular Hessian) falls back to a ridge fit
/// with L2 strength 1e-4.
pub fn fit_evidence_model(
    xs: &[[f64; EVIDENCE_DIM]],
    ys: &[u8],
) -> Result<EvidenceFit, SimError> {
    let has_pos = ys.iter().any(|&y| y == 1);
    let has_neg = ys.iter().any(|&y| y == 0);
    if !has_pos || !has_neg {
        return Err(SimError::SingleClass);
    }
    match newton(xs, ys, 0.0) {
        Some((fit, false)) => Ok(fit),
        _ => {
            let (fit, _) = newton(xs, ys, 1e-4).expect("ridge objective is strongly convex");
            Ok(EvidenceFit {
                ridge_fallback: true,
                ..fit
            })
        }
    }
}

/// Temperature-scaling result.
#[derive(Debug, Clone, Copy)]
pub struct Temperature {
    pub t: f64,
    /// True when the optimum pinned to the search boundary.
    pub boundary: bool,
}

/// Minimizes the calibration NLL of `sigmoid(s / T)` over
/// `log10 T in [-2.5, 2.5]` by golden-section search (tolerance 1e-5).
pub fn calibrate_temperature(scores: &[f64], ys: &[u8]) -> Temperature {
    let nll_at = |log_t: f64| -> f64 {
        let t = 10f64.powf(log_t);
        scores
            .iter()
            .zip(ys)
            .map(|(&s, &y)| logistic_nll(s / t, y))
            .sum()
    };
    let (mut lo, mut hi) = (-2.5f64, 2.5f64);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = nll_at(x1);
    let mut f2 = nll_at(x2);
    while hi - lo > 1e-5 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = nll_at(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = nll_at(x2);
        }
    }
    let log_t = 0.5 * (lo + hi);
    Temperature {
        t: 10f64.powf(log_t),
        boundary: log_t < -2.5 + 1e-3 || log_t > 2.5 - 1e-3,
    }
}

/// Screening threshold maximizing the Youden index `Se + Sp - 1` over the
/// midpoints of sorted unique values; ties resolve to the smallest
/// threshold. Positives are `value > tau`.
pub fn youden_threshold(values: &[f64], ys: &[u8]) -> Result<(f64, f64), SimError> {
    let p_total = ys.iter().filter(|&&y| y == 1).count();
    let n_total = ys.len() - p_total;
    if p_total == 0 || n_total == 0 {
        return Err(SimError::SingleClass);
    }
    let mut unique: Vec<f64> = values.to_vec();
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unique.dedup();
    let mut best_tau = f64::NAN;
    let mut best_j = f64::NEG_INFINITY;
    for w in unique.windows(2) {
        let tau = 0.5 * (w[0] + w[1]);
        let mut tp = 0usize;
        let mut tn = 0usize;
        for (&v, &y) in values.iter().zip(ys) {
            if v > tau {
                if y == 1 {
                    tp += 1;
                }
            } else if y == 0 {
                tn += 1;
            }
        }
        let j = tp as f64 / p_total as f64 + tn as f64 / n_total as f64 - 1.0;
        if j > best_j + 1e-15 {
            best_j = j;
            best_tau = tau;
        }
    }
    if best_tau.is_nan() {
        // all values identical: the only candidate is that value itself
        best_tau = unique[0];
        best_j = 0.0;
    }
    Ok((best_tau, best_j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synth(n: usize, w_true: [f64; 5], seed: u64) -> (Vec<[f64; 5]>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = [
                1.0,
                rng.random_range(0.2..1.0),
                rng.random_range(0.1..0.8),
                rng.random_range(3.0..4.5),
                rng.random_range(0.0..0.3),
            ];
            let s: f64 = w_true.iter().zip(&x).map(|(w, v)| w * v).sum();
            let y = (rng.random_range(0.0..1.0) < sigmoid(s)) as u8;
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn null_signal_recovers_base_rate_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            xs.push([
                1.0,
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(3.0..4.0),
                rng.random_range(0.0..0.3),
            ]);
            ys.push((rng.random_range(0.0..1.0) < 0.3) as u8);
        }
        let fit = fit_evidence_model(&xs, &ys).unwrap();
        let rate = ys.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
        let mean_x = [
            1.0,
            xs.iter().map(|x| x[1]).sum::<f64>() / n as f64,
            xs.iter().map(|x| x[2]).sum::<f64>() / n as f64,
            xs.iter().map(|x| x[3]).sum::<f64>() / n as f64,
            xs.iter().map(|x| x[4]).sum::<f64>() / n as f64,
        ];
        let s_mean: f64 = fit.weights.iter().zip(&mean_x).map(|(w, v)| w * v).sum();
        assert!((sigmoid(s_mean) - rate).abs() < 0.05, "mean score off: {s_mean}");
        assert!(!fit.ridge_fallback);
    }

    #[test]
    fn clean_margin_triggers_ridge_fallback() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..200 {
            let v = 0.2 + 0.6 * (i as f64 / 199.0);
            xs.push([1.0, v, 0.3, 3.5, 0.1]);
            ys.push((v > 0.6) as u8);
        }
        let fit = fit_evidence_model(&xs, &ys).unwrap();
        assert!(fit.ridge_fallback);
        assert!(fit.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn generative_recovery_within_wald_intervals() {
        let w_true = [-3.0, 4.0, 1.0, 0.2, -1.0];
        let (xs, ys) = synth(5000, w_true, 7);
        let fit = fit_evidence_model(&xs, &ys).unwrap();
        // Wald standard errors from the Hessian at the fit
        let mut hess = [[0.0; 5]; 5];
        for x in &xs {
            let s: f64 = fit.weights.iter().zip(x).map(|(w, v)| w * v).sum();
            let p = sigmoid(s);
            for r in 0..5 {
                for c in 0..5 {
                    hess[r][c] += p * (1.0 - p) * x[r] * x[c];
                }
            }
        }
        // invert via 5 solves
        for k in 0..5 {
            let mut h = hess;
            let mut e = [0.0; 5];
            e[k] = 1.0;
            let col = solve_linear(&mut h, &mut e).unwrap();
            let se = col[k].sqrt();
            let z = (fit.weights[k] - w_true[k]).abs() / se;
            assert!(z < 1.96, "coordinate {k}: z = {z}");
        }
    }

    #[test]
    fn single_class_fit_is_error() {
        let xs = vec![[1.0, 0.5, 0.3, 3.5, 0.1]; 10];
        let ys = vec![1u8; 10];
        assert!(matches!(fit_evidence_model(&xs, &ys), Err(SimError::SingleClass)));
    }

    #[test]
    fn calibrated_scores_give_unit_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut scores = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..20000 {
            let s = rng.random_range(-3.0..3.0);
            scores.push(s);
            ys.push((rng.random_range(0.0..1.0) < sigmoid(s)) as u8);
        }
        let t = calibrate_temperature(&scores, &ys);
        assert!((t.t - 1.0).abs() < 0.05, "T = {}", t.t);
        assert!(!t.boundary);
    }

    #[test]
    fn doubling_scores_doubles_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut scores = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..20000 {
            let s = rng.random_range(-3.0..3.0);
            scores.push(s);
            ys.push((rng.random_range(0.0..1.0) < sigmoid(s)) as u8);
        }
        let t1 = calibrate_temperature(&scores, &ys).t;
        let doubled: Vec<f64> = scores.iter().map(|s| 2.0 * s).collect();
        let t2 = calibrate_temperature(&doubled, &ys).t;
        assert!((t2 / t1 - 2.0).abs() < 0.02, "ratio {}", t2 / t1);
    }

    #[test]
    fn single_class_calibration_pins_boundary() {
        // all-positive scores with all-one labels: NLL is monotone in T
        let scores = vec![0.5, 1.0, 2.0, 0.3];
        let ys = vec![1u8, 1, 1, 1];
        let t = calibrate_temperature(&scores, &ys);
        assert!(t.boundary);
    }

    #[test]
    fn youden_exhaustive_example() {
        let (tau, j) = youden_threshold(&[0.3, 0.5, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
        assert!((tau - 0.6).abs() < 1e-12);
        assert!((j - 1.0).abs() < 1e-12);
    }

    #[test]
    fn youden_null_case_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..1.0)).collect();
        let ys: Vec<u8> = (0..2000).map(|_| (rng.random_range(0.0..1.0) < 0.5) as u8).collect();
        let (_, j) = youden_threshold(&values, &ys).unwrap();
        assert!(j < 0.1, "null J = {j}");
    }

    #[test]
    fn youden_single_class_errors() {
        assert!(youden_threshold(&[0.1, 0.2], &[1, 1]).is_err());
    }
}
