//! Platt-style logistic calibration of SVM margins.

/// Slope of the fixed map used when no fit is possible.
pub const FALLBACK_A: f64 = -1.0;
pub const FALLBACK_B: f64 = 0.0;

/// Fits `P(y = +1 | m) = 1 / (1 + exp(A*m + B))` by regularized maximum
/// likelihood with smoothed targets `(N+ + 1)/(N+ + 2)` and `1/(N- + 2)`.
///
/// Newton's method with backtracking line search. Returns `None` when the
/// labels contain a single class.
pub fn fit_logistic(margins: &[f64], labels: &[f64]) -> Option<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y > 0.0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }

    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const RIDGE: f64 = 1e-12;
    const EPS: f64 = 1e-5;

    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = labels
        .iter()
        .map(|&y| if y > 0.0 { hi } else { lo })
        .collect();

    let objective = |a: f64, b: f64| -> f64 {
        margins
            .iter()
            .zip(&targets)
            .map(|(&m, &t)| {
                let z = m * a + b;
                if z >= 0.0 {
                    t * z + (-z).exp().ln_1p()
                } else {
                    (t - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((n_neg + 1.0) / (n_pos + 1.0)).ln();
    let mut fval = objective(a, b);

    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21) = (RIDGE, RIDGE, 0.0);
        let (mut g1, mut g2) = (0.0, 0.0);
        for (&m, &t) in margins.iter().zip(&targets) {
            let z = m * a + b;
            // p = P(y=+1), q = 1 - p
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += m * m * d2;
            h22 += d2;
            h21 += m * d2;
            let d1 = t - p;
            g1 += m * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            break;
        }

        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;

        let mut step = 1.0;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < MIN_STEP {
            break;
        }
    }
    Some((a, b))
}

/// Mean negative log-likelihood of hard 0/1 labels under the map `(a, b)`.
pub fn log_loss(margins: &[f64], labels: &[f64], a: f64, b: f64) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            let z = a * m + b;
            // -log p = log(1 + e^z), -log(1 - p) = log(1 + e^-z)
            let s = if y > 0.0 { z } else { -z };
            if s > 0.0 {
                s + (-s).exp().ln_1p()
            } else {
                s.exp().ln_1p()
            }
        })
        .sum();
    total / margins.len() as f64
}
