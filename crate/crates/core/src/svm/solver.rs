//! Dual coordinate descent for the L1-loss (hinge) linear SVM.
//!
//! The bias is folded into the weights by appending a constant 1 to every
//! input, so the dual is
//!
//! ```text
//! max  sum(a) - 0.5 * || sum_i a_i y_i x_i ||^2     s.t.  0 <= a_i <= U_i
//! ```
//!
//! with `U_i` the per-class penalty. Each coordinate step solves its
//! one-dimensional subproblem exactly, so the dual objective never decreases.
//! The duality gap against the primal
//! `0.5 ||w||^2 + sum_i U_i max(0, 1 - y_i w.x_i)` is the stopping rule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LinearSvm, SvmParams, SvmProblem};

/// Epochs between full duality-gap evaluations.
const GAP_EVERY: usize = 4;

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub svm: LinearSvm,
    pub alphas: Vec<f64>,
    pub duality_gap: f64,
    pub epochs: usize,
    pub converged: bool,
    /// Dual objective after each epoch.
    pub dual_objectives: Vec<f64>,
}

/// Trains on `problem` with `params.tol`, `params.max_iter` and
/// `params.seed`. The penalty comes from the problem, not `params.c`.
pub fn train(problem: &SvmProblem<'_>, params: &SvmParams) -> TrainOutput {
    let n = problem.len();
    let d = problem.dimension();
    let stride = d + 1;

    // Row-major augmented copy; y_i folded in so row i is y_i * [x_i, 1].
    let mut rows = vec![0.0f64; n * stride];
    let mut qd = vec![0.0f64; n];
    let upper: Vec<f64> = (0..n).map(|i| problem.upper_bound(i)).collect();
    for (i, x) in problem.features().iter().enumerate() {
        let y = problem.labels()[i];
        let row = &mut rows[i * stride..(i + 1) * stride];
        for (dst, &v) in row.iter_mut().zip(x.iter()) {
            *dst = y * v as f64;
        }
        row[d] = y;
        qd[i] = row.iter().map(|v| v * v).sum();
    }

    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; stride];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut dual_objectives = Vec::new();
    let mut gap = f64::INFINITY;
    let mut epochs = 0;

    let mut alpha_sum = 0.0f64;
    while epochs < params.max_iter {
        epochs += 1;
        order.shuffle(&mut rng);
        for &i in &order {
            let row = &rows[i * stride..(i + 1) * stride];
            let g = dot(&w, row) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == upper[i] {
                g.max(0.0)
            } else {
                g
            };
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, upper[i]);
                let delta = alpha[i] - old;
                if delta != 0.0 {
                    alpha_sum += delta;
                    for (wk, &xk) in w.iter_mut().zip(row) {
                        *wk += delta * xk;
                    }
                }
            }
        }

        if epochs % GAP_EVERY != 0 && epochs < params.max_iter {
            dual_objectives.push(alpha_sum - 0.5 * dot(&w, &w));
            continue;
        }
        refine_free_set(&rows, stride, &upper, &mut alpha);
        // Rebuild w from alpha so the certificate does not inherit drift
        // from the incremental updates.
        w.iter_mut().for_each(|v| *v = 0.0);
        for (i, &a) in alpha.iter().enumerate() {
            if a != 0.0 {
                for (wk, &xk) in w.iter_mut().zip(&rows[i * stride..(i + 1) * stride]) {
                    *wk += a * xk;
                }
            }
        }
        alpha_sum = alpha.iter().sum();
        let half_norm = 0.5 * dot(&w, &w);
        let dual = alpha_sum - half_norm;
        let hinge: f64 = (0..n)
            .map(|i| upper[i] * (1.0 - dot(&w, &rows[i * stride..(i + 1) * stride])).max(0.0))
            .sum();
        let primal = half_norm + hinge;
        dual_objectives.push(dual);
        gap = primal - dual;
        if gap <= params.tol {
            break;
        }
    }

    let converged = gap <= params.tol;
    if !converged {
        log::warn!(
            "dual coordinate descent stopped after {epochs} epochs with duality gap {gap:.3e} > tol {:.1e}",
            params.tol
        );
    }
    let bias = w[d];
    w.truncate(d);
    TrainOutput {
        svm: LinearSvm { weights: w, bias },
        alphas: alpha,
        duality_gap: gap,
        epochs,
        converged,
        dual_objectives,
    }
}

/// Active-set refinement between epochs. A pivoted Cholesky of the Gram
/// matrix of the free rows splits them into an independent set, which takes
/// a Newton step to the dual maximizer on the current face, and dependent
/// ones, each moved along its null-space direction. Every step is an exact
/// line search clipped to the box, so the dual never decreases.
fn refine_free_set(rows: &[f64], stride: usize, upper: &[f64], alpha: &mut [f64]) {
    let free: Vec<usize> = (0..alpha.len())
        .filter(|&i| alpha[i] > 0.0 && alpha[i] < upper[i])
        .collect();
    let k = free.len();
    if k == 0 || k > 8 * stride {
        return;
    }
    let row = |i: usize| &rows[i * stride..(i + 1) * stride];
    let mut w = vec![0.0f64; stride];
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            axpy(a, row(i), &mut w);
        }
    }

    let mut resid: Vec<f64> = free.iter().map(|&i| dot(row(i), row(i))).collect();
    let scale = resid.iter().copied().fold(0.0f64, f64::max);
    let mut picked = vec![false; k];
    let mut piv: Vec<usize> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while piv.len() < stride {
        let Some(p) = (0..k)
            .filter(|&a| !picked[a])
            .max_by(|&a, &b| resid[a].total_cmp(&resid[b]))
        else {
            break;
        };
        if resid[p] <= 1e-10 * scale {
            break;
        }
        let s = resid[p].sqrt();
        let zp = row(free[p]);
        let col: Vec<f64> = (0..k)
            .map(|a| {
                let g = dot(row(free[a]), zp) - cols.iter().map(|c| c[a] * c[p]).sum::<f64>();
                g / s
            })
            .collect();
        for a in 0..k {
            resid[a] -= col[a] * col[a];
        }
        picked[p] = true;
        piv.push(p);
        cols.push(col);
    }
    let r = piv.len();
    if r == 0 {
        return;
    }
    // L restricted to the pivots is lower triangular in pivot order.
    let l = |j: usize, m: usize| cols[m][piv[j]];
    let solve_lower = |b: &mut [f64]| {
        for j in 0..r {
            let v = b[j] - (0..j).map(|m| l(j, m) * b[m]).sum::<f64>();
            b[j] = v / l(j, j);
        }
    };
    let solve_upper = |b: &mut [f64]| {
        for j in (0..r).rev() {
            let v = b[j] - (j + 1..r).map(|m| l(m, j) * b[m]).sum::<f64>();
            b[j] = v / l(j, j);
        }
    };

    let mut delta: Vec<f64> = piv.iter().map(|&a| 1.0 - dot(row(free[a]), &w)).collect();
    solve_lower(&mut delta);
    solve_upper(&mut delta);
    let newton: Vec<(usize, f64)> = piv.iter().map(|&a| free[a]).zip(delta).collect();
    let t = box_step(alpha, upper, &newton, 1.0);
    for &(i, d) in &newton {
        axpy(t * d, row(i), &mut w);
    }

    for a in (0..k).filter(|&a| !picked[a]) {
        let j = free[a];
        if alpha[j] <= 0.0 || alpha[j] >= upper[j] {
            continue;
        }
        let mut v: Vec<f64> = (0..r).map(|m| cols[m][a]).collect();
        solve_upper(&mut v);
        let mut dir: Vec<(usize, f64)> = piv.iter().zip(&v).map(|(&p, &c)| (free[p], -c)).collect();
        dir.push((j, 1.0));
        let mut u = vec![0.0f64; stride];
        let mut slope = 0.0;
        for &(i, d) in &dir {
            axpy(d, row(i), &mut u);
            slope += d * (1.0 - dot(row(i), &w));
        }
        if slope == 0.0 {
            continue;
        }
        if slope < 0.0 {
            dir.iter_mut().for_each(|e| e.1 = -e.1);
            u.iter_mut().for_each(|x| *x = -*x);
            slope = -slope;
        }
        let curvature = dot(&u, &u);
        let preferred = if curvature > 0.0 { slope / curvature } else { f64::INFINITY };
        let t = box_step(alpha, upper, &dir, preferred);
        axpy(t, &u, &mut w);
    }
}

/// Moves `alpha` by `t * dir` with `t = min(preferred, largest feasible)`,
/// snapping the blocking coordinate onto its bound. Returns `t`.
fn box_step(alpha: &mut [f64], upper: &[f64], dir: &[(usize, f64)], preferred: f64) -> f64 {
    let mut t = preferred;
    let mut blocking = None;
    for (e, &(i, d)) in dir.iter().enumerate() {
        let room = if d < 0.0 {
            -alpha[i] / d
        } else if d > 0.0 {
            (upper[i] - alpha[i]) / d
        } else {
            continue;
        };
        if room < t {
            t = room;
            blocking = Some(e);
        }
    }
    if !t.is_finite() || t <= 0.0 {
        return 0.0;
    }
    for (e, &(i, d)) in dir.iter().enumerate() {
        alpha[i] = if Some(e) == blocking {
            if d < 0.0 {
                0.0
            } else {
                upper[i]
            }
        } else {
            (alpha[i] + t * d).clamp(0.0, upper[i])
        };
    }
    t
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yk, &xk) in y.iter_mut().zip(x) {
        *yk += a * xk;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
