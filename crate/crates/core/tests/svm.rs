mod common;

use hcil::svm::{self, calibrate, log_loss, LinearSvm, SvmParams, SvmProblem, TrainOutput};
use hcil::{CalibratedSvm, GroupId, SvmId};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{blob, dot, rng};

const ID: SvmId = SvmId::Coarse(GroupId(0));

fn rows(data: &[Vec<f32>]) -> Vec<&[f32]> {
    data.iter().map(Vec::as_slice).collect()
}

/// Random problem that a hyperplane separates with margin, both classes
/// present.
fn separable(seed: u64, n: usize, d: usize) -> (Vec<Vec<f32>>, Vec<f64>) {
    let mut r = rng(seed);
    loop {
        let w: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm < 1e-3 {
            continue;
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        while xs.len() < n {
            let x: Vec<f32> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
            let m = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f32>() / norm + 0.2;
            if m.abs() >= 0.4 {
                ys.push(if m > 0.0 { 1.0 } else { -1.0 });
                xs.push(x);
            }
        }
        if ys.iter().any(|&y| y != ys[0]) {
            return (xs, ys);
        }
    }
}

/// Overlapping Gaussian classes.
fn noisy(seed: u64, n: usize, d: usize) -> (Vec<Vec<f32>>, Vec<f64>) {
    let mut r = rng(seed);
    let pos = vec![0.5f32; d];
    let neg = vec![-0.5f32; d];
    let mut xs = blob(&mut r, &pos, 1.0, n / 2);
    xs.extend(blob(&mut r, &neg, 1.0, n - n / 2));
    let ys = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
    (xs, ys)
}

fn primal(out: &TrainOutput, p: &SvmProblem<'_>) -> f64 {
    let w = &out.svm.weights;
    let b = out.svm.bias;
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let loss: f64 = (0..p.len())
        .map(|i| p.upper_bound(i) * (1.0 - p.labels()[i] * (dot(w, p.features()[i]) + b)).max(0.0))
        .sum();
    reg + loss
}

fn distance(a: &LinearSvm, b: &LinearSvm) -> f64 {
    let dw: f64 = a
        .weights
        .iter()
        .zip(&b.weights)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (dw + (a.bias - b.bias).powi(2)).sqrt()
}

/// Two tol-accurate solutions of a 1-strongly convex primal are within
/// 2 * sqrt(2 * tol) of each other.
fn strong_convexity_bound(tol: f64) -> f64 {
    2.0 * (2.0 * tol).sqrt()
}

#[test]
fn two_symmetric_points() {
    let data = vec![vec![-1.0f32], vec![1.0]];
    let p = SvmProblem::new(rows(&data), vec![-1.0, 1.0], 1.0).unwrap();
    let out = svm::train(&p, &SvmParams::default());
    assert!((out.svm.weights[0] - 1.0).abs() <= 1e-4);
    assert!(out.svm.bias.abs() <= 1e-4);
    assert!(out.duality_gap <= 1e-6);
}

#[test]
fn reported_gap_is_primal_minus_dual() {
    let (xs, ys) = noisy(3, 120, 4);
    let p = SvmProblem::new(rows(&xs), ys, 0.8).unwrap();
    let out = svm::train(&p, &SvmParams::default());
    let dual = *out.dual_objectives.last().unwrap();
    let gap = primal(&out, &p) - dual;
    assert!((gap - out.duality_gap).abs() <= 1e-8 * primal(&out, &p).max(1.0));
    assert!(out.converged);
}

#[test]
fn duplicated_points_equal_doubled_penalty() {
    let (xs, ys) = noisy(7, 80, 3);
    let params = SvmParams {
        tol: 1e-10,
        max_iter: 100_000,
        ..SvmParams::default()
    };
    let mut dup = xs.clone();
    dup.extend(xs.iter().cloned());
    let mut dup_y = ys.clone();
    dup_y.extend(ys.iter().copied());
    let twice = svm::train(&SvmProblem::new(rows(&dup), dup_y, 1.0).unwrap(), &params);
    let oracle = svm::train(&SvmProblem::new(rows(&xs), ys, 2.0).unwrap(), &params);
    assert!(twice.converged && oracle.converged);
    assert!(distance(&twice.svm, &oracle.svm) <= strong_convexity_bound(params.tol));
}

#[test]
fn duplicated_separable_points_keep_boundary() {
    let (xs, ys) = separable(8, 60, 2);
    let params = SvmParams {
        tol: 1e-9,
        ..SvmParams::default()
    };
    let c = 1e3;
    let once = svm::train(&SvmProblem::new(rows(&xs), ys.clone(), c).unwrap(), &params);
    let mut dup = xs.clone();
    dup.extend(xs.iter().cloned());
    let mut dup_y = ys.clone();
    dup_y.extend(ys.iter().copied());
    let twice = svm::train(&SvmProblem::new(rows(&dup), dup_y, c).unwrap(), &params);
    assert!(distance(&once.svm, &twice.svm) <= strong_convexity_bound(params.tol));
}

#[test]
fn separable_blobs_have_zero_hinge_loss() {
    let mut r = rng(21);
    let mut xs = blob(&mut r, &[3.0, 3.0], 0.4, 50);
    xs.extend(blob(&mut r, &[-3.0, -3.0], 0.4, 50));
    let ys: Vec<f64> = (0..100).map(|i| if i < 50 { 1.0 } else { -1.0 }).collect();
    let p = SvmProblem::new(rows(&xs), ys.clone(), 100.0).unwrap();
    let out = svm::train(&p, &SvmParams::default());
    assert!(out.converged);
    let hinge: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (1.0 - y * (dot(&out.svm.weights, x) + out.svm.bias)).max(0.0))
        .sum();
    assert!(hinge <= 1e-6, "hinge {hinge}");
}

#[test]
fn gap_within_tol_on_random_separable_problems() {
    for seed in 0..50 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(2..=200);
        let d = r.random_range(1..=16);
        let (xs, ys) = separable(seed, n, d);
        let p = SvmProblem::new(rows(&xs), ys, 1.0).unwrap();
        let out = svm::train(&p, &SvmParams::default());
        assert!(out.duality_gap <= 1e-6, "seed {seed}: gap {}", out.duality_gap);
        for (i, a) in out.alphas.iter().enumerate() {
            assert!(*a >= 0.0 && *a <= p.upper_bound(i));
        }
    }
}

#[test]
fn margin_examples() {
    let a = CalibratedSvm::uncalibrated(ID, LinearSvm { weights: vec![1.0, 0.0], bias: 0.0 });
    assert_eq!(a.margin(&[0.0, 5.0]).unwrap(), 0.0);
    let b = CalibratedSvm::uncalibrated(ID, LinearSvm { weights: vec![1.0, 0.0], bias: -1.0 });
    assert_eq!(b.margin(&[3.0, 0.0]).unwrap(), 2.0);
    assert!(b.margin(&[1.0]).is_err());
}

#[test]
fn margins_match_brute_force_dot_product() {
    let mut r = rng(77);
    let d = 13;
    let svm = CalibratedSvm::uncalibrated(
        ID,
        LinearSvm {
            weights: (0..d).map(|_| r.random_range(-5.0..5.0)).collect(),
            bias: r.random_range(-1.0..1.0),
        },
    );
    for _ in 0..100 {
        let x: Vec<f32> = (0..d).map(|_| r.random_range(-10.0f32..10.0)).collect();
        let mut expect = 0.0f64;
        for (wk, xk) in svm.weights.iter().zip(&x) {
            expect += wk * f64::from(*xk);
        }
        expect += svm.bias;
        assert_eq!(svm.margin(&x).unwrap(), expect);
    }
}

#[test]
fn symmetric_margins_calibrate_to_one_half() {
    let data: Vec<Vec<f32>> = (0..20).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
    let labels: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let svm = calibrate(
        LinearSvm { weights: vec![1.0], bias: 0.0 },
        ID,
        &rows(&data),
        &labels,
    )
    .unwrap();
    assert!((svm.confidence_of_margin(0.0) - 0.5).abs() <= 1e-6);
    assert!(svm.confidence_of_margin(1.0) > 0.5);
    assert!(svm.confidence_of_margin(1e6) > 1.0 - 1e-12);
}

#[test]
fn one_class_falls_back_to_plain_logistic() {
    let data: Vec<Vec<f32>> = vec![vec![0.5], vec![2.0], vec![-1.0]];
    let svm = calibrate(
        LinearSvm { weights: vec![1.0], bias: 0.0 },
        ID,
        &rows(&data),
        &[1.0, 1.0, 1.0],
    )
    .unwrap();
    for m in [-3.0, -0.5, 0.0, 0.7, 4.0] {
        let expect = 1.0 / (1.0 + f64::exp(-m));
        assert!((svm.confidence_of_margin(m) - expect).abs() <= 1e-15);
    }
}

#[test]
fn calibrated_log_loss_beats_fixed_map() {
    for seed in 0..10 {
        let (xs, ys) = separable(seed + 50, 120, 5);
        let p = SvmProblem::new(rows(&xs), ys.clone(), 1.0).unwrap();
        let out = svm::train(&p, &SvmParams::default());
        let margins: Vec<f64> = xs.iter().map(|x| out.svm.margin(x).unwrap()).collect();
        let cal = calibrate(out.svm, ID, &rows(&xs), &ys).unwrap();
        let fitted = log_loss(&margins, &ys, cal.a, cal.b);
        let fixed = log_loss(&margins, &ys, -1.0, 0.0);
        assert!(fitted <= fixed + 1e-12, "seed {seed}: {fitted} > {fixed}");
        assert!(cal.a < 0.0);
    }
}

fn problem_strategy() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 4usize..120, 1usize..8, 0.05f64..20.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dual_stays_feasible_and_rises((seed, n, d, c) in problem_strategy()) {
        let (xs, ys) = noisy(seed, n, d);
        let p = SvmProblem::new(rows(&xs), ys, c).unwrap().balanced();
        let params = SvmParams { max_iter: 300, seed, ..SvmParams::default() };
        let out = svm::train(&p, &params);
        for (i, a) in out.alphas.iter().enumerate() {
            prop_assert!(*a >= 0.0 && *a <= p.upper_bound(i));
        }
        for pair in out.dual_objectives.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0));
        }
        prop_assert!(out.duality_gap >= -1e-9 * primal(&out, &p).max(1.0));
    }

    #[test]
    fn confidence_order_matches_margin_order(
        seed in any::<u64>(),
        a in -8.0f64..-0.01,
        b in -3.0f64..3.0,
    ) {
        let mut r = rng(seed);
        let svm = CalibratedSvm {
            a,
            b,
            ..CalibratedSvm::uncalibrated(ID, LinearSvm {
                weights: (0..3).map(|_| r.random_range(-2.0..2.0)).collect(),
                bias: r.random_range(-1.0..1.0),
            })
        };
        let mut pairs: Vec<(f64, f64)> = (0..200)
            .map(|_| {
                let x: Vec<f32> = (0..3).map(|_| r.random_range(-5.0f32..5.0)).collect();
                (svm.margin(&x).unwrap(), svm.confidence(&x).unwrap())
            })
            .collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        for w in pairs.windows(2) {
            prop_assert!(w[1].1 >= w[0].1, "inversion {:?}", w);
            if w[1].1 > w[0].1 {
                prop_assert!(w[1].0 > w[0].0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..ProptestConfig::default()
    })]

    #[test]
    fn row_order_moves_solution_by_at_most_ten_tol(seed in any::<u64>(), n in 4usize..150, d in 1usize..12) {
        let (xs, ys) = separable(seed, n, d);
        let params = SvmParams::default();
        let a = svm::train(&SvmProblem::new(rows(&xs), ys.clone(), 1.0).unwrap(), &params);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut rng(seed.wrapping_add(1)));
        let px: Vec<&[f32]> = order.iter().map(|&i| xs[i].as_slice()).collect();
        let py: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let b = svm::train(&SvmProblem::new(px, py, 1.0).unwrap(), &params);
        prop_assert!(a.converged && b.converged);
        prop_assert!(distance(&a.svm, &b.svm) <= 10.0 * params.tol);
    }
}
