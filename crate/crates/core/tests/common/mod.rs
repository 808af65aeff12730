//! Test-only oracles, independent of the crate's evaluation paths.
#![allow(dead_code)]

use ioulmm::covariance::{assemble_q, GParam, KernelKind, KernelSpec};
use ioulmm::{Dataset, ParamVector, Subject};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Composite Gauss-Legendre integral of `f` over [a, b].
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize, rule: &[(f64, f64)]) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for &(x, w) in rule {
            acc += w * f(mid + 0.5 * h * x);
        }
    }
    acc * 0.5 * h
}

/// cov[W(s), W(t)] as the double integral of the stationary OU covariance
/// τ²/(2α)·e^{-α|u-v|} over [0,s]×[0,t], split along the diagonal kink.
pub fn iou_by_quadrature(alpha: f64, tau: f64, s: f64, t: f64) -> f64 {
    let rule = gauss_legendre(24);
    let c = tau * tau / (2.0 * alpha);
    let inner = |u: f64| {
        let k = |v: f64| (-alpha * (u - v).abs()).exp();
        let lo = u.min(t);
        integrate(&k, 0.0, lo, 8, &rule) + integrate(&k, lo, t, 8, &rule)
    };
    let split = s.min(t);
    c * (integrate(&inner, 0.0, split, 8, &rule) + integrate(&inner, split, s, 8, &rule))
}

/// Five-point central difference derivative.
pub fn derivative(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// Log-likelihood through explicit LU inverse and determinant.
pub fn dense_log_likelihood(ds: &Dataset, theta: &ParamVector, spec: &KernelSpec) -> f64 {
    let beta = DVector::from_column_slice(&theta.beta);
    let mut total = 0.0;
    for s in &ds.subjects {
        let q = assemble_q(s, &theta.cov, spec).unwrap();
        let r = &s.y - &s.x * &beta;
        let qinv = q.clone().try_inverse().unwrap();
        let n = s.n_obs() as f64;
        total += -0.5 * n * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * q.determinant().ln()
            - 0.5 * (r.transpose() * qinv * &r)[(0, 0)];
    }
    total
}

pub fn all_specs() -> [KernelSpec; 4] {
    [
        KernelSpec::new(KernelKind::Iou, GParam::PaperBivariate),
        KernelSpec::new(KernelKind::Iou, GParam::CholeskyFactor),
        KernelSpec::new(KernelKind::Fbm, GParam::PaperBivariate),
        KernelSpec::new(KernelKind::Fbm, GParam::CholeskyFactor),
    ]
}

/// A small random instance: N ≤ `max_subjects` subjects with n_i ≤ `max_points`
/// distinct times in (0, 5], p_beta = 2, p_b = 2, arbitrary responses and a
/// parameter for which Q_i is positive definite.
pub fn random_instance(seed: u64, spec: &KernelSpec, max_subjects: usize, max_points: usize) -> (Dataset, ParamVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sub = rng.random_range(1..=max_subjects);
    let subjects = (0..n_sub)
        .map(|i| {
            let n = rng.random_range(1..=max_points);
            let mut times: Vec<f64> = Vec::new();
            while times.len() < n {
                let t = (rng.random_range(0.05..5.0_f64) * 100.0).round() / 100.0;
                if !times.contains(&t) {
                    times.push(t);
                }
            }
            times.sort_by(f64::total_cmp);
            Subject {
                id: format!("s{i}"),
                y: DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0)),
                x: DMatrix::from_fn(n, 2, |j, c| if c == 0 { times[j] } else { rng.random_range(-1.0..1.0) }),
                z: DMatrix::from_fn(n, 2, |j, c| if c == 0 { 1.0 } else { times[j] }),
                times,
            }
        })
        .collect();
    let g1 = rng.random_range(0.4..1.5);
    let g3 = rng.random_range(0.4..1.5);
    let gamma = match spec.g_param {
        GParam::PaperBivariate => vec![g1, rng.random_range(-0.5..0.5) * g1 * g3, g3],
        GParam::CholeskyFactor => vec![g1, rng.random_range(-0.8..0.8), g3],
    };
    let rate = match spec.kind {
        KernelKind::Iou => rng.random_range(0.3..3.0),
        KernelKind::Fbm => rng.random_range(0.2..0.8),
    };
    let theta = ParamVector::new(
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        gamma,
        rate,
        rng.random_range(0.2..1.5),
        rng.random_range(0.3..2.0),
    );
    (Dataset::new(subjects), theta)
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
