//! Derivative-free Nelder-Mead and an eigenvalue-based trust-region Newton
//! method. Both minimize.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Optional cap on objective evaluations, checked between iterations.
    pub max_evaluations: Option<usize>,
    /// Stop once `f_worst - f_best <= f_tol` and the simplex diameter
    /// (max ∞-norm distance to the best vertex) is `<= x_tol`.
    pub f_tol: f64,
    pub x_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub reason: String,
    /// Best value after each iteration.
    pub trace: Vec<f64>,
}

/// Initial simplex step along coordinate k.
pub fn simplex_step(x: f64) -> f64 {
    0.1 * x.abs().max(1.0)
}

pub fn nelder_mead(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> Outcome {
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for k in 0..n {
        let mut p = x0.to_vec();
        p[k] += simplex_step(x0[k]);
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evaluations)).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let (converged, reason) = loop {
        // Stable sort keeps ties in insertion order, so runs are reproducible.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[n] - vals[0];
        let diameter = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol && diameter <= opts.x_tol {
            break (true, "simplex converged".to_string());
        }
        if iterations >= opts.max_iters {
            break (false, format!("iteration budget of {} exhausted", opts.max_iters));
        }
        if let Some(cap) = opts.max_evaluations.filter(|&cap| evaluations >= cap) {
            break (false, format!("evaluation budget of {cap} exhausted"));
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for p in &pts[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evaluations);
        if fr < vals[0] {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let outside = fr < vals[n];
            let xc = if outside { along(0.5) } else { along(-0.5) };
            let fc = eval(&xc, &mut evaluations);
            if (outside && fc <= fr) || (!outside && fc < vals[n]) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                let best = pts[0].clone();
                for i in 1..=n {
                    for (x, b) in pts[i].iter_mut().zip(&best) {
                        *x = b + 0.5 * (*x - b);
                    }
                    vals[i] = eval(&pts[i], &mut evaluations);
                }
            }
        }
        trace.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
    };
    Outcome {
        x: pts[0].clone(),
        f: vals[0],
        iterations,
        evaluations,
        converged,
        reason,
        trace,
    }
}

/// The Nelder-Mead variant of R's `optim`: one initial step of
/// 0.1·max|x0|, a reflection is kept only when it beats the best vertex
/// (otherwise the worst vertex is contracted), and the search stops when the
/// value spread falls below `reltol·(|f(x0)| + reltol)` or after
/// `max_evaluations` objective calls. Non-finite values count as 1e35.
pub fn nelder_mead_r_compatible(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    reltol: f64,
    max_evaluations: usize,
) -> Outcome {
    const BIG: f64 = 1.0e35;
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            BIG
        }
    };
    let f0 = eval(x0, &mut evaluations);
    let finish = |pts: &[Vec<f64>], vals: &[f64], l: usize, iterations, evaluations, converged, reason: String, trace| Outcome {
        x: pts[l].clone(),
        f: vals[l],
        iterations,
        evaluations,
        converged,
        reason,
        trace,
    };
    if f0 >= BIG {
        return finish(&[x0.to_vec()], &[f0], 0, 0, evaluations, false, "objective not finite at the initial point".into(), Vec::new());
    }
    let convtol = reltol * (f0.abs() + reltol);
    let mut step = x0.iter().map(|v| 0.1 * v.abs()).fold(0.0, f64::max);
    if step == 0.0 {
        step = 0.1;
    }
    let mut pts = vec![x0.to_vec(); n + 1];
    let mut vals = vec![f0; n + 1];
    let mut size = 0.0;
    for j in 1..=n {
        let mut trystep = step;
        while pts[j][j - 1] == x0[j - 1] {
            pts[j][j - 1] = x0[j - 1] + trystep;
            trystep *= 10.0;
        }
        size += trystep;
    }
    let mut oldsize = size;
    let mut calcvert = true;
    let mut l = 0;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let (converged, reason) = loop {
        if calcvert {
            for j in 0..=n {
                if j != l {
                    vals[j] = eval(&pts[j], &mut evaluations);
                }
            }
            calcvert = false;
        }
        let mut vl = vals[l];
        let mut vh = vl;
        let mut h = l;
        for j in 0..=n {
            if j != l {
                if vals[j] < vl {
                    l = j;
                    vl = vals[j];
                }
                if vals[j] > vh {
                    h = j;
                    vh = vals[j];
                }
            }
        }
        if vh <= vl + convtol {
            break (true, "relative tolerance reached".to_string());
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|i| (0..=n).filter(|&j| j != h).map(|j| pts[j][i]).sum::<f64>() / n as f64)
            .collect();
        let xr: Vec<f64> = centroid.iter().zip(&pts[h]).map(|(c, w)| 2.0 * c - w).collect();
        let vr = eval(&xr, &mut evaluations);
        if vr < vl {
            let xe: Vec<f64> = xr.iter().zip(&centroid).map(|(r, c)| 2.0 * r - c).collect();
            let fe = eval(&xe, &mut evaluations);
            if fe < vr {
                pts[h] = xe;
                vals[h] = fe;
            } else {
                pts[h] = xr;
                vals[h] = vr;
            }
        } else {
            if vr < vh {
                pts[h] = xr;
                vals[h] = vr;
            }
            let xc: Vec<f64> = pts[h].iter().zip(&centroid).map(|(w, c)| 0.5 * w + 0.5 * c).collect();
            let fc = eval(&xc, &mut evaluations);
            if fc < vals[h] {
                pts[h] = xc;
                vals[h] = fc;
            } else if vr >= vh {
                calcvert = true;
                size = 0.0;
                let best = pts[l].clone();
                for j in (0..=n).filter(|&j| j != l) {
                    for (x, b) in pts[j].iter_mut().zip(&best) {
                        *x = 0.5 * (*x - b) + b;
                        size += (*x - b).abs();
                    }
                }
                if size < oldsize {
                    oldsize = size;
                } else {
                    break (false, "simplex size did not decrease in a shrink".to_string());
                }
            }
        }
        trace.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
        // Like R, the budget is checked after the pass and the vertex that
        // was best at its start is returned.
        if evaluations > max_evaluations {
            break (false, format!("evaluation budget of {max_evaluations} exhausted"));
        }
    };
    finish(&pts, &vals, l, iterations, evaluations, converged, reason, trace)
}

/// Objective for [`trust_region_newton`]: `None` marks an infeasible point.
pub trait SmoothObjective {
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    /// Gradient and Hessian of the minimized function.
    fn derivatives(&mut self, x: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)>;
    /// Convergence test at an accepted point.
    fn converged(&mut self, x: &[f64], f: f64, gradient: &DVector<f64>) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionOptions {
    pub max_iters: usize,
    pub initial_radius: f64,
    pub max_radius: f64,
    /// Eigenvalues of the Hessian are raised to at least this value.
    pub eigen_floor: f64,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        TrustRegionOptions {
            max_iters: 200,
            initial_radius: 1.0,
            max_radius: 100.0,
            eigen_floor: 1e-8,
        }
    }
}

/// Minimizer of the quadratic model within radius `delta`, using the
/// eigen-decomposition of the (floored) Hessian.
fn trust_region_step(g: &DVector<f64>, hess: &DMatrix<f64>, delta: f64, floor: f64) -> DVector<f64> {
    let eig = SymmetricEigen::new(hess.clone());
    let lam = eig.eigenvalues.map(|l| l.max(floor));
    let coef = eig.eigenvectors.transpose() * g;
    let step_for = |mu: f64| -> DVector<f64> {
        let scaled = DVector::from_fn(coef.len(), |i, _| -coef[i] / (lam[i] + mu));
        &eig.eigenvectors * scaled
    };
    let newton = step_for(0.0);
    if newton.norm() <= delta {
        return newton;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while step_for(hi).norm() > delta {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if step_for(mid).norm() > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    step_for(hi)
}

pub fn trust_region_newton(obj: &mut dyn SmoothObjective, x0: &[f64], opts: &TrustRegionOptions) -> Outcome {
    let mut x = DVector::from_column_slice(x0);
    let mut evaluations = 1;
    let Some(mut f) = obj.value(x.as_slice()) else {
        return Outcome {
            x: x0.to_vec(),
            f: f64::INFINITY,
            iterations: 0,
            evaluations,
            converged: false,
            reason: "infeasible starting point".into(),
            trace: Vec::new(),
        };
    };
    let mut delta = opts.initial_radius;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut derivs = obj.derivatives(x.as_slice());
    let (converged, reason) = loop {
        let Some((g, hess)) = derivs.as_ref() else {
            break (false, "derivatives unavailable".to_string());
        };
        if obj.converged(x.as_slice(), f, g) {
            break (true, "gradient tolerance reached".to_string());
        }
        if iterations >= opts.max_iters {
            break (false, format!("iteration budget of {} exhausted", opts.max_iters));
        }
        if delta < 1e-12 {
            break (false, "trust region collapsed".to_string());
        }
        iterations += 1;
        let s = trust_region_step(g, hess, delta, opts.eigen_floor);
        let predicted = -(g.dot(&s) + 0.5 * s.dot(&(hess * &s)));
        let trial = &x + &s;
        evaluations += 1;
        let ratio = match obj.value(trial.as_slice()) {
            Some(ft) if ft.is_finite() && predicted > 0.0 => (f - ft) / predicted,
            _ => f64::NEG_INFINITY,
        };
        if ratio < 0.25 {
            delta = 0.25 * s.norm().min(delta);
        } else if ratio > 0.75 && s.norm() >= 0.99 * delta {
            delta = (2.0 * delta).min(opts.max_radius);
        }
        if ratio > 1e-4 {
            f -= ratio * predicted;
            x = trial;
            // Re-evaluate exactly rather than trusting the ratio arithmetic.
            if let Some(v) = obj.value(x.as_slice()) {
                f = v;
            }
            evaluations += 1;
            derivs = obj.derivatives(x.as_slice());
        }
        trace.push(f);
    };
    Outcome {
        x: x.as_slice().to_vec(),
        f,
        iterations,
        evaluations,
        converged,
        reason,
        trace,
    }
}
