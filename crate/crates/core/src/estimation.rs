//! Maximum-likelihood fitting, studentized standard errors and
//! log-likelihood surfaces.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::covariance::{DerivOrder, KernelKind, KernelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{block_diag, Likelihood, ParamVector};
use crate::numeric::sym_sqrt;
use crate::optim::{self, NelderMeadOptions, Outcome, SmoothObjective, TrustRegionOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    NelderMead,
    NewtonTrustRegion,
    /// Nelder-Mead followed by a trust-region Newton polish.
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmVariant {
    #[default]
    Standard,
    /// R's `optim` rules: `f_tol` is a relative tolerance on the value
    /// spread and the budget is `max_evaluations` (else `max_iters`)
    /// objective calls. `x_tol` is unused.
    RCompatible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Optimize log α, log τ, log σ² (logit H for the fBm kernel).
    #[default]
    LogScale,
    Raw,
    /// Raw coordinates with σ in place of σ², as in the reference study.
    RawSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub optimizer: Optimizer,
    pub nm_variant: NmVariant,
    /// Starting point; `None` means all ones.
    pub initial: Option<ParamVector>,
    pub transform: Transform,
    pub max_iters: usize,
    /// Cap on Nelder-Mead objective evaluations; `None` for no cap.
    pub max_evaluations: Option<usize>,
    /// Tolerance on the spread of -ℓ/N over the simplex.
    pub f_tol: f64,
    /// Tolerance on the simplex diameter in optimizer coordinates.
    pub x_tol: f64,
    /// Log-likelihood assigned to infeasible points.
    pub penalty_value: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optimizer: Optimizer::NelderMead,
            nm_variant: NmVariant::Standard,
            initial: None,
            transform: Transform::LogScale,
            max_iters: 20_000,
            max_evaluations: None,
            f_tol: 1e-10,
            x_tol: 1e-6,
            penalty_value: -1e12,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_tol > 0.0 && self.x_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be > 0".into()));
        }
        if self.max_iters == 0 || self.max_evaluations == Some(0) {
            return Err(Error::InvalidArgument("max_iters and max_evaluations must be >= 1".into()));
        }
        if !self.penalty_value.is_finite() {
            return Err(Error::InvalidArgument("penalty_value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: ParamVector,
    pub loglik: f64,
    pub converged: bool,
    pub reason: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub a_hat: DMatrix<f64>,
    pub u_hat: DMatrix<f64>,
    /// Studentized standard errors; NaN where unavailable.
    pub se: Vec<f64>,
    pub n_subjects: usize,
    pub trace: Vec<f64>,
    pub wall_time_ms: f64,
}

impl FitResult {
    /// σ = √σ² and its delta-method standard error.
    pub fn sigma(&self) -> (f64, f64) {
        let s = self.theta_hat.cov.sigma2.sqrt();
        let se = *self.se.last().expect("non-empty se");
        (s, se / (2.0 * s))
    }

    /// The JSON document written by the `fit` subcommand.
    pub fn to_json(&self, spec: &KernelSpec) -> Value {
        let names = self.theta_hat.names(spec);
        let named = |values: &[f64]| -> Map<String, Value> {
            names
                .iter()
                .zip(values)
                .map(|(n, v)| (n.clone(), json!(v)))
                .collect()
        };
        let (sigma, sigma_se) = self.sigma();
        let mut theta = named(&self.theta_hat.to_vec());
        theta.insert("sigma".into(), json!(sigma));
        let mut se = named(&self.se);
        se.insert("sigma".into(), json!(sigma_se));
        let matrix = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
        };
        json!({
            "theta_hat": theta,
            "se": se,
            "loglik": self.loglik,
            "converged": self.converged,
            "reason": self.reason,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "a_hat": matrix(&self.a_hat),
            "u_hat": matrix(&self.u_hat),
            "wall_time_ms": self.wall_time_ms,
        })
    }
}

/// Map between model parameters and unconstrained optimizer coordinates.
#[derive(Debug, Clone, Copy)]
struct Coordinates {
    transform: Transform,
    kind: KernelKind,
    p_beta: usize,
    p_gamma: usize,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Coordinates {
    fn first_positive(&self) -> usize {
        self.p_beta + self.p_gamma
    }

    fn to_optimizer(&self, theta: &ParamVector) -> Vec<f64> {
        let mut x = theta.to_vec();
        if self.transform == Transform::LogScale {
            let k = self.first_positive();
            x[k] = match self.kind {
                KernelKind::Iou => x[k].ln(),
                KernelKind::Fbm => (x[k] / (1.0 - x[k])).ln(),
            };
            x[k + 1] = x[k + 1].ln();
            x[k + 2] = x[k + 2].ln();
        }
        if self.transform == Transform::RawSigma {
            let last = x.len() - 1;
            x[last] = x[last].sqrt();
        }
        x
    }

    fn to_model(&self, x: &[f64]) -> ParamVector {
        let mut v = x.to_vec();
        if self.transform == Transform::LogScale {
            let k = self.first_positive();
            v[k] = match self.kind {
                KernelKind::Iou => v[k].exp(),
                KernelKind::Fbm => logistic(v[k]),
            };
            v[k + 1] = v[k + 1].exp();
            v[k + 2] = v[k + 2].exp();
        }
        if self.transform == Transform::RawSigma {
            let last = v.len() - 1;
            v[last] *= v[last];
        }
        ParamVector::from_slice(&v, self.p_beta, self.p_gamma).expect("coordinate length")
    }

    /// dθ/dx and d²θ/dx² per coordinate.
    fn jacobian(&self, theta: &ParamVector) -> (Vec<f64>, Vec<f64>) {
        let p = theta.len();
        let mut d1 = vec![1.0; p];
        let mut d2 = vec![0.0; p];
        if self.transform == Transform::LogScale {
            let k = self.first_positive();
            let t = theta.to_vec();
            for j in k..p {
                d1[j] = t[j];
                d2[j] = t[j];
            }
            if self.kind == KernelKind::Fbm {
                let h = t[k];
                d1[k] = h * (1.0 - h);
                d2[k] = h * (1.0 - h) * (1.0 - 2.0 * h);
            }
        }
        if self.transform == Transform::RawSigma {
            d1[p - 1] = 2.0 * theta.cov.sigma2.sqrt();
            d2[p - 1] = 2.0;
        }
        (d1, d2)
    }
}

struct NewtonObjective<'l, 'a> {
    lik: &'l Likelihood<'a>,
    coords: Coordinates,
    n: f64,
}

impl SmoothObjective for NewtonObjective<'_, '_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        let theta = self.coords.to_model(x);
        let ll = self.lik.workspace(&theta, DerivOrder::Value).ok()?.log_likelihood();
        ll.is_finite().then_some(-ll / self.n)
    }

    fn derivatives(&mut self, x: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let theta = self.coords.to_model(x);
        let ws = self.lik.workspace(&theta, DerivOrder::Second).ok()?;
        let grad_theta = -ws.score() / self.n;
        let hess_theta = ws.observed_information();
        let (d1, d2) = self.coords.jacobian(&theta);
        let p = d1.len();
        let g = DVector::from_fn(p, |i, _| grad_theta[i] * d1[i]);
        let mut h = DMatrix::from_fn(p, p, |i, j| hess_theta[(i, j)] * d1[i] * d1[j]);
        for i in 0..p {
            h[(i, i)] += grad_theta[i] * d2[i];
        }
        let finite = g.iter().chain(h.iter()).all(|v| v.is_finite());
        finite.then_some((g, h))
    }

    fn converged(&mut self, x: &[f64], f: f64, gradient: &DVector<f64>) -> bool {
        // Undo the chain rule: the test is on ∂ℓ/∂θ in the original scale.
        let theta = self.coords.to_model(x);
        let (d1, _) = self.coords.jacobian(&theta);
        let norm = gradient
            .iter()
            .zip(&d1)
            .map(|(g, d)| (g / d * self.n).powi(2))
            .sum::<f64>()
            .sqrt();
        let loglik = -f * self.n;
        norm <= newton_tolerance(loglik, self.n)
    }
}

/// Gradient-norm threshold on the unnormalized score.
pub fn newton_tolerance(loglik: f64, n_subjects: f64) -> f64 {
    1e-4 * (1.0 + loglik.abs()) / n_subjects.sqrt()
}

fn under_identified(dataset: &Dataset, p: usize) -> bool {
    dataset.total_observations() < p
}

/// Maximizes the log-likelihood from `config.initial` (all ones by default).
pub fn fit(dataset: &Dataset, spec: &KernelSpec, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let started = Instant::now();
    let p_gamma = spec.p_gamma_for(dataset.p_b);
    let initial = config
        .initial
        .clone()
        .unwrap_or_else(|| ParamVector::ones(dataset.p_beta, p_gamma));
    initial.check(dataset, spec).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("infeasible initial point: {m}")),
        other => other,
    })?;
    let lik = Likelihood::new(dataset, *spec);
    let n = dataset.n_subjects() as f64;
    let coords = Coordinates {
        transform: config.transform,
        kind: spec.kind,
        p_beta: dataset.p_beta,
        p_gamma,
    };
    let x0 = coords.to_optimizer(&initial);
    let initial_ll = lik.workspace(&initial, DerivOrder::Value)?.log_likelihood();

    if under_identified(dataset, initial.len()) {
        return Ok(FitResult {
            se: vec![f64::NAN; initial.len()],
            a_hat: DMatrix::zeros(dataset.p_beta, dataset.p_beta),
            u_hat: DMatrix::zeros(p_gamma + 3, p_gamma + 3),
            theta_hat: initial,
            loglik: initial_ll,
            converged: false,
            reason: "under-identified".into(),
            iterations: 0,
            evaluations: 1,
            n_subjects: dataset.n_subjects(),
            trace: Vec::new(),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let penalty = -config.penalty_value / n;
    let mut nm_objective = |x: &[f64]| -> f64 {
        let theta = coords.to_model(x);
        match lik.workspace(&theta, DerivOrder::Value) {
            Ok(ws) => {
                let ll = ws.log_likelihood();
                if ll.is_finite() {
                    -ll / n
                } else {
                    penalty
                }
            }
            Err(_) => penalty,
        }
    };
    let nm_opts = NelderMeadOptions {
        max_iters: config.max_iters,
        max_evaluations: config.max_evaluations,
        f_tol: config.f_tol,
        x_tol: config.x_tol,
    };
    let tr_opts = TrustRegionOptions {
        max_iters: config.max_iters.min(500),
        ..TrustRegionOptions::default()
    };
    let mut nelder_mead = |x: &[f64]| match config.nm_variant {
        NmVariant::Standard => optim::nelder_mead(&mut nm_objective, x, &nm_opts),
        NmVariant::RCompatible => optim::nelder_mead_r_compatible(
            &mut nm_objective,
            x,
            config.f_tol,
            config.max_evaluations.unwrap_or(config.max_iters),
        ),
    };
    let newton = |start: &[f64]| {
        let mut obj = NewtonObjective { lik: &lik, coords, n };
        optim::trust_region_newton(&mut obj, start, &tr_opts)
    };
    let outcome: Outcome = match config.optimizer {
        Optimizer::NelderMead => nelder_mead(&x0),
        Optimizer::NewtonTrustRegion => newton(&x0),
        Optimizer::Hybrid => {
            let nm = nelder_mead(&x0);
            let polished = newton(&nm.x);
            let mut trace = nm.trace.clone();
            trace.extend(&polished.trace);
            let (x, f, converged, reason) = if polished.f <= nm.f {
                (polished.x, polished.f, polished.converged, polished.reason)
            } else {
                (nm.x, nm.f, nm.converged, format!("{} (polish rejected: {})", nm.reason, polished.reason))
            };
            Outcome {
                x,
                f,
                iterations: nm.iterations + polished.iterations,
                evaluations: nm.evaluations + polished.evaluations,
                converged,
                reason,
                trace,
            }
        }
    };

    let theta_hat = coords.to_model(&outcome.x);
    let ws = lik.workspace(&theta_hat, DerivOrder::First)?;
    let loglik = ws.log_likelihood();
    let (a_hat, u_hat) = ws.information_blocks();
    let se = se_from_blocks(&a_hat, &u_hat, dataset.n_subjects())
        .unwrap_or_else(|_| vec![f64::NAN; theta_hat.len()]);
    let mut converged = outcome.converged;
    let mut reason = outcome.reason;
    if converged && se.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        converged = false;
        reason = "information matrix singular at the optimum".into();
    }
    Ok(FitResult {
        theta_hat,
        loglik,
        converged,
        reason,
        iterations: outcome.iterations,
        evaluations: outcome.evaluations,
        a_hat,
        u_hat,
        se,
        n_subjects: dataset.n_subjects(),
        trace: outcome.trace,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn inverse_spd(m: &DMatrix<f64>, block: &'static str) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(m.clone()).ok_or(Error::SingularInformation { block })?;
    let inv = chol.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::SingularInformation { block })
    }
}

/// √diag((1/N) diag(Â, Û)⁻¹).
pub fn se_from_blocks(a_hat: &DMatrix<f64>, u_hat: &DMatrix<f64>, n_subjects: usize) -> Result<Vec<f64>> {
    let a_inv = inverse_spd(a_hat, "A")?;
    let u_inv = inverse_spd(u_hat, "U")?;
    let n = n_subjects as f64;
    Ok(a_inv
        .diagonal()
        .iter()
        .chain(u_inv.diagonal().iter())
        .map(|v| (v / n).sqrt())
        .collect())
}

/// Standard errors from Â_N and Û_N re-evaluated at `fit.theta_hat`.
pub fn studentized_se(dataset: &Dataset, fit: &FitResult, spec: &KernelSpec) -> Result<Vec<f64>> {
    let lik = Likelihood::new(dataset, *spec);
    let (a, u) = lik.workspace(&fit.theta_hat, DerivOrder::First)?.information_blocks();
    se_from_blocks(&a, &u, dataset.n_subjects())
}

/// diag(Â, Û)^{1/2} √N (θ̂ - θ0), asymptotically standard normal.
pub fn studentize(
    theta_hat: &ParamVector,
    theta0: &ParamVector,
    a_hat: &DMatrix<f64>,
    u_hat: &DMatrix<f64>,
    n_subjects: usize,
) -> Result<DVector<f64>> {
    let info = block_diag(a_hat, u_hat);
    if inverse_spd(a_hat, "A").is_err() {
        return Err(Error::SingularInformation { block: "A" });
    }
    if inverse_spd(u_hat, "U").is_err() {
        return Err(Error::SingularInformation { block: "U" });
    }
    let root = sym_sqrt(&info).ok_or(Error::SingularInformation { block: "A,U" })?;
    let diff = DVector::from_vec(theta_hat.to_vec()) - DVector::from_vec(theta0.to_vec());
    Ok(root * diff * (n_subjects as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Surface {
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
    /// `values[i][j]` at `(alpha[i], tau[j])`; `None` where Q is not PD.
    pub values: Vec<Vec<Option<f64>>>,
}

impl Surface {
    pub fn feasible_cells(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_some()).count()
    }

    pub fn max(&self) -> Option<f64> {
        self.values.iter().flatten().flatten().copied().reduce(f64::max)
    }
}

fn check_grid(grid: &[f64], name: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "{name} grid must be finite and strictly increasing"
        )));
    }
    Ok(())
}

/// ℓ_N over an (α, τ) grid with every other coordinate taken from `fixed`.
pub fn profile_surface(
    dataset: &Dataset,
    spec: &KernelSpec,
    fixed: &ParamVector,
    grid_alpha: &[f64],
    grid_tau: &[f64],
) -> Result<Surface> {
    check_grid(grid_alpha, spec.rate_name())?;
    check_grid(grid_tau, "tau")?;
    let lik = Likelihood::new(dataset, *spec);
    let cells: Vec<(usize, usize)> = (0..grid_alpha.len())
        .flat_map(|i| (0..grid_tau.len()).map(move |j| (i, j)))
        .collect();
    let flat: Vec<Option<f64>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut theta = fixed.clone();
            theta.cov.rate = grid_alpha[i];
            theta.cov.tau = grid_tau[j];
            lik.workspace(&theta, DerivOrder::Value)
                .ok()
                .map(|ws| ws.log_likelihood())
                .filter(|v| v.is_finite())
        })
        .collect();
    let values = flat.chunks(grid_tau.len()).map(|c| c.to_vec()).collect();
    Ok(Surface {
        alpha: grid_alpha.to_vec(),
        tau: grid_tau.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::GParam;
    use crate::data::Subject;

    fn tiny() -> Dataset {
        Dataset::new(vec![Subject {
            id: "1".into(),
            times: vec![1.0],
            y: DVector::from_element(1, 0.3),
            x: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            z: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        }])
    }

    #[test]
    fn single_observation_is_under_identified() {
        let spec = KernelSpec::default();
        let fit = fit(&tiny(), &spec, &FitConfig::default()).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.reason, "under-identified");
    }

    #[test]
    fn infeasible_start_is_an_error() {
        let spec = KernelSpec::default();
        let config = FitConfig {
            transform: Transform::Raw,
            initial: Some(ParamVector::new(vec![0.0, 0.0], vec![1.0; 3], -1.0, 1.0, 1.0)),
            ..FitConfig::default()
        };
        let err = fit(&tiny(), &spec, &config).unwrap_err();
        assert!(err.to_string().contains("infeasible initial point"), "{err}");
    }

    #[test]
    fn coordinates_round_trip() {
        for (kind, transform) in [
            (KernelKind::Iou, Transform::LogScale),
            (KernelKind::Fbm, Transform::LogScale),
            (KernelKind::Iou, Transform::RawSigma),
        ] {
            let coords = Coordinates {
                transform,
                kind,
                p_beta: 2,
                p_gamma: 3,
            };
            let theta = ParamVector::new(vec![-0.25, 0.5], vec![1.25, 1.0, 1.5], 0.3, 0.4, 1.5625);
            let back = coords.to_model(&coords.to_optimizer(&theta));
            for (a, b) in back.to_vec().iter().zip(theta.to_vec()) {
                assert!((a - b).abs() < 1e-14);
            }
            // Jacobian matches a central difference of to_model.
            let x = coords.to_optimizer(&theta);
            let (d1, d2) = coords.jacobian(&theta);
            for k in 0..x.len() {
                let h = 1e-5;
                let at = |dx: f64| {
                    let mut y = x.clone();
                    y[k] += dx;
                    coords.to_model(&y).to_vec()[k]
                };
                assert!((d1[k] - (at(h) - at(-h)) / (2.0 * h)).abs() < 1e-8);
                assert!((d2[k] - (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn se_reports_singular_block() {
        let a = DMatrix::identity(2, 2);
        let u = DMatrix::zeros(3, 3);
        match se_from_blocks(&a, &u, 10) {
            Err(Error::SingularInformation { block }) => assert_eq!(block, "U"),
            other => panic!("{other:?}"),
        }
        let se = se_from_blocks(&(a * 4.0), &DMatrix::identity(3, 3), 4).unwrap();
        assert!((se[0] - 0.25).abs() < 1e-15 && (se[4] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn surface_rejects_bad_grids() {
        let spec = KernelSpec::new(KernelKind::Iou, GParam::PaperBivariate);
        let theta = ParamVector::ones(2, 3);
        assert!(profile_surface(&tiny(), &spec, &theta, &[], &[1.0]).is_err());
        assert!(profile_surface(&tiny(), &spec, &theta, &[1.0, 1.0], &[1.0]).is_err());
        let s = profile_surface(&tiny(), &spec, &theta, &[1.3], &[0.4]).unwrap();
        assert_eq!(s.values.len(), 1);
        assert_eq!(s.feasible_cells(), 1);
    }
}
