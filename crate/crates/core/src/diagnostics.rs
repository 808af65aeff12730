//! Monte Carlo checks of the large-sample behaviour of the likelihood: the
//! quadratic (LAN) expansion, the score CLT, stabilization of the estimated
//! information, normality of studentized estimators and the size of third
//! derivatives.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{DerivOrder, KernelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimation::studentize;
use crate::likelihood::{block_diag, Likelihood, ParamVector};
use crate::numeric::{correlation, mean, min_eigenvalue, sample_sd};
use crate::rng::{stream, Purpose};
use crate::simulation::{generate_design, DesignConfig, DrawMode, ResponseSampler};

/// Fixed-length direction set: every coordinate axis, then `n_random`
/// seeded random unit vectors, optionally preceded by u = 0.
pub fn lan_directions(p: usize, n_random: usize, seed: u64, include_zero: bool) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(p + n_random + 1);
    if include_zero {
        out.push(DVector::zeros(p));
    }
    for k in 0..p {
        let mut e = DVector::zeros(p);
        e[k] = 1.0;
        out.push(e);
    }
    for r in 0..n_random {
        let mut rng = stream(seed, Purpose::Directions, 0, r as u64);
        let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(v.normalize());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanConfig {
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub noise_seed: u64,
    pub direction_seed: u64,
    pub n_random_directions: usize,
    pub include_zero: bool,
    pub information: ReferenceInformation,
}

/// Where Î = diag(Â_N, Û_N) in the LAN residual is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceInformation {
    /// On the design the data were simulated from.
    #[default]
    SameDesign,
    /// Once, on the largest design in `n_values`.
    LargestDesign,
}

impl Default for LanConfig {
    fn default() -> Self {
        LanConfig {
            n_values: vec![100, 400, 1600],
            replications: 200,
            noise_seed: 1,
            direction_seed: 1,
            n_random_directions: 3,
            include_zero: true,
            information: ReferenceInformation::SameDesign,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanCell {
    pub n: usize,
    pub direction: usize,
    pub skipped: bool,
    /// Residuals with Î = diag(Â, Û) from the largest design.
    pub residuals: Vec<f64>,
    /// Residuals with the dataset's own observed information I_N(θ0).
    pub residuals_observed: Vec<f64>,
    pub mean_abs: f64,
    pub mcse_abs: f64,
    pub mean_abs_observed: f64,
    /// Mean |R - R_obs|.
    pub mean_abs_difference: f64,
    pub quantiles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanCheckReport {
    pub n_values: Vec<usize>,
    pub directions: Vec<Vec<f64>>,
    pub cells: Vec<LanCell>,
}

impl LanCheckReport {
    pub fn cell(&self, n: usize, direction: usize) -> Option<&LanCell> {
        self.cells.iter().find(|c| c.n == n && c.direction == direction)
    }

    /// Mean |R| and its MCSE across `n_values` for one direction.
    pub fn trend(&self, direction: usize) -> (Vec<f64>, Vec<f64>) {
        self.n_values
            .iter()
            .map(|&n| {
                let c = self.cell(n, direction).expect("cell per (n, direction)");
                (c.mean_abs, c.mcse_abs)
            })
            .unzip()
    }
}

/// Changes in mean |R_N| smaller than this are rounding, not trend.
pub const LAN_ROUNDING_FLOOR: f64 = 1e-8;

/// True when `means` decreases, allowing one increase no larger than two
/// combined Monte Carlo standard errors. Steps within
/// [`LAN_ROUNDING_FLOOR`] count as ties.
pub fn decreasing_with_tolerance(means: &[f64], mcse: &[f64]) -> bool {
    let mut inversions = 0;
    for k in 1..means.len() {
        if means[k] > means[k - 1] + LAN_ROUNDING_FLOOR {
            let band = 2.0 * (mcse[k].powi(2) + mcse[k - 1].powi(2)).sqrt();
            if means[k] - means[k - 1] > band {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mcse_of_mean(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    sample_sd(values) / (values.len() as f64).sqrt()
}

/// R_N(u) = [ℓ(θ0 + u/√N) - ℓ(θ0)] - [Δ_N(θ0)ᵀu - ½ uᵀ Î u] over simulated
/// datasets for each N and direction.
pub fn lan_expansion_check(
    true_theta: &ParamVector,
    spec: &KernelSpec,
    design: &DesignConfig,
    config: &LanConfig,
    directions: &[DVector<f64>],
) -> Result<LanCheckReport> {
    if config.n_values.is_empty() || config.replications == 0 {
        return Err(Error::InvalidArgument("LAN check needs sample sizes and replications".into()));
    }
    let p = true_theta.len();
    if directions.iter().any(|u| u.len() != p) {
        return Err(Error::Dimension(format!("directions must have length {p}")));
    }
    let n_max = *config.n_values.iter().max().expect("non-empty");
    let largest = generate_design(&DesignConfig {
        n_subjects: n_max,
        ..design.clone()
    })?;
    let info_largest = Likelihood::new(&largest, *spec)
        .workspace(true_theta, DerivOrder::First)?
        .expected_information();
    let theta0 = DVector::from_vec(true_theta.to_vec());

    let mut cells = Vec::new();
    for &n in &config.n_values {
        let skeleton = generate_design(&DesignConfig {
            n_subjects: n,
            ..design.clone()
        })?;
        let sampler = ResponseSampler::new(&skeleton, true_theta, spec, DrawMode::Joint)?;
        let info_ref = match config.information {
            ReferenceInformation::LargestDesign => info_largest.clone(),
            ReferenceInformation::SameDesign => Likelihood::new(&skeleton, *spec)
                .workspace(true_theta, DerivOrder::First)?
                .expected_information(),
        };
        let root_n = (n as f64).sqrt();
        let perturbed: Vec<Option<ParamVector>> = directions
            .iter()
            .map(|u| {
                let t = true_theta.with_values((&theta0 + u / root_n).as_slice()).ok()?;
                t.check(&skeleton, spec).ok().map(|_| t)
            })
            .collect();
        // Per replication: (R, R_obs) for each direction, None where skipped.
        let per_rep: Vec<Vec<Option<(f64, f64)>>> = (0..config.replications)
            .into_par_iter()
            .map(|m| -> Result<Vec<Option<(f64, f64)>>> {
                let data = sampler.sample(config.noise_seed, m as u64);
                let lik = Likelihood::new(&data, *spec);
                let ws = lik.workspace(true_theta, DerivOrder::Second)?;
                let l0 = ws.log_likelihood();
                let delta = ws.normalized_score();
                let info_obs = ws.observed_information();
                Ok(directions
                    .iter()
                    .zip(&perturbed)
                    .map(|(u, t)| {
                        let t = t.as_ref()?;
                        let lu = if u.iter().all(|v| *v == 0.0) {
                            l0
                        } else {
                            lik.workspace(t, DerivOrder::Value).ok()?.log_likelihood()
                        };
                        let linear = delta.dot(u);
                        let r = (lu - l0) - (linear - 0.5 * u.dot(&(&info_ref * u)));
                        let r_obs = (lu - l0) - (linear - 0.5 * u.dot(&(&info_obs * u)));
                        Some((r, r_obs))
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (d, t) in perturbed.iter().enumerate() {
            let pairs: Vec<(f64, f64)> = per_rep.iter().filter_map(|row| row[d]).collect();
            let skipped = t.is_none() || pairs.is_empty();
            let residuals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let residuals_observed: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
            let abs_obs: Vec<f64> = residuals_observed.iter().map(|r| r.abs()).collect();
            let diff: Vec<f64> = pairs.iter().map(|p| (p.0 - p.1).abs()).collect();
            let mut sorted = abs.clone();
            sorted.sort_by(f64::total_cmp);
            cells.push(LanCell {
                n,
                direction: d,
                skipped,
                mean_abs: mean(&abs),
                mcse_abs: mcse_of_mean(&abs),
                mean_abs_observed: mean(&abs_obs),
                mean_abs_difference: mean(&diff),
                quantiles: [quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75)],
                residuals,
                residuals_observed,
            });
        }
    }
    Ok(LanCheckReport {
        n_values: config.n_values.clone(),
        directions: directions.iter().map(|u| u.as_slice().to_vec()).collect(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltReport {
    pub n: usize,
    pub replications: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Empirical covariance of Δ_N(θ0) (divisor M - 1).
    pub covariance: Vec<Vec<f64>>,
    /// Monte Carlo standard error of each covariance entry.
    pub covariance_se: Vec<Vec<f64>>,
    /// diag(Â_N, Û_N) at θ0 on the simulated design.
    pub target: Vec<Vec<f64>>,
    pub max_abs_deviation: f64,
    pub max_abs_deviation_se: f64,
    /// max |empirical - target| / se over all entries.
    pub max_z: f64,
    /// Same over the β-v cross block, whose target is 0.
    pub max_cross_z: f64,
    pub max_mean_z: f64,
    pub diagonal_ratio: Vec<f64>,
}

/// Empirical covariance of the normalized score at the truth against
/// diag(Â_N, Û_N).
pub fn score_clt_check(
    true_theta: &ParamVector,
    spec: &KernelSpec,
    design: &DesignConfig,
    replications: usize,
    noise_seed: u64,
) -> Result<CltReport> {
    if replications < 2 {
        return Err(Error::InvalidArgument("score CLT check needs at least 2 replications".into()));
    }
    let skeleton = generate_design(design)?;
    let sampler = ResponseSampler::new(&skeleton, true_theta, spec, DrawMode::Joint)?;
    let target = Likelihood::new(&skeleton, *spec)
        .workspace(true_theta, DerivOrder::First)?
        .expected_information();
    let scores: Vec<DVector<f64>> = (0..replications)
        .into_par_iter()
        .map(|m| {
            let data = sampler.sample(noise_seed, m as u64);
            let lik = Likelihood::new(&data, *spec);
            Ok(lik.workspace(true_theta, DerivOrder::First)?.normalized_score())
        })
        .collect::<Result<_>>()?;
    let p = true_theta.len();
    let p_beta = true_theta.p_beta();
    let m = replications as f64;
    let col = |k: usize| scores.iter().map(|s| s[k]).collect::<Vec<_>>();
    let means: Vec<f64> = (0..p).map(|k| mean(&col(k))).collect();
    let mean_se: Vec<f64> = (0..p).map(|k| mcse_of_mean(&col(k))).collect();
    let mut cov = vec![vec![0.0; p]; p];
    let mut cov_se = vec![vec![0.0; p]; p];
    let (mut max_dev, mut max_dev_se, mut max_z, mut max_cross_z) = (0.0f64, 0.0, 0.0f64, 0.0f64);
    for j in 0..p {
        for k in 0..p {
            let prods: Vec<f64> = scores
                .iter()
                .map(|s| (s[j] - means[j]) * (s[k] - means[k]))
                .collect();
            let c = mean(&prods) * m / (m - 1.0);
            let se = mcse_of_mean(&prods);
            cov[j][k] = c;
            cov_se[j][k] = se;
            let dev = (c - target[(j, k)]).abs();
            if dev > max_dev {
                max_dev = dev;
                max_dev_se = se;
            }
            let z = dev / se;
            max_z = max_z.max(z);
            if (j < p_beta) != (k < p_beta) {
                max_cross_z = max_cross_z.max(c.abs() / se);
            }
        }
    }
    let max_mean_z = means
        .iter()
        .zip(&mean_se)
        .map(|(mu, se)| mu.abs() / se)
        .fold(0.0, f64::max);
    Ok(CltReport {
        n: design.n_subjects,
        replications,
        diagonal_ratio: (0..p).map(|k| cov[k][k] / target[(k, k)]).collect(),
        mean: means,
        mean_se,
        covariance: cov,
        covariance_se: cov_se,
        target: (0..p).map(|j| (0..p).map(|k| target[(j, k)]).collect()).collect(),
        max_abs_deviation: max_dev,
        max_abs_deviation_se: max_dev_se,
        max_z,
        max_cross_z,
        max_mean_z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InformationRow {
    pub n: usize,
    /// Max entry change from the previous N; NaN for the first row.
    pub a_change: f64,
    pub u_change: f64,
    pub a_min_eigenvalue: f64,
    pub u_min_eigenvalue: f64,
    pub u_asymmetry: f64,
}

/// Â_N and Û_N on nested designs (the first N subjects of one design seed).
pub fn information_limit_check(
    spec: &KernelSpec,
    design: &DesignConfig,
    theta: &ParamVector,
    n_values: &[usize],
) -> Result<Vec<InformationRow>> {
    let mut rows: Vec<InformationRow> = Vec::with_capacity(n_values.len());
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    for &n in n_values {
        let skeleton = generate_design(&DesignConfig {
            n_subjects: n,
            ..design.clone()
        })?;
        let (a, u) = Likelihood::new(&skeleton, *spec)
            .workspace(theta, DerivOrder::First)?
            .information_blocks();
        let (a_change, u_change) = match &prev {
            Some((pa, pu)) => ((&a - pa).abs().max(), (&u - pu).abs().max()),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(InformationRow {
            n,
            a_change,
            u_change,
            a_min_eigenvalue: min_eigenvalue(&a),
            u_min_eigenvalue: min_eigenvalue(&u),
            u_asymmetry: (&u - u.transpose()).abs().max(),
        });
        prev = Some((a, u));
    }
    Ok(rows)
}

/// One replication's inputs to the studentize transform.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentizedInput {
    pub theta_hat: ParamVector,
    pub a_hat: DMatrix<f64>,
    pub u_hat: DMatrix<f64>,
}

/// Parameters whose normality is reported but not required.
pub const NORMALITY_EXEMPT: &[&str] = &["sigma2"];

pub const HISTOGRAM_BINS: usize = 30;
pub const HISTOGRAM_RANGE: (f64, f64) = (-4.0, 4.0);
pub const LOW_POWER_REPLICATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentNormality {
    pub parameter: String,
    pub exempt: bool,
    pub values: Vec<f64>,
    pub qq_correlation: f64,
    pub mean: f64,
    pub sd: f64,
    /// `HISTOGRAM_BINS` counts on `HISTOGRAM_RANGE`.
    pub counts: Vec<usize>,
    pub expected: Vec<f64>,
    pub below_range: usize,
    pub above_range: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityReport {
    pub replications: usize,
    pub low_power: bool,
    pub bin_edges: Vec<f64>,
    pub components: Vec<ComponentNormality>,
}

impl NormalityReport {
    pub fn component(&self, parameter: &str) -> Option<&ComponentNormality> {
        self.components.iter().find(|c| c.parameter == parameter)
    }

    /// Rows `parameter,value` for plotting.
    pub fn write_values<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::InvalidArgument(format!("writing normality values: {e}"));
        w.write_record(["parameter", "value"]).map_err(err)?;
        for c in &self.components {
            for v in &c.values {
                w.write_record([c.parameter.clone(), v.to_string()]).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io("normality.csv", e))
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Correlation between sorted values and Blom normal scores.
pub fn qq_correlation(values: &[f64]) -> f64 {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let z = standard_normal();
    let scores: Vec<f64> = (1..=n)
        .map(|i| z.inverse_cdf((i as f64 - 0.375) / (n as f64 + 0.25)))
        .collect();
    correlation(&sorted, &scores)
}

/// Normality summary of already-studentized columns.
pub fn normality_of_columns(names: &[String], columns: &[Vec<f64>]) -> Result<NormalityReport> {
    let (lo, hi) = HISTOGRAM_RANGE;
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|k| lo + k as f64 * width).collect();
    let z = standard_normal();
    let replications = columns.first().map_or(0, |c| c.len());
    let mut components = Vec::with_capacity(names.len());
    for (name, values) in names.iter().zip(columns) {
        let sd = sample_sd(values);
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance { parameter: name.clone() });
        }
        let mut counts = vec![0; HISTOGRAM_BINS];
        let (mut below, mut above) = (0, 0);
        for &v in values {
            if v < lo {
                below += 1;
            } else if v >= hi {
                above += 1;
            } else {
                counts[(((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
            }
        }
        let expected = edges
            .windows(2)
            .map(|e| values.len() as f64 * (z.cdf(e[1]) - z.cdf(e[0])))
            .collect();
        components.push(ComponentNormality {
            parameter: name.clone(),
            exempt: NORMALITY_EXEMPT.contains(&name.as_str()),
            qq_correlation: qq_correlation(values),
            mean: mean(values),
            sd,
            values: values.clone(),
            counts,
            expected,
            below_range: below,
            above_range: above,
        });
    }
    Ok(NormalityReport {
        replications,
        low_power: replications < LOW_POWER_REPLICATIONS,
        bin_edges: edges,
        components,
    })
}

/// Studentizes each replication with its own Â_N, Û_N and summarizes each
/// component against the standard normal.
pub fn studentized_normality(
    inputs: &[StudentizedInput],
    true_theta: &ParamVector,
    n_subjects: usize,
    names: &[String],
) -> Result<NormalityReport> {
    let rows: Vec<DVector<f64>> = inputs
        .iter()
        .map(|inp| studentize(&inp.theta_hat, true_theta, &inp.a_hat, &inp.u_hat, n_subjects))
        .collect::<Result<_>>()?;
    let columns: Vec<Vec<f64>> = (0..true_theta.len())
        .map(|k| rows.iter().map(|r| r[k]).collect())
        .collect();
    normality_of_columns(names, &columns)
}

/// Re-evaluates Â_N and Û_N at each estimate on the design they were fitted
/// on; both blocks are free of the responses.
pub fn studentized_inputs(design: &Dataset, spec: &KernelSpec, estimates: &[ParamVector]) -> Result<Vec<StudentizedInput>> {
    let lik = Likelihood::new(design, *spec);
    estimates
        .par_iter()
        .map(|t| {
            let (a_hat, u_hat) = lik.workspace(t, DerivOrder::First)?.information_blocks();
            Ok(StudentizedInput {
                theta_hat: t.clone(),
                a_hat,
                u_hat,
            })
        })
        .collect()
}

/// Central differences of I_N(θ) along each coordinate: `out[k] ≈ ∂_k I_N`.
pub fn information_derivative(
    dataset: &Dataset,
    theta: &ParamVector,
    spec: &KernelSpec,
    rel_step: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let lik = Likelihood::new(dataset, *spec);
    let base = theta.to_vec();
    (0..base.len())
        .map(|k| {
            let h = rel_step * base[k].abs().max(1.0);
            let at = |x: f64| -> Result<DMatrix<f64>> {
                let mut v = base.clone();
                v[k] = x;
                let t = theta.with_values(&v)?;
                Ok(lik.workspace(&t, DerivOrder::Second)?.observed_information())
            };
            Ok((at(base[k] + h)? - at(base[k] - h)?) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThirdDerivativeReport {
    pub n: usize,
    pub radius: f64,
    pub evaluated: usize,
    pub skipped: usize,
    /// max over sampled θ' of N^{-1/2} ‖∂_θ I_N(θ')‖.
    pub max_scaled_norm: f64,
}

pub const THIRD_DERIVATIVE_POINTS: usize = 10;

/// Samples points uniformly from the ball of radius `radius/√N` around
/// `theta` and reports the largest scaled norm of the derivative of I_N.
pub fn third_derivative_bound_check(
    dataset: &Dataset,
    theta: &ParamVector,
    spec: &KernelSpec,
    radius: f64,
    seed: u64,
) -> Result<ThirdDerivativeReport> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument("radius must be finite and >= 0".into()));
    }
    let n = dataset.n_subjects();
    let p = theta.len();
    let center = DVector::from_vec(theta.to_vec());
    let count = if radius == 0.0 { 1 } else { THIRD_DERIVATIVE_POINTS };
    let scale = radius / (n as f64).sqrt();
    let norms: Vec<Option<f64>> = (0..count)
        .map(|k| {
            let mut rng = stream(seed, Purpose::BallSample, 0, k as u64);
            let dir = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let r = scale * rng.random::<f64>().powf(1.0 / p as f64);
            let point = theta.with_values((&center + dir * r).as_slice()).ok()?;
            let d = information_derivative(dataset, &point, spec, 1e-4).ok()?;
            let sq: f64 = d.iter().map(|m| m.norm_squared()).sum();
            Some(sq.sqrt() / (n as f64).sqrt())
        })
        .collect();
    let evaluated: Vec<f64> = norms.iter().flatten().copied().collect();
    Ok(ThirdDerivativeReport {
        n,
        radius,
        evaluated: evaluated.len(),
        skipped: count - evaluated.len(),
        max_scaled_norm: evaluated.iter().copied().fold(f64::NAN, f64::max),
    })
}

/// diag(Â, Û) for a design at θ, the stand-in for the limiting information.
pub fn reference_information(design: &Dataset, theta: &ParamVector, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let (a, u) = Likelihood::new(design, *spec)
        .workspace(theta, DerivOrder::First)?
        .information_blocks();
    Ok(block_diag(&a, &u))
}
