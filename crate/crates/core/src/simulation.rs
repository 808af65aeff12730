//! Synthetic longitudinal designs, response simulation and Monte Carlo
//! bias studies.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::covariance::{fbm_kernel, g_matrix, iou_kernel, DerivOrder, KernelKind, KernelSpec};
use crate::data::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitConfig};
use crate::likelihood::{Likelihood, ParamVector};
use crate::numeric::{mean, pairwise_sum, sample_sd};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    #[default]
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryCovariate {
    /// A fresh Bernoulli(0.5) draw at every observation.
    #[default]
    PerObservation,
    /// One draw per subject, repeated at every time.
    PerSubject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub kind: DesignKind,
    pub n_subjects: usize,
    /// Grid size; balanced subjects are observed at 1..=n_points, unbalanced
    /// ones at a random subset of it.
    pub n_points: usize,
    /// Unbalanced subject sizes are ⌊U⌋ with U ~ Uniform[min_points, n_points).
    pub min_points: usize,
    pub binary_covariate: BinaryCovariate,
    pub design_seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            kind: DesignKind::Balanced,
            n_subjects: 250,
            n_points: 20,
            min_points: 15,
            binary_covariate: BinaryCovariate::PerObservation,
            design_seed: 1,
        }
    }
}

impl DesignConfig {
    pub fn balanced(n_subjects: usize, design_seed: u64) -> Self {
        DesignConfig {
            n_subjects,
            design_seed,
            ..Self::default()
        }
    }

    pub fn unbalanced(n_subjects: usize, design_seed: u64) -> Self {
        DesignConfig {
            kind: DesignKind::Unbalanced,
            n_subjects,
            design_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_points == 0 {
            return Err(Error::InvalidArgument("design needs at least one subject and one time point".into()));
        }
        if self.kind == DesignKind::Unbalanced && !(1..self.n_points).contains(&self.min_points) {
            return Err(Error::InvalidArgument(format!(
                "unbalanced design needs 1 <= min_points < n_points, got {} and {}",
                self.min_points, self.n_points
            )));
        }
        Ok(())
    }
}

fn design_subject(config: &DesignConfig, index: usize) -> Subject {
    let mut rng = stream(config.design_seed, Purpose::Design, 0, index as u64);
    let grid = config.n_points;
    let times: Vec<f64> = match config.kind {
        DesignKind::Balanced => (1..=grid).map(|t| t as f64).collect(),
        DesignKind::Unbalanced => {
            let n_i = rng.random_range(config.min_points as f64..grid as f64).floor() as usize;
            let mut picked = rand::seq::index::sample(&mut rng, grid, n_i).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|t| (t + 1) as f64).collect()
        }
    };
    let n = times.len();
    let binary: Vec<f64> = match config.binary_covariate {
        BinaryCovariate::PerObservation => (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(),
        BinaryCovariate::PerSubject => vec![f64::from(u8::from(rng.random_bool(0.5))); n],
    };
    Subject {
        id: (index + 1).to_string(),
        y: DVector::zeros(n),
        x: DMatrix::from_fn(n, 2, |r, c| if c == 0 { times[r] } else { binary[r] }),
        z: DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { times[r] }),
        times,
    }
}

/// Times and covariates for every subject, with zero responses.
/// x = (t, Bernoulli(0.5)), z = (1, t).
pub fn generate_design(config: &DesignConfig) -> Result<Dataset> {
    config.validate()?;
    let subjects = (0..config.n_subjects)
        .into_par_iter()
        .map(|i| design_subject(config, i))
        .collect();
    Ok(Dataset::new(subjects))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// Y = Xβ + L z with L Lᵀ = Q.
    #[default]
    Joint,
    /// Y = Xβ + Z b + W + ε with each component drawn from its own law.
    Decomposed,
}

enum Factors {
    Joint(Vec<DMatrix<f64>>),
    Decomposed {
        g_root: DMatrix<f64>,
        h_roots: Vec<DMatrix<f64>>,
        sigma: f64,
    },
}

/// Draws response vectors for a fixed design and parameter; the
/// factorizations are computed once and reused for every replication.
pub struct ResponseSampler {
    skeleton: Dataset,
    means: Vec<DVector<f64>>,
    factors: Factors,
}

fn lower_times(l: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(l.nrows(), |r, _| (0..=r).map(|c| l[(r, c)] * z[c]).sum())
}

fn noise_matrix(times: &[f64], theta: &ParamVector, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = times.len();
    let mut h = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            let v = match spec.kind {
                KernelKind::Iou => iou_kernel(theta.cov.rate, theta.cov.tau, times[r], times[c])?,
                KernelKind::Fbm => fbm_kernel(theta.cov.rate, theta.cov.tau, times[r], times[c])?,
            };
            h[(r, c)] = v;
            h[(c, r)] = v;
        }
    }
    Ok(h)
}

impl ResponseSampler {
    pub fn new(skeleton: &Dataset, theta: &ParamVector, spec: &KernelSpec, mode: DrawMode) -> Result<Self> {
        theta.check(skeleton, spec)?;
        let beta = DVector::from_column_slice(&theta.beta);
        let means = skeleton.subjects.iter().map(|s| &s.x * &beta).collect();
        let factors = match mode {
            DrawMode::Joint => {
                let lik = Likelihood::new(skeleton, *spec);
                let ws = lik.workspace(theta, DerivOrder::Value)?;
                Factors::Joint((0..skeleton.n_subjects()).map(|i| ws.cholesky_factor(i)).collect())
            }
            DrawMode::Decomposed => {
                let g = g_matrix(&theta.cov.gamma, spec)?;
                let g_root = Cholesky::new(g)
                    .ok_or_else(|| Error::CholeskyFailure {
                        subject: "random-effect covariance G".into(),
                    })?
                    .l();
                let h_roots = skeleton
                    .subjects
                    .iter()
                    .map(|s| {
                        let h = noise_matrix(&s.times, theta, spec)?;
                        Cholesky::new(h)
                            .map(|c| c.l())
                            .ok_or_else(|| Error::CholeskyFailure { subject: s.id.clone() })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Factors::Decomposed {
                    g_root,
                    h_roots,
                    sigma: theta.cov.sigma2.sqrt(),
                }
            }
        };
        Ok(ResponseSampler {
            skeleton: skeleton.clone(),
            means,
            factors,
        })
    }

    /// Response vector of subject `i` in replication `replication`.
    pub fn draw_subject(&self, noise_seed: u64, replication: u64, i: usize) -> DVector<f64> {
        let mut rng = stream(noise_seed, Purpose::Noise, replication, i as u64);
        let n = self.means[i].len();
        let mut normals = |k: usize| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        match &self.factors {
            Factors::Joint(l) => &self.means[i] + lower_times(&l[i], &normals(n)),
            Factors::Decomposed {
                g_root,
                h_roots,
                sigma,
            } => {
                let b = lower_times(g_root, &normals(g_root.nrows()));
                let w = lower_times(&h_roots[i], &normals(n));
                let eps = normals(n) * *sigma;
                &self.means[i] + &self.skeleton.subjects[i].z * b + w + eps
            }
        }
    }

    pub fn sample(&self, noise_seed: u64, replication: u64) -> Dataset {
        let ys: Vec<DVector<f64>> = (0..self.skeleton.n_subjects())
            .into_par_iter()
            .map(|i| self.draw_subject(noise_seed, replication, i))
            .collect();
        let mut out = self.skeleton.clone();
        for (s, y) in out.subjects.iter_mut().zip(ys) {
            s.y = y;
        }
        out
    }
}

/// Fills the skeleton's responses with one draw from the model at `theta`.
pub fn simulate_responses(
    skeleton: &Dataset,
    theta: &ParamVector,
    spec: &KernelSpec,
    noise_seed: u64,
    replication: u64,
    mode: DrawMode,
) -> Result<Dataset> {
    Ok(ResponseSampler::new(skeleton, theta, spec, mode)?.sample(noise_seed, replication))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub true_theta: ParamVector,
    pub n_replications: usize,
    pub noise_seed: u64,
    #[serde(default)]
    pub fit: FitConfig,
    /// Redraw the design for every replication instead of fixing it once.
    #[serde(default)]
    pub fresh_design: bool,
    #[serde(default)]
    pub draw_mode: DrawMode,
    /// Aggregate fits that stopped without converging (e.g. on an
    /// evaluation budget) instead of counting them as failures.
    #[serde(default)]
    pub include_unconverged: bool,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replications < 2 {
            return Err(Error::InvalidArgument("a Monte Carlo study needs at least 2 replications".into()));
        }
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    /// `None` when the fit errored.
    pub estimate: Option<ParamVector>,
    pub loglik: f64,
    pub converged: bool,
    pub reason: String,
    pub iterations: usize,
    pub se: Vec<f64>,
    pub wall_time_ms: f64,
    /// Whether the estimate enters the summary.
    pub included: bool,
}

impl Replication {
    pub fn usable(&self) -> bool {
        self.included && self.estimate.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub mcse: f64,
    pub sd: f64,
}

/// Bias, MCSE, mean and sd of `estimates` around `truth`.
pub fn summarize(parameter: &str, truth: f64, estimates: &[f64]) -> ParameterSummary {
    let m = estimates.len() as f64;
    let mean = mean(estimates);
    let ss: Vec<f64> = estimates.iter().map(|v| (v - mean) * (v - mean)).collect();
    ParameterSummary {
        parameter: parameter.to_string(),
        truth,
        mean,
        bias: mean - truth,
        mcse: (pairwise_sum(&ss) / (m * (m - 1.0))).sqrt(),
        sd: sample_sd(estimates),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub names: Vec<String>,
    pub true_theta: ParamVector,
    /// One row per model coordinate, then `sigma` and `omega` (τ²/α²).
    pub summary: Vec<ParameterSummary>,
    pub replications: Vec<Replication>,
    pub failures: usize,
    pub design: Dataset,
    pub spec: KernelSpec,
}

impl McReport {
    pub fn row(&self, parameter: &str) -> Option<&ParameterSummary> {
        self.summary.iter().find(|r| r.parameter == parameter)
    }

    /// Converged estimates as rows of the flattened parameter vector.
    pub fn estimates(&self) -> Vec<Vec<f64>> {
        self.replications
            .iter()
            .filter(|r| r.usable())
            .map(|r| r.estimate.as_ref().expect("usable").to_vec())
            .collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "true_theta": self.true_theta,
            "n_replications": self.replications.len(),
            "failures": self.failures,
            "summary": self.summary,
            "replications": self.replications.iter().map(|r| json!({
                "index": r.index,
                "estimate": r.estimate.as_ref().map(|e| e.to_vec()),
                "loglik": r.loglik,
                "converged": r.converged,
                "included": r.included,
                "reason": r.reason,
                "iterations": r.iterations,
                "wall_time_ms": r.wall_time_ms,
            })).collect::<Vec<_>>(),
        })
    }

    /// Columns `parameter,bias,mcse`, in model order with σ in place of σ².
    pub fn write_table<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("writing table: {e}"));
        w.write_record(["parameter", "bias", "mcse"]).map_err(csv_err)?;
        for row in &self.summary {
            if row.parameter == "sigma2" || row.parameter == "omega" {
                continue;
            }
            w.write_record([row.parameter.clone(), row.bias.to_string(), row.mcse.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("table.csv", e))
    }

    /// Per-replication estimates; free of timing so reruns are byte-identical.
    pub fn write_raw<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("writing raw estimates: {e}"));
        let mut header = vec![
            "replication".to_string(),
            "converged".into(),
            "included".into(),
            "loglik".into(),
        ];
        header.extend(self.names.iter().cloned());
        header.extend(self.names.iter().map(|n| format!("se_{n}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.replications {
            let mut rec = vec![
                r.index.to_string(),
                r.converged.to_string(),
                r.usable().to_string(),
                r.loglik.to_string(),
            ];
            match &r.estimate {
                Some(e) => rec.extend(e.to_vec().iter().map(|v| v.to_string())),
                None => rec.extend(self.names.iter().map(|_| String::new())),
            }
            rec.extend(r.se.iter().map(|v| v.to_string()));
            rec.resize(header.len(), String::new());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("raw.csv", e))
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        let report = serde_json::to_string_pretty(&self.to_json()).expect("serializable report");
        create("report.json")?
            .write_all(report.as_bytes())
            .map_err(|e| Error::io(dir.join("report.json"), e))?;
        self.write_table(create("table.csv")?)?;
        self.write_raw(create("raw.csv")?)
    }
}

/// Fits `mc.n_replications` simulated datasets and aggregates bias and MCSE
/// over the included fits (the converged ones unless
/// `include_unconverged` is set).
pub fn run_mc_study(mc: &McConfig, design: &DesignConfig, spec: &KernelSpec) -> Result<McReport> {
    mc.validate()?;
    let skeleton = generate_design(design)?;
    mc.true_theta.check(&skeleton, spec)?;
    let frozen = if mc.fresh_design {
        None
    } else {
        Some(ResponseSampler::new(&skeleton, &mc.true_theta, spec, mc.draw_mode)?)
    };
    let replications: Vec<Replication> = (0..mc.n_replications)
        .into_par_iter()
        .map(|m| {
            let started = Instant::now();
            let data = match &frozen {
                Some(sampler) => Ok(sampler.sample(mc.noise_seed, m as u64)),
                None => {
                    let cfg = DesignConfig {
                        design_seed: design.design_seed.wrapping_add(m as u64),
                        ..design.clone()
                    };
                    generate_design(&cfg).and_then(|sk| {
                        simulate_responses(&sk, &mc.true_theta, spec, mc.noise_seed, m as u64, mc.draw_mode)
                    })
                }
            };
            let outcome = data.and_then(|d| fit(&d, spec, &mc.fit));
            let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
            match outcome {
                Ok(f) => Replication {
                    index: m,
                    included: f.converged || (mc.include_unconverged && f.loglik.is_finite()),
                    estimate: Some(f.theta_hat),
                    loglik: f.loglik,
                    converged: f.converged,
                    reason: f.reason,
                    iterations: f.iterations,
                    se: f.se,
                    wall_time_ms,
                },
                Err(e) => Replication {
                    index: m,
                    included: false,
                    estimate: None,
                    loglik: f64::NAN,
                    converged: false,
                    reason: e.to_string(),
                    iterations: 0,
                    se: Vec::new(),
                    wall_time_ms,
                },
            }
        })
        .collect();
    let names = mc.true_theta.names(spec);
    Ok(build_report(names, mc.true_theta.clone(), replications, skeleton, *spec))
}

fn build_report(
    names: Vec<String>,
    true_theta: ParamVector,
    replications: Vec<Replication>,
    design: Dataset,
    spec: KernelSpec,
) -> McReport {
    let usable: Vec<Vec<f64>> = replications
        .iter()
        .filter(|r| r.usable())
        .map(|r| r.estimate.as_ref().expect("usable").to_vec())
        .collect();
    let failures = replications.len() - usable.len();
    let truth = true_theta.to_vec();
    let column = |k: usize| usable.iter().map(|e| e[k]).collect::<Vec<_>>();
    let mut summary: Vec<ParameterSummary> = names
        .iter()
        .enumerate()
        .map(|(k, n)| summarize(n, truth[k], &column(k)))
        .collect();
    let p = truth.len();
    let sigma: Vec<f64> = column(p - 1).iter().map(|v| v.sqrt()).collect();
    summary.push(summarize("sigma", truth[p - 1].sqrt(), &sigma));
    if spec.kind == KernelKind::Iou {
        let omega: Vec<f64> = usable.iter().map(|e| (e[p - 2] / e[p - 3]).powi(2)).collect();
        summary.push(summarize("omega", (truth[p - 2] / truth[p - 3]).powi(2), &omega));
    }
    McReport {
        names,
        true_theta,
        summary,
        replications,
        failures,
        design,
        spec,
    }
}

/// True parameter of the reference simulation design, with σ² = 1.25².
pub fn reference_theta() -> ParamVector {
    ParamVector::new(vec![-0.25, 0.50], vec![1.25, 1.00, 1.50], 1.30, 0.40, 1.25 * 1.25)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::GParam;

    #[test]
    fn mcse_of_three_values() {
        let s = summarize("x", 1.0, &[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.bias, 1.0);
        assert!((s.mcse - (2.0f64 / 6.0).sqrt()).abs() < 1e-15);
        let s = summarize("x", 0.0, &[0.3, 1.1]);
        assert!((s.mcse - 0.4).abs() < 1e-15);
    }

    #[test]
    fn balanced_design_layout() {
        let ds = generate_design(&DesignConfig::balanced(3, 9)).unwrap();
        assert_eq!(ds.n_subjects(), 3);
        for s in &ds.subjects {
            assert_eq!(s.times, (1..=20).map(f64::from).collect::<Vec<_>>());
            for (r, t) in s.times.iter().enumerate() {
                assert_eq!(s.z[(r, 0)], 1.0);
                assert_eq!(s.z[(r, 1)], *t);
                assert_eq!(s.x[(r, 0)], *t);
                assert!(s.x[(r, 1)] == 0.0 || s.x[(r, 1)] == 1.0);
            }
        }
    }

    #[test]
    fn unbalanced_design_sizes_and_reproducibility() {
        let cfg = DesignConfig::unbalanced(200, 4);
        let a = generate_design(&cfg).unwrap();
        let b = generate_design(&cfg).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.subjects.iter().map(|s| s.n_obs()).collect();
        assert!(sizes.iter().all(|n| (15..=19).contains(n)));
        for n in 15..=19 {
            assert!(sizes.contains(&n), "size {n} never drawn");
        }
        for s in &a.subjects {
            assert!(s.times.windows(2).all(|w| w[0] < w[1]));
            assert!(s.times.iter().all(|t| (1.0..=20.0).contains(t)));
        }
    }

    #[test]
    fn per_subject_binary_covariate_is_constant() {
        let cfg = DesignConfig {
            binary_covariate: BinaryCovariate::PerSubject,
            ..DesignConfig::balanced(20, 2)
        };
        for s in generate_design(&cfg).unwrap().subjects {
            assert!(s.x.column(1).iter().all(|v| *v == s.x[(0, 1)]));
        }
    }

    #[test]
    fn noiseless_limit_returns_mean() {
        let spec = KernelSpec::new(KernelKind::Iou, GParam::PaperBivariate);
        let sk = generate_design(&DesignConfig::balanced(4, 1)).unwrap();
        let theta = ParamVector::new(vec![-0.25, 0.5], vec![1e-6, 0.0, 1e-6], 1.3, 1e-6, 1e-8);
        for mode in [DrawMode::Joint, DrawMode::Decomposed] {
            let ds = simulate_responses(&sk, &theta, &spec, 3, 0, mode).unwrap();
            for s in &ds.subjects {
                let mean = &s.x * DVector::from_vec(vec![-0.25, 0.5]);
                assert!((&s.y - mean).abs().max() < 1e-3);
            }
        }
    }

    #[test]
    fn too_few_replications_rejected() {
        let mc = McConfig {
            true_theta: reference_theta(),
            n_replications: 1,
            noise_seed: 1,
            fit: FitConfig::default(),
            fresh_design: false,
            draw_mode: DrawMode::Joint,
            include_unconverged: false,
        };
        assert!(run_mc_study(&mc, &DesignConfig::balanced(5, 1), &KernelSpec::default()).is_err());
    }
}
