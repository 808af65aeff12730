//! Exact Gaussian log-likelihood with analytic score and observed information.
//!
//! Subjects that share observation times and random-effect design have the
//! same Q_i(v); they are grouped once per dataset so each distinct covariance
//! is factorized only once per parameter value. Per-subject contributions are
//! computed independently (in parallel) and combined with a fixed-shape
//! pairwise reduction, so results are bit-stable for any worker count.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::covariance::{covariance_derivatives, pair_index, CovDerivs, CovParams, DerivOrder, KernelSpec};
use crate::data::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, pairwise_sum_matrices, pairwise_sum_vectors, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Full parameter θ = (β, γ, α|H, τ, σ²).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub beta: Vec<f64>,
    pub cov: CovParams,
}

impl ParamVector {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>, rate: f64, tau: f64, sigma2: f64) -> Self {
        ParamVector {
            beta,
            cov: CovParams {
                gamma,
                rate,
                tau,
                sigma2,
            },
        }
    }

    /// The all-ones starting point.
    pub fn ones(p_beta: usize, p_gamma: usize) -> Self {
        Self::new(vec![1.0; p_beta], vec![1.0; p_gamma], 1.0, 1.0, 1.0)
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.cov.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn p_beta(&self) -> usize {
        self.beta.len()
    }

    pub fn p_gamma(&self) -> usize {
        self.cov.gamma.len()
    }

    /// Flattened in the order (β, γ, α|H, τ, σ²).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend_from_slice(&self.cov.gamma);
        v.extend_from_slice(&[self.cov.rate, self.cov.tau, self.cov.sigma2]);
        v
    }

    pub fn from_slice(values: &[f64], p_beta: usize, p_gamma: usize) -> Result<Self> {
        if values.len() != p_beta + p_gamma + 3 {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                p_beta + p_gamma + 3,
                values.len()
            )));
        }
        let g0 = p_beta + p_gamma;
        Ok(Self::new(
            values[..p_beta].to_vec(),
            values[p_beta..g0].to_vec(),
            values[g0],
            values[g0 + 1],
            values[g0 + 2],
        ))
    }

    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        Self::from_slice(values, self.p_beta(), self.p_gamma())
    }

    /// Coordinate names, e.g. `beta_1, gamma_1, alpha, tau, sigma2`.
    pub fn names(&self, spec: &KernelSpec) -> Vec<String> {
        parameter_names(self.p_beta(), self.p_gamma(), spec)
    }

    /// Checks dimensions against the dataset and the open parameter space.
    pub fn check(&self, dataset: &Dataset, spec: &KernelSpec) -> Result<()> {
        if self.beta.len() != dataset.p_beta {
            return Err(Error::Dimension(format!(
                "beta has {} components, dataset has {} fixed-effect columns",
                self.beta.len(),
                dataset.p_beta
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite beta".into()));
        }
        self.cov.check(spec)?;
        let p_b = spec.p_b_for(self.p_gamma())?;
        if p_b != dataset.p_b {
            return Err(Error::Dimension(format!(
                "G is {p_b}x{p_b} but dataset has {} random-effect columns",
                dataset.p_b
            )));
        }
        Ok(())
    }
}

pub fn parameter_names(p_beta: usize, p_gamma: usize, spec: &KernelSpec) -> Vec<String> {
    let mut names: Vec<String> = (1..=p_beta).map(|k| format!("beta_{k}")).collect();
    names.extend((1..=p_gamma).map(|k| format!("gamma_{k}")));
    names.push(spec.rate_name().to_string());
    names.push("tau".into());
    names.push("sigma2".into());
    names
}

/// JSON form: `{"beta": [..], "gamma": [..], "alpha"|"hurst": x, "tau": x,
/// "sigma2"|"sigma": x}`.
#[derive(Serialize, Deserialize)]
struct ParamRepr {
    beta: Vec<f64>,
    gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hurst: Option<f64>,
    tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma2: Option<f64>,
    #[serde(default, skip_serializing)]
    sigma: Option<f64>,
}

impl Serialize for ParamVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamRepr {
            beta: self.beta.clone(),
            gamma: self.cov.gamma.clone(),
            alpha: Some(self.cov.rate),
            hurst: None,
            tau: self.cov.tau,
            sigma2: Some(self.cov.sigma2),
            sigma: None,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = ParamRepr::deserialize(d)?;
        let rate = r
            .alpha
            .or(r.hurst)
            .ok_or_else(|| D::Error::custom("one of `alpha` or `hurst` is required"))?;
        let sigma2 = match (r.sigma2, r.sigma) {
            (Some(s2), _) => s2,
            (None, Some(s)) => s * s,
            (None, None) => return Err(D::Error::custom("one of `sigma2` or `sigma` is required")),
        };
        Ok(ParamVector::new(r.beta, r.gamma, rate, r.tau, sigma2))
    }
}

/// Source of ∂²Q used by the observed information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondDerivMode {
    #[default]
    Analytic,
    /// Central differences of the analytic first derivatives.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LikelihoodOptions {
    pub second_derivs: SecondDerivMode,
    /// Relative step for [`SecondDerivMode::FiniteDifference`].
    pub fd_step: f64,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        LikelihoodOptions {
            second_derivs: SecondDerivMode::Analytic,
            fd_step: 1e-5,
        }
    }
}

/// A dataset prepared for repeated likelihood evaluation.
pub struct Likelihood<'a> {
    data: &'a Dataset,
    spec: KernelSpec,
    options: LikelihoodOptions,
    /// Representative subject of each covariance group.
    group_rep: Vec<usize>,
    group_size: Vec<usize>,
    subject_group: Vec<usize>,
}

fn structure_key(s: &Subject) -> Vec<u64> {
    let mut key = Vec::with_capacity(s.times.len() * (1 + s.z.ncols()) + 2);
    key.push(s.times.len() as u64);
    key.push(s.z.ncols() as u64);
    key.extend(s.times.iter().map(|t| t.to_bits()));
    key.extend(s.z.iter().map(|z| z.to_bits()));
    key
}

impl<'a> Likelihood<'a> {
    pub fn new(data: &'a Dataset, spec: KernelSpec) -> Self {
        Self::with_options(data, spec, LikelihoodOptions::default())
    }

    pub fn with_options(data: &'a Dataset, spec: KernelSpec, options: LikelihoodOptions) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut group_rep = Vec::new();
        let mut group_size = Vec::new();
        let subject_group = data
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let g = *index.entry(structure_key(s)).or_insert_with(|| {
                    group_rep.push(i);
                    group_size.push(0);
                    group_rep.len() - 1
                });
                group_size[g] += 1;
                g
            })
            .collect();
        Likelihood {
            data,
            spec,
            options,
            group_rep,
            group_size,
            subject_group,
        }
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n_subjects(&self) -> usize {
        self.data.n_subjects()
    }

    /// Number of distinct covariance structures among the subjects.
    pub fn n_groups(&self) -> usize {
        self.group_rep.len()
    }

    /// Factorizes every Q_i at `theta`, computing derivative data up to `order`.
    pub fn workspace(&self, theta: &ParamVector, order: DerivOrder) -> Result<Workspace<'_, 'a>> {
        theta.check(self.data, &self.spec)?;
        let results: Vec<Result<GroupFactor>> = self
            .group_rep
            .par_iter()
            .map(|&rep| self.factor_group(&self.data.subjects[rep], &theta.cov, order))
            .collect();
        let groups = results.into_iter().collect::<Result<Vec<_>>>()?;
        let beta = DVector::from_column_slice(&theta.beta);
        let residuals: Vec<(DVector<f64>, DVector<f64>)> = self
            .data
            .subjects
            .par_iter()
            .zip(self.subject_group.par_iter())
            .map(|(s, &g)| {
                let r = &s.y - &s.x * &beta;
                let a = groups[g].chol.solve(&r);
                (r, a)
            })
            .collect();
        Ok(Workspace {
            lik: self,
            theta: theta.clone(),
            order,
            groups,
            residuals,
        })
    }

    fn factor_group(&self, subject: &Subject, cov: &CovParams, order: DerivOrder) -> Result<GroupFactor> {
        let analytic_second =
            order == DerivOrder::Second && self.options.second_derivs == SecondDerivMode::Analytic;
        let build_order = if analytic_second { DerivOrder::Second } else { order.min(DerivOrder::First) };
        let mut cd = covariance_derivatives(subject, cov, &self.spec, build_order)?;
        if order == DerivOrder::Second && !analytic_second {
            cd.d2q = fd_second_derivatives(subject, cov, &self.spec, self.options.fd_step)?;
        }
        let n = subject.n_obs();
        let chol = Cholesky::new(cd.q.clone()).ok_or_else(|| Error::CholeskyFailure {
            subject: subject.id.clone(),
        })?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !logdet.is_finite() {
            return Err(Error::CholeskyFailure {
                subject: subject.id.clone(),
            });
        }
        let derivs = if order >= DerivOrder::First {
            Some(GroupDerivs::new(chol.inverse(), cd, n))
        } else {
            None
        };
        Ok(GroupFactor { chol, logdet, derivs })
    }
}

fn fd_second_derivatives(
    subject: &Subject,
    cov: &CovParams,
    spec: &KernelSpec,
    rel_step: f64,
) -> Result<Vec<Option<DMatrix<f64>>>> {
    let p_v = cov.len();
    let mut flat: Vec<f64> = cov.gamma.clone();
    flat.extend_from_slice(&[cov.rate, cov.tau, cov.sigma2]);
    let rebuild = |v: &[f64]| CovParams {
        gamma: v[..v.len() - 3].to_vec(),
        rate: v[v.len() - 3],
        tau: v[v.len() - 2],
        sigma2: v[v.len() - 1],
    };
    let mut d2q = vec![None; p_v * (p_v + 1) / 2];
    for j in 0..p_v {
        let h = rel_step * flat[j].abs().max(1.0);
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[j] += h;
        minus[j] -= h;
        let up = covariance_derivatives(subject, &rebuild(&plus), spec, DerivOrder::First)?;
        let dn = covariance_derivatives(subject, &rebuild(&minus), spec, DerivOrder::First)?;
        for k in j..p_v {
            let d = (&up.dq[k] - &dn.dq[k]) / (2.0 * h);
            d2q[pair_index(j, k, p_v)] = Some(d);
        }
    }
    Ok(d2q)
}

struct GroupDerivs {
    qinv: DMatrix<f64>,
    dq: Vec<DMatrix<f64>>,
    /// tr(Q⁻¹ ∂_k Q)
    tr_qinv_dq: Vec<f64>,
    /// tr(Q⁻¹ ∂_j Q Q⁻¹ ∂_k Q)
    tr_bb: DMatrix<f64>,
    d2q: Vec<Option<DMatrix<f64>>>,
    /// tr(Q⁻¹ ∂²_{jk} Q), packed.
    tr_qinv_d2q: Vec<f64>,
}

/// tr(A B) for symmetric A, B.
fn trace_sym_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

impl GroupDerivs {
    fn new(qinv: DMatrix<f64>, cd: CovDerivs, n: usize) -> Self {
        let p_v = cd.dq.len();
        let b: Vec<DMatrix<f64>> = cd.dq.iter().map(|d| &qinv * d).collect();
        let tr_qinv_dq = cd.dq.iter().map(|d| trace_sym_product(&qinv, d)).collect();
        let mut tr_bb = DMatrix::zeros(p_v, p_v);
        for j in 0..p_v {
            for k in j..p_v {
                // tr(B_j B_k) = Σ_ab B_j[a,b] B_k[b,a]
                let mut acc = 0.0;
                for a in 0..n {
                    for c in 0..n {
                        acc += b[j][(a, c)] * b[k][(c, a)];
                    }
                }
                tr_bb[(j, k)] = acc;
                tr_bb[(k, j)] = acc;
            }
        }
        let tr_qinv_d2q = cd
            .d2q
            .iter()
            .map(|m| m.as_ref().map_or(0.0, |m| trace_sym_product(&qinv, m)))
            .collect();
        GroupDerivs {
            qinv,
            dq: cd.dq,
            tr_qinv_dq,
            tr_bb,
            d2q: cd.d2q,
            tr_qinv_d2q,
        }
    }
}

struct GroupFactor {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    derivs: Option<GroupDerivs>,
}

/// Factorizations and residual solves at one parameter value, reusable for
/// the log-likelihood, score and information.
pub struct Workspace<'l, 'a> {
    lik: &'l Likelihood<'a>,
    theta: ParamVector,
    order: DerivOrder,
    groups: Vec<GroupFactor>,
    /// Per subject: r_i = y_i - X_i β and Q_i⁻¹ r_i.
    residuals: Vec<(DVector<f64>, DVector<f64>)>,
}

impl Workspace<'_, '_> {
    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    fn group_of(&self, i: usize) -> &GroupFactor {
        &self.groups[self.lik.subject_group[i]]
    }

    fn derivs_of(&self, i: usize) -> &GroupDerivs {
        self.group_of(i)
            .derivs
            .as_ref()
            .expect("workspace built without derivative data")
    }

    fn require(&self, order: DerivOrder) {
        assert!(
            self.order >= order,
            "workspace built with {:?}, {:?} required",
            self.order,
            order
        );
    }

    /// Determinant of the covariance factor of subject `i`, as log|Q_i|.
    pub fn log_det(&self, i: usize) -> f64 {
        self.group_of(i).logdet
    }

    /// Cholesky factor L with L Lᵀ = Q_i.
    pub fn cholesky_factor(&self, i: usize) -> DMatrix<f64> {
        self.group_of(i).chol.l()
    }

    /// L_i z for the Cholesky factor of Q_i; maps standard normals to N(0, Q_i).
    pub fn correlate(&self, i: usize, z: &DVector<f64>) -> DVector<f64> {
        let l = self.group_of(i).chol.l_dirty();
        let n = l.nrows();
        DVector::from_fn(n, |r, _| (0..=r).map(|c| l[(r, c)] * z[c]).sum())
    }

    pub fn log_likelihood(&self) -> f64 {
        let terms: Vec<f64> = (0..self.residuals.len())
            .into_par_iter()
            .map(|i| {
                let (r, a) = &self.residuals[i];
                let n = r.len() as f64;
                -0.5 * (n * LN_2PI + self.group_of(i).logdet + r.dot(a))
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// ∂ℓ/∂θ.
    pub fn score(&self) -> DVector<f64> {
        self.require(DerivOrder::First);
        let p_beta = self.theta.p_beta();
        let p = self.theta.len();
        let terms: Vec<DVector<f64>> = (0..self.residuals.len())
            .into_par_iter()
            .map(|i| {
                let s = &self.lik.data.subjects[i];
                let (_, a) = &self.residuals[i];
                let gd = self.derivs_of(i);
                let mut out = DVector::zeros(p);
                out.rows_mut(0, p_beta).copy_from(&(s.x.transpose() * a));
                for (k, dq) in gd.dq.iter().enumerate() {
                    let quad = a.dot(&(dq * a));
                    out[p_beta + k] = 0.5 * (quad - gd.tr_qinv_dq[k]);
                }
                out
            })
            .collect();
        pairwise_sum_vectors(&terms, p)
    }

    /// Δ_N(θ) = score / √N.
    pub fn normalized_score(&self) -> DVector<f64> {
        self.score() / (self.lik.n_subjects() as f64).sqrt()
    }

    /// I_N(θ) = -(1/N) ∂²ℓ/∂θ².
    pub fn observed_information(&self) -> DMatrix<f64> {
        self.require(DerivOrder::Second);
        let p_beta = self.theta.p_beta();
        let p = self.theta.len();
        let p_v = p - p_beta;
        let terms: Vec<DMatrix<f64>> = (0..self.residuals.len())
            .into_par_iter()
            .map(|i| {
                let s = &self.lik.data.subjects[i];
                let (_, a) = &self.residuals[i];
                let gd = self.derivs_of(i);
                let mut out = DMatrix::zeros(p, p);
                let qx = &gd.qinv * &s.x;
                out.view_mut((0, 0), (p_beta, p_beta))
                    .copy_from(&(s.x.transpose() * &qx));
                // w_k = ∂_k Q a, u_k = Q⁻¹ w_k
                let w: Vec<DVector<f64>> = gd.dq.iter().map(|d| d * a).collect();
                let u: Vec<DVector<f64>> = w.iter().map(|w| &gd.qinv * w).collect();
                for k in 0..p_v {
                    let xb = qx.transpose() * &w[k];
                    for b in 0..p_beta {
                        out[(b, p_beta + k)] = xb[b];
                        out[(p_beta + k, b)] = xb[b];
                    }
                }
                for j in 0..p_v {
                    for k in j..p_v {
                        let pi = pair_index(j, k, p_v);
                        let quad2 = gd.d2q[pi].as_ref().map_or(0.0, |m| a.dot(&(m * a)));
                        let v = w[j].dot(&u[k]) - 0.5 * quad2 - 0.5 * gd.tr_bb[(j, k)]
                            + 0.5 * gd.tr_qinv_d2q[pi];
                        out[(p_beta + j, p_beta + k)] = v;
                        out[(p_beta + k, p_beta + j)] = v;
                    }
                }
                out
            })
            .collect();
        let mut info = pairwise_sum_matrices(&terms, p, p) / self.lik.n_subjects() as f64;
        symmetrize(&mut info);
        info
    }

    /// `(Â_N, Û_N)`: (1/N)Σ XᵀQ⁻¹X and (1/N)Σ ½ tr(Q⁻¹∂_jQ Q⁻¹∂_kQ).
    pub fn information_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.require(DerivOrder::First);
        let p_beta = self.theta.p_beta();
        let p_v = self.theta.cov.len();
        let n_sub = self.lik.n_subjects() as f64;
        let a_terms: Vec<DMatrix<f64>> = (0..self.residuals.len())
            .into_par_iter()
            .map(|i| {
                let s = &self.lik.data.subjects[i];
                s.x.transpose() * &self.derivs_of(i).qinv * &s.x
            })
            .collect();
        let mut a_hat = pairwise_sum_matrices(&a_terms, p_beta, p_beta) / n_sub;
        symmetrize(&mut a_hat);
        let u_terms: Vec<DMatrix<f64>> = self
            .groups
            .iter()
            .zip(&self.lik.group_size)
            .map(|(g, &count)| {
                g.derivs.as_ref().expect("derivative data").tr_bb.clone() * (0.5 * count as f64)
            })
            .collect();
        let u_hat = pairwise_sum_matrices(&u_terms, p_v, p_v) / n_sub;
        (a_hat, u_hat)
    }

    /// diag(Â_N, Û_N) as one p × p matrix.
    pub fn expected_information(&self) -> DMatrix<f64> {
        let (a, u) = self.information_blocks();
        block_diag(&a, &u)
    }
}

pub fn block_diag(a: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let pa = a.nrows();
    let p = pa + u.nrows();
    let mut m = DMatrix::zeros(p, p);
    m.view_mut((0, 0), (pa, pa)).copy_from(a);
    m.view_mut((pa, pa), (u.nrows(), u.nrows())).copy_from(u);
    m
}

pub fn log_likelihood(dataset: &Dataset, theta: &ParamVector, spec: &KernelSpec) -> Result<f64> {
    Ok(Likelihood::new(dataset, *spec)
        .workspace(theta, DerivOrder::Value)?
        .log_likelihood())
}

pub fn score(dataset: &Dataset, theta: &ParamVector, spec: &KernelSpec) -> Result<DVector<f64>> {
    Ok(Likelihood::new(dataset, *spec)
        .workspace(theta, DerivOrder::First)?
        .score())
}

pub fn normalized_score(dataset: &Dataset, theta: &ParamVector, spec: &KernelSpec) -> Result<DVector<f64>> {
    Ok(Likelihood::new(dataset, *spec)
        .workspace(theta, DerivOrder::First)?
        .normalized_score())
}

pub fn observed_information(dataset: &Dataset, theta: &ParamVector, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    Ok(Likelihood::new(dataset, *spec)
        .workspace(theta, DerivOrder::Second)?
        .observed_information())
}

pub fn information_blocks(
    dataset: &Dataset,
    theta: &ParamVector,
    spec: &KernelSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(Likelihood::new(dataset, *spec)
        .workspace(theta, DerivOrder::First)?
        .information_blocks())
}
