//! Marginal covariance Q_i(v) = Z G(γ) Zᵀ + H(α, τ) + σ² I and its analytic
//! first and second parameter derivatives.
//!
//! Two system-noise kernels are supported: the integrated Ornstein-Uhlenbeck
//! (IOU) kernel and a scaled fractional Brownian motion (fBm) kernel in which
//! the Hurst index takes the place of α. Covariance parameters are ordered
//! `(γ_1..γ_pγ, α|H, τ, σ²)` everywhere in this crate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Subject;
use crate::error::{Error, Result};

/// Below this value of α·max(s, t) the IOU closed form is replaced by its
/// Taylor expansion in α.
pub const IOU_TAYLOR_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Iou,
    Fbm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GParam {
    /// `[[γ1², γ2], [γ2, γ3²]]`; p_b = 2, p_γ = 3. Not PSD for every γ.
    #[default]
    PaperBivariate,
    /// `L Lᵀ` with L lower triangular, filled column-major from γ.
    CholeskyFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub g_param: GParam,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, g_param: GParam) -> Self {
        KernelSpec { kind, g_param }
    }

    /// Name of the kernel-rate coordinate.
    pub fn rate_name(&self) -> &'static str {
        match self.kind {
            KernelKind::Iou => "alpha",
            KernelKind::Fbm => "hurst",
        }
    }

    /// Random-effect dimension implied by `p_gamma`, if consistent.
    pub fn p_b_for(&self, p_gamma: usize) -> Result<usize> {
        match self.g_param {
            GParam::PaperBivariate if p_gamma == 3 => Ok(2),
            GParam::PaperBivariate => Err(Error::Dimension(format!(
                "paper_bivariate G needs 3 gamma components, got {p_gamma}"
            ))),
            GParam::CholeskyFactor => {
                let p_b = (((8 * p_gamma + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
                if p_b * (p_b + 1) / 2 == p_gamma && p_b > 0 {
                    Ok(p_b)
                } else {
                    Err(Error::Dimension(format!(
                        "cholesky_factor G needs a triangular number of gamma components, got {p_gamma}"
                    )))
                }
            }
        }
    }

    pub fn p_gamma_for(&self, p_b: usize) -> usize {
        match self.g_param {
            GParam::PaperBivariate => 3,
            GParam::CholeskyFactor => p_b * (p_b + 1) / 2,
        }
    }
}

/// Covariance parameters v = (γ, α|H, τ, σ²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    pub gamma: Vec<f64>,
    /// α for the IOU kernel, the Hurst index for fBm.
    pub rate: f64,
    pub tau: f64,
    pub sigma2: f64,
}

impl CovParams {
    pub fn len(&self) -> usize {
        self.gamma.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks the open parameter-space constraints of the kernel in force.
    pub fn check(&self, spec: &KernelSpec) -> Result<()> {
        let all_finite = self.gamma.iter().all(|g| g.is_finite())
            && self.rate.is_finite()
            && self.tau.is_finite()
            && self.sigma2.is_finite();
        if !all_finite {
            return Err(Error::InvalidArgument("non-finite covariance parameter".into()));
        }
        match spec.kind {
            KernelKind::Iou if self.rate <= 0.0 => {
                return Err(Error::InvalidArgument(format!("alpha = {} must be > 0", self.rate)))
            }
            KernelKind::Fbm if !(self.rate > 0.0 && self.rate < 1.0) => {
                return Err(Error::InvalidArgument(format!(
                    "hurst = {} must lie in (0, 1)",
                    self.rate
                )))
            }
            _ => {}
        }
        if self.tau <= 0.0 || self.sigma2 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tau = {} and sigma2 = {} must be > 0",
                self.tau, self.sigma2
            )));
        }
        spec.p_b_for(self.gamma.len())?;
        Ok(())
    }
}

/// Value and derivatives of one kernel entry with respect to (rate, τ).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KernelDerivs {
    pub value: f64,
    pub d_rate: f64,
    pub d_tau: f64,
    pub d2_rate: f64,
    pub d_rate_tau: f64,
    pub d2_tau: f64,
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("non-finite kernel input".into()))
    }
}

fn check_iou(alpha: f64, tau: f64, s: f64, t: f64) -> Result<()> {
    check_finite(&[alpha, tau, s, t])?;
    if alpha <= 0.0 || s < 0.0 || t < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "iou kernel needs alpha > 0 and s, t >= 0 (alpha={alpha}, s={s}, t={t})"
        )));
    }
    Ok(())
}

fn check_fbm(hurst: f64, tau: f64, s: f64, t: f64) -> Result<()> {
    check_finite(&[hurst, tau, s, t])?;
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::InvalidArgument(format!("hurst = {hurst} outside (0, 1)")));
    }
    if s < 0.0 || t < 0.0 {
        return Err(Error::InvalidArgument("fbm kernel needs s, t >= 0".into()));
    }
    Ok(())
}

/// `(e^{-αx}, e^{-αx} - 1)` for one argument.
#[inline]
fn decay(alpha: f64, x: f64) -> (f64, f64) {
    let ax = -alpha * x;
    (ax.exp(), ax.exp_m1())
}

/// IOU entry given precomputed decays of s, t and |s - t|.
#[inline]
fn iou_entry(alpha: f64, tau: f64, s: f64, t: f64, ds: (f64, f64), dt: (f64, f64), dd: (f64, f64)) -> KernelDerivs {
    let tau2 = tau * tau;
    let m = s.min(t);
    let d = (s - t).abs();
    // k(α) = H / τ²
    let (k, k1, k2) = if alpha * s.max(t) < IOU_TAYLOR_THRESHOLD {
        // H/τ² = ½ Σ_{j≥2} (-1)^j α^{j-3} (s^j + t^j - d^j) / j!
        let mut k = 0.0;
        let mut k1 = 0.0;
        let mut k2 = 0.0;
        let mut fact = 1.0;
        for j in 2..=5_i32 {
            fact *= j as f64;
            let pj = s.powi(j) + t.powi(j) - d.powi(j);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let c = 0.5 * sign * pj / fact;
            let e = j - 3;
            k += c * alpha.powi(e);
            k1 += c * e as f64 * alpha.powi(e - 1);
            k2 += c * (e * (e - 1)) as f64 * alpha.powi(e - 2);
        }
        (k, k1, k2)
    } else {
        let f = 2.0 * alpha * m + ds.1 + dt.1 - dd.1;
        let f1 = 2.0 * m - s * ds.0 - t * dt.0 + d * dd.0;
        let f2 = s * s * ds.0 + t * t * dt.0 - d * d * dd.0;
        let a2 = alpha * alpha;
        let a3 = a2 * alpha;
        (
            f / (2.0 * a3),
            (alpha * f1 - 3.0 * f) / (2.0 * a3 * alpha),
            (12.0 * f - 6.0 * alpha * f1 + a2 * f2) / (2.0 * a3 * a2),
        )
    };
    KernelDerivs {
        value: tau2 * k,
        d_rate: tau2 * k1,
        d_tau: 2.0 * tau * k,
        d2_rate: tau2 * k2,
        d_rate_tau: 2.0 * tau * k1,
        d2_tau: 2.0 * k,
    }
}

fn iou_derivs_unchecked(alpha: f64, tau: f64, s: f64, t: f64) -> KernelDerivs {
    let (s, t) = (s.min(t), s.max(t));
    iou_entry(
        alpha,
        tau,
        s,
        t,
        decay(alpha, s),
        decay(alpha, t),
        decay(alpha, (s - t).abs()),
    )
}

/// IOU kernel `cov[W(s), W(t)]` together with its (α, τ) derivatives.
pub fn iou_kernel_derivs(alpha: f64, tau: f64, s: f64, t: f64) -> Result<KernelDerivs> {
    check_iou(alpha, tau, s, t)?;
    Ok(iou_derivs_unchecked(alpha, tau, s, t))
}

/// `τ²/(2α³)·(2α·min(s,t) + e^{-αs} + e^{-αt} - 1 - e^{-α|s-t|})`.
pub fn iou_kernel(alpha: f64, tau: f64, s: f64, t: f64) -> Result<f64> {
    iou_kernel_derivs(alpha, tau, s, t).map(|k| k.value)
}

pub fn iou_kernel_dalpha(alpha: f64, tau: f64, s: f64, t: f64) -> Result<f64> {
    iou_kernel_derivs(alpha, tau, s, t).map(|k| k.d_rate)
}

pub fn iou_kernel_dtau(alpha: f64, tau: f64, s: f64, t: f64) -> Result<f64> {
    iou_kernel_derivs(alpha, tau, s, t).map(|k| k.d_tau)
}

/// `(x^{2H}, x^{2H} log x, x^{2H} log² x)` with the x = 0 limits taken as 0.
#[inline]
fn fbm_powers(hurst: f64, x: f64) -> (f64, f64, f64) {
    if x == 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        let l = x.ln();
        let p = (2.0 * hurst * l).exp();
        (p, p * l, p * l * l)
    }
}

fn fbm_derivs_unchecked(hurst: f64, tau: f64, s: f64, t: f64) -> KernelDerivs {
    let (s, t) = (s.min(t), s.max(t));
    let (ps, ls, qs) = fbm_powers(hurst, s);
    let (pt, lt, qt) = fbm_powers(hurst, t);
    let (pd, ld, qd) = fbm_powers(hurst, (s - t).abs());
    let base = ps + pt - pd;
    let dl = ls + lt - ld;
    let dq = qs + qt - qd;
    let tau2 = tau * tau;
    KernelDerivs {
        value: 0.5 * tau2 * base,
        d_rate: tau2 * dl,
        d_tau: tau * base,
        d2_rate: 2.0 * tau2 * dq,
        d_rate_tau: 2.0 * tau * dl,
        d2_tau: base,
    }
}

/// Scaled fBm kernel and its (H, τ) derivatives.
pub fn fbm_kernel_derivs(hurst: f64, tau: f64, s: f64, t: f64) -> Result<KernelDerivs> {
    check_fbm(hurst, tau, s, t)?;
    Ok(fbm_derivs_unchecked(hurst, tau, s, t))
}

/// `τ²/2·(s^{2H} + t^{2H} - |s-t|^{2H})`.
pub fn fbm_kernel(hurst: f64, tau: f64, s: f64, t: f64) -> Result<f64> {
    fbm_kernel_derivs(hurst, tau, s, t).map(|k| k.value)
}

pub fn fbm_kernel_dhurst(hurst: f64, tau: f64, s: f64, t: f64) -> Result<f64> {
    fbm_kernel_derivs(hurst, tau, s, t).map(|k| k.d_rate)
}

pub fn fbm_kernel_dtau(hurst: f64, tau: f64, s: f64, t: f64) -> Result<f64> {
    fbm_kernel_derivs(hurst, tau, s, t).map(|k| k.d_tau)
}

/// Random-effects covariance G(γ).
pub fn g_matrix(gamma: &[f64], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let p_b = spec.p_b_for(gamma.len())?;
    Ok(match spec.g_param {
        GParam::PaperBivariate => DMatrix::from_row_slice(
            2,
            2,
            &[gamma[0] * gamma[0], gamma[1], gamma[1], gamma[2] * gamma[2]],
        ),
        GParam::CholeskyFactor => {
            let l = cholesky_factor(gamma, p_b);
            &l * l.transpose()
        }
    })
}

fn cholesky_factor(gamma: &[f64], p_b: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p_b, p_b);
    let mut idx = 0;
    for j in 0..p_b {
        for i in j..p_b {
            l[(i, j)] = gamma[idx];
            idx += 1;
        }
    }
    l
}

/// Position in L of the `k`-th γ component under column-major fill.
fn cholesky_position(k: usize, p_b: usize) -> (usize, usize) {
    let mut idx = 0;
    for j in 0..p_b {
        for i in j..p_b {
            if idx == k {
                return (i, j);
            }
            idx += 1;
        }
    }
    unreachable!("gamma index {k} out of range")
}

fn check_gamma_index(k: usize, len: usize) -> Result<()> {
    if k < len {
        Ok(())
    } else {
        Err(Error::Dimension(format!("gamma index {k} out of range for {len} components")))
    }
}

/// ∂G/∂γ_k (0-based `k`).
pub fn g_matrix_dgamma(gamma: &[f64], spec: &KernelSpec, k: usize) -> Result<DMatrix<f64>> {
    let p_b = spec.p_b_for(gamma.len())?;
    check_gamma_index(k, gamma.len())?;
    let mut d = DMatrix::zeros(p_b, p_b);
    match spec.g_param {
        GParam::PaperBivariate => match k {
            0 => d[(0, 0)] = 2.0 * gamma[0],
            1 => {
                d[(0, 1)] = 1.0;
                d[(1, 0)] = 1.0;
            }
            _ => d[(1, 1)] = 2.0 * gamma[2],
        },
        GParam::CholeskyFactor => {
            // ∂(L Lᵀ) = E Lᵀ + L Eᵀ with E the unit matrix at position (i, j).
            let (i, j) = cholesky_position(k, p_b);
            let l = cholesky_factor(gamma, p_b);
            for c in 0..p_b {
                d[(i, c)] += l[(c, j)];
                d[(c, i)] += l[(c, j)];
            }
        }
    }
    Ok(d)
}

/// ∂²G/∂γ_k∂γ_l, `None` when identically zero.
pub fn g_matrix_d2gamma(
    gamma: &[f64],
    spec: &KernelSpec,
    k: usize,
    l: usize,
) -> Result<Option<DMatrix<f64>>> {
    let p_b = spec.p_b_for(gamma.len())?;
    check_gamma_index(k, gamma.len())?;
    check_gamma_index(l, gamma.len())?;
    Ok(match spec.g_param {
        GParam::PaperBivariate => match (k, l) {
            (0, 0) => Some(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])),
            (2, 2) => Some(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0])),
            _ => None,
        },
        GParam::CholeskyFactor => {
            // E_k E_lᵀ + E_l E_kᵀ: nonzero only when both sit in the same column.
            let (ik, jk) = cholesky_position(k, p_b);
            let (il, jl) = cholesky_position(l, p_b);
            if jk != jl {
                None
            } else {
                let mut d = DMatrix::zeros(p_b, p_b);
                d[(ik, il)] += 1.0;
                d[(il, ik)] += 1.0;
                Some(d)
            }
        }
    })
}

/// How many derivative orders [`covariance_derivatives`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivOrder {
    Value,
    First,
    Second,
}

/// Q_i with its first and (optionally) second derivatives.
#[derive(Debug, Clone)]
pub struct CovDerivs {
    pub q: DMatrix<f64>,
    /// ∂Q/∂v_k for k in parameter order; empty for [`DerivOrder::Value`].
    pub dq: Vec<DMatrix<f64>>,
    /// ∂²Q/∂v_j∂v_k packed by [`pair_index`]; `None` entries are zero.
    pub d2q: Vec<Option<DMatrix<f64>>>,
}

/// Packed index of the unordered pair (j, k) among `p` parameters.
pub fn pair_index(j: usize, k: usize, p: usize) -> usize {
    let (a, b) = if j <= k { (j, k) } else { (k, j) };
    a * p - a * (a + 1) / 2 + b
}

struct KernelMatrices {
    h: DMatrix<f64>,
    d_rate: DMatrix<f64>,
    d_tau: DMatrix<f64>,
    d2_rate: DMatrix<f64>,
    d_rate_tau: DMatrix<f64>,
    d2_tau: DMatrix<f64>,
}

fn kernel_matrices(times: &[f64], spec: &KernelSpec, rate: f64, tau: f64, order: DerivOrder) -> KernelMatrices {
    let n = times.len();
    let first = order >= DerivOrder::First;
    let second = order >= DerivOrder::Second;
    let sized = |on: bool| if on { DMatrix::zeros(n, n) } else { DMatrix::zeros(0, 0) };
    let mut km = KernelMatrices {
        h: DMatrix::zeros(n, n),
        d_rate: sized(first),
        d_tau: sized(first),
        d2_rate: sized(second),
        d_rate_tau: sized(second),
        d2_tau: sized(second),
    };
    let decays: Vec<(f64, f64)> = match spec.kind {
        KernelKind::Iou => times.iter().map(|&t| decay(rate, t)).collect(),
        KernelKind::Fbm => Vec::new(),
    };
    for j in 0..n {
        for k in j..n {
            let (s, t) = (times[j], times[k]);
            let e = match spec.kind {
                KernelKind::Iou => {
                    let gap = t - s;
                    // e^{-α(t-s)} as a ratio of precomputed decays when no
                    // cancellation or underflow can occur.
                    let dd = if gap >= 0.0 && rate * gap >= 0.5 && decays[j].0 > 1e-280 {
                        let r = decays[k].0 / decays[j].0;
                        (r, r - 1.0)
                    } else {
                        decay(rate, gap.abs())
                    };
                    iou_entry(rate, tau, s, t, decays[j], decays[k], dd)
                }
                KernelKind::Fbm => fbm_derivs_unchecked(rate, tau, s, t),
            };
            let put = |m: &mut DMatrix<f64>, v: f64| {
                m[(j, k)] = v;
                m[(k, j)] = v;
            };
            put(&mut km.h, e.value);
            if first {
                put(&mut km.d_rate, e.d_rate);
                put(&mut km.d_tau, e.d_tau);
            }
            if second {
                put(&mut km.d2_rate, e.d2_rate);
                put(&mut km.d_rate_tau, e.d_rate_tau);
                put(&mut km.d2_tau, e.d2_tau);
            }
        }
    }
    km
}

/// Builds Q_i(v) and its derivatives in one pass over the time grid.
///
/// Parameters are not range-checked here; assembly is unconditional and
/// positive definiteness is left to the caller's factorization.
pub fn covariance_derivatives(
    subject: &Subject,
    cov: &CovParams,
    spec: &KernelSpec,
    order: DerivOrder,
) -> Result<CovDerivs> {
    let p_gamma = cov.gamma.len();
    let p_b = spec.p_b_for(p_gamma)?;
    if subject.z.ncols() != p_b {
        return Err(Error::Dimension(format!(
            "subject `{}` has {} random-effect columns, G is {p_b}x{p_b}",
            subject.id,
            subject.z.ncols()
        )));
    }
    let n = subject.n_obs();
    let z = &subject.z;
    let zt = z.transpose();
    let km = kernel_matrices(&subject.times, spec, cov.rate, cov.tau, order);

    let g = g_matrix(&cov.gamma, spec)?;
    let mut q = z * &g * &zt + &km.h;
    for i in 0..n {
        q[(i, i)] += cov.sigma2;
    }

    let p_v = p_gamma + 3;
    let mut dq = Vec::new();
    let mut d2q = Vec::new();
    if order >= DerivOrder::First {
        dq.reserve(p_v);
        for k in 0..p_gamma {
            dq.push(z * g_matrix_dgamma(&cov.gamma, spec, k)? * &zt);
        }
        dq.push(km.d_rate.clone());
        dq.push(km.d_tau.clone());
        dq.push(DMatrix::identity(n, n));
    }
    if order >= DerivOrder::Second {
        d2q = vec![None; p_v * (p_v + 1) / 2];
        for k in 0..p_gamma {
            for l in k..p_gamma {
                if let Some(d) = g_matrix_d2gamma(&cov.gamma, spec, k, l)? {
                    d2q[pair_index(k, l, p_v)] = Some(z * d * &zt);
                }
            }
        }
        let (ir, it) = (p_gamma, p_gamma + 1);
        d2q[pair_index(ir, ir, p_v)] = Some(km.d2_rate);
        d2q[pair_index(ir, it, p_v)] = Some(km.d_rate_tau);
        d2q[pair_index(it, it, p_v)] = Some(km.d2_tau);
    }
    Ok(CovDerivs { q, dq, d2q })
}

/// Q_i(v) = Z G(γ) Zᵀ + H + σ² I.
pub fn assemble_q(subject: &Subject, cov: &CovParams, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    covariance_derivatives(subject, cov, spec, DerivOrder::Value).map(|c| c.q)
}

/// ∂Q_i/∂v_k with k indexing `(γ.., α|H, τ, σ²)`.
pub fn assemble_q_dv(
    subject: &Subject,
    cov: &CovParams,
    spec: &KernelSpec,
    component: usize,
) -> Result<DMatrix<f64>> {
    if component >= cov.len() {
        return Err(Error::Dimension(format!(
            "covariance component {component} out of range for {} parameters",
            cov.len()
        )));
    }
    let mut c = covariance_derivatives(subject, cov, spec, DerivOrder::First)?;
    Ok(c.dq.swap_remove(component))
}

/// ∂²Q_i/∂v_j∂v_k as a dense matrix (zero matrix when identically zero).
pub fn assemble_q_d2v(
    subject: &Subject,
    cov: &CovParams,
    spec: &KernelSpec,
    j: usize,
    k: usize,
) -> Result<DMatrix<f64>> {
    let p_v = cov.len();
    if j >= p_v || k >= p_v {
        return Err(Error::Dimension("covariance component out of range".into()));
    }
    let n = subject.n_obs();
    let mut c = covariance_derivatives(subject, cov, spec, DerivOrder::Second)?;
    Ok(c.d2q
        .swap_remove(pair_index(j, k, p_v))
        .unwrap_or_else(|| DMatrix::zeros(n, n)))
}
