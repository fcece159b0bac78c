//! Closed-form SINR and spectral-efficiency expressions for the private
//! and common streams, for coherent and non-coherent transmission, with
//! delay-phase-aware (DU) and delay-phase-unaware (DF) MR precoding.
//!
//! DU and DF share one implementation: every trace term carrying UE `i`'s
//! precoder at AP `l` is multiplied by `phi_il`, which is 1 for DU and
//! `conj(theta_il)` for DF. With unit delay phases the two paths therefore
//! perform identical floating-point operations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::EstimationStatistics;
use crate::linalg::C64;
use crate::model::{NetworkModel, PhaseStatistics, SystemConfig};
use crate::scenario::{config_hash, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivateScheme {
    DuMr,
    DfMr,
    /// Local MMSE with delay phases; only available in the Monte Carlo oracle.
    DuMmse,
}

impl PrivateScheme {
    pub fn tag(self) -> &'static str {
        match self {
            Self::DuMr => "du_mr",
            Self::DfMr => "df_mr",
            Self::DuMmse => "du_mmse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transmission {
    Coherent,
    #[serde(rename = "noncoherent", alias = "non_coherent")]
    NonCoherent,
}

impl Transmission {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Coherent => "coherent",
            Self::NonCoherent => "noncoherent",
        }
    }
}

/// How the private precoders are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrivateNormalization {
    /// `mu_l = 1 / sum_i tr(Q_il)` for every UE.
    #[default]
    Uniform,
    /// Statistical channel-inversion power control with exponent `alpha`.
    PowerControl { alpha: f64 },
}

/// Full description of how the downlink is precoded.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingPlan {
    pub private_scheme: PrivateScheme,
    pub transmission: Transmission,
    /// Fraction of the AP power given to the common stream.
    pub rho: f64,
    /// Common weights `a[(i, l)] >= 0`.
    pub common_weights: DMatrix<f64>,
    /// Private normalisation `mu[(k, l)]`.
    pub mu: DMatrix<f64>,
    /// Common normalisation per AP.
    pub eta: Vec<f64>,
}

impl PrecodingPlan {
    /// Plan with analytical normalisations. The common normalisation is
    /// left at 1 when `rho == 0`.
    pub fn new(
        scenario: &Scenario,
        private_scheme: PrivateScheme,
        transmission: Transmission,
        rho: f64,
        common_weights: DMatrix<f64>,
        normalization: PrivateNormalization,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
        }
        let (kk, ll) = (scenario.stats.num_ues, scenario.stats.num_aps);
        if common_weights.shape() != (kk, ll) {
            return Err(Error::Dimension(format!("common weights must be {kk}x{ll}")));
        }
        if common_weights.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::InvalidConfig("common weights must be non-negative".into()));
        }
        if private_scheme == PrivateScheme::DuMmse {
            return Err(Error::Unsupported(
                "DU-MMSE normalisations have no closed form; build the plan with the Monte Carlo module".into(),
            ));
        }
        let mu = match normalization {
            PrivateNormalization::Uniform => {
                let m = private_normalization(&scenario.stats)?;
                DMatrix::from_fn(kk, ll, |_, l| m[l])
            }
            PrivateNormalization::PowerControl { alpha } => {
                power_control_coefficients(&scenario.stats, &scenario.net, alpha)?
            }
        };
        let eta = if rho > 0.0 {
            common_normalization(&scenario.stats, &scenario.net, private_scheme, &common_weights)?
        } else {
            vec![1.0; ll]
        };
        Ok(Self { private_scheme, transmission, rho, common_weights, mu, eta })
    }

    /// Simple common weights `a = 1` and uniform private normalisation.
    pub fn simple(scenario: &Scenario, scheme: PrivateScheme, transmission: Transmission, rho: f64) -> Result<Self> {
        let (kk, ll) = (scenario.stats.num_ues, scenario.stats.num_aps);
        Self::new(scenario, scheme, transmission, rho, DMatrix::from_element(kk, ll, 1.0), PrivateNormalization::Uniform)
    }

    /// Same plan with a different power split.
    pub fn with_rho(&self, scenario: &Scenario, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
        }
        let mut out = self.clone();
        if self.rho == 0.0 && rho > 0.0 && self.private_scheme != PrivateScheme::DuMmse {
            out.eta = common_normalization(&scenario.stats, &scenario.net, self.private_scheme, &self.common_weights)?;
        }
        out.rho = rho;
        Ok(out)
    }

    pub fn p_dc(&self, config: &SystemConfig) -> f64 {
        self.rho * config.downlink_power
    }

    pub fn p_dp(&self, config: &SystemConfig) -> f64 {
        (1.0 - self.rho) * config.downlink_power
    }
}

/// Phase factor applied to UE `i`'s precoder at AP `l`.
pub fn precoder_phase(scheme: PrivateScheme, net: &NetworkModel, i: usize, l: usize) -> C64 {
    match scheme {
        PrivateScheme::DfMr => net.theta(i, l).conj(),
        PrivateScheme::DuMr | PrivateScheme::DuMmse => C64::new(1.0, 0.0),
    }
}

/// `mu_l = 1 / sum_i tr(Q_il)`.
pub fn private_normalization(stats: &EstimationStatistics) -> Result<Vec<f64>> {
    (0..stats.num_aps)
        .map(|l| {
            let s: f64 = (0..stats.num_ues).map(|i| stats.tr_q[(i, l)]).sum();
            if s > 0.0 {
                Ok(1.0 / s)
            } else {
                Err(Error::Degenerate(format!("all estimates vanish at AP {l}")))
            }
        })
        .collect()
}

/// Common normalisation `eta_l` making `E ||v_c,l||^2 = 1` for the given
/// weights and private scheme.
pub fn common_normalization(
    stats: &EstimationStatistics,
    net: &NetworkModel,
    scheme: PrivateScheme,
    weights: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    (0..stats.num_aps)
        .map(|l| {
            let mut s = 0.0;
            for k in 0..stats.num_ues {
                let pk = precoder_phase(scheme, net, k, l).conj();
                for &i in &stats.pilots.groups[k] {
                    let pi = precoder_phase(scheme, net, i, l);
                    s += weights[(k, l)] * weights[(i, l)] * (pk * pi).re * stats.tr_qbar(k, i, l);
                }
            }
            if s > 0.0 {
                Ok(1.0 / s)
            } else {
                Err(Error::Degenerate(format!("common precoder at AP {l} has non-positive power {s}")))
            }
        })
        .collect()
}

/// Power-control coefficients `mu_kl = bbar_k^alpha / sum_i tr(Q_il) bbar_i^alpha`
/// with `bbar_k` the AP-averaged large-scale gain.
pub fn power_control_coefficients(stats: &EstimationStatistics, net: &NetworkModel, alpha: f64) -> Result<DMatrix<f64>> {
    let (kk, ll) = (stats.num_ues, stats.num_aps);
    let mut w = Vec::with_capacity(kk);
    for k in 0..kk {
        let bbar = net.beta.row(k).sum() / ll as f64;
        if !(bbar > 0.0) {
            return Err(Error::Degenerate(format!("UE {k} has zero average large-scale gain")));
        }
        w.push(bbar.powf(alpha));
    }
    let mut mu = DMatrix::zeros(kk, ll);
    for l in 0..ll {
        let denom: f64 = (0..kk).map(|i| stats.tr_q[(i, l)] * w[i]).sum();
        if !(denom > 0.0) {
            return Err(Error::Degenerate(format!("all estimates vanish at AP {l}")));
        }
        for k in 0..kk {
            mu[(k, l)] = w[k] / denom;
        }
    }
    Ok(mu)
}

/// Per-UE quantities that do not depend on the instant `n`.
#[derive(Debug, Clone, Copy, Default)]
struct UeTerms {
    /// `|sum_l phi_kl sqrt(mu_kl) tr Q_kl|^2`.
    a_abs2: f64,
    /// `sum_l mu_kl |tr Q_kl|^2`.
    a_nc: f64,
    /// `sum_i sum_l mu_il tr(Q_il R_kl)`.
    x1: f64,
    /// `sum_{i in P_k} sum_l mu_il |tr Q̄_kil|^2`.
    x2: f64,
    /// `sum_{i in P_k} |sum_l phi_il sqrt(mu_il) tr Q̄_kil|^2`.
    x3: f64,
    /// `|sum_l sqrt(eta_l) sum_{i in P_k} a_il phi_il tr Q̄_kil|^2`.
    b_abs2: f64,
    /// `sum_l eta_l |sum_{i in P_k} a_il phi_il tr Q̄_kil|^2`.
    g1: f64,
    /// `sum_l eta_l sum_i sum_{j in P_i} a_il a_jl conj(phi_il) phi_jl tr(Q̄_ijl R_kl)`.
    g2: f64,
}

/// Precomputed closed-form terms for one scenario and plan; evaluating an
/// instant is then O(K).
#[derive(Debug, Clone)]
pub struct ClosedForm {
    terms: Vec<UeTerms>,
    phases: PhaseStatistics,
    lambda: usize,
    tau_c: usize,
    p_dc: f64,
    p_dp: f64,
    noise: f64,
    transmission: Transmission,
}

impl ClosedForm {
    pub fn new(scenario: &Scenario, plan: &PrecodingPlan) -> Result<Self> {
        if plan.private_scheme == PrivateScheme::DuMmse {
            return Err(Error::Unsupported("no closed form exists for DU-MMSE precoding".into()));
        }
        let stats = &scenario.stats;
        let net = &scenario.net;
        let (kk, ll) = (stats.num_ues, stats.num_aps);
        if plan.mu.shape() != (kk, ll) || plan.eta.len() != ll || plan.common_weights.shape() != (kk, ll) {
            return Err(Error::Dimension("plan does not match the scenario".into()));
        }
        let phi = DMatrix::from_fn(kk, ll, |i, l| precoder_phase(plan.private_scheme, net, i, l));
        let sqrt_mu = plan.mu.map(f64::sqrt);
        let a = &plan.common_weights;
        let groups = &stats.pilots.groups;
        let zero = C64::new(0.0, 0.0);

        let terms = (0..kk)
            .map(|k| {
                let mut t = UeTerms::default();
                let mut a_sum = zero;
                for l in 0..ll {
                    let tq = stats.tr_q[(k, l)];
                    a_sum += phi[(k, l)] * sqrt_mu[(k, l)] * tq;
                    t.a_nc += plan.mu[(k, l)] * tq * tq;
                }
                t.a_abs2 = a_sum.norm_sqr();
                for i in 0..kk {
                    for l in 0..ll {
                        t.x1 += plan.mu[(i, l)] * stats.tr_qr(i, k, l);
                    }
                }
                for &i in &groups[k] {
                    let mut s = zero;
                    for l in 0..ll {
                        let tqb = stats.tr_qbar(k, i, l);
                        t.x2 += plan.mu[(i, l)] * tqb * tqb;
                        s += phi[(i, l)] * sqrt_mu[(i, l)] * tqb;
                    }
                    t.x3 += s.norm_sqr();
                }
                let mut b_sum = zero;
                for l in 0..ll {
                    let mut c = zero;
                    for &i in &groups[k] {
                        c += phi[(i, l)] * a[(i, l)] * stats.tr_qbar(k, i, l);
                    }
                    b_sum += c * plan.eta[l].sqrt();
                    t.g1 += plan.eta[l] * c.norm_sqr();
                    let mut g = zero;
                    for i in 0..kk {
                        for &j in &groups[i] {
                            g += phi[(i, l)].conj() * phi[(j, l)] * (a[(i, l)] * a[(j, l)]) * stats.tr_qbar_r(i, j, k, l);
                        }
                    }
                    t.g2 += plan.eta[l] * g.re;
                }
                t.b_abs2 = b_sum.norm_sqr();
                t
            })
            .collect();

        let config = &scenario.config;
        Ok(Self {
            terms,
            phases: scenario.phases,
            lambda: config.lambda(),
            tau_c: config.tau_c,
            p_dc: plan.p_dc(config),
            p_dp: plan.p_dp(config),
            noise: config.noise_dl,
            transmission: plan.transmission,
        })
    }

    fn etas(&self, n: usize) -> Result<(f64, f64)> {
        if n < self.lambda || n > self.tau_c {
            return Err(Error::InstantOutOfRange { n, lambda: self.lambda, tau_c: self.tau_c });
        }
        Ok((self.phases.eta_ap(n, self.lambda), self.phases.eta_ue(n, self.lambda)))
    }

    fn xi(&self, t: &UeTerms, e_ap: f64) -> f64 {
        match self.transmission {
            Transmission::Coherent => t.x1 + (1.0 - e_ap) * t.x2 + e_ap * t.x3,
            Transmission::NonCoherent => t.x1 + t.x2,
        }
    }

    /// Private-stream interference power `Xi_k` (per unit private power)
    /// seen by every UE at instant `n`.
    pub fn private_interference(&self, n: usize) -> Result<Vec<f64>> {
        let (e_ap, _) = self.etas(n)?;
        Ok(self.terms.iter().map(|t| self.xi(t, e_ap)).collect())
    }

    /// Private-stream SINR of every UE at instant `n`, after the common
    /// stream has been removed.
    pub fn private_sinr(&self, n: usize) -> Result<Vec<f64>> {
        let (e_ap, e_ue) = self.etas(n)?;
        Ok(self
            .terms
            .iter()
            .map(|t| {
                let a = match self.transmission {
                    Transmission::Coherent => t.a_abs2,
                    Transmission::NonCoherent => t.a_nc,
                };
                let num = e_ap * e_ue * self.p_dp * a;
                num / (self.p_dp * self.xi(t, e_ap) - num + self.noise)
            })
            .collect())
    }

    /// Common-stream SINR of every UE at instant `n`, with all private
    /// streams treated as noise. Zero when no power goes to the common
    /// stream.
    pub fn common_sinr(&self, n: usize) -> Result<Vec<f64>> {
        let (e_ap, e_ue) = self.etas(n)?;
        if self.p_dc == 0.0 {
            return Ok(vec![0.0; self.terms.len()]);
        }
        Ok(self
            .terms
            .iter()
            .map(|t| {
                let (num, gamma) = match self.transmission {
                    Transmission::Coherent => (
                        e_ap * e_ue * t.b_abs2,
                        (1.0 - e_ap) * t.g1 + t.g2 + e_ap * (1.0 - e_ue) * t.b_abs2,
                    ),
                    Transmission::NonCoherent => (e_ap * e_ue * t.g1, t.g2 + (1.0 - e_ap * e_ue) * t.g1),
                };
                self.p_dc * num / (self.p_dc * gamma + self.p_dp * self.xi(t, e_ap) + self.noise)
            })
            .collect())
    }

    /// SINR matrices over the whole data phase, `[k][n - lambda]`.
    pub fn sinr_block(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let kk = self.terms.len();
        let mut private = vec![Vec::with_capacity(self.tau_c + 1 - self.lambda); kk];
        let mut common = private.clone();
        for n in self.lambda..=self.tau_c {
            for (k, v) in self.private_sinr(n)?.into_iter().enumerate() {
                private[k].push(v);
            }
            for (k, v) in self.common_sinr(n)?.into_iter().enumerate() {
                common[k].push(v);
            }
        }
        Ok((private, common))
    }
}

pub fn private_sinr_coherent(scenario: &Scenario, plan: &PrecodingPlan, n: usize) -> Result<Vec<f64>> {
    let plan = PrecodingPlan { transmission: Transmission::Coherent, ..plan.clone() };
    ClosedForm::new(scenario, &plan)?.private_sinr(n)
}

/// Non-coherent private SINR; the DU path is used for both MR schemes since
/// the expression is identical.
pub fn private_sinr_noncoherent(scenario: &Scenario, plan: &PrecodingPlan, n: usize) -> Result<Vec<f64>> {
    let scheme = match plan.private_scheme {
        PrivateScheme::DfMr => PrivateScheme::DuMr,
        s => s,
    };
    let plan = PrecodingPlan { transmission: Transmission::NonCoherent, private_scheme: scheme, ..plan.clone() };
    ClosedForm::new(scenario, &plan)?.private_sinr(n)
}

pub fn common_sinr_coherent(scenario: &Scenario, plan: &PrecodingPlan, n: usize) -> Result<Vec<f64>> {
    let plan = PrecodingPlan { transmission: Transmission::Coherent, ..plan.clone() };
    ClosedForm::new(scenario, &plan)?.common_sinr(n)
}

pub fn common_sinr_noncoherent(scenario: &Scenario, plan: &PrecodingPlan, n: usize) -> Result<Vec<f64>> {
    let plan = PrecodingPlan { transmission: Transmission::NonCoherent, ..plan.clone() };
    ClosedForm::new(scenario, &plan)?.common_sinr(n)
}

/// `(1 / tau_c) sum_{n = lambda}^{tau_c} log2(1 + sinr[n])`.
pub fn se_from_sinr(sinr: &[f64], tau_c: usize, lambda: usize) -> Result<f64> {
    let expected = tau_c + 1 - lambda;
    if sinr.len() != expected {
        return Err(Error::Dimension(format!("expected {expected} SINR values, got {}", sinr.len())));
    }
    let mut acc = 0.0;
    for (index, &v) in sinr.iter().enumerate() {
        if !(v >= 0.0) {
            return Err(Error::NegativeSinr { index, value: v });
        }
        acc += v.ln_1p();
    }
    Ok(acc / std::f64::consts::LN_2 / tau_c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub private_scheme: PrivateScheme,
    pub transmission: Transmission,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeReport {
    /// `[k][n - lambda]`.
    pub sinr_private: Vec<Vec<f64>>,
    pub sinr_common: Vec<Vec<f64>>,
    pub se_private: Vec<f64>,
    pub se_common_per_ue: Vec<f64>,
    /// Minimum over UEs of the common SE.
    pub se_common: f64,
    pub sum_se: f64,
    pub metadata: ReportMetadata,
}

/// Assembles a report from per-instant SINRs.
pub fn sum_se(
    sinr_private: Vec<Vec<f64>>,
    sinr_common: Vec<Vec<f64>>,
    tau_c: usize,
    lambda: usize,
    metadata: ReportMetadata,
) -> Result<SeReport> {
    let se_private = sinr_private.iter().map(|s| se_from_sinr(s, tau_c, lambda)).collect::<Result<Vec<_>>>()?;
    let se_common_per_ue = sinr_common.iter().map(|s| se_from_sinr(s, tau_c, lambda)).collect::<Result<Vec<_>>>()?;
    let se_common = se_common_per_ue.iter().copied().fold(f64::INFINITY, f64::min);
    let se_common = if se_common.is_finite() { se_common } else { 0.0 };
    let sum_se = se_common + se_private.iter().sum::<f64>();
    Ok(SeReport { sinr_private, sinr_common, se_private, se_common_per_ue, se_common, sum_se, metadata })
}

/// Closed-form SE report of a plan over the whole block.
pub fn evaluate(scenario: &Scenario, plan: &PrecodingPlan) -> Result<SeReport> {
    let cf = ClosedForm::new(scenario, plan)?;
    let (p, c) = cf.sinr_block()?;
    let metadata = ReportMetadata {
        seed: scenario.config.seed,
        config_hash: config_hash(&scenario.config),
        private_scheme: plan.private_scheme,
        transmission: plan.transmission,
        rho: plan.rho,
    };
    sum_se(p, c, scenario.config.tau_c, scenario.lambda(), metadata)
}

/// Sum SE only, skipping the report bookkeeping.
pub fn sum_se_value(scenario: &Scenario, plan: &PrecodingPlan) -> Result<f64> {
    let cf = ClosedForm::new(scenario, plan)?;
    let (p, c) = cf.sinr_block()?;
    let (tau_c, lambda) = (scenario.config.tau_c, scenario.lambda());
    let mut total = 0.0;
    let mut common = f64::INFINITY;
    for k in 0..p.len() {
        total += se_from_sinr(&p[k], tau_c, lambda)?;
        common = common.min(se_from_sinr(&c[k], tau_c, lambda)?);
    }
    Ok(total + if common.is_finite() { common } else { 0.0 })
}

/// Result of [`asymptotic_monotonicity_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub decreasing_in_ap: bool,
    pub decreasing_in_ue: bool,
    /// Smallest relative drop between consecutive grid points (AP, UE).
    pub min_drop_ap: f64,
    pub min_drop_ue: f64,
    /// Sum SE with (small AP, large UE) and (large AP, small UE) variances.
    pub sse_ue_heavy: f64,
    pub sse_ap_heavy: f64,
    pub swap_margin: f64,
    pub passed: bool,
}

/// Checks on coherent DU-MR closed forms that the SE drops with either
/// oscillator variance and that UE-side drift hurts more than AP-side drift.
pub fn asymptotic_monotonicity_check(scenario: &Scenario, grid: &[f64], small: f64, large: f64) -> Result<MonotonicityReport> {
    let sse = |ap: f64, ue: f64| -> Result<f64> {
        let s = scenario.with_phases(PhaseStatistics::new(ap, ue)?)?;
        let plan = PrecodingPlan::simple(&s, PrivateScheme::DuMr, Transmission::Coherent, 0.0)?;
        sum_se_value(&s, &plan)
    };
    let sweep = |ap_axis: bool| -> Result<(bool, f64)> {
        let values = grid
            .iter()
            .map(|&v| if ap_axis { sse(v, small) } else { sse(small, v) })
            .collect::<Result<Vec<_>>>()?;
        let mut ok = true;
        let mut min_drop = f64::INFINITY;
        for w in values.windows(2) {
            let drop = (w[0] - w[1]) / w[0];
            ok &= w[1] < w[0];
            min_drop = min_drop.min(drop);
        }
        Ok((ok, min_drop))
    };
    let (decreasing_in_ap, min_drop_ap) = sweep(true)?;
    let (decreasing_in_ue, min_drop_ue) = sweep(false)?;
    let sse_ue_heavy = sse(small, large)?;
    let sse_ap_heavy = sse(large, small)?;
    let swap_margin = (sse_ap_heavy - sse_ue_heavy) / sse_ap_heavy;
    Ok(MonotonicityReport {
        decreasing_in_ap,
        decreasing_in_ue,
        min_drop_ap,
        min_drop_ue,
        sse_ue_heavy,
        sse_ap_heavy,
        swap_margin,
        passed: decreasing_in_ap && decreasing_in_ue && swap_margin > 0.0,
    })
}
