//! Sampling oracle for the closed forms.
//!
//! Realizations are generated lazily: realization `r` of a batch is a pure
//! function of `(seed, r)`, drawn from its own ChaCha stream. Term
//! accumulation splits the batch into a fixed number of contiguous groups,
//! processes groups in parallel, and reduces them in group order, so every
//! output is bit-identical regardless of thread count. The same groups
//! drive jackknife standard errors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_form::{sum_se, PrecodingPlan, PrivateScheme, ReportMetadata, SeReport, Transmission};
use crate::error::{Error, Result};
use crate::estimation::mmse_estimate_realization;
use crate::linalg::{hpd_inverse, psd_sqrt, CMatrix, CVector, C64};
use crate::scenario::{config_hash, Scenario};

/// Smallest batch for which term statistics are reported.
pub const MIN_REALIZATIONS: usize = 100;

/// Number of accumulation groups (also the jackknife resolution).
pub const GROUPS: usize = 40;

/// One channel, phase and pilot-noise draw.
#[derive(Debug, Clone)]
pub struct Realization {
    /// `h[k * L + l]`.
    pub h: Vec<CVector>,
    /// Instants at which oscillator phases were sampled, ascending.
    pub phase_instants: Vec<usize>,
    /// `ap_phase[l][j]` is AP `l`'s phase at `phase_instants[j]`.
    pub ap_phase: Vec<Vec<f64>>,
    pub ue_phase: Vec<Vec<f64>>,
    /// Received pilot signal `z[(t - 1) * L + l]` at AP `l`, instant `t`.
    pub pilot_obs: Vec<CVector>,
    /// MMSE estimates `h_hat[k * L + l]` at the reference instant.
    pub h_hat: Vec<CVector>,
}

impl Realization {
    fn phase_index(&self, t: usize) -> usize {
        self.phase_instants.binary_search(&t).expect("phase sampled at requested instant")
    }

    /// Combined oscillator rotation `exp(j(phi_k[t] + phi_l[t]))`.
    pub fn vartheta(&self, k: usize, l: usize, t: usize) -> C64 {
        let j = self.phase_index(t);
        C64::from_polar(1.0, self.ue_phase[k][j] + self.ap_phase[l][j])
    }
}

/// Lazily evaluated batch of i.i.d. realizations.
#[derive(Debug, Clone)]
pub struct RealizationBatch<'a> {
    scenario: &'a Scenario,
    pub count: usize,
    pub seed: u64,
    sqrt_r: Vec<CMatrix>,
    phase_instants: Vec<usize>,
}

fn complex_normal<R: Rng>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn complex_normal_vector<R: Rng>(rng: &mut R, n: usize, std: f64) -> CVector {
    CVector::from_fn(n, |_, _| complex_normal(rng) * std)
}

/// Builds a batch. Oscillator phases are sampled at every pilot instant
/// and at each entry of `instants`.
pub fn sample_batch<'a>(scenario: &'a Scenario, count: usize, seed: u64, instants: &[usize]) -> Result<RealizationBatch<'a>> {
    if count == 0 {
        return Err(Error::TooFewRealizations(0));
    }
    let cfg = &scenario.config;
    for &n in instants {
        if n < cfg.lambda() || n > cfg.tau_c {
            return Err(Error::InstantOutOfRange { n, lambda: cfg.lambda(), tau_c: cfg.tau_c });
        }
    }
    let (kk, ll) = (scenario.net.num_ues(), scenario.net.num_aps());
    let sqrt_r = (0..kk * ll)
        .map(|idx| psd_sqrt(scenario.net.r(idx / ll, idx % ll), "R"))
        .collect::<Result<Vec<_>>>()?;
    let mut phase_instants: Vec<usize> = (1..=cfg.tau_p).chain(instants.iter().copied()).collect();
    phase_instants.sort_unstable();
    phase_instants.dedup();
    Ok(RealizationBatch { scenario, count, seed, sqrt_r, phase_instants })
}

impl RealizationBatch<'_> {
    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    /// Realization `index`, reproducible from `(seed, index)` alone.
    pub fn realization(&self, index: usize) -> Realization {
        let s = self.scenario;
        let (kk, ll, n) = (s.net.num_ues(), s.net.num_aps(), s.net.antennas());
        let cfg = &s.config;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);

        let h: Vec<CVector> = (0..kk * ll)
            .map(|idx| &self.sqrt_r[idx] * complex_normal_vector(&mut rng, n, 1.0))
            .collect();

        let wiener = |var: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut prev = 0usize;
            let mut phase = 0.0;
            self.phase_instants
                .iter()
                .map(|&t| {
                    let z: f64 = rng.sample(StandardNormal);
                    phase += (var * (t - prev) as f64).sqrt() * z;
                    prev = t;
                    phase
                })
                .collect()
        };
        let ap_phase: Vec<Vec<f64>> = (0..ll).map(|_| wiener(s.phases.var_ap, &mut rng)).collect();
        let ue_phase: Vec<Vec<f64>> = (0..kk).map(|_| wiener(s.phases.var_ue, &mut rng)).collect();

        let mut real = Realization {
            h,
            phase_instants: self.phase_instants.clone(),
            ap_phase,
            ue_phase,
            pilot_obs: Vec::with_capacity(cfg.tau_p * ll),
            h_hat: Vec::with_capacity(kk * ll),
        };
        let noise_std = cfg.noise_ul.sqrt();
        for t in 1..=cfg.tau_p {
            for l in 0..ll {
                let mut z = complex_normal_vector(&mut rng, n, noise_std);
                for i in (0..kk).filter(|&i| s.pilots.t[i] == t) {
                    let coef = s.net.theta(i, l) * real.vartheta(i, l, t) * cfg.pilot_power[i].sqrt();
                    z.axpy(coef, &real.h[i * ll + l], C64::new(1.0, 0.0));
                }
                real.pilot_obs.push(z);
            }
        }
        for k in 0..kk {
            for l in 0..ll {
                let z = &real.pilot_obs[(s.pilots.t[k] - 1) * ll + l];
                let est = mmse_estimate_realization(z, k, l, &s.stats, &s.net).expect("dimensions match");
                real.h_hat.push(est);
            }
        }
        real
    }
}

/// Unnormalised private precoders `v[k * L + l]` for one realization.
pub fn private_precoders(real: &Realization, scenario: &Scenario, scheme: PrivateScheme, p_dp: f64) -> Result<Vec<CVector>> {
    let (kk, ll) = (scenario.net.num_ues(), scenario.net.num_aps());
    match scheme {
        PrivateScheme::DuMr => Ok((0..kk * ll)
            .map(|idx| &real.h_hat[idx] * scenario.net.theta(idx / ll, idx % ll))
            .collect()),
        PrivateScheme::DfMr => Ok(real.h_hat.clone()),
        PrivateScheme::DuMmse => dummse_precoder(real, scenario, p_dp),
    }
}

/// Local DU-MMSE precoders. `p_dp` only shapes the regularisation; when it
/// is zero the full downlink power is used instead.
pub fn dummse_precoder(real: &Realization, scenario: &Scenario, p_dp: f64) -> Result<Vec<CVector>> {
    let (kk, ll, n) = (scenario.net.num_ues(), scenario.net.num_aps(), scenario.net.antennas());
    let p = if p_dp > 0.0 { p_dp } else { scenario.config.downlink_power };
    let pc = C64::new(p, 0.0);
    let mut out = vec![CVector::zeros(n); kk * ll];
    for l in 0..ll {
        let mut a = CMatrix::from_diagonal_element(n, n, C64::new(scenario.config.noise_dl, 0.0));
        for i in 0..kk {
            let hh = &real.h_hat[i * ll + l];
            a += (hh * hh.adjoint() + scenario.stats.error_covariance(&scenario.net, i, l)) * pc;
        }
        let inv = hpd_inverse(&a, "DU-MMSE regularised matrix")?;
        for k in 0..kk {
            out[k * ll + l] = &inv * &real.h_hat[k * ll + l] * (scenario.net.theta(k, l) * pc);
        }
    }
    Ok(out)
}

/// Additive accumulators for one group of realizations.
#[derive(Debug, Clone)]
struct TermSums {
    count: f64,
    /// Per instant: `E{u_kkl}` with `u_kil = sqrt(mu_il) g_kl^H v_il`.
    ds_p: Vec<Vec<C64>>,
    /// Per instant: `E|sum_l u_kil|^2`, `[k * K + i]`.
    int_p_co: Vec<Vec<f64>>,
    /// Per instant: `E|u_kil|^2`, `[(k * K + i) * L + l]`.
    int_p_ap: Vec<Vec<f64>>,
    /// Per instant: `E{c_kl}` with `c_kl = sqrt(eta_l) g_kl^H v_c,l`.
    ds_c: Vec<Vec<C64>>,
    /// Per instant: `E|sum_l c_kl|^2`.
    int_c_co: Vec<Vec<f64>>,
    /// Per instant: `E|c_kl|^2`.
    int_c_ap: Vec<Vec<f64>>,
    /// Per AP: normalised transmit power and its square.
    power: Vec<f64>,
    power_sq: Vec<f64>,
    /// Per AP: `sum_i ||v_il||^2` and `||v_c,l||^2` before normalisation.
    vnorm_p: Vec<f64>,
    vnorm_c: Vec<f64>,
}

impl TermSums {
    fn zeros(instants: usize, kk: usize, ll: usize) -> Self {
        let c = |len: usize| vec![vec![C64::new(0.0, 0.0); len]; instants];
        let r = |len: usize| vec![vec![0.0; len]; instants];
        Self {
            count: 0.0,
            ds_p: c(kk * ll),
            int_p_co: r(kk * kk),
            int_p_ap: r(kk * kk * ll),
            ds_c: c(kk * ll),
            int_c_co: r(kk),
            int_c_ap: r(kk * ll),
            power: vec![0.0; ll],
            power_sq: vec![0.0; ll],
            vnorm_p: vec![0.0; ll],
            vnorm_c: vec![0.0; ll],
        }
    }

    fn combine(&mut self, other: &Self, sign: f64) {
        fn add_c(a: &mut [Vec<C64>], b: &[Vec<C64>], s: f64) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.iter_mut().zip(y).for_each(|(p, q)| *p += q * s));
        }
        fn add_r(a: &mut [Vec<f64>], b: &[Vec<f64>], s: f64) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.iter_mut().zip(y).for_each(|(p, q)| *p += q * s));
        }
        fn add_v(a: &mut [f64], b: &[f64], s: f64) {
            a.iter_mut().zip(b).for_each(|(p, q)| *p += q * s);
        }
        self.count += other.count * sign;
        add_c(&mut self.ds_p, &other.ds_p, sign);
        add_r(&mut self.int_p_co, &other.int_p_co, sign);
        add_r(&mut self.int_p_ap, &other.int_p_ap, sign);
        add_c(&mut self.ds_c, &other.ds_c, sign);
        add_r(&mut self.int_c_co, &other.int_c_co, sign);
        add_r(&mut self.int_c_ap, &other.int_c_ap, sign);
        add_v(&mut self.power, &other.power, sign);
        add_v(&mut self.power_sq, &other.power_sq, sign);
        add_v(&mut self.vnorm_p, &other.vnorm_p, sign);
        add_v(&mut self.vnorm_c, &other.vnorm_c, sign);
    }
}

struct Accumulator<'a> {
    scenario: &'a Scenario,
    plan: &'a PrecodingPlan,
    instants: &'a [usize],
    p_dc: f64,
    p_dp: f64,
    sqrt_mu: DMatrix<f64>,
    sqrt_eta: Vec<f64>,
}

impl Accumulator<'_> {
    fn add(&self, sums: &mut TermSums, real: &Realization) -> Result<()> {
        let s = self.scenario;
        let (kk, ll) = (s.net.num_ues(), s.net.num_aps());
        let a = &self.plan.common_weights;
        let v = private_precoders(real, s, self.plan.private_scheme, self.p_dp)?;
        let zero = C64::new(0.0, 0.0);

        // base[(k * K + i) * L + l] = conj(theta_kl) h_kl^H v_il
        let mut base = vec![zero; kk * kk * ll];
        for k in 0..kk {
            for l in 0..ll {
                let h = &real.h[k * ll + l];
                let th = s.net.theta(k, l).conj();
                for i in 0..kk {
                    base[(k * kk + i) * ll + l] = th * h.dotc(&v[i * ll + l]);
                }
            }
        }

        for l in 0..ll {
            let mut vp = 0.0;
            let mut vp_norm = 0.0;
            let mut vc = CVector::zeros(s.net.antennas());
            for i in 0..kk {
                let e = v[i * ll + l].norm_squared();
                vp += self.plan.mu[(i, l)] * e;
                vp_norm += e;
                vc.axpy(C64::new(a[(i, l)], 0.0), &v[i * ll + l], C64::new(1.0, 0.0));
            }
            let vc_norm = vc.norm_squared();
            let pw = self.p_dc * self.plan.eta[l] * vc_norm + self.p_dp * vp;
            sums.power[l] += pw;
            sums.power_sq[l] += pw * pw;
            sums.vnorm_p[l] += vp_norm;
            sums.vnorm_c[l] += vc_norm;
        }

        let mut u = vec![zero; ll];
        for (j, &n) in self.instants.iter().enumerate() {
            for k in 0..kk {
                let rot: Vec<C64> = (0..ll).map(|l| real.vartheta(k, l, n).conj()).collect();
                let mut c_sum = zero;
                let mut c = vec![zero; ll];
                for i in 0..kk {
                    let mut u_sum = zero;
                    for l in 0..ll {
                        let b = rot[l] * base[(k * kk + i) * ll + l];
                        u[l] = b * self.sqrt_mu[(i, l)];
                        u_sum += u[l];
                        sums.int_p_ap[j][(k * kk + i) * ll + l] += u[l].norm_sqr();
                        c[l] += b * (a[(i, l)] * self.sqrt_eta[l]);
                    }
                    sums.int_p_co[j][k * kk + i] += u_sum.norm_sqr();
                    if i == k {
                        for l in 0..ll {
                            sums.ds_p[j][k * ll + l] += u[l];
                        }
                    }
                }
                for l in 0..ll {
                    sums.ds_c[j][k * ll + l] += c[l];
                    sums.int_c_ap[j][k * ll + l] += c[l].norm_sqr();
                    c_sum += c[l];
                }
                sums.int_c_co[j][k] += c_sum.norm_sqr();
            }
        }
        sums.count += 1.0;
        Ok(())
    }
}

/// Runs the batch through the accumulator, one partial sum per group.
fn accumulate_groups(batch: &RealizationBatch<'_>, plan: &PrecodingPlan, instants: &[usize]) -> Result<Vec<TermSums>> {
    let s = batch.scenario;
    let (kk, ll) = (s.net.num_ues(), s.net.num_aps());
    if plan.mu.shape() != (kk, ll) || plan.eta.len() != ll || plan.common_weights.shape() != (kk, ll) {
        return Err(Error::Dimension("plan does not match the scenario".into()));
    }
    let acc = Accumulator {
        scenario: s,
        plan,
        instants,
        p_dc: plan.p_dc(&s.config),
        p_dp: plan.p_dp(&s.config),
        sqrt_mu: plan.mu.map(f64::sqrt),
        sqrt_eta: plan.eta.iter().map(|e| e.sqrt()).collect(),
    };
    let groups = GROUPS.min(batch.count);
    (0..groups)
        .into_par_iter()
        .map(|g| {
            let start = g * batch.count / groups;
            let end = (g + 1) * batch.count / groups;
            let mut sums = TermSums::zeros(instants.len(), kk, ll);
            for r in start..end {
                acc.add(&mut sums, &batch.realization(r))?;
            }
            Ok(sums)
        })
        .collect()
}

fn total(groups: &[TermSums]) -> TermSums {
    let mut t = groups[0].clone();
    for g in &groups[1..] {
        t.combine(g, 1.0);
    }
    t
}

/// Point estimate plus jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Symmetric 95% normal interval.
    pub fn ci95(&self) -> (f64, f64) {
        (self.value - 1.96 * self.stderr, self.value + 1.96 * self.stderr)
    }
}

/// Point estimate of `f` on the full batch with a delete-one-group
/// jackknife standard error.
fn jackknife(groups: &[TermSums], full: &TermSums, f: impl Fn(&TermSums) -> f64) -> Estimate {
    let value = f(full);
    let g = groups.len() as f64;
    let loo: Vec<f64> = groups
        .iter()
        .map(|grp| {
            let mut t = full.clone();
            t.combine(grp, -1.0);
            f(&t)
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / g;
    let var = loo.iter().map(|x| (x - mean).powi(2)).sum::<f64>() * (g - 1.0) / g;
    Estimate { value, stderr: var.sqrt() }
}

/// Empirical UatF expectation terms at one instant.
#[derive(Debug, Clone, Serialize)]
pub struct UatFTerms {
    pub n: usize,
    /// Private desired signal `E{sqrt(mu_kl) g_kl^H v_kl}`, `[k][l]`.
    pub ds_private: Vec<Vec<C64>>,
    pub ds_private_stderr: Vec<Vec<f64>>,
    /// `E|sum_l sqrt(mu_il) g_kl^H v_il|^2`, `[k][i]`.
    pub int_private: Vec<Vec<f64>>,
    pub int_private_stderr: Vec<Vec<f64>>,
    /// Common desired signal per AP, `[k][l]`.
    pub ds_common: Vec<Vec<C64>>,
    pub ds_common_stderr: Vec<Vec<f64>>,
    /// `E|sum_l sqrt(eta_l) g_kl^H v_c,l|^2`, `[k]`.
    pub int_common: Vec<f64>,
    pub int_common_stderr: Vec<f64>,
}

/// Monte Carlo SINRs of the four stream/transmission families at one instant.
#[derive(Debug, Clone, Serialize)]
pub struct McInstant {
    pub n: usize,
    pub private_coherent: Vec<Estimate>,
    pub private_noncoherent: Vec<Estimate>,
    pub common_coherent: Vec<Estimate>,
    pub common_noncoherent: Vec<Estimate>,
    pub terms: UatFTerms,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub count: usize,
    pub seed: u64,
    pub instants: Vec<McInstant>,
    /// Per-AP average transmit power with its standard error.
    pub transmit_power: Vec<Estimate>,
    /// Per-AP `mu_l * E{sum_i ||v_il||^2}` (uniform normalisation only meaningful).
    pub private_power_ratio: Vec<f64>,
    /// Per-AP `eta_l * E{||v_c,l||^2}`.
    pub common_power_ratio: Vec<f64>,
}

impl McReport {
    pub fn at(&self, n: usize) -> Option<&McInstant> {
        self.instants.iter().find(|x| x.n == n)
    }

    /// SINRs of one family, selected by stream and transmission.
    pub fn sinr(&self, n: usize, common: bool, transmission: Transmission) -> Option<&[Estimate]> {
        let at = self.at(n)?;
        Some(match (common, transmission) {
            (false, Transmission::Coherent) => &at.private_coherent,
            (false, Transmission::NonCoherent) => &at.private_noncoherent,
            (true, Transmission::Coherent) => &at.common_coherent,
            (true, Transmission::NonCoherent) => &at.common_noncoherent,
        })
    }
}

/// Effective SINR of per-AP layers decoded successively in AP order:
/// layer `l` sees everything not yet decoded as interference.
fn sic_sinr(signal: &[f64], total: f64) -> f64 {
    let mut remaining = total;
    let mut rate = 1.0;
    for &s in signal {
        let sinr_l = s / (remaining - s);
        rate *= 1.0 + sinr_l;
        remaining -= s;
    }
    rate - 1.0
}

struct Family {
    common: bool,
    transmission: Transmission,
}

fn family_sinr(t: &TermSums, j: usize, k: usize, kk: usize, ll: usize, p_dc: f64, p_dp: f64, noise: f64, fam: &Family) -> f64 {
    let m = 1.0 / t.count;
    let private_co: f64 = (0..kk).map(|i| t.int_p_co[j][k * kk + i]).sum::<f64>() * m;
    let private_ap: f64 = t.int_p_ap[j][k * kk * ll..(k + 1) * kk * ll].iter().sum::<f64>() * m;
    let ds = |v: &[Vec<C64>]| -> Vec<C64> { (0..ll).map(|l| v[j][k * ll + l] * m).collect() };
    match (fam.common, fam.transmission) {
        (false, Transmission::Coherent) => {
            let s = p_dp * ds(&t.ds_p).iter().sum::<C64>().norm_sqr();
            s / (p_dp * private_co + noise - s)
        }
        (false, Transmission::NonCoherent) => {
            let s: Vec<f64> = ds(&t.ds_p).iter().map(|d| p_dp * d.norm_sqr()).collect();
            sic_sinr(&s, p_dp * private_ap + noise)
        }
        (true, Transmission::Coherent) => {
            if p_dc == 0.0 {
                return 0.0;
            }
            let s = p_dc * ds(&t.ds_c).iter().sum::<C64>().norm_sqr();
            s / (p_dc * t.int_c_co[j][k] * m + p_dp * private_co + noise - s)
        }
        (true, Transmission::NonCoherent) => {
            if p_dc == 0.0 {
                return 0.0;
            }
            let s: Vec<f64> = ds(&t.ds_c).iter().map(|d| p_dc * d.norm_sqr()).collect();
            let common_ap: f64 = t.int_c_ap[j][k * ll..(k + 1) * ll].iter().sum::<f64>() * m;
            sic_sinr(&s, p_dc * common_ap + p_dp * private_ap + noise)
        }
    }
}

/// Runs the oracle for `plan` at each instant in `instants`. All four
/// families are estimated from the same realizations; the plan's
/// transmission tag is ignored.
pub fn run(scenario: &Scenario, plan: &PrecodingPlan, count: usize, seed: u64, instants: &[usize]) -> Result<McReport> {
    if count < MIN_REALIZATIONS {
        return Err(Error::TooFewRealizations(count));
    }
    let batch = sample_batch(scenario, count, seed, instants)?;
    let groups = accumulate_groups(&batch, plan, instants)?;
    let full = total(&groups);
    let (kk, ll) = (scenario.net.num_ues(), scenario.net.num_aps());
    let p_dc = plan.p_dc(&scenario.config);
    let p_dp = plan.p_dp(&scenario.config);
    let noise = scenario.config.noise_dl;

    let per_ue = |j: usize, fam: Family| -> Vec<Estimate> {
        (0..kk).map(|k| jackknife(&groups, &full, |t| family_sinr(t, j, k, kk, ll, p_dc, p_dp, noise, &fam))).collect()
    };
    let instants_out = instants
        .iter()
        .enumerate()
        .map(|(j, &n)| McInstant {
            n,
            private_coherent: per_ue(j, Family { common: false, transmission: Transmission::Coherent }),
            private_noncoherent: per_ue(j, Family { common: false, transmission: Transmission::NonCoherent }),
            common_coherent: per_ue(j, Family { common: true, transmission: Transmission::Coherent }),
            common_noncoherent: per_ue(j, Family { common: true, transmission: Transmission::NonCoherent }),
            terms: uatf_terms(&groups, &full, j, n, kk, ll),
        })
        .collect();

    let transmit_power = (0..ll)
        .map(|l| {
            let mean = full.power[l] / full.count;
            let var = (full.power_sq[l] / full.count - mean * mean).max(0.0) * full.count / (full.count - 1.0);
            Estimate { value: mean, stderr: (var / full.count).sqrt() }
        })
        .collect();
    let private_power_ratio = (0..ll).map(|l| plan.mu[(0, l)] * full.vnorm_p[l] / full.count).collect();
    let common_power_ratio = (0..ll).map(|l| plan.eta[l] * full.vnorm_c[l] / full.count).collect();
    Ok(McReport { count, seed, instants: instants_out, transmit_power, private_power_ratio, common_power_ratio })
}

fn batch_stderr(groups: &[TermSums], f: impl Fn(&TermSums) -> f64) -> f64 {
    let g = groups.len() as f64;
    let means: Vec<f64> = groups.iter().map(|t| f(t) / t.count).collect();
    let mean = means.iter().sum::<f64>() / g;
    (means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (g - 1.0) / g).sqrt()
}

fn uatf_terms(groups: &[TermSums], full: &TermSums, j: usize, n: usize, kk: usize, ll: usize) -> UatFTerms {
    let m = 1.0 / full.count;
    let cse = |k: usize, l: usize, common: bool| {
        let pick = |t: &TermSums| if common { t.ds_c[j][k * ll + l] } else { t.ds_p[j][k * ll + l] };
        batch_stderr(groups, |t| pick(t).re).hypot(batch_stderr(groups, |t| pick(t).im))
    };
    UatFTerms {
        n,
        ds_private: (0..kk).map(|k| (0..ll).map(|l| full.ds_p[j][k * ll + l] * m).collect()).collect(),
        ds_private_stderr: (0..kk).map(|k| (0..ll).map(|l| cse(k, l, false)).collect()).collect(),
        int_private: (0..kk).map(|k| (0..kk).map(|i| full.int_p_co[j][k * kk + i] * m).collect()).collect(),
        int_private_stderr: (0..kk)
            .map(|k| (0..kk).map(|i| batch_stderr(groups, |t| t.int_p_co[j][k * kk + i])).collect())
            .collect(),
        ds_common: (0..kk).map(|k| (0..ll).map(|l| full.ds_c[j][k * ll + l] * m).collect()).collect(),
        ds_common_stderr: (0..kk).map(|k| (0..ll).map(|l| cse(k, l, true)).collect()).collect(),
        int_common: (0..kk).map(|k| full.int_c_co[j][k] * m).collect(),
        int_common_stderr: (0..kk).map(|k| batch_stderr(groups, |t| t.int_c_co[j][k])).collect(),
    }
}

/// Empirical UatF terms for one instant.
pub fn estimate_uatf_terms(scenario: &Scenario, plan: &PrecodingPlan, count: usize, seed: u64, n: usize) -> Result<UatFTerms> {
    Ok(run(scenario, plan, count, seed, &[n])?.instants.remove(0).terms)
}

/// Monte Carlo SINR of the plan's own stream family at instant `n`.
pub fn mc_sinr(scenario: &Scenario, plan: &PrecodingPlan, count: usize, seed: u64, n: usize, common: bool) -> Result<Vec<Estimate>> {
    let report = run(scenario, plan, count, seed, &[n])?;
    Ok(report.sinr(n, common, plan.transmission).expect("instant evaluated").to_vec())
}

/// Standard errors added to sampled precoder powers before normalising, so
/// the per-AP budget holds despite sampling error in the normalisation.
pub const NORMALIZATION_MARGIN: f64 = 3.0;

/// Empirical normalisations `(mu_l, eta_l)` for `scheme` and `weights`:
/// reciprocals of the sampled precoder powers, each raised by
/// [`NORMALIZATION_MARGIN`] standard errors.
pub fn empirical_normalization(
    scenario: &Scenario,
    scheme: PrivateScheme,
    weights: &DMatrix<f64>,
    p_dp: f64,
    count: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if count < MIN_REALIZATIONS {
        return Err(Error::TooFewRealizations(count));
    }
    let (kk, ll) = (scenario.net.num_ues(), scenario.net.num_aps());
    let probe = PrecodingPlan {
        private_scheme: scheme,
        transmission: Transmission::Coherent,
        rho: 1.0 - p_dp / scenario.config.downlink_power,
        common_weights: weights.clone(),
        mu: DMatrix::from_element(kk, ll, 1.0),
        eta: vec![1.0; ll],
    };
    let batch = sample_batch(scenario, count, seed, &[])?;
    let groups = accumulate_groups(&batch, &probe, &[])?;
    let full = total(&groups);
    let inv = |l: usize, common: bool| {
        let pick = |t: &TermSums| if common { t.vnorm_c[l] } else { t.vnorm_p[l] };
        let mean = pick(&full) / full.count;
        if mean > 0.0 {
            Ok(1.0 / (mean + NORMALIZATION_MARGIN * batch_stderr(&groups, pick)))
        } else {
            let what = if common { "common" } else { "private" };
            Err(Error::Degenerate(format!("sampled {what} precoder power at AP {l} is zero")))
        }
    };
    let mu = (0..ll).map(|l| inv(l, false)).collect::<Result<Vec<_>>>()?;
    let eta = (0..ll).map(|l| inv(l, true)).collect::<Result<Vec<_>>>()?;
    Ok((mu, eta))
}

/// Seed offset separating normalisation batches from evaluation batches.
pub const NORMALIZATION_STREAM: u64 = 0x6e6f_726d_616c_697a;

/// DU-MMSE plan with empirically normalised precoders.
pub fn mmse_plan(
    scenario: &Scenario,
    transmission: Transmission,
    rho: f64,
    weights: DMatrix<f64>,
    count: usize,
    seed: u64,
) -> Result<PrecodingPlan> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1], got {rho}")));
    }
    let (kk, ll) = (scenario.net.num_ues(), scenario.net.num_aps());
    let p_dp = (1.0 - rho) * scenario.config.downlink_power;
    let (mu, eta) = empirical_normalization(scenario, PrivateScheme::DuMmse, &weights, p_dp, count, seed ^ NORMALIZATION_STREAM)?;
    Ok(PrecodingPlan {
        private_scheme: PrivateScheme::DuMmse,
        transmission,
        rho,
        common_weights: weights,
        mu: DMatrix::from_fn(kk, ll, |_, l| mu[l]),
        eta,
    })
}

/// Monte Carlo SE report of a plan: SINRs at every data instant, then the
/// same SE composition as the closed forms. Negative SINR estimates, which
/// only arise from sampling noise, are clamped at zero.
pub fn mc_evaluate(scenario: &Scenario, plan: &PrecodingPlan, count: usize, seed: u64) -> Result<SeReport> {
    let cfg = &scenario.config;
    let instants: Vec<usize> = (cfg.lambda()..=cfg.tau_c).collect();
    let report = run(scenario, plan, count, seed, &instants)?;
    let kk = scenario.net.num_ues();
    let mut private = vec![Vec::with_capacity(instants.len()); kk];
    let mut common = private.clone();
    for &n in &instants {
        let p = report.sinr(n, false, plan.transmission).expect("instant evaluated");
        let c = report.sinr(n, true, plan.transmission).expect("instant evaluated");
        for k in 0..kk {
            private[k].push(p[k].value.max(0.0));
            common[k].push(c[k].value.max(0.0));
        }
    }
    let metadata = ReportMetadata {
        seed,
        config_hash: config_hash(cfg),
        private_scheme: plan.private_scheme,
        transmission: plan.transmission,
        rho: plan.rho,
    };
    sum_se(private, common, cfg.tau_c, cfg.lambda(), metadata)
}

pub fn mc_sum_se(scenario: &Scenario, plan: &PrecodingPlan, count: usize, seed: u64) -> Result<f64> {
    Ok(mc_evaluate(scenario, plan, count, seed)?.sum_se)
}
