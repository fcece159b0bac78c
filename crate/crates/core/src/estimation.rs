//! Pilot assignment and second-order statistics of the MMSE channel
//! estimator under oscillator phase drift, plus MMSE and LS NMSE.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_hermitian, hpd_inverse, trace, trace_of_product, CMatrix, CVector, C64};
use crate::model::{NetworkModel, PhaseStatistics, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PilotPolicy {
    /// UE k (0-based) gets instant `(k mod tau_p) + 1`.
    #[default]
    RoundRobin,
    /// Uniformly shuffled round-robin, seeded.
    Random { seed: u64 },
}

/// Pilot instants and the resulting co-pilot groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotAssignment {
    /// Pilot instant `t_k` in `1..=tau_p`, one per UE.
    pub t: Vec<usize>,
    /// `groups[k]` is `P_k`, sorted ascending, always containing `k`.
    pub groups: Vec<Vec<usize>>,
}

impl PilotAssignment {
    /// Builds groups from explicit instants.
    pub fn from_instants(t: Vec<usize>, tau_p: usize) -> Result<Self> {
        if let Some(bad) = t.iter().find(|&&x| x == 0 || x > tau_p) {
            return Err(Error::InvalidConfig(format!("pilot instant {bad} outside 1..={tau_p}")));
        }
        let groups = t
            .iter()
            .map(|&tk| t.iter().enumerate().filter(|(_, &ti)| ti == tk).map(|(i, _)| i).collect())
            .collect();
        Ok(Self { t, groups })
    }

    pub fn num_ues(&self) -> usize {
        self.t.len()
    }

    pub fn shares_pilot(&self, k: usize, i: usize) -> bool {
        self.t[k] == self.t[i]
    }

    pub fn is_orthogonal(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }
}

pub fn assign_pilots(num_ues: usize, tau_p: usize, policy: PilotPolicy) -> Result<PilotAssignment> {
    if tau_p == 0 {
        return Err(Error::InvalidConfig("tau_p must be at least 1".into()));
    }
    let mut t: Vec<usize> = (0..num_ues).map(|k| k % tau_p + 1).collect();
    if let PilotPolicy::Random { seed } = policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.shuffle(&mut rng);
    }
    PilotAssignment::from_instants(t, tau_p)
}

/// Closed-form estimation statistics for every link.
///
/// Per-link matrices are stored flat with index `k * L + l`; cross-UE
/// quantities use `(k * K + i) * L + l`.
#[derive(Debug, Clone)]
pub struct EstimationStatistics {
    pub num_ues: usize,
    pub num_aps: usize,
    pub antennas: usize,
    pub lambda: usize,
    pub pilots: PilotAssignment,
    psi: Vec<CMatrix>,
    q: Vec<CMatrix>,
    qbar: Vec<Option<CMatrix>>,
    /// `sqrt(p_k) e^{-gap var/2} R_kl Psi_kl`, the estimator without theta.
    estimator: Vec<CMatrix>,
    /// `tr(Q_kl)`, K x L.
    pub tr_q: DMatrix<f64>,
    /// `tr(R_kl)`, K x L.
    pub tr_r: DMatrix<f64>,
    tr_qbar: Vec<f64>,
    tr_qr: Vec<f64>,
    tr_qbar_r: Vec<C64>,
    pub nmse_mmse: DMatrix<f64>,
    pub nmse_ls: DMatrix<f64>,
}

impl EstimationStatistics {
    fn link(&self, k: usize, l: usize) -> usize {
        k * self.num_aps + l
    }

    fn pair(&self, k: usize, i: usize, l: usize) -> usize {
        (k * self.num_ues + i) * self.num_aps + l
    }

    pub fn psi(&self, k: usize, l: usize) -> &CMatrix {
        &self.psi[self.link(k, l)]
    }

    pub fn q(&self, k: usize, l: usize) -> &CMatrix {
        &self.q[self.link(k, l)]
    }

    /// `Q̄_kil`, present only when `i` shares UE `k`'s pilot.
    pub fn qbar(&self, k: usize, i: usize, l: usize) -> Option<&CMatrix> {
        self.qbar[self.pair(k, i, l)].as_ref()
    }

    pub fn estimator(&self, k: usize, l: usize) -> &CMatrix {
        &self.estimator[self.link(k, l)]
    }

    /// `tr(Q̄_kil)`, zero outside the pilot group.
    pub fn tr_qbar(&self, k: usize, i: usize, l: usize) -> f64 {
        self.tr_qbar[self.pair(k, i, l)]
    }

    /// `tr(Q_il R_kl)`.
    pub fn tr_qr(&self, i: usize, k: usize, l: usize) -> f64 {
        self.tr_qr[self.pair(i, k, l)]
    }

    /// `tr(Q̄_ijl R_kl)`, zero unless `j` shares UE `i`'s pilot.
    pub fn tr_qbar_r(&self, i: usize, j: usize, k: usize, l: usize) -> C64 {
        let (kk, ll) = (self.num_ues, self.num_aps);
        self.tr_qbar_r[((i * kk + j) * kk + k) * ll + l]
    }

    /// Estimation error covariance `C_kl = R_kl - Q_kl`.
    pub fn error_covariance(&self, net: &NetworkModel, k: usize, l: usize) -> CMatrix {
        net.r(k, l) - self.q(k, l)
    }

    /// Returns a copy with every `Q`, `Q̄` and derived trace scaled by `c`.
    /// Only intended for homogeneity checks.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        let cz = C64::new(c, 0.0);
        out.q.iter_mut().for_each(|m| *m *= cz);
        out.qbar.iter_mut().flatten().for_each(|m| *m *= cz);
        out.tr_q *= c;
        out.tr_qbar.iter_mut().for_each(|x| *x *= c);
        out.tr_qr.iter_mut().for_each(|x| *x *= c);
        out.tr_qbar_r.iter_mut().for_each(|x| *x *= cz);
        out
    }
}

/// `exp(-(lambda - t_k) var_sum)`, the squared mean phase rotation between
/// the pilot instant and the estimation reference.
fn pilot_decay(lambda: usize, t_k: usize, phases: &PhaseStatistics) -> f64 {
    (-((lambda - t_k) as f64) * phases.var_sum()).exp()
}

pub fn estimation_statistics(
    net: &NetworkModel,
    pilots: &PilotAssignment,
    phases: &PhaseStatistics,
    config: &SystemConfig,
) -> Result<EstimationStatistics> {
    let (kk, ll, n) = (net.num_ues(), net.num_aps(), net.antennas());
    if pilots.num_ues() != kk || config.pilot_power.len() != kk || config.antennas != n {
        return Err(Error::Dimension("network, pilots and config disagree on K or N".into()));
    }
    let lambda = config.lambda();
    let p = &config.pilot_power;
    let noise = CMatrix::from_diagonal_element(n, n, C64::new(config.noise_ul, 0.0));

    for k in 0..kk {
        for l in 0..ll {
            ensure_hermitian(net.r(k, l), 1e-10, &format!("R[{k},{l}]"))?;
        }
    }

    let mut psi = Vec::with_capacity(kk * ll);
    let mut q = Vec::with_capacity(kk * ll);
    let mut estimator = Vec::with_capacity(kk * ll);
    let mut tr_q = DMatrix::zeros(kk, ll);
    let mut tr_r = DMatrix::zeros(kk, ll);
    let mut nmse_mmse = DMatrix::zeros(kk, ll);
    let mut nmse_ls = DMatrix::zeros(kk, ll);
    for k in 0..kk {
        let decay = pilot_decay(lambda, pilots.t[k], phases);
        for l in 0..ll {
            let mut psi_inv = noise.clone();
            for &i in &pilots.groups[k] {
                psi_inv += net.r(i, l) * C64::new(p[i], 0.0);
            }
            let psi_kl = hpd_inverse(&psi_inv, &format!("Psi[{k},{l}]"))?;
            let r = net.r(k, l);
            let rpsi = r * &psi_kl;
            let q_kl = &rpsi * r * C64::new(p[k] * decay, 0.0);
            let tq = trace(&q_kl).re;
            let tr = trace(r).re;
            tr_q[(k, l)] = tq;
            tr_r[(k, l)] = tr;
            nmse_mmse[(k, l)] = (tr - tq) / tr;
            nmse_ls[(k, l)] = trace(&psi_inv).re / (decay * p[k] * tr) - 1.0;
            estimator.push(rpsi * C64::new((p[k] * decay).sqrt(), 0.0));
            psi.push(psi_kl);
            q.push(q_kl);
        }
    }

    let mut qbar = vec![None; kk * kk * ll];
    let mut tr_qbar = vec![0.0; kk * kk * ll];
    for k in 0..kk {
        let decay = pilot_decay(lambda, pilots.t[k], phases);
        for &i in &pilots.groups[k] {
            for l in 0..ll {
                let idx = (k * kk + i) * ll + l;
                let m = net.r(i, l) * &psi[k * ll + l] * net.r(k, l) * C64::new((p[k] * p[i]).sqrt() * decay, 0.0);
                tr_qbar[idx] = trace(&m).re;
                qbar[idx] = Some(m);
            }
        }
    }

    let mut tr_qr = vec![0.0; kk * kk * ll];
    for i in 0..kk {
        for k in 0..kk {
            for l in 0..ll {
                tr_qr[(i * kk + k) * ll + l] = trace_of_product(&q[i * ll + l], net.r(k, l)).re;
            }
        }
    }

    let mut tr_qbar_r = vec![C64::new(0.0, 0.0); kk * kk * kk * ll];
    for i in 0..kk {
        for &j in &pilots.groups[i] {
            for k in 0..kk {
                for l in 0..ll {
                    let m = qbar[(i * kk + j) * ll + l].as_ref().expect("co-pilot Q̄ present");
                    tr_qbar_r[((i * kk + j) * kk + k) * ll + l] = trace_of_product(m, net.r(k, l));
                }
            }
        }
    }

    Ok(EstimationStatistics {
        num_ues: kk,
        num_aps: ll,
        antennas: n,
        lambda,
        pilots: pilots.clone(),
        psi,
        q,
        qbar,
        estimator,
        tr_q,
        tr_r,
        tr_qbar,
        tr_qr,
        tr_qbar_r,
        nmse_mmse,
        nmse_ls,
    })
}

/// LS NMSE for every link (may exceed one).
pub fn nmse_ls(
    net: &NetworkModel,
    pilots: &PilotAssignment,
    phases: &PhaseStatistics,
    config: &SystemConfig,
) -> Result<DMatrix<f64>> {
    Ok(estimation_statistics(net, pilots, phases, config)?.nmse_ls)
}

/// MMSE estimate of `h_kl` at the reference instant from the pilot
/// observation `z` received by AP `l` at UE `k`'s pilot instant.
pub fn mmse_estimate_realization(
    z: &CVector,
    k: usize,
    l: usize,
    stats: &EstimationStatistics,
    net: &NetworkModel,
) -> Result<CVector> {
    if z.len() != stats.antennas {
        return Err(Error::Dimension(format!("pilot observation has length {}, expected {}", z.len(), stats.antennas)));
    }
    Ok(stats.estimator(k, l) * z * net.theta(k, l).conj())
}
