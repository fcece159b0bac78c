//! Network geometry, large-scale fading, spatial correlation, delay phases,
//! and the Wiener oscillator-phase model.
//!
//! All quantities are in linear SI units. Indexing convention: `k` is a UE,
//! `l` an AP, and per-link arrays are addressed as `(k, l)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_hermitian, CMatrix, C64};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Distances below this are clamped before evaluating path loss (meters).
pub const MIN_DISTANCE: f64 = 1.0;

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrelationModel {
    /// `R = beta * I`.
    Uncorrelated,
    /// `[R]_{mn} = beta * r^{|m-n|}`.
    Exponential { r: f64 },
}

/// Three-slope distance-dependent path loss.
///
/// For `d > d1` the exponent is 3.5, between `d0` and `d1` it is 2, and
/// below `d0` the loss is flat. `fixed_loss_db` is the loss at 1 km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossModel {
    pub d0: f64,
    pub d1: f64,
    pub fixed_loss_db: f64,
}

impl Default for PathLossModel {
    fn default() -> Self {
        Self { d0: 10.0, d1: 50.0, fixed_loss_db: 140.7 }
    }
}

impl PathLossModel {
    /// Large-scale gain in dB at distance `d` meters (already clamped).
    pub fn gain_db(&self, d: f64) -> f64 {
        let km = |m: f64| m / 1000.0;
        if d > self.d1 {
            -self.fixed_loss_db - 35.0 * km(d).log10()
        } else if d > self.d0 {
            -self.fixed_loss_db - 15.0 * km(self.d1).log10() - 20.0 * km(d).log10()
        } else {
            -self.fixed_loss_db - 15.0 * km(self.d1).log10() - 20.0 * km(self.d0).log10()
        }
    }
}

/// Explicit per-instant phase-increment variances, bypassing the oscillator
/// constants. Used by the oscillator-variance sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseVariances {
    pub ap: f64,
    pub ue: f64,
}

/// Every scalar parameter of the system, in linear SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of APs (L).
    pub num_aps: usize,
    /// Number of UEs (K).
    pub num_ues: usize,
    /// Antennas per AP (N).
    pub antennas: usize,
    pub tau_p: usize,
    pub tau_c: usize,
    /// Per-UE pilot power (W), length K.
    pub pilot_power: Vec<f64>,
    /// Maximum downlink power per AP (W).
    pub downlink_power: f64,
    pub noise_ul: f64,
    pub noise_dl: f64,
    /// Symbol duration T_s (s).
    pub symbol_duration: f64,
    /// Carrier frequency (Hz).
    pub carrier_frequency: f64,
    pub osc_const_ap: f64,
    pub osc_const_ue: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_variances: Option<PhaseVariances>,
    /// Side of the square deployment area (m).
    pub area_side: f64,
    pub correlation: CorrelationModel,
    #[serde(default)]
    pub path_loss: PathLossModel,
    /// Log-normal shadowing standard deviation in dB; `None` disables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadowing_db: Option<f64>,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let k = 8;
        Self {
            num_aps: 40,
            num_ues: k,
            antennas: 2,
            tau_p: 4,
            tau_c: 200,
            pilot_power: vec![dbm_to_watt(20.0); k],
            downlink_power: dbm_to_watt(23.0),
            noise_ul: dbm_to_watt(-96.0),
            noise_dl: dbm_to_watt(-96.0),
            symbol_duration: 10e-6,
            carrier_frequency: 2e9,
            osc_const_ap: 1e-18,
            osc_const_ue: 1e-18,
            phase_variances: None,
            area_side: 100.0,
            correlation: CorrelationModel::Uncorrelated,
            path_loss: PathLossModel::default(),
            shadowing_db: None,
            seed: 0,
        }
    }
}

impl SystemConfig {
    /// Builds a config with the given dimensions and default physics.
    pub fn with_dims(num_aps: usize, num_ues: usize, antennas: usize, tau_p: usize, tau_c: usize) -> Self {
        let base = Self::default();
        Self {
            num_aps,
            num_ues,
            antennas,
            tau_p,
            tau_c,
            pilot_power: vec![base.pilot_power[0]; num_ues],
            ..base
        }
    }

    /// Estimation reference instant `lambda = tau_p + 1`.
    pub fn lambda(&self) -> usize {
        self.tau_p + 1
    }

    /// Number of downlink data instants `tau_c - tau_p`.
    pub fn data_instants(&self) -> usize {
        self.tau_c - self.tau_p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_aps == 0 || self.num_ues == 0 || self.antennas == 0 {
            return bad("L, K and N must all be at least 1".into());
        }
        if self.tau_p == 0 || self.tau_p >= self.tau_c {
            return bad(format!("need 1 <= tau_p < tau_c, got tau_p={} tau_c={}", self.tau_p, self.tau_c));
        }
        if self.pilot_power.len() != self.num_ues {
            return bad(format!(
                "pilot_power has {} entries, expected K={}",
                self.pilot_power.len(),
                self.num_ues
            ));
        }
        let positive = [
            ("downlink_power", self.downlink_power),
            ("noise_ul", self.noise_ul),
            ("noise_dl", self.noise_dl),
            ("symbol_duration", self.symbol_duration),
            ("carrier_frequency", self.carrier_frequency),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be strictly positive, got {v}"));
            }
        }
        if let Some((k, p)) = self.pilot_power.iter().enumerate().find(|(_, p)| !(**p > 0.0)) {
            return bad(format!("pilot_power[{k}] must be strictly positive, got {p}"));
        }
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            return bad(format!("deployment area must be non-degenerate, side = {}", self.area_side));
        }
        if self.osc_const_ap < 0.0 || self.osc_const_ue < 0.0 {
            return bad("oscillator constants must be non-negative".into());
        }
        if let Some(v) = self.phase_variances {
            if v.ap < 0.0 || v.ue < 0.0 {
                return bad("phase variances must be non-negative".into());
            }
        }
        if let CorrelationModel::Exponential { r } = self.correlation {
            if !(r.abs() < 1.0) {
                return bad(format!("exponential correlation needs |r| < 1, got {r}"));
            }
        }
        let pl = self.path_loss;
        if !(pl.d0 > 0.0 && pl.d1 > pl.d0) {
            return bad(format!("path loss breakpoints need 0 < d0 < d1, got {} / {}", pl.d0, pl.d1));
        }
        if let Some(s) = self.shadowing_db {
            if s < 0.0 {
                return bad("shadowing std must be non-negative".into());
            }
        }
        Ok(())
    }
}

/// Geometry and large-scale statistics of one network drop.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub ap_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    /// `beta[(k, l)]`, linear.
    pub beta: DMatrix<f64>,
    /// `r[k * L + l]`.
    r: Vec<CMatrix>,
    /// `theta[(k, l)]`, unit modulus.
    pub theta: DMatrix<C64>,
}

impl NetworkModel {
    /// Assembles a model from explicit parts, checking the structural
    /// invariants (Hermitian R, beta = tr(R)/N, unit-modulus theta).
    pub fn from_parts(
        ap_positions: Vec<[f64; 2]>,
        ue_positions: Vec<[f64; 2]>,
        r: Vec<CMatrix>,
        theta: DMatrix<C64>,
    ) -> Result<Self> {
        let (l, k) = (ap_positions.len(), ue_positions.len());
        if r.len() != k * l || theta.shape() != (k, l) {
            return Err(Error::Dimension(format!(
                "expected {} correlation matrices and a {k}x{l} theta",
                k * l
            )));
        }
        let n = r.first().map(|m| m.nrows()).unwrap_or(0);
        let mut beta = DMatrix::zeros(k, l);
        for kk in 0..k {
            for ll in 0..l {
                let m = &r[kk * l + ll];
                if m.nrows() != n {
                    return Err(Error::Dimension("correlation matrices differ in size".into()));
                }
                ensure_hermitian(m, 1e-12, &format!("R[{kk},{ll}]"))?;
                beta[(kk, ll)] = crate::linalg::trace(m).re / n as f64;
            }
        }
        for z in theta.iter() {
            if (z.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!("delay phase {z} is not unit modulus")));
            }
        }
        Ok(Self { ap_positions, ue_positions, beta, r, theta })
    }

    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn antennas(&self) -> usize {
        self.r.first().map(|m| m.nrows()).unwrap_or(0)
    }

    /// Spatial correlation matrix `R_kl`.
    pub fn r(&self, k: usize, l: usize) -> &CMatrix {
        &self.r[k * self.num_aps() + l]
    }

    pub fn theta(&self, k: usize, l: usize) -> C64 {
        self.theta[(k, l)]
    }

    /// Copy of this model with the delay phases replaced.
    pub fn with_theta(&self, theta: DMatrix<C64>) -> Result<Self> {
        if theta.shape() != self.theta.shape() {
            return Err(Error::Dimension("theta shape mismatch".into()));
        }
        let mut out = self.clone();
        out.theta = theta;
        Ok(out)
    }

    /// Distance between UE `k` and AP `l`, floored at [`MIN_DISTANCE`].
    pub fn distance(&self, k: usize, l: usize) -> f64 {
        distance(self.ue_positions[k], self.ap_positions[l])
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt().max(MIN_DISTANCE)
}

/// Correlation matrix for one link.
pub fn correlation_matrix(model: CorrelationModel, beta: f64, antennas: usize) -> CMatrix {
    match model {
        CorrelationModel::Uncorrelated => CMatrix::from_diagonal_element(antennas, antennas, C64::new(beta, 0.0)),
        CorrelationModel::Exponential { r } => CMatrix::from_fn(antennas, antennas, |m, n| {
            let e = (m as i64 - n as i64).unsigned_abs() as i32;
            C64::new(beta * r.powi(e), 0.0)
        }),
    }
}

/// Delay phases for every link: each UE's earliest-arriving AP is the
/// zero-offset reference.
pub fn delay_phases(distances: &DMatrix<f64>, symbol_duration: f64) -> DMatrix<C64> {
    let (k, l) = distances.shape();
    let mut theta = DMatrix::from_element(k, l, C64::new(1.0, 0.0));
    for kk in 0..k {
        let row = distances.row(kk);
        let dmin = row.iter().copied().fold(f64::INFINITY, f64::min);
        for ll in 0..l {
            let dt = (row[ll] - dmin) / SPEED_OF_LIGHT;
            let angle = (-2.0 * PI * dt / symbol_duration).rem_euclid(2.0 * PI);
            theta[(kk, ll)] = C64::from_polar(1.0, angle);
        }
    }
    theta
}

/// Draws AP/UE positions uniformly in the square and derives beta, R and
/// theta. Deterministic for a fixed `config.seed`.
pub fn build_network(config: &SystemConfig) -> Result<NetworkModel> {
    config.validate()?;
    let (l, k, n) = (config.num_aps, config.num_ues, config.antennas);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let side = config.area_side;
    let draw = |rng: &mut ChaCha8Rng| [rng.random::<f64>() * side, rng.random::<f64>() * side];
    let ap_positions: Vec<[f64; 2]> = (0..l).map(|_| draw(&mut rng)).collect();
    let ue_positions: Vec<[f64; 2]> = (0..k).map(|_| draw(&mut rng)).collect();

    let distances = DMatrix::from_fn(k, l, |kk, ll| distance(ue_positions[kk], ap_positions[ll]));
    let shadow = config.shadowing_db.filter(|s| *s > 0.0).map(|s| Normal::new(0.0, s).expect("finite std"));
    let mut beta = DMatrix::zeros(k, l);
    for kk in 0..k {
        for ll in 0..l {
            let mut g_db = config.path_loss.gain_db(distances[(kk, ll)]);
            if let Some(dist) = &shadow {
                g_db += dist.sample(&mut rng);
            }
            beta[(kk, ll)] = db_to_linear(g_db);
        }
    }
    let r = (0..k)
        .flat_map(|kk| (0..l).map(move |ll| (kk, ll)))
        .map(|(kk, ll)| correlation_matrix(config.correlation, beta[(kk, ll)], n))
        .collect();
    let theta = delay_phases(&distances, config.symbol_duration);
    Ok(NetworkModel { ap_positions, ue_positions, beta, r, theta })
}

/// Per-instant variance of the oscillator phase increment,
/// `4 pi^2 f_c^2 c T_s`.
pub fn phase_increment_variance(carrier_frequency: f64, osc_const: f64, symbol_duration: f64) -> f64 {
    4.0 * PI * PI * carrier_frequency * carrier_frequency * osc_const * symbol_duration
}

/// `E{exp(j * sum of gap increments)} = exp(-gap * var_sum / 2)`.
pub fn expected_phase_decay(gap: f64, var_sum: f64) -> f64 {
    (-gap * var_sum / 2.0).exp()
}

/// Increment variances of the AP and UE oscillators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseStatistics {
    pub var_ap: f64,
    pub var_ue: f64,
}

impl PhaseStatistics {
    pub fn new(var_ap: f64, var_ue: f64) -> Result<Self> {
        if !(var_ap >= 0.0 && var_ue >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "phase variances must be non-negative, got ap={var_ap} ue={var_ue}"
            )));
        }
        Ok(Self { var_ap, var_ue })
    }

    pub fn synchronous() -> Self {
        Self { var_ap: 0.0, var_ue: 0.0 }
    }

    pub fn from_config(config: &SystemConfig) -> Self {
        match config.phase_variances {
            Some(v) => Self { var_ap: v.ap, var_ue: v.ue },
            None => Self {
                var_ap: phase_increment_variance(config.carrier_frequency, config.osc_const_ap, config.symbol_duration),
                var_ue: phase_increment_variance(config.carrier_frequency, config.osc_const_ue, config.symbol_duration),
            },
        }
    }

    pub fn var_sum(&self) -> f64 {
        self.var_ap + self.var_ue
    }

    /// `eta_n^ap = exp(-(n - lambda) var_ap)`.
    pub fn eta_ap(&self, n: usize, lambda: usize) -> f64 {
        expected_phase_decay((n - lambda) as f64, 2.0 * self.var_ap)
    }

    /// `eta_n^ue = exp(-(n - lambda) var_ue)`.
    pub fn eta_ue(&self, n: usize, lambda: usize) -> f64 {
        expected_phase_decay((n - lambda) as f64, 2.0 * self.var_ue)
    }
}

/// Wiener phase trajectory of `length` instants: cumulative sum of i.i.d.
/// `N(0, var)` increments starting from phase 0. Entry `i` is the phase at
/// instant `i + 1`.
pub fn sample_phase_trajectory<R: Rng + ?Sized>(var: f64, length: usize, rng: &mut R) -> Vec<f64> {
    let std = var.sqrt();
    let mut phase = 0.0;
    (0..length)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            phase += std * z;
            phase
        })
        .collect()
}

/// Seeded convenience wrapper around [`sample_phase_trajectory`].
pub fn sample_phase_trajectory_seeded(var: f64, length: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_phase_trajectory(var, length, &mut rng)
}
