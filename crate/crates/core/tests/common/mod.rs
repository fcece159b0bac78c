//! Shared brute-force oracle for the max-min common precoding tests.
#![allow(dead_code)]

use cfmimo::closed_form::*;
use cfmimo::Scenario;
use nalgebra::DMatrix;

/// Common SINRs of weights `a[(i, l)]` with `eta = 1`, assembled directly
/// from the estimation statistics.
pub struct Oracle {
    kk: usize,
    ll: usize,
    /// `tr Q̄_kil`, zero off-group, `[k][i][l]`.
    tqb: Vec<Vec<Vec<f64>>>,
    /// `Re tr(Q̄_ijl R_kl)`, zero off-group, `[k][i][j][l]`.
    cross: Vec<Vec<Vec<Vec<f64>>>>,
    floor: Vec<f64>,
    p_dc: f64,
    e_ap: f64,
    e_ue: f64,
}

impl Oracle {
    pub fn new(s: &Scenario, rho: f64, n: usize) -> Self {
        let (kk, ll) = (s.stats.num_ues, s.stats.num_aps);
        let plan = PrecodingPlan::simple(s, PrivateScheme::DuMr, Transmission::Coherent, rho).unwrap();
        let xi = ClosedForm::new(s, &plan).unwrap().private_interference(n).unwrap();
        let p_dp = plan.p_dp(&s.config);
        let groups = &s.stats.pilots.groups;
        let tqb = (0..kk).map(|k| (0..kk).map(|i| (0..ll).map(|l| s.stats.tr_qbar(k, i, l)).collect()).collect()).collect();
        let cross = (0..kk)
            .map(|k| {
                (0..kk)
                    .map(|i| {
                        (0..kk)
                            .map(|j| {
                                (0..ll)
                                    .map(|l| if groups[i].contains(&j) { s.stats.tr_qbar_r(i, j, k, l).re } else { 0.0 })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            kk,
            ll,
            tqb,
            cross,
            floor: xi.iter().map(|x| p_dp * x + s.config.noise_dl).collect(),
            p_dc: plan.p_dc(&s.config),
            e_ap: s.phases.eta_ap(n, s.lambda()),
            e_ue: s.phases.eta_ue(n, s.lambda()),
        }
    }

    pub fn power(&self, a: &DMatrix<f64>, l: usize) -> f64 {
        let mut p = 0.0;
        for k in 0..self.kk {
            for i in 0..self.kk {
                p += a[(k, l)] * a[(i, l)] * self.tqb[k][i][l];
            }
        }
        p
    }

    pub fn min_sinr(&self, a: &DMatrix<f64>) -> f64 {
        (0..self.kk)
            .map(|k| {
                let (mut b, mut g1, mut g2) = (0.0, 0.0, 0.0);
                for l in 0..self.ll {
                    let c: f64 = (0..self.kk).map(|i| a[(i, l)] * self.tqb[k][i][l]).sum();
                    b += c;
                    g1 += c * c;
                    for i in 0..self.kk {
                        for j in 0..self.kk {
                            g2 += a[(i, l)] * a[(j, l)] * self.cross[k][i][j][l];
                        }
                    }
                }
                let num = self.p_dc * self.e_ap * self.e_ue * b * b;
                num / (self.p_dc * ((1.0 - self.e_ap) * g1 + g2 + self.e_ap * (1.0 - self.e_ue) * b * b) + self.floor[k])
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Best min-SINR over a polar grid per AP: direction angle in
    /// `[0, pi/2]` and radius in `(0, 1]` of the power budget.
    pub fn grid_search(&self, angles: usize, radii: usize) -> (f64, DMatrix<f64>) {
        assert_eq!((self.kk, self.ll), (2, 2));
        let mut per_ap: Vec<Vec<[f64; 2]>> = vec![Vec::new(); 2];
        for (l, cands) in per_ap.iter_mut().enumerate() {
            for ai in 0..=angles {
                let phi = std::f64::consts::FRAC_PI_2 * ai as f64 / angles as f64;
                let d = DMatrix::from_fn(2, 2, |i, ll| if ll == l { [phi.cos(), phi.sin()][i] } else { 0.0 });
                let scale = 1.0 / self.power(&d, l).sqrt();
                for ri in 1..=radii {
                    let r = ri as f64 / radii as f64;
                    cands.push([phi.cos() * scale * r, phi.sin() * scale * r]);
                }
            }
        }
        // Per-AP contributions `(b, g1, g2)` for each UE; SINR terms add over APs.
        let terms = |l: usize, x: &[f64; 2]| -> [[f64; 3]; 2] {
            std::array::from_fn(|k| {
                let c: f64 = (0..2).map(|i| x[i] * self.tqb[k][i][l]).sum();
                let g2: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| x[i] * x[j] * self.cross[k][i][j][l]).sum();
                [c, c * c, g2]
            })
        };
        let t0: Vec<_> = per_ap[0].iter().map(|x| terms(0, x)).collect();
        let t1: Vec<_> = per_ap[1].iter().map(|x| terms(1, x)).collect();
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for (ix, u) in t0.iter().enumerate() {
            for (iy, v) in t1.iter().enumerate() {
                let val = (0..2)
                    .map(|k| {
                        let (b, g1, g2) = (u[k][0] + v[k][0], u[k][1] + v[k][1], u[k][2] + v[k][2]);
                        let num = self.p_dc * self.e_ap * self.e_ue * b * b;
                        num / (self.p_dc * ((1.0 - self.e_ap) * g1 + g2 + self.e_ap * (1.0 - self.e_ue) * b * b) + self.floor[k])
                    })
                    .fold(f64::INFINITY, f64::min);
                if val > best.0 {
                    best = (val, (ix, iy));
                }
            }
        }
        let (x, y) = (per_ap[0][best.1 .0], per_ap[1][best.1 .1]);
        let a = DMatrix::from_column_slice(2, 2, &[x[0], x[1], y[0], y[1]]);
        let best = (self.min_sinr(&a), a);
        best
    }
}
