//! Monte Carlo estimation of the resonant parameter measure.
//!
//! Samples ξ ∈ 𝒪 = [−1/10, 1/10]ᵇ, evaluates the non-resonance conditions
//!
//! R⁰: |⟨k,ω⟩| < γ/|k|^τ,
//! R¹: |⟨k,ω⟩ + Ω_n| < γ/(|k|^τ K),
//! R²: |⟨k,ω⟩ + Ω_m + Ω_n| < γ/(|k|^τ K²),
//! R³: |⟨k,ω⟩ + Ω_m − Ω_n| < γ/(|k|^τ K²),
//!
//! at each schedule level, and compares the rejected fraction against the
//! ε^{1/16} law (γ_ν = ε_ν^{1/16} dominates the level sum). The frequencies
//! enter through the exact dual-number linearization of the normal form the
//! pipeline actually produced; the twist bound |∂_ξ(⟨k,ω⟩ + Ω_m − Ω_n)| ≥
//! |k|/(6b) makes that linearization the correct object for measure work.
//!
//! Index loops are exhaustive over the finite ranges after an exact pruning:
//! |Ω_n − n| ≤ ¼ confines potential violations of each family to an O(1)
//! band of sites per Fourier mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nonlinear_kam::NormalForm;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("degenerate fit ({0}); widen the ε range")]
    DegenerateFit(String),
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
}

/// One violated non-resonance condition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Violation {
    pub level: usize,
    pub class: String,
    pub k: Vec<i32>,
    pub m: Option<i64>,
    pub n: Option<i64>,
    pub divisor: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceReport {
    pub xi: Vec<f64>,
    pub accepted: bool,
    pub violations: Vec<Violation>,
}

/// Affine (exact first-order) model of the frequencies in ξ, taken from the
/// dual-number gradients of a normal form produced at a center point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizedNormalForm {
    pub b: usize,
    pub xi_center: Vec<f64>,
    pub omega0: Vec<f64>,
    /// omega_jac[i][j] = ∂ω_i/∂ξ_j
    pub omega_jac: Vec<Vec<f64>>,
    pub normal_sites: Vec<i64>,
    pub big0: Vec<f64>,
    pub big_jac: Vec<Vec<f64>>,
}

impl LinearizedNormalForm {
    pub fn from_normal_form(nf: &NormalForm, xi_center: &[f64]) -> Self {
        let b = nf.b();
        Self {
            b,
            xi_center: xi_center.to_vec(),
            omega0: nf.omega.iter().map(|w| w.value.re).collect(),
            omega_jac: nf
                .omega
                .iter()
                .map(|w| w.grad.iter().map(|g| g.re).collect())
                .collect(),
            normal_sites: nf.normal_sites.clone(),
            big0: nf.big_omega.iter().map(|o| o.value.re).collect(),
            big_jac: nf
                .big_omega
                .iter()
                .map(|o| o.grad.iter().map(|g| g.re).collect())
                .collect(),
        }
    }

    pub fn omega_at(&self, xi: &[f64]) -> Vec<f64> {
        self.omega0
            .iter()
            .zip(&self.omega_jac)
            .map(|(w0, jac)| {
                w0 + jac
                    .iter()
                    .zip(xi.iter().zip(&self.xi_center))
                    .map(|(j, (x, xc))| j * (x - xc))
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn big_omega_at_xi(&self, xi: &[f64]) -> Vec<f64> {
        self.big0
            .iter()
            .zip(&self.big_jac)
            .map(|(o0, jac)| {
                o0 + jac
                    .iter()
                    .zip(xi.iter().zip(&self.xi_center))
                    .map(|(j, (x, xc))| j * (x - xc))
                    .sum::<f64>()
            })
            .collect()
    }

    /// Smallest twist |∂_{ξ₁}(⟨k,ω⟩ + Ω_m − Ω_n)|·(6b/|k|) over the checked
    /// families, where ξ₁ is the component with |k_j| maximal; ≥ 1 certifies
    /// the paper's twist bound.
    pub fn twist_margin(&self, k_cut: i64, index_range: i64) -> f64 {
        let mut worst = f64::INFINITY;
        for k in k_modes(self.b, k_cut) {
            let kabs: i64 = k.iter().map(|x| x.unsigned_abs() as i64).sum();
            let j_star = (0..self.b)
                .max_by_key(|j| k[*j].unsigned_abs())
                .unwrap();
            let base: f64 = k
                .iter()
                .zip(&self.omega_jac)
                .map(|(kj, jac)| *kj as f64 * jac[j_star])
                .sum();
            let twist_floor = kabs as f64 / (6.0 * self.b as f64);
            // R0 family
            worst = worst.min(base.abs() / twist_floor);
            // R1 and R3 families over the in-range sites
            for (i, n) in self.normal_sites.iter().enumerate() {
                if n.abs() > index_range {
                    continue;
                }
                worst = worst.min((base + self.big_jac[i][j_star]).abs() / twist_floor);
                for (i2, n2) in self.normal_sites.iter().enumerate() {
                    if n2.abs() > index_range || i2 == i {
                        continue;
                    }
                    worst = worst
                        .min((base + self.big_jac[i][j_star] - self.big_jac[i2][j_star]).abs()
                            / twist_floor);
                }
            }
        }
        worst
    }
}

/// Thresholds of one schedule level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: usize,
    pub gamma: f64,
    /// K_{ν+1} entering the thresholds
    pub k_threshold: f64,
    /// |m|, |n| index range actually scanned (window truncation)
    pub index_range: i64,
}

/// All k ∈ ℤᵇ with 0 < |k|₁ ≤ k_cut.
fn k_modes(b: usize, k_cut: i64) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    match b {
        1 => {
            for k in -k_cut..=k_cut {
                if k != 0 {
                    out.push(vec![k as i32]);
                }
            }
        }
        2 => {
            for k1 in -k_cut..=k_cut {
                for k2 in -(k_cut - k1.abs())..=(k_cut - k1.abs()) {
                    if k1 != 0 || k2 != 0 {
                        out.push(vec![k1 as i32, k2 as i32]);
                    }
                }
            }
        }
        _ => {
            // recursive general case
            fn rec(prefix: &mut Vec<i32>, remaining: usize, budget: i64, out: &mut Vec<Vec<i32>>) {
                if remaining == 0 {
                    if prefix.iter().any(|x| *x != 0) {
                        out.push(prefix.clone());
                    }
                    return;
                }
                for k in -budget..=budget {
                    prefix.push(k as i32);
                    rec(prefix, remaining - 1, budget - k.abs(), out);
                    prefix.pop();
                }
            }
            rec(&mut Vec::new(), b, k_cut, &mut out);
        }
    }
    out
}

/// Check the four non-resonance families at one level; report-only.
///
/// Exhaustive over 0 < |k| ≤ k_cut and the in-range sites, with exact
/// pruning: a family member with |Ω-combination| > |⟨k,ω⟩| + 1 can never
/// fall below its threshold (thresholds ≤ γ < 1).
pub fn resonance_check(
    omega: &[f64],
    big: &[(i64, f64)],
    level: &LevelSpec,
    tau: f64,
    k_cut: i64,
    xi: &[f64],
) -> ResonanceReport {
    let mut violations = Vec::new();
    let b = omega.len();
    let find_site = |target: f64, slack: f64| -> Vec<usize> {
        // Ω_n ≈ n: binary search window over the sorted site list
        big.iter()
            .enumerate()
            .filter(|(_, (n, _))| ((*n as f64) - target).abs() <= slack)
            .map(|(i, _)| i)
            .collect()
    };

    for k in k_modes(b, k_cut) {
        let kabs: i64 = k.iter().map(|x| x.unsigned_abs() as i64).sum();
        let dot: f64 = k.iter().zip(omega).map(|(kj, w)| *kj as f64 * w).sum();
        let kt = (kabs as f64).powf(tau);

        let thr0 = level.gamma / kt;
        if dot.abs() < thr0 {
            violations.push(Violation {
                level: level.level,
                class: "R0".into(),
                k: k.clone(),
                m: None,
                n: None,
                divisor: dot,
                threshold: thr0,
            });
        }

        let thr1 = level.gamma / (kt * level.k_threshold);
        for i in find_site(-dot, 1.0) {
            let (n, omn) = big[i];
            if n.abs() > level.index_range {
                continue;
            }
            let div = dot + omn;
            if div.abs() < thr1 {
                violations.push(Violation {
                    level: level.level,
                    class: "R1".into(),
                    k: k.clone(),
                    m: None,
                    n: Some(n),
                    divisor: div,
                    threshold: thr1,
                });
            }
        }

        let thr2 = level.gamma / (kt * level.k_threshold * level.k_threshold);
        for (im, &(m, omm)) in big.iter().enumerate() {
            if m.abs() > level.index_range {
                continue;
            }
            // R2: Ω_m + Ω_n ≈ m + n ≈ −dot
            for i in find_site(-dot - m as f64, 1.0) {
                let (n, omn) = big[i];
                if n.abs() > level.index_range || i < im {
                    continue;
                }
                let div = dot + omm + omn;
                if div.abs() < thr2 {
                    violations.push(Violation {
                        level: level.level,
                        class: "R2".into(),
                        k: k.clone(),
                        m: Some(m),
                        n: Some(n),
                        divisor: div,
                        threshold: thr2,
                    });
                }
            }
            // R3: Ω_m − Ω_n ≈ m − n ≈ −dot
            for i in find_site(m as f64 + dot, 1.0) {
                let (n, omn) = big[i];
                if n.abs() > level.index_range || n == m {
                    continue;
                }
                let div = dot + omm - omn;
                if div.abs() < thr2 {
                    violations.push(Violation {
                        level: level.level,
                        class: "R3".into(),
                        k: k.clone(),
                        m: Some(m),
                        n: Some(n),
                        divisor: div,
                        threshold: thr2,
                    });
                }
            }
        }
    }
    ResonanceReport { xi: xi.to_vec(), accepted: violations.is_empty(), violations }
}

/// Smallest k_cut with Σ_{|k| > k_cut} γ/|k|^{τ+1} < 0.01 γ (per-family tail
/// of the §-series; converges for τ > b − 1).
pub fn default_k_cut(b: usize, tau: f64) -> i64 {
    let tail = |kc: i64| -> f64 {
        let mut t = 0.0;
        for k in (kc + 1)..(kc + 20_000) {
            let count = match b {
                1 => 2.0,
                _ => 2.0 * b as f64 * (k as f64).powi(b as i32 - 1),
            };
            t += count / (k as f64).powf(tau + 1.0);
        }
        t
    };
    let mut kc = 2;
    while tail(kc) >= 0.01 && kc < 1000 {
        kc += 1;
    }
    kc
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub gamma0: f64,
    pub samples: usize,
    pub rejected: usize,
    pub rejected_frac: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// per-level rejected fraction (a sample can appear in several levels)
    pub per_level: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
    pub tau: f64,
    pub k_cut: i64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub tau: f64,
    pub k_cut: i64,
    pub levels: usize,
    pub index_range: i64,
    pub schedule: crate::nonlinear_kam::ScheduleOptions,
}

/// Rejected-measure sweep over a nonlinearity grid. The per-ε schedule sets
/// γ_ν = ε_ν^{1/16} and K_{ν+1}; rejection is the union over levels.
pub fn measure_sweep(
    lin: &LinearizedNormalForm,
    eps_list: &[f64],
    samples: usize,
    seed: u64,
    opts: &SweepOptions,
) -> Result<SweepTable, MeasureError> {
    if samples < 1000 {
        return Err(MeasureError::TooFewSamples(1000));
    }
    let mut rows = Vec::new();
    for (ei, &eps) in eps_list.iter().enumerate() {
        let sched = crate::nonlinear_kam::build_schedule(eps, opts.levels, &opts.schedule)
            .map_err(|e| MeasureError::DegenerateFit(e.to_string()))?;
        let levels: Vec<LevelSpec> = (0..opts.levels)
            .map(|nu| LevelSpec {
                level: nu,
                gamma: sched[nu].gamma_nu,
                k_threshold: sched[nu + 1].k_nu,
                index_range: opts.index_range.min(sched[nu + 1].k_nu as i64),
            })
            .collect();

        let counts: Vec<(bool, Vec<bool>)> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b9u64.wrapping_mul(
                        (i as u64 + 1).wrapping_add((ei as u64) << 32),
                    )));
                let xi: Vec<f64> =
                    (0..lin.b).map(|_| rng.gen_range(-0.1..=0.1)).collect();
                let omega = lin.omega_at(&xi);
                let big_vals = lin.big_omega_at_xi(&xi);
                let big: Vec<(i64, f64)> = lin
                    .normal_sites
                    .iter()
                    .copied()
                    .zip(big_vals)
                    .collect();
                let per_level: Vec<bool> = levels
                    .iter()
                    .map(|lv| {
                        !resonance_check(&omega, &big, lv, opts.tau, opts.k_cut, &xi).accepted
                    })
                    .collect();
                (per_level.iter().any(|r| *r), per_level)
            })
            .collect();

        let rejected = counts.iter().filter(|(r, _)| *r).count();
        let frac = rejected as f64 / samples as f64;
        let sigma = (frac * (1.0 - frac) / samples as f64).sqrt();
        let per_level: Vec<f64> = (0..opts.levels)
            .map(|nu| {
                counts.iter().filter(|(_, pl)| pl[nu]).count() as f64 / samples as f64
            })
            .collect();
        rows.push(SweepRow {
            eps,
            gamma0: sched[0].gamma_nu,
            samples,
            rejected,
            rejected_frac: frac,
            ci_lo: (frac - 1.96 * sigma).max(0.0),
            ci_hi: (frac + 1.96 * sigma).min(1.0),
            per_level,
        });
    }

    // saturated rows (all accepted or all rejected) carry no slope signal
    let fit_rows: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.rejected > 0 && r.rejected < r.samples)
        .collect();
    if fit_rows.is_empty() {
        return Err(MeasureError::DegenerateFit(
            "all samples accepted or all rejected at every ε".into(),
        ));
    }
    let slope = if fit_rows.len() >= 2 {
        Some(log_log_slope(
            &fit_rows.iter().map(|r| r.eps).collect::<Vec<_>>(),
            &fit_rows.iter().map(|r| r.rejected_frac).collect::<Vec<_>>(),
        ))
    } else {
        None
    };
    Ok(SweepTable { rows, slope, tau: opts.tau, k_cut: opts.k_cut, seed })
}

pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}

/// Exact b = 1 oracle: the rejected set is a finite union of intervals in ξ
/// (every condition is affine in ξ); returns its measure fraction of 𝒪.
pub fn analytic_rejected_fraction_b1(
    lin: &LinearizedNormalForm,
    levels: &[LevelSpec],
    tau: f64,
    k_cut: i64,
) -> f64 {
    assert_eq!(lin.b, 1);
    let lo = -0.1;
    let hi = 0.1;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut add = |slope: f64, intercept: f64, thr: f64| {
        // |slope·ξ + intercept| < thr on [lo, hi]
        if slope.abs() < 1e-15 {
            if intercept.abs() < thr {
                intervals.push((lo, hi));
            }
            return;
        }
        let c = -intercept / slope;
        let w = thr / slope.abs();
        let a = (c - w).max(lo);
        let b = (c + w).min(hi);
        if a < b {
            intervals.push((a, b));
        }
    };

    for lv in levels {
        for k in k_modes(1, k_cut) {
            let kf = k[0] as f64;
            let kabs = k[0].unsigned_abs() as f64;
            let kt = kabs.powf(tau);
            // ω(ξ) = ω₀ + J(ξ − ξc)
            let j = lin.omega_jac[0][0];
            let w_at_zero = lin.omega0[0] - j * lin.xi_center[0];
            add(kf * j, kf * w_at_zero, lv.gamma / kt);
            let thr1 = lv.gamma / (kt * lv.k_threshold);
            let thr2 = lv.gamma / (kt * lv.k_threshold * lv.k_threshold);
            for (i, n) in lin.normal_sites.iter().enumerate() {
                if n.abs() > lv.index_range {
                    continue;
                }
                let jn = lin.big_jac[i][0];
                let on0 = lin.big0[i] - jn * lin.xi_center[0];
                add(kf * j + jn, kf * w_at_zero + on0, thr1);
                for (i2, n2) in lin.normal_sites.iter().enumerate() {
                    if n2.abs() > lv.index_range {
                        continue;
                    }
                    let jm = lin.big_jac[i2][0];
                    let om0 = lin.big0[i2] - jm * lin.xi_center[0];
                    if i2 >= i {
                        add(kf * j + jn + jm, kf * w_at_zero + on0 + om0, thr2);
                    }
                    if i2 != i {
                        add(kf * j + jn - jm, kf * w_at_zero + on0 - om0, thr2);
                    }
                }
            }
        }
    }

    // merge and measure
    intervals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in intervals {
        match cur {
            None => cur = Some((a, b)),
            Some((ca, cb)) => {
                if a <= cb {
                    cur = Some((ca, cb.max(b)));
                } else {
                    total += cb - ca;
                    cur = Some((a, b));
                }
            }
        }
    }
    if let Some((ca, cb)) = cur {
        total += cb - ca;
    }
    total / (hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_lin_at(b: usize, sites: Vec<i64>, omega_base: f64) -> LinearizedNormalForm {
        let big0: Vec<f64> = sites.iter().map(|n| *n as f64 + 0.01).collect();
        let n_sites = sites.len();
        LinearizedNormalForm {
            b,
            xi_center: vec![0.0; b],
            omega0: (0..b).map(|j| j as f64 + omega_base).collect(),
            omega_jac: (0..b)
                .map(|i| (0..b).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            normal_sites: sites,
            big0,
            big_jac: vec![vec![0.0; b]; n_sites],
        }
    }

    /// tangential frequency near site 1 (the generic pipeline situation)
    fn synthetic_lin(b: usize, sites: Vec<i64>) -> LinearizedNormalForm {
        synthetic_lin_at(b, sites, 1.05)
    }

    #[test]
    fn far_from_rationals_accepted() {
        // ω irrational far from resonances, small γ → accepted
        let omega = [std::f64::consts::SQRT_2];
        let big: Vec<(i64, f64)> = (-20..=20)
            .filter(|n| *n != 0)
            .map(|n| (n, n as f64 + 0.31 * std::f64::consts::FRAC_1_PI))
            .collect();
        let lv = LevelSpec { level: 0, gamma: 1e-6, k_threshold: 30.0, index_range: 20 };
        let report = resonance_check(&omega, &big, &lv, 2.0, 10, &[0.0]);
        assert!(report.accepted);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn planted_resonance_detected() {
        // b = 2, ⟨k, ω⟩ = 0 at k = (1, −1)
        let omega = [0.7, 0.7];
        let big: Vec<(i64, f64)> = vec![(5, 5.0), (7, 7.0)];
        let lv = LevelSpec { level: 0, gamma: 0.1, k_threshold: 10.0, index_range: 10 };
        let report = resonance_check(&omega, &big, &lv, 3.0, 4, &[0.0, 0.0]);
        assert!(!report.accepted);
        assert!(report
            .violations
            .iter()
            .any(|v| v.class == "R0" && (v.k == vec![1, -1] || v.k == vec![-1, 1])));
    }

    #[test]
    fn determinism_same_seed_same_reports() {
        let lin = synthetic_lin(1, (-30..=30).filter(|n| *n != 0).collect());
        let opts = SweepOptions {
            tau: 2.0,
            k_cut: 8,
            levels: 1,
            index_range: 16,
            schedule: Default::default(),
        };
        let a = measure_sweep(&lin, &[1e-6, 1e-9], 1000, 99, &opts).unwrap();
        let b = measure_sweep(&lin, &[1e-6, 1e-9], 1000, 99, &opts).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.rejected, rb.rejected);
            assert_eq!(ra.per_level, rb.per_level);
        }
    }

    #[test]
    fn mc_matches_analytic_oracle_within_3_sigma() {
        let lin = synthetic_lin(1, (-30..=30).filter(|n| *n != 0).collect());
        for (gamma, tau, k_cut) in [(0.05, 2.0, 6), (0.15, 2.0, 10), (0.08, 3.0, 8)] {
            let lv = LevelSpec { level: 0, gamma, k_threshold: 20.0, index_range: 16 };
            let exact = analytic_rejected_fraction_b1(&lin, &[lv], tau, k_cut);

            let samples = 20_000;
            let mut rejected = 0usize;
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..samples {
                let xi = [rng.gen_range(-0.1..=0.1)];
                let omega = lin.omega_at(&xi);
                let big_vals = lin.big_omega_at_xi(&xi);
                let big: Vec<(i64, f64)> = lin
                    .normal_sites
                    .iter()
                    .copied()
                    .zip(big_vals)
                    .collect();
                if !resonance_check(&omega, &big, &lv, tau, k_cut, &xi).accepted {
                    rejected += 1;
                }
            }
            let frac = rejected as f64 / samples as f64;
            let sigma =
                (exact.max(1e-6) * (1.0 - exact) / samples as f64).sqrt();
            assert!(
                (frac - exact).abs() <= 3.0 * sigma + 1e-12,
                "γ={gamma}: MC {frac:.5} vs exact {exact:.5} (σ={sigma:.5})"
            );
        }
    }

    #[test]
    fn ci_width_halves_with_quadruple_samples() {
        let lin = synthetic_lin(1, (-30..=30).filter(|n| *n != 0).collect());
        let opts = SweepOptions {
            tau: 2.0,
            k_cut: 8,
            levels: 1,
            index_range: 16,
            schedule: Default::default(),
        };
        let small = measure_sweep(&lin, &[1e-4], 2000, 7, &opts).unwrap();
        let large = measure_sweep(&lin, &[1e-4], 8000, 7, &opts).unwrap();
        let w_small = small.rows[0].ci_hi - small.rows[0].ci_lo;
        let w_large = large.rows[0].ci_hi - large.rows[0].ci_lo;
        // quadrupling samples halves the CI width (stochastic tolerance ±35%)
        let ratio = w_small / w_large;
        assert!(ratio > 1.3 && ratio < 3.1, "CI ratio {ratio:.2}");
    }

    #[test]
    fn saturation_when_gamma_dominates_box() {
        // tangential frequency near 0 and γ₀ > 0.2·|𝒪| side: near-total
        // rejection at level 0 through the |⟨k,ω⟩| condition
        let lin = synthetic_lin_at(1, (-30..=30).filter(|n| *n != 0).collect(), 0.05);
        let lv = LevelSpec { level: 0, gamma: 0.9, k_threshold: 10.0, index_range: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rejected = 0;
        let samples = 2000;
        for _ in 0..samples {
            let xi = [rng.gen_range(-0.1..=0.1)];
            let omega = lin.omega_at(&xi);
            let big_vals = lin.big_omega_at_xi(&xi);
            let big: Vec<(i64, f64)> =
                lin.normal_sites.iter().copied().zip(big_vals).collect();
            if !resonance_check(&omega, &big, &lv, 2.0, 8, &xi).accepted {
                rejected += 1;
            }
        }
        assert!(rejected as f64 / samples as f64 > 0.95);
    }

    #[test]
    fn default_k_cut_controls_tail() {
        let kc = default_k_cut(1, 2.0);
        // Σ_{k>kc} 2/k³ < 0.01 ⟺ roughly 1/kc² < 0.01
        assert!(kc >= 10 && kc <= 20, "k_cut = {kc}");
    }

    #[test]
    fn twist_margin_certified_for_identity_jacobian() {
        let lin = synthetic_lin(1, (-20..=20).filter(|n| *n != 0).collect());
        // ∂ω/∂ξ = 1, Ω gradients 0: |k·1| ≥ |k|/6 holds with margin 6
        let margin = lin.twist_margin(8, 16);
        assert!(margin >= 1.0, "twist margin {margin}");
    }
}
