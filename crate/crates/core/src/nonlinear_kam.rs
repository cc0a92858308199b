//! Nonlinear KAM machinery for the diagonalized Stark Hamiltonian.
//!
//! Starting from the diagonal-frame Hamiltonian Σ d_n|q_n|² + ε Σ 𝒢 qq̄qq̄,
//! action-angle variables q_n = √(I_n + y_n) e^{iθ_n} are introduced at the
//! tangential sites 𝒥, the perturbation splits into
//!
//! - P^low — at least two 𝒥-factors (after grading, 2|l| + |α+β| ≤ 2),
//! - Ṗ    — no 𝒥-factor (the invariant quartic in the normal modes),
//! - P̈    — exactly one 𝒥-factor,
//!
//! and one KAM step solves the homological equation
//!
//! {N, F} + P^low + {P^high, F}^low = N̂ + P̂
//!
//! for a degree-≤2 generator F, sector by sector in the order F^θ, F¹,
//! (F^I, F²), with divisors ⟨k,ω⟩, ⟨k,ω⟩ ± Ω_n, ⟨k,ω⟩ + Ω_m ± Ω_n screened
//! against the non-resonance thresholds γ/|k|^τ, γ/(|k|^τK₊), γ/(|k|^τK₊²).
//! Zero-average diagonal pieces move into the normal form; modes beyond K₊
//! move into the remainder P̂. The new Hamiltonian is assembled from the Lie
//! series of the time-1 flow of F with a certified geometric tail.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{CDual, DualScalar};
use crate::linear_kam::BoundCheck;
use crate::quartic::{distinct_orderings, QuarticTensor};
use crate::tf_series::{poisson_bracket, Domain, MultiIndex, TFSeries, TruncationCaps};
use crate::weighted_ops::{LatticeOperator, SiteWindow};

#[derive(Debug, Error)]
pub enum NlError {
    #[error("tangential site {site} violates |n| ≤ |ln ε|/6 = {limit:.2}")]
    SiteSizeRestriction { site: i64, limit: f64 },
    #[error("tangential sites must be distinct and nonempty")]
    BadTangentialSites,
    #[error(
        "resonance: {class} divisor {divisor:.6e} below {threshold:.6e} at k={k:?}, m={m:?}, n={n:?}"
    )]
    Resonance {
        class: String,
        k: Vec<i32>,
        m: Option<i64>,
        n: Option<i64>,
        divisor: f64,
        threshold: f64,
    },
    #[error("schedule overflow at step {nu}: K = {k:.3e} exceeds limit {limit:.3e}")]
    ScheduleOverflow { nu: usize, k: f64, limit: f64 },
    #[error("bound `{id}` violated: measured {measured:.6e} > threshold {threshold:.6e}")]
    BoundViolated { id: String, measured: f64, threshold: f64 },
    #[error("Lie series did not contract: term ratio {ratio:.3} at order {order}")]
    LieSeriesDiverging { ratio: f64, order: usize },
    #[error(transparent)]
    Tf(#[from] crate::tf_series::TfError),
}

/// Tangential configuration: the excited sites 𝒥, their disorder values ξ
/// (the parameters), initial actions y, and the nonlinearity strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TangentialConfig {
    pub j_sites: Vec<i64>,
    pub xi: Vec<f64>,
    pub y: Vec<f64>,
    pub eps: f64,
    /// Taylor order of √(I + y) in I (exact for even powers of the root).
    pub sqrt_order: usize,
}

impl TangentialConfig {
    pub fn b(&self) -> usize {
        self.j_sites.len()
    }

    pub fn validate(&self) -> Result<(), NlError> {
        if self.j_sites.is_empty() {
            return Err(NlError::BadTangentialSites);
        }
        let mut sorted = self.j_sites.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.j_sites.len() {
            return Err(NlError::BadTangentialSites);
        }
        let limit = self.eps.ln().abs() / 6.0;
        for site in &self.j_sites {
            if (site.abs() as f64) > limit {
                return Err(NlError::SiteSizeRestriction { site: *site, limit });
            }
        }
        Ok(())
    }
}

/// Normal form N = e + ⟨ω, I⟩ + Σ Ω_n q_n q̄_n with parameter gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalForm {
    pub e: CDual,
    pub j_sites: Vec<i64>,
    pub omega: Vec<CDual>,
    pub normal_sites: Vec<i64>,
    pub big_omega: Vec<CDual>,
}

impl NormalForm {
    pub fn b(&self) -> usize {
        self.j_sites.len()
    }

    pub fn omega_values(&self) -> Vec<f64> {
        self.omega.iter().map(|w| w.value.re).collect()
    }

    pub fn big_omega_at(&self, n: i64) -> Option<&CDual> {
        self.normal_sites
            .iter()
            .position(|s| *s == n)
            .map(|i| &self.big_omega[i])
    }

    /// ⟨k, ω⟩ as a dual scalar.
    pub fn k_dot_omega(&self, k: &[i32]) -> CDual {
        let b = self.b();
        let mut acc = CDual::zero(b);
        for (kj, wj) in k.iter().zip(&self.omega) {
            acc.add_assign(&wj.scale(Complex64::new(*kj as f64, 0.0)));
        }
        acc
    }

    /// Divisor ⟨k,ω⟩ + Σ_n Ω_n (α_n − β_n) for a multi-index.
    pub fn divisor(&self, idx: &MultiIndex) -> CDual {
        let mut acc = self.k_dot_omega(&idx.k);
        for (n, p) in &idx.alpha {
            if let Some(om) = self.big_omega_at(*n) {
                acc.add_assign(&om.scale(Complex64::new(*p as f64, 0.0)));
            }
        }
        for (n, p) in &idx.beta {
            if let Some(om) = self.big_omega_at(*n) {
                acc.add_assign(&om.scale(Complex64::new(-(*p as f64), 0.0)));
            }
        }
        acc
    }

    /// N as a Taylor–Fourier series (for bracket evaluation).
    pub fn to_series(&self, domain: Domain) -> TFSeries {
        let b = self.b();
        let mut s = TFSeries::zero(domain);
        s.insert(MultiIndex::constant(b), self.e.clone());
        for j in 0..b {
            let mut l = vec![0u8; b];
            l[j] = 1;
            s.insert(MultiIndex { l, ..MultiIndex::constant(b) }, self.omega[j].clone());
        }
        for (i, n) in self.normal_sites.iter().enumerate() {
            s.insert(
                MultiIndex {
                    alpha: vec![(*n, 1)],
                    beta: vec![(*n, 1)],
                    ..MultiIndex::constant(b)
                },
                self.big_omega[i].clone(),
            );
        }
        s
    }

    /// Assumption A/B deviations: (max_j,n |∂ω*_n/∂ξ_j − δ_jn|,
    /// min separation of Ω, max |∂Ω*_n/∂ξ_j|).
    pub fn assumption_deviations(&self) -> (f64, f64, f64) {
        let mut a_dev = 0.0f64;
        for (i, w) in self.omega.iter().enumerate() {
            for (j, g) in w.grad.iter().enumerate() {
                let kron = if i == j { 1.0 } else { 0.0 };
                a_dev = a_dev.max((g - Complex64::new(kron, 0.0)).norm());
            }
        }
        let mut sep = f64::INFINITY;
        let mut vals: Vec<f64> = self.big_omega.iter().map(|o| o.value.re).collect();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for w in vals.windows(2) {
            sep = sep.min(w[1] - w[0]);
        }
        let mut b_dev = 0.0f64;
        for o in &self.big_omega {
            for g in &o.grad {
                b_dev = b_dev.max(g.norm());
            }
        }
        (a_dev, sep, b_dev)
    }
}

/// ν-indexed iteration schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub nu: usize,
    pub eps_nu: f64,
    pub k_nu: f64,
    pub rho_nu: f64,
    pub s_nu: f64,
    pub r_nu: f64,
    pub gamma_nu: f64,
    pub c: f64,
}

/// Schedule parameters with overridable constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub c: f64,
    pub s0: f64,
    pub r0: f64,
    pub rho0: f64,
    /// reject when K_ν exceeds this (the usable index range of the window)
    pub k_limit: f64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self { c: 1.0, s0: 0.1, r0: 0.5, rho0: 0.125, k_limit: 1e18 }
    }
}

/// ε_ν = c ε_{ν−1}^{5/4}, K_ν = 2|ln ε_{ν−1}|K_{ν−1} (K₀ = 2|ln ε₀|),
/// ρ_ν = 1/K_ν, γ_ν = ε_ν^{1/16}, s_ν = s₀(1 − Σ_{i=2}^{ν+1} 2^{−i}).
pub fn build_schedule(
    eps0: f64,
    steps: usize,
    opts: &ScheduleOptions,
) -> Result<Vec<IterationSchedule>, NlError> {
    assert!(eps0 > 0.0 && eps0 < 1.0, "need 0 < eps0 < 1");
    let mut out = Vec::with_capacity(steps + 1);
    let mut eps = eps0;
    let mut k = (2.0 * eps0.ln().abs()).ceil();
    for nu in 0..=steps {
        if nu > 0 {
            let prev = eps;
            eps = opts.c * prev.powf(1.25);
            k = (2.0 * prev.ln().abs() * k).ceil();
        }
        if !k.is_finite() || k > opts.k_limit {
            return Err(NlError::ScheduleOverflow { nu, k, limit: opts.k_limit });
        }
        let geom: f64 = (2..=nu + 1).map(|i| (2.0f64).powi(-(i as i32))).sum();
        out.push(IterationSchedule {
            nu,
            eps_nu: eps,
            k_nu: k,
            rho_nu: if nu == 0 { opts.rho0 } else { 1.0 / k },
            s_nu: opts.s0 * (1.0 - geom),
            r_nu: opts.r0 * (1.0 - geom),
            gamma_nu: eps.powf(1.0 / 16.0),
            c: opts.c,
        });
    }
    Ok(out)
}

/// Working Hamiltonian H = N + P^low + P^high at one iteration level.
#[derive(Debug, Clone)]
pub struct NlHamiltonian {
    pub normal_form: NormalForm,
    pub p_low: TFSeries,
    pub p_high: TFSeries,
    /// the invariant quartic Ṗ (subset of p_high, kept for decay checks)
    pub p_dot: TFSeries,
    pub domain: Domain,
    pub caps: TruncationCaps,
    /// cumulative reported truncation mass (√ expansion, caps, pruning)
    pub truncation_mass: f64,
}

impl NlHamiltonian {
    pub fn p_ddot(&self) -> TFSeries {
        self.p_high.sub(&self.p_dot).unwrap_or_else(|_| self.p_high.clone())
    }
}

/// Output of the action-angle reduction with the paper-classified parts.
#[derive(Debug, Clone)]
pub struct ActionAngleReduction {
    pub normal_form: NormalForm,
    /// ≥ 2 tangential factors (all I-powers)
    pub p_low: TFSeries,
    /// no tangential factor
    pub p_dot: TFSeries,
    /// exactly one tangential factor
    pub p_ddot: TFSeries,
    pub checks: Vec<BoundCheck>,
    pub truncation_mass: f64,
}

impl ActionAngleReduction {
    /// Regrade into the Assumption-D split 2|l| + |α+β| ≤ 2 vs ≥ 3.
    pub fn into_hamiltonian(self, caps: TruncationCaps) -> NlHamiltonian {
        let all = self
            .p_low
            .add(&self.p_dot)
            .and_then(|s| s.add(&self.p_ddot))
            .expect("same domain");
        let p_low = all.filter(|idx| idx.degree() <= 2);
        let p_high = all.filter(|idx| idx.degree() >= 3);
        NlHamiltonian {
            normal_form: self.normal_form,
            p_low,
            p_high,
            p_dot: self.p_dot.filter(|idx| idx.degree() >= 3),
            domain: self.p_dot.domain,
            caps,
            truncation_mass: self.truncation_mass,
        }
    }
}

/// Generalized binomial coefficient C(p, j) for the √(I+y) expansion.
fn gen_binom(p: f64, j: usize) -> f64 {
    let mut c = 1.0;
    for i in 0..j {
        c *= (p - i as f64) / (i as f64 + 1.0);
    }
    c
}

/// Substitute q_n = √(I_n + y_n) e^{iθ_n} at the tangential sites and
/// classify every quartic term by its count of 𝒥-indices. Asserts the
/// coefficient decay ‖P^low_αβ‖, ‖P̈_αβ‖ ≤ √ε e^{−n*/8} and
/// ‖Ṗ_αβ‖ ≤ √ε e^{−(n⁺−n⁻)/8}.
pub fn action_angle_reduce(
    tensor: &QuarticTensor,
    eigenvalues: &[DualScalar],
    cfg: &TangentialConfig,
    domain: Domain,
    strict: bool,
) -> Result<ActionAngleReduction, NlError> {
    cfg.validate()?;
    let b = cfg.b();
    assert_eq!(domain.b, b);
    assert_eq!(eigenvalues.len(), tensor.support.len());

    let site_index = |n: i64| -> usize { (n - tensor.support.lo) as usize };
    let j_pos = |n: i64| -> Option<usize> { cfg.j_sites.iter().position(|s| *s == n) };

    // normal form from the linear eigenvalues
    let dual_at = |n: i64| CDual::from_real_dual(&eigenvalues[site_index(n)]);
    let mut e = CDual::zero(b);
    let mut omega = Vec::with_capacity(b);
    for (j, site) in cfg.j_sites.iter().enumerate() {
        let d = dual_at(*site);
        e.add_assign(&d.scale(Complex64::new(cfg.y[j], 0.0)));
        omega.push(d);
    }
    let normal_sites: Vec<i64> = tensor
        .support
        .sites()
        .filter(|n| j_pos(*n).is_none())
        .collect();
    let big_omega: Vec<CDual> = normal_sites.iter().map(|n| dual_at(*n)).collect();
    let normal_form = NormalForm {
        e,
        j_sites: cfg.j_sites.clone(),
        omega,
        normal_sites: normal_sites.clone(),
        big_omega,
    };

    let mut p_low = TFSeries::zero(domain);
    let mut p_dot = TFSeries::zero(domain);
    let mut p_ddot = TFSeries::zero(domain);
    let mut truncation_mass = 0.0;

    for (key, coeff) in tensor.iter() {
        let base = CDual {
            value: Complex64::new(coeff.value * cfg.eps, 0.0),
            grad: coeff
                .grad
                .iter()
                .map(|g| Complex64::new(g * cfg.eps, 0.0))
                .collect(),
        };
        for p in distinct_orderings(key) {
            // ordered (m, m1, m2, m3): monomial q_{m1} q̄_{m2} q_{m3} q̄_m
            let holo = [p[1], p[3]];
            let anti = [p[2], p[0]];
            let j_count = p.iter().filter(|n| j_pos(**n).is_some()).count();

            // tangential exponent bookkeeping: k_j from the phases,
            // t_j = number of √(I_j + y_j) factors
            let mut k = vec![0i32; b];
            let mut t = vec![0u32; b];
            let mut alpha: Vec<(i64, u8)> = Vec::new();
            let mut beta: Vec<(i64, u8)> = Vec::new();
            for site in holo {
                match j_pos(site) {
                    Some(j) => {
                        k[j] += 1;
                        t[j] += 1;
                    }
                    None => alpha.push((site, 1)),
                }
            }
            for site in anti {
                match j_pos(site) {
                    Some(j) => {
                        k[j] -= 1;
                        t[j] += 1;
                    }
                    None => beta.push((site, 1)),
                }
            }
            alpha.sort_unstable();
            beta.sort_unstable();
            let alpha = merge_powers(&alpha);
            let beta = merge_powers(&beta);

            // Π_j (I_j + y_j)^{t_j/2} expanded to `sqrt_order` in each I_j
            let mut expansion: Vec<(Vec<u8>, f64)> = vec![(vec![0u8; b], 1.0)];
            for j in 0..b {
                if t[j] == 0 {
                    continue;
                }
                let pw = t[j] as f64 / 2.0;
                let max_l = if (t[j] % 2) == 0 {
                    (t[j] / 2) as usize
                } else {
                    cfg.sqrt_order
                };
                let mut next = Vec::with_capacity(expansion.len() * (max_l + 1));
                for (l, factor) in &expansion {
                    for lj in 0..=max_l {
                        let cjl = gen_binom(pw, lj) * cfg.y[j].powf(pw - lj as f64);
                        let mut nl = l.clone();
                        nl[j] += lj as u8;
                        next.push((nl, factor * cjl));
                    }
                    // truncated mass of the √ expansion (odd powers only)
                    if (t[j] % 2) == 1 {
                        let tail = gen_binom(pw, max_l + 1).abs()
                            * cfg.y[j].powf(pw - (max_l + 1) as f64)
                            * (domain.s * domain.s).powi((max_l + 1) as i32)
                            / (1.0 - domain.s * domain.s / cfg.y[j]);
                        truncation_mass += base.mag_with_grad() * factor.abs() * tail;
                    }
                }
                expansion = next;
            }

            let target = match j_count {
                0 => &mut p_dot,
                1 => &mut p_ddot,
                _ => &mut p_low,
            };
            for (l, factor) in expansion {
                let idx = MultiIndex {
                    k: k.clone(),
                    l,
                    alpha: alpha.clone(),
                    beta: beta.clone(),
                };
                target.insert(idx, base.scale(Complex64::new(factor, 0.0)));
            }
        }
    }

    // decay checks (families of the three classified parts)
    let mut checks = Vec::new();
    let sqrt_eps = cfg.eps.sqrt();
    let mut low_excess = f64::NEG_INFINITY;
    for (alpha, beta) in p_low.families() {
        let idx_star = family_n_star(&alpha, &beta);
        let bound = sqrt_eps * (-(idx_star as f64) / 8.0).exp();
        low_excess = low_excess.max(p_low.family_norm(&alpha, &beta) - bound);
    }
    let mut ddot_excess = f64::NEG_INFINITY;
    for (alpha, beta) in p_ddot.families() {
        let idx_star = family_n_star(&alpha, &beta);
        let bound = sqrt_eps * (-(idx_star as f64) / 8.0).exp();
        ddot_excess = ddot_excess.max(p_ddot.family_norm(&alpha, &beta) - bound);
    }
    let mut dot_excess = f64::NEG_INFINITY;
    for (alpha, beta) in p_dot.families() {
        let (lo, hi) = family_span(&alpha, &beta);
        let bound = sqrt_eps * (-((hi - lo) as f64) / 8.0).exp();
        dot_excess = dot_excess.max(p_dot.family_norm(&alpha, &beta) - bound);
    }
    for (id, excess) in [
        ("p_low_decay", low_excess),
        ("p_ddot_decay", ddot_excess),
        ("p_dot_decay", dot_excess),
    ] {
        let check = BoundCheck::new(id, 0, excess.max(-1.0), 0.0);
        if strict && !check.passed {
            return Err(NlError::BoundViolated {
                id: id.to_string(),
                measured: excess,
                threshold: 0.0,
            });
        }
        checks.push(check);
    }

    Ok(ActionAngleReduction { normal_form, p_low, p_dot, p_ddot, checks, truncation_mass })
}

fn merge_powers(sorted: &[(i64, u8)]) -> Vec<(i64, u8)> {
    let mut out: Vec<(i64, u8)> = Vec::with_capacity(sorted.len());
    for (n, p) in sorted {
        if let Some(last) = out.last_mut() {
            if last.0 == *n {
                last.1 += p;
                continue;
            }
        }
        out.push((*n, *p));
    }
    out
}

fn family_n_star(alpha: &[(i64, u8)], beta: &[(i64, u8)]) -> i64 {
    alpha
        .iter()
        .chain(beta.iter())
        .map(|(n, _)| n.abs())
        .max()
        .unwrap_or(0)
}

fn family_span(alpha: &[(i64, u8)], beta: &[(i64, u8)]) -> (i64, i64) {
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for (n, _) in alpha.iter().chain(beta.iter()) {
        lo = lo.min(*n);
        hi = hi.max(*n);
    }
    if lo == i64::MAX {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// Non-resonance thresholds and truncation ranges for one solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveParams {
    pub gamma: f64,
    pub tau: f64,
    /// K₊ entering the small-divisor thresholds (the schedule value)
    pub k_plus_threshold: f64,
    /// index range |n| ≤ K₊ actually solved for (min of schedule and window)
    pub k_plus_range: i64,
    /// tolerance on the gauge-forced zero coefficients of Eq. (gau1)
    pub gauge_tol: f64,
}

/// Increment (ê, ω̂, Ω̂) harvested from the zero-average terms.
#[derive(Debug, Clone)]
pub struct NormalFormDelta {
    pub e_hat: CDual,
    pub omega_hat: Vec<CDual>,
    /// aligned with the parent normal form's `normal_sites`
    pub big_omega_hat: Vec<CDual>,
}

impl NormalFormDelta {
    fn zero(nf: &NormalForm) -> Self {
        let b = nf.b();
        Self {
            e_hat: CDual::zero(b),
            omega_hat: vec![CDual::zero(b); b],
            big_omega_hat: vec![CDual::zero(b); nf.normal_sites.len()],
        }
    }

    pub fn to_series(&self, nf: &NormalForm, domain: Domain) -> TFSeries {
        let nf2 = NormalForm {
            e: self.e_hat.clone(),
            j_sites: nf.j_sites.clone(),
            omega: self.omega_hat.clone(),
            normal_sites: nf.normal_sites.clone(),
            big_omega: self.big_omega_hat.clone(),
        };
        nf2.to_series(domain)
    }

    pub fn max_omega_hat(&self) -> f64 {
        self.omega_hat.iter().map(|c| c.mag_with_grad()).fold(0.0, f64::max)
    }
}

/// Generator F, normal-form increment, and remainder P̂ of one solve.
#[derive(Debug, Clone)]
pub struct HomologicalSolution {
    pub f: TFSeries,
    pub nhat: NormalFormDelta,
    pub phat: TFSeries,
    /// ‖{N,F} + P^low + {P^high,F}^low − N̂ − P̂‖ evaluated by direct brackets
    pub residual_norm: f64,
    /// max |k=0 coefficient| of the gauge-forced-zero q¹ sector (Eq. gau1)
    pub gauge_zero_defect: f64,
    pub bracket_dropped_mass: f64,
}

enum Route {
    EHat,
    OmegaHat(usize),
    BigOmegaHat(i64),
    PHat,
    GaugeZero,
    Solve { class: &'static str, threshold_scale: ThresholdScale },
}

enum ThresholdScale {
    R0,
    R1,
    R2,
    /// k = 0 off-diagonal q² sector: separation guard, no γ-threshold
    Separation,
}

fn classify(idx: &MultiIndex, params: &SolveParams) -> Route {
    let k_zero = idx.k.iter().all(|x| *x == 0);
    let qd = idx.q_degree();
    if qd == 0 {
        if k_zero {
            if idx.l_total() == 0 {
                return Route::EHat;
            }
            // l = e_j sector
            let j = idx.l.iter().position(|x| *x == 1).unwrap();
            return Route::OmegaHat(j);
        }
        return Route::Solve { class: "R0", threshold_scale: ThresholdScale::R0 };
    }
    if qd == 1 {
        let site = idx
            .alpha
            .first()
            .or(idx.beta.first())
            .map(|(n, _)| *n)
            .unwrap();
        if site.abs() > params.k_plus_range {
            return Route::PHat;
        }
        if k_zero {
            return Route::GaugeZero;
        }
        return Route::Solve { class: "R1", threshold_scale: ThresholdScale::R1 };
    }
    // q-degree 2
    let max_site = idx
        .alpha
        .iter()
        .chain(idx.beta.iter())
        .map(|(n, _)| n.abs())
        .max()
        .unwrap();
    if max_site > params.k_plus_range {
        return Route::PHat;
    }
    let diag = idx.alpha.len() == 1
        && idx.alpha == idx.beta
        && idx.alpha[0].1 == 1;
    if k_zero && diag {
        let n = idx.alpha[0].0;
        return Route::BigOmegaHat(n);
    }
    if k_zero {
        return Route::Solve { class: "R3", threshold_scale: ThresholdScale::Separation };
    }
    let same_sign = idx.alpha.is_empty() || idx.beta.is_empty();
    if same_sign {
        Route::Solve { class: "R2", threshold_scale: ThresholdScale::R2 }
    } else {
        Route::Solve { class: "R3", threshold_scale: ThresholdScale::R2 }
    }
}

/// Solve {N,F} + P^low + {P^high,F}^low = N̂ + P̂ sector by sector
/// (F^θ first, then F¹, then F^I and F² — later right-hand sides contain
/// brackets with earlier unknowns).
pub fn solve_homological(
    nf: &NormalForm,
    p_low: &TFSeries,
    p_high: &TFSeries,
    params: &SolveParams,
    caps: &TruncationCaps,
) -> Result<HomologicalSolution, NlError> {
    let domain = p_low.domain;
    let _ = domain.b;
    let mut f = TFSeries::zero(domain);
    let mut phat = TFSeries::zero(domain);
    let mut nhat = NormalFormDelta::zero(nf);
    let mut gauge_zero_defect = 0.0f64;
    let mut bracket_dropped = 0.0;

    let minus_i = Complex64::new(0.0, -1.0);
    let solve_sector = |rhs: &TFSeries,
                            sector: &dyn Fn(&MultiIndex) -> bool,
                            f: &mut TFSeries,
                            phat: &mut TFSeries,
                            nhat: &mut NormalFormDelta,
                            gauge_defect: &mut f64|
     -> Result<(), NlError> {
        for (idx, coeff) in rhs.iter() {
            if !sector(idx) {
                continue;
            }
            match classify(idx, params) {
                Route::EHat => nhat.e_hat.add_assign(coeff),
                Route::OmegaHat(j) => nhat.omega_hat[j].add_assign(coeff),
                Route::BigOmegaHat(n) => {
                    if let Some(i) = nf.normal_sites.iter().position(|s| *s == n) {
                        nhat.big_omega_hat[i].add_assign(coeff);
                    } else {
                        phat.insert(idx.clone(), coeff.clone());
                    }
                }
                Route::PHat => phat.insert(idx.clone(), coeff.clone()),
                Route::GaugeZero => {
                    *gauge_defect = gauge_defect.max(coeff.mag_with_grad());
                    // gauge-invariant input forces these to vanish; the noise
                    // is recorded, not solved
                }
                Route::Solve { class, threshold_scale } => {
                    let div = nf.divisor(idx);
                    let dval = div.value.re.abs();
                    let kabs = idx.k_abs() as f64;
                    let threshold = match threshold_scale {
                        ThresholdScale::R0 => params.gamma / kabs.powf(params.tau),
                        ThresholdScale::R1 => {
                            params.gamma / (kabs.powf(params.tau) * params.k_plus_threshold)
                        }
                        ThresholdScale::R2 => {
                            params.gamma
                                / (kabs.powf(params.tau)
                                    * params.k_plus_threshold
                                    * params.k_plus_threshold)
                        }
                        ThresholdScale::Separation => 0.4,
                    };
                    if dval <= threshold {
                        let (m, n) = two_sites(idx);
                        return Err(NlError::Resonance {
                            class: class.to_string(),
                            k: idx.k.clone(),
                            m,
                            n,
                            divisor: div.value.re,
                            threshold,
                        });
                    }
                    // −i D F + RHS = 0 on solved sectors ⟹ F = −i·RHS/D
                    f.insert(idx.clone(), coeff.div(&div).scale(minus_i));
                }
            }
        }
        Ok(())
    };

    // F^θ from the degree-0 sector of P^low
    let deg0 = |idx: &MultiIndex| idx.degree() == 0;
    solve_sector(p_low, &deg0, &mut f, &mut phat, &mut nhat, &mut gauge_zero_defect)?;
    let f_theta = f.clone();

    // F¹ from the q-degree-1 sector of P^low + {P^high, F^θ}
    let br_theta = poisson_bracket(p_high, &f_theta, caps)?;
    bracket_dropped += br_theta.dropped_mass;
    let rhs_theta = br_theta.series.filter(|idx| idx.degree() <= 2);
    let rhs1 = p_low.add(&rhs_theta)?;
    let q1 = |idx: &MultiIndex| idx.degree() > 0 && idx.q_degree() == 1;
    solve_sector(&rhs1, &q1, &mut f, &mut phat, &mut nhat, &mut gauge_zero_defect)?;
    let f1 = f.filter(|idx| idx.q_degree() == 1);

    // F^I and F² from P^low + {P^high, F^θ + F¹}
    let br_1 = poisson_bracket(p_high, &f1, caps)?;
    bracket_dropped += br_1.dropped_mass;
    let rhs_full = rhs1.add(&br_1.series.filter(|idx| idx.degree() <= 2))?;
    let rest = |idx: &MultiIndex| {
        idx.degree() > 0 && idx.q_degree() != 1 && idx.degree() <= 2
    };
    solve_sector(&rhs_full, &rest, &mut f, &mut phat, &mut nhat, &mut gauge_zero_defect)?;

    // gauge invariance of F (noise filtered, residual recorded)
    let (f, gauge_noise) = f.gauge_filter();
    let gauge_zero_defect = gauge_zero_defect.max(gauge_noise);

    // residual of the homological identity by direct bracket evaluation
    let n_series = nf.to_series(domain);
    let lie_nf = poisson_bracket(&n_series, &f, &TruncationCaps::unlimited())?;
    let lie_hi = poisson_bracket(p_high, &f, caps)?;
    let residual = lie_nf
        .series
        .add(p_low)?
        .add(&lie_hi.series.filter(|idx| idx.degree() <= 2))?
        .sub(&nhat.to_series(nf, domain))?
        .sub(&phat)?;
    let residual_norm = residual.norm();

    Ok(HomologicalSolution {
        f,
        nhat,
        phat,
        residual_norm,
        gauge_zero_defect,
        bracket_dropped_mass: bracket_dropped,
    })
}

fn two_sites(idx: &MultiIndex) -> (Option<i64>, Option<i64>) {
    let mut sites = Vec::new();
    for (n, p) in idx.alpha.iter().chain(idx.beta.iter()) {
        for _ in 0..*p {
            sites.push(*n);
        }
    }
    (sites.first().copied(), sites.get(1).copied())
}

/// Per-step report: named bound verdicts plus generator statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub nu: usize,
    pub checks: Vec<BoundCheck>,
    pub f_terms: usize,
    pub f_norm: f64,
    pub xf_norm: f64,
    pub residual_norm: f64,
    pub gauge_zero_defect: f64,
    pub x_p_low: f64,
    pub x_p_low_next: f64,
    pub x_p_high_next: f64,
    pub contraction_c: f64,
    pub lie_orders: usize,
    pub truncation_mass: f64,
}

/// Options for one nonlinear KAM step.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub tau: f64,
    /// cap on the solved index range (desk-scale truncation)
    pub k_range_cap: i64,
    pub gauge_tol: f64,
    /// Lie series truncation: stop when a term's norm falls below
    /// `lie_tail_factor · ε_{ν+1}`
    pub lie_tail_factor: f64,
    pub lie_max_order: usize,
    /// fitted constant in ‖X_{P^low₊}‖ ≤ c ε^{5/4}
    pub c_low: f64,
    pub strict: bool,
    /// drop series terms with norm contribution below this, reported
    pub series_prune: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            tau: 2.0,
            k_range_cap: 16,
            gauge_tol: 1e-12,
            lie_tail_factor: 1e-3,
            lie_max_order: 12,
            c_low: 10.0,
            strict: true,
            series_prune: 1e-14,
        }
    }
}

fn prune_series(s: &mut TFSeries, tol: f64) -> f64 {
    let doomed: Vec<MultiIndex> = s
        .iter()
        .filter(|(idx, c)| c.mag_with_grad() * s.domain.term_weight(idx) < tol)
        .map(|(idx, _)| idx.clone())
        .collect();
    let mut dropped = 0.0;
    let mut out = TFSeries::zero(s.domain);
    for (idx, c) in s.iter() {
        if doomed.binary_search(idx).is_ok() {
            dropped += c.mag_with_grad() * s.domain.term_weight(idx);
        } else {
            out.insert(idx.clone(), c.clone());
        }
    }
    *s = out;
    dropped
}

/// One nonlinear KAM step ν → ν+1: solve, transform, re-split, verify.
pub fn kam_nonlinear_step(
    ham: &NlHamiltonian,
    sched_now: &IterationSchedule,
    sched_next: &IterationSchedule,
    opts: &StepOptions,
) -> Result<(NlHamiltonian, HomologicalSolution, StepReport), NlError> {
    let nf = &ham.normal_form;
    let eps_now = sched_now.eps_nu;
    let eps_next = sched_next.eps_nu;
    let params = SolveParams {
        gamma: sched_now.gamma_nu,
        tau: opts.tau,
        k_plus_threshold: sched_next.k_nu,
        k_plus_range: (sched_next.k_nu as i64).min(opts.k_range_cap),
        gauge_tol: opts.gauge_tol,
    };
    let sol = solve_homological(nf, &ham.p_low, &ham.p_high, &params, &ham.caps)?;

    let mut checks = Vec::new();
    let push = |checks: &mut Vec<BoundCheck>, c: BoundCheck| -> Result<(), NlError> {
        let bad = !c.passed;
        let (id, measured, threshold) = (c.id.clone(), c.measured, c.threshold);
        checks.push(c);
        if opts.strict && bad {
            return Err(NlError::BoundViolated { id, measured, threshold });
        }
        Ok(())
    };

    push(&mut checks, BoundCheck::new("homological_residual", sched_now.nu, sol.residual_norm, 1e-9))?;
    push(
        &mut checks,
        BoundCheck::new("gauge_zero_coefficients", sched_now.nu, sol.gauge_zero_defect, opts.gauge_tol),
    )?;

    // N₊ = N + N̂
    let mut nf_next = nf.clone();
    nf_next.e.add_assign(&sol.nhat.e_hat);
    for (w, dw) in nf_next.omega.iter_mut().zip(&sol.nhat.omega_hat) {
        w.add_assign(dw);
    }
    for (o, od) in nf_next.big_omega.iter_mut().zip(&sol.nhat.big_omega_hat) {
        o.add_assign(od);
    }

    // frequency drift bounds (Lemma 5.1 items)
    push(
        &mut checks,
        BoundCheck::new(
            "omega_drift",
            sched_now.nu,
            sol.nhat.max_omega_hat(),
            eps_now.powf(5.0 / 6.0),
        ),
    )?;
    let mut om_excess = f64::NEG_INFINITY;
    for (i, n) in nf.normal_sites.iter().enumerate() {
        let drift = sol.nhat.big_omega_hat[i].mag_with_grad();
        let bound = eps_now.powf(5.0 / 6.0) * (-sched_now.rho_nu * n.abs() as f64).exp();
        om_excess = om_excess.max(drift - bound);
    }
    push(
        &mut checks,
        BoundCheck::new("big_omega_drift", sched_now.nu, om_excess.max(-1.0), 0.0),
    )?;

    // Lie-series assembly of the transformed Hamiltonian:
    // P₊ = P̂ + P^high + {P^high,F}^high + Σ_{m≥2} ad^m(N)/m!
    //        + Σ_{m≥1} ad^m(P^low)/m! + Σ_{m≥2} ad^m(P^high)/m!
    let n_series = nf.to_series(ham.domain);
    let lie_tol = opts.lie_tail_factor * eps_next;
    let mut truncation_mass = ham.truncation_mass;

    let mut p_plus = sol.phat.clone();
    let br_high = poisson_bracket(&ham.p_high, &sol.f, &ham.caps)?;
    truncation_mass += br_high.dropped_mass;
    p_plus = p_plus.add(&ham.p_high)?;
    p_plus = p_plus.add(&br_high.series.filter(|idx| idx.degree() >= 3))?;

    let mut lie_orders = 0usize;
    for (start_order, series) in [
        (2usize, n_series),
        (1, ham.p_low.clone()),
        (2, ham.p_high.clone()),
    ] {
        let mut ad = series;
        let mut factorial = 1.0f64;
        let mut prev_contrib = f64::INFINITY;
        for order in 1..=opts.lie_max_order {
            let br = poisson_bracket(&ad, &sol.f, &ham.caps)?;
            truncation_mass += br.dropped_mass;
            ad = br.series;
            factorial *= order as f64;
            let contrib_norm = ad.norm() / factorial;
            if order >= start_order {
                p_plus = p_plus.add(&ad.scale(Complex64::new(1.0 / factorial, 0.0)))?;
                lie_orders = lie_orders.max(order);
                let ratio = contrib_norm / prev_contrib;
                if contrib_norm < lie_tol {
                    if ratio < 0.5 {
                        // certified geometric tail: remaining ≤ contrib·ratio/(1−ratio)
                        truncation_mass += contrib_norm * ratio / (1.0 - ratio);
                        break;
                    }
                } else if order == opts.lie_max_order {
                    return Err(NlError::LieSeriesDiverging { ratio, order });
                }
                prev_contrib = contrib_norm;
            }
            if ad.is_empty() {
                break;
            }
        }
    }

    // domain shrink and re-split
    let domain_next = Domain {
        b: ham.domain.b,
        r: sched_next.r_nu,
        s: sched_next.s_nu,
        d: ham.domain.d,
        rho: sched_next.rho_nu,
    };
    p_plus.domain = domain_next;
    truncation_mass += prune_series(&mut p_plus, opts.series_prune);

    let mut p_low_next = p_plus.filter(|idx| idx.degree() <= 2);
    let p_high_next = p_plus.filter(|idx| idx.degree() >= 3);
    // the constant (k=0, degree-0) average belongs to e₊, not to P₊
    let const_idx = MultiIndex::constant(ham.domain.b);
    let c0 = p_low_next.coeff(&const_idx);
    nf_next.e.add_assign(&c0);
    p_low_next = p_low_next.filter(|idx| *idx != const_idx);

    let mut p_dot_next = ham.p_dot.clone();
    p_dot_next.domain = domain_next;

    // measured norms and the remaining Lemma 5.1 items
    let mut p_low_now = ham.p_low.clone();
    let x_p_low = p_low_now.vector_field_norm();
    p_low_now.domain = ham.domain;
    let x_p_low_next = p_low_next.vector_field_norm();
    let x_p_high_next = p_high_next.vector_field_norm();
    let xf_norm = sol.f.vector_field_norm();

    push(
        &mut checks,
        BoundCheck::new("x_p_low_plus", sched_now.nu, x_p_low_next, opts.c_low * eps_now.powf(1.25)),
    )?;
    push(&mut checks, BoundCheck::new("x_p_high_plus", sched_now.nu, x_p_high_next, 2.0))?;

    // decay propagation (Lemma 5.5–5.9 pattern): ‖{P,F}_αβ‖ ≤ ε^{4/5} e^{−ρ n*}
    let p_all = ham.p_low.add(&ham.p_high)?;
    let br_all = poisson_bracket(&p_all, &sol.f, &ham.caps)?;
    let mut pf_excess = f64::NEG_INFINITY;
    for (alpha, beta) in br_all.series.families() {
        let ns = family_n_star(&alpha, &beta);
        let bound = eps_now.powf(0.8) * (-sched_now.rho_nu * ns as f64).exp();
        pf_excess = pf_excess.max(br_all.series.family_norm(&alpha, &beta) - bound);
    }
    push(
        &mut checks,
        BoundCheck::new("bracket_decay", sched_now.nu, pf_excess.max(-1.0), 0.0),
    )?;

    // P̈₊ decay: ‖P̈₊_αβ‖ ≤ 2 e^{−ρ₊ n*}
    let p_ddot_next = p_high_next.sub(&p_dot_next)?;
    let mut ddot_excess = f64::NEG_INFINITY;
    for (alpha, beta) in p_ddot_next.families() {
        let ns = family_n_star(&alpha, &beta);
        let bound = 2.0 * (-sched_next.rho_nu * ns as f64).exp();
        ddot_excess = ddot_excess.max(p_ddot_next.family_norm(&alpha, &beta) - bound);
    }
    push(
        &mut checks,
        BoundCheck::new("p_ddot_plus_decay", sched_now.nu, ddot_excess.max(-1.0), 0.0),
    )?;

    let contraction_c = x_p_low_next / x_p_low.powf(1.25);
    let report = StepReport {
        nu: sched_now.nu,
        checks,
        f_terms: sol.f.len(),
        f_norm: sol.f.norm(),
        xf_norm,
        residual_norm: sol.residual_norm,
        gauge_zero_defect: sol.gauge_zero_defect,
        x_p_low,
        x_p_low_next,
        x_p_high_next,
        contraction_c,
        lie_orders,
        truncation_mass,
    };

    let ham_next = NlHamiltonian {
        normal_form: nf_next,
        p_low: p_low_next,
        p_high: p_high_next,
        p_dot: p_dot_next,
        domain: domain_next,
        caps: ham.caps,
        truncation_mass,
    };
    Ok((ham_next, sol, report))
}

/// Phase-space point on the reality slice.
#[derive(Debug, Clone)]
pub struct TorusPoint {
    pub theta: Vec<f64>,
    pub actions: Vec<f64>,
    pub q: BTreeMap<i64, Complex64>,
}

/// Time-1 flow of a generator F: θ̇ = ∂_I F, İ = −∂_θ F, q̇ = i ∂_q̄ F,
/// integrated with RK4 substeps (the field is O(ε^{5/6})-small).
pub struct GeneratorFlow {
    d_theta: Vec<TFSeries>,
    d_i: Vec<TFSeries>,
    d_qbar: Vec<(i64, TFSeries)>,
    pub substeps: usize,
}

impl GeneratorFlow {
    pub fn new(f: &TFSeries, substeps: usize) -> Self {
        let b = f.domain.b;
        let d_theta = (0..b).map(|j| f.partial_theta(j)).collect();
        let d_i = (0..b).map(|j| f.partial_i(j)).collect();
        let d_qbar = f
            .q_support()
            .into_iter()
            .map(|n| (n, f.partial_qbar(n)))
            .collect();
        Self { d_theta, d_i, d_qbar, substeps }
    }

    fn field(&self, p: &TorusPoint) -> (Vec<f64>, Vec<f64>, BTreeMap<i64, Complex64>) {
        let b = p.theta.len();
        let mut dtheta = vec![0.0; b];
        let mut dact = vec![0.0; b];
        for j in 0..b {
            dtheta[j] = self.d_i[j].eval(&p.theta, &p.actions, &p.q).re;
            dact[j] = -self.d_theta[j].eval(&p.theta, &p.actions, &p.q).re;
        }
        let mut dq = BTreeMap::new();
        for (n, dfq) in &self.d_qbar {
            let v = dfq.eval(&p.theta, &p.actions, &p.q);
            dq.insert(*n, Complex64::i() * v);
        }
        (dtheta, dact, dq)
    }

    /// Flow the point forward by `t ∈ [−1, 1]` (time-1 map at t = 1).
    pub fn apply(&self, p: &TorusPoint, t: f64) -> TorusPoint {
        let mut state = p.clone();
        let h = t / self.substeps as f64;
        for _ in 0..self.substeps {
            let k1 = self.field(&state);
            let s2 = advance(&state, &k1, h / 2.0);
            let k2 = self.field(&s2);
            let s3 = advance(&state, &k2, h / 2.0);
            let k3 = self.field(&s3);
            let s4 = advance(&state, &k3, h);
            let k4 = self.field(&s4);
            for j in 0..state.theta.len() {
                state.theta[j] += h / 6.0 * (k1.0[j] + 2.0 * k2.0[j] + 2.0 * k3.0[j] + k4.0[j]);
                state.actions[j] +=
                    h / 6.0 * (k1.1[j] + 2.0 * k2.1[j] + 2.0 * k3.1[j] + k4.1[j]);
            }
            let sites: Vec<i64> = k1.2.keys().copied().collect();
            for n in sites {
                let sum = k1.2[&n] + 2.0 * k2.2[&n] + 2.0 * k3.2[&n] + k4.2[&n];
                *state.q.entry(n).or_default() += h / 6.0 * sum;
            }
        }
        state
    }
}

fn advance(
    p: &TorusPoint,
    k: &(Vec<f64>, Vec<f64>, BTreeMap<i64, Complex64>),
    h: f64,
) -> TorusPoint {
    let mut out = p.clone();
    for j in 0..out.theta.len() {
        out.theta[j] += h * k.0[j];
        out.actions[j] += h * k.1[j];
    }
    for (n, v) in &k.2 {
        *out.q.entry(*n).or_default() += h * v;
    }
    out
}

/// Quasi-periodic trajectory sampler: the final torus flowed back through the
/// stored generators and the linear frame change G to physical amplitudes.
pub struct TorusSampler {
    pub cfg: TangentialConfig,
    pub omega_inf: Vec<f64>,
    pub flows: Vec<GeneratorFlow>,
    pub g: LatticeOperator,
    pub theta0: Vec<f64>,
}

impl TorusSampler {
    pub fn new(
        cfg: &TangentialConfig,
        nf_final: &NormalForm,
        generators: &[TFSeries],
        g: &LatticeOperator,
        theta0: Vec<f64>,
    ) -> Self {
        let flows = generators.iter().map(|f| GeneratorFlow::new(f, 8)).collect();
        Self {
            cfg: cfg.clone(),
            omega_inf: nf_final.omega_values(),
            flows,
            g: g.clone(),
            theta0,
        }
    }

    /// Phase-space point at time t: (θ₀ + ω_∞ t, I = 0, q = 0) mapped through
    /// Φ₁ ∘ Φ₂ ∘ ⋯ (innermost generator applied first).
    pub fn phase_point(&self, t: f64) -> TorusPoint {
        let b = self.cfg.b();
        let theta: Vec<f64> = (0..b)
            .map(|j| self.theta0[j] + self.omega_inf[j] * t)
            .collect();
        let mut p = TorusPoint { theta, actions: vec![0.0; b], q: BTreeMap::new() };
        for flow in self.flows.iter().rev() {
            p = flow.apply(&p, 1.0);
        }
        p
    }

    /// Diagonal-frame amplitudes q_n(t) on the full lattice window.
    pub fn q_state(&self, t: f64) -> BTreeMap<i64, Complex64> {
        let p = self.phase_point(t);
        let mut q = p.q.clone();
        for (j, site) in self.cfg.j_sites.iter().enumerate() {
            let radius = (p.actions[j] + self.cfg.y[j]).max(0.0).sqrt();
            q.insert(*site, radius * Complex64::new(0.0, p.theta[j]).exp());
        }
        q
    }

    /// Physical amplitudes u = G q on the operator window.
    pub fn u_state(&self, t: f64) -> Vec<Complex64> {
        let q = self.q_state(t);
        let window = self.g.window();
        let mut u = vec![Complex64::new(0.0, 0.0); window.len()];
        for (n, qn) in &q {
            // u_m += G_{m,n} q_n
            for m in window.sites() {
                let gmn = self.g.value_at(m, *n);
                if gmn != 0.0 {
                    u[(m - window.lo) as usize] += gmn * qn;
                }
            }
        }
        u
    }

    pub fn window(&self) -> SiteWindow {
        self.g.window()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_kam::{diagonalize, ActiveParams, DiagonalizeOptions, StarkModel};
    use crate::quartic::build_quartic;

    fn domain_for(b: usize) -> Domain {
        Domain { b, r: 0.5, s: 0.1, d: 2.0, rho: 0.125 }
    }

    #[test]
    fn schedule_arithmetic() {
        let opts = ScheduleOptions::default();
        let sched = build_schedule(1e-8, 3, &opts).unwrap();
        assert_eq!(sched[0].k_nu, 37.0); // ceil(2·|ln 1e−8|)
        assert!((sched[0].gamma_nu - 0.31622776601683794).abs() < 1e-12);
        assert!((sched[0].s_nu - opts.s0).abs() < 1e-15);
        // s_ν → s₀/2
        let sched_long = build_schedule(1e-8, 12, &ScheduleOptions { k_limit: 1e300, ..opts })
            .unwrap();
        assert!((sched_long[12].s_nu - opts.s0 * 0.5).abs() < 1e-3 * opts.s0);
        // every ν ≥ 1: eps_ν = eps_{ν−1}^{5/4}, rho_ν = 1/K_ν
        for nu in 1..=3 {
            assert!((sched[nu].eps_nu - sched[nu - 1].eps_nu.powf(1.25)).abs() < 1e-18);
            assert!((sched[nu].rho_nu - 1.0 / sched[nu].k_nu).abs() < 1e-18);
        }
    }

    #[test]
    fn schedule_rejects_window_overflow() {
        let opts = ScheduleOptions { k_limit: 64.0, ..Default::default() };
        match build_schedule(1e-6, 2, &opts) {
            Err(NlError::ScheduleOverflow { nu, .. }) => assert_eq!(nu, 1),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn site_size_restriction_enforced() {
        let cfg = TangentialConfig {
            j_sites: vec![5],
            xi: vec![0.0],
            y: vec![0.02],
            eps: 1e-2, // |ln ε|/6 ≈ 0.77 < 5
            sqrt_order: 2,
        };
        assert!(matches!(
            cfg.validate(),
            Err(NlError::SiteSizeRestriction { site: 5, .. })
        ));
    }

    fn pipeline(
        window: SiteWindow,
        seed: u64,
        eps: f64,
        j_sites: Vec<i64>,
    ) -> (ActionAngleReduction, crate::linear_kam::DiagonalizationResult, TangentialConfig)
    {
        let model = StarkModel::sample(window, 1.0 / 60.0, seed);
        let active = ActiveParams::with_sites(j_sites.clone());
        let result = diagonalize(&model, &active, &DiagonalizeOptions::default()).unwrap();
        let tensor = build_quartic(&result.g, window, 1e-14).unwrap();
        let b = j_sites.len();
        let domain = domain_for(b);
        let y = vec![2.0 * domain.s * domain.s; b];
        let xi: Vec<f64> = j_sites.iter().map(|n| model.v(*n)).collect();
        let cfg = TangentialConfig { j_sites, xi, y, eps, sqrt_order: 2 };
        let red =
            action_angle_reduce(&tensor, &result.eigenvalues, &cfg, domain, true).unwrap();
        (red, result, cfg)
    }

    #[test]
    fn eps_zero_reduction_is_pure_normal_form() {
        let window = SiteWindow::new(-8, 8);
        let model = StarkModel::sample(window, 1.0 / 60.0, 3);
        let active = ActiveParams::with_sites(vec![0]);
        let result = diagonalize(&model, &active, &DiagonalizeOptions::default()).unwrap();
        let tensor = build_quartic(&result.g, window, 1e-14).unwrap();
        let domain = domain_for(1);
        let cfg = TangentialConfig {
            j_sites: vec![0],
            xi: vec![model.v(0)],
            y: vec![0.02],
            eps: 0.0,
            sqrt_order: 2,
        };
        // eps = 0 bypasses the site-size restriction (|ln 0| = ∞)
        let red = action_angle_reduce(&tensor, &result.eigenvalues, &cfg, domain, true).unwrap();
        assert!(red.p_low.is_empty());
        assert!(red.p_dot.is_empty());
        assert!(red.p_ddot.is_empty());
        let d0 = result.eigenvalue(0);
        assert!((red.normal_form.e.value.re - d0.value * 0.02).abs() < 1e-15);
        assert!((red.normal_form.omega[0].value.re - d0.value).abs() < 1e-15);
        let om = red.normal_form.big_omega_at(3).unwrap();
        assert!((om.value.re - result.eigenvalue(3).value).abs() < 1e-15);
    }

    #[test]
    fn reduction_parts_are_gauge_invariant_and_decaying() {
        let (red, _, _) = pipeline(SiteWindow::new(-12, 12), 7, 1e-6, vec![0]);
        for part in [&red.p_low, &red.p_dot, &red.p_ddot] {
            let (_, residual) = part.gauge_filter();
            assert!(residual <= 1e-12, "gauge residual {residual:.3e}");
        }
        assert!(red.checks.iter().all(|c| c.passed));
        // classification sanity: p_low has ≥ 2 tangential slots ⟹ q-degree ≤ 2
        for (idx, _) in red.p_low.iter() {
            assert!(idx.q_degree() <= 2);
        }
        for (idx, _) in red.p_dot.iter() {
            assert_eq!(idx.q_degree(), 4);
            assert_eq!(idx.k_abs(), 0);
            assert_eq!(idx.l_total(), 0);
        }
        for (idx, _) in red.p_ddot.iter() {
            assert_eq!(idx.q_degree(), 3);
        }
    }

    #[test]
    fn solve_with_zero_p_low_is_trivial() {
        let (red, _, _) = pipeline(SiteWindow::new(-10, 10), 11, 1e-6, vec![0]);
        let nf = red.normal_form.clone();
        let domain = red.p_low.domain;
        let caps = TruncationCaps::default();
        let empty = TFSeries::zero(domain);
        let params = SolveParams {
            gamma: 0.4,
            tau: 2.0,
            k_plus_threshold: 100.0,
            k_plus_range: 8,
            gauge_tol: 1e-12,
        };
        let sol = solve_homological(&nf, &empty, &red.p_dot, &params, &caps).unwrap();
        assert!(sol.f.is_empty());
        assert!(sol.phat.is_empty());
        assert!(sol.nhat.e_hat.mag_with_grad() == 0.0);
        assert!(sol.residual_norm < 1e-15);
    }

    #[test]
    fn single_term_divisor_formula() {
        let (red, _, _) = pipeline(SiteWindow::new(-10, 10), 13, 1e-6, vec![0]);
        let nf = red.normal_form.clone();
        let domain = red.p_low.domain;
        // at b = 1 a gauge-invariant two-mode term with k ≠ 0 sits in the
        // q_m q_n sector: charge k + |α| − |β| = −2 + 2 = 0
        let idx =
            MultiIndex { k: vec![-2], l: vec![0], alpha: vec![(2, 1), (3, 1)], beta: vec![] };
        assert_eq!(idx.charge(), 0);
        let coeff = Complex64::new(3e-7, 1e-7);
        let p_low = TFSeries::monomial(domain, idx.clone(), CDual::constant(coeff, 1));
        let empty = TFSeries::zero(domain);
        let params = SolveParams {
            gamma: 0.3,
            tau: 2.0,
            k_plus_threshold: 50.0,
            k_plus_range: 8,
            gauge_tol: 1e-12,
        };
        let sol =
            solve_homological(&nf, &p_low, &empty, &params, &TruncationCaps::default()).unwrap();
        // divisor ⟨k,ω⟩ + Ω_2 + Ω_3 for this index
        let omega = nf.omega_values()[0];
        let d3 = nf.big_omega_at(3).unwrap().value.re;
        let d2 = nf.big_omega_at(2).unwrap().value.re;
        let div = -2.0 * omega + d3 + d2;
        let fc = sol.f.coeff(&idx);
        let expect = Complex64::new(0.0, -1.0) * coeff / div;
        assert!((fc.value - expect).norm() < 1e-18 + 1e-12 * expect.norm());
        assert!(sol.residual_norm < 1e-12);
    }

    #[test]
    fn homological_residual_small_pipeline() {
        // full residual at b = 1, K₊ = 8, window [−16, 16]
        let (red, _, _) = pipeline(SiteWindow::new(-16, 16), 5, 1e-6, vec![0]);
        let caps = TruncationCaps::default();
        let ham = red.clone().into_hamiltonian(caps);
        let params = SolveParams {
            gamma: (1e-6f64).powf(1.0 / 16.0),
            tau: 2.0,
            k_plus_threshold: 8.0,
            k_plus_range: 8,
            gauge_tol: 1e-12,
        };
        let sol =
            solve_homological(&ham.normal_form, &ham.p_low, &ham.p_high, &params, &caps)
                .unwrap();
        assert!(
            sol.residual_norm <= 1e-9,
            "homological residual {:.3e}",
            sol.residual_norm
        );
        assert!(sol.gauge_zero_defect <= 1e-12);
        assert_eq!(sol.f.max_charge_violation(), 0);
        // F has no k=0 diagonal q_n q̄_n term
        for (idx, _) in sol.f.iter() {
            let k0 = idx.k.iter().all(|x| *x == 0);
            let diag = idx.alpha == idx.beta && idx.alpha.len() == 1;
            assert!(!(k0 && diag), "normal-form term leaked into F");
        }
    }

    #[test]
    fn one_step_contracts_and_checks_pass() {
        let (red, _, _) = pipeline(SiteWindow::new(-16, 16), 19, 1e-6, vec![0]);
        let ham = red.into_hamiltonian(TruncationCaps::default());
        let eps0 = ham.p_low.vector_field_norm();
        assert!(eps0 > 0.0 && eps0 < 1e-3);
        let sched = build_schedule(eps0, 1, &ScheduleOptions::default()).unwrap();
        let opts = StepOptions { k_range_cap: 8, ..Default::default() };
        let (ham_next, _, report) =
            kam_nonlinear_step(&ham, &sched[0], &sched[1], &opts).unwrap();
        assert!(report.checks.iter().all(|c| c.passed));
        // contraction exponent ≥ 1.2
        let exponent = report.x_p_low_next.ln() / report.x_p_low.ln();
        assert!(exponent >= 1.2, "contraction exponent {exponent:.3}");
        // transformed Hamiltonian still gauge invariant
        assert_eq!(ham_next.p_low.max_charge_violation(), 0);
        assert_eq!(ham_next.p_high.max_charge_violation(), 0);
    }

    #[test]
    fn zero_perturbation_step_is_identity() {
        let (red, _, _) = pipeline(SiteWindow::new(-10, 10), 23, 0.0, vec![0]);
        let ham = red.into_hamiltonian(TruncationCaps::default());
        let sched = build_schedule(1e-6, 1, &ScheduleOptions::default()).unwrap();
        let opts = StepOptions { k_range_cap: 8, ..Default::default() };
        let (ham_next, sol, _) = kam_nonlinear_step(&ham, &sched[0], &sched[1], &opts).unwrap();
        assert!(sol.f.is_empty());
        assert!(ham_next.p_low.is_empty());
        assert!(
            (ham_next.normal_form.e.value - ham.normal_form.e.value).norm() < 1e-18
        );
    }

    #[test]
    fn torus_sampler_eps_zero_is_linear_eigenmode_motion() {
        let window = SiteWindow::new(-10, 10);
        let model = StarkModel::sample(window, 1.0 / 60.0, 29);
        let active = ActiveParams::with_sites(vec![0]);
        let result = diagonalize(&model, &active, &DiagonalizeOptions::default()).unwrap();
        let tensor = build_quartic(&result.g, window, 1e-14).unwrap();
        let domain = domain_for(1);
        let cfg = TangentialConfig {
            j_sites: vec![0],
            xi: vec![model.v(0)],
            y: vec![0.02],
            eps: 0.0,
            sqrt_order: 2,
        };
        let red =
            action_angle_reduce(&tensor, &result.eigenvalues, &cfg, domain, true).unwrap();
        let sampler =
            TorusSampler::new(&cfg, &red.normal_form, &[], &result.g, vec![0.3]);

        let d0 = result.eigenvalue(0).value;
        for t in [0.0, 0.7, 5.3] {
            let u = sampler.u_state(t);
            // u(t) = √y e^{i(θ₀ + d₀ t)} ψ₀ with ψ₀ = column 0 of G
            let phase = Complex64::new(0.0, 0.3 + d0 * t).exp() * (0.02f64).sqrt();
            let mut worst = 0.0f64;
            for m in window.sites() {
                let expect = phase * result.g.value_at(m, 0);
                let got = u[(m - window.lo) as usize];
                worst = worst.max((got - expect).norm());
            }
            assert!(worst < 1e-12, "sampler deviates {worst:.3e} at t={t}");
        }
    }
}
