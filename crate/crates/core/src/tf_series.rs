//! Sparse Taylor–Fourier polynomial algebra over (θ, I, q, q̄).
//!
//! A series is a finite sum Σ F_{klαβ}(ξ) Iˡ e^{i⟨k,θ⟩} q^α q̄^β with complex
//! dual coefficients (value + gradient in ξ ∈ ℝᵇ), measured on the domain
//!
//! D_{d,ρ}(r,s):  |Im θ| < r,  |I| < s²,  ‖q‖_{d,ρ} + ‖q̄‖_{d,ρ} < s,
//!
//! with ‖q‖_{d,ρ} = Σ |q_n| ⟨n⟩^d e^{ρ|n|}. The norm adds per-term suprema
//! over the domain boundary (each monomial's sup over the ℓ¹ constraints is
//! attained in closed form), which keeps the Banach-algebra property
//! ‖FG‖ ≤ ‖F‖‖G‖ and is what the grid-sup oracle samples.
//!
//! The Poisson bracket uses the convention
//!
//! {F, G} = ⟨∂_θF, ∂_I G⟩ − ⟨∂_I F, ∂_θ G⟩ + i Σ_n (∂_{q_n}F ∂_{q̄_n}G − ∂_{q̄_n}F ∂_{q_n}G),
//!
//! the unique sign choice for which dF/dt = {F, H} reproduces the equations
//! of motion i q̇_n = −∂H/∂q̄_n, θ̇ = ∂_I H of this model, and under which
//! the homological equations take their standard form. The canonical pairs
//! read {q_n, q̄_n} = i and {θ_j, I_j} = 1.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::CDual;

#[derive(Debug, Error)]
pub enum TfError {
    #[error("incompatible series: {0}")]
    Incompatible(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Multi-index (k, l, α, β): Fourier mode, action powers, normal-mode powers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MultiIndex {
    pub k: Vec<i32>,
    pub l: Vec<u8>,
    /// sparse site → power, sorted by site, no zero powers
    pub alpha: Vec<(i64, u8)>,
    pub beta: Vec<(i64, u8)>,
}

impl MultiIndex {
    pub fn constant(b: usize) -> Self {
        Self { k: vec![0; b], l: vec![0; b], alpha: Vec::new(), beta: Vec::new() }
    }

    pub fn b(&self) -> usize {
        self.k.len()
    }

    pub fn k_abs(&self) -> i64 {
        self.k.iter().map(|x| x.unsigned_abs() as i64).sum()
    }

    pub fn l_total(&self) -> u32 {
        self.l.iter().map(|x| *x as u32).sum()
    }

    pub fn alpha_total(&self) -> u32 {
        self.alpha.iter().map(|(_, p)| *p as u32).sum()
    }

    pub fn beta_total(&self) -> u32 {
        self.beta.iter().map(|(_, p)| *p as u32).sum()
    }

    pub fn q_degree(&self) -> u32 {
        self.alpha_total() + self.beta_total()
    }

    /// 2|l| + |α| + |β|, the grading the low/high split uses.
    pub fn degree(&self) -> u32 {
        2 * self.l_total() + self.q_degree()
    }

    /// Σ_j k_j + |α| − |β|; zero on every term of a gauge-invariant series.
    pub fn charge(&self) -> i64 {
        self.k.iter().map(|x| *x as i64).sum::<i64>() + self.alpha_total() as i64
            - self.beta_total() as i64
    }

    fn support_minmax(&self) -> Option<(i64, i64)> {
        let mut lo = i64::MAX;
        let mut hi = i64::MIN;
        for (n, _) in self.alpha.iter().chain(self.beta.iter()) {
            lo = lo.min(*n);
            hi = hi.max(*n);
        }
        if lo == i64::MAX {
            None
        } else {
            Some((lo, hi))
        }
    }

    /// n⁺: largest site carrying a normal-mode factor (0 for none).
    pub fn n_plus(&self) -> i64 {
        self.support_minmax().map(|(_, hi)| hi).unwrap_or(0)
    }

    /// n⁻: smallest such site (0 for none).
    pub fn n_minus(&self) -> i64 {
        self.support_minmax().map(|(lo, _)| lo).unwrap_or(0)
    }

    /// n* = max(|n⁺|, |n⁻|).
    pub fn n_star(&self) -> i64 {
        self.support_minmax()
            .map(|(lo, hi)| lo.abs().max(hi.abs()))
            .unwrap_or(0)
    }

    pub fn alpha_at(&self, n: i64) -> u8 {
        self.alpha
            .iter()
            .find(|(s, _)| *s == n)
            .map(|(_, p)| *p)
            .unwrap_or(0)
    }

    pub fn beta_at(&self, n: i64) -> u8 {
        self.beta
            .iter()
            .find(|(s, _)| *s == n)
            .map(|(_, p)| *p)
            .unwrap_or(0)
    }

    /// (α, β) pair ignoring (k, l) — the coefficient-family key.
    pub fn family(&self) -> (Vec<(i64, u8)>, Vec<(i64, u8)>) {
        (self.alpha.clone(), self.beta.clone())
    }
}

fn sparse_add(a: &[(i64, u8)], b: &[(i64, u8)]) -> Vec<(i64, u8)> {
    let mut map: BTreeMap<i64, u8> = a.iter().copied().collect();
    for (n, p) in b {
        *map.entry(*n).or_insert(0) += p;
    }
    map.into_iter().filter(|(_, p)| *p > 0).collect()
}

fn sparse_dec(a: &[(i64, u8)], site: i64) -> Vec<(i64, u8)> {
    a.iter()
        .filter_map(|(n, p)| {
            if *n == site {
                if *p > 1 {
                    Some((*n, p - 1))
                } else {
                    None
                }
            } else {
                Some((*n, *p))
            }
        })
        .collect()
}

/// Analyticity/weight parameters of D_{d,ρ}(r,s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub b: usize,
    pub r: f64,
    pub s: f64,
    pub d: f64,
    pub rho: f64,
}

impl Domain {
    /// site weight ⟨n⟩^d e^{ρ|n|}
    pub fn site_weight(&self, n: i64) -> f64 {
        let nn = n as f64;
        (1.0 + nn * nn).powf(self.d / 2.0) * (self.rho * n.abs() as f64).exp()
    }

    /// Per-term sup of |Iˡ e^{i⟨k,θ⟩} q^α q̄^β| over the closed domain:
    /// e^{r|k|} · (s²)^{|l|} Π l_i^{l_i} / |l|^{|l|}
    ///          · s^M Π α_n^{α_n} β_n^{β_n} / M^M · Π c_n^{−(α_n+β_n)}.
    pub fn term_weight(&self, idx: &MultiIndex) -> f64 {
        let mut w = (self.r * idx.k_abs() as f64).exp();
        let lt = idx.l_total();
        if lt > 0 {
            let mut num = 1.0f64;
            for li in &idx.l {
                let x = *li as f64;
                if x > 0.0 {
                    num *= x.powf(x);
                }
            }
            w *= (self.s * self.s).powi(lt as i32) * num / (lt as f64).powf(lt as f64);
        }
        let m = idx.q_degree();
        if m > 0 {
            let mut num = 1.0f64;
            let mut cw = 1.0f64;
            for (n, p) in idx.alpha.iter().chain(idx.beta.iter()) {
                let x = *p as f64;
                num *= x.powf(x);
                cw *= self.site_weight(*n).powi(*p as i32);
            }
            w *= self.s.powi(m as i32) * num / ((m as f64).powf(m as f64) * cw);
        }
        w
    }
}

/// Truncation policy for products and brackets.
#[derive(Debug, Clone, Copy)]
pub struct TruncationCaps {
    pub max_q_degree: u32,
    pub max_i_degree: u32,
}

impl Default for TruncationCaps {
    fn default() -> Self {
        Self { max_q_degree: 4, max_i_degree: 2 }
    }
}

impl TruncationCaps {
    pub fn unlimited() -> Self {
        Self { max_q_degree: u32::MAX, max_i_degree: u32::MAX }
    }

    pub fn admits(&self, idx: &MultiIndex) -> bool {
        idx.q_degree() <= self.max_q_degree && idx.l_total() <= self.max_i_degree
    }
}

pub const ZERO_PRUNE: f64 = 1e-16;

/// Sparse Taylor–Fourier series with complex dual coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TFSeries {
    pub domain: Domain,
    terms: BTreeMap<MultiIndex, CDual>,
}

/// Series plus the norm mass discarded by a truncation.
#[derive(Debug, Clone)]
pub struct Truncated {
    pub series: TFSeries,
    pub dropped_mass: f64,
}

impl TFSeries {
    pub fn zero(domain: Domain) -> Self {
        Self { domain, terms: BTreeMap::new() }
    }

    pub fn constant(domain: Domain, c: CDual) -> Self {
        let mut s = Self::zero(domain);
        s.insert(MultiIndex::constant(domain.b), c);
        s
    }

    pub fn monomial(domain: Domain, idx: MultiIndex, c: CDual) -> Self {
        let mut s = Self::zero(domain);
        s.insert(idx, c);
        s
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MultiIndex, &CDual)> {
        self.terms.iter()
    }

    pub fn coeff(&self, idx: &MultiIndex) -> CDual {
        self.terms
            .get(idx)
            .cloned()
            .unwrap_or_else(|| CDual::zero(self.domain.b))
    }

    pub fn insert(&mut self, idx: MultiIndex, c: CDual) {
        debug_assert_eq!(idx.b(), self.domain.b);
        debug_assert_eq!(c.n_params(), self.domain.b);
        let entry = self.terms.entry(idx);
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                if !c.is_negligible(ZERO_PRUNE) {
                    v.insert(c);
                }
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                o.get_mut().add_assign(&c);
                if o.get().is_negligible(ZERO_PRUNE) {
                    o.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, TfError> {
        self.compat(other)?;
        let mut out = self.clone();
        for (idx, c) in &other.terms {
            out.insert(idx.clone(), c.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TfError> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = Self::zero(self.domain);
        for (idx, v) in &self.terms {
            out.terms.insert(idx.clone(), v.scale(c));
        }
        out
    }

    fn compat(&self, other: &Self) -> Result<(), TfError> {
        if self.domain.b != other.domain.b {
            return Err(TfError::Incompatible(format!(
                "b mismatch: {} vs {}",
                self.domain.b, other.domain.b
            )));
        }
        Ok(())
    }

    pub fn filter(&self, mut keep: impl FnMut(&MultiIndex) -> bool) -> Self {
        let mut out = Self::zero(self.domain);
        for (idx, c) in &self.terms {
            if keep(idx) {
                out.terms.insert(idx.clone(), c.clone());
            }
        }
        out
    }

    /// Σ over terms of (|value| + |grad|₁) · per-term domain sup.
    pub fn norm(&self) -> f64 {
        self.terms
            .iter()
            .map(|(idx, c)| c.mag_with_grad() * self.domain.term_weight(idx))
            .sum()
    }

    /// Same sum restricted to terms matching a predicate.
    pub fn norm_of(&self, mut pred: impl FnMut(&MultiIndex) -> bool) -> f64 {
        self.terms
            .iter()
            .filter(|(idx, _)| pred(idx))
            .map(|(idx, c)| c.mag_with_grad() * self.domain.term_weight(idx))
            .sum()
    }

    /// ‖F_αβ‖_{D,𝒪}: norm of one coefficient family, i.e. the (k, l) sum with
    /// e^{r|k|} and action weights but without the q-factor weights.
    pub fn family_norm(&self, alpha: &[(i64, u8)], beta: &[(i64, u8)]) -> f64 {
        self.terms
            .iter()
            .filter(|(idx, _)| idx.alpha == alpha && idx.beta == beta)
            .map(|(idx, c)| {
                let stripped = MultiIndex {
                    k: idx.k.clone(),
                    l: idx.l.clone(),
                    alpha: Vec::new(),
                    beta: Vec::new(),
                };
                c.mag_with_grad() * self.domain.term_weight(&stripped)
            })
            .sum()
    }

    /// All distinct (α, β) families present.
    pub fn families(&self) -> Vec<(Vec<(i64, u8)>, Vec<(i64, u8)>)> {
        let mut fams: Vec<_> = self.terms.keys().map(|idx| idx.family()).collect();
        fams.sort();
        fams.dedup();
        fams
    }

    pub fn partial_theta(&self, j: usize) -> Self {
        let mut out = Self::zero(self.domain);
        for (idx, c) in &self.terms {
            let kj = idx.k[j];
            if kj != 0 {
                out.terms
                    .insert(idx.clone(), c.scale(Complex64::new(0.0, kj as f64)));
            }
        }
        out
    }

    pub fn partial_i(&self, j: usize) -> Self {
        let mut out = Self::zero(self.domain);
        for (idx, c) in &self.terms {
            let lj = idx.l[j];
            if lj > 0 {
                let mut nidx = idx.clone();
                nidx.l[j] -= 1;
                out.insert(nidx, c.scale(Complex64::new(lj as f64, 0.0)));
            }
        }
        out
    }

    pub fn partial_q(&self, n: i64) -> Self {
        let mut out = Self::zero(self.domain);
        for (idx, c) in &self.terms {
            let p = idx.alpha_at(n);
            if p > 0 {
                let mut nidx = idx.clone();
                nidx.alpha = sparse_dec(&idx.alpha, n);
                out.insert(nidx, c.scale(Complex64::new(p as f64, 0.0)));
            }
        }
        out
    }

    pub fn partial_qbar(&self, n: i64) -> Self {
        let mut out = Self::zero(self.domain);
        for (idx, c) in &self.terms {
            let p = idx.beta_at(n);
            if p > 0 {
                let mut nidx = idx.clone();
                nidx.beta = sparse_dec(&idx.beta, n);
                out.insert(nidx, c.scale(Complex64::new(p as f64, 0.0)));
            }
        }
        out
    }

    /// Sites carrying any normal-mode factor.
    pub fn q_support(&self) -> Vec<i64> {
        let mut sites: Vec<i64> = self
            .terms
            .keys()
            .flat_map(|idx| idx.alpha.iter().chain(idx.beta.iter()).map(|(n, _)| *n))
            .collect();
        sites.sort_unstable();
        sites.dedup();
        sites
    }

    /// Series product with truncation; dropped mass in the norm metric.
    pub fn mul(&self, other: &Self, caps: &TruncationCaps) -> Result<Truncated, TfError> {
        self.compat(other)?;
        let mut series = Self::zero(self.domain);
        let mut dropped = 0.0;
        for (ia, ca) in &self.terms {
            for (ib, cb) in &other.terms {
                let mut k = ia.k.clone();
                for (x, y) in k.iter_mut().zip(&ib.k) {
                    *x += y;
                }
                let mut l = ia.l.clone();
                for (x, y) in l.iter_mut().zip(&ib.l) {
                    *x += y;
                }
                let idx = MultiIndex {
                    k,
                    l,
                    alpha: sparse_add(&ia.alpha, &ib.alpha),
                    beta: sparse_add(&ia.beta, &ib.beta),
                };
                let c = ca.mul(cb);
                if caps.admits(&idx) {
                    series.insert(idx, c);
                } else {
                    dropped += c.mag_with_grad() * self.domain.term_weight(&idx);
                }
            }
        }
        Ok(Truncated { series, dropped_mass: dropped })
    }

    /// Vector-field norm per the weighted definition:
    /// ‖X_F‖ = ‖∂_I F‖ + s⁻²‖∂_θ F‖ + s⁻¹ Σ_n (‖∂_{q_n}F‖ + ‖∂_{q̄_n}F‖)⟨n⟩^d e^{ρ|n|}.
    pub fn vector_field_norm(&self) -> f64 {
        let s = self.domain.s;
        let mut total = 0.0;
        for j in 0..self.domain.b {
            total += self.partial_i(j).norm();
            total += self.partial_theta(j).norm() / (s * s);
        }
        for n in self.q_support() {
            let w = self.domain.site_weight(n);
            total += (self.partial_q(n).norm() + self.partial_qbar(n).norm()) * w / s;
        }
        total
    }

    /// Remove nonzero-charge terms; returns the removed norm mass.
    pub fn gauge_filter(&self) -> (Self, f64) {
        let mut out = Self::zero(self.domain);
        let mut residual = 0.0;
        for (idx, c) in &self.terms {
            if idx.charge() == 0 {
                out.terms.insert(idx.clone(), c.clone());
            } else {
                residual += c.mag_with_grad() * self.domain.term_weight(idx);
            }
        }
        (out, residual)
    }

    pub fn max_charge_violation(&self) -> i64 {
        self.terms.keys().map(|idx| idx.charge().abs()).max().unwrap_or(0)
    }

    /// Reality defect: max |c(k,l,α,β) − conj(c(−k,l,β,α))|.
    pub fn reality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (idx, c) in &self.terms {
            let mirror = MultiIndex {
                k: idx.k.iter().map(|x| -x).collect(),
                l: idx.l.clone(),
                alpha: idx.beta.clone(),
                beta: idx.alpha.clone(),
            };
            let other = self.coeff(&mirror);
            worst = worst.max((c.value - other.value.conj()).norm());
        }
        worst
    }

    /// Evaluate on the reality slice q̄ = conj(q) at real (θ, I).
    pub fn eval(
        &self,
        theta: &[f64],
        actions: &[f64],
        q: &BTreeMap<i64, Complex64>,
    ) -> Complex64 {
        let mut total = Complex64::new(0.0, 0.0);
        for (idx, c) in &self.terms {
            let mut z = c.value;
            let mut phase = 0.0;
            for (kj, tj) in idx.k.iter().zip(theta) {
                phase += *kj as f64 * tj;
            }
            z *= Complex64::new(0.0, phase).exp();
            for (lj, ij) in idx.l.iter().zip(actions) {
                for _ in 0..*lj {
                    z *= ij;
                }
            }
            for (n, p) in &idx.alpha {
                let qn = q.get(n).copied().unwrap_or_default();
                for _ in 0..*p {
                    z *= qn;
                }
            }
            for (n, p) in &idx.beta {
                let qn = q.get(n).copied().unwrap_or_default().conj();
                for _ in 0..*p {
                    z *= qn;
                }
            }
            total += z;
        }
        total
    }

    /// One term per line: `k | l | alpha | beta | re im | grad...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (idx, c) in &self.terms {
            let k: Vec<String> = idx.k.iter().map(|x| x.to_string()).collect();
            let l: Vec<String> = idx.l.iter().map(|x| x.to_string()).collect();
            let a: Vec<String> =
                idx.alpha.iter().map(|(n, p)| format!("{n}^{p}")).collect();
            let bt: Vec<String> =
                idx.beta.iter().map(|(n, p)| format!("{n}^{p}")).collect();
            let g: Vec<String> = c
                .grad
                .iter()
                .map(|z| format!("{:.17e} {:.17e}", z.re, z.im))
                .collect();
            out.push_str(&format!(
                "{} | {} | {} | {} | {:.17e} {:.17e} | {}\n",
                k.join(","),
                l.join(","),
                a.join(","),
                bt.join(","),
                c.value.re,
                c.value.im,
                g.join(" ")
            ));
        }
        out
    }

    pub fn from_text(domain: Domain, text: &str) -> Result<Self, TfError> {
        let mut series = Self::zero(domain);
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('|').map(|p| p.trim()).collect();
            if parts.len() != 6 {
                return Err(TfError::Parse {
                    line: lineno + 1,
                    msg: format!("expected 6 fields, got {}", parts.len()),
                });
            }
            let parse_err = |msg: &str| TfError::Parse { line: lineno + 1, msg: msg.into() };
            let k: Vec<i32> = if parts[0].is_empty() {
                Vec::new()
            } else {
                parts[0]
                    .split(',')
                    .map(|x| x.parse().map_err(|_| parse_err("bad k")))
                    .collect::<Result<_, _>>()?
            };
            let l: Vec<u8> = if parts[1].is_empty() {
                Vec::new()
            } else {
                parts[1]
                    .split(',')
                    .map(|x| x.parse().map_err(|_| parse_err("bad l")))
                    .collect::<Result<_, _>>()?
            };
            let parse_sparse = |s: &str| -> Result<Vec<(i64, u8)>, TfError> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(',')
                    .map(|x| {
                        let mut it = x.split('^');
                        let site = it
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| parse_err("bad site"))?;
                        let pow = it
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| parse_err("bad power"))?;
                        Ok((site, pow))
                    })
                    .collect()
            };
            let alpha = parse_sparse(parts[2])?;
            let beta = parse_sparse(parts[3])?;
            let vals: Vec<f64> = parts[4]
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| parse_err("bad value")))
                .collect::<Result<_, _>>()?;
            if vals.len() != 2 {
                return Err(parse_err("value needs re im"));
            }
            let gvals: Vec<f64> = if parts[5].is_empty() {
                Vec::new()
            } else {
                parts[5]
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| parse_err("bad grad")))
                    .collect::<Result<_, _>>()?
            };
            if gvals.len() != 2 * domain.b {
                return Err(parse_err("grad length mismatch"));
            }
            let grad = gvals
                .chunks(2)
                .map(|ch| Complex64::new(ch[0], ch[1]))
                .collect();
            series.insert(
                MultiIndex { k, l, alpha, beta },
                CDual { value: Complex64::new(vals[0], vals[1]), grad },
            );
        }
        Ok(series)
    }
}

/// Half bracket ⟨∂_θa, ∂_I b⟩ + i Σ_n ∂_{q_n}a ∂_{q̄_n}b accumulated into `out`
/// with `sign`; dropped mass accounted against `domain`.
fn half_bracket(
    a: &TFSeries,
    b: &TFSeries,
    sign: f64,
    caps: &TruncationCaps,
    out: &mut TFSeries,
    dropped: &mut f64,
) {
    let domain = a.domain;
    let mut emit = |idx: MultiIndex, c: CDual| {
        if caps.admits(&idx) {
            out.insert(idx, c);
        } else {
            *dropped += c.mag_with_grad() * domain.term_weight(&idx);
        }
    };

    // ⟨∂_θ a, ∂_I b⟩
    for j in 0..domain.b {
        for (ia, ca) in a.iter() {
            if ia.k[j] == 0 {
                continue;
            }
            for (ib, cb) in b.iter() {
                if ib.l[j] == 0 {
                    continue;
                }
                let factor = Complex64::new(0.0, ia.k[j] as f64)
                    * Complex64::new(ib.l[j] as f64 * sign, 0.0);
                let mut k = ia.k.clone();
                for (x, y) in k.iter_mut().zip(&ib.k) {
                    *x += y;
                }
                let mut l = ia.l.clone();
                for (x, y) in l.iter_mut().zip(&ib.l) {
                    *x += y;
                }
                l[j] -= 1;
                let idx = MultiIndex {
                    k,
                    l,
                    alpha: sparse_add(&ia.alpha, &ib.alpha),
                    beta: sparse_add(&ia.beta, &ib.beta),
                };
                emit(idx, ca.mul(cb).scale(factor));
            }
        }
    }

    // i Σ_n ∂_{q_n} a · ∂_{q̄_n} b
    let mut sites = a.q_support();
    sites.retain(|n| {
        b.iter().any(|(ib, _)| ib.beta_at(*n) > 0)
    });
    for n in sites {
        for (ia, ca) in a.iter() {
            let pa = ia.alpha_at(n);
            if pa == 0 {
                continue;
            }
            for (ib, cb) in b.iter() {
                let pb = ib.beta_at(n);
                if pb == 0 {
                    continue;
                }
                let factor = Complex64::new(0.0, sign * pa as f64 * pb as f64);
                let mut k = ia.k.clone();
                for (x, y) in k.iter_mut().zip(&ib.k) {
                    *x += y;
                }
                let mut l = ia.l.clone();
                for (x, y) in l.iter_mut().zip(&ib.l) {
                    *x += y;
                }
                let idx = MultiIndex {
                    k,
                    l,
                    alpha: sparse_add(&sparse_dec(&ia.alpha, n), &ib.alpha),
                    beta: sparse_add(&ia.beta, &sparse_dec(&ib.beta, n)),
                };
                emit(idx, ca.mul(cb).scale(factor));
            }
        }
    }
}

/// {F, G} with the fixed sign convention; terms beyond the caps are discarded
/// and their norm mass reported.
pub fn poisson_bracket(
    f: &TFSeries,
    g: &TFSeries,
    caps: &TruncationCaps,
) -> Result<Truncated, TfError> {
    if f.domain.b != g.domain.b {
        return Err(TfError::Incompatible("b mismatch in bracket".into()));
    }
    let mut plus = TFSeries::zero(f.domain);
    let mut minus = TFSeries::zero(f.domain);
    let mut dropped = 0.0;
    half_bracket(f, g, 1.0, caps, &mut plus, &mut dropped);
    half_bracket(g, f, 1.0, caps, &mut minus, &mut dropped);
    // {f,g} = half(f,g) − half(g,f); the two maps subtract coefficientwise so
    // {g,f} is the exact negation
    let series = plus.sub(&minus)?;
    Ok(Truncated { series, dropped_mass: dropped })
}
