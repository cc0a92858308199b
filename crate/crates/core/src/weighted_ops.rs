//! Exponentially weighted operator algebra on truncated lattice operators.
//!
//! An operator A on the window carries the norm
//!
//! ‖A‖_r = Σ_l e^{r|l|} sup_{m−n=l} |A_{mn}|,
//!
//! and its parameter-augmented version
//!
//! ‖A‖_r^α = ‖A‖_r + α sup_j ‖∂A/∂v_j‖_r,
//!
//! both submultiplicative: ‖AB‖_r ≤ ‖A‖_r‖B‖_r and likewise for ‖·‖_r^α.
//! Entries are dual numbers over a fixed active-parameter list, so all
//! gradients propagate exactly through products, exponentials and commutator
//! series. Storage is band-major: one contiguous slab of values and one of
//! gradients per diagonal offset l = m − n.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::DualScalar;

/// Inclusive lattice window [lo, hi] standing in for ℤ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteWindow {
    pub lo: i64,
    pub hi: i64,
}

impl SiteWindow {
    pub fn new(lo: i64, hi: i64) -> Self {
        assert!(lo <= hi, "window lo must not exceed hi");
        assert!(hi - lo + 1 >= 3, "window must span at least 3 sites");
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, n: i64) -> bool {
        n >= self.lo && n <= self.hi
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> {
        self.lo..=self.hi
    }

    /// Default edge margin excluded from assertions: a quarter of the window.
    pub fn default_margin(&self) -> i64 {
        (self.len() as i64) / 4
    }

    /// Interior sub-window after stripping `margin` sites on each side.
    pub fn interior(&self, margin: i64) -> SiteWindow {
        SiteWindow::new(self.lo + margin, self.hi - margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetry {
    SelfAdjoint,
    SkewAdjoint,
    None,
}

#[derive(Debug, Error)]
pub enum OpError {
    #[error("window mismatch: [{0}, {1}] vs [{2}, {3}]")]
    WindowMismatch(i64, i64, i64, i64),
    #[error("non-finite entry at (m, n) = ({m}, {n})")]
    NonFiniteEntry { m: i64, n: i64 },
    #[error("series tail bound {achieved:.3e} exceeds tolerance {requested:.3e} at j_max = {j_max}")]
    TailTolerance { achieved: f64, requested: f64, j_max: usize },
    #[error("symmetry violation at (m, n) = ({m}, {n}): residual {residual:.3e}")]
    SymmetryViolation { m: i64, n: i64, residual: f64 },
}

/// ‖A‖_r together with the α-augmented value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightedNormValue {
    pub plain: f64,
    pub with_deriv: f64,
    pub r: f64,
    pub alpha: f64,
}

/// One stored diagonal: values and row-major gradients (len × n_params).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Diagonal {
    vals: Vec<f64>,
    grads: Vec<f64>,
}

impl Diagonal {
    fn zeros(len: usize, np: usize) -> Self {
        Self { vals: vec![0.0; len], grads: vec![0.0; len * np] }
    }
}

/// Banded lattice operator with dual-number entries.
///
/// Diagonal offset l = m − n (row m, column n); along offset l the entry at
/// column n sits at index n − n_lo(l) with n_lo(l) = max(lo, lo − l).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeOperator {
    window: SiteWindow,
    n_params: usize,
    diags: BTreeMap<i64, Diagonal>,
    pub symmetry: Symmetry,
}

/// Mass removed by a pruning pass, measured in the r-weighted norm.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct DroppedMass {
    pub value_mass: f64,
    pub grad_mass: f64,
}

impl LatticeOperator {
    pub fn zero(window: SiteWindow, n_params: usize) -> Self {
        Self { window, n_params, diags: BTreeMap::new(), symmetry: Symmetry::None }
    }

    pub fn identity(window: SiteWindow, n_params: usize) -> Self {
        let mut op = Self::zero(window, n_params);
        let d = op.ensure_diag(0);
        d.vals.iter_mut().for_each(|v| *v = 1.0);
        op.symmetry = Symmetry::SelfAdjoint;
        op
    }

    /// Diagonal operator from per-site dual values.
    pub fn from_diagonal(window: SiteWindow, entries: &[DualScalar]) -> Self {
        assert_eq!(entries.len(), window.len());
        let np = entries[0].grad.len();
        let mut op = Self::zero(window, np);
        {
            let d = op.ensure_diag(0);
            for (i, e) in entries.iter().enumerate() {
                d.vals[i] = e.value;
                d.grads[i * np..(i + 1) * np].copy_from_slice(&e.grad);
            }
        }
        op.symmetry = Symmetry::SelfAdjoint;
        op
    }

    pub fn window(&self) -> SiteWindow {
        self.window
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn bandwidth(&self) -> i64 {
        self.diags.keys().map(|l| l.abs()).max().unwrap_or(0)
    }

    fn diag_len(&self, l: i64) -> usize {
        self.window.len() - l.unsigned_abs() as usize
    }

    fn col_lo(&self, l: i64) -> i64 {
        self.window.lo.max(self.window.lo - l)
    }

    fn ensure_diag(&mut self, l: i64) -> &mut Diagonal {
        let len = self.diag_len(l);
        let np = self.n_params;
        self.diags.entry(l).or_insert_with(|| Diagonal::zeros(len, np))
    }

    pub fn value_at(&self, m: i64, n: i64) -> f64 {
        self.entry_index(m, n)
            .and_then(|(l, i)| self.diags.get(&l).map(|d| d.vals[i]))
            .unwrap_or(0.0)
    }

    pub fn grad_at(&self, m: i64, n: i64, j: usize) -> f64 {
        self.entry_index(m, n)
            .and_then(|(l, i)| self.diags.get(&l).map(|d| d.grads[i * self.n_params + j]))
            .unwrap_or(0.0)
    }

    pub fn entry(&self, m: i64, n: i64) -> DualScalar {
        match self.entry_index(m, n) {
            Some((l, i)) => match self.diags.get(&l) {
                Some(d) => DualScalar {
                    value: d.vals[i],
                    grad: d.grads[i * self.n_params..(i + 1) * self.n_params].to_vec(),
                },
                None => DualScalar::constant(0.0, self.n_params),
            },
            None => DualScalar::constant(0.0, self.n_params),
        }
    }

    fn entry_index(&self, m: i64, n: i64) -> Option<(i64, usize)> {
        if !self.window.contains(m) || !self.window.contains(n) {
            return None;
        }
        let l = m - n;
        Some((l, (n - self.col_lo(l)) as usize))
    }

    pub fn set(&mut self, m: i64, n: i64, e: DualScalar) {
        assert_eq!(e.grad.len(), self.n_params);
        let (l, i) = self.entry_index(m, n).expect("entry outside window");
        let np = self.n_params;
        let d = self.ensure_diag(l);
        d.vals[i] = e.value;
        d.grads[i * np..(i + 1) * np].copy_from_slice(&e.grad);
    }

    pub fn add_to(&mut self, m: i64, n: i64, e: &DualScalar) {
        assert_eq!(e.grad.len(), self.n_params);
        let (l, i) = self.entry_index(m, n).expect("entry outside window");
        let np = self.n_params;
        let d = self.ensure_diag(l);
        d.vals[i] += e.value;
        for (g, de) in d.grads[i * np..(i + 1) * np].iter_mut().zip(&e.grad) {
            *g += de;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for d in out.diags.values_mut() {
            d.vals.iter_mut().for_each(|v| *v *= c);
            d.grads.iter_mut().for_each(|g| *g *= c);
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self, OpError> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.symmetry = if self.symmetry == other.symmetry { self.symmetry } else { Symmetry::None };
        for (l, bd) in &other.diags {
            let d = out.ensure_diag(*l);
            for (v, bv) in d.vals.iter_mut().zip(&bd.vals) {
                *v += bv;
            }
            for (g, bg) in d.grads.iter_mut().zip(&bd.grads) {
                *g += bg;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, OpError> {
        self.add(&other.scale(-1.0))
    }

    /// Diagonal part diag A.
    pub fn diag_part(&self) -> Self {
        let mut out = Self::zero(self.window, self.n_params);
        if let Some(d) = self.diags.get(&0) {
            out.diags.insert(0, d.clone());
        }
        out.symmetry = Symmetry::SelfAdjoint;
        out
    }

    /// Transpose; for the real operators used here this is the adjoint.
    pub fn transpose(&self) -> Self {
        let mut out = Self::zero(self.window, self.n_params);
        for (l, d) in &self.diags {
            // entry (m, n) on offset l maps to (n, m) on offset −l, same column
            // slab reversed in indexing: along −l, column index runs over m.
            let nl = -*l;
            let len = d.vals.len();
            let np = self.n_params;
            let src_col_lo = self.col_lo(*l);
            let dst_col_lo = out.col_lo(nl);
            let od = out.ensure_diag(nl);
            for i in 0..len {
                let n = src_col_lo + i as i64;
                let m = n + l;
                let oi = (m - dst_col_lo) as usize;
                od.vals[oi] = d.vals[i];
                od.grads[oi * np..(oi + 1) * np].copy_from_slice(&d.grads[i * np..(i + 1) * np]);
            }
        }
        out.symmetry = self.symmetry;
        out
    }

    fn check_compatible(&self, other: &Self) -> Result<(), OpError> {
        if self.window != other.window {
            return Err(OpError::WindowMismatch(
                self.window.lo,
                self.window.hi,
                other.window.lo,
                other.window.hi,
            ));
        }
        assert_eq!(self.n_params, other.n_params, "active-parameter lists differ");
        Ok(())
    }

    /// Matrix product with dual-number entries. The result lives on the same
    /// window; the contraction index is confined to the window, so truncation
    /// manifests as missing out-of-window contributions, not dropped entries.
    pub fn mul(&self, other: &Self) -> Result<Self, OpError> {
        self.check_compatible(other)?;
        let np = self.n_params;
        let win = self.window;
        let nlen = win.len() as i64;

        // Group contributing (la, lb) pairs by output offset l = la + lb.
        let mut pairs: BTreeMap<i64, Vec<(i64, i64)>> = BTreeMap::new();
        for la in self.diags.keys() {
            for lb in other.diags.keys() {
                let l = la + lb;
                if l.abs() < nlen {
                    pairs.entry(l).or_default().push((*la, *lb));
                }
            }
        }

        let computed: Vec<(i64, Diagonal)> = pairs
            .into_par_iter()
            .map(|(l, plist)| {
                let len = win.len() - l.unsigned_abs() as usize;
                let mut diag = Diagonal::zeros(len, np);
                let out_col_lo = win.lo.max(win.lo - l);
                for (la, lb) in plist {
                    let ad = &self.diags[&la];
                    let bd = &other.diags[&lb];
                    // entry (m, n): m = n + l, k = n + lb, requires k and m in window
                    let a_col_lo = win.lo.max(win.lo - la);
                    let b_col_lo = win.lo.max(win.lo - lb);
                    let n_lo = out_col_lo
                        .max(b_col_lo)
                        .max(a_col_lo - lb)
                        .max(win.lo - lb);
                    let n_hi = (win.hi.min(win.hi - l))
                        .min(win.hi - lb)
                        .min(win.hi - lb - la);
                    if n_lo > n_hi {
                        continue;
                    }
                    let count = (n_hi - n_lo + 1) as usize;
                    let ci0 = (n_lo - out_col_lo) as usize;
                    let ai0 = (n_lo + lb - a_col_lo) as usize;
                    let bi0 = (n_lo - b_col_lo) as usize;
                    for t in 0..count {
                        let av = ad.vals[ai0 + t];
                        let bv = bd.vals[bi0 + t];
                        diag.vals[ci0 + t] += av * bv;
                        let cg = &mut diag.grads[(ci0 + t) * np..(ci0 + t + 1) * np];
                        let ag = &ad.grads[(ai0 + t) * np..(ai0 + t + 1) * np];
                        let bg = &bd.grads[(bi0 + t) * np..(bi0 + t + 1) * np];
                        for j in 0..np {
                            cg[j] += av * bg[j] + bv * ag[j];
                        }
                    }
                }
                (l, diag)
            })
            .collect();

        let mut out = Self::zero(win, np);
        out.diags = computed.into_iter().collect();
        Ok(out)
    }

    /// Drop diagonals whose entries and gradients all fall below `tol`,
    /// returning the r-weighted mass removed.
    pub fn prune(&mut self, tol: f64, r: f64) -> DroppedMass {
        let mut dropped = DroppedMass::default();
        let np = self.n_params;
        let keys: Vec<i64> = self.diags.keys().copied().collect();
        for l in keys {
            let d = &self.diags[&l];
            let vmax = d.vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let gmax = d.grads.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if vmax <= tol && gmax <= tol {
                let w = (r * l.abs() as f64).exp();
                dropped.value_mass += w * vmax;
                dropped.grad_mass += w * gmax;
                self.diags.remove(&l);
            }
        }
        let _ = np;
        dropped
    }

    /// ‖A‖_r and ‖A‖_r^α per the weighted-norm definitions. Rejects non-finite
    /// entries naming the offending (m, n).
    pub fn weighted_norm(&self, r: f64, alpha: f64) -> Result<WeightedNormValue, OpError> {
        assert!(r > 0.0, "weight r must be positive");
        assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0,1)");
        let np = self.n_params;
        let mut plain = 0.0;
        let mut per_param = vec![0.0f64; np];
        for (l, d) in &self.diags {
            let w = (r * l.abs() as f64).exp();
            let mut vmax = 0.0f64;
            for (i, v) in d.vals.iter().enumerate() {
                if !v.is_finite() {
                    let n = self.col_lo(*l) + i as i64;
                    return Err(OpError::NonFiniteEntry { m: n + l, n });
                }
                vmax = vmax.max(v.abs());
            }
            plain += w * vmax;
            for j in 0..np {
                let mut gmax = 0.0f64;
                for i in 0..d.vals.len() {
                    let g = d.grads[i * np + j];
                    if !g.is_finite() {
                        let n = self.col_lo(*l) + i as i64;
                        return Err(OpError::NonFiniteEntry { m: n + l, n });
                    }
                    gmax = gmax.max(g.abs());
                }
                per_param[j] += w * gmax;
            }
        }
        let deriv = per_param.iter().fold(0.0f64, |a, &s| a.max(s));
        Ok(WeightedNormValue { plain, with_deriv: plain + alpha * deriv, r, alpha })
    }

    pub fn norm_plain(&self, r: f64) -> f64 {
        self.weighted_norm(r, 0.5).map(|n| n.plain).unwrap_or(f64::INFINITY)
    }

    /// Largest |entry| difference against another operator.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut worst = 0.0f64;
        let keys: std::collections::BTreeSet<i64> =
            self.diags.keys().chain(other.diags.keys()).copied().collect();
        for l in keys {
            let len = self.diag_len(l);
            for i in 0..len {
                let a = self.diags.get(&l).map(|d| d.vals[i]).unwrap_or(0.0);
                let b = other.diags.get(&l).map(|d| d.vals[i]).unwrap_or(0.0);
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.diags
            .values()
            .flat_map(|d| d.vals.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Verify the claimed symmetry tag entrywise within `tol`.
    pub fn verify_symmetry(&self, tol: f64) -> Result<(), OpError> {
        let sign = match self.symmetry {
            Symmetry::SelfAdjoint => 1.0,
            Symmetry::SkewAdjoint => -1.0,
            Symmetry::None => return Ok(()),
        };
        for (l, d) in &self.diags {
            if *l < 0 {
                continue;
            }
            for i in 0..d.vals.len() {
                let n = self.col_lo(*l) + i as i64;
                let m = n + l;
                let residual = (self.value_at(m, n) - sign * self.value_at(n, m)).abs();
                if residual > tol {
                    return Err(OpError::SymmetryViolation { m, n, residual });
                }
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.window.len();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (l, d) in &self.diags {
            let col_lo = self.col_lo(*l);
            for (i, v) in d.vals.iter().enumerate() {
                let col = col_lo + i as i64;
                let row = col + l;
                m[((row - self.window.lo) as usize, (col - self.window.lo) as usize)] = *v;
            }
        }
        m
    }

    /// Banded values-only view for artifact serialization.
    pub fn banded_values(&self) -> BandedValues {
        BandedValues {
            window: self.window,
            diagonals: self
                .diags
                .iter()
                .map(|(l, d)| BandedDiagonal { offset: *l, values: d.vals.clone() })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandedValues {
    pub window: SiteWindow,
    pub diagonals: Vec<BandedDiagonal>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandedDiagonal {
    pub offset: i64,
    pub values: Vec<f64>,
}

/// Commutator [A, B] = AB − BA.
pub fn commutator(a: &LatticeOperator, b: &LatticeOperator) -> Result<LatticeOperator, OpError> {
    a.mul(b)?.sub(&b.mul(a)?)
}

/// Exponential-series configuration shared by `op_exp` and
/// `commutator_series`.
pub const DEFAULT_J_MAX: usize = 64;

/// exp(W) by partial sums Σ_{j≤J} W^j/j!, J chosen so that the norm-bound
/// tail Σ_{j>J} ‖W‖^j/j! falls below `tail_tol`. Returns the partial sum and
/// the certified tail bound (in the α-norm at r = 1/8, α = 1/10).
pub fn op_exp(
    w: &LatticeOperator,
    tail_tol: f64,
    j_max: usize,
) -> Result<(LatticeOperator, f64), OpError> {
    let x = w.weighted_norm(0.125, 0.1)?.with_deriv;
    let j = series_order(x, 1.0, tail_tol, j_max)?;
    let mut sum = LatticeOperator::identity(w.window(), w.n_params());
    let mut term = LatticeOperator::identity(w.window(), w.n_params());
    for jj in 1..=j {
        term = term.mul(w)?.scale(1.0 / jj as f64);
        sum = sum.add(&term)?;
    }
    Ok((sum, exp_tail(x, j)))
}

/// Σ_{n≥1} ad_W^n(X)/n! with the tail certified through
/// ‖ad_W(Y)‖ ≤ 2‖W‖‖Y‖.
pub fn commutator_series(
    w: &LatticeOperator,
    x: &LatticeOperator,
    tail_tol: f64,
) -> Result<(LatticeOperator, f64), OpError> {
    commutator_series_from(w, x, tail_tol, 1)
}

/// Σ_{n≥n0} ad_W^n(X)/n!; `n0 = 1` gives e^W X e^{−W} − X.
pub fn commutator_series_from(
    w: &LatticeOperator,
    x: &LatticeOperator,
    tail_tol: f64,
    n0: usize,
) -> Result<(LatticeOperator, f64), OpError> {
    let two_w = 2.0 * w.weighted_norm(0.125, 0.1)?.with_deriv;
    let x_norm = x.weighted_norm(0.125, 0.1)?.with_deriv;
    let j = series_order(two_w, x_norm, tail_tol, DEFAULT_J_MAX)?;
    let mut sum = LatticeOperator::zero(w.window(), w.n_params());
    let mut ad = x.clone();
    let mut factorial = 1.0f64;
    for n in 1..=j {
        ad = commutator(w, &ad)?;
        factorial *= n as f64;
        if n >= n0 {
            sum = sum.add(&ad.scale(1.0 / factorial))?;
        }
    }
    Ok((sum, exp_tail(two_w, j) * x_norm))
}

/// Smallest J with prefactor · Σ_{j>J} x^j/j! ≤ tol.
fn series_order(x: f64, prefactor: f64, tol: f64, j_max: usize) -> Result<usize, OpError> {
    for j in 0..=j_max {
        let tail = prefactor * exp_tail(x, j);
        if tail <= tol {
            return Ok(j);
        }
    }
    Err(OpError::TailTolerance {
        achieved: prefactor * exp_tail(x, j_max),
        requested: tol,
        j_max,
    })
}

/// Upper bound for Σ_{j>J} x^j/j! (geometric-majorant form, valid for x ≥ 0).
fn exp_tail(x: f64, j: usize) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mut lead = 1.0f64;
    for i in 1..=(j + 1) {
        lead *= x / i as f64;
    }
    let ratio = x / (j as f64 + 2.0);
    if ratio < 1.0 {
        lead / (1.0 - ratio)
    } else {
        // fall back to the full remainder bound e^x − partial sum
        let mut partial = 0.0;
        let mut term = 1.0;
        for i in 0..=j {
            if i > 0 {
                term *= x / i as f64;
            }
            partial += term;
        }
        (x.exp() - partial).max(lead)
    }
}
