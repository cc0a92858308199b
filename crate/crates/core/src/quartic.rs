//! Quartic interaction tensor in the diagonal frame.
//!
//! With u = Gq the cubic lattice nonlinearity turns into the Hamiltonian
//!
//! 𝓗(q, q̄) = Σ_m d_m q̄_m q_m + ε Σ 𝒢_{(m,m₁,m₂,m₃)} q_{m₁}q̄_{m₂}q_{m₃}q̄_m,
//!
//! 𝒢_{(m,m₁,m₂,m₃)} = ½ Σ_k G_{k,m}G_{k,m₁}G_{k,m₂}G_{k,m₃},
//!
//! fully symmetric in all four indices and decaying like
//! |𝒢| ≤ 24 e^{−(max−min)/8}. The tensor is stored on canonical sorted
//! quadruples; equations of motion and energy evaluate through a scatter
//! plan expanded once from the stored entries.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::DualScalar;
use crate::weighted_ops::{LatticeOperator, SiteWindow};

#[derive(Debug, Error)]
pub enum QuarticError {
    #[error("G is not unitary on the tensor support: max |GGᵀ − I| = {dev:.3e} > {tol:.3e}")]
    NotUnitary { dev: f64, tol: f64 },
    #[error("tensor support [{0}, {1}] exceeds the operator window [{2}, {3}]")]
    SupportOutsideWindow(i64, i64, i64, i64),
}

/// Sparse fully-symmetric quartic tensor with dual-number coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarticTensor {
    pub support: SiteWindow,
    pub n_params: usize,
    pub prune_tol: f64,
    /// canonical sorted quadruple (i ≤ j ≤ k ≤ l) → coefficient
    coeffs: BTreeMap<[i64; 4], DualScalar>,
    /// total |value| mass removed by pruning
    pub dropped_mass: f64,
}

impl QuarticTensor {
    pub fn get(&self, m: i64, m1: i64, m2: i64, m3: i64) -> DualScalar {
        let mut key = [m, m1, m2, m3];
        key.sort_unstable();
        self.coeffs
            .get(&key)
            .cloned()
            .unwrap_or_else(|| DualScalar::constant(0.0, self.n_params))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i64; 4], &DualScalar)> {
        self.coeffs.iter()
    }

    /// Largest excess over the decay bound 24 e^{−(max−min)/8}, for the
    /// value and for the (1/10)-weighted gradient separately; ≤ 0 means the
    /// bound holds entrywise.
    pub fn decay_excess(&self) -> (f64, f64) {
        let mut value_excess = f64::NEG_INFINITY;
        let mut grad_excess = f64::NEG_INFINITY;
        for (key, c) in &self.coeffs {
            let span = (key[3] - key[0]) as f64;
            let bound = 24.0 * (-span / 8.0).exp();
            value_excess = value_excess.max(c.value.abs() - bound);
            let gmax = c.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            grad_excess = grad_excess.max(0.1 * gmax - bound);
        }
        (value_excess, grad_excess)
    }
}

/// Dense copy of G's values and per-parameter gradients (row-major access).
struct DenseG {
    window: SiteWindow,
    n: usize,
    np: usize,
    vals: Vec<f64>,
    grads: Vec<f64>,
}

impl DenseG {
    fn new(g: &LatticeOperator) -> Self {
        let window = g.window();
        let n = window.len();
        let np = g.n_params();
        let mut vals = vec![0.0; n * n];
        let mut grads = vec![0.0; n * n * np];
        for m in window.sites() {
            for nn in window.sites() {
                let e = g.entry(m, nn);
                let row = (m - window.lo) as usize;
                let col = (nn - window.lo) as usize;
                vals[row * n + col] = e.value;
                grads[(row * n + col) * np..(row * n + col + 1) * np].copy_from_slice(&e.grad);
            }
        }
        Self { window, n, np, vals, grads }
    }

    #[inline]
    fn v(&self, row: usize, col: usize) -> f64 {
        self.vals[row * self.n + col]
    }

    #[inline]
    fn g(&self, row: usize, col: usize, j: usize) -> f64 {
        self.grads[(row * self.n + col) * self.np + j]
    }
}

/// Build 𝒢 on `support` from a unitary G, keeping entries above `prune_tol`.
///
/// Exploits the full index symmetry (only sorted quadruples are computed) and
/// the band locality of G; the row sum runs over the whole window of G.
pub fn build_quartic(
    g: &LatticeOperator,
    support: SiteWindow,
    prune_tol: f64,
) -> Result<QuarticTensor, QuarticError> {
    let window = g.window();
    if support.lo < window.lo || support.hi > window.hi {
        return Err(QuarticError::SupportOutsideWindow(
            support.lo, support.hi, window.lo, window.hi,
        ));
    }
    // unitarity precondition on the support block
    let ggt = g.mul(&g.transpose()).expect("same window");
    let mut dev = 0.0f64;
    for m in support.sites() {
        for n in support.sites() {
            let target = if m == n { 1.0 } else { 0.0 };
            dev = dev.max((ggt.value_at(m, n) - target).abs());
        }
    }
    if dev > 1e-9 {
        return Err(QuarticError::NotUnitary { dev, tol: 1e-9 });
    }

    let dense = DenseG::new(g);
    let np = dense.np;
    // columns i and l越 2·bandwidth apart have disjoint row supports
    let reach = 2 * g.bandwidth() + 1;

    let per_i: Vec<(Vec<([i64; 4], DualScalar)>, f64)> = support
        .sites()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let mut kept = Vec::new();
            let mut dropped = 0.0;
            let hi = support.hi.min(i + reach);
            for j in i..=hi {
                for k in j..=hi {
                    for l in k..=hi {
                        let ci = (i - dense.window.lo) as usize;
                        let cj = (j - dense.window.lo) as usize;
                        let ck = (k - dense.window.lo) as usize;
                        let cl = (l - dense.window.lo) as usize;
                        // rows where all four columns can be nonzero
                        let row_lo = (i - g.bandwidth()).max(dense.window.lo);
                        let row_hi = (l + g.bandwidth()).min(dense.window.hi);
                        let mut value = 0.0f64;
                        let mut grad = vec![0.0f64; np];
                        for row_site in row_lo..=row_hi {
                            let row = (row_site - dense.window.lo) as usize;
                            let (a, b, c, d) = (
                                dense.v(row, ci),
                                dense.v(row, cj),
                                dense.v(row, ck),
                                dense.v(row, cl),
                            );
                            let abcd = a * b * c * d;
                            if abcd == 0.0
                                && a == 0.0
                                && b == 0.0
                                && c == 0.0
                                && d == 0.0
                            {
                                continue;
                            }
                            value += abcd;
                            for jj in 0..np {
                                grad[jj] += dense.g(row, ci, jj) * b * c * d
                                    + a * dense.g(row, cj, jj) * c * d
                                    + a * b * dense.g(row, ck, jj) * d
                                    + a * b * c * dense.g(row, cl, jj);
                            }
                        }
                        value *= 0.5;
                        grad.iter_mut().for_each(|x| *x *= 0.5);
                        if value.abs() > prune_tol {
                            kept.push(([i, j, k, l], DualScalar { value, grad }));
                        } else {
                            dropped += value.abs();
                        }
                    }
                }
            }
            (kept, dropped)
        })
        .collect();

    let mut coeffs = BTreeMap::new();
    let mut dropped_mass = 0.0;
    for (kept, dropped) in per_i {
        dropped_mass += dropped;
        for (key, val) in kept {
            coeffs.insert(key, val);
        }
    }
    Ok(QuarticTensor { support, n_params: np, prune_tol, coeffs, dropped_mass })
}

/// All distinct orderings of a sorted quadruple.
pub fn distinct_orderings(key: &[i64; 4]) -> Vec<[i64; 4]> {
    const PERMS: [[usize; 4]; 24] = [
        [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2], [0, 3, 2, 1],
        [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0], [1, 3, 0, 2], [1, 3, 2, 0],
        [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3], [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0],
        [3, 0, 1, 2], [3, 0, 2, 1], [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
    ];
    let mut out: Vec<[i64; 4]> = PERMS
        .iter()
        .map(|p| [key[p[0]], key[p[1]], key[p[2]], key[p[3]]])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Precomputed evaluation plan for the equations of motion
/// i q̇_n = −d_n q_n − ε Σ G_{k,n}G_{k,m₁}G_{k,m₂}G_{k,m₃} q_{m₁}q̄_{m₂}q_{m₃}
/// and the energy 𝓗, expanded from the stored tensor once.
pub struct QFlow {
    pub support: SiteWindow,
    pub eps: f64,
    d_vals: Vec<f64>,
    /// out += coeff · q[a] · conj(q[b]) · q[c]
    scatter: Vec<(u32, u32, u32, u32, f64)>,
    /// energy += coeff · q[h1] conj(q[a1]) q[h2] conj(q[a2])
    energy_terms: Vec<(u32, u32, u32, u32, f64)>,
}

impl QFlow {
    /// `d` are the frame eigenvalues on the tensor support, window-ordered.
    pub fn new(d: &[DualScalar], tensor: &QuarticTensor, eps: f64) -> Self {
        assert_eq!(d.len(), tensor.support.len());
        let lo = tensor.support.lo;
        let mut scatter = Vec::new();
        let mut energy_terms = Vec::new();
        for (key, c) in tensor.iter() {
            for p in distinct_orderings(key) {
                // ordered tuple (m, m1, m2, m3): monomial q_{m1} q̄_{m2} q_{m3} q̄_m
                let m = (p[0] - lo) as u32;
                let m1 = (p[1] - lo) as u32;
                let m2 = (p[2] - lo) as u32;
                let m3 = (p[3] - lo) as u32;
                energy_terms.push((m1, m2, m3, m, c.value));
                // ∂/∂q̄ at slots m2 and m
                scatter.push((m2, m1, m, m3, c.value));
                scatter.push((m, m1, m2, m3, c.value));
            }
        }
        Self {
            support: tensor.support,
            eps,
            d_vals: d.iter().map(|e| e.value).collect(),
            scatter,
            energy_terms,
        }
    }

    pub fn scatter_len(&self) -> usize {
        self.scatter.len()
    }

    /// i·q̇ = −∂𝓗/∂q̄ evaluated at `q`.
    pub fn i_qdot(&self, q: &[Complex64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = self
            .d_vals
            .iter()
            .zip(q)
            .map(|(d, qn)| -d * qn)
            .collect();
        if self.eps != 0.0 {
            for &(o, a, b, c, v) in &self.scatter {
                out[o as usize] -=
                    self.eps * v * q[a as usize] * q[b as usize].conj() * q[c as usize];
            }
        }
        out
    }

    /// 𝓗(q, q̄) = Σ d|q|² + ε Σ 𝒢 q q̄ q q̄ (real up to roundoff).
    pub fn energy(&self, q: &[Complex64]) -> f64 {
        let mut h = 0.0;
        for (d, qn) in self.d_vals.iter().zip(q) {
            h += d * qn.norm_sqr();
        }
        if self.eps != 0.0 {
            let mut quart = Complex64::new(0.0, 0.0);
            for &(h1, a1, h2, a2, v) in &self.energy_terms {
                quart += v
                    * q[h1 as usize]
                    * q[a1 as usize].conj()
                    * q[h2 as usize]
                    * q[a2 as usize].conj();
            }
            h += self.eps * quart.re;
        }
        h
    }

    /// Classical RK4 on i q̇ = −∂𝓗/∂q̄, i.e. q̇ = −i (i q̇-field evaluated).
    pub fn rk4_step(&self, q: &mut Vec<Complex64>, dt: f64) {
        let deriv = |state: &[Complex64]| -> Vec<Complex64> {
            self.i_qdot(state).iter().map(|z| -Complex64::i() * z).collect()
        };
        let k1 = deriv(q);
        let s2: Vec<Complex64> =
            q.iter().zip(&k1).map(|(x, k)| x + 0.5 * dt * k).collect();
        let k2 = deriv(&s2);
        let s3: Vec<Complex64> =
            q.iter().zip(&k2).map(|(x, k)| x + 0.5 * dt * k).collect();
        let k3 = deriv(&s3);
        let s4: Vec<Complex64> = q.iter().zip(&k3).map(|(x, k)| x + dt * k).collect();
        let k4 = deriv(&s4);
        for i in 0..q.len() {
            q[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// One-shot vector field per the module contract: returns i·q̇.
pub fn hamiltonian_vector_field(
    d: &[DualScalar],
    tensor: &QuarticTensor,
    eps: f64,
    q: &[Complex64],
) -> Vec<Complex64> {
    QFlow::new(d, tensor, eps).i_qdot(q)
}

/// One-shot energy 𝓗(q, q̄).
pub fn hamiltonian_energy(
    d: &[DualScalar],
    tensor: &QuarticTensor,
    eps: f64,
    q: &[Complex64],
) -> f64 {
    QFlow::new(d, tensor, eps).energy(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_kam::{diagonalize, ActiveParams, DiagonalizeOptions, StarkModel};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_diag_result(
        window: SiteWindow,
        seed: u64,
    ) -> crate::linear_kam::DiagonalizationResult {
        let model = StarkModel::sample(window, 1.0 / 60.0, seed);
        let active = ActiveParams::with_sites(vec![0]);
        diagonalize(&model, &active, &DiagonalizeOptions::default()).unwrap()
    }

    #[test]
    fn identity_g_gives_half_on_diagonal_quadruples() {
        let w = SiteWindow::new(-5, 5);
        let g = LatticeOperator::identity(w, 1);
        let t = build_quartic(&g, w, 1e-14).unwrap();
        for n in w.sites() {
            assert!((t.get(n, n, n, n).value - 0.5).abs() < 1e-15);
        }
        assert_eq!(t.len(), w.len()); // nothing off-diagonal survives
        assert!((t.get(0, 1, 0, 0).value).abs() == 0.0);
    }

    #[test]
    fn matches_naive_quintuple_loop() {
        // brute-force O(N^5) oracle on window [−12, 12]
        let window = SiteWindow::new(-12, 12);
        let result = small_diag_result(window, 17);
        let g = &result.g;
        let t = build_quartic(g, window, 1e-14).unwrap();

        let np = g.n_params();
        let mut worst = 0.0f64;
        let mut worst_grad = 0.0f64;
        for m in window.sites() {
            for m1 in window.sites() {
                for m2 in window.sites() {
                    for m3 in window.sites() {
                        let mut value = 0.0;
                        let mut grad = vec![0.0; np];
                        for k in window.sites() {
                            let (a, b, c, d) = (
                                g.value_at(k, m),
                                g.value_at(k, m1),
                                g.value_at(k, m2),
                                g.value_at(k, m3),
                            );
                            value += a * b * c * d;
                            for j in 0..np {
                                grad[j] += g.grad_at(k, m, j) * b * c * d
                                    + a * g.grad_at(k, m1, j) * c * d
                                    + a * b * g.grad_at(k, m2, j) * d
                                    + a * b * c * g.grad_at(k, m3, j);
                            }
                        }
                        value *= 0.5;
                        let e = t.get(m, m1, m2, m3);
                        if value.abs() > 1e-14 {
                            worst = worst.max((e.value - value).abs());
                            for j in 0..np {
                                worst_grad = worst_grad.max((e.grad[j] - 0.5 * grad[j]).abs());
                            }
                        }
                    }
                }
            }
        }
        assert!(worst < 1e-12, "tensor vs naive loop: {worst:.3e}");
        assert!(worst_grad < 1e-12, "tensor grads vs naive loop: {worst_grad:.3e}");
    }

    #[test]
    fn decay_bound_holds() {
        let window = SiteWindow::new(-16, 16);
        let result = small_diag_result(window, 23);
        let t = build_quartic(&result.g, window.interior(4), 1e-14).unwrap();
        let (value_excess, grad_excess) = t.decay_excess();
        assert!(value_excess <= 0.0, "value decay excess {value_excess:.3e}");
        assert!(grad_excess <= 0.0, "grad decay excess {grad_excess:.3e}");
        // pruning stayed honest
        assert!(t.dropped_mass < 1e-10 * t.len() as f64);
    }

    #[test]
    fn symmetry_group_on_random_quadruples() {
        let window = SiteWindow::new(-10, 10);
        let result = small_diag_result(window, 29);
        let t = build_quartic(&result.g, window, 1e-14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let q: Vec<i64> =
                (0..4).map(|_| rng.gen_range(window.lo..=window.hi)).collect();
            let base = t.get(q[0], q[1], q[2], q[3]);
            // exchanges leaving q_{m1} q̄_{m2} q_{m3} q̄_m invariant
            let swaps = [
                [q[0], q[3], q[2], q[1]], // m1 ↔ m3
                [q[2], q[1], q[0], q[3]], // m ↔ m2
                [q[2], q[3], q[0], q[1]], // both
            ];
            for s in swaps {
                let other = t.get(s[0], s[1], s[2], s[3]);
                assert_eq!(base.value, other.value);
            }
        }
    }

    fn random_state(n: usize, scale: f64, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
            .collect()
    }

    #[test]
    fn linear_flow_at_eps_zero() {
        let window = SiteWindow::new(-6, 6);
        let result = small_diag_result(window, 31);
        let t = build_quartic(&result.g, window, 1e-14).unwrap();
        let q = random_state(window.len(), 0.1, 1);
        let out = hamiltonian_vector_field(&result.eigenvalues, &t, 0.0, &q);
        // i q̇_n = −d_n q_n  ⟺  q̇_n = i d_n q_n
        for (i, _) in window.sites().enumerate() {
            let expect = -result.eigenvalues[i].value * q[i];
            assert!((out[i] - expect).norm() < 1e-15);
        }
    }

    #[test]
    fn gradient_check_against_central_differences() {
        let window = SiteWindow::new(-6, 6);
        let result = small_diag_result(window, 37);
        let t = build_quartic(&result.g, window, 1e-14).unwrap();
        let eps = 0.3;
        let flow = QFlow::new(&result.eigenvalues, &t, eps);
        let q = random_state(window.len(), 0.2, 2);
        let i_qdot = flow.i_qdot(&q);

        let h = 1e-5;
        for i in 0..q.len() {
            // ∂𝓗/∂q̄_n = ½(∂𝓗/∂x_n + i ∂𝓗/∂y_n); matches −(i q̇)_n... i q̇ = −∂𝓗/∂q̄
            let mut qp = q.clone();
            qp[i] += Complex64::new(h, 0.0);
            let mut qm = q.clone();
            qm[i] -= Complex64::new(h, 0.0);
            let dx = (flow.energy(&qp) - flow.energy(&qm)) / (2.0 * h);
            qp = q.clone();
            qp[i] += Complex64::new(0.0, h);
            qm = q.clone();
            qm[i] -= Complex64::new(0.0, h);
            let dy = (flow.energy(&qp) - flow.energy(&qm)) / (2.0 * h);
            let dhdqbar = Complex64::new(dx, dy) * 0.5;
            let expect = -i_qdot[i];
            let denom = expect.norm().max(1e-6);
            assert!(
                (dhdqbar - expect).norm() / denom < 1e-6,
                "site {i}: fd {dhdqbar} vs field {expect}"
            );
        }
    }

    #[test]
    fn l2_conservation_identity() {
        let window = SiteWindow::new(-8, 8);
        let result = small_diag_result(window, 41);
        let t = build_quartic(&result.g, window, 1e-14).unwrap();
        let flow = QFlow::new(&result.eigenvalues, &t, 0.7);
        for seed in 0..5 {
            let q = random_state(window.len(), 0.3, seed);
            let i_qdot = flow.i_qdot(&q);
            // Re⟨q, q̇⟩ = 0: q̇ = −i (i q̇)
            let mut re = 0.0;
            for (qn, iq) in q.iter().zip(&i_qdot) {
                re += (qn.conj() * (-Complex64::i() * iq)).re;
            }
            assert!(re.abs() < 1e-12, "Re⟨q, q̇⟩ = {re:.3e}");
        }
    }

    #[test]
    fn energy_and_mass_conserved_along_rk4() {
        // long-horizon run t ∈ [0, 100] at dt = 1e−3, ‖q‖ ≤ 0.1;
        // the trajectory tensor is pruned harder so the scatter stays small,
        // conservation is measured for the pruned Hamiltonian (self-consistent)
        let window = SiteWindow::new(-6, 6);
        let result = small_diag_result(window, 43);
        let t = build_quartic(&result.g, window, 2e-5).unwrap();
        let flow = QFlow::new(&result.eigenvalues, &t, 1e-4);

        let mut q = random_state(window.len(), 0.0, 7);
        let norm0: f64 = 0.1;
        let raw = random_state(window.len(), 1.0, 7);
        let scale = norm0 / raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for (qi, ri) in q.iter_mut().zip(&raw) {
            *qi = ri * scale;
        }

        let e0 = flow.energy(&q);
        let m0: f64 = q.iter().map(|z| z.norm_sqr()).sum();
        let dt = 1e-3;
        let steps = 100_000usize;
        let mut max_e_drift = 0.0f64;
        let mut max_m_drift = 0.0f64;
        for s in 1..=steps {
            flow.rk4_step(&mut q, dt);
            if s % 1000 == 0 {
                max_e_drift = max_e_drift.max((flow.energy(&q) - e0).abs());
                let m: f64 = q.iter().map(|z| z.norm_sqr()).sum();
                max_m_drift = max_m_drift.max((m - m0).abs());
            }
        }
        assert!(max_e_drift <= 1e-8, "energy drift {max_e_drift:.3e}");
        assert!(max_m_drift <= 1e-8, "mass drift {max_m_drift:.3e}");
    }
}
