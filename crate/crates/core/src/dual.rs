//! Forward-mode dual numbers over a fixed list of active parameters.
//!
//! A value carries its gradient with respect to `n_params` selected disorder
//! sites (or the b tangential parameters ξ). The gradient length is fixed per
//! computation; mixing lengths is a programming error and panics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Real dual scalar: value + gradient w.r.t. the active parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualScalar {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl DualScalar {
    pub fn constant(value: f64, n_params: usize) -> Self {
        Self { value, grad: vec![0.0; n_params] }
    }

    /// Value `v` seen as the active parameter with index `idx` (unit gradient).
    pub fn parameter(value: f64, idx: usize, n_params: usize) -> Self {
        let mut grad = vec![0.0; n_params];
        grad[idx] = 1.0;
        Self { value, grad }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }

    pub fn add(&self, other: &Self) -> Self {
        let grad = self.grad.iter().zip(&other.grad).map(|(a, b)| a + b).collect();
        Self { value: self.value + other.value, grad }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let grad = self.grad.iter().zip(&other.grad).map(|(a, b)| a - b).collect();
        Self { value: self.value - other.value, grad }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let grad = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(a, b)| a * other.value + b * self.value)
            .collect();
        Self { value: self.value * other.value, grad }
    }

    /// Quotient rule: d(p/q) = dp/q − p·dq/q².
    pub fn div(&self, other: &Self) -> Self {
        let q = other.value;
        let grad = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(dp, dq)| dp / q - self.value * dq / (q * q))
            .collect();
        Self { value: self.value / q, grad }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { value: self.value * c, grad: self.grad.iter().map(|g| g * c).collect() }
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    /// |value| + Σ_j |grad_j|, the magnitude used by coefficient norms.
    pub fn mag_with_grad(&self) -> f64 {
        self.value.abs() + self.grad.iter().map(|g| g.abs()).sum::<f64>()
    }
}

/// Complex dual scalar for Taylor–Fourier coefficients, gradient in ξ ∈ ℝᵇ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CDual {
    pub value: Complex64,
    pub grad: Vec<Complex64>,
}

impl CDual {
    pub fn zero(n_params: usize) -> Self {
        Self { value: Complex64::new(0.0, 0.0), grad: vec![Complex64::new(0.0, 0.0); n_params] }
    }

    pub fn constant(value: Complex64, n_params: usize) -> Self {
        Self { value, grad: vec![Complex64::new(0.0, 0.0); n_params] }
    }

    pub fn from_real_dual(d: &DualScalar) -> Self {
        Self {
            value: Complex64::new(d.value, 0.0),
            grad: d.grad.iter().map(|g| Complex64::new(*g, 0.0)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.grad.len()
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.value += other.value;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += *b;
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let grad = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(a, b)| a * other.value + b * self.value)
            .collect();
        Self { value: self.value * other.value, grad }
    }

    pub fn div(&self, other: &Self) -> Self {
        let q = other.value;
        let grad = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(dp, dq)| dp / q - self.value * dq / (q * q))
            .collect();
        Self { value: self.value / q, grad }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self { value: self.value * c, grad: self.grad.iter().map(|g| g * c).collect() }
    }

    pub fn conj(&self) -> Self {
        Self { value: self.value.conj(), grad: self.grad.iter().map(|g| g.conj()).collect() }
    }

    pub fn neg(&self) -> Self {
        self.scale(Complex64::new(-1.0, 0.0))
    }

    /// |value| + Σ_j |grad_j| (the |·|_𝒪 coefficient magnitude).
    pub fn mag_with_grad(&self) -> f64 {
        self.value.norm() + self.grad.iter().map(|g| g.norm()).sum::<f64>()
    }

    pub fn is_negligible(&self, tol: f64) -> bool {
        self.value.norm() <= tol && self.grad.iter().all(|g| g.norm() <= tol)
    }
}
