//! Gauss–Hermite quadrature.
//!
//! Nodes and weights for `∫ exp(-x²) f(x) dx`. Nodes start as eigenvalues of
//! the Jacobi matrix and are polished by Newton steps on the orthonormal
//! Hermite recurrence, which also yields the weights.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

const PIM4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
const NEWTON_STEPS: usize = 3;

/// Orthonormal Hermite value `p_n(z)` and derivative, scaled so that the
/// Gauss weight is `2 / p'²`.
fn orthonormal(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = PIM4;
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i, i - 1)] = b;
            jacobi[(i - 1, i)] = b;
        }
        let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        nodes.sort_by(f64::total_cmp);
        let mut weights = Vec::with_capacity(n);
        for z in nodes.iter_mut() {
            for _ in 0..NEWTON_STEPS {
                let (p, dp) = orthonormal(n, *z);
                *z -= p / dp;
            }
            let (_, dp) = orthonormal(n, *z);
            let w = 2.0 / (dp * dp);
            if !z.is_finite() || !w.is_finite() {
                return Err(Error::Numerical(format!("Gauss-Hermite node {z} with {n} points is not finite")));
            }
            weights.push(w);
        }
        // enforce exact symmetry
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let z = 0.5 * (nodes[j] - nodes[i]);
            let w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -z;
            nodes[j] = z;
            weights[i] = w;
            weights[j] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E f(X)` for `X ~ Normal(mean, std²)`.
    pub fn normal_expectation(&self, mean: f64, std: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * std;
        let norm = std::f64::consts::PI.sqrt();
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(mean + scale * x)).sum::<f64>() / norm
    }
}
