//! Differentiable costs with exact gradients and Hessians.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::rng::{auxiliary_stream, StreamRng};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const DEFAULT_QUADRATURE_NODES: usize = 200;

/// A twice-differentiable cost `J(w)` over `R^M`.
pub trait Problem: Send + Sync + Debug {
    fn dimension(&self) -> usize;

    fn loss(&self, w: &[f64]) -> f64;

    fn gradient_into(&self, w: &[f64], out: &mut [f64]);

    fn hessian(&self, w: &[f64]) -> DMatrix<f64>;

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dimension()];
        self.gradient_into(w, &mut g);
        g
    }

    /// Whether the cost is an expectation with a per-sample gradient `∇Q(w; x)`.
    fn supports_sampling(&self) -> bool {
        false
    }

    /// One draw of the per-sample gradient `∇Q(w; x)` with fresh data `x`.
    fn sample_gradient_into(&self, _w: &[f64], _rng: &mut StreamRng, _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported(format!("{self:?} has no data law, so natural sampling noise is undefined")))
    }
}

/// Lipschitz constants of the gradient and Hessian, plus the optional
/// per-pair gradient disagreement bound across agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub delta: f64,
    pub rho_hessian: f64,
    pub disagreement_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessEstimate {
    pub delta_hat: f64,
    pub rho_hat: f64,
    pub pairs_used: usize,
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn symmetric(dim: usize, half_width: f64) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Dimension { expected: self.lower.len(), found: self.upper.len() });
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!("region has zero measure along axis {i}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^x)`, i.e. the logistic function at `-x`.
fn logistic_neg(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Single-hidden-unit network with logistic output and ridge penalty:
/// `J(w₁, W₂) = E log(1 + exp(−γ w₁ W₂ h)) + (reg/2)(w₁² + W₂²)`,
/// labels `γ = ±1` equiprobable and features `h ~ N(γ, 1)`.
///
/// Expectations use Gauss–Hermite quadrature per mixture component, so loss,
/// gradient and Hessian are deterministic.
#[derive(Debug, Clone)]
pub struct LogisticNNProblem {
    reg: f64,
    // (γh, weight) pairs covering both mixture components
    points: Vec<(f64, f64)>,
}

impl LogisticNNProblem {
    pub fn new(reg: f64) -> Result<Self> {
        Self::with_nodes(reg, DEFAULT_QUADRATURE_NODES)
    }

    pub fn with_nodes(reg: f64, nodes: usize) -> Result<Self> {
        if !(reg.is_finite() && reg >= 0.0) {
            return Err(Error::InvalidArgument(format!("regularization must be >= 0, got {reg}")));
        }
        let gh = GaussHermite::new(nodes)?;
        let norm = std::f64::consts::PI.sqrt();
        let mut points = Vec::with_capacity(2 * nodes);
        for label in [-1.0_f64, 1.0] {
            for (x, w) in gh.nodes().iter().zip(gh.weights()) {
                let h = label + std::f64::consts::SQRT_2 * x;
                points.push((label * h, 0.5 * w / norm));
            }
        }
        Ok(Self { reg, points })
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    /// Gradient of the per-sample loss plus the penalty for one `(γ, h)`.
    pub fn sample_gradient_at(&self, w: &[f64], label: f64, feature: f64, out: &mut [f64]) {
        let (a, b) = (w[0], w[1]);
        let u = label * feature;
        let s = logistic_neg(u * a * b);
        out[0] = self.reg * a - u * b * s;
        out[1] = self.reg * b - u * a * s;
    }
}

impl Problem for LogisticNNProblem {
    fn dimension(&self) -> usize {
        2
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let q = w[0] * w[1];
        let data: f64 = self.points.iter().map(|&(u, wt)| wt * softplus(-u * q)).sum();
        data + 0.5 * self.reg * (w[0] * w[0] + w[1] * w[1])
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        let (a, b) = (w[0], w[1]);
        let q = a * b;
        // dQ/dq = −u σ(−uq)
        let dq: f64 = self.points.iter().map(|&(u, wt)| -wt * u * logistic_neg(u * q)).sum();
        out[0] = self.reg * a + dq * b;
        out[1] = self.reg * b + dq * a;
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let (a, b) = (w[0], w[1]);
        let q = a * b;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for &(u, wt) in &self.points {
            let sm = logistic_neg(u * q);
            d1 -= wt * u * sm;
            d2 += wt * u * u * sm * (1.0 - sm);
        }
        let cross = d2 * q + d1;
        DMatrix::from_row_slice(2, 2, &[self.reg + d2 * b * b, cross, cross, self.reg + d2 * a * a])
    }

    fn supports_sampling(&self) -> bool {
        true
    }

    fn sample_gradient_into(&self, w: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> Result<()> {
        let label = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let z: f64 = rng.sample(StandardNormal);
        self.sample_gradient_at(w, label, label + z, out);
        Ok(())
    }
}

/// `J(w) = ½ wᵀ H w` with a fixed symmetric `H`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    h: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension { expected: m.nrows(), found: m.ncols() });
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} must be finite and symmetric (asymmetry {asym:e})")));
    }
    Ok(())
}

impl QuadraticProblem {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&h, "quadratic matrix")?;
        if h.nrows() == 0 {
            return Err(Error::InvalidArgument("quadratic matrix is empty".into()));
        }
        Ok(Self { h })
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }
}

impl Problem for QuadraticProblem {
    fn dimension(&self) -> usize {
        self.h.nrows()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let v = DVector::from_column_slice(w);
        0.5 * v.dot(&(&self.h * &v))
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        let m = self.dimension();
        for (i, o) in out.iter_mut().enumerate().take(m) {
            *o = (0..m).map(|j| self.h[(i, j)] * w[j]).sum();
        }
    }

    fn hessian(&self, _w: &[f64]) -> DMatrix<f64> {
        self.h.clone()
    }
}

/// Agent-specific cost `J_k(w) = J(w) + bᵀw + ½ wᵀ B w`.
///
/// Shifts whose Perron-weighted sums vanish leave the aggregate cost
/// unchanged while making agents disagree.
#[derive(Debug, Clone)]
pub struct ShiftedProblem {
    base: Arc<dyn Problem>,
    linear: Vec<f64>,
    quadratic: DMatrix<f64>,
}

impl ShiftedProblem {
    pub fn new(base: Arc<dyn Problem>, linear: Vec<f64>, quadratic: DMatrix<f64>) -> Result<Self> {
        let m = base.dimension();
        if linear.len() != m {
            return Err(Error::Dimension { expected: m, found: linear.len() });
        }
        if quadratic.nrows() != m {
            return Err(Error::Dimension { expected: m, found: quadratic.nrows() });
        }
        check_symmetric(&quadratic, "quadratic shift")?;
        Ok(Self { base, linear, quadratic })
    }

    fn add_shift(&self, w: &[f64], out: &mut [f64]) {
        let m = self.linear.len();
        for (i, o) in out.iter_mut().enumerate().take(m) {
            *o += self.linear[i] + (0..m).map(|j| self.quadratic[(i, j)] * w[j]).sum::<f64>();
        }
    }
}

impl Problem for ShiftedProblem {
    fn dimension(&self) -> usize {
        self.base.dimension()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let v = DVector::from_column_slice(w);
        self.base.loss(w)
            + self.linear.iter().zip(w).map(|(b, x)| b * x).sum::<f64>()
            + 0.5 * v.dot(&(&self.quadratic * &v))
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        self.base.gradient_into(w, out);
        self.add_shift(w, out);
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        self.base.hessian(w) + &self.quadratic
    }

    fn supports_sampling(&self) -> bool {
        self.base.supports_sampling()
    }

    fn sample_gradient_into(&self, w: &[f64], rng: &mut StreamRng, out: &mut [f64]) -> Result<()> {
        self.base.sample_gradient_into(w, rng, out)?;
        self.add_shift(w, out);
        Ok(())
    }
}

/// Aggregate cost `J(w) = Σ_k p_k J_k(w)`.
#[derive(Debug, Clone)]
pub struct NetworkCost {
    problems: Vec<Arc<dyn Problem>>,
    weights: Vec<f64>,
}

impl NetworkCost {
    pub fn new(problems: Vec<Arc<dyn Problem>>, weights: Vec<f64>) -> Result<Self> {
        if problems.is_empty() {
            return Err(Error::InvalidArgument("network cost needs at least one agent".into()));
        }
        if problems.len() != weights.len() {
            return Err(Error::Dimension { expected: problems.len(), found: weights.len() });
        }
        let m = problems[0].dimension();
        if let Some(bad) = problems.iter().find(|p| p.dimension() != m) {
            return Err(Error::Dimension { expected: m, found: bad.dimension() });
        }
        Ok(Self { problems, weights })
    }

    pub fn agents(&self) -> &[Arc<dyn Problem>] {
        &self.problems
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Problem for NetworkCost {
    fn dimension(&self) -> usize {
        self.problems[0].dimension()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        self.problems.iter().zip(&self.weights).map(|(p, wk)| wk * p.loss(w)).sum()
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        let m = self.dimension();
        let mut scratch = vec![0.0; m];
        out[..m].iter_mut().for_each(|o| *o = 0.0);
        for (p, wk) in self.problems.iter().zip(&self.weights) {
            p.gradient_into(w, &mut scratch);
            for i in 0..m {
                out[i] += wk * scratch[i];
            }
        }
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let m = self.dimension();
        self.problems.iter().zip(&self.weights).fold(DMatrix::zeros(m, m), |acc, (p, wk)| acc + p.hessian(w) * *wk)
    }
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Empirical Lipschitz constants of the gradient and Hessian: the largest
/// difference quotients over `n_probes` random pairs in `region`.
pub fn estimate_smoothness(
    problem: &dyn Problem,
    region: &BoxRegion,
    n_probes: usize,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    region.validate()?;
    if region.dimension() != problem.dimension() {
        return Err(Error::Dimension { expected: problem.dimension(), found: region.dimension() });
    }
    if n_probes < 2 {
        return Err(Error::InvalidArgument("smoothness estimation needs at least 2 probes".into()));
    }
    let mut rng = auxiliary_stream(seed);
    let m = problem.dimension();
    let (mut gx, mut gy) = (vec![0.0; m], vec![0.0; m]);
    let mut est = SmoothnessEstimate { delta_hat: 0.0, rho_hat: 0.0, pairs_used: 0 };
    for _ in 0..n_probes {
        let x = region.sample(&mut rng);
        let y = region.sample(&mut rng);
        let dist = distance(&x, &y);
        if dist < 1e-12 {
            continue;
        }
        problem.gradient_into(&x, &mut gx);
        problem.gradient_into(&y, &mut gy);
        est.delta_hat = est.delta_hat.max(distance(&gx, &gy) / dist);
        let dh = problem.hessian(&x) - problem.hessian(&y);
        est.rho_hat = est.rho_hat.max(spectral_norm_symmetric(&dh) / dist);
        est.pairs_used += 1;
    }
    Ok(est)
}

/// Largest `‖∇J_k(x) − ∇J_l(x)‖` over agent pairs and random probes.
pub fn estimate_gradient_disagreement(
    problems: &[Arc<dyn Problem>],
    region: &BoxRegion,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    region.validate()?;
    let mut rng = auxiliary_stream(seed);
    let mut g = 0.0_f64;
    for _ in 0..n_probes {
        let x = region.sample(&mut rng);
        let grads: Vec<Vec<f64>> = problems.iter().map(|p| p.gradient(&x)).collect();
        for (i, gi) in grads.iter().enumerate() {
            for gj in &grads[i + 1..] {
                g = g.max(distance(gi, gj));
            }
        }
    }
    Ok(g)
}

pub fn spectral_norm_symmetric(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::agent_stream;

    #[test]
    fn logistic_origin_values() {
        let p = LogisticNNProblem::new(0.1).unwrap();
        assert!((p.loss(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-14);
        assert_eq!(p.gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
        let h = p.hessian(&[0.0, 0.0]);
        let expected = DMatrix::from_row_slice(2, 2, &[0.1, -0.5, -0.5, 0.1]);
        assert!((h - expected).amax() < 1e-8);
    }

    #[test]
    fn natural_sample_vanishes_at_origin() {
        let p = LogisticNNProblem::new(0.1).unwrap();
        let mut rng = agent_stream(3, 0);
        let mut out = [1.0; 2];
        for _ in 0..1000 {
            p.sample_gradient_into(&[0.0, 0.0], &mut rng, &mut out).unwrap();
            assert_eq!(out, [0.0, 0.0]);
        }
    }

    #[test]
    fn quadratic_has_no_data_law() {
        let q = QuadraticProblem::diagonal(&[1.0, -1.0]).unwrap();
        let mut rng = agent_stream(0, 0);
        let mut out = [0.0; 2];
        assert!(matches!(q.sample_gradient_into(&[0.0, 0.0], &mut rng, &mut out), Err(Error::Unsupported(_))));
        assert!(QuadraticProblem::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
    }

    #[test]
    fn smoothness_of_quadratic() {
        let q = QuadraticProblem::diagonal(&[1.0, -0.4]).unwrap();
        let region = BoxRegion::symmetric(2, 1.0).unwrap();
        let est = estimate_smoothness(&q, &region, 5000, 1).unwrap();
        assert!(est.delta_hat <= 1.0 + 1e-12 && est.delta_hat > 0.99, "{est:?}");
        assert_eq!(est.rho_hat, 0.0);
    }

    #[test]
    fn smoothness_rejects_degenerate_input() {
        let q = QuadraticProblem::diagonal(&[1.0, -0.4]).unwrap();
        let flat = BoxRegion { lower: vec![0.0, 0.0], upper: vec![1.0, 0.0] };
        assert!(estimate_smoothness(&q, &flat, 10, 0).is_err());
        let region = BoxRegion::symmetric(2, 1.0).unwrap();
        assert!(estimate_smoothness(&q, &region, 1, 0).is_err());
    }

    #[test]
    fn network_cost_weights_agents() {
        let a: Arc<dyn Problem> = Arc::new(QuadraticProblem::diagonal(&[1.0]).unwrap());
        let b: Arc<dyn Problem> = Arc::new(QuadraticProblem::diagonal(&[4.0]).unwrap());
        let cost = NetworkCost::new(vec![a, b], vec![0.75, 0.25]).unwrap();
        assert!((cost.loss(&[2.0]) - (0.75 * 2.0 + 0.25 * 8.0)).abs() < 1e-14);
        assert_eq!(cost.gradient(&[1.0]), vec![1.75]);
        assert_eq!(cost.hessian(&[0.0])[(0, 0)], 1.75);
    }
}
