//! Stochastic-gradient noise models and Monte Carlo probes of their moment
//! and covariance conditions.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{spectral_norm_symmetric, Problem};
use crate::rng::{agent_stream, derive_seed, StreamRng};
use crate::spectral::{hessian_split, lambda_min};

pub const UNIT_NORM_TOL: f64 = 1e-12;
pub const MIN_COVARIANCE_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    /// `∇Q(w; x)` with a fresh data sample, from the problem's data law.
    NaturalSampling,
    /// `v · direction` with `v ~ N(0, std²)`.
    Directional { direction: Vec<f64>, std: f64 },
    /// `N(0, std² I)`.
    Isotropic { std: f64 },
    /// Sum of independent components.
    Composite { components: Vec<NoiseKind> },
}

/// Moment and smoothness constants asserted for a noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredMoments {
    pub sigma2: f64,
    pub sigma4: f64,
    pub sigma_l2: f64,
    pub sigma_u2: f64,
    pub beta_r: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl Default for DeclaredMoments {
    fn default() -> Self {
        Self { sigma2: 0.0, sigma4: 0.0, sigma_l2: 0.0, sigma_u2: 0.0, beta_r: 0.0, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Additive {
    Directional { direction: Vec<f64>, std: f64 },
    Isotropic { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    kind: NoiseKind,
    declared: DeclaredMoments,
    natural: bool,
    additive: Vec<Additive>,
}

fn flatten(kind: &NoiseKind, natural: &mut usize, additive: &mut Vec<Additive>) -> Result<()> {
    match kind {
        NoiseKind::NaturalSampling => *natural += 1,
        NoiseKind::Directional { direction, std } => {
            let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!("noise direction must be unit-norm, got norm {norm}")));
            }
            if !(std.is_finite() && *std >= 0.0) {
                return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {std}")));
            }
            additive.push(Additive::Directional { direction: direction.clone(), std: *std });
        }
        NoiseKind::Isotropic { std } => {
            if !(std.is_finite() && *std >= 0.0) {
                return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {std}")));
            }
            additive.push(Additive::Isotropic { std: *std });
        }
        NoiseKind::Composite { components } => {
            for c in components {
                flatten(c, natural, additive)?;
            }
        }
    }
    Ok(())
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, declared: DeclaredMoments) -> Result<Self> {
        let mut natural = 0;
        let mut additive = Vec::new();
        flatten(&kind, &mut natural, &mut additive)?;
        if natural > 1 {
            return Err(Error::InvalidArgument("at most one natural_sampling component is allowed".into()));
        }
        if declared.sigma_u2 > declared.sigma2 {
            return Err(Error::InvalidArgument(format!(
                "declared sigma_u2 = {} exceeds sigma2 = {}",
                declared.sigma_u2, declared.sigma2
            )));
        }
        if !(declared.gamma > 0.0 && declared.gamma <= 4.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance Hölder exponent gamma must lie in (0, 4], got {}",
                declared.gamma
            )));
        }
        Ok(Self { kind, declared, natural: natural == 1, additive })
    }

    /// Noise-free model: the stochastic gradient equals the exact gradient.
    pub fn zero() -> Self {
        Self::new(NoiseKind::Composite { components: vec![] }, DeclaredMoments::default())
            .expect("empty composite is valid")
    }

    pub fn isotropic(std: f64) -> Result<Self> {
        Self::new(NoiseKind::Isotropic { std }, DeclaredMoments::default())
    }

    pub fn directional(direction: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(NoiseKind::Directional { direction, std }, DeclaredMoments::default())
    }

    pub fn natural() -> Self {
        Self::new(NoiseKind::NaturalSampling, DeclaredMoments::default()).expect("valid")
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn declared(&self) -> &DeclaredMoments {
        &self.declared
    }

    pub fn with_declared(mut self, declared: DeclaredMoments) -> Result<Self> {
        let rebuilt = Self::new(self.kind.clone(), declared)?;
        self.declared = rebuilt.declared;
        Ok(self)
    }

    pub fn uses_natural_sampling(&self) -> bool {
        self.natural
    }

    /// Whether every draw is identically zero noise.
    pub fn is_noiseless(&self) -> bool {
        !self.natural
            && self.additive.iter().all(|a| match a {
                Additive::Directional { std, .. } | Additive::Isotropic { std } => *std == 0.0,
            })
    }

    /// Check that the model can be used with `problem`.
    pub fn check_compatible(&self, problem: &dyn Problem) -> Result<()> {
        if self.natural && !problem.supports_sampling() {
            return Err(Error::Unsupported(format!(
                "natural_sampling noise needs a problem with a data law; {problem:?} has none"
            )));
        }
        for a in &self.additive {
            if let Additive::Directional { direction, .. } = a {
                if direction.len() != problem.dimension() {
                    return Err(Error::Dimension { expected: problem.dimension(), found: direction.len() });
                }
            }
        }
        Ok(())
    }

    /// Stochastic gradient `∇̂J(w)` written to `out`.
    ///
    /// Draw order: the data sample (if natural sampling is enabled), then each
    /// additive component in declaration order.
    pub fn stochastic_gradient_into(
        &self,
        problem: &dyn Problem,
        w: &[f64],
        rng: &mut StreamRng,
        out: &mut [f64],
    ) -> Result<()> {
        if self.natural {
            problem.sample_gradient_into(w, rng, out)?;
        } else {
            problem.gradient_into(w, out);
        }
        self.add_injected(rng, out);
        Ok(())
    }

    fn add_injected(&self, rng: &mut StreamRng, out: &mut [f64]) {
        for a in &self.additive {
            match a {
                Additive::Directional { direction, std } => {
                    let v: f64 = rng.sample::<f64, _>(StandardNormal) * std;
                    for (o, d) in out.iter_mut().zip(direction) {
                        *o += v * d;
                    }
                }
                Additive::Isotropic { std } => {
                    for o in out.iter_mut() {
                        *o += std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
    }

    /// One noise draw `s = ∇̂J(w) − ∇J(w)`.
    pub fn sample_noise_into(
        &self,
        problem: &dyn Problem,
        w: &[f64],
        rng: &mut StreamRng,
        out: &mut [f64],
    ) -> Result<()> {
        if self.natural {
            self.stochastic_gradient_into(problem, w, rng, out)?;
            let g = problem.gradient(w);
            for (o, gi) in out.iter_mut().zip(g) {
                *o -= gi;
            }
        } else {
            out.iter_mut().for_each(|o| *o = 0.0);
            self.add_injected(rng, out);
        }
        Ok(())
    }
}

pub fn stochastic_gradient(
    problem: &dyn Problem,
    model: &NoiseModel,
    w: &[f64],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; problem.dimension()];
    model.stochastic_gradient_into(problem, w, rng, &mut out)?;
    Ok(out)
}

/// Known-mean covariance estimate `(1/n) Σ s sᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: DMatrix<f64>,
    pub n_samples: usize,
    /// Largest standard error among the matrix entries.
    pub standard_error: f64,
}

pub fn estimate_covariance(
    problem: &dyn Problem,
    model: &NoiseModel,
    w: &[f64],
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<CovarianceEstimate> {
    if n_samples < MIN_COVARIANCE_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "covariance estimation needs at least {MIN_COVARIANCE_SAMPLES} samples, got {n_samples}"
        )));
    }
    model.check_compatible(problem)?;
    let m = problem.dimension();
    let mut sum = DMatrix::<f64>::zeros(m, m);
    let mut sum_sq = DMatrix::<f64>::zeros(m, m);
    let mut s = vec![0.0; m];
    for _ in 0..n_samples {
        model.sample_noise_into(problem, w, rng, &mut s)?;
        for i in 0..m {
            for j in i..m {
                let v = s[i] * s[j];
                sum[(i, j)] += v;
                sum_sq[(i, j)] += v * v;
            }
        }
    }
    let n = n_samples as f64;
    let mut standard_error = 0.0_f64;
    for i in 0..m {
        for j in i..m {
            let mean = sum[(i, j)] / n;
            let var = (sum_sq[(i, j)] / n - mean * mean).max(0.0) * n / (n - 1.0);
            standard_error = standard_error.max((var / n).sqrt());
            sum[(i, j)] = mean;
            sum[(j, i)] = mean;
        }
    }
    Ok(CovarianceEstimate { matrix: sum, n_samples, standard_error })
}

/// `Σ_k p_k² R_k`: covariance of the centroid noise `Σ_k p_k s_k` when the
/// agents' noises are uncorrelated.
pub fn aggregate_covariance(per_agent: &[DMatrix<f64>], p: &[f64]) -> Result<DMatrix<f64>> {
    if per_agent.len() != p.len() {
        return Err(Error::Dimension { expected: p.len(), found: per_agent.len() });
    }
    let first = per_agent.first().ok_or_else(|| Error::InvalidArgument("no covariance matrices given".into()))?;
    let (r, c) = first.shape();
    let mut acc = DMatrix::zeros(r, c);
    for (m, pk) in per_agent.iter().zip(p) {
        if m.shape() != (r, c) {
            return Err(Error::Dimension { expected: r, found: m.nrows() });
        }
        acc += m * (pk * pk);
    }
    Ok(acc)
}

/// `p_max · β_R · ‖x − y‖^γ`: bound on how far the aggregate covariance can
/// move between two consensus points.
pub fn centroid_covariance_bound(p: &[f64], beta_r: f64, gamma: f64, distance: f64) -> f64 {
    let p_max = p.iter().copied().fold(0.0, f64::max);
    p_max * beta_r * distance.powf(gamma)
}

/// `λ_min(V<0ᵀ R̂(w) V<0)`: the noise variance available along the Hessian's
/// descent directions at `w`.
pub fn noise_floor_in_descent_subspace(
    problem: &dyn Problem,
    model: &NoiseModel,
    w: &[f64],
    tau: f64,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    let split = hessian_split(&problem.hessian(w))?;
    if split.v_neg.ncols() == 0 || split.lambda_min() > -tau {
        return Err(Error::NotStrictSaddle(format!("lambda_min = {} > -tau = {}", split.lambda_min(), -tau)));
    }
    let cov = estimate_covariance(problem, model, w, n_samples, rng)?;
    let projected = split.v_neg.transpose() * &cov.matrix * &split.v_neg;
    Ok(lambda_min(&projected))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceLipschitzProbe {
    pub beta_hat: f64,
    pub gamma: f64,
    pub pairs_used: usize,
}

/// Largest `‖R̂(x) − R̂(y)‖ / ‖x − y‖^γ` over the given pairs.
///
/// Both ends of a pair are estimated from the same random stream, so
/// state-independent noise yields identical estimates and a zero quotient.
pub fn probe_covariance_lipschitz(
    problem: &dyn Problem,
    model: &NoiseModel,
    pairs: &[(Vec<f64>, Vec<f64>)],
    n_samples: usize,
    seed: u64,
) -> Result<CovarianceLipschitzProbe> {
    let gamma = model.declared().gamma;
    let mut probe = CovarianceLipschitzProbe { beta_hat: 0.0, gamma, pairs_used: 0 };
    for (j, (x, y)) in pairs.iter().enumerate() {
        let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist < 1e-12 {
            continue;
        }
        let base = agent_stream(derive_seed(seed, j as u64), 0);
        let rx = estimate_covariance(problem, model, x, n_samples, &mut base.clone())?;
        let ry = estimate_covariance(problem, model, y, n_samples, &mut base.clone())?;
        let q = spectral_norm_symmetric(&(rx.matrix - ry.matrix)) / dist.powf(gamma);
        probe.beta_hat = probe.beta_hat.max(q);
        probe.pairs_used += 1;
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMoments {
    pub point: Vec<f64>,
    pub second: f64,
    pub fourth: f64,
    pub mean_norm: f64,
    /// `sqrt(tr R̂ / n)`, the scale of `‖mean‖` under zero conditional mean.
    pub mean_standard_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentProbe {
    pub sigma2_hat: f64,
    pub sigma4_hat: f64,
    pub max_conditional_mean_norm: f64,
    pub per_probe: Vec<ProbeMoments>,
}

pub fn probe_moment_bounds(
    problem: &dyn Problem,
    model: &NoiseModel,
    probes: &[Vec<f64>],
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<MomentProbe> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probe points given".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    model.check_compatible(problem)?;
    let m = problem.dimension();
    let n = n_samples as f64;
    let mut s = vec![0.0; m];
    let mut per_probe = Vec::with_capacity(probes.len());
    for w in probes {
        let mut mean = vec![0.0; m];
        let (mut second, mut fourth) = (0.0, 0.0);
        for _ in 0..n_samples {
            model.sample_noise_into(problem, w, rng, &mut s)?;
            let sq: f64 = s.iter().map(|x| x * x).sum();
            second += sq;
            fourth += sq * sq;
            mean.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
        let mean_norm = mean.iter().map(|x| (x / n) * (x / n)).sum::<f64>().sqrt();
        per_probe.push(ProbeMoments {
            point: w.clone(),
            second: second / n,
            fourth: fourth / n,
            mean_norm,
            mean_standard_error: (second / n / n).sqrt(),
        });
    }
    let fold = |f: fn(&ProbeMoments) -> f64| per_probe.iter().map(f).fold(0.0, f64::max);
    Ok(MomentProbe {
        sigma2_hat: fold(|p| p.second),
        sigma4_hat: fold(|p| p.fourth),
        max_conditional_mean_norm: fold(|p| p.mean_norm),
        per_probe,
    })
}

/// Estimated per-agent covariances at a common point, one stream per agent.
pub fn per_agent_covariances(
    problems: &[Arc<dyn Problem>],
    model: &NoiseModel,
    w: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    problems
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut rng = agent_stream(seed, k);
            estimate_covariance(p.as_ref(), model, w, n_samples, &mut rng).map(|c| c.matrix)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{LogisticNNProblem, QuadraticProblem};

    fn unit11() -> Vec<f64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        vec![r, r]
    }

    #[test]
    fn direction_must_be_unit() {
        assert!(NoiseModel::directional(vec![1.0, 1.0], 1.0).is_err());
        assert!(NoiseModel::directional(unit11(), 1.0).is_ok());
    }

    #[test]
    fn declared_sigma_u2_bounded_by_sigma2() {
        let d = DeclaredMoments { sigma2: 1.0, sigma_u2: 2.0, ..Default::default() };
        assert!(NoiseModel::new(NoiseKind::Isotropic { std: 1.0 }, d).is_err());
        let d = DeclaredMoments { gamma: 5.0, ..Default::default() };
        assert!(NoiseModel::new(NoiseKind::Isotropic { std: 1.0 }, d).is_err());
    }

    #[test]
    fn only_one_natural_component() {
        let kind = NoiseKind::Composite { components: vec![NoiseKind::NaturalSampling, NoiseKind::NaturalSampling] };
        assert!(NoiseModel::new(kind, DeclaredMoments::default()).is_err());
    }

    #[test]
    fn directional_draws_have_equal_components_at_origin() {
        let p = LogisticNNProblem::new(0.1).unwrap();
        let model = NoiseModel::directional(unit11(), 1.0).unwrap();
        let mut rng = agent_stream(1, 0);
        for _ in 0..100 {
            let g = stochastic_gradient(&p, &model, &[0.0, 0.0], &mut rng).unwrap();
            assert_eq!(g[0], g[1]);
        }
    }

    #[test]
    fn isotropic_zero_std_has_zero_covariance() {
        let q = QuadraticProblem::diagonal(&[1.0, -1.0]).unwrap();
        let model = NoiseModel::isotropic(0.0).unwrap();
        let mut rng = agent_stream(1, 0);
        let c = estimate_covariance(&q, &model, &[0.3, 0.2], 100, &mut rng).unwrap();
        assert_eq!(c.matrix, DMatrix::zeros(2, 2));
        assert!(estimate_covariance(&q, &model, &[0.3, 0.2], 99, &mut rng).is_err());
    }

    #[test]
    fn natural_noise_at_logistic_origin_is_zero() {
        let p = LogisticNNProblem::new(0.1).unwrap();
        let mut rng = agent_stream(1, 0);
        let c = estimate_covariance(&p, &NoiseModel::natural(), &[0.0, 0.0], 1000, &mut rng).unwrap();
        assert_eq!(c.matrix, DMatrix::zeros(2, 2));
        let floor =
            noise_floor_in_descent_subspace(&p, &NoiseModel::natural(), &[0.0, 0.0], 0.1, 500, &mut rng).unwrap();
        assert_eq!(floor, 0.0);
    }

    #[test]
    fn aggregate_covariance_arithmetic() {
        let i = DMatrix::<f64>::identity(2, 2);
        let z = DMatrix::<f64>::zeros(2, 2);
        let r = aggregate_covariance(&[i.clone(), i.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(r, &i * 0.5);
        assert_eq!(aggregate_covariance(std::slice::from_ref(&i), &[1.0]).unwrap(), i);
        let r = aggregate_covariance(&[i.clone(), z], &[2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert!((r - &i * (4.0 / 9.0)).amax() < 1e-15);
        assert!(aggregate_covariance(std::slice::from_ref(&i), &[0.5, 0.5]).is_err());
        assert!(aggregate_covariance(&[i, DMatrix::identity(3, 3)], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn floor_requires_negative_curvature() {
        let q = QuadraticProblem::diagonal(&[1.0, 2.0]).unwrap();
        let model = NoiseModel::isotropic(1.0).unwrap();
        let mut rng = agent_stream(1, 0);
        assert!(matches!(
            noise_floor_in_descent_subspace(&q, &model, &[0.0, 0.0], 0.1, 200, &mut rng),
            Err(Error::NotStrictSaddle(_))
        ));
    }

    #[test]
    fn state_independent_noise_has_zero_covariance_lipschitz() {
        let p = LogisticNNProblem::new(0.1).unwrap();
        let pairs = vec![(vec![0.1, 0.2], vec![-0.5, 0.7]), (vec![0.3, 0.3], vec![0.3, 0.3])];
        for model in [NoiseModel::isotropic(1.0).unwrap(), NoiseModel::directional(unit11(), 2.0).unwrap()] {
            let probe = probe_covariance_lipschitz(&p, &model, &pairs, 500, 4).unwrap();
            assert_eq!(probe.beta_hat, 0.0);
            assert_eq!(probe.pairs_used, 1);
            assert_eq!(probe.gamma, 1.0);
        }
    }

    #[test]
    fn zero_noise_moments_are_zero() {
        let p = LogisticNNProblem::new(0.1).unwrap();
        let mut rng = agent_stream(1, 0);
        let probe =
            probe_moment_bounds(&p, &NoiseModel::zero(), &[vec![0.4, -0.2], vec![1.0, 1.0]], 100, &mut rng).unwrap();
        assert_eq!((probe.sigma2_hat, probe.sigma4_hat, probe.max_conditional_mean_norm), (0.0, 0.0, 0.0));
        assert!(probe_moment_bounds(&p, &NoiseModel::zero(), &[], 10, &mut rng).is_err());
    }

    #[test]
    fn quadratic_rejects_natural_sampling() {
        let q = QuadraticProblem::diagonal(&[1.0]).unwrap();
        assert!(NoiseModel::natural().check_compatible(&q).is_err());
    }
}
