//! Set classification, escape/descent bounds and the Monte Carlo drivers
//! that measure their empirical counterparts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{coupled_short_term_run, disagreement_moments, NetworkState, RunConfig, Scenario, Stepper};
use crate::error::{Error, Result};
use crate::problems::{BoxRegion, Problem};
use crate::rng::{auxiliary_stream, derive_seed};
use crate::spectral::lambda_min;

pub use crate::spectral::{hessian_split, HessianSplit};

/// Eigenvalues within this distance of zero count as nonnegative, and the
/// curvature test `λ_min ≤ −τ` is applied with the same slack.
pub const LAMBDA_ZERO_TOL: f64 = 1e-10;

/// Relative distance to an integer below which a bound is rounded instead of ceiled.
const CEIL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub mu: f64,
    pub delta: f64,
    pub sigma2: f64,
    pub pi_confidence: f64,
    pub tau: f64,
    pub sigma_u2: f64,
    pub sigma_l2: f64,
}

impl Constants {
    pub fn new(
        mu: f64,
        delta: f64,
        sigma2: f64,
        pi_confidence: f64,
        tau: f64,
        sigma_u2: f64,
        sigma_l2: f64,
    ) -> Result<Self> {
        let c = Self { mu, delta, sigma2, pi_confidence, tau, sigma_u2, sigma_l2 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu, self.delta, self.sigma2, self.pi_confidence, self.tau, self.sigma_u2, self.sigma_l2];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("constants must be finite".into()));
        }
        if self.mu <= 0.0 || self.delta <= 0.0 || self.sigma2 < 0.0 || self.sigma_u2 < 0.0 || self.sigma_l2 < 0.0 {
            return Err(Error::Config("mu and delta must be positive, noise moments nonnegative".into()));
        }
        if self.c1() <= 0.0 {
            return Err(Error::Config(format!(
                "c1 = (1 - 2 mu delta)/2 must be positive: need mu < 1/(2 delta) = {}, got mu = {}",
                1.0 / (2.0 * self.delta),
                self.mu
            )));
        }
        if !(self.pi_confidence > 0.0 && self.pi_confidence < 1.0) {
            return Err(Error::Config(format!("pi_confidence must lie in (0, 1), got {}", self.pi_confidence)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        0.5 * (1.0 - 2.0 * self.mu * self.delta)
    }

    pub fn c2(&self) -> f64 {
        self.delta * self.sigma2 / 2.0
    }

    /// `μ (c₂/c₁)(1 + 1/π)`
    pub fn gradient_threshold(&self) -> f64 {
        self.mu * (self.c2() / self.c1()) * (1.0 + 1.0 / self.pi_confidence)
    }

    /// Same constants at another step size.
    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        Self::new(mu, self.delta, self.sigma2, self.pi_confidence, self.tau, self.sigma_u2, self.sigma_l2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetKind {
    /// Large gradient.
    G,
    /// Strict saddle: small gradient, curvature at most `−τ`.
    H,
    /// Small gradient, no strong negative curvature.
    M,
}

impl SetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SetKind::G => "G",
            SetKind::H => "H",
            SetKind::M => "M",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetLabel {
    pub kind: SetKind,
    pub grad_norm2: f64,
    pub lambda_min: f64,
}

pub fn classify(w: &[f64], problem: &dyn Problem, constants: &Constants) -> SetLabel {
    let g = problem.gradient(w);
    let grad_norm2: f64 = g.iter().map(|x| x * x).sum();
    let lmin = lambda_min(&problem.hessian(w));
    let lmin = if lmin.abs() <= LAMBDA_ZERO_TOL { 0.0 } else { lmin };
    let kind = if grad_norm2 >= constants.gradient_threshold() {
        SetKind::G
    } else if lmin <= -constants.tau + LAMBDA_ZERO_TOL {
        SetKind::H
    } else {
        SetKind::M
    };
    SetLabel { kind, grad_norm2, lambda_min: lmin }
}

fn tolerant_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= CEIL_TOL * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `i^s = ⌈ln(2M σ_u²/σ_ℓ² + 1) / ln(1 + 2μτ)⌉`, never below 1.
pub fn escape_time_bound(m_dim: usize, sigma_u2: f64, sigma_l2: f64, mu: f64, tau: f64) -> Result<u64> {
    if !(sigma_l2 > 0.0) {
        return Err(Error::NotStrictSaddle(format!(
            "sigma_l2 = {sigma_l2}: no noise in the descent subspace, the escape time is unbounded"
        )));
    }
    if !(mu > 0.0 && tau > 0.0 && sigma_u2 >= 0.0 && m_dim >= 1) {
        return Err(Error::InvalidArgument("escape_time_bound needs mu, tau > 0, sigma_u2 >= 0, M >= 1".into()));
    }
    let x = (2.0 * m_dim as f64 * sigma_u2 / sigma_l2 + 1.0).ln() / (2.0 * mu * tau).ln_1p();
    if !x.is_finite() {
        return Err(Error::Numerical(format!("escape time bound is not finite ({x})")));
    }
    Ok((tolerant_ceil(x) as u64).max(1))
}

/// `i^o = ⌈(J₀ − J_floor)/(μ² c₂ π) · i^s⌉`
pub fn second_order_iteration_bound(
    j0: f64,
    j_floor: f64,
    mu: f64,
    c2: f64,
    pi_confidence: f64,
    i_s: u64,
) -> Result<u64> {
    if j_floor > j0 {
        return Err(Error::InvalidArgument(format!("loss floor {j_floor} exceeds the initial loss {j0}")));
    }
    if !(mu > 0.0 && c2 > 0.0 && pi_confidence > 0.0) {
        return Err(Error::InvalidArgument("second_order_iteration_bound needs mu, c2, pi > 0".into()));
    }
    let x = (j0 - j_floor) / (mu * mu * c2 * pi_confidence) * i_s as f64;
    if !x.is_finite() || x > u64::MAX as f64 {
        return Err(Error::Numerical(format!("iteration bound overflows ({x})")));
    }
    Ok(tolerant_ceil(x) as u64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("slope fit needs at least two paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Numerical("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("slope fit needs distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

/// Linear-interpolation quantile; `None` when it lands on a censored (infinite) value.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let v = sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64);
    let v = if lo == hi { sorted[lo] } else { v };
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExitCriterion {
    /// `‖w_c,i − center‖ > radius`; the center defaults to the anchor centroid.
    BallRadius {
        radius: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// `J(anchor) − J(w_c,i) ≥ delta`.
    LossDrop { delta: f64 },
    /// `J(anchor) − J(w_c,i) ≥ factor · μ`, which keeps the exit event
    /// comparable across step sizes.
    ScaledLossDrop { factor: f64 },
}

impl Default for ExitCriterion {
    fn default() -> Self {
        ExitCriterion::BallRadius { radius: 0.1, center: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeOptions {
    pub mu: f64,
    pub criterion: ExitCriterion,
    pub horizon: usize,
    /// Keep iterating after escape and report the final centroid.
    pub run_to_horizon: bool,
    pub divergence_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeReplica {
    pub seed: u64,
    pub escape_iter: Option<usize>,
    pub final_centroid: Vec<f64>,
    pub diverged: Option<usize>,
}

impl EscapeReplica {
    pub fn censored(&self) -> bool {
        self.escape_iter.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EscapeStats {
    pub mu: f64,
    pub tau: f64,
    pub horizon: usize,
    pub replicas: Vec<EscapeReplica>,
    /// Censored replicas count as +∞; `None` when the quantile is censored.
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl EscapeStats {
    pub fn n_escaped(&self) -> usize {
        self.replicas.iter().filter(|r| !r.censored()).count()
    }

    pub fn n_censored(&self) -> usize {
        self.replicas.len() - self.n_escaped()
    }
}

fn escape_replica(scenario: &Scenario, init: &NetworkState, opts: &EscapeOptions, seed: u64) -> Result<EscapeReplica> {
    let cost = scenario.cost();
    let mut stepper = Stepper::new(scenario, opts.mu, seed, init.clone(), opts.divergence_cap)?;
    let anchor = stepper.centroid();
    let j_anchor = cost.loss(&anchor);
    let crossed = |c: &[f64]| match &opts.criterion {
        ExitCriterion::BallRadius { radius, center } => {
            let ctr = center.as_deref().unwrap_or(&anchor);
            c.iter().zip(ctr).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() > radius * radius
        }
        ExitCriterion::LossDrop { delta } => j_anchor - cost.loss(c) >= *delta,
        ExitCriterion::ScaledLossDrop { factor } => j_anchor - cost.loss(c) >= factor * opts.mu,
    };
    let mut escape_iter = None;
    let mut diverged = None;
    for i in 1..=opts.horizon {
        match stepper.step() {
            Ok(()) => {}
            Err(Error::Diverged { iteration, .. }) => {
                diverged = Some(iteration);
                break;
            }
            Err(e) => return Err(e),
        }
        if escape_iter.is_none() && crossed(&stepper.centroid()) {
            escape_iter = Some(i);
            if !opts.run_to_horizon {
                break;
            }
        }
    }
    Ok(EscapeReplica { seed, escape_iter, final_centroid: stepper.centroid(), diverged })
}

/// First-exit iterations from a start state in H, one replica per seed.
pub fn empirical_escape_time(
    scenario: &Scenario,
    init: &NetworkState,
    constants: &Constants,
    opts: &EscapeOptions,
    seeds: &[u64],
) -> Result<EscapeStats> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("escape experiment needs at least one seed".into()));
    }
    let p = scenario.perron();
    let anchor = crate::engine::centroid(init, p);
    let label = classify(&anchor, scenario.cost(), constants);
    if label.kind != SetKind::H {
        return Err(Error::NotStrictSaddle(format!(
            "start centroid {anchor:?} is in {} (grad_norm2 {:e}, lambda_min {}), not H",
            label.kind.as_str(),
            label.grad_norm2,
            label.lambda_min
        )));
    }
    let replicas = seeds.par_iter().map(|&s| escape_replica(scenario, init, opts, s)).collect::<Result<Vec<_>>>()?;
    let mut times: Vec<f64> = replicas.iter().map(|r| r.escape_iter.map_or(f64::INFINITY, |i| i as f64)).collect();
    times.sort_by(f64::total_cmp);
    Ok(EscapeStats {
        mu: opts.mu,
        tau: constants.tau,
        horizon: opts.horizon,
        median: quantile(&times, 0.5),
        q1: quantile(&times, 0.25),
        q3: quantile(&times, 0.75),
        replicas,
    })
}

/// Fraction of centroids in the positive quadrant.
pub fn basin_fraction(centroids: &[Vec<f64>]) -> f64 {
    if centroids.is_empty() {
        return f64::NAN;
    }
    let pos = centroids.iter().filter(|c| c.iter().all(|&x| x > 0.0)).count();
    pos as f64 / centroids.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DescentRegion {
    G,
    H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub region: DescentRegion,
    /// Iterations per replica: 1 in G, `i^s` in H.
    pub iterations: usize,
    pub mean: f64,
    pub standard_error: f64,
    pub deltas: Vec<f64>,
    pub start_points: Vec<Vec<f64>>,
    pub attempts: usize,
}

impl DescentResult {
    /// Lower end of the one-sided 95% interval.
    pub fn lower_confidence_95(&self) -> f64 {
        self.mean - 1.6448536269514722 * self.standard_error
    }
}

/// `J(w_c,0) − J(w_c,n)` over replicas started from consensus points drawn
/// uniformly in `sampler` and kept only when they fall in `region`.
#[allow(clippy::too_many_arguments)]
pub fn descent_experiment(
    region: DescentRegion,
    scenario: &Scenario,
    constants: &Constants,
    sampler: &BoxRegion,
    n_replicas: usize,
    seed: u64,
    max_attempts: usize,
    divergence_cap: f64,
) -> Result<DescentResult> {
    sampler.validate()?;
    if n_replicas == 0 {
        return Err(Error::InvalidArgument("descent experiment needs at least one replica".into()));
    }
    let cost = scenario.cost();
    let want = match region {
        DescentRegion::G => SetKind::G,
        DescentRegion::H => SetKind::H,
    };
    let mut rng = auxiliary_stream(seed);
    let mut starts = Vec::with_capacity(n_replicas);
    let mut attempts = 0;
    while starts.len() < n_replicas && attempts < max_attempts {
        attempts += 1;
        let w = sampler.sample(&mut rng);
        if classify(&w, cost, constants).kind == want {
            starts.push(w);
        }
    }
    if starts.len() < n_replicas {
        return Err(Error::InvalidArgument(format!(
            "found {} of {n_replicas} start points in {want:?} after {attempts} draws",
            starts.len()
        )));
    }
    let iterations = match region {
        DescentRegion::G => 1,
        DescentRegion::H => {
            escape_time_bound(cost.dimension(), constants.sigma_u2, constants.sigma_l2, constants.mu, constants.tau)?
                as usize
        }
    };
    let n_agents = scenario.n_agents();
    let deltas = starts
        .par_iter()
        .enumerate()
        .map(|(j, w)| {
            let init = NetworkState::consensus(n_agents, w);
            let mut st = Stepper::new(scenario, constants.mu, derive_seed(seed, j as u64), init, divergence_cap)?;
            for _ in 0..iterations {
                st.step()?;
            }
            Ok(cost.loss(w) - cost.loss(&st.centroid()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var =
        if deltas.len() > 1 { deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(DescentResult {
        region,
        iterations,
        mean,
        standard_error: (var / n).sqrt(),
        deltas,
        start_points: starts,
        attempts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationRow {
    pub mu: f64,
    pub horizon: usize,
    /// Maxima over the horizon of the replica means.
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub gap2: f64,
    pub model2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSlopes {
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub gap2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSweep {
    pub rows: Vec<DeviationRow>,
    /// `None` when a moment is identically zero and no slope exists.
    pub slopes: Option<DeviationSlopes>,
    pub warnings: Vec<String>,
}

/// For each μ, run the coupled true/model recursion for `⌊T/μ⌋` steps from
/// `init` (after `anchor_iteration` warm-up steps) and record horizon maxima
/// of the Monte Carlo moment means.
pub fn deviation_scaling_sweep(
    scenario: &Scenario,
    mu_list: &[f64],
    horizon_t: f64,
    init: &NetworkState,
    anchor_iteration: usize,
    seeds: &[u64],
) -> Result<DeviationSweep> {
    if mu_list.len() < 2 {
        return Err(Error::InvalidArgument("deviation sweep needs at least two step sizes".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("deviation sweep needs at least one seed".into()));
    }
    if !(horizon_t > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon T must be positive, got {horizon_t}")));
    }
    let mut rows = Vec::with_capacity(mu_list.len());
    let mut warnings = Vec::new();
    for &mu in mu_list {
        let horizon = (horizon_t / mu).floor() as usize;
        let traces = seeds
            .par_iter()
            .map(|&s| {
                let cfg = RunConfig::new(mu, 1, s);
                coupled_short_term_run(scenario, &cfg, init.clone(), anchor_iteration, horizon, horizon_t)
            })
            .collect::<Result<Vec<_>>>()?;
        warnings.extend(traces.iter().filter_map(|t| t.horizon_warning.clone()).take(1));
        let n = traces.len() as f64;
        let mut row = DeviationRow { mu, horizon, w2: 0.0, w3: 0.0, w4: 0.0, gap2: 0.0, model2: 0.0 };
        for i in 0..=horizon {
            let mean =
                |f: fn(&crate::engine::DeviationMoments) -> f64| traces.iter().map(|t| f(&t.steps[i])).sum::<f64>() / n;
            row.w2 = row.w2.max(mean(|m| m.w2));
            row.w3 = row.w3.max(mean(|m| m.w3));
            row.w4 = row.w4.max(mean(|m| m.w4));
            row.gap2 = row.gap2.max(mean(|m| m.gap2));
            row.model2 = row.model2.max(mean(|m| m.model2));
        }
        rows.push(row);
    }
    let mus: Vec<f64> = rows.iter().map(|r| r.mu).collect();
    let fit = |f: fn(&DeviationRow) -> f64| log_log_slope(&mus, &rows.iter().map(f).collect::<Vec<_>>());
    let slopes = match (fit(|r| r.w2), fit(|r| r.w3), fit(|r| r.w4), fit(|r| r.gap2)) {
        (Ok(w2), Ok(w3), Ok(w4), Ok(gap2)) => Some(DeviationSlopes { w2, w3, w4, gap2 }),
        _ => None,
    };
    Ok(DeviationSweep { rows, slopes, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringRow {
    pub mu: f64,
    pub n_iterations: usize,
    pub burn_in: usize,
    /// Time and replica averages after burn-in.
    pub disagreement2: f64,
    pub disagreement4: f64,
}

/// Steady-state disagreement moments per step size. Run lengths scale as
/// `horizon_t/μ` and `burn_in_t/μ`.
pub fn clustering_sweep(
    scenario: &Scenario,
    mu_list: &[f64],
    init: &NetworkState,
    burn_in_t: f64,
    horizon_t: f64,
    seeds: &[u64],
    divergence_cap: f64,
) -> Result<Vec<ClusteringRow>> {
    if mu_list.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("clustering sweep needs step sizes and seeds".into()));
    }
    if !(horizon_t > burn_in_t && burn_in_t >= 0.0) {
        return Err(Error::InvalidArgument("clustering sweep needs 0 <= burn-in < horizon".into()));
    }
    mu_list
        .iter()
        .map(|&mu| {
            let burn_in = (burn_in_t / mu).ceil() as usize;
            let n_iterations = (horizon_t / mu).ceil() as usize;
            let per_replica = seeds
                .par_iter()
                .map(|&s| {
                    let mut st = Stepper::new(scenario, mu, s, init.clone(), divergence_cap)?;
                    let (mut m2, mut m4) = (0.0, 0.0);
                    for i in 1..=n_iterations {
                        st.step()?;
                        if i > burn_in {
                            let d = disagreement_moments(st.state(), scenario.perron());
                            m2 += d.second;
                            m4 += d.fourth;
                        }
                    }
                    let k = (n_iterations - burn_in) as f64;
                    Ok((m2 / k, m4 / k))
                })
                .collect::<Result<Vec<_>>>()?;
            let r = per_replica.len() as f64;
            Ok(ClusteringRow {
                mu,
                n_iterations,
                burn_in,
                disagreement2: per_replica.iter().map(|x| x.0).sum::<f64>() / r,
                disagreement4: per_replica.iter().map(|x| x.1).sum::<f64>() / r,
            })
        })
        .collect()
}
