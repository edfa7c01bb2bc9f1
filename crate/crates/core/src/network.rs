//! Graph topologies and combination matrices.
//!
//! **Convention:** `a[l][k]` is the weight agent `k` assigns to the iterate
//! received from neighbor `l`, and every *column* sums to one
//! (`Σ_l a[l][k] = 1`). The combine step is therefore `w_k = Σ_l a[l][k] φ_l`,
//! i.e. `W_new = Aᵀ Φ` with agents stacked as rows. Row-stochastic
//! conventions found elsewhere correspond to the transpose of these matrices.
//!
//! The Perron vector `p` (`A p = p`, `Σ p = 1`, `p > 0`) weights the network
//! centroid and the aggregate cost.

use std::collections::{BTreeSet, VecDeque};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const PERRON_TOL: f64 = 1e-12;
pub const PERRON_MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
    self_loops: Vec<bool>,
}

impl Topology {
    /// Undirected edges as `(a, b)` pairs. Self-pairs are rejected; use
    /// `self_loops` for `k ∈ N_k`.
    pub fn new(n_agents: usize, edges: &[(usize, usize)], self_loops: Vec<bool>) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Topology("at least one agent is required".into()));
        }
        if self_loops.len() != n_agents {
            return Err(Error::Dimension { expected: n_agents, found: self_loops.len() });
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n_agents || b >= n_agents {
                return Err(Error::Topology(format!("edge ({a}, {b}) references an agent outside 0..{n_agents}")));
            }
            if a == b {
                return Err(Error::Topology(format!("edge ({a}, {a}) is a self-loop; set self_loops[{a}] instead")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Topology(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self { n_agents, edges: set, self_loops })
    }

    pub fn complete(n_agents: usize, self_loops: bool) -> Result<Self> {
        let edges: Vec<_> = (0..n_agents).flat_map(|a| (a + 1..n_agents).map(move |b| (a, b))).collect();
        Self::new(n_agents, &edges, vec![self_loops; n_agents])
    }

    pub fn ring(n_agents: usize, self_loops: bool) -> Result<Self> {
        let edges: Vec<_> = match n_agents {
            0 | 1 => vec![],
            2 => vec![(0, 1)],
            n => (0..n).map(|a| (a, (a + 1) % n)).collect(),
        };
        Self::new(n_agents, &edges, vec![self_loops; n_agents])
    }

    pub fn line(n_agents: usize, self_loops: bool) -> Result<Self> {
        let edges: Vec<_> = (1..n_agents).map(|a| (a - 1, a)).collect();
        Self::new(n_agents, &edges, vec![self_loops; n_agents])
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn self_loops(&self) -> &[bool] {
        &self.self_loops
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        if a == b {
            return self.self_loops[a];
        }
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// `N_k`, in increasing order.
    pub fn neighborhood(&self, k: usize) -> Vec<usize> {
        (0..self.n_agents).filter(|&l| self.has_edge(l, k)).collect()
    }

    /// Number of neighbors excluding `k` itself.
    pub fn degree(&self, k: usize) -> usize {
        (0..self.n_agents).filter(|&l| l != k && self.has_edge(l, k)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    /// `a[l][k] = 1/|N_k|` for every `l ∈ N_k`.
    Averaging,
    /// `a[l][k] = 1/(1 + max(d_l, d_k))` off the diagonal, remainder on the
    /// diagonal. Symmetric and doubly stochastic; requires self-loops.
    Metropolis,
    /// Row-major entries, `entries[l][k] = a[l][k]`.
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct CombinationMatrix {
    entries: DMatrix<f64>,
    columns: Vec<Vec<(usize, f64)>>,
    shared_column: bool,
    perron: OnceLock<DVector<f64>>,
}

impl PartialEq for CombinationMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

pub fn build_combination_matrix(topology: &Topology, rule: &CombinationRule) -> Result<CombinationMatrix> {
    let n = topology.n_agents();
    let mut a = DMatrix::<f64>::zeros(n, n);
    match rule {
        CombinationRule::Averaging => {
            for k in 0..n {
                let hood = topology.neighborhood(k);
                if hood.is_empty() {
                    return Err(Error::Topology(format!("agent {k} has an empty neighborhood")));
                }
                let w = 1.0 / hood.len() as f64;
                for l in hood {
                    a[(l, k)] = w;
                }
            }
        }
        CombinationRule::Metropolis => {
            for k in 0..n {
                let mut off = 0.0;
                for l in 0..n {
                    if l != k && topology.has_edge(l, k) {
                        let w = 1.0 / (1 + topology.degree(l).max(topology.degree(k))) as f64;
                        a[(l, k)] = w;
                        off += w;
                    }
                }
                a[(k, k)] = 1.0 - off;
            }
        }
        CombinationRule::Explicit(rows) => {
            if rows.len() != n {
                return Err(Error::Dimension { expected: n, found: rows.len() });
            }
            for (l, row) in rows.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::Dimension { expected: n, found: row.len() });
                }
                for (k, &v) in row.iter().enumerate() {
                    a[(l, k)] = v;
                }
            }
        }
    }
    for k in 0..n {
        for l in 0..n {
            let v = a[(l, k)];
            if v != 0.0 && !topology.has_edge(l, k) {
                return Err(Error::Sparsity { from: l, to: k, value: v });
            }
        }
    }
    CombinationMatrix::from_entries(a)
}

impl CombinationMatrix {
    /// Validate a raw matrix: nonnegative, finite, columns summing to one.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 {
            return Err(Error::Topology("empty combination matrix".into()));
        }
        if entries.ncols() != n {
            return Err(Error::Dimension { expected: n, found: entries.ncols() });
        }
        for k in 0..n {
            let col = entries.column(k);
            let sum: f64 = col.iter().sum();
            if col.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() >= STOCHASTIC_TOL {
                return Err(Error::NotStochastic { column: k, sum });
            }
        }
        let columns = (0..n)
            .map(|k| (0..n).filter(|&l| entries[(l, k)] != 0.0).map(|l| (l, entries[(l, k)])).collect())
            .collect::<Vec<Vec<(usize, f64)>>>();
        let shared_column = columns.iter().all(|c| *c == columns[0]);
        Ok(Self { entries, columns, shared_column, perron: OnceLock::new() })
    }

    pub fn n_agents(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Nonzero `(l, a[l][k])` pairs of column `k`.
    pub fn column(&self, k: usize) -> &[(usize, f64)] {
        &self.columns[k]
    }

    /// Every column is identical, so every agent receives the same combination.
    pub fn has_shared_column(&self) -> bool {
        self.shared_column
    }

    /// Cached Perron vector; computed on first use.
    pub fn perron(&self) -> Result<&DVector<f64>> {
        if let Some(p) = self.perron.get() {
            return Ok(p);
        }
        let p = perron_vector(self)?;
        Ok(self.perron.get_or_init(|| p))
    }
}

/// The nonzero pattern is strongly connected and at least
/// one agent keeps a positive self-weight.
pub fn is_strongly_connected(a: &CombinationMatrix) -> bool {
    let n = a.n_agents();
    let m = a.entries();
    if !(0..n).any(|k| m[(k, k)] > 0.0) {
        return false;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let w = if forward { m[(u, v)] } else { m[(v, u)] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

pub fn perron_vector(a: &CombinationMatrix) -> Result<DVector<f64>> {
    perron_vector_with(a, PERRON_TOL, PERRON_MAX_ITERATIONS)
}

/// Power iteration `p ← A p` from the uniform vector until `‖Ap − p‖∞ < tol`.
pub fn perron_vector_with(a: &CombinationMatrix, tol: f64, max_iterations: usize) -> Result<DVector<f64>> {
    let n = a.n_agents();
    if !is_strongly_connected(a) {
        return Err(Error::Topology("Perron vector requires a strongly connected matrix with a self-loop".into()));
    }
    let m = a.entries();
    let mut p = DVector::from_element(n, 1.0 / n as f64);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let mut next = m * &p;
        let s = next.sum();
        next /= s;
        residual = (m * &next - &next).amax();
        p = next;
        if residual < tol {
            p = refine_perron(m, p);
            if p.iter().any(|&v| v <= 0.0) {
                return Err(Error::Numerical("Perron vector has a nonpositive entry".into()));
            }
            return Ok(p);
        }
    }
    Err(Error::NoConvergence { iterations: max_iterations, residual })
}

/// Solve `(A − I) p = 0` with the last equation replaced by `Σ p = 1`; keep
/// the power-iteration estimate if the solve is worse.
fn refine_perron(m: &DMatrix<f64>, p: DVector<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut sys = m - DMatrix::identity(n, n);
    sys.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let residual = |q: &DVector<f64>| (m * q - q).amax();
    match sys.lu().solve(&rhs) {
        Some(q) if q.iter().all(|v| v.is_finite()) && residual(&q) <= residual(&p) => q,
        _ => p,
    }
}

/// Modulus of the second-largest-magnitude eigenvalue (0 for a single agent).
pub fn mixing_rate(a: &CombinationMatrix) -> f64 {
    let n = a.n_agents();
    if n == 1 {
        return 0.0;
    }
    let Some(schur) = a.entries().clone().try_schur(f64::EPSILON, SCHUR_MAX_ITERATIONS) else {
        return deflated_spectral_radius(a);
    };
    let mut vals: Vec<_> = schur.complex_eigenvalues().iter().copied().collect();
    let unit = vals
        .iter()
        .enumerate()
        .min_by(|x, y| {
            let dx = (x.1 - nalgebra::Complex::new(1.0, 0.0)).norm();
            let dy = (y.1 - nalgebra::Complex::new(1.0, 0.0)).norm();
            dx.total_cmp(&dy)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    vals.swap_remove(unit);
    vals.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

const SCHUR_MAX_ITERATIONS: usize = 10_000;

/// Spectral radius of `A − p 1ᵀ` from `‖B^k‖^{1/k}` with `k = 2^40`,
/// for matrices the Schur iteration does not settle on.
fn deflated_spectral_radius(a: &CombinationMatrix) -> f64 {
    let Ok(p) = a.perron() else { return 1.0 };
    let n = a.n_agents();
    let mut b = a.entries() - p * DVector::from_element(n, 1.0).transpose();
    let mut log_scale = 0.0_f64;
    let mut k = 1.0_f64;
    for _ in 0..40 {
        let norm = b.norm();
        if norm == 0.0 {
            return 0.0;
        }
        b /= norm;
        log_scale += norm.ln() / k;
        b = &b * &b;
        k *= 2.0;
    }
    (log_scale + b.norm().ln() / k).exp()
}
