//! Monotone finite-difference approximation of the controlled generator
//!
//! ```text
//! L^u f(x) = a^{ij}(x) ∂_ij f(x) + b^i(x, u) ∂_i f(x)
//! ```
//!
//! Second derivatives use central differences (with the positive 7-point
//! stencil for cross terms), first derivatives are upwinded: forward
//! differences weighted by `b⁺`, backward by `b⁻`. At the edge of the box the
//! missing neighbor is dropped, which is the zero-flux (reflecting) closure.
//! Every row therefore has nonnegative off-diagonals summing to minus the
//! diagonal: the matrix generates a continuous-time Markov chain on the grid.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;
use crate::model::{ControlProblem, Field, GridSpec};

const NO_NEIGHBOR: usize = usize::MAX;

/// Sparse CTMC generator. Only off-diagonal weights are stored; the diagonal
/// is minus their sum so rows add up to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    off: CsrMatrix,
    diag: Vec<f64>,
    /// Per node and axis: `1` forward difference, `-1` backward, `0` no drift.
    upwind: Vec<i8>,
    dim: usize,
}

impl Generator {
    /// Generator with the given off-diagonal rates. Rejects negative or
    /// non-finite rates and self-loops.
    pub fn from_rates(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            for &(j, w) in row {
                if j == i || j >= n {
                    return Err(Error::InvalidInput(format!("bad column {j} in row {i}")));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::Monotonicity {
                        node: i,
                        term: format!("rate {w} to node {j}"),
                    });
                }
            }
        }
        let off = CsrMatrix::from_rows(rows);
        Ok(Self::with_diagonal(off, Vec::new(), 0))
    }

    fn with_diagonal(off: CsrMatrix, upwind: Vec<i8>, dim: usize) -> Self {
        let diag = (0..off.len())
            .map(|i| -off.row(i).fold(0.0, |s, (_, w)| s + w))
            .collect();
        Self {
            off,
            diag,
            upwind,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.diag[i]
    }

    /// Off-diagonal entries of row `i`.
    pub fn rates(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.off.row(i)
    }

    /// Entry `(i, j)` of the matrix.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag[i]
        } else {
            self.off.row(i).filter(|&(c, _)| c == j).map(|(_, w)| w).sum()
        }
    }

    /// Row sum accumulated in storage order, which is exactly zero.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.off.row(i).fold(0.0, |s, (_, w)| s + w) + self.diag[i]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.diag.iter().fold(0.0, |m, d| m.max(-d))
    }

    /// Upwind direction used on `axis` at `node` (`1`, `-1` or `0`).
    pub fn upwind_direction(&self, node: usize, axis: usize) -> i8 {
        self.upwind.get(node * self.dim + axis).copied().unwrap_or(0)
    }

    /// `out = G f`, evaluated as `Σ_j w_ij (f_j - f_i)` so that constants map
    /// to exactly zero.
    pub fn apply_slice(&self, f: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let fi = f[i];
            *o = self.off.row(i).fold(0.0, |s, (j, w)| s + w * (f[j] - fi));
        }
    }

    /// Full matrix (diagonal included) in CSR form.
    pub fn to_csr(&self) -> CsrMatrix {
        let rows = (0..self.len())
            .map(|i| {
                let mut row: Vec<(usize, f64)> = self.off.row(i).collect();
                row.push((i, self.diag[i]));
                row
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }
}

/// `G f` as a field on `f`'s grid.
pub fn apply_generator(g: &Generator, f: &Field) -> Result<Field> {
    if g.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: g.len(),
            found: f.len(),
        });
    }
    let mut out = vec![0.0; f.len()];
    g.apply_slice(f.values(), &mut out);
    Field::new(f.grid().clone(), out)
}

/// Generator of the discretized `L^u` for a single control value `u` (which
/// need not belong to the problem's control set).
pub fn build_generator(problem: &ControlProblem, grid: &GridSpec, u: &[f64]) -> Result<Generator> {
    let grid = Arc::new(grid.clone());
    let stencil = DiffusionStencil::new(problem, &grid)?;
    let d = grid.dim();
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; grid.len() * d];
    for node in 0..grid.len() {
        grid.point(node, &mut x);
        problem
            .dynamics()
            .drift(&x, u, &mut b[node * d..(node + 1) * d]);
    }
    if let Some(i) = b.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "drift",
            index: i / d,
        });
    }
    Ok(stencil.assemble(|node| &b[node * d..(node + 1) * d]))
}

/// Pointwise minimization of `L^u φ + r(·, u)` over the control set.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianResult {
    pub value: Field,
    /// Minimizing control index per node (smallest index on ties).
    pub argmin: Vec<usize>,
}

pub fn min_hamiltonian(problem: &ControlProblem, grid: &GridSpec, phi: &Field) -> Result<HamiltonianResult> {
    let scheme = Scheme::new(problem, Arc::new(grid.clone()))?;
    scheme.min_hamiltonian(phi)
}

/// Central-difference gradient (one-sided on the boundary), one field per
/// axis. For reporting only; the scheme never forms `∇φ` on its own.
pub fn gradient(phi: &Field) -> Vec<Field> {
    let grid = phi.grid();
    let v = phi.values();
    (0..grid.dim())
        .map(|k| {
            let h = grid.spacing(k);
            let values = (0..grid.len())
                .map(|node| match (grid.neighbor(node, k, true), grid.neighbor(node, k, false)) {
                    (Some(f), Some(b)) => (v[f] - v[b]) / (2.0 * h),
                    (Some(f), None) => (v[f] - v[node]) / h,
                    (None, Some(b)) => (v[node] - v[b]) / h,
                    (None, None) => 0.0,
                })
                .collect();
            Field::new(grid.clone(), values).expect("finite differences of a finite field")
        })
        .collect()
}

/// Control-independent part of the stencil: second-order weights plus the
/// axis neighbors used by the upwind drift terms.
struct DiffusionStencil {
    grid: Arc<GridSpec>,
    diff: CsrMatrix,
    // [node][axis][forward, backward]
    axis_nbrs: Vec<[usize; 2]>,
    inv_h: Vec<f64>,
}

impl DiffusionStencil {
    fn new(problem: &ControlProblem, grid: &Arc<GridSpec>) -> Result<Self> {
        if problem.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.dim(),
                found: grid.dim(),
            });
        }
        let d = grid.dim();
        let h = grid.spacings();
        let mut x = vec![0.0; d];
        let mut a = vec![0.0; d * d];
        let mut rows = Vec::with_capacity(grid.len());
        let mut axis_nbrs = Vec::with_capacity(grid.len() * d);
        for node in 0..grid.len() {
            grid.point(node, &mut x);
            problem.dynamics().diffusion(&x, &mut a);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "diffusion",
                    index: node,
                });
            }
            if !crate::model::is_positive_definite(&a, d) {
                return Err(Error::InvalidProblem(format!(
                    "diffusion matrix {a:?} at node {node} is not symmetric positive definite"
                )));
            }
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(8);
            let cross = if d == 2 { a[1].abs() / (h[0] * h[1]) } else { 0.0 };
            for k in 0..d {
                let w = a[k * d + k] / (h[k] * h[k]) - cross;
                if w < 0.0 {
                    return Err(Error::Monotonicity {
                        node,
                        term: format!(
                            "axis {k} second difference a{k}{k}/h² - |a12|/(h1 h2) = {w} < 0"
                        ),
                    });
                }
                let fwd = grid.neighbor(node, k, true);
                let bwd = grid.neighbor(node, k, false);
                for nb in [fwd, bwd].into_iter().flatten() {
                    if w > 0.0 {
                        row.push((nb, w));
                    }
                }
                axis_nbrs.push([fwd.unwrap_or(NO_NEIGHBOR), bwd.unwrap_or(NO_NEIGHBOR)]);
            }
            if d == 2 && a[1] != 0.0 {
                let s = if a[1] > 0.0 { 1 } else { -1 };
                for off in [[1, s], [-1, -s]] {
                    if let Some(nb) = grid.offset(node, &off) {
                        row.push((nb, cross));
                    }
                }
            }
            rows.push(row);
        }
        Ok(Self {
            grid: grid.clone(),
            diff: CsrMatrix::from_rows(rows),
            axis_nbrs,
            inv_h: h.iter().map(|v| 1.0 / v).collect(),
        })
    }

    fn assemble<'a>(&self, drift_at: impl Fn(usize) -> &'a [f64]) -> Generator {
        let d = self.grid.dim();
        let n = self.grid.len();
        let mut upwind = vec![0i8; n * d];
        let rows = (0..n)
            .map(|node| {
                let mut row: Vec<(usize, f64)> = self.diff.row(node).collect();
                let b = drift_at(node);
                for k in 0..d {
                    let [fwd, bwd] = self.axis_nbrs[node * d + k];
                    let (nb, w) = if b[k] > 0.0 {
                        upwind[node * d + k] = 1;
                        (fwd, b[k] * self.inv_h[k])
                    } else if b[k] < 0.0 {
                        upwind[node * d + k] = -1;
                        (bwd, -b[k] * self.inv_h[k])
                    } else {
                        continue;
                    };
                    if nb == NO_NEIGHBOR {
                        continue;
                    }
                    match row.iter_mut().find(|(c, _)| *c == nb) {
                        Some(entry) => entry.1 += w,
                        None => row.push((nb, w)),
                    }
                }
                row
            })
            .collect();
        Generator::with_diagonal(CsrMatrix::from_rows(rows), upwind, d)
    }
}

/// A problem discretized on a grid, with drift and cost tabulated per node
/// and control. This is what the solvers and time steppers work with.
pub struct Scheme {
    problem: ControlProblem,
    stencil: DiffusionStencil,
    n_controls: usize,
    // [node][control][axis]
    drift: Vec<f64>,
    // [node][control]
    cost: Vec<f64>,
    max_exit_rate: f64,
}

impl std::fmt::Debug for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheme")
            .field("problem", &self.problem)
            .field("nodes", &self.grid().len())
            .field("controls", &self.n_controls)
            .field("max_exit_rate", &self.max_exit_rate)
            .finish()
    }
}

impl Scheme {
    pub fn new(problem: &ControlProblem, grid: Arc<GridSpec>) -> Result<Self> {
        let stencil = DiffusionStencil::new(problem, &grid)?;
        let d = grid.dim();
        let nc = problem.controls().len();
        let mut drift = vec![0.0; grid.len() * nc * d];
        let mut cost = vec![0.0; grid.len() * nc];
        let mut x = vec![0.0; d];
        let mut max_exit_rate = 0.0f64;
        for node in 0..grid.len() {
            grid.point(node, &mut x);
            let diff_rate: f64 = stencil.diff.row(node).map(|(_, w)| w).sum();
            for (c, u) in problem.controls().iter().enumerate() {
                let slot = node * nc + c;
                let b = &mut drift[slot * d..(slot + 1) * d];
                problem.dynamics().drift(&x, u, b);
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "drift",
                        index: node,
                    });
                }
                let r = problem.cost(&x, u);
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::InvalidProblem(format!(
                        "running cost {r} at node {node}, control {c} is not finite and nonnegative"
                    )));
                }
                cost[slot] = r;
                let mut rate = diff_rate;
                for k in 0..d {
                    let [fwd, bwd] = stencil.axis_nbrs[node * d + k];
                    let nb = if b[k] > 0.0 { fwd } else { bwd };
                    if nb != NO_NEIGHBOR {
                        rate += b[k].abs() * stencil.inv_h[k];
                    }
                }
                max_exit_rate = max_exit_rate.max(rate);
            }
        }
        Ok(Self {
            problem: problem.clone(),
            stencil,
            n_controls: nc,
            drift,
            cost,
            max_exit_rate,
        })
    }

    pub fn problem(&self) -> &ControlProblem {
        &self.problem
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.stencil.grid
    }

    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    /// Largest `|diagonal|` over all nodes and controls.
    pub fn max_exit_rate(&self) -> f64 {
        self.max_exit_rate
    }

    /// Explicit Euler step satisfying `dt · max|diagonal| = safety`.
    pub fn stable_dt(&self, safety: f64) -> f64 {
        safety / self.max_exit_rate
    }

    pub fn cost(&self, node: usize, control: usize) -> f64 {
        self.cost[node * self.n_controls + control]
    }

    /// Running cost along a Markov policy.
    pub fn policy_cost(&self, policy: &[usize]) -> Vec<f64> {
        policy
            .iter()
            .enumerate()
            .map(|(node, &c)| self.cost(node, c))
            .collect()
    }

    pub fn generator(&self, control: usize) -> Generator {
        self.policy_generator(&vec![control; self.grid().len()])
    }

    /// Generator of the chain that uses control `policy[node]` at each node.
    pub fn policy_generator(&self, policy: &[usize]) -> Generator {
        let d = self.grid().dim();
        let nc = self.n_controls;
        self.stencil.assemble(|node| {
            let slot = node * nc + policy[node];
            &self.drift[slot * d..(slot + 1) * d]
        })
    }

    pub fn check_policy(&self, policy: &[usize]) -> Result<()> {
        if policy.len() != self.grid().len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid().len(),
                found: policy.len(),
            });
        }
        if let Some(node) = policy.iter().position(|&c| c >= self.n_controls) {
            return Err(Error::InvalidInput(format!(
                "policy control index {} at node {node} is out of range",
                policy[node]
            )));
        }
        Ok(())
    }

    /// Differences needed at one node: diffusion part and one-sided slopes.
    #[inline]
    fn local(&self, node: usize, phi: &[f64]) -> (f64, [f64; 2], [f64; 2]) {
        let d = self.grid().dim();
        let pi = phi[node];
        let diff = self
            .stencil
            .diff
            .row(node)
            .fold(0.0, |s, (j, w)| s + w * (phi[j] - pi));
        let mut fwd = [0.0; 2];
        let mut bwd = [0.0; 2];
        for k in 0..d {
            let [f, b] = self.stencil.axis_nbrs[node * d + k];
            if f != NO_NEIGHBOR {
                fwd[k] = (phi[f] - pi) * self.stencil.inv_h[k];
            }
            if b != NO_NEIGHBOR {
                bwd[k] = (pi - phi[b]) * self.stencil.inv_h[k];
            }
        }
        (diff, fwd, bwd)
    }

    #[inline]
    fn candidate(&self, node: usize, c: usize, diff: f64, fwd: &[f64; 2], bwd: &[f64; 2]) -> f64 {
        let d = self.grid().dim();
        let slot = node * self.n_controls + c;
        let b = &self.drift[slot * d..(slot + 1) * d];
        let mut v = diff;
        for k in 0..d {
            v += b[k].max(0.0) * fwd[k] + b[k].min(0.0) * bwd[k];
        }
        v + self.cost[slot]
    }

    fn node_min(&self, node: usize, phi: &[f64]) -> (f64, usize) {
        let (diff, fwd, bwd) = self.local(node, phi);
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.n_controls {
            let v = self.candidate(node, c, diff, &fwd, &bwd);
            if v < best.0 {
                best = (v, c);
            }
        }
        best
    }

    /// Slice version of [`Scheme::min_hamiltonian`] writing into buffers.
    pub fn min_hamiltonian_into(&self, phi: &[f64], value: &mut [f64], argmin: &mut [usize]) {
        value
            .par_iter_mut()
            .zip(argmin.par_iter_mut())
            .enumerate()
            .with_min_len(512)
            .for_each(|(node, (v, a))| {
                let (best, c) = self.node_min(node, phi);
                *v = best;
                *a = c;
            });
    }

    pub fn min_hamiltonian(&self, phi: &Field) -> Result<HamiltonianResult> {
        if phi.len() != self.grid().len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid().len(),
                found: phi.len(),
            });
        }
        let n = phi.len();
        let mut value = vec![0.0; n];
        let mut argmin = vec![0; n];
        self.min_hamiltonian_into(phi.values(), &mut value, &mut argmin);
        Ok(HamiltonianResult {
            value: Field::new(self.grid().clone(), value)?,
            argmin,
        })
    }

    /// `L^{v(x)} φ(x) + r(x, v(x))` for a fixed policy, with the same
    /// arithmetic as the minimization.
    pub fn policy_hamiltonian(&self, phi: &[f64], policy: &[usize]) -> Vec<f64> {
        (0..phi.len())
            .into_par_iter()
            .with_min_len(512)
            .map(|node| {
                let (diff, fwd, bwd) = self.local(node, phi);
                self.candidate(node, policy[node], diff, &fwd, &bwd)
            })
            .collect()
    }

    /// Greedy improvement of `current` against `phi`: a node keeps its control
    /// unless another one is better by more than `slack`. Returns the new
    /// policy, the minimal values and the number of changed nodes.
    pub fn improve_policy(&self, phi: &[f64], current: &[usize], slack: f64) -> (Vec<usize>, Vec<f64>, usize) {
        let results: Vec<(usize, f64)> = (0..phi.len())
            .into_par_iter()
            .with_min_len(512)
            .map(|node| {
                let (diff, fwd, bwd) = self.local(node, phi);
                let mut best = (f64::INFINITY, 0);
                for c in 0..self.n_controls {
                    let v = self.candidate(node, c, diff, &fwd, &bwd);
                    if v < best.0 {
                        best = (v, c);
                    }
                }
                let keep = self.candidate(node, current[node], diff, &fwd, &bwd);
                let tol = slack * (1.0 + best.0.abs());
                if keep <= best.0 + tol {
                    (current[node], best.0)
                } else {
                    (best.1, best.0)
                }
            })
            .collect();
        let changes = results
            .iter()
            .zip(current)
            .filter(|((c, _), old)| c != *old)
            .count();
        let (policy, values) = results.into_iter().unzip();
        (policy, values, changes)
    }
}
