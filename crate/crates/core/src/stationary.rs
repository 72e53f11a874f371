//! Stationary ergodic problem: Poisson equations for fixed policies, invariant
//! distributions and policy iteration for the HJB equation
//!
//! ```text
//! min_u [L^u V + r(·, u)] = ρ.
//! ```

use std::sync::Arc;

use serde::Serialize;

use crate::discretize::{Generator, Scheme};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, CsrMatrix, Solver};
use crate::model::{ControlProblem, Field, GridSpec};

/// Disagreement between the bordered-system ρ and `μᵀr` above which a
/// Poisson solve is flagged as ill-conditioned.
pub const RHO_CROSSCHECK_TOL: f64 = 1e-6;

/// Invariant probability of a CTMC generator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StationaryDistribution {
    pub mu: Vec<f64>,
    /// `max_j |(μᵀG)_j|`.
    pub residual: f64,
}

impl StationaryDistribution {
    /// `Σ μ_i f_i`.
    pub fn expect(&self, f: &[f64]) -> f64 {
        let terms: Vec<f64> = self.mu.iter().zip(f).map(|(m, v)| m * v).collect();
        pairwise_sum(&terms)
    }
}

pub fn stationary_distribution(g: &Generator) -> Result<StationaryDistribution> {
    let n = g.len();
    if n == 1 {
        return Ok(StationaryDistribution {
            mu: vec![1.0],
            residual: 0.0,
        });
    }
    // Pin μ at the node with the largest exit rate and solve the remaining
    // balance equations Σ_{j≠p} μ_j G_ji = -G_pi.
    let pin = (0..n)
        .max_by(|&a, &b| g.diagonal(b).partial_cmp(&g.diagonal(a)).unwrap())
        .unwrap_or(0);
    let gt = g.to_csr().transpose();
    let reduced = gt.without(pin);
    let solver = Solver::new(&reduced).map_err(|e| Error::Reducible(e.to_string()))?;
    let mut rhs = vec![0.0; n];
    for (j, w) in g.rates(pin) {
        rhs[j] = -w;
    }
    rhs.remove(pin);
    let mut mu = solver.solve(&rhs)?;
    mu.insert(pin, 1.0);
    let total = pairwise_sum(&mu);
    if let Some(i) = mu.iter().position(|&m| !m.is_finite() || m <= 0.0) {
        return Err(Error::Reducible(format!("non-positive invariant weight at node {i}")));
    }
    for m in &mut mu {
        *m /= total;
    }
    let residual = balance_residual(&gt, &mu);
    Ok(StationaryDistribution { mu, residual })
}

fn balance_residual(gt: &CsrMatrix, mu: &[f64]) -> f64 {
    let mut out = vec![0.0; mu.len()];
    gt.mul_vec(mu, &mut out);
    out.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Solution of `G V + r = ρ` for a fixed policy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoissonSolution {
    /// `μᵀ r`.
    pub rho: f64,
    /// ρ from the bordered system.
    pub rho_bordered: f64,
    /// Relative value, shifted so that `min V = 1`.
    pub value: Vec<f64>,
    /// The same solution pinned at `V(anchor) = 0`.
    pub value_pinned: Vec<f64>,
    pub mu: StationaryDistribution,
    /// `max |G V + r - ρ|`.
    pub residual: f64,
    /// `|ρ_bordered - μᵀr| > RHO_CROSSCHECK_TOL`.
    pub ill_conditioned: bool,
}

/// Solves the bordered system for `(V, ρ)` with `V(anchor) = 0`.
///
/// Unknowns are `V` off the anchor plus the scalar `ρ`; the system is reduced
/// by block elimination to two solves with the generator minus the anchor
/// row and column.
pub fn poisson_solve(g: &Generator, r: &[f64], anchor: usize) -> Result<PoissonSolution> {
    let n = g.len();
    if r.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: r.len() });
    }
    if anchor >= n {
        return Err(Error::InvalidInput(format!("anchor {anchor} outside {n} nodes")));
    }
    if let Some(index) = r.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "Poisson right-hand side", index });
    }
    let mu = stationary_distribution(g)?;
    let rho_mu = mu.expect(r);

    let (rho_bordered, value_pinned) = if n == 1 {
        (r[0], vec![0.0])
    } else {
        let reduced = g.to_csr().without(anchor);
        let solver = Solver::new(&reduced)?;
        let mut minus_r: Vec<f64> = r.iter().map(|v| -v).collect();
        minus_r.remove(anchor);
        let y = solver.solve(&minus_r)?;
        let z = solver.solve(&vec![1.0; n - 1])?;
        let reduced_index = |j: usize| if j > anchor { j - 1 } else { j };
        let (mut gy, mut gz) = (0.0, 0.0);
        for (j, w) in g.rates(anchor) {
            gy += w * y[reduced_index(j)];
            gz += w * z[reduced_index(j)];
        }
        let denom = gz - 1.0;
        if !(denom.abs() > 1e-300) {
            return Err(Error::Singular("degenerate bordered system".into()));
        }
        let rho = (-r[anchor] - gy) / denom;
        let mut v: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + rho * b).collect();
        v.insert(anchor, 0.0);
        (rho, v)
    };
    if let Some(index) = value_pinned.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "Poisson solution", index });
    }

    let mut gv = vec![0.0; n];
    g.apply_slice(&value_pinned, &mut gv);
    let residual = gv
        .iter()
        .zip(r)
        .fold(0.0f64, |m, (a, b)| m.max((a + b - rho_bordered).abs()));
    let min = value_pinned.iter().cloned().fold(f64::INFINITY, f64::min);
    let value = value_pinned.iter().map(|v| v - min + 1.0).collect();
    Ok(PoissonSolution {
        rho: rho_mu,
        rho_bordered,
        value,
        value_pinned,
        mu,
        residual,
        ill_conditioned: (rho_bordered - rho_mu).abs() > RHO_CROSSCHECK_TOL,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rho: f64,
    pub policy_changes: usize,
    pub poisson_residual: f64,
    pub hjb_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PiaOptions {
    /// Tolerance on the HJB residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PiaOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

/// Result of the stationary solve: `(ρ, V*, v*)` plus bookkeeping.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub rho: f64,
    pub rho_bordered: f64,
    /// `V*`, normalized so that `min V* = 1`.
    #[serde(skip)]
    pub value: Field,
    pub policy: Vec<usize>,
    /// Invariant distribution of the chain under `policy`.
    pub mu: Vec<f64>,
    /// `μ_{v*}[V*]`; always finite on a grid.
    pub mu_value_integral: f64,
    pub hjb_residual: f64,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub ill_conditioned: bool,
}

impl SolveReport {
    /// `V*(x) - V*(0) + ρ`, the limit of the relative value iteration.
    pub fn rvi_limit(&self) -> Field {
        let v0 = self.value.anchor_value();
        self.value.map(|v| v - v0 + self.rho)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.value.grid()
    }
}

/// Policy iteration: value determination by [`poisson_solve`], then greedy
/// improvement. Stops when the policy is stable or the HJB residual is
/// below `opts.tol`.
pub fn policy_iteration(scheme: &Scheme, v0: &[usize], opts: &PiaOptions) -> Result<SolveReport> {
    scheme.check_policy(v0)?;
    let grid = scheme.grid().clone();
    let anchor = grid.anchor();
    let mut policy = v0.to_vec();
    let mut history = Vec::new();
    for iteration in 0..opts.max_iter {
        let g = scheme.policy_generator(&policy);
        let r = scheme.policy_cost(&policy);
        let sol = poisson_solve(&g, &r, anchor)?;
        let (improved, minimal, changes) = scheme.improve_policy(&sol.value, &policy, 1e-12);
        let hjb_residual = minimal
            .iter()
            .fold(0.0f64, |m, v| m.max((v - sol.rho_bordered).abs()));
        history.push(IterationRecord {
            iteration,
            rho: sol.rho,
            policy_changes: changes,
            poisson_residual: sol.residual,
            hjb_residual,
        });
        if changes == 0 || hjb_residual <= opts.tol {
            let value = Field::new(grid.clone(), sol.value)?;
            let mu_value_integral = sol.mu.expect(value.values());
            return Ok(SolveReport {
                rho: sol.rho,
                rho_bordered: sol.rho_bordered,
                value,
                policy,
                mu: sol.mu.mu,
                mu_value_integral,
                hjb_residual,
                history,
                converged: true,
                ill_conditioned: sol.ill_conditioned,
            });
        }
        policy = improved;
    }
    // Out of iterations: report the last evaluated policy.
    let g = scheme.policy_generator(&policy);
    let sol = poisson_solve(&g, &scheme.policy_cost(&policy), anchor)?;
    let (_, minimal, _) = scheme.improve_policy(&sol.value, &policy, 1e-12);
    let hjb_residual = minimal
        .iter()
        .fold(0.0f64, |m, v| m.max((v - sol.rho_bordered).abs()));
    let value = Field::new(grid, sol.value)?;
    let mu_value_integral = sol.mu.expect(value.values());
    Ok(SolveReport {
        rho: sol.rho,
        rho_bordered: sol.rho_bordered,
        value,
        policy,
        mu: sol.mu.mu,
        mu_value_integral,
        hjb_residual,
        history,
        converged: false,
        ill_conditioned: sol.ill_conditioned,
    })
}

/// Policy iteration for `problem` on `grid`, starting from the control
/// closest to zero at every node.
pub fn solve(problem: &ControlProblem, grid: Arc<GridSpec>, opts: &PiaOptions) -> Result<SolveReport> {
    let scheme = Scheme::new(problem, grid)?;
    let zero = vec![0.0; problem.controls().dim()];
    let v0 = vec![problem.controls().nearest(&zero); scheme.grid().len()];
    policy_iteration(&scheme, &v0, opts)
}

/// `sup_x |f(x)| / V(x)` for a normalized `V ≥ 1`.
pub fn weighted_norm(f: &Field, v: &Field) -> Result<f64> {
    f.check_same_grid(v)?;
    if let Some(i) = v.values().iter().position(|&x| x < 1.0) {
        return Err(Error::Normalization(format!(
            "weight V = {} < 1 at node {i}",
            v.at(i)
        )));
    }
    Ok(f
        .values()
        .iter()
        .zip(v.values())
        .fold(0.0, |m, (a, b)| m.max(a.abs() / b)))
}

/// Membership of `φ0` in `{h : h - V ≥ c, ‖h‖_V < ∞}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionCheck {
    pub member: bool,
    /// `min(φ0 - V) - c`.
    pub margin: f64,
    pub weighted_norm: f64,
}

pub fn check_region_membership(phi0: &Field, v: &Field, c: f64) -> Result<RegionCheck> {
    let weighted_norm = weighted_norm(phi0, v)?;
    let gap = phi0
        .values()
        .iter()
        .zip(v.values())
        .fold(f64::INFINITY, |m, (a, b)| m.min(a - b));
    let margin = gap - c;
    Ok(RegionCheck {
        member: margin >= 0.0 && weighted_norm.is_finite(),
        margin,
        weighted_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_with, ControlSet, PresetOptions};

    fn two_node() -> Generator {
        Generator::from_rates(vec![vec![(1, 1.0)], vec![(0, 2.0)]]).unwrap()
    }

    #[test]
    fn two_node_chain() {
        let mu = stationary_distribution(&two_node()).unwrap();
        assert!((mu.mu[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((mu.mu[1] - 1.0 / 3.0).abs() < 1e-15);
        let sol = poisson_solve(&two_node(), &[0.0, 3.0], 0).unwrap();
        assert!((sol.rho - 1.0).abs() < 1e-14);
        assert!((sol.rho_bordered - 1.0).abs() < 1e-14);
        assert!(!sol.ill_conditioned);
    }

    #[test]
    fn single_node() {
        let g = Generator::from_rates(vec![vec![]]).unwrap();
        assert_eq!(stationary_distribution(&g).unwrap().mu, vec![1.0]);
    }

    #[test]
    fn symmetric_walk_is_uniform() {
        let n = 7;
        let rows = (0..n)
            .map(|i| {
                let mut r = Vec::new();
                if i > 0 {
                    r.push((i - 1, 3.0));
                }
                if i + 1 < n {
                    r.push((i + 1, 3.0));
                }
                r
            })
            .collect();
        let g = Generator::from_rates(rows).unwrap();
        let mu = stationary_distribution(&g).unwrap();
        for m in &mu.mu {
            assert!((m - 1.0 / n as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn reducible_chain_is_rejected() {
        // Node 2 is absorbing.
        let g = Generator::from_rates(vec![vec![(1, 1.0)], vec![(2, 1.0)], vec![]]).unwrap();
        assert!(matches!(stationary_distribution(&g), Err(Error::Reducible(_))));
    }

    #[test]
    fn constant_cost_gives_flat_value() {
        let p = preset_with("lqg1d", &PresetOptions { u_max: 2.0, control_count: 5 }).unwrap();
        let grid = Arc::new(GridSpec::cube(1, 2.0, 0.1).unwrap());
        let scheme = Scheme::new(&p, grid.clone()).unwrap();
        let policy: Vec<usize> = (0..grid.len()).map(|i| i % 5).collect();
        let g = scheme.policy_generator(&policy);
        let sol = poisson_solve(&g, &vec![2.5; grid.len()], grid.anchor()).unwrap();
        assert!((sol.rho - 2.5).abs() < 1e-10);
        assert!(sol.value.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn invariance_of_mu_under_generator() {
        let p = preset_with("lqg1d", &PresetOptions { u_max: 2.0, control_count: 5 }).unwrap();
        let grid = Arc::new(GridSpec::cube(1, 2.0, 0.1).unwrap());
        let scheme = Scheme::new(&p, grid.clone()).unwrap();
        let g = scheme.policy_generator(&vec![1; grid.len()]);
        let mu = stationary_distribution(&g).unwrap();
        assert!(mu.residual < 1e-10);
        let f: Vec<f64> = (0..grid.len()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let mut gf = vec![0.0; f.len()];
        g.apply_slice(&f, &mut gf);
        assert!(mu.expect(&gf).abs() < 1e-9);
    }

    #[test]
    fn single_control_terminates_after_one_solve() {
        let p = ControlProblem::from_fns(
            "one",
            1,
            ControlSet::uniform(-0.5, -0.5, 1).unwrap(),
            |x, u, out| out[0] = u[0] * x[0],
            |_, out| out[0] = 0.5,
            |x, _| x[0] * x[0],
        )
        .unwrap();
        let grid = Arc::new(GridSpec::cube(1, 3.0, 0.05).unwrap());
        let report = solve(&p, grid, &PiaOptions::default()).unwrap();
        assert_eq!(report.history.len(), 1);
        assert!(report.converged);
        assert_eq!(report.value.min(), 1.0);
    }

    #[test]
    fn weighted_norm_examples() {
        let grid = Arc::new(GridSpec::cube(1, 1.0, 0.25).unwrap());
        let v = Field::from_fn(grid.clone(), |x| 1.0 + x[0] * x[0]);
        assert_eq!(weighted_norm(&v, &v).unwrap(), 1.0);
        assert_eq!(weighted_norm(&Field::constant(grid.clone(), 0.0), &v).unwrap(), 0.0);
        assert_eq!(weighted_norm(&Field::constant(grid.clone(), 2.0), &v).unwrap(), 2.0);
        let bad = v.shifted(-0.5);
        assert!(matches!(weighted_norm(&v, &bad), Err(Error::Normalization(_))));
    }

    #[test]
    fn region_membership_examples() {
        let grid = Arc::new(GridSpec::cube(1, 1.0, 0.25).unwrap());
        let v = Field::from_fn(grid.clone(), |x| 1.0 + x[0] * x[0]);
        let r = check_region_membership(&v, &v, 0.0).unwrap();
        assert!(r.member && r.margin == 0.0);
        let r = check_region_membership(&v.shifted(-1.0), &v, 0.0).unwrap();
        assert!(!r.member && r.margin == -1.0);
        let r = check_region_membership(&v.shifted(5.0), &v, 2.0).unwrap();
        assert!(r.member && r.margin == 3.0);
    }
}
