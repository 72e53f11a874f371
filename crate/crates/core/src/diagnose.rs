//! Runtime diagnostics along VI/RVI trajectories: distance to the RVI limit
//! on a probe box, oscillation over the box around the sub-ρ level set, and
//! checks of the anchor drift bounds.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{EvolutionTrajectory, Mode};
use crate::linalg::pairwise_sum;
use crate::model::{near_monotone_level_set, ControlProblem, Field, GridSpec};
use crate::stationary::{weighted_norm, SolveReport};

/// Axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn centered(dim: usize, radius: f64) -> Self {
        Self {
            lower: vec![-radius; dim],
            upper: vec![radius; dim],
        }
    }

    pub fn nodes(&self, grid: &GridSpec) -> Vec<usize> {
        let slack: Vec<f64> = grid.spacings().iter().map(|h| 1e-9 * h).collect();
        (0..grid.len())
            .filter(|&node| {
                (0..grid.dim()).all(|k| {
                    let x = grid.coord(node, k);
                    x >= self.lower[k] - slack[k] && x <= self.upper[k] + slack[k]
                })
            })
            .collect()
    }
}

/// Bounding box of `{x : min_u r(x,u) ≤ ρ}` inflated by one cell and clipped
/// to the grid. Falls back to the cell around the origin when the set is
/// empty.
pub fn default_b0(problem: &ControlProblem, grid: &GridSpec, rho: f64) -> BoxRegion {
    let set = near_monotone_level_set(problem, rho, grid);
    let d = grid.dim();
    let (lo, hi) = set
        .bounding_box
        .unwrap_or_else(|| (vec![0.0; d], vec![0.0; d]));
    BoxRegion {
        lower: (0..d)
            .map(|k| (lo[k] - grid.spacing(k)).max(grid.lower()[k]))
            .collect(),
        upper: (0..d)
            .map(|k| (hi[k] + grid.spacing(k)).min(grid.upper()[k]))
            .collect(),
    }
}

/// Default slack for the drift and boundedness checks: `10·dt + 2·tol`.
pub fn default_slack(dt: f64, hjb_tol: f64) -> f64 {
    10.0 * dt + 2.0 * hjb_tol
}

/// `max_{|x|_∞ ≤ radius} |φ(x) - (V*(x) - V*(0) + ρ)|`.
pub fn sup_error_on_compact(phi: &Field, report: &SolveReport, radius: f64) -> Result<f64> {
    phi.check_same_grid(&report.value)?;
    let grid = phi.grid();
    for k in 0..grid.dim() {
        if grid.lower()[k] > -radius || grid.upper()[k] < radius {
            return Err(Error::Region(format!(
                "probe radius {radius} exceeds the grid box on axis {k}"
            )));
        }
    }
    let target = report.rvi_limit();
    Ok(grid
        .nodes_within(radius)
        .into_iter()
        .fold(0.0, |m, node| m.max((phi.at(node) - target.at(node)).abs())))
}

/// `max - min` of `φ` over the nodes of `region`.
pub fn oscillation(phi: &Field, region: &BoxRegion) -> Result<f64> {
    let nodes = region.nodes(phi.grid());
    if nodes.is_empty() {
        return Err(Error::Region("oscillation over a region with no grid nodes".into()));
    }
    let (lo, hi) = nodes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| {
        let v = phi.at(n);
        (lo.min(v), hi.max(v))
    });
    Ok(hi - lo)
}

/// One sampled-time row of diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub sup_error_on_compact: f64,
    pub oscillation_b0: f64,
    pub anchor_value: f64,
    pub weighted_norm_vs_vstar: f64,
    /// `μ_{v*}ᵀ φ̄`, recorded for VI runs.
    pub mu_average: Option<f64>,
}

/// What a run needs to emit [`DiagnosticsRecord`]s.
#[derive(Clone, Debug)]
pub struct DiagnosticContext<'a> {
    pub report: &'a SolveReport,
    pub probe_radius: f64,
    pub b0: BoxRegion,
}

impl<'a> DiagnosticContext<'a> {
    pub fn new(problem: &ControlProblem, report: &'a SolveReport, probe_radius: f64) -> Self {
        let b0 = default_b0(problem, report.grid(), report.rho);
        Self {
            report,
            probe_radius,
            b0,
        }
    }

    pub fn record(&self, time: f64, phi: &Field, mode: Mode) -> Result<DiagnosticsRecord> {
        let mu_average = (mode == Mode::Vi).then(|| {
            let terms: Vec<f64> = self
                .report
                .mu
                .iter()
                .zip(phi.values())
                .map(|(m, v)| m * v)
                .collect();
            pairwise_sum(&terms)
        });
        Ok(DiagnosticsRecord {
            time,
            sup_error_on_compact: sup_error_on_compact(phi, self.report, self.probe_radius)?,
            oscillation_b0: oscillation(phi, &self.b0)?,
            anchor_value: phi.anchor_value(),
            weighted_norm_vs_vstar: weighted_norm(phi, &self.report.value)?,
            mu_average,
        })
    }
}

/// A sampled pair `(t - τ, t)` where `φ̄(t-τ, 0) - φ̄(t, 0) > ρτ + osc0 + slack`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftViolation {
    pub earlier_step: usize,
    pub later_step: usize,
    pub earlier_time: f64,
    pub later_time: f64,
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchorDriftReport {
    /// For each later time, the worst earlier time if it violates the bound.
    /// Only VI trajectories are checked.
    pub violations: Vec<DriftViolation>,
    pub anchor_min: f64,
    pub anchor_max: f64,
    pub all_finite: bool,
}

/// Scans the dense anchor series.
///
/// For VI runs every pair `s < t` is checked against
/// `φ̄(s,0) - φ̄(t,0) ≤ ρ(t - s) + osc0 + slack`; the worst `s` for each `t`
/// is reported. For RVI runs only the band `[min, max]` and finiteness of the
/// anchor series are reported.
pub fn anchor_drift_bounds(
    traj: &EvolutionTrajectory,
    rho: f64,
    osc0: f64,
    slack: f64,
) -> Result<AnchorDriftReport> {
    if traj.anchor_series.len() != traj.steps + 1 {
        return Err(Error::MissingAnchorSeries);
    }
    let a = &traj.anchor_series;
    let all_finite = a.iter().all(|v| v.is_finite());
    let anchor_min = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let anchor_max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut violations = Vec::new();
    if traj.mode == Mode::Vi {
        let bound = osc0 + slack;
        // Running max of φ̄(s,0) + ρs over s < t.
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (t, &at) in a.iter().enumerate() {
            let tt = traj.step_time(t);
            if t > 0 {
                let excess = best.0 - (at + rho * tt) - bound;
                if excess > 0.0 {
                    violations.push(DriftViolation {
                        earlier_step: best.1,
                        later_step: t,
                        earlier_time: traj.step_time(best.1),
                        later_time: tt,
                        excess,
                    });
                }
            }
            let key = at + rho * tt;
            if key > best.0 {
                best = (key, t);
            }
        }
    }
    Ok(AnchorDriftReport {
        violations,
        anchor_min,
        anchor_max,
        all_finite,
    })
}
