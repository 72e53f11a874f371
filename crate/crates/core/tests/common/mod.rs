#![allow(dead_code)]

use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rvi_core::discretize::{build_generator, Scheme};
use rvi_core::evolve::{run, step_rvi, step_vi, AnchorMode, Mode, RunConfig};
use rvi_core::model::{preset_with, PresetOptions};
use rvi_core::{ControlProblem, ControlSet, Field, GridSpec};

pub fn lqg1d(control_count: usize) -> ControlProblem {
    preset_with("lqg1d", &PresetOptions { u_max: 4.0, control_count }).unwrap()
}

pub fn cube(dim: usize, half_width: f64, h: f64) -> Arc<GridSpec> {
    Arc::new(GridSpec::cube(dim, half_width, h).unwrap())
}

/// Parameters of a randomly drawn problem: constant diffusion satisfying the
/// cross-term dominance condition, affine drift plus control, quadratic cost.
#[derive(Clone, Debug)]
pub struct RandomProblem {
    pub dim: usize,
    pub n: Vec<usize>,
    pub half: Vec<f64>,
    pub diag: Vec<f64>,
    pub cross: f64,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub q: f64,
    pub controls: usize,
}

impl RandomProblem {
    pub fn grid(&self) -> Arc<GridSpec> {
        let lower = self.half.iter().map(|h| -h).collect();
        Arc::new(GridSpec::new(lower, self.half.clone(), self.n.clone()).unwrap())
    }

    pub fn problem(&self) -> ControlProblem {
        let d = self.dim;
        let grid = self.grid();
        let h = grid.spacings().to_vec();
        let mut a = vec![0.0; d * d];
        for k in 0..d {
            a[k * d + k] = self.diag[k];
        }
        if d == 2 {
            let bound = (self.diag[0] * h[1] / h[0]).min(self.diag[1] * h[0] / h[1]);
            a[1] = 0.9 * self.cross * bound;
            a[2] = a[1];
        }
        let (b0, b1, q) = (self.b0.clone(), self.b1.clone(), self.q);
        ControlProblem::from_fns(
            "random",
            d,
            ControlSet::uniform_box(d, -2.0, 2.0, self.controls).unwrap(),
            move |x, u, out| {
                for k in 0..x.len() {
                    out[k] = b0[k] + b1[k] * x[k] + u[k];
                }
            },
            move |_, out| out.copy_from_slice(&a),
            move |x, u| q * x.iter().map(|v| v * v).sum::<f64>() + u.iter().map(|v| v * v).sum::<f64>(),
        )
        .unwrap()
    }

    pub fn scheme(&self) -> Scheme {
        Scheme::new(&self.problem(), self.grid()).unwrap()
    }
}

pub fn random_problem() -> impl Strategy<Value = RandomProblem> {
    (1usize..=2).prop_flat_map(|dim| {
        // Odd node counts keep the origin on a node.
        let half_cells = if dim == 1 { 1usize..12 } else { 1usize..5 };
        (
            proptest::collection::vec(half_cells.prop_map(|m| 2 * m + 1), dim),
            proptest::collection::vec(0.5f64..3.0, dim),
            proptest::collection::vec(0.1f64..2.0, dim),
            -1.0f64..1.0,
            proptest::collection::vec(-1.0f64..1.0, dim),
            proptest::collection::vec(-2.0f64..0.5, dim),
            0.0f64..3.0,
            2usize..6,
        )
            .prop_map(move |(n, half, diag, cross, b0, b1, q, controls)| RandomProblem {
                dim,
                n,
                half,
                diag,
                cross,
                b0,
                b1,
                q,
                controls,
            })
    })
}

/// A random problem with a random field on its grid.
pub fn problem_and_field() -> impl Strategy<Value = (RandomProblem, Vec<f64>)> {
    random_problem().prop_flat_map(|p| {
        let len: usize = p.n.iter().product();
        (Just(p), proptest::collection::vec(-5.0f64..5.0, len))
    })
}

/// A random problem with an ordered pair of fields `f ≤ g`.
pub fn problem_and_ordered_fields() -> impl Strategy<Value = (RandomProblem, Vec<f64>, Vec<f64>)> {
    random_problem().prop_flat_map(|p| {
        let len: usize = p.n.iter().product();
        (
            Just(p),
            proptest::collection::vec(-5.0f64..5.0, len),
            proptest::collection::vec(0.0f64..2.0, len),
        )
            .prop_map(|(p, f, gap)| {
                let g = f.iter().zip(&gap).map(|(a, b)| a + b).collect();
                (p, f, g)
            })
    })
}

// Properties of the scheme, run at 1000 cases by both the property suite and
// the acceptance suite.

pub fn prop_generator_rows((p, _): (RandomProblem, Vec<f64>)) -> Result<(), TestCaseError> {
    let problem = p.problem();
    let grid = p.grid();
    for u in problem.controls().iter() {
        let g = build_generator(&problem, &grid, u).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for i in 0..g.len() {
            prop_assert_eq!(g.row_sum(i), 0.0, "row {} sums to {}", i, g.row_sum(i));
            for (j, w) in g.rates(i) {
                prop_assert!(w >= 0.0 && j != i, "entry ({}, {}) = {}", i, j, w);
            }
            prop_assert!(g.diagonal(i) <= 0.0);
        }
    }
    Ok(())
}

pub fn prop_vi_comparison((p, f, g): (RandomProblem, Vec<f64>, Vec<f64>)) -> Result<(), TestCaseError> {
    let scheme = p.scheme();
    let grid = p.grid();
    let dt = scheme.stable_dt(0.9);
    let mut a = Field::new(grid.clone(), f).unwrap();
    let mut b = Field::new(grid, g).unwrap();
    for step in 0..20 {
        a = step_vi(&scheme, &a, 1.0, dt).unwrap().0;
        b = step_vi(&scheme, &b, 1.0, dt).unwrap().0;
        for node in 0..a.len() {
            prop_assert!(
                a.at(node) <= b.at(node),
                "order lost at node {} after {} steps: {} > {}",
                node,
                step + 1,
                a.at(node),
                b.at(node)
            );
        }
    }
    Ok(())
}

pub fn prop_vi_shift((p, f, c): (RandomProblem, Vec<f64>, f64)) -> Result<(), TestCaseError> {
    let scheme = p.scheme();
    let grid = p.grid();
    let dt = scheme.stable_dt(0.9);
    let phi0 = Field::new(grid, f).unwrap();
    let cfg = RunConfig {
        mode: Mode::Vi,
        rho: Some(0.7),
        horizon: 40.0 * dt,
        dt: Some(dt),
        snapshot_every: 10.0 * dt,
        ..RunConfig::default()
    };
    let base = run(&scheme, &phi0, &cfg, None).unwrap();
    let shifted = run(&scheme, &phi0.shifted(c), &cfg, None).unwrap();
    let scale = 1e-10 * (1.0 + c.abs() + phi0.sup_norm());
    for (x, y) in base.snapshots.iter().zip(&shifted.snapshots) {
        for node in 0..x.len() {
            let d = y.at(node) - x.at(node) - c;
            prop_assert!(d.abs() <= scale, "node {}: shift off by {}", node, d);
        }
    }
    Ok(())
}

pub fn prop_rvi_forgetting((p, f, c): (RandomProblem, Vec<f64>, f64)) -> Result<(), TestCaseError> {
    let scheme = p.scheme();
    let grid = p.grid();
    let dt = scheme.stable_dt(0.9).min(0.01);
    let phi0 = Field::new(grid, f).unwrap();
    let mut a = phi0.clone();
    let mut b = phi0.shifted(c);
    let steps = 200;
    for k in 1..=steps {
        a = step_rvi(&scheme, &a, dt, AnchorMode::Point).unwrap().0;
        b = step_rvi(&scheme, &b, dt, AnchorMode::Point).unwrap().0;
        if k % 50 == 0 {
            let expected = c * (-(k as f64) * dt).exp();
            let tol = 10.0 * dt * c.abs().max(1.0);
            for node in 0..a.len() {
                let d = b.at(node) - a.at(node) - expected;
                prop_assert!(d.abs() <= tol, "node {} at step {}: off by {}", node, k, d);
            }
        }
    }
    Ok(())
}

pub fn shift_and_problem() -> impl Strategy<Value = (RandomProblem, Vec<f64>, f64)> {
    (problem_and_field(), -20.0f64..20.0).prop_map(|((p, f), c)| (p, f, c))
}
