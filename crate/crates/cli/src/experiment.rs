//! Phase orchestration: solve, evolve, coupling, Monte Carlo, checks.

use std::time::Instant;

use rvi_core::diagnose::{
    anchor_drift_bounds, default_slack, oscillation, DiagnosticContext, DiagnosticsRecord, DriftViolation,
};
use rvi_core::discretize::Scheme;
use rvi_core::evolve::{
    coupling_residuals, run, rvi_from_vi, snapshot_distances, vi_from_rvi, EvolutionTrajectory, Mode, RunConfig,
};
use rvi_core::model::{exact_solution, ExactSolution};
use rvi_core::montecarlo::{
    ergodic_cost_estimate, finite_horizon_value, terminal_expectation, EstimateReport, Policy, SimConfig,
};
use rvi_core::stationary::{policy_iteration, weighted_norm, IterationRecord, PiaOptions, SolveReport};
use rvi_core::{Error, Field};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{ExperimentMode, Phi0Spec, Plan};
use crate::error::CliError;
use crate::output::{Csv, FailureRecord, OutputDir, PhaseTiming, RunManifest, Software};

/// Monte Carlo agreement is judged within this many standard errors.
pub const MC_SIGMAS: f64 = 3.0;
/// Extra allowance for the finite-horizon comparison and the sandwich.
pub const FH_ALLOWANCE: f64 = 0.05;

fn numerical(phase: &'static str) -> impl Fn(Error) -> CliError {
    move |source| CliError::Numerical { phase, source }
}

struct Solved {
    scheme: Scheme,
    report: SolveReport,
}

struct Runner<'a> {
    plan: &'a Plan,
    exact: Option<ExactSolution>,
    out: OutputDir,
    timings: Vec<PhaseTiming>,
    summary: Map<String, Value>,
}

impl<'a> Runner<'a> {
    fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let result = f(self);
        self.timings.push(PhaseTiming {
            phase: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        result
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn coord_header(&self, extra: &[&str]) -> Vec<String> {
        let d = self.plan.grid.dim();
        let mut h: Vec<String> = if d == 1 {
            vec!["x".into()]
        } else {
            (1..=d).map(|k| format!("x{k}")).collect()
        };
        h.extend(extra.iter().map(|s| s.to_string()));
        h
    }

    /// `max |φ - (|x|² + ρ)|` over the probe box, when a closed form exists.
    fn closed_form_error(&self, phi: &Field) -> Option<f64> {
        let exact = self.exact?;
        let grid = phi.grid();
        Some(
            grid.nodes_within(self.plan.config.probe_radius)
                .into_iter()
                .map(|n| (phi.at(n) - exact.rvi_limit(&grid.point_vec(n))).abs())
                .fold(0.0f64, f64::max),
        )
    }

    fn solve(&mut self) -> Result<Solved, CliError> {
        let plan = self.plan;
        let scheme = Scheme::new(&plan.problem, plan.grid.clone()).map_err(numerical("discretize"))?;
        let zero = vec![0.0; plan.problem.controls().dim()];
        let v0 = vec![plan.problem.controls().nearest(&zero); plan.grid.len()];
        let opts = PiaOptions {
            tol: plan.config.tol,
            max_iter: plan.config.max_iter,
        };
        let report = policy_iteration(&scheme, &v0, &opts).map_err(numerical("policy iteration"))?;
        self.write_solve(&report)?;
        self.note("rho", report.rho);
        self.note("hjb_residual", report.hjb_residual);
        if let Some(e) = self.exact {
            self.note("exact_rho", e.rho);
        }
        if !report.converged {
            return Err(CliError::Numerical {
                phase: "policy iteration",
                source: Error::InvalidInput(format!(
                    "no convergence in {} iterations (HJB residual {:e})",
                    plan.config.max_iter, report.hjb_residual
                )),
            });
        }
        Ok(Solved { scheme, report })
    }

    fn write_solve(&mut self, report: &SolveReport) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct SolveSummary<'r> {
            preset: &'r str,
            dim: usize,
            h: f64,
            half_width: f64,
            nodes: usize,
            controls: usize,
            rho: f64,
            rho_bordered: f64,
            hjb_residual: f64,
            converged: bool,
            ill_conditioned: bool,
            mu_value_integral: f64,
            exact_rho: Option<f64>,
            history: &'r [IterationRecord],
        }
        let plan = self.plan;
        let summary = SolveSummary {
            preset: &plan.config.preset,
            dim: plan.grid.dim(),
            h: plan.h,
            half_width: plan.config.half_width,
            nodes: plan.grid.len(),
            controls: plan.problem.controls().len(),
            rho: report.rho,
            rho_bordered: report.rho_bordered,
            hjb_residual: report.hjb_residual,
            converged: report.converged,
            ill_conditioned: report.ill_conditioned,
            mu_value_integral: report.mu_value_integral,
            exact_rho: self.exact.map(|e| e.rho),
            history: &report.history,
        };
        self.out.write_json("solve_report.json", &summary)?;

        let d = plan.grid.dim();
        let controls = plan.problem.controls();
        let mut cols = vec!["value", "rvi_limit", "policy_index"];
        let u_names: Vec<String> = if d == 1 {
            vec!["u".into()]
        } else {
            (1..=d).map(|k| format!("u{k}")).collect()
        };
        cols.extend(u_names.iter().map(|s| s.as_str()));
        cols.push("mu");
        if self.exact.is_some() {
            cols.push("exact_rvi_limit");
        }
        let mut csv = Csv::new(&self.coord_header(&cols));
        let limit = report.rvi_limit();
        for node in 0..plan.grid.len() {
            let x = plan.grid.point_vec(node);
            let mut row = x.clone();
            row.push(report.value.at(node));
            row.push(limit.at(node));
            row.push(report.policy[node] as f64);
            row.extend_from_slice(controls.get(report.policy[node]));
            row.push(report.mu[node]);
            if let Some(e) = self.exact {
                row.push(e.rvi_limit(&x));
            }
            csv.row(&row);
        }
        self.out.write_csv("value.csv", csv)
    }

    fn initial_field(&self, report: &SolveReport) -> Field {
        let grid = self.plan.grid.clone();
        match self.plan.phi0 {
            Phi0Spec::Zero => Field::constant(grid, 0.0),
            Phi0Spec::Constant(c) => Field::constant(grid, c),
            Phi0Spec::Quadratic(a) => Field::from_fn(grid, |x| a * x.iter().map(|v| v * v).sum::<f64>()),
            Phi0Spec::Vstar => report.value.clone(),
        }
    }

    fn evolve(&mut self, solved: &Solved, mode: Mode) -> Result<EvolutionTrajectory, CliError> {
        let cfg = &self.plan.config;
        let phi0 = self.initial_field(&solved.report);
        let run_cfg = RunConfig {
            mode,
            rho: Some(solved.report.rho),
            horizon: cfg.horizon,
            dt: cfg.dt,
            method: cfg.method,
            snapshot_every: cfg.snapshot_every,
            policy_every: None,
        };
        let ctx = DiagnosticContext::new(&self.plan.problem, &solved.report, cfg.probe_radius);
        let traj = match run(&solved.scheme, &phi0, &run_cfg, Some(&ctx)) {
            Ok(t) => t,
            Err(Error::Unstable {
                step,
                time,
                max_abs,
                partial,
            }) => {
                // Keep what was computed before the blow-up.
                self.write_trajectory(&partial)?;
                return Err(CliError::Numerical {
                    phase: "evolution",
                    source: Error::Unstable {
                        step,
                        time,
                        max_abs,
                        partial,
                    },
                });
            }
            Err(e) => return Err(numerical("evolution")(e)),
        };
        self.write_trajectory(&traj)?;
        self.note("dt", traj.dt);
        self.note("steps", traj.steps);
        if let Some(last) = traj.diagnostics.last() {
            self.note("final_sup_error", last.sup_error_on_compact);
        }
        if mode != Mode::Vi {
            let e = self.closed_form_error(traj.final_field());
            self.note("final_closed_form_error", e);
        }
        Ok(traj)
    }

    fn write_trajectory(&mut self, traj: &EvolutionTrajectory) -> Result<(), CliError> {
        let mut csv = Csv::new(&["time".to_string()].into_iter().chain(self.coord_header(&["phi"])).collect::<Vec<_>>());
        for (t, snap) in traj.times.iter().zip(&traj.snapshots) {
            for node in 0..snap.len() {
                let mut row = vec![*t];
                row.extend(snap.grid().point_vec(node));
                row.push(snap.at(node));
                csv.row(&row);
            }
        }
        self.out.write_csv("snapshots.csv", csv)?;

        let mut csv = Csv::new(&["step", "time", "anchor"]);
        for (k, a) in traj.anchor_series.iter().enumerate() {
            csv.row(&[k as f64, traj.step_time(k), *a]);
        }
        self.out.write_csv("anchor_series.csv", csv)?;
        self.out.write_json("trajectory.json", traj)?;
        let closed = traj.mode != Mode::Vi;
        let diag = self.diagnostics_csv(&traj.diagnostics, traj, closed);
        self.out.write_csv("diagnostics.csv", diag)
    }

    fn diagnostics_csv(&self, records: &[DiagnosticsRecord], traj: &EvolutionTrajectory, closed: bool) -> Csv {
        let mut cols = vec![
            "time",
            "sup_error_on_compact",
            "oscillation_b0",
            "anchor_value",
            "weighted_norm_vs_vstar",
            "mu_average",
        ];
        let with_exact = closed && self.exact.is_some();
        if with_exact {
            cols.push("closed_form_error");
        }
        let mut csv = Csv::new(&cols);
        for (r, snap) in records.iter().zip(&traj.snapshots) {
            let mut row = vec![
                r.time,
                r.sup_error_on_compact,
                r.oscillation_b0,
                r.anchor_value,
                r.weighted_norm_vs_vstar,
                r.mu_average.unwrap_or(f64::NAN),
            ];
            if with_exact {
                row.push(self.closed_form_error(snap).unwrap_or(f64::NAN));
            }
            csv.row(&row);
        }
        csv
    }

    fn coupling(&mut self, traj: &EvolutionTrajectory, rho: f64) -> Result<EvolutionTrajectory, CliError> {
        let vi = vi_from_rvi(traj, rho).map_err(numerical("coupling"))?;
        let back = rvi_from_vi(&vi, rho).map_err(numerical("coupling"))?;
        let round_trip = snapshot_distances(traj, &back).map_err(numerical("coupling"))?;
        let mut csv = Csv::new(&["time", "ident_residual", "f_value", "roundtrip_residual", "vi_anchor"]);
        let mut worst = (0.0f64, 0.0f64);
        for (i, t) in traj.times.iter().enumerate() {
            let c = coupling_residuals(&traj.snapshots[i], &vi.snapshots[i]).map_err(numerical("coupling"))?;
            worst = (worst.0.max(c.ident_residual), worst.1.max(round_trip[i]));
            csv.row(&[*t, c.ident_residual, c.f_value, round_trip[i], vi.snapshots[i].anchor_value()]);
        }
        self.out.write_csv("coupling.csv", csv)?;
        self.note("max_ident_residual", worst.0);
        self.note("max_roundtrip_residual", worst.1);
        Ok(vi)
    }

    /// Anchor drift, anchor band, weighted-norm growth and oscillation checks
    /// on the run and its VI/RVI counterpart.
    fn checks(
        &mut self,
        solved: &Solved,
        traj: &EvolutionTrajectory,
        vi: Option<&EvolutionTrajectory>,
    ) -> Result<(), CliError> {
        let plan = self.plan;
        let report = &solved.report;
        let rho = report.rho;
        let ctx = DiagnosticContext::new(&plan.problem, report, plan.config.probe_radius);
        let phi0 = &traj.snapshots[0];
        let osc0 = oscillation(phi0, &ctx.b0).map_err(numerical("checks"))?;
        let slack = default_slack(traj.dt, plan.config.tol);
        let mut doc = Map::new();
        doc.insert("slack".into(), json!(slack));
        doc.insert("osc0".into(), json!(osc0));
        doc.insert("b0".into(), json!({"lower": ctx.b0.lower, "upper": ctx.b0.upper}));

        // Anchor band of the relative run.
        let relative = match traj.mode {
            Mode::Vi => rvi_from_vi(traj, rho).map_err(numerical("checks"))?,
            _ => traj.clone(),
        };
        let band = anchor_drift_bounds(&relative, rho, osc0, slack).map_err(numerical("checks"))?;
        doc.insert(
            "anchor_band".into(),
            json!({
                "mode": relative.mode,
                "anchor_min": band.anchor_min,
                "anchor_max": band.anchor_max,
                "width": band.anchor_max - band.anchor_min,
                "all_finite": band.all_finite,
            }),
        );

        if let Some(vi) = vi {
            let drift = anchor_drift_bounds(vi, rho, osc0, slack).map_err(numerical("checks"))?;
            let worst: Option<&DriftViolation> =
                drift.violations.iter().max_by(|a, b| a.excess.total_cmp(&b.excess));
            doc.insert(
                "anchor_drift".into(),
                json!({
                    "violations": drift.violations.len(),
                    "worst": worst,
                    "all_finite": drift.all_finite,
                }),
            );

            let records: Vec<DiagnosticsRecord> = if vi.diagnostics.len() == vi.snapshots.len() {
                vi.diagnostics.clone()
            } else {
                vi.times
                    .iter()
                    .zip(&vi.snapshots)
                    .map(|(t, s)| ctx.record(*t, s, Mode::Vi))
                    .collect::<rvi_core::Result<_>>()
                    .map_err(numerical("checks"))?
            };
            let phi0_norm = weighted_norm(&vi.snapshots[0], &report.value).map_err(numerical("checks"))?;
            let vest_excess = records
                .iter()
                .map(|r| r.weighted_norm_vs_vstar - (1.0 + rho * r.time) * phi0_norm.max(1.0))
                .fold(f64::NEG_INFINITY, f64::max);
            doc.insert(
                "weighted_norm_growth".into(),
                json!({"phi0_weighted_norm": phi0_norm, "max_excess": vest_excess, "holds": vest_excess <= 0.0}),
            );
            let osc_max = records.iter().map(|r| r.oscillation_b0).fold(0.0f64, f64::max);
            doc.insert(
                "oscillation_b0".into(),
                json!({"max": osc_max, "all_finite": records.iter().all(|r| r.oscillation_b0.is_finite())}),
            );
            let mu_increase = records
                .windows(2)
                .filter_map(|w| Some(w[1].mu_average? - w[0].mu_average?))
                .fold(f64::NEG_INFINITY, f64::max);
            doc.insert("mu_average_max_increase".into(), json!(finite_or_null(mu_increase)));
            let mut probe = vec![0.0; plan.grid.dim()];
            probe[0] = plan.config.probe_radius;
            let horizon = vi.horizon();
            let asympt = (horizon > 0.0).then(|| vi.final_field().interpolate(&probe).abs() / horizon);
            doc.insert("asymptotic_ratio".into(), json!({"probe": probe, "value": asympt}));
            self.note("drift_violations", drift.violations.len());
        }

        let final_field = traj.final_field();
        doc.insert(
            "final".into(),
            json!({
                "time": traj.horizon(),
                "sup_error_on_compact": traj.diagnostics.last().map(|r| r.sup_error_on_compact),
                "closed_form_error": if traj.mode == Mode::Vi { None } else { self.closed_form_error(final_field) },
            }),
        );
        self.out.write_json("checks.json", &Value::Object(doc))
    }

    fn monte_carlo(&mut self, solved: &Solved) -> Result<(), CliError> {
        let plan = self.plan;
        let cfg = &plan.config;
        let report = &solved.report;
        let rho = report.rho;
        let mc = &cfg.mc;
        let err = numerical("monte carlo");
        let optimal = Policy::Grid {
            grid: plan.grid.clone(),
            controls: report.policy.clone(),
        };

        let mut erg_cfg = SimConfig::new(plan.mc_x0.clone(), mc.horizon, mc.dt, mc.paths, cfg.seed);
        erg_cfg.burn_in = mc.burn_in;
        let erg = ergodic_cost_estimate(&plan.problem, &optimal, &erg_cfg).map_err(&err)?;
        let erg_gap = erg.mean - rho;

        // Finite horizon under the time-reversed minimizers of a VI run.
        let phi0 = self.initial_field(report);
        let vi_cfg = RunConfig {
            mode: Mode::Vi,
            rho: Some(rho),
            horizon: mc.fh_horizon,
            dt: cfg.dt,
            method: cfg.method,
            snapshot_every: if mc.fh_horizon > 0.0 { mc.fh_horizon } else { 1.0 },
            policy_every: Some(mc.dt),
        };
        let vi = run(&solved.scheme, &phi0, &vi_cfg, None).map_err(&err)?;
        let reversed = Policy::TimeReversed {
            grid: plan.grid.clone(),
            times: vi.policy_times.clone(),
            snapshots: vi.policies.clone(),
        };
        let sim = |seed_offset: u64| {
            SimConfig::new(
                plan.fh_x0.clone(),
                mc.fh_horizon,
                mc.dt,
                mc.paths,
                cfg.seed.wrapping_add(seed_offset),
            )
        };
        let fh = finite_horizon_value(&plan.problem, &reversed, &phi0, rho, &sim(1)).map_err(&err)?;
        let grid_value = vi.final_field().interpolate(&plan.fh_x0);
        let fh_gap = fh.mean - grid_value;

        let neg_v = report.value.map(|v| -v);
        let lower = terminal_expectation(&plan.problem, &reversed, &neg_v, &sim(2)).map_err(&err)?;
        let upper = terminal_expectation(&plan.problem, &optimal, &neg_v, &sim(3)).map_err(&err)?;
        let middle = grid_value - report.value.interpolate(&plan.fh_x0);

        // E[V*(X_t)] under the optimal policy against μ[V*] once mixed.
        let mix = SimConfig::new(plan.mc_x0.clone(), mc.burn_in, mc.dt, mc.paths, cfg.seed.wrapping_add(4));
        let stationary = terminal_expectation(&plan.problem, &optimal, &report.value, &mix).map_err(&err)?;
        let stat_gap = stationary.mean - report.mu_value_integral;

        let flagged = [&erg, &fh, &lower, &upper, &stationary].iter().any(|r| r.flagged);
        let doc = json!({
            "sigmas": MC_SIGMAS,
            "allowance": FH_ALLOWANCE,
            "seed": cfg.seed,
            "ergodic": {
                "x0": plan.mc_x0,
                "horizon": mc.horizon,
                "burn_in": mc.burn_in,
                "dt": mc.dt,
                "estimate": estimate_json(&erg),
                "rho": rho,
                "gap": erg_gap,
                "within_tolerance": erg_gap.abs() <= MC_SIGMAS * erg.std_error,
            },
            "finite_horizon": {
                "x0": plan.fh_x0,
                "horizon": mc.fh_horizon,
                "estimate": estimate_json(&fh),
                "grid_value": grid_value,
                "gap": fh_gap,
                "within_tolerance": fh_gap.abs() <= MC_SIGMAS * fh.std_error + FH_ALLOWANCE,
            },
            "sandwich": {
                "lower": estimate_json(&lower),
                "middle": middle,
                "upper": estimate_json(&upper),
                "holds": lower.mean <= middle + MC_SIGMAS * lower.std_error + FH_ALLOWANCE
                    && middle <= upper.mean + MC_SIGMAS * upper.std_error + FH_ALLOWANCE,
            },
            "stationary_expectation": {
                "horizon": mc.burn_in,
                "estimate": estimate_json(&stationary),
                "mu_value_integral": report.mu_value_integral,
                "gap": stat_gap,
                "within_tolerance": stat_gap.abs() <= MC_SIGMAS * stationary.std_error,
            },
            "clipping_flagged": flagged,
        });
        self.out.write_json("mc_report.json", &doc)?;
        self.note("mc_ergodic_mean", erg.mean);
        self.note("mc_ergodic_std_error", erg.std_error);
        self.note("mc_finite_horizon_gap", fh_gap);
        Ok(())
    }

    fn execute(&mut self) -> Result<(), CliError> {
        let mode = self.plan.config.mode;
        let solved = self.phase("solve", |r| r.solve())?;
        match mode {
            ExperimentMode::Pia => {}
            ExperimentMode::Vi | ExperimentMode::Rvi | ExperimentMode::RviMin => {
                let m = mode.evolution_mode().expect("evolution mode");
                let traj = self.phase("evolve", |r| r.evolve(&solved, m))?;
                let vi = match m {
                    Mode::Rvi => Some(self.phase("coupling", |r| r.coupling(&traj, solved.report.rho))?),
                    Mode::Vi => Some(traj.clone()),
                    Mode::RviMin => None,
                };
                self.phase("checks", |r| r.checks(&solved, &traj, vi.as_ref()))?;
            }
            ExperimentMode::McCheck => self.phase("monte carlo", |r| r.monte_carlo(&solved))?,
            ExperimentMode::Full => {
                let traj = self.phase("evolve", |r| r.evolve(&solved, Mode::Rvi))?;
                let vi = self.phase("coupling", |r| r.coupling(&traj, solved.report.rho))?;
                self.phase("monte carlo", |r| r.monte_carlo(&solved))?;
                self.phase("checks", |r| r.checks(&solved, &traj, Some(&vi)))?;
            }
        }
        Ok(())
    }
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn estimate_json(r: &EstimateReport) -> Value {
    json!({
        "mean": r.mean,
        "std_error": r.std_error,
        "n_paths": r.n_paths,
        "clipped": r.clipped,
        "flagged": r.flagged,
    })
}

/// Runs the phases of `plan` and writes the manifest last.
///
/// On a phase failure the manifest still lists the artifacts written so far
/// and records the failure; the error is returned after it is written.
pub fn run_experiment(plan: &Plan, command: &str) -> Result<RunManifest, CliError> {
    let mut runner = Runner {
        plan,
        exact: exact_solution(&plan.config.preset),
        out: OutputDir::create(&plan.config.out)?,
        timings: Vec::new(),
        summary: Map::new(),
    };
    let outcome = runner.execute();
    let failure = outcome.as_ref().err().map(|e| FailureRecord {
        phase: match e {
            CliError::Numerical { phase, .. } => phase.to_string(),
            _ => "output".to_string(),
        },
        message: e.to_string(),
    });
    let manifest = RunManifest {
        software: Software {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        command: command.to_string(),
        config: plan.config.clone(),
        status: if failure.is_some() { "failed" } else { "ok" }.into(),
        failure,
        timings: runner.timings,
        files: runner.out.files().to_vec(),
        summary: runner.summary,
    };
    runner.out.write_manifest(&manifest)?;
    outcome.map(|_| manifest)
}
