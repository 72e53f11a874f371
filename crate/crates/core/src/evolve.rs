//! Time marching of the value iteration
//!
//! ```text
//! ∂_t φ̄ = min_u [L^u φ̄ + r] - ρ
//! ```
//!
//! and the relative value iteration, where the known `ρ` is replaced by the
//! anchor value `φ(t, 0)` (or by `min_x φ(t, x)`), together with the exact
//! transformations between the two.

use serde::{Deserialize, Serialize};

use crate::diagnose::{DiagnosticContext, DiagnosticsRecord};
use crate::discretize::Scheme;
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, CsrMatrix, Solver};
use crate::model::Field;

/// `dt · max|diagonal|` used when no step is given.
pub const EXPLICIT_SAFETY: f64 = 0.9;

/// Runs are aborted once `max |φ|` exceeds this.
pub const BLOWUP_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vi,
    Rvi,
    RviMin,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(Mode::Vi),
            "rvi" => Ok(Mode::Rvi),
            "rvi-min" => Ok(Mode::RviMin),
            other => Err(Error::InvalidInput(format!("unknown evolution mode `{other}`"))),
        }
    }
}

/// What the RVI subtracts: the value at the origin or the field minimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorMode {
    Point,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Explicit,
    /// Backward Euler with the policy frozen at the start of each step.
    Implicit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Required for [`Mode::Vi`].
    pub rho: Option<f64>,
    pub horizon: f64,
    /// Defaults to the explicit stability bound.
    pub dt: Option<f64>,
    pub method: Method,
    pub snapshot_every: f64,
    /// Cadence of stored minimizer snapshots; `None` stores none.
    pub policy_every: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rvi,
            rho: None,
            horizon: 30.0,
            dt: None,
            method: Method::Explicit,
            snapshot_every: 0.5,
            policy_every: None,
        }
    }
}

/// Sampled solution of a VI or RVI run.
#[derive(Clone, Debug, Serialize)]
pub struct EvolutionTrajectory {
    pub mode: Mode,
    pub method: Method,
    pub dt: f64,
    pub steps: usize,
    pub rho: Option<f64>,
    pub times: Vec<f64>,
    pub snapshot_steps: Vec<usize>,
    #[serde(skip)]
    pub snapshots: Vec<Field>,
    /// `φ(t_k, 0)` at every step `k = 0..=steps`.
    #[serde(skip)]
    pub anchor_series: Vec<f64>,
    pub policy_times: Vec<f64>,
    /// Minimizer `v̂_t` at `policy_times`.
    #[serde(skip)]
    pub policies: Vec<Vec<usize>>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    /// `sup |φ0|`.
    pub initial_sup_norm: f64,
}

impl EvolutionTrajectory {
    pub fn step_time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.step_time(self.steps)
    }

    pub fn final_field(&self) -> &Field {
        self.snapshots.last().expect("trajectories hold at least the initial field")
    }

    /// Snapshot recorded at `time` (to within half a step).
    pub fn snapshot_at(&self, time: f64) -> Option<&Field> {
        self.times
            .iter()
            .position(|&t| (t - time).abs() <= 0.5 * self.dt)
            .map(|i| &self.snapshots[i])
    }
}

/// Largest explicit step that keeps the update monotone.
pub fn monotone_dt_bound(scheme: &Scheme) -> f64 {
    1.0 / scheme.max_exit_rate()
}

fn check_explicit_dt(scheme: &Scheme, dt: f64) -> Result<()> {
    let bound = monotone_dt_bound(scheme);
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, bound });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: "evolution update",
            index,
        }),
        None => Ok(()),
    }
}

/// Subtracted term of the update.
#[derive(Clone, Copy)]
enum Offset {
    Rho(f64),
    Anchor(AnchorMode),
}

impl Offset {
    fn eval(self, phi: &[f64], anchor: usize) -> f64 {
        match self {
            Offset::Rho(rho) => rho,
            Offset::Anchor(AnchorMode::Point) => phi[anchor],
            Offset::Anchor(AnchorMode::Min) => phi.iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

struct Stepper<'a> {
    scheme: &'a Scheme,
    offset: Offset,
    method: Method,
    dt: f64,
    value: Vec<f64>,
    argmin: Vec<usize>,
}

impl<'a> Stepper<'a> {
    fn new(scheme: &'a Scheme, offset: Offset, method: Method, dt: f64) -> Self {
        let n = scheme.grid().len();
        Self {
            scheme,
            offset,
            method,
            dt,
            value: vec![0.0; n],
            argmin: vec![0; n],
        }
    }

    /// Advances `phi` by one step; `self.argmin` holds the minimizer at the
    /// old field afterwards.
    fn step(&mut self, phi: &mut [f64]) -> Result<()> {
        let sub = self.offset.eval(phi, self.scheme.grid().anchor());
        self.scheme
            .min_hamiltonian_into(phi, &mut self.value, &mut self.argmin);
        match self.method {
            Method::Explicit => {
                for (p, h) in phi.iter_mut().zip(&self.value) {
                    *p += self.dt * (h - sub);
                }
            }
            Method::Implicit => {
                let g = self.scheme.policy_generator(&self.argmin);
                let n = phi.len();
                let rows = (0..n)
                    .map(|i| {
                        let mut row: Vec<(usize, f64)> =
                            g.rates(i).map(|(j, w)| (j, -self.dt * w)).collect();
                        row.push((i, 1.0 - self.dt * g.diagonal(i)));
                        row
                    })
                    .collect();
                let rhs: Vec<f64> = phi
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p + self.dt * (self.scheme.cost(i, self.argmin[i]) - sub))
                    .collect();
                let next = Solver::new(&CsrMatrix::from_rows(rows))?.solve(&rhs)?;
                phi.copy_from_slice(&next);
            }
        }
        check_finite(phi)
    }
}

/// One explicit VI step `φ̄ + dt (min_u [L^u φ̄ + r] - ρ)`, with the minimizer
/// used.
pub fn step_vi(scheme: &Scheme, phibar: &Field, rho: f64, dt: f64) -> Result<(Field, Vec<usize>)> {
    check_explicit_dt(scheme, dt)?;
    single_step(scheme, phibar, Offset::Rho(rho), dt)
}

/// One explicit RVI step, subtracting `φ(0)` or `min φ` per `anchor_mode`.
pub fn step_rvi(scheme: &Scheme, phi: &Field, dt: f64, anchor_mode: AnchorMode) -> Result<(Field, Vec<usize>)> {
    check_explicit_dt(scheme, dt)?;
    single_step(scheme, phi, Offset::Anchor(anchor_mode), dt)
}

fn single_step(scheme: &Scheme, phi: &Field, offset: Offset, dt: f64) -> Result<(Field, Vec<usize>)> {
    if phi.len() != scheme.grid().len() {
        return Err(Error::DimensionMismatch {
            expected: scheme.grid().len(),
            found: phi.len(),
        });
    }
    let mut stepper = Stepper::new(scheme, offset, Method::Explicit, dt);
    let mut values = phi.values().to_vec();
    stepper.step(&mut values)?;
    Ok((Field::new(phi.grid().clone(), values)?, stepper.argmin))
}

fn stride(every: f64, dt: f64) -> usize {
    ((every / dt).round() as usize).max(1)
}

/// Integrates the VI/RVI from `phi0` to `cfg.horizon`.
///
/// The step is `cfg.dt` (or the monotone bound times [`EXPLICIT_SAFETY`])
/// shrunk so that a whole number of steps lands on the horizon. Snapshots and
/// minimizers are stored at the requested cadences and always at the final
/// time; the anchor series is dense.
pub fn run(
    scheme: &Scheme,
    phi0: &Field,
    cfg: &RunConfig,
    diagnostics: Option<&DiagnosticContext<'_>>,
) -> Result<EvolutionTrajectory> {
    if !phi0.same_grid(&Field::constant(scheme.grid().clone(), 0.0)) {
        return Err(Error::DimensionMismatch {
            expected: scheme.grid().len(),
            found: phi0.len(),
        });
    }
    if !(cfg.horizon >= 0.0) || !cfg.horizon.is_finite() {
        return Err(Error::InvalidInput(format!("horizon {} must be finite and >= 0", cfg.horizon)));
    }
    if !(cfg.snapshot_every > 0.0) {
        return Err(Error::InvalidInput("snapshot cadence must be positive".into()));
    }
    let offset = match cfg.mode {
        Mode::Vi => Offset::Rho(cfg.rho.ok_or_else(|| {
            Error::InvalidInput("value iteration needs the optimal ergodic cost rho".into())
        })?),
        Mode::Rvi => Offset::Anchor(AnchorMode::Point),
        Mode::RviMin => Offset::Anchor(AnchorMode::Min),
    };
    let dt_max = cfg.dt.unwrap_or_else(|| scheme.stable_dt(EXPLICIT_SAFETY));
    if cfg.method == Method::Explicit {
        check_explicit_dt(scheme, dt_max)?;
    } else if !(dt_max > 0.0) {
        return Err(Error::InvalidInput(format!("time step {dt_max} must be positive")));
    }
    let steps = if cfg.horizon == 0.0 {
        0
    } else {
        (cfg.horizon / dt_max * (1.0 - 1e-12)).ceil() as usize
    };
    let dt = if steps == 0 { dt_max } else { cfg.horizon / steps as f64 };
    let snap_stride = stride(cfg.snapshot_every, dt);
    let policy_stride = cfg.policy_every.map(|e| stride(e, dt));
    let anchor = scheme.grid().anchor();
    let grid = scheme.grid().clone();

    let mut traj = EvolutionTrajectory {
        mode: cfg.mode,
        method: cfg.method,
        dt,
        steps,
        rho: cfg.rho,
        times: Vec::new(),
        snapshot_steps: Vec::new(),
        snapshots: Vec::new(),
        anchor_series: Vec::with_capacity(steps + 1),
        policy_times: Vec::new(),
        policies: Vec::new(),
        diagnostics: Vec::new(),
        initial_sup_norm: phi0.sup_norm(),
    };
    let record_snapshot = |traj: &mut EvolutionTrajectory, k: usize, phi: &[f64]| -> Result<()> {
        let field = Field::new(grid.clone(), phi.to_vec())?;
        let t = k as f64 * dt;
        if let Some(ctx) = diagnostics {
            traj.diagnostics.push(ctx.record(t, &field, cfg.mode)?);
        }
        traj.times.push(t);
        traj.snapshot_steps.push(k);
        traj.snapshots.push(field);
        Ok(())
    };

    let mut stepper = Stepper::new(scheme, offset, cfg.method, dt);
    let mut phi = phi0.values().to_vec();
    traj.anchor_series.push(phi[anchor]);
    for k in 0..steps {
        if k % snap_stride == 0 {
            record_snapshot(&mut traj, k, &phi)?;
        }
        stepper.step(&mut phi)?;
        if let Some(ps) = policy_stride {
            if k % ps == 0 {
                traj.policy_times.push(k as f64 * dt);
                traj.policies.push(stepper.argmin.clone());
            }
        }
        traj.anchor_series.push(phi[anchor]);
        let max_abs = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > BLOWUP_LIMIT {
            return Err(Error::Unstable {
                step: k + 1,
                time: (k + 1) as f64 * dt,
                max_abs,
                partial: Box::new(traj),
            });
        }
    }
    if traj.snapshot_steps.last() != Some(&steps) {
        record_snapshot(&mut traj, steps, &phi)?;
    }
    if policy_stride.is_some() {
        let n = phi.len();
        let mut value = vec![0.0; n];
        let mut argmin = vec![0; n];
        scheme.min_hamiltonian_into(&phi, &mut value, &mut argmin);
        traj.policy_times.push(steps as f64 * dt);
        traj.policies.push(argmin);
    }
    Ok(traj)
}

fn check_dense(traj: &EvolutionTrajectory) -> Result<()> {
    if traj.anchor_series.len() != traj.steps + 1 {
        return Err(Error::MissingAnchorSeries);
    }
    Ok(())
}

fn transformed(
    traj: &EvolutionTrajectory,
    mode: Mode,
    rho: f64,
    shift: &[f64],
) -> Result<EvolutionTrajectory> {
    let snapshots = traj
        .snapshots
        .iter()
        .zip(&traj.snapshot_steps)
        .map(|(f, &k)| f.shifted(shift[k]))
        .collect();
    let anchor_series = traj
        .anchor_series
        .iter()
        .zip(shift)
        .map(|(a, s)| a + s)
        .collect();
    Ok(EvolutionTrajectory {
        mode,
        method: traj.method,
        dt: traj.dt,
        steps: traj.steps,
        rho: Some(rho),
        times: traj.times.clone(),
        snapshot_steps: traj.snapshot_steps.clone(),
        snapshots,
        anchor_series,
        policy_times: traj.policy_times.clone(),
        policies: traj.policies.clone(),
        diagnostics: Vec::new(),
        initial_sup_norm: traj.initial_sup_norm,
    })
}

/// `φ̄(t,x) = φ(t,x) - ρt + ∫₀ᵗ φ(s,0) ds`, with the trapezoidal rule on the
/// dense anchor series.
pub fn vi_from_rvi(traj: &EvolutionTrajectory, rho: f64) -> Result<EvolutionTrajectory> {
    if traj.mode != Mode::Rvi {
        return Err(Error::InvalidInput(format!(
            "vi_from_rvi needs a point-anchored RVI trajectory, got {:?}",
            traj.mode
        )));
    }
    check_dense(traj)?;
    let a = &traj.anchor_series;
    let dt = traj.dt;
    let mut shift = Vec::with_capacity(a.len());
    let mut q = 0.0;
    shift.push(0.0);
    for k in 1..a.len() {
        q += 0.5 * dt * (a[k - 1] + a[k]);
        shift.push(q - rho * traj.step_time(k));
    }
    transformed(traj, Mode::Vi, rho, &shift)
}

/// `φ(t,x) = φ̄(t,x) - ∫₀ᵗ e^{s-t} φ̄(s,0) ds + ρ(1 - e^{-t})`.
///
/// The integral is carried by the recurrence
/// `I(t+dt) = e^{-dt} I(t) + ∫_t^{t+dt} e^{s-t-dt} φ̄(s,0) ds`, the increment
/// being exact for the piecewise-linear interpolant of the anchor series.
pub fn rvi_from_vi(traj: &EvolutionTrajectory, rho: f64) -> Result<EvolutionTrajectory> {
    if traj.mode != Mode::Vi {
        return Err(Error::InvalidInput(format!(
            "rvi_from_vi needs a VI trajectory, got {:?}",
            traj.mode
        )));
    }
    check_dense(traj)?;
    let a = &traj.anchor_series;
    let dt = traj.dt;
    let decay = (-dt).exp();
    let w0 = -(-dt).exp_m1();
    let w1 = (dt + (-dt).exp_m1()) / dt;
    let mut shift = Vec::with_capacity(a.len());
    let mut integral = 0.0;
    shift.push(0.0);
    for k in 1..a.len() {
        integral = decay * integral + a[k - 1] * w0 + (a[k] - a[k - 1]) * w1;
        let t = traj.step_time(k);
        shift.push(-integral - rho * (-t).exp_m1());
    }
    transformed(traj, Mode::Rvi, rho, &shift)
}

/// Spatial constancy of `f = φ - φ̄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CouplingResiduals {
    /// `max |f - mean f|`.
    pub ident_residual: f64,
    /// `mean f`.
    pub f_value: f64,
}

pub fn coupling_residuals(phi: &Field, phibar: &Field) -> Result<CouplingResiduals> {
    phi.check_same_grid(phibar)?;
    let diff: Vec<f64> = phi
        .values()
        .iter()
        .zip(phibar.values())
        .map(|(a, b)| a - b)
        .collect();
    let mean = pairwise_sum(&diff) / diff.len() as f64;
    let ident_residual = diff.iter().fold(0.0f64, |m, d| m.max((d - mean).abs()));
    Ok(CouplingResiduals {
        ident_residual,
        f_value: mean,
    })
}

/// Per-snapshot sup distance between two trajectories sampled at the same
/// steps.
pub fn snapshot_distances(a: &EvolutionTrajectory, b: &EvolutionTrajectory) -> Result<Vec<f64>> {
    if a.snapshot_steps != b.snapshot_steps {
        return Err(Error::InvalidInput("trajectories are sampled at different steps".into()));
    }
    a.snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(x, y)| {
            x.check_same_grid(y)?;
            Ok(x.values()
                .iter()
                .zip(y.values())
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs())))
        })
        .collect()
}
