//! Euler–Maruyama simulation of the controlled diffusion under Markov
//! policies read off the grid, and the Monte Carlo estimators built on it.
//!
//! Every path draws from its own ChaCha stream (`seed`, stream = path index),
//! so results do not depend on how paths are scheduled across threads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::model::{ControlProblem, Field, GridSpec};

/// Fraction of clipped paths above which an estimate is flagged.
pub const CLIP_FLAG_FRACTION: f64 = 0.01;

/// Largest allowed spacing of time-reversed policy snapshots, in units of
/// the simulation step.
pub const MAX_SNAPSHOT_GAP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Ergodic averages start here.
    pub burn_in: f64,
    /// Multiplies the noise; `0` gives the deterministic flow.
    pub noise_scale: f64,
    /// Truncation box; defaults to the policy grid box.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl SimConfig {
    pub fn new(x0: Vec<f64>, horizon: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            x0,
            horizon,
            dt,
            n_paths,
            seed,
            burn_in: 0.0,
            noise_scale: 1.0,
            bounds: None,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.x0.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.x0.len(),
            });
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt_sim {} must be positive", self.dt)));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidInput("n_paths must be at least 1".into()));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidInput(format!("horizon {} must be finite and >= 0", self.horizon)));
        }
        if !(self.burn_in >= 0.0) {
            return Err(Error::InvalidInput("burn-in must be >= 0".into()));
        }
        Ok(())
    }

    fn steps(&self) -> (usize, f64) {
        if self.horizon == 0.0 {
            return (0, self.dt);
        }
        let n = (self.horizon / self.dt * (1.0 - 1e-12)).ceil() as usize;
        (n, self.horizon / n as f64)
    }
}

/// Feedback law `x ↦ u`, writing into the slice.
pub type FeedbackFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Markov policy used by the simulator. Grid policies are evaluated at the
/// nearest node.
#[derive(Clone)]
pub enum Policy {
    /// Stationary policy given as control indices per node.
    Grid { grid: Arc<GridSpec>, controls: Vec<usize> },
    Feedback(Arc<FeedbackFn>),
    /// Minimizer snapshots `v̂_τ` of a VI run at `times`; at simulation time
    /// `s` with horizon `T` the control is taken from `v̂_{T-s}`.
    TimeReversed {
        grid: Arc<GridSpec>,
        times: Vec<f64>,
        snapshots: Vec<Vec<usize>>,
    },
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Grid { grid, .. } => write!(f, "Policy::Grid({} nodes)", grid.len()),
            Policy::Feedback(_) => write!(f, "Policy::Feedback"),
            Policy::TimeReversed { times, .. } => write!(f, "Policy::TimeReversed({} snapshots)", times.len()),
        }
    }
}

impl Policy {
    pub fn feedback(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Policy::Feedback(Arc::new(f))
    }

    fn grid(&self) -> Option<&Arc<GridSpec>> {
        match self {
            Policy::Grid { grid, .. } | Policy::TimeReversed { grid, .. } => Some(grid),
            Policy::Feedback(_) => None,
        }
    }

    fn validate(&self, problem: &ControlProblem) -> Result<()> {
        let check = |grid: &GridSpec, controls: &[usize]| -> Result<()> {
            if controls.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    found: controls.len(),
                });
            }
            if let Some(&bad) = controls.iter().find(|&&c| c >= problem.controls().len()) {
                return Err(Error::InvalidInput(format!("control index {bad} out of range")));
            }
            Ok(())
        };
        match self {
            Policy::Grid { grid, controls } => check(grid, controls),
            Policy::Feedback(_) => Ok(()),
            Policy::TimeReversed { grid, times, snapshots } => {
                if times.is_empty() || times.len() != snapshots.len() {
                    return Err(Error::InvalidInput("time-reversed policy needs one snapshot per time".into()));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidInput("policy snapshot times must increase".into()));
                }
                snapshots.iter().try_for_each(|s| check(grid, s))
            }
        }
    }

    /// Snapshots must cover `[0, horizon]` with gaps of at most
    /// `MAX_SNAPSHOT_GAP · dt`.
    fn check_coverage(&self, horizon: f64, dt: f64) -> Result<()> {
        if let Policy::TimeReversed { times, .. } = self {
            let limit = MAX_SNAPSHOT_GAP * dt;
            let mut gap = times[0];
            for w in times.windows(2) {
                if w[0] > horizon {
                    break;
                }
                gap = gap.max(w[1] - w[0]);
            }
            let last = times.last().copied().unwrap_or(0.0);
            if last < horizon {
                gap = gap.max(horizon - last);
            }
            if gap > limit * (1.0 + 1e-9) {
                return Err(Error::PolicyGap { gap, limit });
            }
        }
        Ok(())
    }

    /// Control at state `x` on the simulation step starting at `s`.
    fn control(&self, problem: &ControlProblem, x: &[f64], s: f64, horizon: f64, dt: f64, out: &mut [f64]) {
        let pick = |grid: &GridSpec, controls: &[usize], out: &mut [f64]| {
            out.copy_from_slice(problem.controls().get(controls[grid.nearest(x)]));
        };
        match self {
            Policy::Grid { grid, controls } => pick(grid, controls, out),
            Policy::Feedback(f) => f(x, out),
            Policy::TimeReversed { grid, times, snapshots } => {
                // The step [s, s+dt] matches the VI step from T-s-dt to T-s,
                // whose minimizer was taken at its left end.
                let tau = horizon - s - dt;
                let i = times
                    .partition_point(|&t| t <= tau + 1e-9 * dt)
                    .saturating_sub(1);
                pick(grid, &snapshots[i], out)
            }
        }
    }
}

/// One simulated path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Control applied on each step.
    pub controls: Vec<Vec<f64>>,
    pub clipped: bool,
}

/// Mean and standard error over paths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub clipped: usize,
    /// Set when more than [`CLIP_FLAG_FRACTION`] of paths were clipped.
    pub flagged: bool,
}

/// Mean as `x₀ + Σ(x - x₀)/n`, exact for constant data.
fn shifted_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    let dev: Vec<f64> = xs.iter().map(|x| x - x0).collect();
    x0 + pairwise_sum(&dev) / xs.len() as f64
}

impl EstimateReport {
    fn from_samples(samples: &[(f64, bool)]) -> Self {
        let n = samples.len();
        let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let clipped = samples.iter().filter(|s| s.1).count();
        let mean = shifted_mean(&values);
        let std_error = if n > 1 {
            let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
            (pairwise_sum(&sq) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            n_paths: n,
            clipped,
            flagged: clipped as f64 > CLIP_FLAG_FRACTION * n as f64,
        }
    }

    fn exact(value: f64, n_paths: usize) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
            n_paths,
            clipped: 0,
            flagged: false,
        }
    }
}

struct Engine<'a> {
    problem: &'a ControlProblem,
    policy: &'a Policy,
    cfg: &'a SimConfig,
    lower: Vec<f64>,
    upper: Vec<f64>,
    steps: usize,
    dt: f64,
}

impl<'a> Engine<'a> {
    fn new(problem: &'a ControlProblem, policy: &'a Policy, cfg: &'a SimConfig) -> Result<Self> {
        let d = problem.dim();
        cfg.validate(d)?;
        policy.validate(problem)?;
        if let Some(g) = policy.grid() {
            if g.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: g.dim(),
                });
            }
        }
        let (lower, upper) = match (&cfg.bounds, policy.grid()) {
            (Some((lo, hi)), _) => (lo.clone(), hi.clone()),
            (None, Some(g)) => (g.lower().to_vec(), g.upper().to_vec()),
            (None, None) => (vec![f64::NEG_INFINITY; d], vec![f64::INFINITY; d]),
        };
        let (steps, dt) = cfg.steps();
        policy.check_coverage(cfg.horizon, dt)?;
        Ok(Self {
            problem,
            policy,
            cfg,
            lower,
            upper,
            steps,
            dt,
        })
    }

    /// Runs path `index`, calling `visit(step, t, x, u)` before each step.
    /// Returns the final state and whether the path was clipped.
    fn run(&self, index: usize, mut visit: impl FnMut(usize, f64, &[f64], &[f64])) -> Result<(Vec<f64>, bool)> {
        let d = self.problem.dim();
        let dyns = self.problem.dynamics();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64);
        let sqdt = self.dt.sqrt() * self.cfg.noise_scale;
        let mut x = self.cfg.x0.clone();
        let mut u = vec![0.0; self.problem.controls().dim()];
        let mut b = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        let mut xi = vec![0.0; d];
        let mut clipped = false;
        for k in 0..self.steps {
            let t = k as f64 * self.dt;
            self.policy
                .control(self.problem, &x, t, self.cfg.horizon, self.dt, &mut u);
            visit(k, t, &x, &u);
            dyns.drift(&x, &u, &mut b);
            dyns.sigma(&x, &mut sigma);
            for z in xi.iter_mut() {
                *z = StandardNormal.sample(&mut rng);
            }
            for i in 0..d {
                let noise: f64 = (0..d).map(|j| sigma[i * d + j] * xi[j]).sum();
                let next = x[i] + b[i] * self.dt + sqdt * noise;
                if !next.is_finite() {
                    return Err(Error::NonFiniteState { path: index, step: k + 1 });
                }
                let c = next.clamp(self.lower[i], self.upper[i]);
                clipped |= c != next;
                x[i] = c;
            }
        }
        Ok((x, clipped))
    }

    fn estimate(&self, per_path: impl Fn(usize) -> Result<(f64, bool)> + Sync + Send) -> Result<EstimateReport> {
        let samples = (0..self.cfg.n_paths)
            .into_par_iter()
            .map(&per_path)
            .collect::<Result<Vec<_>>>()?;
        Ok(EstimateReport::from_samples(&samples))
    }
}

/// Simulates path `index` of the configuration.
pub fn simulate_path(problem: &ControlProblem, policy: &Policy, cfg: &SimConfig, index: usize) -> Result<SamplePath> {
    let engine = Engine::new(problem, policy, cfg)?;
    let mut path = SamplePath {
        times: Vec::with_capacity(engine.steps + 1),
        states: Vec::with_capacity(engine.steps + 1),
        controls: Vec::with_capacity(engine.steps),
        clipped: false,
    };
    let (last, clipped) = engine.run(index, |_, t, x, u| {
        path.times.push(t);
        path.states.push(x.to_vec());
        path.controls.push(u.to_vec());
    })?;
    path.times.push(engine.steps as f64 * engine.dt);
    path.states.push(last);
    path.clipped = clipped;
    Ok(path)
}

/// Time average of `r(X_s, U_s)` over `[burn_in, T]`, averaged over paths.
pub fn ergodic_cost_estimate(problem: &ControlProblem, policy: &Policy, cfg: &SimConfig) -> Result<EstimateReport> {
    let engine = Engine::new(problem, policy, cfg)?;
    let first = (cfg.burn_in / engine.dt).round() as usize;
    if first >= engine.steps {
        return Err(Error::InvalidInput(format!(
            "burn-in {} leaves nothing of horizon {}",
            cfg.burn_in, cfg.horizon
        )));
    }
    engine.estimate(|i| {
        let mut costs = Vec::with_capacity(engine.steps - first);
        let (_, clipped) = engine.run(i, |k, _, x, u| {
            if k >= first {
                costs.push(problem.cost(x, u));
            }
        })?;
        Ok((shifted_mean(&costs), clipped))
    })
}

/// `E[∫₀ᵀ (r(X_s, U_s) - ρ) ds + φ0(X_T)]` with `φ0` interpolated
/// multilinearly.
pub fn finite_horizon_value(
    problem: &ControlProblem,
    policy: &Policy,
    phi0: &Field,
    rho: f64,
    cfg: &SimConfig,
) -> Result<EstimateReport> {
    if cfg.horizon == 0.0 {
        cfg.validate(problem.dim())?;
        return Ok(EstimateReport::exact(phi0.interpolate(&cfg.x0), cfg.n_paths));
    }
    let engine = Engine::new(problem, policy, cfg)?;
    engine.estimate(|i| {
        let mut running = Vec::with_capacity(engine.steps);
        let (x, clipped) = engine.run(i, |_, _, x, u| running.push(problem.cost(x, u) - rho))?;
        Ok((engine.dt * pairwise_sum(&running) + phi0.interpolate(&x), clipped))
    })
}

/// `E[f(X_T)]` with `f` interpolated multilinearly.
pub fn terminal_expectation(problem: &ControlProblem, policy: &Policy, f: &Field, cfg: &SimConfig) -> Result<EstimateReport> {
    if cfg.horizon == 0.0 {
        cfg.validate(problem.dim())?;
        return Ok(EstimateReport::exact(f.interpolate(&cfg.x0), cfg.n_paths));
    }
    let engine = Engine::new(problem, policy, cfg)?;
    engine.estimate(|i| {
        let (x, clipped) = engine.run(i, |_, _, _, _| {})?;
        Ok((f.interpolate(&x), clipped))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, ControlSet};

    fn lqg() -> ControlProblem {
        preset("lqg1d").unwrap()
    }

    fn linear_feedback() -> Policy {
        Policy::feedback(|x, u| u[0] = -x[0])
    }

    #[test]
    fn deterministic_flow_decays_exponentially() {
        let mut cfg = SimConfig::new(vec![1.0], 1.0, 1e-4, 1, 0);
        cfg.noise_scale = 0.0;
        let path = simulate_path(&lqg(), &linear_feedback(), &cfg, 0).unwrap();
        let xt = path.states.last().unwrap()[0];
        assert!((xt - (-1.0f64).exp()).abs() < 1e-4);
        assert_eq!(path.times.len(), path.states.len());
    }

    #[test]
    fn same_seed_same_path() {
        let cfg = SimConfig::new(vec![0.5], 2.0, 0.01, 1, 99);
        let a = simulate_path(&lqg(), &linear_feedback(), &cfg, 3).unwrap();
        let b = simulate_path(&lqg(), &linear_feedback(), &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_path(&lqg(), &linear_feedback(), &cfg, 4).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn driftless_increments_are_centred() {
        let zero = Policy::feedback(|_, u| u[0] = 0.0);
        let x = Field::from_fn(Arc::new(GridSpec::cube(1, 50.0, 0.5).unwrap()), |x| x[0]);
        let cfg = SimConfig::new(vec![0.3], 1.0, 0.01, 10_000, 5);
        let est = terminal_expectation(&lqg(), &zero, &x, &cfg).unwrap();
        assert!((est.mean - 0.3).abs() <= 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn constant_cost_average_is_exact() {
        let p = ControlProblem::from_fns(
            "const",
            1,
            ControlSet::uniform(-1.0, 1.0, 3).unwrap(),
            |_, u, out| out[0] = u[0],
            |_, out| out[0] = 0.5,
            |_, _| 0.37,
        )
        .unwrap();
        let mut cfg = SimConfig::new(vec![0.0], 5.0, 0.01, 16, 1);
        cfg.burn_in = 1.0;
        let est = ergodic_cost_estimate(&p, &linear_feedback(), &cfg).unwrap();
        assert_eq!(est.mean, 0.37);
        assert_eq!(est.std_error, 0.0);

        let grid = Arc::new(GridSpec::cube(1, 3.0, 0.1).unwrap());
        let zero = Field::constant(grid, 0.0);
        let est = finite_horizon_value(&p, &linear_feedback(), &zero, 0.37, &cfg).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn zero_horizon_returns_initial_value() {
        let grid = Arc::new(GridSpec::cube(1, 3.0, 0.1).unwrap());
        let phi0 = Field::from_fn(grid, |x| x[0] * x[0]);
        let cfg = SimConfig::new(vec![0.7], 0.0, 0.01, 100, 1);
        let est = finite_horizon_value(&lqg(), &linear_feedback(), &phi0, 1.0, &cfg).unwrap();
        assert_eq!(est.mean, phi0.interpolate(&[0.7]));
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn sparse_snapshots_are_rejected() {
        let grid = Arc::new(GridSpec::cube(1, 3.0, 0.1).unwrap());
        let n = grid.len();
        let policy = Policy::TimeReversed {
            grid: grid.clone(),
            times: vec![0.0, 1.0],
            snapshots: vec![vec![0; n], vec![0; n]],
        };
        let cfg = SimConfig::new(vec![0.0], 1.0, 0.01, 1, 0);
        let phi0 = Field::constant(grid, 0.0);
        assert!(matches!(
            finite_horizon_value(&lqg(), &policy, &phi0, 1.0, &cfg),
            Err(Error::PolicyGap { .. })
        ));
    }

    #[test]
    fn clipping_is_counted_and_flagged() {
        let grid = Arc::new(GridSpec::cube(1, 0.2, 0.1).unwrap());
        let n = grid.len();
        let policy = Policy::Grid {
            grid: grid.clone(),
            controls: vec![lqg().controls().nearest(&[0.0]); n],
        };
        let cfg = SimConfig::new(vec![0.0], 1.0, 0.01, 50, 2);
        let est = terminal_expectation(&lqg(), &policy, &Field::constant(grid, 1.0), &cfg).unwrap();
        assert!(est.clipped > 0 && est.clipped <= est.n_paths);
        assert!(est.flagged);
    }
}
