//! Control problems, truncation grids and grid functions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of a controlled diffusion `dX = b(X,U) dt + σ(X) dW` with
/// running cost `r(X,U)`.
///
/// `diffusion` fills the symmetric matrix `a = ½ σσᵀ` in row-major order.
pub trait Dynamics: Send + Sync {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    fn cost(&self, x: &[f64], u: &[f64]) -> f64;

    /// Noise matrix with `σσᵀ = 2a`. The default takes the symmetric square
    /// root of `2a`.
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut a = [0.0; 4];
        self.diffusion(x, &mut a[..d * d]);
        match d {
            1 => out[0] = (2.0 * a[0]).sqrt(),
            2 => {
                let (m11, m12, m22) = (2.0 * a[0], 2.0 * a[1], 2.0 * a[3]);
                let s = (m11 * m22 - m12 * m12).max(0.0).sqrt();
                let t = (m11 + m22 + 2.0 * s).sqrt();
                out[0] = (m11 + s) / t;
                out[1] = m12 / t;
                out[2] = m12 / t;
                out[3] = (m22 + s) / t;
            }
            _ => unreachable!("dimension is validated to be 1 or 2"),
        }
    }
}

/// Finite, ordered discretization of the compact control space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    dim: usize,
    values: Vec<f64>,
}

impl ControlSet {
    /// `values` holds `dim` coordinates per control point.
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::InvalidProblem(
                "control set must be nonempty with a whole number of points".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("control values must be finite".into()));
        }
        let set = Self { dim, values };
        for i in 0..set.len() {
            for j in 0..i {
                if set.get(i) == set.get(j) {
                    return Err(Error::InvalidProblem(format!(
                        "duplicate control value {:?}",
                        set.get(i)
                    )));
                }
            }
        }
        Ok(set)
    }

    /// `count` evenly spaced points on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !(hi >= lo) || (count > 1 && hi == lo) {
            return Err(Error::InvalidProblem(format!(
                "cannot discretize [{lo}, {hi}] with {count} points"
            )));
        }
        let values = if count == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect()
        };
        Self::new(1, values)
    }

    /// Cartesian product of `count` points per axis on `[lo, hi]^dim`, first
    /// axis fastest.
    pub fn uniform_box(dim: usize, lo: f64, hi: f64, count: usize) -> Result<Self> {
        let axis = Self::uniform(lo, hi, count)?.values;
        let total = count.pow(dim as u32);
        let mut values = Vec::with_capacity(total * dim);
        for flat in 0..total {
            let mut rest = flat;
            for _ in 0..dim {
                values.push(axis[rest % count]);
                rest /= count;
            }
        }
        Self::new(dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Index of the control closest (Euclidean) to `u`; first wins on ties.
    pub fn nearest(&self, u: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.iter().enumerate() {
            let d: f64 = c.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// A controlled diffusion together with its running cost and control set.
#[derive(Clone)]
pub struct ControlProblem {
    pub name: String,
    dim: usize,
    controls: ControlSet,
    dynamics: Arc<dyn Dynamics>,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("controls", &self.controls.len())
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        controls: ControlSet,
        dynamics: Arc<dyn Dynamics>,
    ) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidProblem(format!("dimension {dim} not in {{1, 2}}")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            controls,
            dynamics,
        })
    }

    /// Builds a problem from closures; mostly useful for tests and one-off
    /// models.
    pub fn from_fns<B, A, R>(
        name: impl Into<String>,
        dim: usize,
        controls: ControlSet,
        drift: B,
        diffusion: A,
        cost: R,
    ) -> Result<Self>
    where
        B: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        A: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        R: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        let dynamics = FnDynamics {
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            cost: Box::new(cost),
        };
        Self::new(name, dim, controls, Arc::new(dynamics))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn controls(&self) -> &ControlSet {
        &self.controls
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn dynamics_arc(&self) -> Arc<dyn Dynamics> {
        self.dynamics.clone()
    }

    pub fn drift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.dynamics.drift(x, u, &mut out);
        out
    }

    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.dynamics.diffusion(x, &mut out);
        out
    }

    pub fn cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.dynamics.cost(x, u)
    }

    /// `min_u r(x, u)` over the control set.
    pub fn min_cost(&self, x: &[f64]) -> f64 {
        self.controls
            .iter()
            .map(|u| self.cost(x, u))
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks the standing assumptions at every node of `grid`: finite
    /// coefficients, nonnegative cost and positive definite `a`.
    pub fn validate_on(&self, grid: &GridSpec) -> Result<()> {
        if grid.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: grid.dim(),
            });
        }
        let d = self.dim;
        let mut x = vec![0.0; d];
        let mut b = vec![0.0; d];
        let mut a = vec![0.0; d * d];
        for node in 0..grid.len() {
            grid.point(node, &mut x);
            self.dynamics.diffusion(&x, &mut a);
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidProblem(format!("non-finite diffusion at node {node}")));
            }
            if !is_positive_definite(&a, d) {
                return Err(Error::InvalidProblem(format!(
                    "diffusion matrix not symmetric positive definite at node {node}"
                )));
            }
            for u in self.controls.iter() {
                self.dynamics.drift(&x, u, &mut b);
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidProblem(format!("non-finite drift at node {node}")));
                }
                let r = self.dynamics.cost(&x, u);
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::InvalidProblem(format!(
                        "running cost {r} at node {node} is not a finite nonnegative number"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn is_positive_definite(a: &[f64], d: usize) -> bool {
    match d {
        1 => a[0] > 0.0,
        2 => a[1] == a[2] && a[0] > 0.0 && a[0] * a[3] - a[1] * a[2] > 0.0,
        _ => false,
    }
}

type DriftFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
type DiffusionFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type CostFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

struct FnDynamics {
    drift: DriftFn,
    diffusion: DiffusionFn,
    cost: CostFn,
}

impl Dynamics for FnDynamics {
    fn drift(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(x, u, out)
    }

    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    fn cost(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.cost)(x, u)
    }
}

// ---------------------------------------------------------------------------
// Presets

pub const PRESET_NAMES: [&str; 4] = ["lqg1d", "lqg2d", "bounded-drift-1d", "doublewell-1d"];

/// Knobs shared by the preset catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    /// Half width of the control interval `[-u_max, u_max]` (ignored by
    /// `bounded-drift-1d`, whose controls live in `[-1, 1]`).
    pub u_max: f64,
    /// Points per control axis.
    pub control_count: usize,
}

impl PresetOptions {
    pub fn for_preset(name: &str) -> Self {
        let control_count = if name == "lqg2d" { 11 } else { 41 };
        Self {
            u_max: 4.0,
            control_count,
        }
    }
}

/// Unit-noise models with control entering additively: `dX = u dt + dW`.
#[derive(Clone, Copy, Debug)]
enum PresetKind {
    Lqg,
    BoundedDrift,
    DoubleWell,
}

struct PresetDynamics {
    kind: PresetKind,
}

impl Dynamics for PresetDynamics {
    fn drift(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
    }

    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = if i == j { 0.5 } else { 0.0 };
            }
        }
    }

    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
    }

    fn cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let u2: f64 = u.iter().map(|v| v * v).sum();
        match self.kind {
            PresetKind::Lqg => x.iter().map(|v| v * v).sum::<f64>() + u2,
            PresetKind::BoundedDrift => x.iter().map(|v| v * v).sum(),
            PresetKind::DoubleWell => {
                let w = x[0] * x[0] - 1.0;
                w * w + u2
            }
        }
    }
}

/// Built-in problem by name with default options.
pub fn preset(name: &str) -> Result<ControlProblem> {
    preset_with(name, &PresetOptions::for_preset(name))
}

pub fn preset_with(name: &str, opts: &PresetOptions) -> Result<ControlProblem> {
    let (dim, kind, controls) = match name {
        "lqg1d" => (1, PresetKind::Lqg, ControlSet::uniform(-opts.u_max, opts.u_max, opts.control_count)?),
        "lqg2d" => (
            2,
            PresetKind::Lqg,
            ControlSet::uniform_box(2, -opts.u_max, opts.u_max, opts.control_count)?,
        ),
        "bounded-drift-1d" => (1, PresetKind::BoundedDrift, ControlSet::uniform(-1.0, 1.0, opts.control_count)?),
        "doublewell-1d" => (
            1,
            PresetKind::DoubleWell,
            ControlSet::uniform(-opts.u_max, opts.u_max, opts.control_count)?,
        ),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    ControlProblem::new(name, dim, controls, Arc::new(PresetDynamics { kind }))
}

/// Exact solution of the LQG presets with an unconstrained control:
/// `V(x) = |x|²`, `ρ = d`, `u*(x) = -x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactSolution {
    pub dim: usize,
    pub rho: f64,
}

impl ExactSolution {
    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    /// `V(x) - V(0) + ρ`.
    pub fn rvi_limit(&self, x: &[f64]) -> f64 {
        self.value(x) + self.rho
    }
}

pub fn exact_solution(name: &str) -> Option<ExactSolution> {
    match name {
        "lqg1d" => Some(ExactSolution { dim: 1, rho: 1.0 }),
        "lqg2d" => Some(ExactSolution { dim: 2, rho: 2.0 }),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Grid

/// Rectangular truncation of `R^d` with uniform spacing per axis. Nodes are
/// numbered with the first axis varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridDef", into = "GridDef")]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    n: Vec<usize>,
    h: Vec<f64>,
    strides: Vec<usize>,
    anchor_index: Vec<usize>,
    anchor: usize,
}

#[derive(Serialize, Deserialize)]
struct GridDef {
    lower: Vec<f64>,
    upper: Vec<f64>,
    n: Vec<usize>,
}

impl TryFrom<GridDef> for GridSpec {
    type Error = Error;

    fn try_from(def: GridDef) -> Result<Self> {
        GridSpec::new(def.lower, def.upper, def.n)
    }
}

impl From<GridSpec> for GridDef {
    fn from(g: GridSpec) -> Self {
        GridDef {
            lower: g.lower,
            upper: g.upper,
            n: g.n,
        }
    }
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if !(1..=2).contains(&d) || upper.len() != d || n.len() != d {
            return Err(Error::InvalidGrid("need 1 or 2 axes with matching bounds".into()));
        }
        let mut h = Vec::with_capacity(d);
        let mut anchor_index = Vec::with_capacity(d);
        for k in 0..d {
            let (lo, hi, nk) = (lower[k], upper[k], n[k]);
            if nk < 3 {
                return Err(Error::InvalidGrid(format!("axis {k} has {nk} < 3 nodes")));
            }
            if !(lo < 0.0 && hi > 0.0) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "axis {k} bounds [{lo}, {hi}] must strictly contain the origin"
                )));
            }
            let hk = (hi - lo) / (nk - 1) as f64;
            let pos = -lo / hk;
            let idx = pos.round();
            if (pos - idx).abs() > 1e-9 {
                return Err(Error::InvalidGrid(format!(
                    "origin is not a node on axis {k} (offset {pos})"
                )));
            }
            h.push(hk);
            anchor_index.push(idx as usize);
        }
        let mut strides = Vec::with_capacity(d);
        let mut s = 1;
        for &nk in &n {
            strides.push(s);
            s *= nk;
        }
        let anchor = anchor_index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        Ok(Self {
            lower,
            upper,
            n,
            h,
            strides,
            anchor_index,
            anchor,
        })
    }

    /// The box `[-half_width, half_width]^dim` with spacing `h`.
    pub fn cube(dim: usize, half_width: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !(half_width > 0.0) {
            return Err(Error::InvalidGrid(format!("bad cube half width {half_width} / spacing {h}")));
        }
        let cells = 2.0 * half_width / h;
        let m = cells.round();
        if (cells - m).abs() > 1e-6 || !(m as usize).is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "spacing {h} does not put the origin on a node of [-{half_width}, {half_width}]"
            )));
        }
        let n = m as usize + 1;
        Self::new(vec![-half_width; dim], vec![half_width; dim], vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.n
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.h[axis]
    }

    pub fn spacings(&self) -> &[f64] {
        &self.h
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Flat index of the node at `x = 0`.
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.strides[axis]) % self.n[axis]
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Coordinate along `axis` of the `i`-th node on that axis. The origin
    /// node is exactly zero.
    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.anchor_index[axis] {
            return 0.0;
        }
        let t = i as f64 / (self.n[axis] - 1) as f64;
        self.lower[axis] + (self.upper[axis] - self.lower[axis]) * t
    }

    pub fn coord(&self, node: usize, axis: usize) -> f64 {
        self.axis_coord(axis, self.axis_index(node, axis))
    }

    pub fn point(&self, node: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.coord(node, k);
        }
    }

    pub fn point_vec(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.point(node, &mut x);
        x
    }

    /// Neighbor one step along `axis` (`forward` or backward), if inside.
    pub fn neighbor(&self, node: usize, axis: usize, forward: bool) -> Option<usize> {
        let i = self.axis_index(node, axis);
        if forward {
            (i + 1 < self.n[axis]).then(|| node + self.strides[axis])
        } else {
            (i > 0).then(|| node - self.strides[axis])
        }
    }

    /// Neighbor displaced by `offsets[k] ∈ {-1, 0, 1}` on each axis.
    pub fn offset(&self, node: usize, offsets: &[i32]) -> Option<usize> {
        let mut out = node as isize;
        for (k, &o) in offsets.iter().enumerate() {
            let i = self.axis_index(node, k) as isize + o as isize;
            if i < 0 || i >= self.n[k] as isize {
                return None;
            }
            out += o as isize * self.strides[k] as isize;
        }
        Some(out as usize)
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        (0..self.dim()).any(|k| {
            let i = self.axis_index(node, k);
            i == 0 || i + 1 == self.n[k]
        })
    }

    /// Nearest node to `x`, clamping to the box.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for k in 0..self.dim() {
            let pos = ((x[k] - self.lower[k]) / self.h[k]).round();
            let i = pos.clamp(0.0, (self.n[k] - 1) as f64) as usize;
            node += i * self.strides[k];
        }
        node
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lower[k] && v <= self.upper[k])
    }

    /// Nodes with `|x|_∞ ≤ radius` (with a relative slack of 1e-9 cells).
    pub fn nodes_within(&self, radius: f64) -> Vec<usize> {
        let slack = 1e-9 * self.h.iter().cloned().fold(f64::INFINITY, f64::min);
        (0..self.len())
            .filter(|&node| (0..self.dim()).all(|k| self.coord(node, k).abs() <= radius + slack))
            .collect()
    }

    /// Multilinear interpolation of nodal `values` at `x` (clamped to the box).
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for k in 0..d {
            let pos = ((x[k] - self.lower[k]) / self.h[k]).clamp(0.0, (self.n[k] - 1) as f64);
            let i = (pos.floor() as usize).min(self.n[k] - 2);
            base[k] = i;
            frac[k] = pos - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = 0;
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                w *= if up { frac[k] } else { 1.0 - frac[k] };
                node += (base[k] + up as usize) * self.strides[k];
            }
            if w != 0.0 {
                acc += w * values[node];
            }
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Field

/// A real function sampled at every node of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "field",
                index,
            });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<GridSpec>, c: f64) -> Self {
        let values = vec![c; grid.len()];
        Self { grid, values }
    }

    pub fn from_fn(grid: Arc<GridSpec>, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|node| {
                grid.point(node, &mut x);
                f(&x)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn anchor_value(&self) -> f64 {
        self.values[self.grid.anchor()]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn shifted(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub(crate) fn check_same_grid(&self, other: &Field) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.len(),
                found: other.len(),
            })
        }
    }

    /// Interpolated value at an arbitrary point of the box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }
}

// ---------------------------------------------------------------------------
// Near-monotone level set

/// Grid version of `{x : min_u r(x,u) ≤ ρ}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelSet {
    pub nodes: Vec<usize>,
    /// True when no node of the set touches the truncation boundary.
    pub interior: bool,
    /// `min` over the complement of `min_u r - ρ`; `None` if the complement
    /// is empty.
    pub margin: Option<f64>,
    /// Smallest grid box containing the set, as (lower, upper) corners.
    pub bounding_box: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn near_monotone_level_set(problem: &ControlProblem, rho: f64, grid: &GridSpec) -> LevelSet {
    let d = grid.dim();
    let mut x = vec![0.0; d];
    let mut nodes = Vec::new();
    let mut margin: Option<f64> = None;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for node in 0..grid.len() {
        grid.point(node, &mut x);
        let m = problem.min_cost(&x);
        if m <= rho {
            nodes.push(node);
            for k in 0..d {
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        } else {
            let gap = m - rho;
            margin = Some(margin.map_or(gap, |g| g.min(gap)));
        }
    }
    let interior = nodes.iter().all(|&n| !grid.is_boundary(n));
    let bounding_box = (!nodes.is_empty()).then_some((lo, hi));
    LevelSet {
        nodes,
        interior,
        margin,
        bounding_box,
    }
}
