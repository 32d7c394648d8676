//! Space-time lattice and spatial snapshots.

use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    DirichletZero,
}

/// Uniform grid on `[-L, L]` with `n_x` cells and `n_x + 1` nodes
/// `x_i = -L + iΔx`, time step `Δt` and horizon `T = n_steps Δt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    l: f64,
    n_x: usize,
    dt: f64,
    horizon: f64,
    n_steps: usize,
    pub boundary: Boundary,
    pub clamp_negative: bool,
    /// Skip the `L >= support + 6√T` domain check.
    pub allow_narrow_domain: bool,
}

/// Time-step fraction of the stability limit used by [`GridConfig::auto`].
pub const AUTO_DT_FRACTION: f64 = 0.25;

impl GridConfig {
    /// Validates `Δt <= Δx²/2` and that `T/Δt` is an integer (to relative `1e-9`).
    pub fn new(l: f64, n_x: usize, dt: f64, horizon: f64) -> Result<Self> {
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::config(format!(
                "half-width L must be positive, got {l}"
            )));
        }
        if n_x < 2 {
            return Err(Error::config(format!(
                "need at least 2 cells, got n_x = {n_x}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::config(format!(
                "time step must be positive, got {dt}"
            )));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config(format!(
                "horizon T must be positive, got {horizon}"
            )));
        }
        let dx = 2.0 * l / n_x as f64;
        let limit = 0.5 * dx * dx;
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "unstable grid: dt = {dt:e} exceeds dx^2/2 = {limit:e}"
            )));
        }
        let ratio = horizon / dt;
        let n_steps = ratio.round();
        if (ratio - n_steps).abs() > 1e-9 * ratio.max(1.0) || n_steps < 1.0 {
            return Err(Error::config(format!(
                "T = {horizon} is not an integer multiple of dt = {dt}"
            )));
        }
        Ok(GridConfig {
            l,
            n_x,
            dt,
            horizon,
            n_steps: n_steps as usize,
            boundary: Boundary::DirichletZero,
            clamp_negative: false,
            allow_narrow_domain: false,
        })
    }

    /// Largest step `T/N <= Δx²/4` that divides `T`.
    pub fn auto(l: f64, n_x: usize, horizon: f64) -> Result<Self> {
        if !(l > 0.0 && n_x >= 2 && horizon > 0.0) {
            return Self::new(l, n_x, 1.0, horizon);
        }
        let dx = 2.0 * l / n_x as f64;
        let target = AUTO_DT_FRACTION * dx * dx;
        let n = (horizon / target).ceil().max(1.0);
        Self::new(l, n_x, horizon / n, horizon)
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_nodes(&self) -> usize {
        self.n_x + 1
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.l / self.n_x as f64
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.l + i as f64 * self.dx()
    }

    pub fn t(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.x(i)).collect()
    }

    /// Index of the node at `x`, if `x` is a node up to `1e-9 Δx`.
    pub fn node_at(&self, x: f64) -> Option<usize> {
        let pos = (x + self.l) / self.dx();
        let i = pos.round();
        if (pos - i).abs() <= 1e-9 && i >= 0.0 && i <= self.n_x as f64 {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Step index of time `t`, if `t` is a step multiple up to `1e-9 Δt`.
    pub fn step_at(&self, t: f64) -> Option<usize> {
        let pos = t / self.dt;
        let n = pos.round();
        if (pos - n).abs() <= 1e-9 * pos.max(1.0) && n >= 0.0 && n <= self.n_steps as f64 {
            Some(n as usize)
        } else {
            None
        }
    }

    /// Nodes with `lo <= x_i <= hi` (endpoints included up to rounding).
    pub fn nodes_in(&self, lo: f64, hi: f64) -> std::ops::RangeInclusive<usize> {
        let dx = self.dx();
        let first = (((lo + self.l) / dx) - 1e-9).ceil().max(0.0) as usize;
        let last = ((((hi + self.l) / dx) + 1e-9).floor().min(self.n_x as f64)).max(-1.0);
        if last < 0.0 {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        first..=last as usize
    }

    /// Rejects initial data whose support reaches within `6√T` of the boundary.
    pub fn check_domain(&self, u0: &Field) -> Result<()> {
        if self.allow_narrow_domain {
            return Ok(());
        }
        if let Some(w) = u0.support_half_width(self) {
            let need = w + 6.0 * self.horizon.sqrt();
            if self.l < need * (1.0 - 1e-12) {
                return Err(Error::config(format!(
                    "domain half-width L = {} is smaller than support + 6*sqrt(T) = {need}; enlarge L or allow a narrow domain",
                    self.l
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("grid_L".into(), kv::fmt_exact(self.l)),
            ("grid_nx".into(), self.n_x.to_string()),
            ("dt".into(), kv::fmt_exact(self.dt)),
            ("T".into(), kv::fmt_exact(self.horizon)),
            ("boundary".into(), "dirichlet_zero".into()),
            ("clamp_negative".into(), self.clamp_negative.to_string()),
        ]
    }
}

/// One snapshot `u(t, ·)` on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub t: f64,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: &GridConfig, t: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::config(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "field value at node {i} is not finite"
            )));
        }
        Ok(Field { t, values })
    }

    pub fn zeros(grid: &GridConfig) -> Self {
        Field {
            t: 0.0,
            values: vec![0.0; grid.n_nodes()],
        }
    }

    /// Samples `f` at the nodes; boundary nodes are set to zero.
    pub fn from_fn(grid: &GridConfig, f: impl Fn(f64) -> f64) -> Self {
        let n = grid.n_nodes();
        let values = (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    0.0
                } else {
                    f(grid.x(i))
                }
            })
            .collect();
        Field { t: 0.0, values }
    }

    /// `h·1_{[a, b]}` with value `h/2` on nodes that sit exactly on a jump.
    pub fn indicator(grid: &GridConfig, a: f64, b: f64, h: f64) -> Self {
        let tol = 1e-9 * grid.dx();
        Field::from_fn(grid, |x| {
            if (x - a).abs() <= tol || (x - b).abs() <= tol {
                0.5 * h
            } else if x > a && x < b {
                h
            } else {
                0.0
            }
        })
    }

    /// Discrete delta of unit mass at the node nearest `x0`.
    pub fn delta(grid: &GridConfig, x0: f64) -> Self {
        let mut f = Field::zeros(grid);
        let i = (((x0 + grid.l()) / grid.dx()).round() as usize).clamp(1, grid.n_x() - 1);
        f.values[i] = 1.0 / grid.dx();
        f
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `Σ u_i Δx`.
    pub fn mass(&self, grid: &GridConfig) -> f64 {
        self.values.iter().sum::<f64>() * grid.dx()
    }

    /// Largest `|x_i|` over nonzero nodes.
    pub fn support_half_width(&self, grid: &GridConfig) -> Option<f64> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| grid.x(i).abs())
            .fold(None, |acc: Option<f64>, x| {
                Some(acc.map_or(x, |a| a.max(x)))
            })
    }
}
