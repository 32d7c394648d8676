//! Observables of single runs and ensembles.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::grid::{Field, GridConfig};
use crate::kv;
use crate::noise::unit_f64;
use crate::spde::Trajectory;

/// Default relative threshold for the stochastic support radius.
pub const DEFAULT_THETA_REL: f64 = 1e-10;

/// `(x_first − Δx/2, x_last + Δx/2)` over nodes with `u > threshold`, or `None`.
pub fn support_radius(field: &Field, grid: &GridConfig, threshold: f64) -> Option<(f64, f64)> {
    let first = field.values.iter().position(|v| *v > threshold)?;
    let last = field.values.iter().rposition(|v| *v > threshold)?;
    Some((
        grid.x(first) - 0.5 * grid.dx(),
        grid.x(last) + 0.5 * grid.dx(),
    ))
}

/// [`support_radius`] at `θ_rel · max(u0)`.
pub fn support_radius_rel(
    field: &Field,
    grid: &GridConfig,
    u0_max: f64,
    theta_rel: f64,
) -> Result<Option<(f64, f64)>> {
    if !(theta_rel > 0.0 && theta_rel < 1.0) {
        return Err(Error::precondition(format!(
            "theta_rel must lie in (0, 1), got {theta_rel}"
        )));
    }
    Ok(support_radius(field, grid, theta_rel * u0_max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowMin {
    pub min_value: f64,
    pub event: bool,
}

/// Minimum of `u` over stored snapshots with `t ∈ [t0, t1]` and nodes with `x ∈ [x0, x1]`.
pub fn positivity_window_min(
    traj: &Trajectory,
    time: (f64, f64),
    space: (f64, f64),
    theta_pos: f64,
) -> Result<WindowMin> {
    let nodes = traj.grid.nodes_in(space.0, space.1);
    let tol = 1e-9 * traj.grid.dt();
    let mut min = f64::INFINITY;
    let mut seen = false;
    for f in traj
        .snapshots
        .iter()
        .filter(|f| f.t >= time.0 - tol && f.t <= time.1 + tol)
    {
        for i in nodes.clone() {
            seen = true;
            min = min.min(f.values[i]);
        }
    }
    if !seen {
        return Err(Error::precondition(format!(
            "window [{}, {}] x [{}, {}] contains no stored lattice point",
            time.0, time.1, space.0, space.1
        )));
    }
    Ok(WindowMin {
        min_value: min,
        event: min > theta_pos,
    })
}

/// `Ψ_a(x) = 1/cosh(a|x|)`.
pub fn psi(a: f64, x: f64) -> f64 {
    1.0 / (a * x.abs()).cosh()
}

/// `max_i Ψ_a(x_i)|u_i|`.
pub fn weighted_sup(field: &Field, grid: &GridConfig, a: f64) -> f64 {
    field
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| psi(a, grid.x(i)) * v.abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderReport {
    pub sup: f64,
    /// Largest quotient over pairs at equal times.
    pub space_quotient: f64,
    /// Largest quotient over pairs at equal nodes.
    pub time_quotient: f64,
    /// Largest quotient over all examined pairs, including mixed ones.
    pub quotient: f64,
    /// `sup + quotient`.
    pub norm: f64,
    pub pairs: usize,
}

pub const MAX_HOLDER_PAIRS: usize = 100_000;

/// Weighted parabolic Hölder norm of `Ψ_a u` over stored snapshots, with quotient
/// `|v(s,y) − v(s',y')| / (|y − y'|^{1/2} + |s − s'|^{1/4})^{2γ}`.
///
/// All neighbouring pairs in space and in time are examined, plus
/// `min(samples, 10^5)` random pairs drawn with `seed`.
pub fn holder_norm(
    traj: &Trajectory,
    a: f64,
    gamma: f64,
    samples: usize,
    seed: u64,
) -> Result<HolderReport> {
    if !(a > 0.0) {
        return Err(Error::precondition(format!(
            "weight parameter a must be positive, got {a}"
        )));
    }
    if !(gamma > 0.0 && gamma < 0.25) {
        return Err(Error::precondition(format!(
            "Holder exponent must lie in (0, 1/4), got {gamma}"
        )));
    }
    if traj.snapshots.len() < 2 {
        return Err(Error::precondition(
            "Holder norm needs at least two snapshots",
        ));
    }
    let grid = &traj.grid;
    let weights: Vec<f64> = (0..grid.n_nodes()).map(|i| psi(a, grid.x(i))).collect();
    let v = |k: usize, i: usize| weights[i] * traj.snapshots[k].values[i];
    let q = |k1: usize, i1: usize, k2: usize, i2: usize| {
        let dy = (grid.x(i1) - grid.x(i2)).abs();
        let ds = (traj.snapshots[k1].t - traj.snapshots[k2].t).abs();
        let dist = (dy.sqrt() + ds.powf(0.25)).powf(2.0 * gamma);
        if dist == 0.0 {
            0.0
        } else {
            (v(k1, i1) - v(k2, i2)).abs() / dist
        }
    };
    let n_t = traj.snapshots.len();
    let n_x = grid.n_nodes();
    let mut sup = 0.0f64;
    let mut space = 0.0f64;
    let mut time = 0.0f64;
    let mut pairs = 0;
    for k in 0..n_t {
        for i in 0..n_x {
            sup = sup.max(v(k, i).abs());
            if i + 1 < n_x {
                space = space.max(q(k, i, k, i + 1));
                pairs += 1;
            }
            if k + 1 < n_t {
                time = time.max(q(k, i, k + 1, i));
                pairs += 1;
            }
        }
    }
    let mut quotient = space.max(time);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, n: usize| ((unit_f64(rng) * n as f64) as usize).min(n - 1);
    for _ in 0..samples.min(MAX_HOLDER_PAIRS) {
        let (k1, i1, k2, i2) = (
            pick(&mut rng, n_t),
            pick(&mut rng, n_x),
            pick(&mut rng, n_t),
            pick(&mut rng, n_x),
        );
        let val = q(k1, i1, k2, i2);
        if k1 == k2 {
            space = space.max(val);
        }
        if i1 == i2 {
            time = time.max(val);
        }
        quotient = quotient.max(val);
        pairs += 1;
    }
    Ok(HolderReport {
        sup,
        space_quotient: space,
        time_quotient: time,
        quotient,
        norm: sup + quotient,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryIntegral {
    /// `∫_0^T u(s, R) ds`
    pub u_integral: f64,
    /// `∫_0^T σ(u(s, R)) ds`
    pub sigma_integral: f64,
}

fn node_of(grid: &GridConfig, x: f64) -> Result<usize> {
    grid.node_at(x).ok_or_else(|| {
        Error::precondition(format!(
            "x = {x} is not a grid node of [-{0}, {0}]",
            grid.l()
        ))
    })
}

/// Trapezoid rule in time over the stored snapshots at the node `x = R`.
pub fn boundary_time_integral(traj: &Trajectory, r: f64) -> Result<BoundaryIntegral> {
    let i = node_of(&traj.grid, r)?;
    let (mut iu, mut is) = (0.0, 0.0);
    for w in traj.snapshots.windows(2) {
        let h = w[1].t - w[0].t;
        let (a, b) = (w[0].values[i], w[1].values[i]);
        iu += 0.5 * h * (a + b);
        is += 0.5 * h * (traj.spec.eval(a) + traj.spec.eval(b));
    }
    Ok(BoundaryIntegral {
        u_integral: iu,
        sigma_integral: is,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticVariation {
    /// `∫_0^T Σ_{x_i > R} (x_i − R)² σ(u(s, x_i))² Δx ds`
    pub qv: f64,
    /// `∫_0^T u(s, R) ds`
    pub boundary_integral: f64,
    /// `qv^{β/2} / (∫_0^T u(s, R) ds)^β`, defined as 0 when `qv = 0`.
    pub ratio: f64,
}

pub fn quadratic_variation_outside(
    traj: &Trajectory,
    r: f64,
    beta: f64,
) -> Result<QuadraticVariation> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::precondition(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    let grid = &traj.grid;
    let i0 = node_of(grid, r)?;
    let dx = grid.dx();
    let slice = |f: &Field| -> f64 {
        (i0 + 1..grid.n_nodes())
            .map(|i| {
                let s = traj.spec.eval(f.values[i]);
                (grid.x(i) - r).powi(2) * s * s
            })
            .sum::<f64>()
            * dx
    };
    let mut qv = 0.0;
    for w in traj.snapshots.windows(2) {
        qv += 0.5 * (w[1].t - w[0].t) * (slice(&w[0]) + slice(&w[1]));
    }
    let b = boundary_time_integral(traj, r)?.u_integral;
    let ratio = if qv == 0.0 {
        0.0
    } else {
        qv.powf(0.5 * beta) / b.max(0.0).powf(beta)
    };
    Ok(QuadraticVariation {
        qv,
        boundary_integral: b,
        ratio,
    })
}

/// `mean(qv^{β/2}) / mean((∫u(s,R)ds)^β)` over an ensemble; 0 when every `qv` is 0.
pub fn qv_ensemble_ratio(reports: &[QuadraticVariation], beta: f64) -> f64 {
    let num: f64 = reports.iter().map(|r| r.qv.powf(0.5 * beta)).sum();
    if num == 0.0 {
        return 0.0;
    }
    let den: f64 = reports
        .iter()
        .map(|r| r.boundary_integral.max(0.0).powf(beta))
        .sum();
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub mean_abs_p: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Sample mean of `|u(t, x)|^p` with its jackknife standard error.
pub fn moment_estimate(ensemble: &[Trajectory], p: f64, t: f64, x: f64) -> Result<MomentEstimate> {
    if !(p >= 2.0) {
        return Err(Error::precondition(format!(
            "moment order must be >= 2, got {p}"
        )));
    }
    if ensemble.len() < 2 {
        return Err(Error::precondition(
            "moment estimate needs at least two paths",
        ));
    }
    let mut samples = Vec::with_capacity(ensemble.len());
    for tr in ensemble {
        let i = node_of(&tr.grid, x)?;
        let f = tr
            .at_time(t)
            .ok_or_else(|| Error::precondition(format!("t = {t} is not a stored snapshot")))?;
        samples.push(f.values[i].abs().powf(p));
    }
    let n = samples.len() as f64;
    let total: f64 = samples.iter().sum();
    let mean = total / n;
    let loo: Vec<f64> = samples.iter().map(|s| (total - s) / (n - 1.0)).collect();
    let loo_mean = loo.iter().sum::<f64>() / n;
    let var = (n - 1.0) / n * loo.iter().map(|m| (m - loo_mean).powi(2)).sum::<f64>();
    Ok(MomentEstimate {
        mean_abs_p: mean,
        std_error: var.sqrt(),
        n_paths: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakResidual {
    /// `max_n |(u_n, φ)Δx − RHS_n|`
    pub max_abs: f64,
    /// Largest accumulated magnitude of the terms entering the identity.
    pub scale: f64,
    pub relative: f64,
}

/// Audits the discrete weak form
/// `(u_{n+1}, φ)Δx = (u_n, φ)Δx + Δt(u_n, ½D²φ/Δx²)Δx + Σ_i σ(u_{n,i}) φ_i ΔW_{n,i}`
/// along a run stored at every step with its noise record.
pub fn weak_residual(traj: &Trajectory, phi: &[f64]) -> Result<WeakResidual> {
    let grid = &traj.grid;
    let nn = grid.n_nodes();
    if phi.len() != nn {
        return Err(Error::precondition(format!(
            "test vector has {} entries, grid has {nn} nodes",
            phi.len()
        )));
    }
    if phi[0] != 0.0 || phi[nn - 1] != 0.0 {
        return Err(Error::precondition(
            "test vector must vanish at the boundary nodes",
        ));
    }
    let rec = traj
        .noise
        .as_ref()
        .ok_or_else(|| Error::MissingNoise("trajectory was run without recording noise".into()))?;
    if !traj.has_every_step() {
        return Err(Error::precondition(
            "weak residual needs a snapshot at every step",
        ));
    }
    let dx = grid.dx();
    let dt = grid.dt();
    let lphi: Vec<f64> = (0..nn)
        .map(|i| {
            if i == 0 || i == nn - 1 {
                0.0
            } else {
                0.5 * (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) / (dx * dx)
            }
        })
        .collect();
    let pair = |u: &[f64], w: &[f64]| -> (f64, f64) {
        let mut s = 0.0;
        let mut a = 0.0;
        for (x, y) in u.iter().zip(w) {
            s += x * y;
            a += (x * y).abs();
        }
        (s * dx, a * dx)
    };
    let (mut rhs, mut scale) = pair(&traj.snapshots[0].values, phi);
    let mut max_abs = 0.0f64;
    for n in 0..grid.n_steps() {
        let u = &traj.snapshots[n].values;
        let (drift, drift_abs) = pair(u, &lphi);
        let dw = rec.row(n)?;
        let mut noise = 0.0;
        let mut noise_abs = 0.0;
        for i in 1..nn - 1 {
            let term = traj.spec.eval(u[i]) * phi[i] * dw[i - 1];
            noise += term;
            noise_abs += term.abs();
        }
        rhs += dt * drift + noise;
        let (lhs, lhs_abs) = pair(&traj.snapshots[n + 1].values, phi);
        scale = scale
            .max(lhs_abs)
            .max(dt * drift_abs + noise_abs)
            .max(rhs.abs());
        max_abs = max_abs.max((lhs - rhs).abs());
    }
    let relative = if scale > 0.0 { max_abs / scale } else { 0.0 };
    Ok(WeakResidual {
        max_abs,
        scale,
        relative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonStats {
    pub violated_fraction: f64,
    /// Most negative `u_hi − u_lo` (0 if none is negative).
    pub worst_violation: f64,
    pub points: usize,
    pub tol: f64,
}

/// Fraction of stored lattice points with `u_hi − u_lo < −tol`, `tol = 1e-8 max(u0_hi)`.
pub fn comparison_stats(hi: &Trajectory, lo: &Trajectory) -> Result<ComparisonStats> {
    if hi.grid != lo.grid || hi.steps != lo.steps {
        return Err(Error::precondition(
            "coupled trajectories use different grids or snapshot times",
        ));
    }
    let tol = 1e-8 * hi.initial().max();
    let mut violated = 0usize;
    let mut points = 0usize;
    let mut worst = 0.0f64;
    for (a, b) in hi.snapshots.iter().zip(&lo.snapshots) {
        for (x, y) in a.values.iter().zip(&b.values) {
            let d = x - y;
            points += 1;
            worst = worst.min(d);
            if d < -tol {
                violated += 1;
            }
        }
    }
    Ok(ComparisonStats {
        violated_fraction: violated as f64 / points as f64,
        worst_violation: worst,
        points,
        tol,
    })
}

/// Per-path scalars plus ensemble aggregates, in ascending path order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub columns: Vec<String>,
    /// `(path, values)`; `NaN` marks a quantity that is undefined for that path.
    pub rows: Vec<(u64, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    pub std_error: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl DiagnosticsReport {
    pub fn new(columns: &[&str]) -> Self {
        DiagnosticsReport {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, path: u64, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::precondition(format!(
                "row has {} values, report has {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((path, values));
        self.rows.sort_by_key(|r| r.0);
        Ok(())
    }

    /// Aggregates of one column over rows where it is defined.
    pub fn aggregate(&self, column: usize) -> Aggregate {
        let mut vals: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.1[column])
            .filter(|v| !v.is_nan())
            .collect();
        let n = vals.len();
        if n == 0 {
            return Aggregate {
                count: 0,
                mean: f64::NAN,
                std_error: f64::NAN,
                min: f64::NAN,
                median: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64)
                .sqrt()
        } else {
            f64::NAN
        };
        vals.sort_by(|a, b| a.total_cmp(b));
        let median = if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        };
        Aggregate {
            count: n,
            mean,
            std_error,
            min: vals[0],
            median,
            max: vals[n - 1],
        }
    }

    /// `kind,path,<columns>` with one `PATH` row per path followed by `AGG` rows
    /// (`count`, `mean`, `std_error`, `min`, `median`, `max`).
    pub fn to_csv(&self) -> String {
        let mut out = format!("kind,path,{}\n", self.columns.join(","));
        for (p, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| fmt_cell(*v)).collect();
            out.push_str(&format!("PATH,{p},{}\n", cells.join(",")));
        }
        let aggs: Vec<Aggregate> = (0..self.columns.len()).map(|j| self.aggregate(j)).collect();
        let stats: [(&str, fn(&Aggregate) -> f64); 6] = [
            ("count", |a| a.count as f64),
            ("mean", |a| a.mean),
            ("std_error", |a| a.std_error),
            ("min", |a| a.min),
            ("median", |a| a.median),
            ("max", |a| a.max),
        ];
        for (name, get) in stats {
            let cells: Vec<String> = aggs.iter().map(|a| fmt_cell(get(a))).collect();
            out.push_str(&format!("AGG,{name},{}\n", cells.join(",")));
        }
        out
    }

    /// `paths=N` then `<column>.<stat>=value` lines.
    pub fn summary_kv(&self) -> String {
        let mut out = format!("paths={}\n", self.rows.len());
        for (j, c) in self.columns.iter().enumerate() {
            let a = self.aggregate(j);
            out.push_str(&format!("{c}.count={}\n", a.count));
            for (name, v) in [
                ("mean", a.mean),
                ("std_error", a.std_error),
                ("min", a.min),
                ("median", a.median),
                ("max", a.max),
            ] {
                out.push_str(&format!("{c}.{name}={}\n", fmt_cell(v)));
            }
        }
        out
    }
}

pub fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        kv::fmt_sci(v)
    }
}
