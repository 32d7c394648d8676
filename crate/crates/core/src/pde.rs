//! Deterministic absorption equation `∂_t u = ½∂²_x u − σ(u)`.
//!
//! Each step is an explicit heat step followed by the absorption
//! `w' = −σ(w)` at every node. [`AbsorptionScheme::Split`] integrates the
//! absorption exactly, so true zeros appear as soon as the flow reaches
//! extinction; [`AbsorptionScheme::Explicit`] uses `w − Δt σ(w)` and needs
//! `Δt sup σ(u)/u <= 1` to stay nonnegative.

use crate::error::{Error, Result};
use crate::grid::{Field, GridConfig};
use crate::noise::NoisePlan;
use crate::nonlinearity::NonlinearitySpec;
use crate::quad;
use crate::spde::{Monitor, RunOptions, Trajectory, BOUNDARY_ALERT_REL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsorptionScheme {
    #[default]
    Split,
    Explicit,
}

/// Absolute level below which a deterministic value counts as zero.
pub const EXACT_ZERO: f64 = 1e-14;

/// Solves the absorption equation from `u0` on `grid`.
pub fn solve_deterministic(
    u0: &Field,
    spec: &NonlinearitySpec,
    grid: &GridConfig,
    opts: &RunOptions,
    scheme: AbsorptionScheme,
) -> Result<Trajectory> {
    if u0.values.len() != grid.n_nodes() {
        return Err(Error::config("initial data length does not match the grid"));
    }
    grid.check_domain(u0)?;
    if scheme == AbsorptionScheme::Explicit {
        let sup = spec.sampled_ratio_sup(u0.max());
        if grid.dt() * sup > 1.0 {
            let suggested_dt = if sup.is_finite() && sup > 0.0 {
                1.0 / sup
            } else {
                0.0
            };
            return Err(Error::Overshoot {
                dt: grid.dt(),
                suggested_dt,
            });
        }
    }
    let stored = opts.schedule.steps(grid)?;
    let dx = grid.dx();
    let r = 0.5 * grid.dt() / (dx * dx);
    let dt = grid.dt();
    let mut u = u0.values.clone();
    let last = u.len() - 1;
    u[0] = 0.0;
    u[last] = 0.0;
    let mut next = vec![0.0; u.len()];
    let mut snapshots = Vec::with_capacity(stored.len());
    let mut monitor = Monitor {
        global_min: u.iter().copied().fold(f64::INFINITY, f64::min),
        boundary_alert: None,
    };
    let alert = BOUNDARY_ALERT_REL * u0.max().max(0.0);
    let mut k = 0;
    if stored.first() == Some(&0) {
        snapshots.push(Field {
            t: 0.0,
            values: u.clone(),
        });
        k = 1;
    }
    for n in 0..grid.n_steps() {
        for i in 1..last {
            let v = u[i] + r * (u[i + 1] - 2.0 * u[i] + u[i - 1]);
            next[i] = match scheme {
                AbsorptionScheme::Split => spec.absorb(v, dt),
                AbsorptionScheme::Explicit => v - dt * spec.eval(v),
            };
        }
        std::mem::swap(&mut u, &mut next);
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                step: n + 1,
                node: i,
                x: grid.x(i),
            });
        }
        monitor.global_min = u.iter().copied().fold(monitor.global_min, f64::min);
        if monitor.boundary_alert.is_none() {
            for node in [1, last - 1] {
                if u[node].abs() > alert {
                    monitor.boundary_alert = Some(crate::spde::BoundaryAlert {
                        step: n + 1,
                        node,
                        value: u[node],
                    });
                    break;
                }
            }
        }
        if k < stored.len() && stored[k] == n + 1 {
            snapshots.push(Field {
                t: grid.t(n + 1),
                values: u.clone(),
            });
            k += 1;
        }
    }
    let plan = NoisePlan::zero(*grid);
    Ok(Trajectory {
        grid: *grid,
        spec: spec.clone(),
        seed: plan.seed,
        path: plan.path,
        snapshots,
        steps: stored,
        noise: None,
        monitor,
    })
}

/// Nodes above [`EXACT_ZERO`]: `(leftmost x, rightmost x)` widened by half a cell.
pub fn deterministic_support(field: &Field, grid: &GridConfig) -> Option<(f64, f64)> {
    let first = field.values.iter().position(|v| *v >= EXACT_ZERO)?;
    let last = field.values.iter().rposition(|v| *v >= EXACT_ZERO)?;
    Some((
        grid.x(first) - 0.5 * grid.dx(),
        grid.x(last) + 0.5 * grid.dx(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntegralValue {
    Finite(f64),
    Divergent,
}

impl IntegralValue {
    pub fn is_finite(&self) -> bool {
        matches!(self, IntegralValue::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            IntegralValue::Finite(v) => Some(*v),
            IntegralValue::Divergent => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalashnikovReport {
    /// `∫_0^1 du / √(u σ(u))`
    pub csp_integral: IntegralValue,
    /// `∫_0^1 du / σ(u)`
    pub positivity_integral: IntegralValue,
}

const MAX_PANELS: usize = 1000;
const MIN_PANELS: usize = 16;

/// Both integrals over `(0, 1]`, summed over dyadic panels `[2^{-k-1}, 2^{-k}]`.
pub fn kalashnikov_integrals(spec: &NonlinearitySpec) -> Result<KalashnikovReport> {
    if !(spec.eval(1.0) > 0.0) {
        return Err(Error::precondition("sigma must be positive on (0, 1]"));
    }
    Ok(KalashnikovReport {
        csp_integral: dyadic_integral(|u| 1.0 / (u.sqrt() * spec.eval(u).sqrt())),
        positivity_integral: dyadic_integral(|u| 1.0 / spec.eval(u)),
    })
}

/// Integral of a nonnegative function over `(0, 1]` with a singularity at 0.
///
/// Panel integrals `a_k` are summed until they decay geometrically (tail
/// `a_K ρ/(1 − ρ)`) or, after [`MAX_PANELS`] panels, the local power decay
/// `a_k ~ k^{-p}` is estimated; `p > 1.05` counts as convergent with the
/// integral-test tail `a_K K/(p − 1)`.
pub fn dyadic_integral(f: impl Fn(f64) -> f64) -> IntegralValue {
    let mut terms = Vec::with_capacity(MAX_PANELS);
    let mut sum = 0.0;
    for k in 0..MAX_PANELS {
        let hi = 0.5f64.powi(k as i32);
        let lo = 0.5 * hi;
        let a = quad::integrate(&f, lo, hi, 0.0, 1e-13).value;
        if !a.is_finite() {
            return IntegralValue::Divergent;
        }
        terms.push(a);
        sum += a;
        if k >= MIN_PANELS {
            if a == 0.0 {
                return IntegralValue::Finite(sum);
            }
            let rho = a / terms[k - 1];
            let rho_prev = terms[k - 1] / terms[k - 2];
            if rho < 0.999 && (rho - rho_prev).abs() <= 1e-6 * rho {
                let tail = a * rho / (1.0 - rho);
                if tail <= 1e-14 * sum {
                    return IntegralValue::Finite(sum + tail);
                }
            }
        }
    }
    let k = terms.len();
    let (a_half, a_last) = (terms[k / 2 - 1], terms[k - 1]);
    let p = (a_half / a_last).ln() / (k as f64 / (k / 2) as f64).ln();
    if p > 1.05 {
        IntegralValue::Finite(sum + a_last * k as f64 / (p - 1.0))
    } else {
        IntegralValue::Divergent
    }
}
