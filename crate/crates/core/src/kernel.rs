//! Heat kernel `G(t, x) = (2πt)^{-1/2} exp(-x²/2t)` of `∂_t = ½∂²_x` and the
//! closed forms built on it.

use libm::erfc;

use crate::error::{Error, Result};
use crate::quad;

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!(
            "time must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail `1 − Φ(z)`, accurate for large `z`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

pub fn heat_kernel(t: f64, x: f64) -> Result<f64> {
    check_time(t)?;
    Ok((-x * x / (2.0 * t)).exp() / (std::f64::consts::TAU * t).sqrt())
}

/// `∫ G(t, y)² dy = (4πt)^{-1/2}`.
pub fn kernel_l2_mass(t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(1.0 / (4.0 * std::f64::consts::PI * t).sqrt())
}

/// Quadrature of `∫ G(t, y)^k dy` over `±40√t`, for cross-checking the closed forms.
pub fn kernel_power_quadrature(t: f64, k: i32) -> Result<f64> {
    check_time(t)?;
    let g = |y: f64| (-y * y / (2.0 * t)).exp() / (std::f64::consts::TAU * t).sqrt();
    Ok(quad::integrate_window(|y| g(y).powi(k), 0.0, 40.0 * t.sqrt(), 1e-14).value)
}

/// `(G(t, ·) * 1_{[a, b]})(x) = Φ((x − a)/√t) − Φ((x − b)/√t)`.
pub fn heat_flow_interval(t: f64, a: f64, b: f64, x: f64) -> Result<f64> {
    check_time(t)?;
    let s = t.sqrt();
    let (za, zb) = ((x - a) / s, (x - b) / s);
    // difference of the smaller tails to avoid cancellation far from [a, b]
    Ok(if zb >= 0.0 {
        normal_sf(zb) - normal_sf(za)
    } else if za <= 0.0 {
        normal_cdf(za) - normal_cdf(zb)
    } else {
        1.0 - normal_cdf(zb) - normal_sf(za)
    })
}

/// `(G(t, ·) * 1_{[−r, r]})(x)`.
pub fn convolve_indicator(t: f64, r: f64, x: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain(format!(
            "indicator half-width must be positive, got {r}"
        )));
    }
    heat_flow_interval(t, -r, r, x.abs())
}

/// Quadrature of `∫ G(t, x − y) G(s, y) dy`; equals `G(t + s, x)`.
pub fn semigroup_quadrature(t: f64, s: f64, x: f64) -> Result<f64> {
    check_time(t)?;
    check_time(s)?;
    let width = 40.0 * (t + s).sqrt() + x.abs();
    let f = |y: f64| heat_kernel(t, x - y).unwrap_or(0.0) * heat_kernel(s, y).unwrap_or(0.0);
    // split at the two peaks so each panel sees a single bump
    let (lo, hi) = (x.min(0.0), x.max(0.0));
    let mut total = quad::integrate(f, -width, lo, 1e-15, 1e-13).value;
    if hi > lo {
        total += quad::integrate(f, lo, hi, 1e-15, 1e-13).value;
    }
    total += quad::integrate(f, hi, width, 1e-15, 1e-13).value;
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationReport {
    pub m: u32,
    pub inf_value: f64,
    /// `(s, x)` where the infimum is attained.
    pub argmin: (f64, f64),
    pub threshold: f64,
    pub satisfied: bool,
}

const STRIP_SAMPLES: usize = 64;

/// Minimizes `(G(s, ·) * 1_{[−r, r]})(x)` over `s ∈ [T/(2m), T/m]`,
/// `|x| <= r + M/m` and compares the infimum with `2η`.
pub fn propagation_lower_bound(
    horizon: f64,
    big_m: f64,
    eta: f64,
    r: f64,
    m: u32,
) -> Result<PropagationReport> {
    for (name, v) in [("T", horizon), ("M", big_m), ("r", r)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::domain(format!("{name} must be positive, got {v}")));
        }
    }
    if !(eta > 0.0 && eta < 0.25) {
        return Err(Error::precondition(format!(
            "eta must lie in (0, 1/4), got {eta}"
        )));
    }
    if m == 0 {
        return Err(Error::precondition("m must be >= 1"));
    }
    let (s_lo, s_hi) = (horizon / (2.0 * m as f64), horizon / m as f64);
    let x_hi = r + big_m / m as f64;
    let f = |s: f64, x: f64| convolve_indicator(s, r, x).unwrap_or(f64::NAN);

    let n = STRIP_SAMPLES;
    let s_at = |j: usize| s_lo + (s_hi - s_lo) * j as f64 / (n - 1) as f64;
    let x_at = |j: usize| x_hi * j as f64 / (n - 1) as f64;
    let mut best = (f64::INFINITY, 0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let v = f(s_at(i), x_at(j));
            if v < best.0 {
                best = (v, i, j);
            }
        }
    }
    // coordinate golden-section refinement inside the neighbouring cells
    let (mut s, mut x) = (s_at(best.1), x_at(best.2));
    let (ds, dxx) = ((s_hi - s_lo) / (n - 1) as f64, x_hi / (n - 1) as f64);
    let s_box = ((s - ds).max(s_lo), (s + ds).min(s_hi));
    let x_box = ((x - dxx).max(0.0), (x + dxx).min(x_hi));
    let mut value = best.0;
    for _ in 0..4 {
        s = golden_min(|s| f(s, x), s_box.0, s_box.1, s);
        x = golden_min(|x| f(s, x), x_box.0, x_box.1, x);
        value = value.min(f(s, x));
    }
    let threshold = 2.0 * eta;
    Ok(PropagationReport {
        m,
        inf_value: value,
        argmin: (s, x),
        threshold,
        satisfied: value >= threshold,
    })
}

/// Golden-section search on `[a, b]`; returns `fallback` if it is no worse than the result.
fn golden_min(f: impl Fn(f64) -> f64, a: f64, b: f64, fallback: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut best = (fallback, f(fallback));
    for cand in [a, b, 0.5 * (a + b)] {
        let v = f(cand);
        if v < best.1 {
            best = (cand, v);
        }
    }
    best.0
}

/// Smallest scanned `m` from which every later scanned `m` satisfies the bound.
pub fn first_satisfying_m(reports: &[PropagationReport]) -> Option<u32> {
    match reports.iter().rposition(|r| !r.satisfied) {
        None => reports.first().map(|r| r.m),
        Some(i) => reports.get(i + 1).map(|r| r.m),
    }
}
