//! The noise coefficient σ: construction, evaluation, truncation, rescaling
//! and the analytic conditions that separate strict positivity from compact
//! support.
//!
//! Every σ is represented internally as a list of pieces on `[0, ∞)`, each an
//! affine map, a power law or the logarithmic germ `u |log u|^β |log log 1/u|^γ`.
//! Rescaling `σ_k(u) = η^{-k} σ(η^k u)` and truncation
//! `σ^(m)(u) = σ(u) 1{u ≥ 1/m} + m σ(1/m) u 1{0 ≤ u < 1/m}` are applied to the
//! piece list once at construction, in that order, so evaluation is a binary
//! search plus one closed-form expression.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::noise::unit_f64;
use crate::quad;

/// Family tag and its shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// `u^γ` on `(0, 1]`, continued linearly with slope `γ` above 1.
    PowerLaw { gamma: f64 },
    /// `u |log u|^β |log log(1/u)|^γ` on `(0, u*]`, continued linearly above `u*`.
    LogCorrected { beta: f64, gamma: f64 },
    /// `c u`.
    Linear { c: f64 },
    /// Linear interpolation of sorted `(u, σ(u))` pairs, through the origin
    /// below the first point and continued with the last slope above the last.
    Tabulated { points: Vec<(f64, f64)> },
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::PowerLaw { .. } => "power_law",
            Family::LogCorrected { .. } => "log_corrected",
            Family::Linear { .. } => "linear",
            Family::Tabulated { .. } => "tabulated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale {
    pub eta: f64,
    pub k: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// `p + q u`
    Affine { p: f64, q: f64 },
    /// `c u^γ`, `0 < γ < 1`
    Power { c: f64, gamma: f64 },
    /// `a · w |log w|^β |log log(1/w)|^γ` with `w = b u`
    Log {
        beta: f64,
        gamma: f64,
        a: f64,
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    lo: f64,
    shape: Shape,
}

impl Shape {
    fn eval(&self, u: f64) -> f64 {
        match *self {
            Shape::Affine { p, q } => p + q * u,
            Shape::Power { c, gamma } => c * u.powf(gamma),
            Shape::Log { beta, gamma, a, b } => {
                let w = b * u;
                if w <= 0.0 {
                    return 0.0;
                }
                let z = -w.ln();
                let mut v = a * w * z.abs().powf(beta);
                if gamma != 0.0 {
                    v *= z.ln().abs().powf(gamma);
                }
                v
            }
        }
    }

    /// Time for `w' = -σ(w)` to descend from `v` to `lo` (`lo < v`).
    fn exit_time(&self, v: f64, lo: f64) -> f64 {
        match *self {
            Shape::Affine { p, q } => {
                if q > 0.0 {
                    let bottom = p + q * lo;
                    if bottom <= 0.0 {
                        f64::INFINITY
                    } else {
                        ((p + q * v) / bottom).ln() / q
                    }
                } else if p > 0.0 {
                    (v - lo) / p
                } else {
                    f64::INFINITY
                }
            }
            Shape::Power { c, gamma } => {
                let e = 1.0 - gamma;
                (v.powf(e) - lo.powf(e)) / (c * e)
            }
            Shape::Log { beta, gamma, a, b } => {
                let kappa = a * b;
                let z0 = -(b * v).ln();
                if lo <= 0.0 {
                    if gamma == 0.0 && beta > 1.0 {
                        return -log_antiderivative(z0, beta) / kappa;
                    }
                    if gamma == 0.0 {
                        return f64::INFINITY;
                    }
                    // extinction time with a log-log factor: integrate the
                    // tail in z numerically on dyadic blocks
                    return log_tail_time(z0, beta, gamma, kappa);
                }
                let z1 = -(b * lo).ln();
                if gamma == 0.0 {
                    (log_antiderivative(z1, beta) - log_antiderivative(z0, beta)) / kappa
                } else {
                    quad::integrate(
                        |z| 1.0 / (kappa * z.powf(beta) * z.ln().powf(gamma)),
                        z0,
                        z1,
                        1e-15,
                        1e-13,
                    )
                    .value
                }
            }
        }
    }

    /// Solution of `w' = -σ(w)` after time `t` from `v`, ignoring piece bounds
    /// except that the result never drops below zero.
    fn flow(&self, v: f64, t: f64) -> f64 {
        match *self {
            Shape::Affine { p, q } => {
                if p == 0.0 {
                    v * (-q * t).exp()
                } else if q > 0.0 {
                    // expm1 keeps a nearly flat piece (q ~ 1e-16) free of cancellation
                    (v * (-q * t).exp() + p * (-q * t).exp_m1() / q).max(0.0)
                } else {
                    (v - p * t).max(0.0)
                }
            }
            Shape::Power { c, gamma } => {
                let e = 1.0 - gamma;
                let base = v.powf(e) - c * e * t;
                if base <= 0.0 {
                    0.0
                } else {
                    base.powf(1.0 / e)
                }
            }
            Shape::Log { beta, gamma, a, b } => {
                let kappa = a * b;
                let z0 = -(b * v).ln();
                let z = if gamma == 0.0 {
                    let f = log_antiderivative(z0, beta) + kappa * t;
                    invert_log_antiderivative(f, beta)
                } else {
                    rk4_log(z0, beta, gamma, kappa, t)
                };
                if !z.is_finite() {
                    0.0
                } else {
                    (-z).exp() / b
                }
            }
        }
    }
}

/// Antiderivative of `z^{-β}`.
fn log_antiderivative(z: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        z.ln()
    } else {
        z.powf(1.0 - beta) / (1.0 - beta)
    }
}

fn invert_log_antiderivative(f: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        f.exp()
    } else if beta > 1.0 {
        // F(z) < 0 and increases to 0 as z -> inf
        if f >= 0.0 {
            f64::INFINITY
        } else {
            (f * (1.0 - beta)).powf(1.0 / (1.0 - beta))
        }
    } else {
        (f * (1.0 - beta)).powf(1.0 / (1.0 - beta))
    }
}

fn rk4_log(z0: f64, beta: f64, gamma: f64, kappa: f64, t: f64) -> f64 {
    const SUBSTEPS: usize = 32;
    const Z_MAX: f64 = 800.0;
    let rhs = |z: f64| kappa * z.powf(beta) * z.ln().powf(gamma);
    let h = t / SUBSTEPS as f64;
    let mut z = z0;
    for _ in 0..SUBSTEPS {
        let k1 = rhs(z);
        let k2 = rhs(z + 0.5 * h * k1);
        let k3 = rhs(z + 0.5 * h * k2);
        let k4 = rhs(z + h * k3);
        z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !z.is_finite() || z > Z_MAX {
            return f64::INFINITY;
        }
    }
    z
}

fn log_tail_time(z0: f64, beta: f64, gamma: f64, kappa: f64) -> f64 {
    let mut total = 0.0;
    let mut lo = z0;
    for _ in 0..200 {
        let hi = 2.0 * lo;
        let part = quad::integrate(
            |z| 1.0 / (kappa * z.powf(beta) * z.ln().powf(gamma)),
            lo,
            hi,
            1e-300,
            1e-13,
        )
        .value;
        total += part;
        if part < 1e-16 * total {
            return total;
        }
        lo = hi;
    }
    f64::INFINITY
}

/// A validated noise coefficient. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearitySpec {
    family: Family,
    d: f64,
    lipschitz: f64,
    truncation: Option<u32>,
    rescale: Option<Rescale>,
    base: Vec<Piece>,
    pieces: Vec<Piece>,
}

fn eval_pieces(pieces: &[Piece], u: f64) -> f64 {
    if u.is_nan() {
        return f64::NAN;
    }
    if u <= 0.0 {
        return 0.0;
    }
    let idx = pieces.partition_point(|p| p.lo <= u) - 1;
    pieces[idx].shape.eval(u)
}

/// Largest slope of the pieces on `[from, ∞)`, sampled densely for non-affine pieces.
fn max_slope_above(pieces: &[Piece], from: f64) -> f64 {
    let mut best: f64 = 0.0;
    for (i, piece) in pieces.iter().enumerate() {
        let hi = pieces.get(i + 1).map(|p| p.lo).unwrap_or(f64::INFINITY);
        if hi <= from {
            continue;
        }
        let lo = piece.lo.max(from);
        match piece.shape {
            Shape::Affine { q, .. } => best = best.max(q),
            Shape::Power { c, gamma } => {
                if lo > 0.0 {
                    best = best.max(c * gamma * lo.powf(gamma - 1.0));
                }
            }
            Shape::Log { .. } => {
                // finite differences on a log-spaced grid over [lo, hi]
                if lo > 0.0 && hi.is_finite() {
                    let n = 512;
                    let (a, b) = (lo.ln(), hi.ln());
                    for j in 0..n {
                        let u0 = (a + (b - a) * j as f64 / n as f64).exp();
                        let u1 = (a + (b - a) * (j + 1) as f64 / n as f64).exp().min(hi);
                        if u1 > u0 {
                            best =
                                best.max((piece.shape.eval(u1) - piece.shape.eval(u0)) / (u1 - u0));
                        }
                    }
                }
            }
        }
    }
    best
}

fn cutoff_log_corrected(beta: f64, gamma: f64) -> f64 {
    // σ' >= 0 on (0, e^{-L}] iff h(L) = L - β - γ / ln L >= 0, and h increases for L > 1.
    let h = |l: f64| l - beta - gamma / l.ln();
    let e = std::f64::consts::E;
    if h(e) >= 0.0 {
        return e;
    }
    let mut lo = e;
    let mut hi = 2.0 * e;
    while h(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn check_finite_positive(name: &str, x: f64) -> Result<()> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::config(format!(
            "{name} must be positive and finite, got {x}"
        )));
    }
    Ok(())
}

fn base_pieces(family: &Family) -> Result<(Vec<Piece>, f64, f64)> {
    match family {
        Family::PowerLaw { gamma } => {
            let g = *gamma;
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config(format!(
                    "power_law requires 0 < gamma <= 1 so that sigma(u)/u is nonincreasing, got {g}"
                )));
            }
            let pieces = if g == 1.0 {
                vec![Piece {
                    lo: 0.0,
                    shape: Shape::Affine { p: 0.0, q: 1.0 },
                }]
            } else {
                vec![
                    Piece {
                        lo: 0.0,
                        shape: Shape::Power { c: 1.0, gamma: g },
                    },
                    Piece {
                        lo: 1.0,
                        shape: Shape::Affine { p: 1.0 - g, q: g },
                    },
                ]
            };
            Ok((pieces, 1.0, 1.0))
        }
        Family::Linear { c } => {
            check_finite_positive("linear coefficient c", *c)?;
            Ok((
                vec![Piece {
                    lo: 0.0,
                    shape: Shape::Affine { p: 0.0, q: *c },
                }],
                1.0,
                *c,
            ))
        }
        Family::LogCorrected { beta, gamma } => {
            let (b, g) = (*beta, *gamma);
            if !(b.is_finite() && b >= 0.0 && g.is_finite() && g >= 0.0) {
                return Err(Error::config(format!(
                    "log_corrected requires beta >= 0 and gamma >= 0, got beta={b}, gamma={g}"
                )));
            }
            let l = cutoff_log_corrected(b, g);
            let u_star = (-l).exp();
            let ln_l = l.ln();
            let growth = l.powf(b) * if g != 0.0 { ln_l.powf(g) } else { 1.0 };
            let sigma_star = u_star * growth;
            let slope = (l.powf(b - 1.0)
                * ((l - b) - if g != 0.0 { g / ln_l } else { 0.0 })
                * if g != 0.0 { ln_l.powf(g) } else { 1.0 })
            .max(0.0);
            let pieces = vec![
                Piece {
                    lo: 0.0,
                    shape: Shape::Log {
                        beta: b,
                        gamma: g,
                        a: 1.0,
                        b: 1.0,
                    },
                },
                Piece {
                    lo: u_star,
                    shape: Shape::Affine {
                        p: sigma_star - slope * u_star,
                        q: slope,
                    },
                },
            ];
            Ok((pieces, u_star, growth))
        }
        Family::Tabulated { points } => tabulated_pieces(points),
    }
}

fn tabulated_pieces(points: &[(f64, f64)]) -> Result<(Vec<Piece>, f64, f64)> {
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|&(u, _)| u != 0.0).collect();
    if points.iter().any(|&(u, s)| u == 0.0 && s != 0.0) {
        return Err(Error::config("tabulated sigma must vanish at u = 0"));
    }
    if pts.is_empty() {
        return Err(Error::config(
            "tabulated sigma needs at least one point with u > 0",
        ));
    }
    for &(u, s) in &pts {
        if !(u.is_finite() && s.is_finite() && u > 0.0 && s >= 0.0) {
            return Err(Error::config(format!(
                "tabulated point ({u}, {s}) must have u > 0 and sigma >= 0"
            )));
        }
    }
    for w in pts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::config(format!(
                "tabulated u-grid must be strictly increasing ({} then {})",
                w[0].0, w[1].0
            )));
        }
        if w[1].1 < w[0].1 {
            return Err(Error::config(format!(
                "tabulated sigma must be nondecreasing (sigma({}) = {} > sigma({}) = {})",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    let mut pieces = vec![Piece {
        lo: 0.0,
        shape: Shape::Affine {
            p: 0.0,
            q: pts[0].1 / pts[0].0,
        },
    }];
    for w in pts.windows(2) {
        let q = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
        pieces.push(Piece {
            lo: w[0].0,
            shape: Shape::Affine {
                p: w[0].1 - q * w[0].0,
                q,
            },
        });
    }
    let last = *pts.last().unwrap();
    let last_shape = pieces.last().unwrap().shape;
    pieces.push(Piece {
        lo: last.0,
        shape: last_shape,
    });
    // default threshold: as far as sigma(u)/u stays nonincreasing
    let mut d = last.0;
    for (i, piece) in pieces.iter().enumerate() {
        if let Shape::Affine { p, .. } = piece.shape {
            if p < -1e-12 * (1.0 + last.1) {
                d = piece.lo.max(pts[0].0);
                if i == 0 {
                    d = pts[0].0;
                }
                break;
            }
        }
    }
    let l = required_lipschitz(&pieces, d);
    Ok((pieces, d, if l > 0.0 { l } else { 1.0 }))
}

fn required_lipschitz(pieces: &[Piece], d: f64) -> f64 {
    let at_d = eval_pieces(pieces, d) / d;
    at_d.max(max_slope_above(pieces, d))
}

fn ratio_nonincreasing_below(pieces: &[Piece], d: f64) -> std::result::Result<(), f64> {
    for piece in pieces {
        if piece.lo >= d {
            break;
        }
        if let Shape::Affine { p, q } = piece.shape {
            let scale = p.abs() + q.abs() * d;
            if p < -1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(piece.lo);
            }
        }
    }
    Ok(())
}

/// Verdicts of a `e^{-k}/σ(e^{-k})` vs `k^{-α}` comparison for `k = 1..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub alpha: f64,
    /// `verdicts[k - 1]` is the verdict at `k`.
    pub verdicts: Vec<bool>,
    pub first_failure: Option<u64>,
    /// Smallest `k0` such that the inequality holds for every `k0 <= k <= k_max`.
    pub holds_from: Option<u64>,
}

impl ConditionReport {
    fn from_verdicts(alpha: f64, verdicts: Vec<bool>) -> Self {
        let first_failure = verdicts.iter().position(|v| !v).map(|i| i as u64 + 1);
        let holds_from = match verdicts.iter().rposition(|v| !v) {
            None => Some(1),
            Some(i) if i + 1 < verdicts.len() => Some(i as u64 + 2),
            Some(_) => None,
        };
        ConditionReport {
            alpha,
            verdicts,
            first_failure,
            holds_from,
        }
    }

    pub fn holds_everywhere(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Partial sums of a nonnegative series together with a tail heuristic.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesReport {
    pub partial_sums: Vec<f64>,
    pub last_term: f64,
    /// Local power-law decay exponent `p` with `a_k ~ k^{-p}` estimated from `a_{K/2}` and `a_K`.
    pub tail_exponent: f64,
    pub convergent: bool,
    /// Partial sum plus an integral-test tail estimate when convergent.
    pub limit_estimate: Option<f64>,
}

const SERIES_EXPONENT_MARGIN: f64 = 1.05;
const SERIES_TAIL_TOL: f64 = 1e-3;

/// Outcome of randomized envelope checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeReport {
    pub max_violation: f64,
    pub worst_pair: (f64, f64),
    pub samples: usize,
}

impl NonlinearitySpec {
    pub fn new(family: Family) -> Result<Self> {
        let (base, d, lipschitz) = base_pieces(&family)?;
        Ok(NonlinearitySpec {
            family,
            d,
            lipschitz,
            truncation: None,
            rescale: None,
            pieces: base.clone(),
            base,
        })
    }

    pub fn power_law(gamma: f64) -> Result<Self> {
        Self::new(Family::PowerLaw { gamma })
    }

    pub fn log_corrected(beta: f64, gamma: f64) -> Result<Self> {
        Self::new(Family::LogCorrected { beta, gamma })
    }

    pub fn linear(c: f64) -> Result<Self> {
        Self::new(Family::Linear { c })
    }

    pub fn tabulated(points: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(Family::Tabulated { points })
    }

    /// Overrides the threshold `d` and constant `L_d`, validating that σ(u)/u is
    /// nonincreasing on `(0, d]` and that σ is `L_d`-Lipschitz with `σ(u) <= L_d u` above `d`.
    pub fn with_assumption_constants(mut self, d: f64, lipschitz: f64) -> Result<Self> {
        check_finite_positive("d", d)?;
        check_finite_positive("L_d", lipschitz)?;
        if let Err(at) = ratio_nonincreasing_below(&self.base, d) {
            return Err(Error::config(format!(
                "sigma(u)/u increases near u = {at}, below d = {d}"
            )));
        }
        let needed = required_lipschitz(&self.base, d);
        if lipschitz < needed * (1.0 - 1e-12) {
            return Err(Error::config(format!("L_d = {lipschitz} is below the Lipschitz/growth constant {needed} required above d = {d}")));
        }
        self.d = d;
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn with_truncation(mut self, m: u32) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("truncation level m must be >= 1"));
        }
        self.truncation = Some(m);
        self.rebuild();
        Ok(self)
    }

    pub fn without_truncation(mut self) -> Self {
        self.truncation = None;
        self.rebuild();
        self
    }

    pub fn with_rescale(mut self, eta: f64, k: u32) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::config(format!(
                "rescale eta must lie in (0, 1), got {eta}"
            )));
        }
        self.rescale = Some(Rescale { eta, k });
        self.rebuild();
        Ok(self)
    }

    fn rebuild(&mut self) {
        let mut pieces = self.base.clone();
        if let Some(Rescale { eta, k }) = self.rescale {
            let a = eta.powi(-(k as i32));
            let b = eta.powi(k as i32);
            for piece in &mut pieces {
                piece.lo *= a;
                piece.shape = match piece.shape {
                    Shape::Affine { p, q } => Shape::Affine { p: a * p, q },
                    Shape::Power { c, gamma } => Shape::Power {
                        c: a * c * b.powf(gamma),
                        gamma,
                    },
                    Shape::Log {
                        beta,
                        gamma,
                        a: a0,
                        b: b0,
                    } => Shape::Log {
                        beta,
                        gamma,
                        a: a * a0,
                        b: b * b0,
                    },
                };
            }
        }
        if let Some(m) = self.truncation {
            let threshold = 1.0 / m as f64;
            let slope = m as f64 * eval_pieces(&pieces, threshold);
            let idx = pieces.partition_point(|p| p.lo <= threshold) - 1;
            let mut truncated = vec![Piece {
                lo: 0.0,
                shape: Shape::Affine { p: 0.0, q: slope },
            }];
            truncated.push(Piece {
                lo: threshold,
                shape: pieces[idx].shape,
            });
            truncated.extend_from_slice(&pieces[idx + 1..]);
            pieces = truncated;
        }
        self.pieces = pieces;
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn truncation(&self) -> Option<u32> {
        self.truncation
    }

    pub fn rescale(&self) -> Option<Rescale> {
        self.rescale
    }

    /// Threshold `d` of the base σ.
    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Threshold of the evaluated σ: `η^{-k} d` when rescaled.
    pub fn effective_d(&self) -> f64 {
        match self.rescale {
            Some(Rescale { eta, k }) => self.d * eta.powi(-(k as i32)),
            None => self.d,
        }
    }

    /// σ(u), or σ^(m)(u) / σ_k(u) when truncation / rescaling are set. Zero for `u <= 0`.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        eval_pieces(&self.pieces, u)
    }

    /// The untruncated (but rescaled) σ, the object truncation is applied to.
    pub fn untruncated(&self) -> NonlinearitySpec {
        self.clone().without_truncation()
    }

    /// `m σ(1/m) ∨ L_d`, the global Lipschitz constant of the truncated σ.
    pub fn truncated_lipschitz(&self) -> Option<f64> {
        self.truncation.map(|m| {
            let inner = self.untruncated();
            (m as f64 * inner.eval(1.0 / m as f64)).max(self.lipschitz)
        })
    }

    /// Sup of σ(u)/u over a geometric and a uniform sample of `(0, max_u]`.
    pub fn sampled_ratio_sup(&self, max_u: f64) -> f64 {
        let mut best: f64 = 0.0;
        if max_u <= 0.0 {
            return 0.0;
        }
        for j in 0..=60 {
            let u = max_u * 0.5f64.powi(j);
            best = best.max(self.eval(u) / u);
        }
        for j in 1..=64 {
            let u = max_u * j as f64 / 64.0;
            best = best.max(self.eval(u) / u);
        }
        best
    }

    /// Exact solution of `w' = -σ(w)` after time `t` starting from `v`.
    /// Values `v <= 0` are left unchanged since σ vanishes there.
    pub fn absorb(&self, v: f64, t: f64) -> f64 {
        if !(v > 0.0) || t <= 0.0 {
            return v;
        }
        let mut v = v;
        let mut t = t;
        let mut idx = self.pieces.partition_point(|p| p.lo <= v) - 1;
        loop {
            let piece = self.pieces[idx];
            if idx == 0 {
                return piece.shape.flow(v, t);
            }
            let tau = piece.shape.exit_time(v, piece.lo);
            if t < tau {
                return piece.shape.flow(v, t).max(piece.lo);
            }
            t -= tau;
            v = piece.lo;
            idx -= 1;
        }
    }

    /// `ln(u / σ(u))` at `u = e^{-s}`. For the power, linear and logarithmic
    /// families this is the family formula itself in log space, with no
    /// underflow of `e^{-s}`. For the logarithmic family the formula is used even
    /// above the cutoff `u*`, where `eval` follows the linear extension.
    pub fn log_ratio_at(&self, s: f64) -> f64 {
        if let Some(m) = self.truncation {
            if s > (m as f64).ln() {
                let slope = m as f64 * self.untruncated().eval(1.0 / m as f64);
                return -slope.ln();
            }
        }
        let s = match self.rescale {
            Some(Rescale { eta, k }) => s + k as f64 * (1.0 / eta).ln(),
            None => s,
        };
        match &self.family {
            Family::PowerLaw { gamma } if s >= 0.0 => -((1.0 - gamma) * s),
            Family::Linear { c } => -c.ln(),
            Family::LogCorrected { beta, gamma } if s > 0.0 => {
                let mut r = -(beta * s.ln());
                if *gamma != 0.0 {
                    r -= gamma * s.ln().abs().ln();
                }
                r
            }
            _ => {
                let u = (-s).exp();
                if u.is_normal() {
                    -s - eval_pieces(&self.base, u).ln()
                } else {
                    // below every breakpoint of a tabulated σ the bottom piece is `q u`
                    match self.base[0].shape {
                        Shape::Affine { q, .. } => -q.ln(),
                        Shape::Power { c, gamma } => -((1.0 - gamma) * s) - c.ln(),
                        Shape::Log { .. } => f64::NEG_INFINITY,
                    }
                }
            }
        }
    }

    /// Evaluates `e^{-k}/σ(e^{-k}) >= k^{-α}` for `k = 1..=k_max`, `α ∈ (0, 1/4)`.
    pub fn positivity_condition(&self, alpha: f64, k_max: u64) -> Result<ConditionReport> {
        if !(alpha > 0.0 && alpha < 0.25) {
            return Err(Error::precondition(format!(
                "positivity condition needs alpha in (0, 1/4), got {alpha}"
            )));
        }
        self.condition(alpha, k_max, |lr, thr| lr >= thr)
    }

    /// Evaluates `e^{-k}/σ(e^{-k}) <= k^{-α}` for `k = 1..=k_max`, `α > 5/2`.
    pub fn csp_condition(&self, alpha: f64, k_max: u64) -> Result<ConditionReport> {
        if !(alpha > 2.5 && alpha.is_finite()) {
            return Err(Error::precondition(format!(
                "compact-support condition needs alpha > 5/2, got {alpha}"
            )));
        }
        self.condition(alpha, k_max, |lr, thr| lr <= thr)
    }

    fn condition(
        &self,
        alpha: f64,
        k_max: u64,
        cmp: impl Fn(f64, f64) -> bool,
    ) -> Result<ConditionReport> {
        if k_max == 0 {
            return Err(Error::precondition("k_max must be >= 1"));
        }
        let verdicts = (1..=k_max)
            .map(|k| {
                let s = k as f64;
                cmp(self.log_ratio_at(s), -(alpha * s.ln()))
            })
            .collect();
        Ok(ConditionReport::from_verdicts(alpha, verdicts))
    }

    /// Partial sums of `√(e^{-k}/σ(e^{-k}))`, the series form of `∫_0^1 du/√(uσ(u)) < ∞`.
    pub fn kalashnikov_sum(&self, k_max: u64) -> Result<SeriesReport> {
        self.series(k_max, 0.5)
    }

    /// Partial sums of `[e^{-k}/σ(e^{-k})]^2`.
    pub fn critical_sum(&self, k_max: u64) -> Result<SeriesReport> {
        self.series(k_max, 2.0)
    }

    fn series(&self, k_max: u64, power: f64) -> Result<SeriesReport> {
        if k_max < 2 {
            return Err(Error::precondition("series needs k_max >= 2"));
        }
        let log_term = |k: u64| power * self.log_ratio_at(k as f64);
        let mut partial_sums = Vec::with_capacity(k_max as usize);
        let mut acc = 0.0;
        for k in 1..=k_max {
            acc += log_term(k).exp();
            partial_sums.push(acc);
        }
        let last_log = log_term(k_max);
        let half_log = log_term(k_max / 2);
        let tail_exponent = if last_log == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            (half_log - last_log) / ((k_max as f64).ln() - ((k_max / 2) as f64).ln())
        };
        let last_term = last_log.exp();
        let convergent = tail_exponent > SERIES_EXPONENT_MARGIN && last_term < SERIES_TAIL_TOL;
        let limit_estimate = convergent.then(|| {
            let tail = if tail_exponent.is_finite() {
                last_term * k_max as f64 / (tail_exponent - 1.0)
            } else {
                0.0
            };
            // geometric decay: use the ratio of consecutive terms instead
            let ratio = (last_log - log_term(k_max - 1)).exp();
            let tail = if ratio < 1.0 - 1e-3 {
                last_term * ratio / (1.0 - ratio)
            } else {
                tail
            };
            acc + tail
        });
        Ok(SeriesReport {
            partial_sums,
            last_term,
            tail_exponent,
            convergent,
            limit_estimate,
        })
    }

    /// Randomized check of `|σ(u) − σ(v)| <= (L_d ∨ σ(δ)/δ)|u − v| + σ(δ)` and
    /// `|σ(u) − σ(v)| <= L_d|u − v| + σ(|u − v|)`. Returns the largest excess over
    /// either bound beyond floating-point round-off (zero for a conforming σ).
    pub fn lipschitz_envelope_check(
        &self,
        delta: f64,
        samples: usize,
        seed: u64,
    ) -> Result<EnvelopeReport> {
        let d = self.effective_d();
        if !(delta > 0.0 && delta < d.min(1.0)) {
            return Err(Error::precondition(format!(
                "delta must lie in (0, min(d, 1)) = (0, {}), got {delta}",
                d.min(1.0)
            )));
        }
        let l = self.lipschitz;
        let s_delta = self.eval(delta);
        let k1 = l.max(s_delta / delta);
        Ok(self.sample_pairs(samples, seed, |u, v| {
            let su = self.eval(u);
            let sv = self.eval(v);
            let lhs = (su - sv).abs();
            let gap = (u - v).abs();
            let b1 = k1 * gap + s_delta;
            let b2 = l * gap + self.eval(gap);
            let slack = 16.0 * f64::EPSILON * (su.abs() + sv.abs() + b1.min(b2));
            (lhs - b1).max(lhs - b2) - slack
        }))
    }

    /// Randomized check of the global bound `|σ^(m)(u) − σ^(m)(v)| <= (mσ(1/m) ∨ L_d)|u − v|`.
    pub fn truncated_lipschitz_check(&self, samples: usize, seed: u64) -> Result<EnvelopeReport> {
        let Some(k) = self.truncated_lipschitz() else {
            return Err(Error::precondition(
                "truncated Lipschitz check needs a truncation level",
            ));
        };
        Ok(self.sample_pairs(samples, seed, |u, v| {
            let su = self.eval(u);
            let sv = self.eval(v);
            let lhs = (su - sv).abs();
            let rhs = k * (u - v).abs();
            lhs - rhs - 16.0 * f64::EPSILON * (su.abs() + sv.abs() + rhs)
        }))
    }

    fn sample_pairs(
        &self,
        samples: usize,
        seed: u64,
        excess: impl Fn(f64, f64) -> f64,
    ) -> EnvelopeReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = 4.0 * self.effective_d().max(1.0);
        let (log_lo, log_hi) = (1e-12f64.ln(), top.ln());
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            let pick = unit_f64(rng);
            let w = unit_f64(rng);
            if pick < 0.5 {
                (log_lo + (log_hi - log_lo) * w).exp()
            } else if pick < 0.85 {
                -0.5 + (top + 0.5) * w
            } else {
                // concentrate near the kinks of the piecewise representation
                let idx = ((self.pieces.len() as f64 * w) as usize).min(self.pieces.len() - 1);
                self.pieces[idx].lo * (1.0 + 1e-3 * (unit_f64(rng) - 0.5))
            }
        };
        let mut worst = 0.0;
        let mut worst_pair = (0.0, 0.0);
        for _ in 0..samples {
            let u = draw(&mut rng);
            let v = if unit_f64(&mut rng) < 0.2 {
                u * (1.0 + 1e-6 * (unit_f64(&mut rng) - 0.5))
            } else {
                draw(&mut rng)
            };
            let e = excess(u, v);
            if e > worst {
                worst = e;
                worst_pair = (u, v);
            }
        }
        EnvelopeReport {
            max_violation: worst,
            worst_pair,
            samples,
        }
    }

    /// Serializes to `key=value` lines: family, gamma, beta, c, table, d, L_d, m, eta, k.
    pub fn to_kv(&self) -> String {
        let mut lines = vec![format!("family={}", self.family.tag())];
        match &self.family {
            Family::PowerLaw { gamma } => lines.push(format!("gamma={}", kv::fmt_exact(*gamma))),
            Family::LogCorrected { beta, gamma } => {
                lines.push(format!("gamma={}", kv::fmt_exact(*gamma)));
                lines.push(format!("beta={}", kv::fmt_exact(*beta)));
            }
            Family::Linear { c } => lines.push(format!("c={}", kv::fmt_exact(*c))),
            Family::Tabulated { points } => {
                let table: Vec<String> = points
                    .iter()
                    .map(|(u, s)| format!("{}:{}", kv::fmt_exact(*u), kv::fmt_exact(*s)))
                    .collect();
                lines.push(format!("table={}", table.join(",")));
            }
        }
        lines.push(format!("d={}", kv::fmt_exact(self.d)));
        lines.push(format!("L_d={}", kv::fmt_exact(self.lipschitz)));
        if let Some(m) = self.truncation {
            lines.push(format!("m={m}"));
        }
        if let Some(Rescale { eta, k }) = self.rescale {
            lines.push(format!("eta={}", kv::fmt_exact(eta)));
            lines.push(format!("k={k}"));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_entries(&kv::parse(text)?)
    }

    /// Builds a spec from parsed entries; keys other than the spec keys are rejected.
    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let get = |key: &str| entries.iter().rev().find(|e| e.key == key);
        for e in entries {
            if !SPEC_KEYS.contains(&e.key.as_str()) {
                return Err(Error::Parse {
                    line: e.line,
                    message: format!("unknown nonlinearity key `{}`", e.key),
                });
            }
        }
        let need = |key: &str| {
            get(key).ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key `{key}`"),
            })
        };
        let family_entry = need("family")?;
        let family = match family_entry.value.as_str() {
            "power_law" => Family::PowerLaw {
                gamma: kv::parse_f64(need("gamma")?)?,
            },
            "log_corrected" => Family::LogCorrected {
                beta: kv::parse_f64(need("beta")?)?,
                gamma: get("gamma").map(kv::parse_f64).transpose()?.unwrap_or(0.0),
            },
            "linear" => Family::Linear {
                c: get("c").map(kv::parse_f64).transpose()?.unwrap_or(1.0),
            },
            "tabulated" => {
                let entry = need("table")?;
                Family::Tabulated {
                    points: parse_table(entry)?,
                }
            }
            other => {
                return Err(Error::Parse {
                    line: family_entry.line,
                    message: format!("unknown family `{other}`"),
                })
            }
        };
        let mut spec = NonlinearitySpec::new(family)?;
        match (get("d"), get("L_d")) {
            (None, None) => {}
            (d, l) => {
                let d = d.map(kv::parse_f64).transpose()?.unwrap_or(spec.d);
                let l = l.map(kv::parse_f64).transpose()?.unwrap_or(spec.lipschitz);
                if d != spec.d || l != spec.lipschitz {
                    spec = spec.with_assumption_constants(d, l)?;
                }
            }
        }
        if let Some(m) = get("m") {
            let m = kv::parse_u64(m)?;
            let m = u32::try_from(m)
                .map_err(|_| Error::config(format!("truncation level {m} too large")))?;
            spec = spec.with_truncation(m)?;
        }
        match (get("eta"), get("k")) {
            (None, None) => {}
            (Some(eta), Some(k)) => {
                let k_val = kv::parse_u64(k)?;
                let k_val = u32::try_from(k_val).map_err(|_| Error::Parse {
                    line: k.line,
                    message: "k too large".into(),
                })?;
                spec = spec.with_rescale(kv::parse_f64(eta)?, k_val)?;
            }
            (Some(e), None) | (None, Some(e)) => {
                return Err(Error::Parse {
                    line: e.line,
                    message: "rescale needs both `eta` and `k`".into(),
                })
            }
        }
        Ok(spec)
    }
}

pub const SPEC_KEYS: [&str; 10] = [
    "family", "gamma", "beta", "c", "table", "d", "L_d", "m", "eta", "k",
];

fn parse_table(entry: &Entry) -> Result<Vec<(f64, f64)>> {
    entry
        .value
        .split(',')
        .map(|pair| {
            let (u, s) = pair.split_once(':').ok_or_else(|| Error::Parse {
                line: entry.line,
                message: format!("table entry `{pair}` must be u:sigma"),
            })?;
            let parse = |x: &str| {
                x.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: entry.line,
                    message: format!("bad number `{x}` in table"),
                })
            };
            Ok((parse(u)?, parse(s)?))
        })
        .collect()
}

impl fmt::Display for NonlinearitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            Family::PowerLaw { gamma } => write!(f, "PowerLaw(gamma={gamma})")?,
            Family::LogCorrected { beta, gamma } => {
                write!(f, "LogCorrected(beta={beta}, gamma={gamma})")?
            }
            Family::Linear { c } => write!(f, "Linear(c={c})")?,
            Family::Tabulated { points } => write!(f, "Tabulated({} points)", points.len())?,
        }
        if let Some(m) = self.truncation {
            write!(f, " truncated at m={m}")?;
        }
        if let Some(Rescale { eta, k }) = self.rescale {
            write!(f, " rescaled (eta={eta}, k={k})")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sqrt_law() -> NonlinearitySpec {
        NonlinearitySpec::power_law(0.5).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(sqrt_law().eval(0.25), 0.5);
        let t = sqrt_law().with_truncation(4).unwrap();
        assert_eq!(t.eval(0.125), 0.25);
        assert_eq!(t.eval(0.25), 0.5);
        for spec in [
            sqrt_law(),
            NonlinearitySpec::linear(2.0).unwrap(),
            NonlinearitySpec::log_corrected(3.0, 1.0).unwrap(),
        ] {
            assert_eq!(spec.eval(-1.0), 0.0);
            assert_eq!(spec.eval(0.0), 0.0);
        }
    }

    #[test]
    fn power_law_linear_extension() {
        let s = NonlinearitySpec::power_law(0.25).unwrap();
        assert!((s.eval(1.0) - 1.0).abs() < 1e-15);
        assert!((s.eval(3.0) - (1.0 + 0.25 * 2.0)).abs() < 1e-15);
        assert!(NonlinearitySpec::power_law(1.5).is_err());
        assert!(NonlinearitySpec::power_law(0.0).is_err());
    }

    #[test]
    fn log_corrected_cutoff() {
        // (L - 3) ln L >= 0 first holds at L = 3
        let s = NonlinearitySpec::log_corrected(3.0, 0.0).unwrap();
        assert!((s.d() - (-3.0f64).exp()).abs() < 1e-12);
        // below the cutoff the closed form applies
        let u = (-5.0f64).exp();
        assert!((s.eval(u) - u * 125.0).abs() < 1e-12 * u * 125.0);
        // small beta: cutoff is e^{-e}
        let s = NonlinearitySpec::log_corrected(0.2, 0.0).unwrap();
        assert!((s.d() - (-std::f64::consts::E).exp()).abs() < 1e-15);
        // continuity at the cutoff
        let s = NonlinearitySpec::log_corrected(1.0, 2.0).unwrap();
        let u = s.d();
        assert!((s.eval(u * (1.0 - 1e-12)) - s.eval(u * (1.0 + 1e-12))).abs() < 1e-9);
    }

    #[test]
    fn tabulated_validation() {
        assert!(NonlinearitySpec::tabulated(vec![(0.1, 0.5), (0.2, 0.4)]).is_err());
        assert!(NonlinearitySpec::tabulated(vec![(0.2, 0.5), (0.1, 0.6)]).is_err());
        assert!(NonlinearitySpec::tabulated(vec![(0.0, 0.1), (0.1, 0.6)]).is_err());
        let ok = NonlinearitySpec::tabulated(vec![(0.1, 0.3), (0.5, 0.8), (1.0, 1.0), (2.0, 1.5)])
            .unwrap();
        assert!((ok.eval(0.05) - 0.15).abs() < 1e-15);
        assert!((ok.eval(0.3) - 0.55).abs() < 1e-15);
        assert!((ok.eval(3.0) - 2.0).abs() < 1e-15);
        // increasing ratio below a user-supplied d is rejected
        let convex = NonlinearitySpec::tabulated(vec![(0.1, 0.01), (0.2, 0.1)]).unwrap();
        assert!(convex.clone().with_assumption_constants(0.5, 10.0).is_err());
        assert!(convex.d() <= 0.1 + 1e-15);
    }

    #[test]
    fn zero_table_is_allowed() {
        let z = NonlinearitySpec::tabulated(vec![(1.0, 0.0), (2.0, 0.0)]).unwrap();
        for u in [0.1, 1.0, 5.0] {
            assert_eq!(z.eval(u), 0.0);
        }
    }

    #[test]
    fn rescale_matches_definition() {
        let s = NonlinearitySpec::log_corrected(2.0, 0.5).unwrap();
        let r = s.clone().with_rescale(0.2, 3).unwrap();
        for u in [1e-6, 0.003, 0.1, 0.7, 4.0, 30.0] {
            let expect = 0.2f64.powi(-3) * s.eval(0.2f64.powi(3) * u);
            assert!(
                (r.eval(u) - expect).abs() <= 1e-12 * expect.abs().max(1e-300),
                "u={u}"
            );
        }
        assert!((r.effective_d() - s.d() * 125.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_applies_after_rescale() {
        let s = sqrt_law().with_rescale(0.5, 2).unwrap();
        let both = s.clone().with_truncation(8).unwrap();
        let slope = 8.0 * s.eval(0.125);
        assert!((both.eval(0.05) - slope * 0.05).abs() < 1e-15);
        assert_eq!(both.eval(0.3), s.eval(0.3));
    }

    #[test]
    fn condition_examples() {
        let b02 = NonlinearitySpec::log_corrected(0.2, 0.0).unwrap();
        assert!(b02
            .positivity_condition(0.2, 10_000)
            .unwrap()
            .holds_everywhere());
        let b3 = NonlinearitySpec::log_corrected(3.0, 0.0).unwrap();
        let r = b3.positivity_condition(0.2, 1000).unwrap();
        assert_eq!(r.first_failure, Some(2));
        assert!(b3.csp_condition(3.0, 1000).unwrap().holds_everywhere());
        let lin = NonlinearitySpec::linear(1.0).unwrap();
        assert!(lin
            .positivity_condition(0.1, 1000)
            .unwrap()
            .holds_everywhere());
        let c = lin.csp_condition(3.0, 1000).unwrap();
        assert!(c.verdicts[0]);
        assert!(c.verdicts[1..].iter().all(|v| !v));
        assert_eq!(c.holds_from, None);
        let sq = sqrt_law().csp_condition(3.0, 1000).unwrap();
        let k2 = sq.holds_from.unwrap();
        // e^{-k/2} <= k^{-3} exactly from k2 on
        assert!((-(k2 as f64) / 2.0) <= -3.0 * (k2 as f64).ln());
        assert!((-(k2 as f64 - 1.0) / 2.0) > -3.0 * (k2 as f64 - 1.0).ln());
    }

    #[test]
    fn condition_preconditions() {
        let s = sqrt_law();
        assert!(s.positivity_condition(0.3, 10).is_err());
        assert!(s.csp_condition(2.5, 10).is_err());
    }

    #[test]
    fn series_examples() {
        let k = sqrt_law().kalashnikov_sum(10_000).unwrap();
        let exact = (-0.25f64).exp() / (1.0 - (-0.25f64).exp());
        assert!(k.convergent);
        assert!((k.partial_sums.last().unwrap() - exact).abs() < 1e-12);
        let lin = NonlinearitySpec::linear(1.0).unwrap();
        let k = lin.kalashnikov_sum(10_000).unwrap();
        assert!(!k.convergent);
        assert_eq!(k.partial_sums[99], 100.0);
        let c = lin.critical_sum(500).unwrap();
        assert!(!c.convergent);
        assert_eq!(c.partial_sums[499], 500.0);
        let b3 = NonlinearitySpec::log_corrected(3.0, 0.0)
            .unwrap()
            .kalashnikov_sum(10_000)
            .unwrap();
        assert!(b3.convergent);
        assert!((b3.tail_exponent - 1.5).abs() < 1e-9);
        let basel = NonlinearitySpec::log_corrected(1.0, 0.0)
            .unwrap()
            .critical_sum(10_000)
            .unwrap();
        assert!(basel.convergent);
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((basel.limit_estimate.unwrap() - pi2_6).abs() < 1e-6);
        let harmonic = NonlinearitySpec::log_corrected(0.5, 0.0)
            .unwrap()
            .critical_sum(10_000)
            .unwrap();
        assert!(!harmonic.convergent);
    }

    #[test]
    fn absorption_flows() {
        let lin = NonlinearitySpec::linear(1.0).unwrap();
        assert!((lin.absorb(2.0, 0.3) - 2.0 * (-0.3f64).exp()).abs() < 1e-15);
        // w' = -sqrt(w): sqrt(w) = sqrt(v) - t/2
        let s = sqrt_law();
        assert!((s.absorb(0.81, 0.2) - 0.64).abs() < 1e-14);
        assert_eq!(s.absorb(0.01, 0.3), 0.0);
        // crossing from the linear extension into the power piece
        let v = 2.0;
        let t1 = (1.5f64 / 1.0).ln() / 0.5; // 0.5 + 0.5 w from 2 to 1
        let w = s.absorb(v, t1 + 0.4);
        assert!((w - 0.64).abs() < 1e-12, "{w}");
        // implicit reference: integrate with tiny Euler steps
        for spec in [
            NonlinearitySpec::log_corrected(3.0, 0.0).unwrap(),
            NonlinearitySpec::log_corrected(1.5, 1.0).unwrap(),
            sqrt_law().with_truncation(5).unwrap(),
        ] {
            let v0 = 0.3;
            let t = 0.05;
            let mut w = v0;
            let n = 200_000;
            for _ in 0..n {
                w = (w - t / n as f64 * spec.eval(w)).max(0.0);
            }
            let exact = spec.absorb(v0, t);
            assert!((exact - w).abs() < 1e-5, "{spec}: {exact} vs {w}");
        }
    }

    #[test]
    fn serialization_round_trip() {
        let specs = vec![
            sqrt_law(),
            NonlinearitySpec::log_corrected(3.0, 0.5)
                .unwrap()
                .with_truncation(16)
                .unwrap(),
            NonlinearitySpec::linear(0.7)
                .unwrap()
                .with_rescale(0.1, 4)
                .unwrap(),
            NonlinearitySpec::tabulated(vec![(0.1, 0.3), (0.5, 0.8)]).unwrap(),
        ];
        for s in specs {
            let back = NonlinearitySpec::from_kv(&s.to_kv()).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_kv(), s.to_kv());
        }
        let err = NonlinearitySpec::from_kv("family=power_law\ngamma=0.5\nfoo=1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }
}
