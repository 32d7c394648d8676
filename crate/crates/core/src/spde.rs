//! Explicit Euler–Maruyama solver for `∂_t u = ½∂²_x u + σ(u)Ẇ` on `[-L, L]`
//! with zero Dirichlet data:
//!
//! `u_{n+1,i} = u_{n,i} + (Δt/2)(u_{n,i+1} − 2u_{n,i} + u_{n,i−1})/Δx² + σ(u_{n,i}) ΔW_{n,i}/Δx`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Field, GridConfig};
use crate::noise::{NoisePlan, NoiseRecord};
use crate::nonlinearity::NonlinearitySpec;

/// Which steps are stored. Step 0 (the initial data) is always stored.
#[derive(Debug, Clone, PartialEq)]
pub enum SnapshotSchedule {
    Times(Vec<f64>),
    EveryStep,
    Every(usize),
}

impl SnapshotSchedule {
    pub fn steps(&self, grid: &GridConfig) -> Result<Vec<usize>> {
        let n = grid.n_steps();
        let mut steps = match self {
            SnapshotSchedule::EveryStep => (0..=n).collect(),
            SnapshotSchedule::Every(k) => {
                if *k == 0 {
                    return Err(Error::config("snapshot stride must be >= 1"));
                }
                let mut v: Vec<usize> = (0..=n).step_by(*k).collect();
                if *v.last().unwrap() != n {
                    v.push(n);
                }
                v
            }
            SnapshotSchedule::Times(ts) => {
                let mut v = vec![0];
                for &t in ts {
                    let s = grid.step_at(t).ok_or_else(|| {
                        Error::config(format!(
                            "snapshot time {t} is not a step multiple in [0, T] (dt = {})",
                            grid.dt()
                        ))
                    })?;
                    v.push(s);
                }
                v
            }
        };
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub schedule: SnapshotSchedule,
    pub record_noise: bool,
}

impl RunOptions {
    pub fn snapshots(schedule: SnapshotSchedule) -> Self {
        RunOptions {
            schedule,
            record_noise: false,
        }
    }

    pub fn recorded(schedule: SnapshotSchedule) -> Self {
        RunOptions {
            schedule,
            record_noise: true,
        }
    }
}

/// First time `u` at node 1 or `n_x − 1` exceeded `1e-8 max(u0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryAlert {
    pub step: usize,
    pub node: usize,
    pub value: f64,
}

pub const BOUNDARY_ALERT_REL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monitor {
    /// Minimum over every step and node, not only the stored snapshots.
    pub global_min: f64,
    pub boundary_alert: Option<BoundaryAlert>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: GridConfig,
    pub spec: NonlinearitySpec,
    pub seed: u64,
    pub path: u64,
    pub snapshots: Vec<Field>,
    /// Step index of each snapshot.
    pub steps: Vec<usize>,
    pub noise: Option<Arc<NoiseRecord>>,
    pub monitor: Monitor,
}

impl Trajectory {
    pub fn initial(&self) -> &Field {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Field {
        self.snapshots.last().unwrap()
    }

    pub fn at_time(&self, t: f64) -> Option<&Field> {
        let step = self.grid.step_at(t)?;
        self.steps
            .binary_search(&step)
            .ok()
            .map(|i| &self.snapshots[i])
    }

    /// True when every step `0..=N` is stored.
    pub fn has_every_step(&self) -> bool {
        self.steps.len() == self.grid.n_steps() + 1
    }
}

/// One explicit step. `increments` holds `ΔW_{n,i}` for interior nodes.
pub fn step(
    u: &Field,
    spec: &NonlinearitySpec,
    increments: &[f64],
    grid: &GridConfig,
) -> Result<Field> {
    if u.values.len() != grid.n_nodes() || increments.len() != grid.n_x() - 1 {
        return Err(Error::precondition(
            "field or increment length does not match the grid",
        ));
    }
    let mut out = vec![0.0; grid.n_nodes()];
    let n = grid.step_at(u.t).unwrap_or(0);
    step_into(&u.values, &mut out, spec, increments, grid, n)?;
    Ok(Field {
        t: u.t + grid.dt(),
        values: out,
    })
}

fn step_into(
    u: &[f64],
    out: &mut [f64],
    spec: &NonlinearitySpec,
    dw: &[f64],
    grid: &GridConfig,
    n: usize,
) -> Result<()> {
    let dx = grid.dx();
    let r = 0.5 * grid.dt() / (dx * dx);
    let inv_dx = 1.0 / dx;
    let last = u.len() - 1;
    out[0] = 0.0;
    out[last] = 0.0;
    for i in 1..last {
        let ui = u[i];
        let mut v = ui + r * (u[i + 1] - 2.0 * ui + u[i - 1]);
        let w = dw[i - 1];
        if w != 0.0 {
            v += spec.eval(ui) * w * inv_dx;
        }
        if grid.clamp_negative && v < 0.0 {
            v = 0.0;
        }
        out[i] = v;
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::BlowUp {
            step: n + 1,
            node: i,
            x: grid.x(i),
        });
    }
    Ok(())
}

fn check_inputs(u0: &Field, grid: &GridConfig, plan: &NoisePlan) -> Result<()> {
    if u0.values.len() != grid.n_nodes() {
        return Err(Error::config(format!(
            "initial data has {} values, grid has {} nodes",
            u0.values.len(),
            grid.n_nodes()
        )));
    }
    if let Some(i) = u0.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::config(format!(
            "initial data is not finite at node {i}"
        )));
    }
    let pg = &plan.grid;
    if pg.n_x() != grid.n_x()
        || pg.dt() != grid.dt()
        || pg.dx() != grid.dx()
        || pg.n_steps() != grid.n_steps()
    {
        return Err(Error::config("noise plan and solver use different grids"));
    }
    grid.check_domain(u0)
}

/// Advances several solutions in lockstep on one shared noise stream. The
/// observer sees all states after every step (and at step 0).
fn run_lockstep(
    u0s: &[&Field],
    specs: &[&NonlinearitySpec],
    grid: &GridConfig,
    plan: &NoisePlan,
    opts: &RunOptions,
    mut observer: impl FnMut(usize, &[Vec<f64>]),
) -> Result<Vec<Trajectory>> {
    debug_assert_eq!(u0s.len(), specs.len());
    for u0 in u0s {
        check_inputs(u0, grid, plan)?;
    }
    let stored = opts.schedule.steps(grid)?;
    let k = u0s.len();
    let mut states: Vec<Vec<f64>> = u0s
        .iter()
        .map(|u| {
            let mut v = u.values.clone();
            let last = v.len() - 1;
            v[0] = 0.0;
            v[last] = 0.0;
            v
        })
        .collect();
    let mut scratch = vec![vec![0.0; grid.n_nodes()]; k];
    let mut snapshots: Vec<Vec<Field>> = vec![Vec::with_capacity(stored.len()); k];
    let mut monitors: Vec<Monitor> = states
        .iter()
        .map(|s| Monitor {
            global_min: s.iter().copied().fold(f64::INFINITY, f64::min),
            boundary_alert: None,
        })
        .collect();
    let alert_levels: Vec<f64> = u0s
        .iter()
        .map(|u| BOUNDARY_ALERT_REL * u.max().max(0.0))
        .collect();
    let mut record = opts.record_noise.then(|| plan.empty_record());
    let mut dw = vec![0.0; plan.n_cells()];
    let mut next = 0;
    let push = |snapshots: &mut Vec<Vec<Field>>, states: &[Vec<f64>], step: usize| {
        for (s, state) in snapshots.iter_mut().zip(states) {
            s.push(Field {
                t: grid.t(step),
                values: state.clone(),
            });
        }
    };
    observer(0, &states);
    if stored.first() == Some(&0) {
        push(&mut snapshots, &states, 0);
        next = 1;
    }
    let last_node = grid.n_x() - 1;
    for n in 0..grid.n_steps() {
        plan.fill(n, &mut dw)?;
        if let Some(rec) = record.as_mut() {
            rec.push_row(&dw);
        }
        for j in 0..k {
            step_into(&states[j], &mut scratch[j], specs[j], &dw, grid, n)?;
            std::mem::swap(&mut states[j], &mut scratch[j]);
            let m = &mut monitors[j];
            m.global_min = states[j].iter().copied().fold(m.global_min, f64::min);
            if m.boundary_alert.is_none() {
                for node in [1, last_node] {
                    let v = states[j][node];
                    if v.abs() > alert_levels[j] {
                        m.boundary_alert = Some(BoundaryAlert {
                            step: n + 1,
                            node,
                            value: v,
                        });
                        break;
                    }
                }
            }
        }
        observer(n + 1, &states);
        if next < stored.len() && stored[next] == n + 1 {
            push(&mut snapshots, &states, n + 1);
            next += 1;
        }
    }
    let noise = record.map(Arc::new);
    Ok(snapshots
        .into_iter()
        .zip(monitors)
        .zip(specs)
        .map(|((snaps, monitor), spec)| Trajectory {
            grid: *grid,
            spec: (*spec).clone(),
            seed: plan.seed,
            path: plan.path,
            snapshots: snaps,
            steps: stored.clone(),
            noise: noise.clone(),
            monitor,
        })
        .collect())
}

pub fn simulate(
    u0: &Field,
    spec: &NonlinearitySpec,
    grid: &GridConfig,
    plan: &NoisePlan,
    opts: &RunOptions,
) -> Result<Trajectory> {
    Ok(run_lockstep(&[u0], &[spec], grid, plan, opts, |_, _| {})?
        .pop()
        .unwrap())
}

/// [`simulate`] with `σ` replaced by its truncation at level `m`.
pub fn simulate_truncated(
    u0: &Field,
    spec: &NonlinearitySpec,
    m: u32,
    grid: &GridConfig,
    plan: &NoisePlan,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let truncated = spec.clone().with_truncation(m)?;
    simulate(u0, &truncated, grid, plan, opts)
}

/// Two solutions driven by the same increments. Requires `u0_hi >= u0_lo` nodewise.
pub fn coupled_simulate(
    u0_hi: &Field,
    u0_lo: &Field,
    spec: &NonlinearitySpec,
    grid: &GridConfig,
    plan: &NoisePlan,
    opts: &RunOptions,
) -> Result<(Trajectory, Trajectory)> {
    if u0_hi.values.len() != u0_lo.values.len() {
        return Err(Error::precondition(
            "coupled initial data have different lengths",
        ));
    }
    if let Some(i) = u0_hi
        .values
        .iter()
        .zip(&u0_lo.values)
        .position(|(h, l)| h < l)
    {
        return Err(Error::precondition(format!("u0_hi < u0_lo at node {i}")));
    }
    let mut out = run_lockstep(&[u0_hi, u0_lo], &[spec, spec], grid, plan, opts, |_, _| {})?;
    let lo = out.pop().unwrap();
    let hi = out.pop().unwrap();
    Ok((hi, lo))
}

/// Runs `f(path)` for `path in 0..n_paths` on the current rayon pool, returning
/// results in path order. The first error in path order is returned.
pub fn ensemble<T: Send>(
    n_paths: usize,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..n_paths as u64).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub m_list: Vec<u32>,
    pub reference_m: u32,
    /// `sup_distance[p][j]`: max over steps and nodes of `|u^{(m_j)} − u^{(ref)}|` on path `p`.
    pub sup_distance: Vec<Vec<f64>>,
    /// `l2_squared[p][j]`: `Σ_{n,i} |u^{(m_j)} − u^{(ref)}|² ΔxΔt` on path `p`.
    pub l2_squared: Vec<Vec<f64>>,
}

impl ConvergenceReport {
    pub fn n_paths(&self) -> usize {
        self.sup_distance.len()
    }

    /// Ensemble space-time `L²(Ω × [0,T] × ℝ)` distance per `m`.
    pub fn ensemble_l2(&self) -> Vec<f64> {
        let p = self.n_paths() as f64;
        (0..self.m_list.len())
            .map(|j| (self.l2_squared.iter().map(|row| row[j]).sum::<f64>() / p).sqrt())
            .collect()
    }

    /// Largest per-path sup distance per `m`.
    pub fn worst_sup(&self) -> Vec<f64> {
        (0..self.m_list.len())
            .map(|j| {
                self.sup_distance
                    .iter()
                    .map(|row| row[j])
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Truncation study: for each path, all levels in `m_list` and `reference_m`
/// run in lockstep on that path's noise.
pub fn convergence_study(
    u0: &Field,
    spec: &NonlinearitySpec,
    grid: &GridConfig,
    plan: &NoisePlan,
    n_paths: usize,
    m_list: &[u32],
    reference_m: u32,
) -> Result<ConvergenceReport> {
    if m_list.is_empty() || n_paths == 0 {
        return Err(Error::precondition(
            "convergence study needs at least one level and one path",
        ));
    }
    if m_list.iter().any(|&m| m >= reference_m) {
        return Err(Error::precondition(format!(
            "reference level {reference_m} must exceed every level in {m_list:?}"
        )));
    }
    let mut specs = Vec::with_capacity(m_list.len() + 1);
    for &m in m_list.iter().chain(std::iter::once(&reference_m)) {
        specs.push(spec.clone().with_truncation(m)?);
    }
    let spec_refs: Vec<&NonlinearitySpec> = specs.iter().collect();
    let opts = RunOptions::snapshots(SnapshotSchedule::Times(vec![]));
    let k = m_list.len();
    let cell = grid.dx() * grid.dt();
    let rows = ensemble(n_paths, |p| {
        let path_plan = plan.with_path(p);
        let u0s = vec![u0; k + 1];
        let mut sup = vec![0.0f64; k];
        let mut l2 = vec![0.0f64; k];
        run_lockstep(&u0s, &spec_refs, grid, &path_plan, &opts, |n, states| {
            let reference = &states[k];
            for j in 0..k {
                let mut s = 0.0f64;
                let mut q = 0.0;
                for (a, b) in states[j].iter().zip(reference) {
                    let d = (a - b).abs();
                    s = s.max(d);
                    q += d * d;
                }
                sup[j] = sup[j].max(s);
                if n > 0 {
                    l2[j] += q * cell;
                }
            }
        })?;
        Ok((sup, l2))
    })?;
    let (sup_distance, l2_squared) = rows.into_iter().unzip();
    Ok(ConvergenceReport {
        m_list: m_list.to_vec(),
        reference_m,
        sup_distance,
        l2_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel;

    fn grid(n_x: usize, horizon: f64) -> GridConfig {
        GridConfig::auto(8.0, n_x, horizon).unwrap()
    }

    #[test]
    fn zero_noise_is_heat_flow() {
        let g = grid(512, 0.5);
        let u0 = Field::indicator(&g, -1.0, 1.0, 1.0);
        let spec = NonlinearitySpec::linear(1.0).unwrap();
        let tr = simulate(
            &u0,
            &spec,
            &g,
            &NoisePlan::zero(g),
            &RunOptions::snapshots(SnapshotSchedule::Times(vec![0.5])),
        )
        .unwrap();
        let u = tr.last();
        let mut err = 0.0f64;
        for i in g.nodes_in(-4.0, 4.0) {
            let exact = kernel::heat_flow_interval(0.5, -1.0, 1.0, g.x(i)).unwrap();
            err = err.max((u.values[i] - exact).abs());
        }
        assert!(err < 1e-4, "{err}");
        assert!((u.mass(&g) - u0.mass(&g)).abs() < 1e-12);
    }

    #[test]
    fn zero_state_is_absorbing() {
        let g = grid(128, 0.1);
        let spec = NonlinearitySpec::power_law(0.5).unwrap();
        let plan = NoisePlan::fresh(5, 0, g);
        let tr = simulate(
            &Field::zeros(&g),
            &spec,
            &g,
            &plan,
            &RunOptions::snapshots(SnapshotSchedule::Every(10)),
        )
        .unwrap();
        assert!(tr
            .snapshots
            .iter()
            .all(|f| f.values.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_step_matches_formula() {
        let g = grid(64, 0.01);
        let spec = NonlinearitySpec::power_law(0.5).unwrap();
        let u0 = Field::indicator(&g, -1.0, 1.0, 2.0);
        let plan = NoisePlan::fresh(1, 0, g);
        let dw = plan.increments(0).unwrap();
        let u1 = step(&u0, &spec, &dw, &g).unwrap();
        let (dx, dt) = (g.dx(), g.dt());
        for i in 1..g.n_x() {
            let u = &u0.values;
            let expect = u[i]
                + 0.5 * dt * (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx)
                + spec.eval(u[i]) * dw[i - 1] / dx;
            assert_eq!(u1.values[i], expect);
        }
    }

    #[test]
    fn snapshots_and_records() {
        let g = grid(64, 0.05);
        let spec = NonlinearitySpec::linear(1.0).unwrap();
        let u0 = Field::indicator(&g, -1.0, 1.0, 1.0);
        let plan = NoisePlan::fresh(3, 1, g);
        let tr = simulate(
            &u0,
            &spec,
            &g,
            &plan,
            &RunOptions::recorded(SnapshotSchedule::EveryStep),
        )
        .unwrap();
        assert!(tr.has_every_step());
        assert_eq!(tr.initial(), &u0);
        assert_eq!(tr.noise.as_ref().unwrap().n_steps as usize, g.n_steps());
        // replaying the record reproduces the run bit for bit
        let replay = NoisePlan::replay(tr.noise.clone().unwrap(), g).unwrap();
        let again = simulate(
            &u0,
            &spec,
            &g,
            &replay,
            &RunOptions::snapshots(SnapshotSchedule::EveryStep),
        )
        .unwrap();
        assert_eq!(tr.snapshots, again.snapshots);
        assert!(SnapshotSchedule::Times(vec![0.0123]).steps(&g).is_err());
    }

    #[test]
    fn coupling_identical_and_zero_lower() {
        let g = grid(128, 0.1);
        let spec = NonlinearitySpec::linear(1.0).unwrap();
        let u0 = Field::indicator(&g, -1.0, 1.0, 1.0);
        let plan = NoisePlan::fresh(11, 0, g);
        let opts = RunOptions::snapshots(SnapshotSchedule::Every(5));
        let (a, b) = coupled_simulate(&u0, &u0, &spec, &g, &plan, &opts).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        let (_, lo) = coupled_simulate(&u0, &Field::zeros(&g), &spec, &g, &plan, &opts).unwrap();
        assert!(lo
            .snapshots
            .iter()
            .all(|f| f.values.iter().all(|v| *v == 0.0)));
        assert!(coupled_simulate(&Field::zeros(&g), &u0, &spec, &g, &plan, &opts).is_err());
    }

    #[test]
    fn truncation_covering_the_range_is_linear() {
        // with every value below 1/m = 1, σ^(1)(u) = σ(1) u = u along the whole path
        let g = grid(128, 0.01);
        let spec = NonlinearitySpec::power_law(0.5).unwrap();
        let u0 = Field::indicator(&g, -1.0, 1.0, 0.25);
        let plan = NoisePlan::fresh(4, 0, g);
        let opts = RunOptions::snapshots(SnapshotSchedule::EveryStep);
        let a = simulate_truncated(&u0, &spec, 1, &g, &plan, &opts).unwrap();
        assert!(a.snapshots.iter().all(|f| f.max() < 1.0));
        let b = simulate(
            &u0,
            &NonlinearitySpec::linear(1.0).unwrap(),
            &g,
            &plan,
            &opts,
        )
        .unwrap();
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn levels_one_and_two_agree_above_one() {
        let s = NonlinearitySpec::power_law(0.5).unwrap();
        let (a, b) = (
            s.clone().with_truncation(1).unwrap(),
            s.with_truncation(2).unwrap(),
        );
        for u in [1.0, 1.5, 3.0] {
            assert_eq!(a.eval(u), b.eval(u));
        }
        assert_ne!(a.eval(0.3), b.eval(0.3));
    }

    #[test]
    fn unstable_and_narrow_grids_rejected() {
        assert!(GridConfig::new(8.0, 512, 1e-3, 0.5).is_err());
        let g = GridConfig::auto(3.0, 96, 0.5).unwrap();
        let u0 = Field::indicator(&g, -1.0, 1.0, 1.0);
        let spec = NonlinearitySpec::linear(1.0).unwrap();
        let r = simulate(
            &u0,
            &spec,
            &g,
            &NoisePlan::zero(g),
            &RunOptions::snapshots(SnapshotSchedule::Times(vec![])),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn blow_up_is_reported() {
        let g = GridConfig::auto(8.0, 64, 0.5).unwrap();
        let spec = NonlinearitySpec::linear(1e200).unwrap();
        let u0 = Field::indicator(&g, -1.0, 1.0, 1e100);
        let plan = NoisePlan::fresh(0, 0, g);
        let r = simulate(
            &u0,
            &spec,
            &g,
            &plan,
            &RunOptions::snapshots(SnapshotSchedule::Times(vec![])),
        );
        assert!(matches!(r, Err(Error::BlowUp { .. })), "{r:?}");
    }
}
