//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

use std::path::Path;
use std::process::Command;

use she_core::diagnostics::{self, positivity_window_min, support_radius_rel, weak_residual};
use she_core::kernel::{
    self, heat_flow_interval, heat_kernel, kernel_l2_mass, kernel_power_quadrature,
    semigroup_quadrature,
};
use she_core::noise::NoisePlan;
use she_core::pde::{
    deterministic_support, kalashnikov_integrals, solve_deterministic, IntegralValue, EXACT_ZERO,
};
use she_core::spde::{
    convergence_study, coupled_simulate, ensemble, simulate, RunOptions, SnapshotSchedule,
};
use she_core::{AbsorptionScheme, Field, GridConfig, NonlinearitySpec};

const KERNEL_QUAD_TOL: f64 = 1e-8;
const SEMIGROUP_TOL: f64 = 1e-6;
const PROPAGATION_LIMIT_TOL: f64 = 0.02;
const ENVELOPE_PAIRS: usize = 100_000;
const INTEGRAL_TOL: f64 = 1e-6;
const SUPPORT_RADIUS_MAX: f64 = 3.0;
const LINEAR_REL_TOL: f64 = 1e-4;
const ZERO_NOISE_TOL: f64 = 1e-4;
const WEAK_RESIDUAL_TOL: f64 = 1e-10;
const VIOLATED_FRACTION_MAX: f64 = 1e-3;
const WORST_VIOLATION_REL: f64 = 1e-6;
const CONVERGENCE_RATIO_MAX: f64 = 0.2;
const STOCHASTIC_PATHS: usize = 16;
const MIN_GOOD_PATHS: usize = 15;
const THETA_POS: f64 = 1e-12;
const R_PLUS_MAX: f64 = 5.0;
const BOUNDARY_R: f64 = 6.0;
const BOUNDARY_MEAN_MAX: f64 = 1e-6;

fn report(id: &str, what: &str, ok: bool, detail: String) {
    println!(
        "[{}] {id} {what}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "{id} failed: {detail}");
}

fn unit_indicator(grid: &GridConfig) -> Field {
    Field::indicator(grid, -1.0, 1.0, 1.0)
}

#[test]
fn ac01_kernel_identities() {
    let mut worst_mass = 0.0f64;
    let mut worst_l2 = 0.0f64;
    for t in [0.1, 1.0, 4.0] {
        worst_mass = worst_mass.max((kernel_power_quadrature(t, 1).unwrap() - 1.0).abs());
        worst_l2 = worst_l2
            .max((kernel_power_quadrature(t, 2).unwrap() - kernel_l2_mass(t).unwrap()).abs());
    }
    let mut worst_semi = 0.0f64;
    for (t, s) in [(0.1, 0.3), (1.0, 1.0), (4.0, 0.5)] {
        for x in [-2.0, 0.0, 0.7, 3.0] {
            let err =
                (semigroup_quadrature(t, s, x).unwrap() - heat_kernel(t + s, x).unwrap()).abs();
            worst_semi = worst_semi.max(err);
        }
    }
    let ok =
        worst_mass < KERNEL_QUAD_TOL && worst_l2 < KERNEL_QUAD_TOL && worst_semi < SEMIGROUP_TOL;
    report(
        "AC-01",
        "kernel identities",
        ok,
        format!("mass err {worst_mass:.2e}, L2 err {worst_l2:.2e}, semigroup err {worst_semi:.2e}"),
    );
}

#[test]
fn ac02_propagation_bound() {
    let reports: Vec<_> = (1..=100)
        .map(|j| kernel::propagation_lower_bound(1.0, 1.0, 0.2, 0.5, 10 * j).unwrap())
        .collect();
    let m_star = kernel::first_satisfying_m(&reports);
    let holds_above =
        m_star.is_some_and(|ms| reports.iter().filter(|r| r.m >= ms).all(|r| r.satisfied));
    let last = reports.last().unwrap();
    let near_half = (last.inf_value - 0.5).abs() < PROPAGATION_LIMIT_TOL;
    report(
        "AC-02",
        "propagation lower bound",
        holds_above && near_half,
        format!("m* = {m_star:?}, inf at m=1000 = {:.5}", last.inf_value),
    );
}

#[test]
fn ac03_nonlinearity_envelopes() {
    let specs = [
        ("PowerLaw(1/2)", NonlinearitySpec::power_law(0.5).unwrap()),
        (
            "LogCorrected(3,0)",
            NonlinearitySpec::log_corrected(3.0, 0.0).unwrap(),
        ),
        (
            "Tabulated",
            NonlinearitySpec::tabulated(vec![
                (0.01, 0.1),
                (0.1, 0.3),
                (0.5, 0.7),
                (1.0, 1.0),
                (2.0, 1.6),
            ])
            .unwrap(),
        ),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, spec) in &specs {
        let delta = 0.5 * spec.effective_d().min(1.0);
        let env = spec
            .lipschitz_envelope_check(delta, ENVELOPE_PAIRS, 11)
            .unwrap();
        let mut worst = env.max_violation;
        for m in [2, 10, 1000] {
            let t = spec
                .clone()
                .with_truncation(m)
                .unwrap()
                .truncated_lipschitz_check(ENVELOPE_PAIRS, 12)
                .unwrap();
            worst = worst.max(t.max_violation);
        }
        ok &= env.samples == ENVELOPE_PAIRS && worst <= 0.0;
        detail.push(format!("{name} max excess {worst:.2e}"));
    }
    report("AC-03", "nonlinearity envelopes", ok, detail.join(", "));
}

#[test]
fn ac04_condition_arithmetic() {
    let weak = NonlinearitySpec::log_corrected(0.2, 0.0).unwrap();
    let strong = NonlinearitySpec::log_corrected(3.0, 0.0).unwrap();
    let k_max = 1_000_000;
    let pos_weak = weak
        .positivity_condition(0.2, k_max)
        .unwrap()
        .holds_everywhere();
    let csp_weak_fails = [2.51, 3.0, 5.0, 10.0, 100.0]
        .iter()
        .all(|&a| weak.csp_condition(a, k_max).unwrap().holds_from.is_none());
    let csp_strong = strong.csp_condition(3.0, k_max).unwrap().holds_everywhere();
    let pos_strong = strong.positivity_condition(0.2, k_max).unwrap();
    let fails_from_2 = pos_strong.verdicts[0] && pos_strong.verdicts[1..].iter().all(|v| !v);
    report(
        "AC-04",
        "condition arithmetic",
        pos_weak && csp_weak_fails && csp_strong && fails_from_2,
        format!(
            "beta=0.2 pos {pos_weak}, csp fails for all alpha {csp_weak_fails}; beta=3 csp {csp_strong}, pos fails from k=2 {fails_from_2}"
        ),
    );
}

#[test]
fn ac05_kalashnikov_integrals() {
    let p = kalashnikov_integrals(&NonlinearitySpec::power_law(0.5).unwrap()).unwrap();
    let l = kalashnikov_integrals(&NonlinearitySpec::linear(1.0).unwrap()).unwrap();
    let csp = p.csp_integral.value().unwrap_or(f64::NAN);
    let pos = p.positivity_integral.value().unwrap_or(f64::NAN);
    let ok = (csp - 4.0).abs() < INTEGRAL_TOL
        && (pos - 2.0).abs() < INTEGRAL_TOL
        && l.csp_integral == IntegralValue::Divergent
        && l.positivity_integral == IntegralValue::Divergent;
    report(
        "AC-05",
        "Kalashnikov integrals",
        ok,
        format!(
            "power law csp {csp:.9}, pos {pos:.9}; linear {:?}/{:?}",
            l.csp_integral, l.positivity_integral
        ),
    );
}

fn deterministic_run(spec: &NonlinearitySpec, n_x: usize) -> (GridConfig, Field) {
    let grid = GridConfig::auto(8.0, n_x, 1.0).unwrap();
    let tr = solve_deterministic(
        &unit_indicator(&grid),
        spec,
        &grid,
        &RunOptions::snapshots(SnapshotSchedule::Times(vec![1.0])),
        AbsorptionScheme::Split,
    )
    .unwrap();
    (grid, tr.last().clone())
}

#[test]
fn ac06_deterministic_dichotomy() {
    let power = NonlinearitySpec::power_law(0.5).unwrap();
    let (g1, u1) = deterministic_run(&power, 1024);
    let (g2, u2) = deterministic_run(&power, 2048);
    let s1 = deterministic_support(&u1, &g1).unwrap();
    let s2 = deterministic_support(&u2, &g2).unwrap();
    let r1 = s1.0.abs().max(s1.1);
    let r2 = s2.0.abs().max(s2.1);
    let zeros_outside = (0..g1.n_nodes())
        .filter(|&i| g1.x(i).abs() > r1)
        .all(|i| u1.values[i].abs() < EXACT_ZERO);
    let stable = (r1 - r2).abs() <= 2.0 * g1.dx();
    let power_ok = zeros_outside && r1 < SUPPORT_RADIUS_MAX && stable;

    let (g, u) = deterministic_run(&NonlinearitySpec::linear(1.0).unwrap(), 1024);
    let mut worst_point = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut exact_max = 0.0f64;
    let mut positive = true;
    for i in g.nodes_in(-5.0, 5.0) {
        let exact = (-1.0f64).exp() * heat_flow_interval(1.0, -1.0, 1.0, g.x(i)).unwrap();
        let err = (u.values[i] - exact).abs();
        worst_point = worst_point.max(err / exact);
        worst_abs = worst_abs.max(err);
        exact_max = exact_max.max(exact);
        positive &= u.values[i] > 0.0;
    }
    // relative to the solution's sup norm; the pointwise ratio is printed for reference
    let normwise = worst_abs / exact_max;
    let linear_ok = normwise < LINEAR_REL_TOL && positive;
    report(
        "AC-06",
        "deterministic dichotomy",
        power_ok && linear_ok,
        format!(
            "power law R = {r1:.5} (refined {r2:.5}), zeros outside {zeros_outside}; linear rel err {normwise:.2e} (pointwise {worst_point:.2e}), positive {positive}"
        ),
    );
}

#[test]
fn ac07_zero_noise_reduction() {
    let grid = GridConfig::auto(8.0, 512, 0.5).unwrap();
    let tr = simulate(
        &unit_indicator(&grid),
        &NonlinearitySpec::power_law(0.5).unwrap(),
        &grid,
        &NoisePlan::zero(grid),
        &RunOptions::snapshots(SnapshotSchedule::Every(64)),
    )
    .unwrap();
    let err_at = |f: &Field| -> f64 {
        (1..grid.n_x())
            .map(|i| (f.values[i] - heat_flow_interval(f.t, -1.0, 1.0, grid.x(i)).unwrap()).abs())
            .fold(0.0, f64::max)
    };
    let at_t = err_at(tr.last());
    let worst = tr.snapshots.iter().skip(1).map(err_at).fold(0.0, f64::max);
    report(
        "AC-07",
        "zero-noise reduction",
        at_t < ZERO_NOISE_TOL,
        format!("max error at T {at_t:.2e}, over all snapshots {worst:.2e}"),
    );
}

#[test]
fn ac08_discrete_weak_form() {
    let grid = GridConfig::auto(8.0, 512, 0.5).unwrap();
    let tr = simulate(
        &unit_indicator(&grid),
        &NonlinearitySpec::linear(1.0).unwrap(),
        &grid,
        &NoisePlan::fresh(8, 0, grid),
        &RunOptions::recorded(SnapshotSchedule::EveryStep),
    )
    .unwrap();
    // smooth bumps with pseudo-random centres, widths and a tilt
    let params = [
        (0.0, 1.0, 0.0),
        (-1.3, 0.4, 0.5),
        (2.1, 2.0, -0.3),
        (0.7, 0.15, 1.0),
        (-3.0, 1.5, 0.2),
    ];
    let mut worst = 0.0f64;
    for (c, w, tilt) in params {
        let phi: Vec<f64> = (0..grid.n_nodes())
            .map(|i| {
                if i == 0 || i == grid.n_x() {
                    return 0.0;
                }
                let x = grid.x(i);
                (1.0 + tilt * x) * (-((x - c) / w).powi(2)).exp()
            })
            .collect();
        worst = worst.max(weak_residual(&tr, &phi).unwrap().relative);
    }
    report(
        "AC-08",
        "discrete weak form",
        worst < WEAK_RESIDUAL_TOL,
        format!("worst relative residual {worst:.2e}"),
    );
}

#[test]
fn ac09_comparison_principle() {
    let grid = GridConfig::auto(8.0, 512, 0.25).unwrap();
    let hi = unit_indicator(&grid);
    let lo = Field::indicator(&grid, -0.5, 0.5, 0.5);
    let spec = NonlinearitySpec::linear(1.0).unwrap();
    let opts = RunOptions::snapshots(SnapshotSchedule::EveryStep);
    let stats = ensemble(32, |p| {
        let (a, b) =
            coupled_simulate(&hi, &lo, &spec, &grid, &NoisePlan::fresh(9, p, grid), &opts)?;
        diagnostics::comparison_stats(&a, &b)
    })
    .unwrap();
    let frac = stats
        .iter()
        .map(|s| s.violated_fraction)
        .fold(0.0, f64::max);
    let worst = stats.iter().map(|s| s.worst_violation).fold(0.0, f64::min);
    let ok = frac < VIOLATED_FRACTION_MAX && worst > -WORST_VIOLATION_REL * hi.max();
    report(
        "AC-09",
        "comparison principle",
        ok,
        format!("max violated fraction {frac:.2e}, worst violation {worst:.2e}"),
    );
}

#[test]
fn ac10_truncation_convergence() {
    let grid = GridConfig::auto(8.0, 256, 0.1).unwrap();
    let ms = [2, 4, 8, 16, 32];
    let rep = convergence_study(
        &unit_indicator(&grid),
        &NonlinearitySpec::power_law(0.5).unwrap(),
        &grid,
        &NoisePlan::fresh(10, 0, grid),
        8,
        &ms,
        64,
    )
    .unwrap();
    let d = rep.ensemble_l2();
    let monotone = d.windows(2).all(|w| w[1] <= w[0]);
    let ratio = d[4] / d[0];
    report(
        "AC-10",
        "truncation convergence",
        monotone && ratio < CONVERGENCE_RATIO_MAX,
        format!(
            "D = {:?}, D(32)/D(2) = {ratio:.3}",
            d.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn ac11_stochastic_dichotomy() {
    let grid = GridConfig::auto(8.0, 512, 0.5).unwrap();
    let u0 = unit_indicator(&grid);
    let opts = RunOptions::snapshots(SnapshotSchedule::EveryStep);
    let t = grid.horizon();

    let linear = NonlinearitySpec::linear(1.0).unwrap();
    let events = ensemble(STOCHASTIC_PATHS, |p| {
        let tr = simulate(&u0, &linear, &grid, &NoisePlan::fresh(11, p, grid), &opts)?;
        Ok(positivity_window_min(&tr, (0.5 * t, t), (-2.0, 2.0), THETA_POS)?.event)
    })
    .unwrap();
    let n_pos = events.iter().filter(|e| **e).count();

    let power = NonlinearitySpec::power_law(0.5).unwrap();
    let rows = ensemble(STOCHASTIC_PATHS, |p| {
        let tr = simulate(&u0, &power, &grid, &NoisePlan::fresh(11, p, grid), &opts)?;
        let r = support_radius_rel(tr.last(), &grid, u0.max(), diagnostics::DEFAULT_THETA_REL)?;
        Ok((
            r.map_or(0.0, |r| r.1),
            diagnostics::boundary_time_integral(&tr, BOUNDARY_R)?.u_integral,
        ))
    })
    .unwrap();
    let n_compact = rows.iter().filter(|r| r.0 < R_PLUS_MAX).count();
    let mean_boundary = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;

    let ok =
        n_pos >= MIN_GOOD_PATHS && n_compact >= MIN_GOOD_PATHS && mean_boundary < BOUNDARY_MEAN_MAX;
    report(
        "AC-11",
        "stochastic dichotomy",
        ok,
        format!(
            "linear positive in {n_pos}/{STOCHASTIC_PATHS}; power law R_plus < {R_PLUS_MAX} in {n_compact}/{STOCHASTIC_PATHS}, mean boundary integral {mean_boundary:.2e}"
        ),
    );
}

fn run_cli(args: &[&str], out: &Path, threads: usize) {
    let status = Command::new(env!("CARGO_BIN_EXE_she"))
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn ac12_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.cfg");
    std::fs::write(
        &cfg,
        "snapshot_files=all\nrecord_noise=true\nsnapshots=all\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let runs: Vec<Vec<&str>> = vec![
        vec![
            "simulate",
            "--config",
            &cfg,
            "--paths",
            "6",
            "--grid-nx",
            "128",
            "--T",
            "0.1",
        ],
        vec!["compare", "--paths", "6", "--grid-nx", "128", "--T", "0.05"],
        vec!["converge", "--paths", "4", "--grid-nx", "64", "--T", "0.05"],
        vec!["sweep", "--paths", "6", "--grid-nx", "128", "--T", "0.1"],
        vec!["deterministic", "--grid-nx", "128", "--T", "0.2"],
        vec!["conditions"],
        vec!["propagation", "--m", "10:100:10"],
    ];
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (j, args) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("a{j}"));
        let b = tmp.path().join(format!("b{j}"));
        run_cli(args, &a, 1);
        run_cli(args, &b, 4);
        let (ca, cb) = (dir_contents(&a), dir_contents(&b));
        files += ca.len();
        if ca != cb {
            mismatched.push(args[0]);
        }
    }
    report(
        "AC-12",
        "reproducibility across thread counts",
        mismatched.is_empty(),
        format!("{files} files compared, mismatched commands {mismatched:?}"),
    );
}
