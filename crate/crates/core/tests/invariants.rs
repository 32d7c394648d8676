use she_core::diagnostics::{boundary_time_integral, comparison_stats};
use she_core::noise::{covariance_check, NoisePlan};
use she_core::pde::{deterministic_support, solve_deterministic};
use she_core::spde::{coupled_simulate, ensemble, simulate, RunOptions, SnapshotSchedule};
use she_core::{AbsorptionScheme, Field, GridConfig, NonlinearitySpec};

#[test]
fn linear_runs_stay_nonnegative() {
    let grid = GridConfig::auto(8.0, 512, 0.5).unwrap();
    let u0 = Field::indicator(&grid, -1.0, 1.0, 1.0);
    let spec = NonlinearitySpec::linear(1.0).unwrap();
    let mins = ensemble(20, |p| {
        let tr = simulate(
            &u0,
            &spec,
            &grid,
            &NoisePlan::fresh(5, p, grid),
            &RunOptions::snapshots(SnapshotSchedule::Every(64)),
        )?;
        Ok(tr.monitor.global_min)
    })
    .unwrap();
    let good = mins.iter().filter(|m| **m > -1e-6 * u0.max()).count();
    assert!(good * 100 >= 95 * mins.len(), "{mins:?}");
}

#[test]
fn zero_lower_path_gives_no_violations_for_linear() {
    let grid = GridConfig::auto(8.0, 256, 0.25).unwrap();
    let hi = Field::indicator(&grid, -1.0, 1.0, 1.0);
    let (a, b) = coupled_simulate(
        &hi,
        &Field::zeros(&grid),
        &NonlinearitySpec::linear(1.0).unwrap(),
        &grid,
        &NoisePlan::fresh(1, 0, grid),
        &RunOptions::snapshots(SnapshotSchedule::EveryStep),
    )
    .unwrap();
    assert!(b.snapshots.iter().all(|f| f.values.iter().all(|v| *v == 0.0)));
    assert_eq!(comparison_stats(&a, &b).unwrap().violated_fraction, 0.0);
}

#[test]
fn heat_flow_boundary_integral_decreases_beyond_the_support() {
    let grid = GridConfig::auto(8.0, 256, 0.5).unwrap();
    let u0 = Field::indicator(&grid, -1.0, 1.0, 1.0);
    let tr = simulate(
        &u0,
        &NonlinearitySpec::power_law(0.5).unwrap(),
        &grid,
        &NoisePlan::zero(grid),
        &RunOptions::snapshots(SnapshotSchedule::EveryStep),
    )
    .unwrap();
    let vals: Vec<f64> = [1.5, 2.0, 3.0, 4.0, 5.0]
        .iter()
        .map(|r| boundary_time_integral(&tr, *r).unwrap().u_integral)
        .collect();
    assert!(vals.iter().all(|v| *v >= 0.0));
    assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
}

#[test]
fn deterministic_support_grows_with_the_initial_width() {
    let grid = GridConfig::auto(8.0, 256, 0.5).unwrap();
    let spec = NonlinearitySpec::power_law(0.5).unwrap();
    let mut last = 0.0;
    for r in [0.5, 1.0, 1.5] {
        let tr = solve_deterministic(
            &Field::indicator(&grid, -r, r, 1.0),
            &spec,
            &grid,
            &RunOptions::snapshots(SnapshotSchedule::Times(vec![0.5])),
            AbsorptionScheme::Split,
        )
        .unwrap();
        let (_, hi) = deterministic_support(tr.last(), &grid).unwrap();
        assert!(hi >= last);
        last = hi;
    }
}

#[test]
fn increments_have_white_noise_covariance() {
    let grid = GridConfig::auto(4.0, 64, 0.25).unwrap();
    let plan = NoisePlan::fresh(17, 0, grid);
    let phi = |t: f64, x: f64| (1.0 - t) * (-x * x).exp();
    let psi = |t: f64, x: f64| (-(x - 0.5).powi(2)).exp() * (1.0 + t);
    let rep = covariance_check(&plan, phi, psi, 2000).unwrap();
    assert!(rep.z_score.abs() < 4.0, "{rep:?}");
}
