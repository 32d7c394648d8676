use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use she_core::diagnostics::{self, fmt_cell, DiagnosticsReport};
use she_core::kernel;
use she_core::kv::{fmt_exact, fmt_sci};
use she_core::noise::NoisePlan;
use she_core::nonlinearity::{ConditionReport, SeriesReport};
use she_core::pde::{self, AbsorptionScheme, IntegralValue};
use she_core::spde::{self, ensemble, RunOptions, Trajectory};
use she_core::{Error, Field, GridConfig};

use crate::config::Config;

/// Relative weak-form residual above which a recorded run fails its gate.
pub const WEAK_RESIDUAL_GATE: f64 = 1e-10;

pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Invariant gates that failed; the run still writes all outputs.
    pub gate_failures: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(Error::from)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Error> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(Error::from)?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self, gate_failures: Vec<String>) -> Outcome {
        Outcome {
            files: self.files,
            gate_failures,
        }
    }
}

pub fn run(cfg: &Config, out: &Path) -> Result<Outcome, Error> {
    let mut w = Writer::new(out)?;
    w.write("manifest.txt", &cfg.manifest())?;
    let gates = match cfg.command.as_str() {
        "simulate" => simulate(cfg, &mut w)?,
        "deterministic" => deterministic(cfg, &mut w)?,
        "conditions" => conditions(cfg, &mut w)?,
        "converge" => converge(cfg, &mut w)?,
        "compare" => compare(cfg, &mut w)?,
        "propagation" => propagation(cfg, &mut w)?,
        "sweep" => sweep(cfg, &mut w)?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    Ok(w.finish(gates))
}

fn snapshots_csv(tr: &Trajectory) -> String {
    let mut s = String::from("t");
    for x in tr.grid.xs() {
        s.push(',');
        s.push_str(&fmt_sci(x));
    }
    s.push('\n');
    for f in &tr.snapshots {
        s.push_str(&fmt_sci(f.t));
        for v in &f.values {
            s.push(',');
            s.push_str(&fmt_sci(*v));
        }
        s.push('\n');
    }
    s
}

fn initial_data(cfg: &Config, grid: &GridConfig) -> Result<Field, Error> {
    let r = cfg.f64("u0_r")?;
    let h = cfg.f64("u0_h")?;
    if !(r > 0.0 && h > 0.0) {
        return Err(Error::Config("u0_r and u0_h must be positive".into()));
    }
    Ok(Field::indicator(grid, -r, r, h))
}

fn window_t(cfg: &Config, grid: &GridConfig) -> Result<(f64, f64), Error> {
    if cfg.has("window_t") {
        Ok(cfg.pair("window_t")?)
    } else {
        Ok((0.5 * grid.horizon(), grid.horizon()))
    }
}

fn window_x(cfg: &Config) -> Result<(f64, f64), Error> {
    if cfg.has("window_x") {
        Ok(cfg.pair("window_x")?)
    } else {
        Ok((-2.0, 2.0))
    }
}

fn snapshot_paths(cfg: &Config, paths: usize) -> Result<usize, Error> {
    Ok(match cfg.str("snapshot_files")?.as_str() {
        "all" => paths,
        "first" => paths.min(1),
        "none" => 0,
        other => {
            return Err(Error::Config(format!(
                "snapshot_files must be all, first or none, got `{other}`"
            )))
        }
    })
}

fn label(x: f64) -> String {
    format!("{x}")
}

fn simulate(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let spec = cfg.spec()?;
    let grid = cfg.grid()?;
    let u0 = initial_data(cfg, &grid)?;
    let u0_max = u0.max();
    let seed = cfg.u64("seed")?;
    let paths = cfg.usize("paths")?;
    let schedule = cfg.schedule()?;
    let record = cfg.bool("record_noise")?;
    let opts = RunOptions {
        schedule,
        record_noise: record,
    };
    let theta_rel = cfg.f64("theta_rel")?;
    let theta_pos = cfg.f64("theta_pos")?;
    let (wt, wx) = (window_t(cfg, &grid)?, window_x(cfg)?);
    let rs = cfg.list("R_list")?;
    let qv_beta = cfg.f64("qv_beta")?;
    let (holder_a, holder_gamma, holder_samples) = (
        cfg.f64("holder_a")?,
        cfg.f64("holder_gamma")?,
        cfg.usize("holder_samples")?,
    );
    let keep = snapshot_paths(cfg, paths)?;

    let mut columns: Vec<String> = [
        "R_minus",
        "R_plus",
        "window_min",
        "window_event",
        "weighted_sup",
        "holder_norm",
        "holder_space",
        "holder_time",
        "global_min",
        "boundary_alert",
        "weak_residual_rel",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for r in &rs {
        for prefix in ["u_int", "sigma_int", "qv", "qv_ratio"] {
            columns.push(format!("{prefix}_R{}", label(*r)));
        }
    }

    let results = ensemble(paths, |p| {
        let plan = NoisePlan::fresh(seed, p, grid);
        let tr = spde::simulate(&u0, &spec, &grid, &plan, &opts)?;
        let last = tr.last();
        let support = diagnostics::support_radius_rel(last, &grid, u0_max, theta_rel)?;
        let win = diagnostics::positivity_window_min(&tr, wt, wx, theta_pos)?;
        let holder = if tr.snapshots.len() >= 2 {
            Some(diagnostics::holder_norm(
                &tr,
                holder_a,
                holder_gamma,
                holder_samples,
                seed ^ p,
            )?)
        } else {
            None
        };
        let weak = if record && tr.has_every_step() {
            let phi: Vec<f64> = (0..grid.n_nodes())
                .map(|i| {
                    if i == 0 || i == grid.n_x() {
                        0.0
                    } else {
                        (-grid.x(i).powi(2)).exp()
                    }
                })
                .collect();
            Some(diagnostics::weak_residual(&tr, &phi)?.relative)
        } else {
            None
        };
        let mut row = vec![
            support.map_or(f64::NAN, |s| s.0),
            support.map_or(f64::NAN, |s| s.1),
            win.min_value,
            if win.event { 1.0 } else { 0.0 },
            diagnostics::weighted_sup(last, &grid, holder_a),
            holder.map_or(f64::NAN, |h| h.norm),
            holder.map_or(f64::NAN, |h| h.space_quotient),
            holder.map_or(f64::NAN, |h| h.time_quotient),
            tr.monitor.global_min,
            if tr.monitor.boundary_alert.is_some() {
                1.0
            } else {
                0.0
            },
            weak.unwrap_or(f64::NAN),
        ];
        let mut qvs = Vec::with_capacity(rs.len());
        for &r in &rs {
            let b = diagnostics::boundary_time_integral(&tr, r)?;
            let q = diagnostics::quadratic_variation_outside(&tr, r, qv_beta)?;
            row.extend([b.u_integral, b.sigma_integral, q.qv, q.ratio]);
            qvs.push(q);
        }
        let kept = (p < keep as u64).then_some(tr);
        Ok((row, qvs, kept))
    })?;

    let col_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut report = DiagnosticsReport::new(&col_refs);
    let mut gates = Vec::new();
    let mut per_r: Vec<Vec<diagnostics::QuadraticVariation>> = vec![Vec::new(); rs.len()];
    for (p, (row, qvs, kept)) in results.into_iter().enumerate() {
        if row[10] > WEAK_RESIDUAL_GATE {
            gates.push(format!(
                "path {p}: weak-form residual {} exceeds {WEAK_RESIDUAL_GATE:e}",
                row[10]
            ));
        }
        report.push(p as u64, row)?;
        for (j, q) in qvs.into_iter().enumerate() {
            per_r[j].push(q);
        }
        if let Some(tr) = kept {
            w.write(&format!("snapshots_p{p:04}.csv"), &snapshots_csv(&tr))?;
            if let Some(rec) = &tr.noise {
                let path = w.dir.join(format!("noise_p{p:04}.bin"));
                rec.save(&path)?;
                w.files.push(path);
            }
        }
    }
    w.write("diagnostics.csv", &report.to_csv())?;
    let mut summary = report.summary_kv();
    let _ = writeln!(
        summary,
        "positivity_event_frequency={}",
        fmt_cell(report.aggregate(3).mean)
    );
    for (r, qs) in rs.iter().zip(&per_r) {
        let _ = writeln!(
            summary,
            "qv_ensemble_ratio_R{}={}",
            label(*r),
            fmt_sci(diagnostics::qv_ensemble_ratio(qs, qv_beta))
        );
    }
    w.write("summary.txt", &summary)?;
    Ok(gates)
}

fn integral_text(v: IntegralValue) -> String {
    match v {
        IntegralValue::Finite(x) => fmt_sci(x),
        IntegralValue::Divergent => "divergent".into(),
    }
}

fn deterministic(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let spec = cfg.spec()?;
    let grid = cfg.grid()?;
    let u0 = initial_data(cfg, &grid)?;
    let scheme = match cfg.str("scheme")?.as_str() {
        "split" => AbsorptionScheme::Split,
        "explicit" => AbsorptionScheme::Explicit,
        other => {
            return Err(
                Error::Config(format!("scheme must be split or explicit, got `{other}`")),
            )
        }
    };
    let tr = pde::solve_deterministic(
        &u0,
        &spec,
        &grid,
        &RunOptions::snapshots(cfg.schedule()?),
        scheme,
    )?;
    w.write("snapshots.csv", &snapshots_csv(&tr))?;
    let mut support = String::from("t,R_minus,R_plus\n");
    for f in &tr.snapshots {
        let s = pde::deterministic_support(f, &grid);
        let _ = writeln!(
            support,
            "{},{},{}",
            fmt_sci(f.t),
            s.map_or("NA".into(), |s| fmt_sci(s.0)),
            s.map_or("NA".into(), |s| fmt_sci(s.1))
        );
    }
    w.write("support.csv", &support)?;
    let mut summary = String::new();
    match pde::kalashnikov_integrals(&spec) {
        Ok(k) => {
            let _ = writeln!(summary, "csp_integral={}", integral_text(k.csp_integral));
            let _ = writeln!(
                summary,
                "positivity_integral={}",
                integral_text(k.positivity_integral)
            );
        }
        Err(Error::Precondition(_)) => {
            summary.push_str("csp_integral=undefined\npositivity_integral=undefined\n");
        }
        Err(e) => return Err(e),
    }
    let _ = writeln!(summary, "global_min={}", fmt_sci(tr.monitor.global_min));
    let _ = writeln!(
        summary,
        "boundary_alert={}",
        tr.monitor.boundary_alert.is_some()
    );
    let last = pde::deterministic_support(tr.last(), &grid);
    let _ = writeln!(
        summary,
        "final_R_minus={}",
        last.map_or("NA".into(), |s| fmt_sci(s.0))
    );
    let _ = writeln!(
        summary,
        "final_R_plus={}",
        last.map_or("NA".into(), |s| fmt_sci(s.1))
    );
    w.write("summary.txt", &summary)?;
    Ok(Vec::new())
}

fn opt_u64(v: Option<u64>) -> String {
    v.map_or("NA".into(), |k| k.to_string())
}

fn series_cells(s: &SeriesReport) -> String {
    format!(
        "{},{}",
        fmt_sci(*s.partial_sums.last().unwrap()),
        s.convergent
    )
}

/// `positive` when the positivity inequality holds from some k on, `compact`
/// when the compact-support inequality does, otherwise `undetermined`.
pub fn verdict(pos: &ConditionReport, csp: &ConditionReport) -> &'static str {
    match (pos.holds_from.is_some(), csp.holds_from.is_some()) {
        (true, false) => "positive",
        (false, true) => "compact",
        _ => "undetermined",
    }
}

fn conditions(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let alpha_pos = cfg.f64("alpha_pos")?;
    let alpha_csp = cfg.f64("alpha_csp")?;
    let k_max = cfg.u64("k_max")?;
    let k_sum = cfg.u64("k_max_sum")?;
    let per_beta = cfg.str("family")? == "log_corrected";
    let specs = if per_beta {
        cfg.list("betas")?
            .into_iter()
            .map(|b| Ok((b, cfg.spec_with_beta(b)?)))
            .collect::<Result<Vec<_>, Error>>()?
    } else {
        vec![(f64::NAN, cfg.spec()?)]
    };
    let mut csv = String::from(
        "beta,alpha_pos,pos_first_failure,pos_holds_from,alpha_csp,csp_first_failure,csp_holds_from,\
         kalashnikov_partial,kalashnikov_convergent,critical_partial,critical_convergent,verdict\n",
    );
    for (beta, spec) in &specs {
        let pos = spec.positivity_condition(alpha_pos, k_max)?;
        let csp = spec.csp_condition(alpha_csp, k_max)?;
        let ks = spec.kalashnikov_sum(k_sum)?;
        let cs = spec.critical_sum(k_sum)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_cell(*beta),
            fmt_sci(alpha_pos),
            opt_u64(pos.first_failure),
            opt_u64(pos.holds_from),
            fmt_sci(alpha_csp),
            opt_u64(csp.first_failure),
            opt_u64(csp.holds_from),
            series_cells(&ks),
            series_cells(&cs),
            verdict(&pos, &csp)
        );
    }
    w.write("conditions.csv", &csv)?;
    Ok(Vec::new())
}

fn levels(cfg: &Config, key: &str) -> Result<Vec<u32>, Error> {
    cfg.list(key)?
        .into_iter()
        .map(|m| {
            if m >= 1.0 && m.fract() == 0.0 && m <= u32::MAX as f64 {
                Ok(m as u32)
            } else {
                Err(Error::Config(format!(
                    "`{key}` entries must be positive integers, got {m}"
                )))
            }
        })
        .collect()
}

fn converge(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let spec = cfg.spec()?.without_truncation();
    let grid = cfg.grid()?;
    let u0 = initial_data(cfg, &grid)?;
    let ms = levels(cfg, "m_list")?;
    let reference = cfg.u64("reference_m")?;
    let reference =
        u32::try_from(reference).map_err(|_| Error::Config("reference_m too large".into()))?;
    let plan = NoisePlan::fresh(cfg.u64("seed")?, 0, grid);
    let rep = spde::convergence_study(
        &u0,
        &spec,
        &grid,
        &plan,
        cfg.usize("paths")?,
        &ms,
        reference,
    )?;
    let l2 = rep.ensemble_l2();
    let sup = rep.worst_sup();
    let mut csv = String::from("m,D_l2,D_sup_max,D_sup_mean\n");
    for (j, m) in ms.iter().enumerate() {
        let mean = rep.sup_distance.iter().map(|r| r[j]).sum::<f64>() / rep.n_paths() as f64;
        let _ = writeln!(
            csv,
            "{m},{},{},{}",
            fmt_sci(l2[j]),
            fmt_sci(sup[j]),
            fmt_sci(mean)
        );
    }
    w.write("convergence.csv", &csv)?;
    let mut paths = String::from("path");
    for m in &ms {
        let _ = write!(paths, ",D_sup_m{m},D_l2sq_m{m}");
    }
    paths.push('\n');
    for (p, (s, q)) in rep.sup_distance.iter().zip(&rep.l2_squared).enumerate() {
        paths.push_str(&p.to_string());
        for (a, b) in s.iter().zip(q) {
            let _ = write!(paths, ",{},{}", fmt_sci(*a), fmt_sci(*b));
        }
        paths.push('\n');
    }
    w.write("convergence_paths.csv", &paths)?;
    let monotone = l2.windows(2).all(|p| p[1] <= p[0]);
    let summary = format!(
        "paths={}\nreference_m={reference}\nratio_last_first={}\nnonincreasing={monotone}\n",
        rep.n_paths(),
        fmt_sci(l2[l2.len() - 1] / l2[0])
    );
    w.write("summary.txt", &summary)?;
    Ok(Vec::new())
}

fn compare(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let spec = cfg.spec()?;
    let grid = cfg.grid()?;
    let hi = initial_data(cfg, &grid)?;
    let (lr, lh) = (cfg.f64("lo_r")?, cfg.f64("lo_h")?);
    let lo = Field::indicator(&grid, -lr, lr, lh);
    let seed = cfg.u64("seed")?;
    let opts = RunOptions::snapshots(cfg.schedule()?);
    let hi_max = hi.max();
    let rows = ensemble(cfg.usize("paths")?, |p| {
        let plan = NoisePlan::fresh(seed, p, grid);
        let (a, b) = spde::coupled_simulate(&hi, &lo, &spec, &grid, &plan, &opts)?;
        let s = diagnostics::comparison_stats(&a, &b)?;
        Ok(vec![
            s.violated_fraction,
            s.worst_violation,
            s.worst_violation / hi_max,
            a.monitor.global_min,
            b.monitor.global_min,
        ])
    })?;
    let mut report = DiagnosticsReport::new(&[
        "violated_fraction",
        "worst_violation",
        "worst_relative",
        "global_min_hi",
        "global_min_lo",
    ]);
    for (p, row) in rows.into_iter().enumerate() {
        report.push(p as u64, row)?;
    }
    w.write("comparison.csv", &report.to_csv())?;
    w.write("summary.txt", &report.summary_kv())?;
    Ok(Vec::new())
}

fn propagation(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let (t, big_m, eta, r) = (
        cfg.f64("prop_T")?,
        cfg.f64("prop_M")?,
        cfg.f64("prop_eta")?,
        cfg.f64("prop_r")?,
    );
    let ms = levels(cfg, "m_list")?;
    let reports: Vec<kernel::PropagationReport> = ms
        .iter()
        .map(|&m| kernel::propagation_lower_bound(t, big_m, eta, r, m))
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("m,inf_value,s_argmin,x_argmin,threshold,satisfied\n");
    for rep in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            rep.m,
            fmt_sci(rep.inf_value),
            fmt_sci(rep.argmin.0),
            fmt_sci(rep.argmin.1),
            fmt_sci(rep.threshold),
            rep.satisfied
        );
    }
    w.write("propagation.csv", &csv)?;
    let m_star = kernel::first_satisfying_m(&reports);
    let summary = format!(
        "m_star={}\ninf_value_at_max_m={}\n",
        m_star.map_or("NA".into(), |m| m.to_string()),
        reports.last().map_or("NA".into(), |r| fmt_sci(r.inf_value))
    );
    w.write("summary.txt", &summary)?;
    Ok(Vec::new())
}

fn sweep(cfg: &Config, w: &mut Writer) -> Result<Vec<String>, Error> {
    let grid = cfg.grid()?;
    let u0 = initial_data(cfg, &grid)?;
    let u0_max = u0.max();
    let seed = cfg.u64("seed")?;
    let paths = cfg.usize("paths")?;
    let opts = RunOptions::snapshots(cfg.schedule()?);
    let theta_rel = cfg.f64("theta_rel")?;
    let theta_pos = cfg.f64("theta_pos")?;
    let (wt, wx) = (window_t(cfg, &grid)?, window_x(cfg)?);
    let mut table = String::from(
        "beta,paths,positivity_frequency,mean_R_plus,std_error_R_plus,extinct_paths\n",
    );
    let mut per_path = String::from("beta,path,window_min,window_event,R_plus\n");
    for beta in cfg.list("betas")? {
        let spec = cfg.spec_with_beta(beta)?;
        let rows = ensemble(paths, |p| {
            let tr = spde::simulate(&u0, &spec, &grid, &NoisePlan::fresh(seed, p, grid), &opts)?;
            let win = diagnostics::positivity_window_min(&tr, wt, wx, theta_pos)?;
            let sup = diagnostics::support_radius_rel(tr.last(), &grid, u0_max, theta_rel)?;
            Ok((win, sup.map(|s| s.1)))
        })?;
        let events = rows.iter().filter(|r| r.0.event).count();
        // extinct paths have an empty support and count as radius 0
        let radii: Vec<f64> = rows.iter().map(|r| r.1.unwrap_or(0.0)).collect();
        let n = radii.len() as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let se = if radii.len() > 1 {
            (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        let extinct = rows.iter().filter(|r| r.1.is_none()).count();
        let _ = writeln!(
            table,
            "{},{paths},{},{},{},{extinct}",
            fmt_exact(beta),
            fmt_sci(events as f64 / n),
            fmt_sci(mean),
            fmt_cell(se)
        );
        for (p, (win, r)) in rows.iter().enumerate() {
            let _ = writeln!(
                per_path,
                "{},{p},{},{},{}",
                fmt_exact(beta),
                fmt_sci(win.min_value),
                u8::from(win.event),
                r.map_or("NA".into(), fmt_sci)
            );
        }
    }
    w.write("sweep.csv", &table)?;
    w.write("sweep_paths.csv", &per_path)?;
    Ok(Vec::new())
}
