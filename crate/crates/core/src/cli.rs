//! Command logic behind the `permit-mfg` binary: run experiments and write
//! CSV reports.
//!
//! Floats are written as `{:.16e}` (17 significant digits, round-trip
//! exact), so reruns with the same configuration and seed give identical
//! bytes. Exit codes: 0 success, 1 usage or configuration error, 2
//! numerical failure or non-convergence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::coupling::{solve_equilibrium, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::grid::Grids;
use crate::model::PriceSchedule;
use crate::validation::{convergence_study, l1_distance, low_emission_mass, simulate_particles};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Numerical = 2,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Result of a command: exit status plus lines for standard output.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub status: ExitStatus,
    pub messages: Vec<String>,
}

/// Exit status for an error that aborted a command.
pub fn exit_status_of(err: &Error) -> ExitStatus {
    match err {
        Error::Singular { .. } | Error::NonFinite { .. } => ExitStatus::Numerical,
        _ => ExitStatus::Usage,
    }
}

/// Install the logger; verbosity comes from `MFG_LOG` (`off`, `info`,
/// `debug`, ...), defaulting to warnings.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("MFG_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Load a config file, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_path(p),
        None => Ok(RunConfig::default()),
    }
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Long format `t,E,value`, earliest time first.
pub fn long_format(field: &Field, grids: &Grids) -> String {
    let mut out = String::from("t,E,value\n");
    let times = grids.time.levels();
    for k in (0..grids.time.len()).rev() {
        for (e, v) in grids.space.nodes().iter().zip(field.level(k)) {
            let _ = writeln!(out, "{},{},{}", f(times[k]), f(*e), f(*v));
        }
    }
    out
}

fn trace_csv(errors: &[f64]) -> String {
    let mut out = String::from("iteration,epsilon\n");
    for (i, e) in errors.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", f(*e));
    }
    out
}

fn summary_text(sol: &EquilibriumSolution, seconds: f64) -> String {
    let d = &sol.diagnostics;
    let mut out = String::new();
    let _ = writeln!(out, "status: {:?}", sol.status);
    let _ = writeln!(out, "iterations: {}", sol.iterations);
    let _ = writeln!(
        out,
        "final_epsilon: {}",
        f(sol.errors.last().copied().unwrap_or(f64::NAN))
    );
    let _ = writeln!(out, "max_mass_drift: {}", f(d.max_mass_drift));
    let _ = writeln!(out, "mmatrix_pass_rate: {}", f(d.mmatrix.pass_rate()));
    let _ = writeln!(out, "mmatrix_systems: {}", d.mmatrix.checked);
    let _ = writeln!(
        out,
        "negative_reaction_systems: {}",
        d.mmatrix.negative_reaction
    );
    let _ = writeln!(out, "clip_events: {}", d.clip_events);
    let _ = writeln!(out, "inner_iterations: {}", d.inner_iterations);
    let _ = writeln!(out, "wall_time_s: {seconds:.3}");
    out
}

fn solve(cfg: &RunConfig, schedule: &PriceSchedule) -> Result<EquilibriumSolution> {
    solve_equilibrium(&cfg.solver, &cfg.params, schedule, &cfg.initial_density)
}

fn status_of(converged: bool) -> ExitStatus {
    if converged {
        ExitStatus::Success
    } else {
        ExitStatus::Numerical
    }
}

/// Solve one equilibrium and write `m.csv`, `v.csv`, `tau.csv`,
/// `trace.csv` and `summary.txt`. Files are written even without
/// convergence.
pub fn cmd_equilibrium(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let sol = solve(cfg, &cfg.schedule)?;
    let seconds = start.elapsed().as_secs_f64();
    write_file(out, "m.csv", &long_format(&sol.m, &sol.grids))?;
    write_file(out, "v.csv", &long_format(&sol.v, &sol.grids))?;
    write_file(out, "tau.csv", &long_format(&sol.tau.nodes, &sol.grids))?;
    write_file(out, "trace.csv", &trace_csv(&sol.errors))?;
    write_file(out, "summary.txt", &summary_text(&sol, seconds))?;
    let mut messages = vec![format!(
        "{:?} after {} iterations, epsilon = {:.3e}",
        sol.status,
        sol.iterations,
        sol.errors.last().copied().unwrap_or(f64::NAN)
    )];
    if !sol.converged() {
        messages.push(format!(
            "no convergence within {} iterations",
            cfg.solver.max_iter
        ));
    }
    Ok(Outcome {
        status: status_of(sol.converged()),
        messages,
    })
}

fn sweep_label(schedule: &PriceSchedule) -> &'static str {
    match schedule {
        PriceSchedule::Constant { .. } => "price",
        PriceSchedule::Ramp { .. } => "s_max",
    }
}

/// One equilibrium per price level (`price` for a constant schedule,
/// `s_max` for a ramp). Writes `sweep.csv` with the terminal densities and
/// `lowmass.csv` with their mass on the lower half of the state interval.
/// Each run first writes its own files under `runs/`; the merged files
/// list runs in the order given.
pub fn cmd_sweep_price(
    cfg: &RunConfig,
    values: &[f64],
    jobs: usize,
    out: &Path,
) -> Result<Outcome> {
    if values.len() < 2 {
        return Err(Error::Config {
            key: "values".into(),
            reason: format!("a sweep needs at least two values, got {}", values.len()),
        });
    }
    for &v in values {
        cfg.schedule.with_level(v).validate(cfg.params.horizon)?;
    }
    let label = sweep_label(&cfg.schedule);
    let runs_dir = out.join("runs");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config {
            key: "jobs".into(),
            reason: e.to_string(),
        })?;

    let results: Vec<Result<(bool, PathBuf, PathBuf)>> = pool.install(|| {
        values
            .par_iter()
            .enumerate()
            .map(|(i, &value)| {
                let sol = solve(cfg, &cfg.schedule.with_level(value))?;
                let terminal = sol.m.level(0);
                let mut sweep = String::new();
                for (e, m) in sol.grids.space.nodes().iter().zip(terminal) {
                    let _ = writeln!(sweep, "{},{},{}", f(value), f(*e), f(*m));
                }
                let low = low_emission_mass(terminal, &sol.grids.space);
                let lowmass = format!("{},{}\n", f(value), f(low));
                let a = write_file(&runs_dir, &format!("sweep_{i:03}.csv"), &sweep)?;
                let b = write_file(&runs_dir, &format!("lowmass_{i:03}.csv"), &lowmass)?;
                Ok((sol.converged(), a, b))
            })
            .collect()
    });

    let mut sweep = format!("{label},E,m_T\n");
    let mut lowmass = format!("{label},low_mass\n");
    let mut status = ExitStatus::Success;
    let mut messages = Vec::new();
    for (value, result) in values.iter().zip(results) {
        match result {
            Ok((converged, a, b)) => {
                sweep.push_str(&fs::read_to_string(a)?);
                lowmass.push_str(&fs::read_to_string(b)?);
                if !converged {
                    status = ExitStatus::Numerical;
                    messages.push(format!("{label} = {value}: no convergence"));
                }
            }
            Err(e) => {
                let s = exit_status_of(&e);
                if status == ExitStatus::Success || s == ExitStatus::Usage {
                    status = s;
                }
                messages.push(format!("{label} = {value}: {e}"));
            }
        }
    }
    write_file(out, "sweep.csv", &sweep)?;
    write_file(out, "lowmass.csv", &lowmass)?;
    messages.push(format!(
        "{} runs written to {}",
        values.len(),
        out.display()
    ));
    Ok(Outcome { status, messages })
}

/// Grid-refinement study on `N = K = 2^n`. Writes `convergence.csv`
/// (`n,h,error`) and reports the fitted order.
pub fn cmd_converge(
    cfg: &RunConfig,
    n_min: u32,
    n_max: u32,
    n_ref: u32,
    out: &Path,
) -> Result<Outcome> {
    let report = convergence_study(
        n_min,
        n_max,
        n_ref,
        &cfg.solver,
        &cfg.params,
        &cfg.schedule,
        &cfg.initial_density,
    )?;
    let mut csv = String::from("n,h,error\n");
    for l in &report.levels {
        let _ = writeln!(csv, "{},{},{}", l.n, f(l.h), f(l.error));
    }
    write_file(out, "convergence.csv", &csv)?;
    let mut messages = Vec::new();
    let ok = report.reference_converged && report.levels.iter().all(|l| l.converged);
    if !report.reference_converged {
        messages.push(format!("reference level n = {n_ref} did not converge"));
    }
    for l in report.levels.iter().filter(|l| !l.converged) {
        messages.push(format!("level n = {} did not converge", l.n));
    }
    match report.fitted_order {
        Some(order) => messages.push(format!("fitted order: {order:.4}")),
        None => messages.push("fitted order: unavailable".into()),
    }
    if let Some(order) = report.interior_fitted_order {
        messages.push(format!("interior-node order: {order:.4}"));
    }
    Ok(Outcome {
        status: status_of(ok && report.fitted_order.is_some()),
        messages,
    })
}

/// Compare the terminal PDE density with a particle simulation driven by
/// the equilibrium control. Writes `mc_vs_pde.csv` (`E,m_pde,m_mc`).
pub fn cmd_validate_mc(
    cfg: &RunConfig,
    particles: usize,
    seed: u64,
    out: &Path,
) -> Result<Outcome> {
    if particles < 1 {
        return Err(Error::Config {
            key: "particles".into(),
            reason: "need at least one particle".into(),
        });
    }
    let sol = solve(cfg, &cfg.schedule)?;
    if !sol.converged() {
        return Ok(Outcome {
            status: ExitStatus::Numerical,
            messages: vec!["equilibrium did not converge; no comparison made".into()],
        });
    }
    let mc = simulate_particles(
        &sol.tau.nodes,
        &sol.grids,
        &cfg.params,
        particles,
        cfg.validation.substeps,
        seed,
        &cfg.initial_density,
    )?;
    let pde = sol.m.level(0);
    let mut csv = String::from("E,m_pde,m_mc\n");
    for ((e, a), b) in sol.grids.space.nodes().iter().zip(pde).zip(&mc) {
        let _ = writeln!(csv, "{},{},{}", f(*e), f(*a), f(*b));
    }
    write_file(out, "mc_vs_pde.csv", &csv)?;
    let l1 = l1_distance(pde, &mc, &sol.grids.space)?;
    Ok(Outcome {
        status: ExitStatus::Success,
        messages: vec![format!("L1 distance: {l1:.6e}")],
    })
}
