//! Solve the default model (normal start, constant price) and show how the
//! population spreads out over the horizon.
//!
//!     cargo run --release --example equilibrium

use permit_mfg::{solve_equilibrium, InitialDensity, ModelParams, PriceSchedule, SolverConfig};

fn main() -> permit_mfg::Result<()> {
    let sol = solve_equilibrium(
        &SolverConfig::default(),
        &ModelParams::default(),
        &PriceSchedule::default(),
        &InitialDensity::default(),
    )?;

    println!(
        "status {:?} after {} iterations",
        sol.status, sol.iterations
    );
    for (i, eps) in sol.errors.iter().enumerate() {
        println!("  eps[{i}] = {eps:.3e}");
    }
    let d = &sol.diagnostics;
    println!(
        "mass drift {:.1e}, M-matrix pass rate {:.3}, clipped {}",
        d.max_mass_drift,
        d.mmatrix.pass_rate(),
        d.clip_events
    );

    let k = sol.grids.time.steps();
    let peak = |level: &[f64]| level.iter().cloned().fold(f64::MIN, f64::max);
    println!("max m(0, .) = {:.4}", peak(sol.m.level(k)));
    println!("max m(T, .) = {:.4}", peak(sol.m.level(0)));

    println!("\n    E      m(T,E)   tau(0,E)");
    let nodes = sol.grids.space.nodes();
    for i in (0..nodes.len()).step_by(8) {
        println!(
            "{:6.3} {:9.5} {:9.5}",
            nodes[i],
            sol.m.level(0)[i],
            sol.tau.nodes.level(k)[i]
        );
    }
    Ok(())
}
