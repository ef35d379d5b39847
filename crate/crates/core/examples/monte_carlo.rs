//! Drive reflected particles with the equilibrium control and compare the
//! terminal histogram with the PDE density.
//!
//!     cargo run --release --example monte_carlo -- 200000

use permit_mfg::validation::{l1_distance, simulate_particles};
use permit_mfg::{solve_equilibrium, InitialDensity, ModelParams, PriceSchedule, SolverConfig};

fn main() -> permit_mfg::Result<()> {
    let particles = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(100_000);
    let params = ModelParams::default();
    let m0 = InitialDensity::default();
    let sol = solve_equilibrium(
        &SolverConfig::default(),
        &params,
        &PriceSchedule::default(),
        &m0,
    )?;

    let mc = simulate_particles(&sol.tau.nodes, &sol.grids, &params, particles, 4, 7, &m0)?;
    let pde = sol.m.level(0);
    let nodes = sol.grids.space.nodes();
    println!("    E     m_pde    m_mc");
    for i in (0..nodes.len()).step_by(4) {
        println!("{:6.3} {:8.4} {:8.4}", nodes[i], pde[i], mc[i]);
    }
    println!(
        "L1 distance with {particles} particles: {:.4}",
        l1_distance(pde, &mc, &sol.grids.space)?
    );
    Ok(())
}
