//! Discounted population payoff of the equilibrium as the permit price
//! rises.
//!
//!     cargo run --release --example payoff

use permit_mfg::validation::discounted_payoff;
use permit_mfg::{solve_equilibrium, InitialDensity, ModelParams, PriceSchedule, SolverConfig};

fn main() -> permit_mfg::Result<()> {
    let cfg = SolverConfig::default();
    let params = ModelParams::default();
    let m0 = InitialDensity::default();
    println!("price   payoff     iterations");
    for s in [0.0, 0.2, 0.5, 1.0, 2.0] {
        let schedule = PriceSchedule::Constant { price: s };
        let sol = solve_equilibrium(&cfg, &params, &schedule, &m0)?;
        let j = discounted_payoff(&sol.m, &sol.tau.nodes, &schedule, &sol.grids, &params)?;
        println!("{s:5.2} {j:10.5} {:8}", sol.iterations);
    }
    Ok(())
}
