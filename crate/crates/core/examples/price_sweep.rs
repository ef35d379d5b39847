//! Higher permit prices push producers towards low emission levels.
//!
//!     cargo run --release --example price_sweep

use permit_mfg::validation::low_emission_mass;
use permit_mfg::{solve_equilibrium, InitialDensity, ModelParams, PriceSchedule, SolverConfig};
use rayon::prelude::*;

fn main() -> permit_mfg::Result<()> {
    let cfg = SolverConfig::default();
    let params = ModelParams::default();

    println!("constant price, normal start");
    sweep(
        &cfg,
        &params,
        PriceSchedule::default(),
        &InitialDensity::default(),
        &[0.0, 2.0, 4.0],
    )?;

    println!("ramped price, tent start at E = 2");
    sweep(
        &cfg,
        &params,
        PriceSchedule::ramp(1.0),
        &InitialDensity::Tent { peak: 2.0 },
        &[1.0, 2.0, 3.0],
    )?;
    Ok(())
}

fn sweep(
    cfg: &SolverConfig,
    params: &ModelParams,
    base: PriceSchedule,
    m0: &InitialDensity,
    levels: &[f64],
) -> permit_mfg::Result<()> {
    let masses = levels
        .par_iter()
        .map(|&s| {
            let sol = solve_equilibrium(cfg, params, &base.with_level(s), m0)?;
            Ok(low_emission_mass(sol.m.level(0), &sol.grids.space))
        })
        .collect::<permit_mfg::Result<Vec<f64>>>()?;
    for (s, mass) in levels.iter().zip(masses) {
        println!("  level {s:3.1}: mass below midpoint {mass:.4}");
    }
    Ok(())
}
