//! Grid-refinement study of the value function at t = 0.
//!
//!     cargo run --release --example convergence -- 4 8 9

use permit_mfg::validation::convergence_study;
use permit_mfg::{InitialDensity, ModelParams, PriceSchedule, SolverConfig};

fn main() -> permit_mfg::Result<()> {
    let args: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let (n_min, n_max, n_ref) = match args[..] {
        [a, b, c] => (a, b, c),
        _ => (3, 6, 7),
    };
    let cfg = SolverConfig {
        tol: 1e-10,
        ..SolverConfig::default()
    };
    let report = convergence_study(
        n_min,
        n_max,
        n_ref,
        &cfg,
        &ModelParams::default(),
        &PriceSchedule::default(),
        &InitialDensity::default(),
    )?;
    println!("reference N = K = {}", 1u32 << report.reference_level);
    println!("  n      h         error    interior");
    for l in &report.levels {
        println!(
            "{:3} {:8.5} {:11.3e} {:11.3e}",
            l.n, l.h, l.error, l.interior_error
        );
    }
    if let Some(p) = report.fitted_order {
        println!("fitted order {p:.3}");
    }
    if let Some(p) = report.interior_fitted_order {
        println!("interior-node order {p:.3}");
    }
    Ok(())
}
