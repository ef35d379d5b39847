//! The exponentially fitted flux keeps the implicit matrix an M-matrix
//! however strong the drift, where central differences lose the sign
//! pattern once the cell Péclet number passes 2.
//!
//!     cargo run --example fitted_flux

use permit_mfg::fitted_fvm::{assemble_operator, edge_flux_coeffs};
use permit_mfg::{bernoulli, is_m_matrix, SpaceGrid};

fn main() -> permit_mfg::Result<()> {
    println!("Bernoulli B(x) = x / (e^x - 1)");
    for x in [-20.0, -1.0, -1e-8, 0.0, 1e-8, 1.0, 20.0] {
        println!("  B({x:>6}) = {:.15}", bernoulli(x));
    }

    let a = 0.045;
    let grid = SpaceGrid::uniform(16, 1.0, 5.0)?;
    let h = grid.max_step();
    let time_weight: Vec<f64> = grid.cell_widths().iter().map(|l| l / 0.01).collect();
    println!("\n drift  Peclet    w_low     w_high  central_low  M-matrix");
    for b in [0.0, 0.1, 0.5, 1.0, 5.0] {
        let (lo, hi) = edge_flux_coeffs(b, a, h)?;
        let central_low = a / h - 0.5 * b;
        let op = assemble_operator(&vec![b; grid.cells()], &vec![0.1; grid.len()], a, &grid)?;
        let report = is_m_matrix(&op, &time_weight, 1.0);
        println!(
            "{b:6.2} {:7.2} {lo:9.4} {hi:9.4} {central_low:12.4} {:>9}",
            b * h / a,
            report.passed()
        );
    }
    Ok(())
}
