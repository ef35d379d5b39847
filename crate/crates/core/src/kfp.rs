//! Forward θ-scheme for the Kolmogorov equation
//! `m_t - a m'' - (τ m)' = 0` on a reflected interval.
//!
//! The operator is the fitted assembly with drift `τ` on the edges and no
//! reaction. Under the zero-flux closure every column of it sums to zero,
//! so `Σ l_i m_i` is preserved by each step up to rounding.

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::field::{Control, ControlLevel, Field, Quantity};
use crate::fitted_fvm::{
    assemble_operator_with_closure, is_m_matrix, solve_tridiagonal, BoundaryClosure, MMatrixReport,
    MMatrixTally, OperatorAssembly,
};
use crate::grid::{Grids, SpaceGrid};
use crate::hjb::check_theta;
use crate::model::ModelParams;

/// Undershoots below this are clipped and the level renormalised.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;

/// Boundary treatment of the density equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityClosure {
    /// No probability flux through the ends; conserves mass exactly.
    #[default]
    ZeroFlux,
    /// Literal `m' = 0` at both ends; the advective flux `τ m` leaks mass.
    Neumann,
}

/// `Σ_i l_i m_i`.
pub fn total_mass(m: &[f64], grid: &SpaceGrid) -> f64 {
    m.iter().zip(grid.cell_widths()).map(|(a, l)| a * l).sum()
}

fn density_operator(
    tau: ControlLevel<'_>,
    grid: &SpaceGrid,
    params: &ModelParams,
    closure: DensityClosure,
) -> Result<OperatorAssembly> {
    let n = grid.cells();
    if tau.edges.len() != n {
        return Err(Error::mismatch("edge control", n, tau.edges.len()));
    }
    let closure = match closure {
        DensityClosure::ZeroFlux => BoundaryClosure::ZeroFlux,
        DensityClosure::Neumann => {
            if tau.nodes.len() != n + 1 {
                return Err(Error::mismatch("node control", n + 1, tau.nodes.len()));
            }
            BoundaryClosure::Neumann {
                left_drift: tau.nodes[0],
                right_drift: tau.nodes[n],
            }
        }
    };
    assemble_operator_with_closure(
        tau.edges,
        &vec![0.0; n + 1],
        params.diffusion(),
        grid,
        closure,
    )
}

#[derive(Debug, Clone)]
pub struct KfpStep {
    pub m: Vec<f64>,
    pub mmatrix: MMatrixReport,
    /// Whether an undershoot had to be clipped.
    pub clipped: bool,
}

/// One θ-step forward in time, from `m_earlier` at `t_{k+1}` to `t_k`:
///
/// ```text
/// (θ D̄^k + G) m^k = (G - (1-θ) D̄^{k+1}) m^{k+1}
/// ```
///
/// `tau_later` is the control at `t_k`, `tau_earlier` at `t_{k+1}`; `dt`
/// is the signed step `t_{k+1} - t_k < 0`.
#[allow(clippy::too_many_arguments)]
pub fn kfp_step(
    m_earlier: &[f64],
    tau_later: ControlLevel<'_>,
    tau_earlier: ControlLevel<'_>,
    theta: f64,
    dt: f64,
    grid: &SpaceGrid,
    params: &ModelParams,
    closure: DensityClosure,
) -> Result<KfpStep> {
    let explicit = density_operator(tau_earlier, grid, params, closure)?;
    let implicit = density_operator(tau_later, grid, params, closure)?;
    kfp_step_with(m_earlier, &implicit, &explicit, theta, dt, grid)
}

fn kfp_step_with(
    m_earlier: &[f64],
    implicit: &OperatorAssembly,
    explicit: &OperatorAssembly,
    theta: f64,
    dt: f64,
    grid: &SpaceGrid,
) -> Result<KfpStep> {
    check_theta(theta)?;
    if !(dt < 0.0) {
        return Err(Error::invalid(
            "dt",
            format!("step must be negative, got {dt}"),
        ));
    }
    if m_earlier.len() != grid.len() {
        return Err(Error::mismatch(
            "density level",
            grid.len(),
            m_earlier.len(),
        ));
    }
    if let Some(min) = m_earlier.iter().copied().reduce(f64::min) {
        if min < 0.0 {
            debug!("kfp step starts from a density with minimum {min:e}");
        }
    }
    let weight: Vec<f64> = grid.cell_widths().iter().map(|l| l / -dt).collect();
    let rhs = explicit.explicit_apply(theta, &weight, m_earlier);
    let system = implicit.implicit_system(theta, &weight, rhs)?;
    let mmatrix = is_m_matrix(implicit, &weight, theta);
    let mut m = solve_tridiagonal(&system)?;
    let clipped = m.iter().any(|&x| x < -NEGATIVE_TOLERANCE);
    if clipped {
        let mass = total_mass(&m, grid);
        m.iter_mut().for_each(|x| *x = x.max(0.0));
        let clipped_mass = total_mass(&m, grid);
        if clipped_mass > 0.0 {
            m.iter_mut().for_each(|x| *x *= mass / clipped_mass);
        }
    }
    Ok(KfpStep {
        m,
        mmatrix,
        clipped,
    })
}

#[derive(Debug, Clone)]
pub struct KfpSolution {
    pub m: Field,
    pub mmatrix: MMatrixTally,
    pub clip_events: usize,
    /// `max_k |Σ l_i m_i^k - 1|`.
    pub max_mass_drift: f64,
}

/// March the density from `m0` at `t_K = 0` up to `t_0 = T`.
pub fn solve_kfp(
    tau: &Control,
    m0: &[f64],
    grids: &Grids,
    params: &ModelParams,
    theta: f64,
    closure: DensityClosure,
) -> Result<KfpSolution> {
    tau.check_shape(grids)?;
    check_theta(theta)?;
    let grid = &grids.space;
    if m0.len() != grid.len() {
        return Err(Error::mismatch("initial density", grid.len(), m0.len()));
    }
    let mass0 = total_mass(m0, grid);
    if (mass0 - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "m0",
            format!("must have unit mass, got {mass0}"),
        ));
    }
    let k_max = grids.time.steps();
    let mut m = Field::on_nodes(Quantity::Density, grids);
    m.set_level(k_max, m0);
    let mut tally = MMatrixTally::default();
    let mut clip_events = 0;
    let mut drift = (mass0 - 1.0).abs();

    let mut explicit = density_operator(tau.level(k_max), grid, params, closure)?;
    for k in (0..k_max).rev() {
        let implicit = density_operator(tau.level(k), grid, params, closure)?;
        let step = kfp_step_with(
            m.level(k + 1),
            &implicit,
            &explicit,
            theta,
            grids.time.dt(k),
            grid,
        )?;
        tally.record(&step.mmatrix, "kfp", k);
        if step.clipped {
            clip_events += 1;
            warn!("kfp level {k}: negative density clipped and renormalised");
        }
        drift = drift.max((total_mass(&step.m, grid) - 1.0).abs());
        m.set_level(k, &step.m);
        explicit = implicit;
    }
    Ok(KfpSolution {
        m,
        mmatrix: tally,
        clip_events,
        max_mass_drift: drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::model::{initial_density, InitialDensity};

    fn grids(n: usize, k: usize) -> Grids {
        Grids::new(
            SpaceGrid::uniform(n, 1.0, 5.0).unwrap(),
            TimeGrid::uniform(k, 1.0).unwrap(),
        )
    }

    fn mean(m: &[f64], g: &SpaceGrid) -> f64 {
        m.iter()
            .zip(g.cell_widths())
            .zip(g.nodes())
            .map(|((a, l), e)| a * l * e)
            .sum()
    }

    fn variance(m: &[f64], g: &SpaceGrid) -> f64 {
        let mu = mean(m, g);
        m.iter()
            .zip(g.cell_widths())
            .zip(g.nodes())
            .map(|((a, l), e)| a * l * (e - mu) * (e - mu))
            .sum()
    }

    #[test]
    fn total_mass_basics() {
        let g = SpaceGrid::uniform(16, 1.0, 5.0).unwrap();
        assert!((total_mass(&[0.25; 17], &g) - 1.0).abs() < 1e-15);
        assert_eq!(total_mass(&[0.0; 17], &g), 0.0);
        let m0 = initial_density(&InitialDensity::default(), &g).unwrap();
        assert!((total_mass(&m0, &g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_density_is_steady_without_control() {
        let g = grids(32, 16);
        let p = ModelParams::default();
        let tau = Control::constant(&g, 0.0);
        let sol = solve_kfp(&tau, &[0.25; 33], &g, &p, 0.5, DensityClosure::ZeroFlux).unwrap();
        for level in sol.m.iter_levels() {
            assert!(level.iter().all(|x| (x - 0.25).abs() < 1e-14));
        }
    }

    #[test]
    fn leftward_drift_lowers_the_mean() {
        let g = grids(32, 16);
        let p = ModelParams::default();
        let tau = Control::constant(&g, 0.5);
        let step = kfp_step(
            &[0.25; 33],
            tau.level(0),
            tau.level(1),
            0.5,
            g.time.dt(0),
            &g.space,
            &p,
            DensityClosure::ZeroFlux,
        )
        .unwrap();
        assert!(mean(&step.m, &g.space) < 3.0);
        assert!((total_mass(&step.m, &g.space) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diffusion_spreads_the_normal_start() {
        let g = grids(64, 64);
        let p = ModelParams::default();
        let m0 = initial_density(&InitialDensity::default(), &g.space).unwrap();
        let tau = Control::constant(&g, 0.0);
        let sol = solve_kfp(&tau, &m0, &g, &p, 0.5, DensityClosure::ZeroFlux).unwrap();
        let vars: Vec<f64> = (0..=64)
            .rev()
            .map(|k| variance(sol.m.level(k), &g.space))
            .collect();
        for w in vars.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(sol.max_mass_drift <= 1e-10);
    }

    #[test]
    fn one_step_horizon_is_one_step() {
        let g = grids(16, 1);
        let p = ModelParams::default();
        let m0 = initial_density(&InitialDensity::Tent { peak: 2.0 }, &g.space).unwrap();
        let tau = Control::constant(&g, 0.3);
        let sol = solve_kfp(&tau, &m0, &g, &p, 1.0, DensityClosure::ZeroFlux).unwrap();
        let step = kfp_step(
            &m0,
            tau.level(0),
            tau.level(1),
            1.0,
            -1.0,
            &g.space,
            &p,
            DensityClosure::ZeroFlux,
        )
        .unwrap();
        assert_eq!(sol.m.level(0), step.m.as_slice());
    }

    #[test]
    fn neumann_closure_leaks_mass_under_drift() {
        let g = grids(32, 32);
        let p = ModelParams::default();
        let m0 = initial_density(&InitialDensity::default(), &g.space).unwrap();
        let tau = Control::constant(&g, 0.5);
        let zf = solve_kfp(&tau, &m0, &g, &p, 0.5, DensityClosure::ZeroFlux).unwrap();
        let nm = solve_kfp(&tau, &m0, &g, &p, 0.5, DensityClosure::Neumann).unwrap();
        assert!(zf.max_mass_drift < 1e-12);
        assert!(nm.max_mass_drift > 1e-6);
    }

    #[test]
    fn rejects_unnormalised_start() {
        let g = grids(8, 4);
        let p = ModelParams::default();
        let tau = Control::constant(&g, 0.0);
        assert!(solve_kfp(&tau, &[1.0; 9], &g, &p, 0.5, DensityClosure::ZeroFlux).is_err());
    }
}
