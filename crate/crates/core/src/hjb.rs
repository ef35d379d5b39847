//! Backward θ-scheme for the adjoint equation
//! `v_t + a v'' - τ v' - r v + f = 0`, `v(T) = 0`.
//!
//! Written in divergence form with drift `b = -τ` and reaction
//! `c = r + ∂b/∂E`. The reaction derivative is taken from the same edge
//! values of `τ` that enter the fitted flux, with `τ = 0` on the two outer
//! dual edges. The operator then discretises `-a v'' - b v' + r v` with
//! homogeneous Neumann data for `v`, and its transpose is exactly the
//! Kolmogorov operator plus `r l_i` on the diagonal.
//!
//! Sign convention: time levels run `T = t_0 > ... > t_K = 0`, so
//! `Δt_k < 0`. The mass matrix `G = diag(l_i / |Δt_k|)` is positive.

use log::warn;

use crate::coupling::control_from_value;
use crate::error::{Error, Result};
use crate::field::{Control, ControlLevel, Field, Quantity};
use crate::fitted_fvm::{
    assemble_operator, is_m_matrix, solve_tridiagonal, MMatrixReport, MMatrixTally,
    OperatorAssembly,
};
use crate::grid::{Grids, SpaceGrid};
use crate::model::{adjoint_source, ModelParams, PriceSchedule};

/// Spatial operator and source of the adjoint equation at one time level.
#[derive(Debug, Clone)]
pub struct HjbCoefficients {
    pub operator: OperatorAssembly,
    pub source: Vec<f64>,
}

/// Reaction `c_i = r - (τ_{i+1/2} - τ_{i-1/2}) / l_i` with zero control on
/// the outer dual edges.
pub fn reaction_from_edges(tau_edges: &[f64], r: f64, grid: &SpaceGrid) -> Vec<f64> {
    let n = grid.cells();
    let edge = |j: usize| {
        if j == 0 || j > n {
            0.0
        } else {
            tau_edges[j - 1]
        }
    };
    grid.cell_widths()
        .iter()
        .enumerate()
        .map(|(i, l)| r - (edge(i + 1) - edge(i)) / l)
        .collect()
}

/// Coefficients for a prescribed source vector.
pub fn hjb_coefficients_with_source(
    tau_edges: &[f64],
    source: Vec<f64>,
    grid: &SpaceGrid,
    params: &ModelParams,
) -> Result<HjbCoefficients> {
    if source.len() != grid.len() {
        return Err(Error::mismatch("HJB source", grid.len(), source.len()));
    }
    if tau_edges.len() != grid.cells() {
        return Err(Error::mismatch(
            "edge control",
            grid.cells(),
            tau_edges.len(),
        ));
    }
    let drift: Vec<f64> = tau_edges.iter().map(|t| -t).collect();
    let reaction = reaction_from_edges(tau_edges, params.r, grid);
    let operator = assemble_operator(&drift, &reaction, params.diffusion(), grid)?;
    Ok(HjbCoefficients { operator, source })
}

/// Coefficients with the model source `f(E, τ, m, S)`.
pub fn hjb_coefficients(
    tau: ControlLevel<'_>,
    m: &[f64],
    price: f64,
    grid: &SpaceGrid,
    params: &ModelParams,
) -> Result<HjbCoefficients> {
    if m.len() != grid.len() {
        return Err(Error::mismatch("density level", grid.len(), m.len()));
    }
    if tau.nodes.len() != grid.len() {
        return Err(Error::mismatch("node control", grid.len(), tau.nodes.len()));
    }
    let source = grid
        .nodes()
        .iter()
        .zip(tau.nodes)
        .zip(m)
        .map(|((&e, &t), &mi)| adjoint_source(e, t, mi, price, params))
        .collect();
    hjb_coefficients_with_source(tau.edges, source, grid, params)
}

#[derive(Debug, Clone)]
pub struct HjbStep {
    pub v: Vec<f64>,
    pub mmatrix: MMatrixReport,
}

/// One θ-step from the known level `t_k` to the earlier level `t_{k+1}`:
///
/// ```text
/// (θ D^{k+1} + G) v^{k+1} = θ f^{k+1} l + (1-θ) f^k l + (G - (1-θ) D^k) v^k
/// ```
pub fn hjb_step_with(
    v_known: &[f64],
    known: &HjbCoefficients,
    next: &HjbCoefficients,
    theta: f64,
    dt: f64,
    grid: &SpaceGrid,
) -> Result<HjbStep> {
    check_theta(theta)?;
    if !(dt < 0.0) {
        return Err(Error::invalid(
            "dt",
            format!("backward step must be negative, got {dt}"),
        ));
    }
    if v_known.len() != grid.len() {
        return Err(Error::mismatch("value level", grid.len(), v_known.len()));
    }
    let weight: Vec<f64> = grid.cell_widths().iter().map(|l| l / -dt).collect();
    let explicit = known.operator.explicit_apply(theta, &weight, v_known);
    let rhs: Vec<f64> = explicit
        .iter()
        .zip(grid.cell_widths())
        .zip(known.source.iter().zip(&next.source))
        .map(|((x, l), (f_known, f_next))| x + (theta * f_next + (1.0 - theta) * f_known) * l)
        .collect();
    let system = next.operator.implicit_system(theta, &weight, rhs)?;
    let mmatrix = is_m_matrix(&next.operator, &weight, theta);
    let v = solve_tridiagonal(&system)?;
    Ok(HjbStep { v, mmatrix })
}

/// One model-driven θ-step. Index 0 of each pair is the known level `t_k`,
/// index 1 the level `t_{k+1}` being solved for.
#[allow(clippy::too_many_arguments)]
pub fn hjb_step(
    v_known: &[f64],
    m_at: [&[f64]; 2],
    tau_at: [ControlLevel<'_>; 2],
    price_at: [f64; 2],
    theta: f64,
    dt: f64,
    grid: &SpaceGrid,
    params: &ModelParams,
) -> Result<HjbStep> {
    let known = hjb_coefficients(tau_at[0], m_at[0], price_at[0], grid, params)?;
    let next = hjb_coefficients(tau_at[1], m_at[1], price_at[1], grid, params)?;
    hjb_step_with(v_known, &known, &next, theta, dt, grid)
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if !(0.5..=1.0).contains(&theta) {
        return Err(Error::invalid(
            "theta",
            format!("must lie in [1/2, 1], got {theta}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct HjbSolution {
    pub v: Field,
    /// Control consistent with `v`, when it was solved for alongside it.
    pub control: Option<Control>,
    pub mmatrix: MMatrixTally,
    /// Total inner control iterations (self-consistent solves only).
    pub inner_iterations: usize,
}

/// Adjoint solve with a frozen control and a caller-supplied source per
/// time level.
pub fn solve_hjb_with_source<F>(
    mut source: F,
    tau: &Control,
    grids: &Grids,
    params: &ModelParams,
    theta: f64,
) -> Result<HjbSolution>
where
    F: FnMut(usize) -> Vec<f64>,
{
    tau.check_shape(grids)?;
    check_theta(theta)?;
    let grid = &grids.space;
    let mut v = Field::on_nodes(Quantity::Value, grids);
    let mut tally = MMatrixTally::default();
    let mut known = hjb_coefficients_with_source(tau.edges.level(0), source(0), grid, params)?;
    for k in 0..grids.time.steps() {
        let next =
            hjb_coefficients_with_source(tau.edges.level(k + 1), source(k + 1), grid, params)?;
        let step = hjb_step_with(v.level(k), &known, &next, theta, grids.time.dt(k), grid)?;
        tally.record(&step.mmatrix, "hjb", k + 1);
        v.set_level(k + 1, &step.v);
        known = next;
    }
    Ok(HjbSolution {
        v,
        control: None,
        mmatrix: tally,
        inner_iterations: 0,
    })
}

/// Adjoint solve with the control frozen at `tau`: each step is linear.
pub fn solve_hjb(
    m: &Field,
    tau: &Control,
    schedule: &PriceSchedule,
    grids: &Grids,
    params: &ModelParams,
    theta: f64,
) -> Result<HjbSolution> {
    m.check_shape(grids.time.len(), grids.space.len())?;
    tau.check_shape(grids)?;
    let grid = &grids.space;
    let times = grids.time.levels();
    let source = |k: usize| -> Vec<f64> {
        let price = schedule.value(times[k]);
        grid.nodes()
            .iter()
            .zip(tau.nodes.level(k))
            .zip(m.level(k))
            .map(|((&e, &t), &mi)| adjoint_source(e, t, mi, price, params))
            .collect()
    };
    solve_hjb_with_source(source, tau, grids, params, theta)
}

/// Inner iteration controls for [`solve_hjb_consistent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolve {
    /// Stop once the node control moves by at most `tol · max(1, max|τ|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InnerSolve {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

/// Adjoint solve in which each implicit level also satisfies
/// `τ = -∂v/∂E`. The control on the new level is found by fixed-point
/// iteration started from the control of the level already known, so the
/// result depends on `m` only.
pub fn solve_hjb_consistent(
    m: &Field,
    schedule: &PriceSchedule,
    grids: &Grids,
    params: &ModelParams,
    theta: f64,
    inner: InnerSolve,
) -> Result<HjbSolution> {
    m.check_shape(grids.time.len(), grids.space.len())?;
    check_theta(theta)?;
    let grid = &grids.space;
    let times = grids.time.levels();
    let mut v = Field::on_nodes(Quantity::Value, grids);
    let mut control = Control::constant(grids, 0.0);
    let mut tally = MMatrixTally::default();
    let mut inner_total = 0;

    let (nodes0, edges0) = control_from_value(v.level(0), grid);
    control.nodes.set_level(0, &nodes0);
    control.edges.set_level(0, &edges0);
    let mut known = hjb_coefficients(
        control.level(0),
        m.level(0),
        schedule.value(times[0]),
        grid,
        params,
    )?;

    for k in 0..grids.time.steps() {
        let dt = grids.time.dt(k);
        let price = schedule.value(times[k + 1]);
        let mut guess_nodes = control.nodes.level(k).to_vec();
        let mut guess_edges = control.edges.level(k).to_vec();
        let mut converged = false;
        let mut last: Option<HjbStep> = None;
        for _ in 0..inner.max_iter {
            inner_total += 1;
            let guess = ControlLevel {
                nodes: &guess_nodes,
                edges: &guess_edges,
            };
            let next = hjb_coefficients(guess, m.level(k + 1), price, grid, params)?;
            let step = hjb_step_with(v.level(k), &known, &next, theta, dt, grid)?;
            tally.record(&step.mmatrix, "hjb", k + 1);
            let (nodes, edges) = control_from_value(&step.v, grid);
            let scale = nodes.iter().fold(1.0f64, |s, t| s.max(t.abs()));
            let change = nodes
                .iter()
                .zip(&guess_nodes)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            guess_nodes = nodes;
            guess_edges = edges;
            last = Some(step);
            if change <= inner.tol * scale {
                converged = true;
                break;
            }
            if !change.is_finite() {
                break;
            }
        }
        let step = last.ok_or_else(|| {
            Error::invalid("max_iter", "inner solve needs at least one iteration")
        })?;
        if !converged {
            warn!(
                "hjb level {}: control not self-consistent after {} inner iterations",
                k + 1,
                inner.max_iter
            );
        }
        v.set_level(k + 1, &step.v);
        control.nodes.set_level(k + 1, &guess_nodes);
        control.edges.set_level(k + 1, &guess_edges);
        known = hjb_coefficients(control.level(k + 1), m.level(k + 1), price, grid, params)?;
    }
    Ok(HjbSolution {
        v,
        control: Some(control),
        mmatrix: tally,
        inner_iterations: inner_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::kfp::solve_kfp;
    use crate::model::{initial_density, InitialDensity};

    fn grids(n: usize, k: usize, horizon: f64) -> Grids {
        Grids::new(
            SpaceGrid::uniform(n, 1.0, 5.0).unwrap(),
            TimeGrid::uniform(k, horizon).unwrap(),
        )
    }

    fn uniform_source_solution(theta: f64, k: usize, f: f64) -> HjbSolution {
        let g = grids(16, k, 1.0);
        let p = ModelParams::default();
        let tau = Control::constant(&g, 0.0);
        solve_hjb_with_source(|_| vec![f; 17], &tau, &g, &p, theta).unwrap()
    }

    #[test]
    fn zero_source_stays_zero() {
        let sol = uniform_source_solution(0.5, 8, 0.0);
        assert!(sol.v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_backward_euler_step() {
        let (f, k) = (0.7, 10);
        let sol = uniform_source_solution(1.0, k, f);
        let dt = 0.1;
        let want = f * dt / (1.0 + 0.1 * dt);
        for &x in sol.v.level(1) {
            assert!((x - want).abs() < 1e-14, "{x} vs {want}");
        }
    }

    #[test]
    fn uniform_source_stays_uniform() {
        for theta in [0.5, 1.0] {
            let sol = uniform_source_solution(theta, 32, 1.3);
            for level in sol.v.iter_levels() {
                let first = level[0];
                assert!(level.iter().all(|x| (x - first).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn crank_nicolson_matches_discounted_integral() {
        let (f, r) = (0.9, 0.1);
        let sol = uniform_source_solution(0.5, 64, f);
        let want = f / r * (1.0 - (-r * 1.0f64).exp());
        let got = sol.v.level(64)[5];
        assert!(((got - want) / want).abs() < 1e-4);
    }

    #[test]
    fn one_step_horizon_is_one_step() {
        let g = grids(8, 1, 1.0);
        let p = ModelParams::default();
        let m = Field::filled(Quantity::Density, 2, 9, 0.25);
        let tau = Control::constant(&g, 0.0);
        let sched = PriceSchedule::default();
        let sol = solve_hjb(&m, &tau, &sched, &g, &p, 0.5).unwrap();
        let step = hjb_step(
            &[0.0; 9],
            [m.level(0), m.level(1)],
            [tau.level(0), tau.level(1)],
            [0.2, 0.2],
            0.5,
            -1.0,
            &g.space,
            &p,
        )
        .unwrap();
        assert_eq!(sol.v.level(1), step.v.as_slice());
    }

    #[test]
    fn theta_steps_agree_as_dt_shrinks() {
        let diff = |k: usize| {
            let a = uniform_source_solution(0.5, k, 1.0);
            let b = uniform_source_solution(1.0, k, 1.0);
            (a.v.level(k)[3] - b.v.level(k)[3]).abs()
        };
        let (coarse, fine) = (diff(8), diff(16));
        assert!(fine < coarse);
        // First-order gap: halving Δt roughly halves it.
        assert!((coarse / fine - 2.0).abs() < 0.2, "{}", coarse / fine);
    }

    #[test]
    fn bounded_by_comparison_principle() {
        let g = grids(64, 64, 1.0);
        let p = ModelParams::default();
        let sched = PriceSchedule::default();
        let m0 = initial_density(&InitialDensity::default(), &g.space).unwrap();
        let tau = Control::constant(&g, 0.0);
        let m = solve_kfp(&tau, &m0, &g, &p, 0.5, Default::default())
            .unwrap()
            .m;
        let sol = solve_hjb(&m, &tau, &sched, &g, &p, 0.5).unwrap();
        let mut fmax = f64::MIN;
        for k in 0..g.time.len() {
            let price = sched.value(g.time.levels()[k]);
            for (i, &e) in g.space.nodes().iter().enumerate() {
                fmax = fmax.max(adjoint_source(e, 0.0, m.level(k)[i], price, &p).abs());
            }
        }
        let bound = fmax * (1.0 - (-p.r * p.horizon).exp()) / p.r;
        sol.v.check_finite().unwrap();
        let vmax = sol.v.as_slice().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(vmax <= bound * (1.0 + 1e-9), "{vmax} > {bound}");
    }

    #[test]
    fn nonnegative_source_gives_nonnegative_value() {
        let g = grids(32, 32, 1.0);
        let p = ModelParams::default();
        let tau = Control {
            nodes: Field::filled(Quantity::Control, 33, 33, 0.0),
            edges: Field::from_levels(
                Quantity::EdgeControl,
                (0..33)
                    .map(|k| {
                        (0..32)
                            .map(|i| 0.6 * ((i + k) as f64 * 0.3).sin())
                            .collect()
                    })
                    .collect(),
            )
            .unwrap(),
        };
        let src = |k: usize| (0..33).map(|i| ((i * 7 + k) % 5) as f64 * 0.2).collect();
        let sol = solve_hjb_with_source(src, &tau, &g, &p, 1.0).unwrap();
        assert_eq!(sol.mmatrix.passed, sol.mmatrix.checked);
        assert!(sol.v.as_slice().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn consistent_solve_closes_the_control() {
        let g = grids(32, 32, 1.0);
        let p = ModelParams::default();
        let m = Field::filled(Quantity::Density, 33, 33, 0.25);
        let sched = PriceSchedule::Constant { price: 2.0 };
        let sol = solve_hjb_consistent(&m, &sched, &g, &p, 0.5, InnerSolve::default()).unwrap();
        let control = sol.control.unwrap();
        for k in 0..33 {
            let (nodes, _) = control_from_value(sol.v.level(k), &g.space);
            for (a, b) in nodes.iter().zip(control.nodes.level(k)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // Frozen solve at the consistent control reproduces the same value.
        let frozen = solve_hjb(&m, &control, &sched, &g, &p, 0.5).unwrap();
        for (a, b) in frozen.v.as_slice().iter().zip(sol.v.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_theta() {
        let g = grids(8, 4, 1.0);
        let p = ModelParams::default();
        let tau = Control::constant(&g, 0.0);
        assert!(solve_hjb_with_source(|_| vec![0.0; 9], &tau, &g, &p, 0.3).is_err());
    }
}
