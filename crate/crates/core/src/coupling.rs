//! Fixed-point iteration for the mean field equilibrium.
//!
//! Each outer iteration solves the density forward under the current
//! control, the adjoint backward under that density, and moves the control
//! towards `-∂v/∂E`:
//!
//! ```text
//! τ^0 → m^n → v^n → τ^{n+1} = (1-ω) τ^n + ω (-∂v^n/∂E) → ε^n = max |τ^{n+1} - τ^n|
//! ```

use log::{debug, info};

use crate::error::{Error, Result};
use crate::field::{Control, Field};
use crate::fitted_fvm::MMatrixTally;
use crate::grid::{Grids, SpaceGrid, TimeGrid};
use crate::hjb::{check_theta, solve_hjb, solve_hjb_consistent, InnerSolve};
use crate::kfp::{solve_kfp, DensityClosure};
use crate::model::{initial_density, InitialDensity, ModelParams, PriceSchedule};

/// Node control `τ_i ≈ -v'(E_i)`: three-point centred differences inside,
/// one-sided second-order differences at the two ends.
pub fn drift_from_value(v: &[f64], grid: &SpaceGrid) -> Vec<f64> {
    let n = grid.cells();
    let h = grid.steps();
    let mut tau = vec![0.0; n + 1];
    for i in 1..n {
        let (hm, hp) = (h[i - 1], h[i]);
        let dp = (v[i + 1] - v[i]) / hp;
        let dm = (v[i] - v[i - 1]) / hm;
        tau[i] = -(hm * dp + hp * dm) / (hm + hp);
    }
    let (h1, h2) = (h[0], h[1]);
    tau[0] = -(-(2.0 * h1 + h2) / (h1 * (h1 + h2)) * v[0] + (h1 + h2) / (h1 * h2) * v[1]
        - h1 / (h2 * (h1 + h2)) * v[2]);
    let (h1, h2) = (h[n - 1], h[n - 2]);
    tau[n] = -((2.0 * h1 + h2) / (h1 * (h1 + h2)) * v[n] - (h1 + h2) / (h1 * h2) * v[n - 1]
        + h1 / (h2 * (h1 + h2)) * v[n - 2]);
    tau
}

/// Edge control `τ_{i+1/2} = -(v_{i+1} - v_i) / h_i`.
pub fn edge_drift_from_value(v: &[f64], grid: &SpaceGrid) -> Vec<f64> {
    v.windows(2)
        .zip(grid.steps())
        .map(|(w, h)| -(w[1] - w[0]) / h)
        .collect()
}

/// Node and edge control of one value level.
pub fn control_from_value(v: &[f64], grid: &SpaceGrid) -> (Vec<f64>, Vec<f64>) {
    (drift_from_value(v, grid), edge_drift_from_value(v, grid))
}

/// `max_{k,i} |τ_old - τ_new|`.
pub fn iteration_error(tau_old: &Field, tau_new: &Field) -> Result<f64> {
    if tau_old.shape() != tau_new.shape() {
        let (a, b) = (tau_old.shape(), tau_new.shape());
        return Err(Error::mismatch("control field", a.0 * a.1, b.0 * b.1));
    }
    Ok(tau_old
        .as_slice()
        .iter()
        .zip(tau_new.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// How the adjoint solve treats the control inside one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HjbControl {
    /// Each implicit level is solved together with `τ = -∂v/∂E`, so `v^n`
    /// depends on `m^n` only.
    #[default]
    SelfConsistent,
    /// The control of the current outer iterate is held fixed, making each
    /// adjoint solve linear.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialControl {
    Constant(f64),
    Field(Control),
}

impl Default for InitialControl {
    fn default() -> Self {
        InitialControl::Constant(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Space cells.
    pub n: usize,
    /// Time steps.
    pub k: usize,
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Damping `ω ∈ (0, 1]`; 1 is the undamped iteration.
    pub relaxation: f64,
    pub initial_tau: InitialControl,
    pub hjb_control: HjbControl,
    pub inner: InnerSolve,
    pub closure: DensityClosure,
    /// Optional box constraint on the control.
    pub tau_bounds: Option<(f64, f64)>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n: 64,
            k: 64,
            theta: 0.5,
            tol: 1e-6,
            max_iter: 100,
            relaxation: 1.0,
            initial_tau: InitialControl::default(),
            hjb_control: HjbControl::default(),
            inner: InnerSolve::default(),
            closure: DensityClosure::default(),
            tau_bounds: None,
        }
    }
}

impl SolverConfig {
    pub fn with_resolution(mut self, n: usize, k: usize) -> Self {
        self.n = n;
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_theta(self.theta)?;
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if self.max_iter < 1 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::invalid("relaxation", "must lie in (0, 1]"));
        }
        if self.inner.max_iter < 1 || !(self.inner.tol > 0.0) {
            return Err(Error::invalid(
                "inner",
                "needs a positive tolerance and iteration cap",
            ));
        }
        if let Some((lo, hi)) = self.tau_bounds {
            if !(lo <= hi) {
                return Err(Error::invalid(
                    "tau_bounds",
                    "lower bound exceeds upper bound",
                ));
            }
        }
        Ok(())
    }

    pub fn grids(&self, params: &ModelParams) -> Result<Grids> {
        Ok(Grids::new(
            SpaceGrid::uniform(self.n, params.e_min, params.e_max)?,
            TimeGrid::uniform(self.k, params.horizon)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// All implicit systems of both equations over all iterations.
    pub mmatrix: MMatrixTally,
    pub max_mass_drift: f64,
    pub clip_events: usize,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub grids: Grids,
    pub m: Field,
    pub v: Field,
    pub tau: Control,
    /// `ε^0, ε^1, ...`; one entry per outer iteration.
    pub errors: Vec<f64>,
    pub iterations: usize,
    pub status: Status,
    pub diagnostics: Diagnostics,
}

impl EquilibriumSolution {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

fn clamp_control(tau: &mut Control, bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        for f in [&mut tau.nodes, &mut tau.edges] {
            let levels = f.levels();
            for k in 0..levels {
                f.level_mut(k).iter_mut().for_each(|t| *t = t.clamp(lo, hi));
            }
        }
    }
}

fn target_control(v: &Field, grids: &Grids) -> Control {
    let mut target = Control::constant(grids, 0.0);
    for k in 0..grids.time.len() {
        let (nodes, edges) = control_from_value(v.level(k), &grids.space);
        target.nodes.set_level(k, &nodes);
        target.edges.set_level(k, &edges);
    }
    target
}

fn relax(current: &Control, target: &Control, omega: f64) -> Control {
    if omega == 1.0 {
        return target.clone();
    }
    let mut out = current.clone();
    for (dst, src) in [
        (&mut out.nodes, &target.nodes),
        (&mut out.edges, &target.edges),
    ] {
        for k in 0..src.levels() {
            dst.level_mut(k)
                .iter_mut()
                .zip(src.level(k))
                .for_each(|(d, s)| *d = (1.0 - omega) * *d + omega * s);
        }
    }
    out
}

/// Compute the mean field equilibrium. Running out of iterations is not an
/// error: the returned solution then has [`Status::MaxIterations`] and the
/// full trace.
pub fn solve_equilibrium(
    config: &SolverConfig,
    params: &ModelParams,
    schedule: &PriceSchedule,
    m0_kind: &InitialDensity,
) -> Result<EquilibriumSolution> {
    config.validate()?;
    params.validate()?;
    schedule.validate(params.horizon)?;
    let grids = config.grids(params)?;
    let m0 = initial_density(m0_kind, &grids.space)?;

    let mut tau = match &config.initial_tau {
        InitialControl::Constant(t) => Control::constant(&grids, *t),
        InitialControl::Field(f) => {
            f.check_shape(&grids)?;
            f.clone()
        }
    };
    clamp_control(&mut tau, config.tau_bounds);

    let mut diagnostics = Diagnostics::default();
    let mut errors = Vec::new();
    let mut status = Status::MaxIterations;
    let mut fields = None;

    for n in 0..config.max_iter {
        let kfp = solve_kfp(&tau, &m0, &grids, params, config.theta, config.closure)?;
        kfp.m.check_finite()?;
        diagnostics.mmatrix.merge(&kfp.mmatrix);
        diagnostics.clip_events += kfp.clip_events;
        diagnostics.max_mass_drift = diagnostics.max_mass_drift.max(kfp.max_mass_drift);

        let hjb = match config.hjb_control {
            HjbControl::Frozen => solve_hjb(&kfp.m, &tau, schedule, &grids, params, config.theta)?,
            HjbControl::SelfConsistent => {
                solve_hjb_consistent(&kfp.m, schedule, &grids, params, config.theta, config.inner)?
            }
        };
        hjb.v.check_finite()?;
        diagnostics.mmatrix.merge(&hjb.mmatrix);
        diagnostics.inner_iterations += hjb.inner_iterations;

        let target = target_control(&hjb.v, &grids);
        let mut next = relax(&tau, &target, config.relaxation);
        clamp_control(&mut next, config.tau_bounds);
        next.nodes.check_finite()?;
        let eps = iteration_error(&tau.nodes, &next.nodes)?;
        errors.push(eps);
        debug!("outer iteration {n}: eps = {eps:e}");
        tau = next;
        fields = Some((kfp.m, hjb.v));
        if eps <= config.tol {
            status = Status::Converged;
            break;
        }
    }

    let (m, v) = fields.expect("max_iter >= 1 guarantees one iteration");
    let iterations = errors.len();
    info!(
        "equilibrium {:?} after {iterations} iterations, last eps = {:e}",
        status,
        errors.last().copied().unwrap_or(f64::NAN)
    );
    Ok(EquilibriumSolution {
        grids,
        m,
        v,
        tau,
        errors,
        iterations,
        status,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Quantity;

    #[test]
    fn drift_of_constants_and_linears() {
        let g = SpaceGrid::uniform(16, 1.0, 5.0).unwrap();
        assert!(drift_from_value(&[2.5; 17], &g).iter().all(|&t| t == 0.0));
        let lin: Vec<f64> = g.nodes().to_vec();
        for t in drift_from_value(&lin, &g) {
            assert!((t + 1.0).abs() < 1e-12);
        }
        for t in edge_drift_from_value(&lin, &g) {
            assert!((t + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_of_a_quadratic() {
        let g = SpaceGrid::uniform(128, 1.0, 5.0).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|e| e * e).collect();
        for (t, e) in drift_from_value(&v, &g).iter().zip(g.nodes()) {
            assert!((t + 2.0 * e).abs() < 1e-3, "at {e}: {t}");
        }
    }

    #[test]
    fn iteration_error_examples() {
        let a = Field::filled(Quantity::Control, 3, 4, 0.5);
        assert_eq!(iteration_error(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.level_mut(1)[2] += 0.3;
        assert!((iteration_error(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        let c = Field::filled(Quantity::Control, 3, 4, 0.6);
        assert!((iteration_error(&a, &c).unwrap() - 0.1).abs() < 1e-15);
        let d = Field::filled(Quantity::Control, 2, 4, 0.6);
        assert!(iteration_error(&a, &d).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = [
            SolverConfig {
                theta: 0.4,
                ..Default::default()
            },
            SolverConfig {
                tol: 0.0,
                ..Default::default()
            },
            SolverConfig {
                max_iter: 0,
                ..Default::default()
            },
            SolverConfig {
                relaxation: 0.0,
                ..Default::default()
            },
            SolverConfig {
                relaxation: 1.5,
                ..Default::default()
            },
            SolverConfig {
                tau_bounds: Some((1.0, -1.0)),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    fn small() -> SolverConfig {
        SolverConfig::default().with_resolution(32, 32)
    }

    #[test]
    fn no_congestion_converges_in_two_iterations() {
        let params = ModelParams {
            c2: 0.0,
            ..ModelParams::default()
        };
        let sol = solve_equilibrium(
            &small(),
            &params,
            &PriceSchedule::default(),
            &InitialDensity::default(),
        )
        .unwrap();
        assert!(sol.converged());
        assert_eq!(sol.iterations, 2);
        assert_eq!(sol.errors[1], 0.0);
    }

    #[test]
    fn trace_integrity() {
        let cfg = SolverConfig {
            max_iter: 2,
            tol: 1e-14,
            ..small()
        };
        let sol = solve_equilibrium(
            &cfg,
            &ModelParams::default(),
            &PriceSchedule::default(),
            &InitialDensity::default(),
        )
        .unwrap();
        assert_eq!(sol.status, Status::MaxIterations);
        assert_eq!(sol.errors.len(), sol.iterations);
        assert!(*sol.errors.last().unwrap() > cfg.tol);

        let sol = solve_equilibrium(
            &small(),
            &ModelParams::default(),
            &PriceSchedule::default(),
            &InitialDensity::default(),
        )
        .unwrap();
        assert!(sol.converged());
        assert_eq!(sol.errors.len(), sol.iterations);
        assert!(*sol.errors.last().unwrap() <= 1e-6);
    }

    #[test]
    fn deterministic() {
        let run = || {
            solve_equilibrium(
                &small(),
                &ModelParams::default(),
                &PriceSchedule::ramp(2.0),
                &InitialDensity::Tent { peak: 2.0 },
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.m, b.m);
        assert_eq!(a.v, b.v);
        assert_eq!(a.tau, b.tau);
        assert_eq!(a.errors, b.errors);
    }

    #[test]
    fn damped_fixed_point_is_undamped_fixed_point() {
        for (omega, mode) in [(0.6, HjbControl::SelfConsistent), (0.8, HjbControl::Frozen)] {
            let cfg = SolverConfig {
                relaxation: omega,
                hjb_control: mode,
                ..small()
            };
            let sol = solve_equilibrium(
                &cfg,
                &ModelParams::default(),
                &PriceSchedule::default(),
                &InitialDensity::default(),
            )
            .unwrap();
            assert!(sol.converged(), "{mode:?}");
            let target = target_control(&sol.v, &sol.grids);
            let gap = iteration_error(&sol.tau.nodes, &target.nodes).unwrap();
            assert!(gap <= cfg.tol / omega, "{gap}");
        }
    }

    #[test]
    fn frozen_and_consistent_share_the_fixed_point() {
        let tight = SolverConfig {
            tol: 1e-11,
            ..small()
        };
        let frozen = SolverConfig {
            hjb_control: HjbControl::Frozen,
            ..tight.clone()
        };
        let p = ModelParams::default();
        let s = PriceSchedule::default();
        let m0 = InitialDensity::default();
        let a = solve_equilibrium(&tight, &p, &s, &m0).unwrap();
        let b = solve_equilibrium(&frozen, &p, &s, &m0).unwrap();
        assert!(a.converged() && b.converged());
        let gap = iteration_error(&a.v, &b.v).unwrap();
        assert!(gap < 1e-9, "{gap}");
    }

    #[test]
    fn control_bounds_are_respected() {
        let cfg = SolverConfig {
            tau_bounds: Some((-0.05, 0.05)),
            ..small()
        };
        let sol = solve_equilibrium(
            &cfg,
            &ModelParams::default(),
            &PriceSchedule::Constant { price: 2.0 },
            &InitialDensity::default(),
        )
        .unwrap();
        assert!(sol.tau.nodes.as_slice().iter().all(|t| t.abs() <= 0.05));
    }
}
