//! Independent checks of the PDE solver: particle simulation of the
//! reflected state equation, grid-refinement studies, and the population
//! payoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::coupling::{solve_equilibrium, SolverConfig};
use crate::error::{Error, Result};
use crate::field::{Control, Field};
use crate::grid::{Grids, SpaceGrid, TimeGrid};
use crate::hjb::solve_hjb_with_source;
use crate::model::{running_payoff, InitialDensity, ModelParams, PriceSchedule};

/// Particles per parallel work unit. Results do not depend on it.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    pub seed: u64,
    /// Euler substeps taken per particle.
    pub steps: usize,
}

/// Fold `e` back into `[lo, hi]` by repeated mirror reflection.
pub fn reflect(mut e: f64, lo: f64, hi: f64) -> f64 {
    while e < lo || e > hi {
        if e < lo {
            e = 2.0 * lo - e;
        }
        if e > hi {
            e = 2.0 * hi - e;
        }
    }
    e
}

fn sample_initial<R: Rng>(kind: &InitialDensity, lo: f64, hi: f64, rng: &mut R) -> f64 {
    match *kind {
        InitialDensity::TruncatedNormal { mean, variance } => {
            let normal = Normal::new(mean, variance.sqrt()).expect("validated variance");
            loop {
                let e = normal.sample(rng);
                if (lo..=hi).contains(&e) {
                    return e;
                }
            }
        }
        InitialDensity::Tent { peak } => {
            let u: f64 = rng.random();
            let width = hi - lo;
            let left = (peak - lo) / width;
            if u < left {
                lo + (u * (peak - lo) * width).sqrt()
            } else {
                hi - ((1.0 - u) * (hi - peak) * width).sqrt()
            }
        }
    }
}

/// Linear interpolation of node values at `e`.
fn interpolate(values: &[f64], grid: &SpaceGrid, e: f64) -> f64 {
    let nodes = grid.nodes();
    let j = nodes.partition_point(|&x| x <= e).clamp(1, nodes.len() - 1);
    let w = (e - nodes[j - 1]) / (nodes[j] - nodes[j - 1]);
    (1.0 - w) * values[j - 1] + w * values[j]
}

/// Euler–Maruyama paths of `dE = -τ(t, E) dt + σ dW` reflected at both ends,
/// from `t = 0` to `t = T`. `τ` is interpolated bilinearly between grid
/// times and nodes. Particle `p` draws from its own ChaCha stream, so the
/// ensemble is independent of how the work is split across threads.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    tau: &Field,
    grids: &Grids,
    params: &ModelParams,
    n_particles: usize,
    substeps_per_level: usize,
    seed: u64,
    m0_kind: &InitialDensity,
) -> Result<ParticleEnsemble> {
    if n_particles < 1 {
        return Err(Error::invalid("particles", "need at least one particle"));
    }
    if substeps_per_level < 1 {
        return Err(Error::invalid(
            "substeps",
            "need at least one substep per level",
        ));
    }
    tau.check_shape(grids.time.len(), grids.space.len())?;
    let (lo, hi) = (grids.space.e_min(), grids.space.e_max());
    m0_kind.validate(lo, hi)?;
    let levels = grids.time.levels();
    let k_max = grids.time.steps();
    let sigma = params.sigma;

    let simulate = |p: usize| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut e = sample_initial(m0_kind, lo, hi, &mut rng);
        for k in (0..k_max).rev() {
            // Forward in time: from t_{k+1} to t_k.
            let dt = (levels[k] - levels[k + 1]) / substeps_per_level as f64;
            let sqrt_dt = dt.sqrt();
            for s in 0..substeps_per_level {
                let w = s as f64 / substeps_per_level as f64;
                let drift = (1.0 - w) * interpolate(tau.level(k + 1), &grids.space, e)
                    + w * interpolate(tau.level(k), &grids.space, e);
                let z: f64 = StandardNormal.sample(&mut rng);
                e = reflect(e - drift * dt + sigma * sqrt_dt * z, lo, hi);
                assert!((lo..=hi).contains(&e), "particle escaped to {e}");
            }
        }
        e
    };

    let positions: Vec<f64> = (0..n_particles)
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(simulate)
        .collect();
    Ok(ParticleEnsemble {
        positions,
        seed,
        steps: k_max * substeps_per_level,
    })
}

/// Histogram on the control volumes, normalised to unit mass.
pub fn histogram_density(positions: &[f64], grid: &SpaceGrid) -> Vec<f64> {
    let counts = positions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut c = vec![0u64; grid.len()];
            for &e in chunk {
                c[grid.cell_of(e)] += 1;
            }
            c
        })
        .reduce(
            || vec![0u64; grid.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let total = positions.len() as f64;
    counts
        .iter()
        .zip(grid.cell_widths())
        .map(|(&c, l)| c as f64 / (total * l))
        .collect()
}

/// Empirical density at `t = T` from a particle simulation driven by the
/// node control field.
#[allow(clippy::too_many_arguments)]
pub fn simulate_particles(
    tau: &Field,
    grids: &Grids,
    params: &ModelParams,
    n_particles: usize,
    substeps_per_level: usize,
    seed: u64,
    m0_kind: &InitialDensity,
) -> Result<Vec<f64>> {
    let ens = simulate_ensemble(
        tau,
        grids,
        params,
        n_particles,
        substeps_per_level,
        seed,
        m0_kind,
    )?;
    Ok(histogram_density(&ens.positions, &grids.space))
}

/// `Σ_i l_i |d1_i - d2_i|`.
pub fn l1_distance(d1: &[f64], d2: &[f64], grid: &SpaceGrid) -> Result<f64> {
    if d1.len() != grid.len() {
        return Err(Error::mismatch("first density", grid.len(), d1.len()));
    }
    if d2.len() != grid.len() {
        return Err(Error::mismatch("second density", grid.len(), d2.len()));
    }
    Ok(d1
        .iter()
        .zip(d2)
        .zip(grid.cell_widths())
        .map(|((a, b), l)| l * (a - b).abs())
        .sum())
}

/// Mass of a node density on `[E_min, threshold)`, treating it as constant
/// on each control volume.
pub fn mass_below(m: &[f64], grid: &SpaceGrid, threshold: f64) -> f64 {
    let edges = grid.edges();
    m.iter()
        .enumerate()
        .map(|(i, &mi)| {
            let covered = (threshold.min(edges[i + 1]) - edges[i]).max(0.0);
            mi * covered
        })
        .sum()
}

/// Mass on the lower half `[E_min, (E_min + E_max) / 2)` of the state space.
pub fn low_emission_mass(m: &[f64], grid: &SpaceGrid) -> f64 {
    mass_below(m, grid, 0.5 * (grid.e_min() + grid.e_max()))
}

/// Population payoff `∫ e^{-rt} ∫ payoff(E, τ, m, S) m dE dt`, trapezoid in
/// time and control-volume weighted in space.
pub fn discounted_payoff(
    m: &Field,
    tau: &Field,
    schedule: &PriceSchedule,
    grids: &Grids,
    params: &ModelParams,
) -> Result<f64> {
    let (levels, width) = (grids.time.len(), grids.space.len());
    m.check_shape(levels, width)?;
    tau.check_shape(levels, width)?;
    let times = grids.time.levels();
    let inner = |k: usize| -> f64 {
        let price = schedule.value(times[k]);
        grids
            .space
            .nodes()
            .iter()
            .zip(grids.space.cell_widths())
            .zip(m.level(k).iter().zip(tau.level(k)))
            .map(|((&e, &l), (&mi, &ti))| l * running_payoff(e, ti, mi, price, params) * mi)
            .sum::<f64>()
            * (-params.r * times[k]).exp()
    };
    let mut total = 0.0;
    for k in 0..grids.time.steps() {
        total += 0.5 * (times[k] - times[k + 1]) * (inner(k) + inner(k + 1));
    }
    Ok(total)
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn fitted_order(h: &[f64], errors: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(errors)
        .filter(|(hh, e)| **hh > 0.0 && **e > 0.0 && e.is_finite())
        .map(|(hh, e)| (hh.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelError {
    pub n: u32,
    /// `N = K = 2^n`.
    pub cells: usize,
    pub h: f64,
    /// Discrete L∞ error of `v(·, 0)` over all nodes; NaN on failure.
    pub error: f64,
    /// The same restricted to nodes `1..N-1`.
    pub interior_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelError>,
    /// Slope over the converged levels, if at least two exist.
    pub fitted_order: Option<f64>,
    /// Slope of the interior-node errors.
    pub interior_fitted_order: Option<f64>,
    pub reference_level: u32,
    pub reference_converged: bool,
}

/// Grid-refinement study of `v(·, 0)` on nested dyadic grids `N = K = 2^n`
/// against the solution at `2^{n_ref}`. Coarse nodes are a subset of the
/// reference nodes, so no interpolation is involved.
pub fn convergence_study(
    n_min: u32,
    n_max: u32,
    n_ref: u32,
    config_base: &SolverConfig,
    params: &ModelParams,
    schedule: &PriceSchedule,
    m0_kind: &InitialDensity,
) -> Result<ConvergenceReport> {
    if n_min < 1 || n_min >= n_max || n_max >= n_ref {
        return Err(Error::invalid(
            "n_min/n_max/n_ref",
            format!("need 1 <= n_min < n_max < n_ref, got {n_min}, {n_max}, {n_ref}"),
        ));
    }
    if n_ref > 16 {
        return Err(Error::invalid("n_ref", "at most 16"));
    }
    let run = |n: u32| {
        let cells = 1usize << n;
        let cfg = config_base.clone().with_resolution(cells, cells);
        solve_equilibrium(&cfg, params, schedule, m0_kind)
    };
    let reference = run(n_ref)?;
    let k_ref = reference.grids.time.steps();
    let v_ref = reference.v.level(k_ref);

    let levels: Vec<LevelError> = (n_min..=n_max)
        .into_par_iter()
        .map(|n| {
            let cells = 1usize << n;
            let h = (params.e_max - params.e_min) / cells as f64;
            let stride = 1usize << (n_ref - n);
            match run(n) {
                Ok(sol) => {
                    let v0 = sol.v.level(sol.grids.time.steps());
                    let err = |i: usize| (v0[i] - v_ref[i * stride]).abs();
                    LevelError {
                        n,
                        cells,
                        h,
                        error: (0..=cells).map(err).fold(0.0, f64::max),
                        interior_error: (1..cells).map(err).fold(0.0, f64::max),
                        converged: sol.converged(),
                    }
                }
                Err(e) => {
                    log::warn!("convergence level n={n} failed: {e}");
                    LevelError {
                        n,
                        cells,
                        h,
                        error: f64::NAN,
                        interior_error: f64::NAN,
                        converged: false,
                    }
                }
            }
        })
        .collect();

    let ok: Vec<&LevelError> = levels.iter().filter(|l| l.converged).collect();
    let h: Vec<f64> = ok.iter().map(|l| l.h).collect();
    let fitted = fitted_order(&h, &ok.iter().map(|l| l.error).collect::<Vec<_>>());
    let interior = fitted_order(&h, &ok.iter().map(|l| l.interior_error).collect::<Vec<_>>());
    Ok(ConvergenceReport {
        levels,
        fitted_order: fitted,
        interior_fitted_order: interior,
        reference_level: n_ref,
        reference_converged: reference.converged(),
    })
}

/// Relative error at `t = 0` of the adjoint solve with a spatially uniform
/// source `f`, zero control and `K` steps, against `(f/r)(1 - e^{-rT})`.
pub fn uniform_source_error(
    theta: f64,
    k: usize,
    n: usize,
    f: f64,
    params: &ModelParams,
) -> Result<f64> {
    let grids = Grids::new(
        SpaceGrid::uniform(n, params.e_min, params.e_max)?,
        TimeGrid::uniform(k, params.horizon)?,
    );
    let tau = Control::constant(&grids, 0.0);
    let width = grids.space.len();
    let sol = solve_hjb_with_source(|_| vec![f; width], &tau, &grids, params, theta)?;
    let exact = if params.r == 0.0 {
        f * params.horizon
    } else {
        f / params.r * (1.0 - (-params.r * params.horizon).exp())
    };
    Ok(sol
        .v
        .level(k)
        .iter()
        .map(|x| ((x - exact) / exact).abs())
        .fold(0.0, f64::max))
}

/// Observed orders `log2(e_j / e_{j+1})` between successive halvings.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Quantity;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn grids(n: usize, k: usize, horizon: f64) -> Grids {
        Grids::new(
            SpaceGrid::uniform(n, 1.0, 5.0).unwrap(),
            TimeGrid::uniform(k, horizon).unwrap(),
        )
    }

    #[test]
    fn reflection_folds_into_range() {
        assert_eq!(reflect(0.5, 1.0, 5.0), 1.5);
        assert_eq!(reflect(5.5, 1.0, 5.0), 4.5);
        assert_eq!(reflect(-7.5, 1.0, 5.0), 1.5);
        assert_eq!(reflect(3.0, 1.0, 5.0), 3.0);
    }

    #[test]
    fn frozen_dynamics_without_noise() {
        let g = grids(16, 8, 1.0);
        let p = ModelParams {
            sigma: 0.0,
            ..ModelParams::default()
        };
        let tau = Field::on_nodes(Quantity::Control, &g);
        let kind = InitialDensity::default();
        let ens = simulate_ensemble(&tau, &g, &p, 500, 4, 3, &kind).unwrap();
        // Same seed, no steps: the initial draws.
        let g0 = grids(16, 1, 1.0);
        let p0 = ModelParams {
            sigma: 0.0,
            ..ModelParams::default()
        };
        let tau0 = Field::on_nodes(Quantity::Control, &g0);
        let start = simulate_ensemble(&tau0, &g0, &p0, 500, 1, 3, &kind).unwrap();
        assert_eq!(ens.positions, start.positions);
        assert_eq!(ens.steps, 32);
    }

    #[test]
    fn long_run_tends_to_uniform() {
        let g = grids(16, 200, 20.0);
        let p = ModelParams {
            sigma: 1.0,
            horizon: 20.0,
            ..ModelParams::default()
        };
        let tau = Field::on_nodes(Quantity::Control, &g);
        let d = simulate_particles(
            &tau,
            &g,
            &p,
            40_000,
            2,
            9,
            &InitialDensity::Tent { peak: 2.0 },
        )
        .unwrap();
        let uniform = vec![0.25; 17];
        assert!(l1_distance(&d, &uniform, &g.space).unwrap() < 0.05);
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let g = grids(16, 8, 1.0);
        let p = ModelParams::default();
        let tau = Field::filled(Quantity::Control, 9, 17, 0.3);
        let kind = InitialDensity::default();
        let a = simulate_particles(&tau, &g, &p, 10_000, 3, 42, &kind).unwrap();
        let b = simulate_particles(&tau, &g, &p, 10_000, 3, 42, &kind).unwrap();
        let c = simulate_particles(&tau, &g, &p, 10_000, 3, 43, &kind).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn particle_count_is_validated() {
        let g = grids(8, 4, 1.0);
        let tau = Field::on_nodes(Quantity::Control, &g);
        let p = ModelParams::default();
        assert!(simulate_particles(&tau, &g, &p, 0, 4, 1, &InitialDensity::default()).is_err());
    }

    #[test]
    fn l1_examples() {
        let g = SpaceGrid::uniform(8, 1.0, 5.0).unwrap();
        let u = vec![0.25; 9];
        assert_eq!(l1_distance(&u, &u, &g).unwrap(), 0.0);
        let mut a = vec![0.0; 9];
        let mut b = vec![0.0; 9];
        a[2] = 1.0 / g.cell_widths()[2];
        b[6] = 1.0 / g.cell_widths()[6];
        assert!((l1_distance(&a, &b, &g).unwrap() - 2.0).abs() < 1e-14);
        let twice: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        assert!((l1_distance(&u, &twice, &g).unwrap() - 1.0).abs() < 1e-14);
        assert!(l1_distance(&u, &u[..8], &g).is_err());
    }

    #[test]
    fn mass_below_threshold() {
        let g = SpaceGrid::uniform(4, 1.0, 5.0).unwrap();
        let u = vec![0.25; 5];
        assert!((mass_below(&u, &g, 3.0) - 0.5).abs() < 1e-15);
        assert!((low_emission_mass(&u, &g) - 0.5).abs() < 1e-15);
        assert!((mass_below(&u, &g, 5.0) - 1.0).abs() < 1e-15);
        assert_eq!(mass_below(&u, &g, 1.0), 0.0);
    }

    #[test]
    fn payoff_of_empty_population() {
        let g = grids(16, 16, 1.0);
        let m = Field::on_nodes(Quantity::Density, &g);
        let tau = Field::filled(Quantity::Control, 17, 17, 0.4);
        let p = ModelParams::default();
        assert_eq!(
            discounted_payoff(&m, &tau, &PriceSchedule::default(), &g, &p).unwrap(),
            0.0
        );
    }

    #[test]
    fn payoff_of_point_mass_matches_discounting() {
        let g = grids(16, 64, 1.0);
        let p = ModelParams {
            c2: 0.0,
            ..ModelParams::default()
        };
        let j = 8; // E = 3
        let mut m = Field::on_nodes(Quantity::Density, &g);
        for k in 0..g.time.len() {
            m.level_mut(k)[j] = 1.0 / g.space.cell_widths()[j];
        }
        let tau = Field::on_nodes(Quantity::Control, &g);
        let c = crate::model::revenue(3.0, 0.0, &p);
        let sched = PriceSchedule::Constant { price: 0.0 };
        let got = discounted_payoff(&m, &tau, &sched, &g, &p).unwrap();
        let want = c * (1.0 - (-p.r).exp()) / p.r;
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn higher_price_lowers_payoff_when_net_buyers() {
        let g = grids(16, 16, 1.0);
        let p = ModelParams::default();
        let m = Field::filled(Quantity::Density, 17, 17, 0.25);
        let tau = Field::filled(Quantity::Control, 17, 17, 0.1);
        let low =
            discounted_payoff(&m, &tau, &PriceSchedule::Constant { price: 0.2 }, &g, &p).unwrap();
        let high =
            discounted_payoff(&m, &tau, &PriceSchedule::Constant { price: 0.4 }, &g, &p).unwrap();
        assert!(high < low);
    }

    #[test]
    fn fitted_order_of_exact_power_law() {
        let h = [0.5, 0.25, 0.125, 0.0625];
        let e: Vec<f64> = h.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((fitted_order(&h, &e).unwrap() - 2.0).abs() < 1e-12);
        assert!(fitted_order(&h[..1], &e[..1]).is_none());
    }

    #[test]
    fn study_rejects_bad_levels() {
        let base = SolverConfig::default();
        let p = ModelParams::default();
        let s = PriceSchedule::default();
        let m0 = InitialDensity::default();
        assert!(convergence_study(4, 8, 8, &base, &p, &s, &m0).is_err());
        assert!(convergence_study(5, 4, 8, &base, &p, &s, &m0).is_err());
        assert!(convergence_study(0, 3, 5, &base, &p, &s, &m0).is_err());
    }

    #[test]
    fn theta_scheme_orders_on_the_ode_problem() {
        let p = ModelParams::default();
        let ks = [16, 32, 64, 128];
        let errs = |theta: f64| -> Vec<f64> {
            ks.iter()
                .map(|&k| uniform_source_error(theta, k, 8, 1.0, &p).unwrap())
                .collect()
        };
        for order in observed_orders(&errs(0.5)) {
            assert!(order >= 1.8, "{order}");
        }
        for order in observed_orders(&errs(1.0)) {
            assert!((0.8..=1.2).contains(&order), "{order}");
        }
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = SpaceGrid::uniform(10, 1.0, 5.0).unwrap();
            let mut draw = || (0..11).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
            let (a, b, c) = (draw(), draw(), draw());
            let ab = l1_distance(&a, &b, &g).unwrap();
            prop_assert_eq!(ab, l1_distance(&b, &a, &g).unwrap());
            prop_assert_eq!(l1_distance(&a, &a, &g).unwrap(), 0.0);
            let ac = l1_distance(&a, &c, &g).unwrap();
            let cb = l1_distance(&c, &b, &g).unwrap();
            prop_assert!(ab <= ac + cb + 1e-15);
        }
    }
}
