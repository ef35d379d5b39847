//! Economic primitives of the producers' game: revenue with congestion,
//! abatement and permit-trading costs, the permit price path, and initial
//! population densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpaceGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub e_min: f64,
    pub e_max: f64,
    /// Game horizon `T` in years.
    pub horizon: f64,
    /// Emission volatility.
    pub sigma: f64,
    /// Risk-free discount rate.
    pub r: f64,
    pub c1: f64,
    /// Congestion strength; revenue scales with `1 / (c1 + c2 m)`.
    pub c2: f64,
    /// Initial permit quota.
    pub e0: f64,
    /// Vertex of the revenue parabola. Equal to `e_max` unless overridden.
    pub a: f64,
    /// Set when `a` was chosen explicitly instead of following `e_max`.
    #[serde(default)]
    pub a_overridden: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            e_min: 1.0,
            e_max: 5.0,
            horizon: 1.0,
            sigma: 0.3,
            r: 0.1,
            c1: 10.0,
            c2: 0.1,
            e0: 1.0,
            a: 5.0,
            a_overridden: false,
        }
    }
}

impl ModelParams {
    /// Parameter set with `A = E_max`, validated.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        e_min: f64,
        e_max: f64,
        horizon: f64,
        sigma: f64,
        r: f64,
        c1: f64,
        c2: f64,
        e0: f64,
    ) -> Result<Self> {
        let p = Self {
            e_min,
            e_max,
            horizon,
            sigma,
            r,
            c1,
            c2,
            e0,
            a: e_max,
            a_overridden: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Replace the revenue vertex; the override is recorded.
    pub fn with_revenue_vertex(mut self, a: f64) -> Self {
        self.a_overridden = a != self.e_max;
        self.a = a;
        self
    }

    /// Diffusion coefficient `σ²/2` of the state equation.
    pub fn diffusion(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("e_min", self.e_min),
            ("e_max", self.e_max),
            ("horizon", self.horizon),
            ("sigma", self.sigma),
            ("r", self.r),
            ("c1", self.c1),
            ("c2", self.c2),
            ("e0", self.e0),
            ("a", self.a),
        ];
        if let Some((name, v)) = all.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(name, format!("must be finite, got {v}")));
        }
        if self.e_min >= self.e_max {
            return Err(Error::invalid("e_min", "must be below e_max"));
        }
        if self.horizon <= 0.0 {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid("sigma", "must be positive"));
        }
        if self.r < 0.0 {
            return Err(Error::invalid("r", "must be non-negative"));
        }
        if self.c1 <= 0.0 {
            return Err(Error::invalid("c1", "must be positive"));
        }
        if self.c2 < 0.0 {
            return Err(Error::invalid("c2", "must be non-negative"));
        }
        if !self.a_overridden && self.a != self.e_max {
            return Err(Error::invalid(
                "a",
                "differs from e_max without being marked as an override",
            ));
        }
        Ok(())
    }
}

/// Permit price path `S(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PriceSchedule {
    Constant {
        price: f64,
    },
    /// Zero before `t_start`, linear up to `s_max` at `t_end`, flat afterwards.
    Ramp {
        t_start: f64,
        t_end: f64,
        s_max: f64,
    },
}

impl Default for PriceSchedule {
    fn default() -> Self {
        PriceSchedule::Constant { price: 0.2 }
    }
}

impl PriceSchedule {
    pub fn ramp(s_max: f64) -> Self {
        PriceSchedule::Ramp {
            t_start: 0.1,
            t_end: 0.5,
            s_max,
        }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        match *self {
            PriceSchedule::Constant { price } => {
                if !(price.is_finite() && price >= 0.0) {
                    return Err(Error::invalid(
                        "price",
                        format!("must be >= 0, got {price}"),
                    ));
                }
            }
            PriceSchedule::Ramp {
                t_start,
                t_end,
                s_max,
            } => {
                if !(s_max.is_finite() && s_max >= 0.0) {
                    return Err(Error::invalid(
                        "s_max",
                        format!("must be >= 0, got {s_max}"),
                    ));
                }
                if !(0.0 <= t_start && t_start < t_end && t_end <= horizon) {
                    return Err(Error::invalid(
                        "t_start/t_end",
                        format!("need 0 <= t_start < t_end <= {horizon}, got {t_start}, {t_end}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The schedule with its level (`price` or `s_max`) replaced.
    pub fn with_level(self, level: f64) -> Self {
        match self {
            PriceSchedule::Constant { .. } => PriceSchedule::Constant { price: level },
            PriceSchedule::Ramp { t_start, t_end, .. } => PriceSchedule::Ramp {
                t_start,
                t_end,
                s_max: level,
            },
        }
    }

    /// `S(t)` without the domain check; callers inside the solver only ask
    /// for grid times.
    pub(crate) fn value(&self, t: f64) -> f64 {
        match *self {
            PriceSchedule::Constant { price } => price,
            PriceSchedule::Ramp {
                t_start,
                t_end,
                s_max,
            } => {
                if t < t_start {
                    0.0
                } else if t < t_end {
                    s_max * (t - t_start) / (t_end - t_start)
                } else {
                    s_max
                }
            }
        }
    }
}

/// Permit price at time `t` in `[0, horizon]`.
pub fn price_at(schedule: &PriceSchedule, t: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    Ok(schedule.value(t))
}

#[inline]
fn revenue_numerator(e: f64, p: &ModelParams) -> f64 {
    p.a * e - 0.5 * e * e
}

/// Production revenue `(A E - E²/2) / (c1 + c2 m)`.
#[inline]
pub fn revenue(e: f64, m: f64, p: &ModelParams) -> f64 {
    revenue_numerator(e, p) / (p.c1 + p.c2 * m)
}

#[inline]
pub fn abatement_cost(tau: f64) -> f64 {
    0.5 * tau * tau
}

/// Net permit purchases `S (E - E0)`; negative when permits are sold.
#[inline]
pub fn trading_cost(e: f64, price: f64, p: &ModelParams) -> f64 {
    price * (e - p.e0)
}

/// Instantaneous payoff of one producer.
#[inline]
pub fn running_payoff(e: f64, tau: f64, m: f64, price: f64, p: &ModelParams) -> f64 {
    revenue(e, m, p) - abatement_cost(tau) - trading_cost(e, price, p)
}

/// Source term of the adjoint equation: the running payoff plus the
/// congestion correction `-c2 m (A E - E²/2) / (c1 + c2 m)²` coming from
/// differentiating the population payoff in `m`.
#[inline]
pub fn adjoint_source(e: f64, tau: f64, m: f64, price: f64, p: &ModelParams) -> f64 {
    let num = revenue_numerator(e, p);
    let den = p.c1 + p.c2 * m;
    -abatement_cost(tau) - trading_cost(e, price, p) + num / den - p.c2 * m * num / (den * den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitialDensity {
    /// Normal law restricted to the state interval. `variance` is σ², not σ.
    TruncatedNormal { mean: f64, variance: f64 },
    /// Zero at both ends of the interval, linear up to a single peak.
    Tent { peak: f64 },
}

impl Default for InitialDensity {
    fn default() -> Self {
        InitialDensity::TruncatedNormal {
            mean: 3.0,
            variance: 0.35,
        }
    }
}

impl InitialDensity {
    pub fn validate(&self, e_min: f64, e_max: f64) -> Result<()> {
        match *self {
            InitialDensity::TruncatedNormal { mean, variance } => {
                if !(variance.is_finite() && variance > 0.0) {
                    return Err(Error::invalid("variance", "must be positive"));
                }
                if !mean.is_finite() {
                    return Err(Error::invalid("mean", "must be finite"));
                }
            }
            InitialDensity::Tent { peak } => {
                if !(e_min < peak && peak < e_max) {
                    return Err(Error::invalid(
                        "peak",
                        format!("must lie strictly inside ({e_min}, {e_max}), got {peak}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Unnormalised shape at emission level `e` on `[e_min, e_max]`.
    pub fn shape(&self, e: f64, e_min: f64, e_max: f64) -> f64 {
        match *self {
            InitialDensity::TruncatedNormal { mean, variance } => {
                let z = e - mean;
                (-0.5 * z * z / variance).exp()
            }
            InitialDensity::Tent { peak } => {
                let height = 2.0 / (e_max - e_min);
                if e <= e_min || e >= e_max {
                    0.0
                } else if e <= peak {
                    height * (e - e_min) / (peak - e_min)
                } else {
                    height * (e_max - e) / (e_max - peak)
                }
            }
        }
    }
}

/// Node-sampled initial density, scaled so that `Σ l_i m_i = 1`.
pub fn initial_density(kind: &InitialDensity, grid: &SpaceGrid) -> Result<Vec<f64>> {
    if grid.cells() < 2 {
        return Err(Error::invalid(
            "N",
            "initial density needs at least 2 cells",
        ));
    }
    let (lo, hi) = (grid.e_min(), grid.e_max());
    kind.validate(lo, hi)?;
    let mut m: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&e| kind.shape(e, lo, hi))
        .collect();
    let mass: f64 = m.iter().zip(grid.cell_widths()).map(|(v, l)| v * l).sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::invalid("initial_density", "has no mass on the grid"));
    }
    m.iter_mut().for_each(|v| *v /= mass);
    Ok(m)
}
