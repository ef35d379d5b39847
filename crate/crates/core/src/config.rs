//! TOML run configuration. Every key is optional; an empty file gives the
//! default model, the constant price 0.2 and the truncated-normal start.
//!
//! ```toml
//! [model]
//! sigma = 0.3
//! c2 = 0.1
//!
//! [solver]
//! n = 64
//! k = 64
//! theta = 0.5
//! hjb_control = "consistent"   # or "frozen"
//!
//! [schedule]
//! kind = "ramp"
//! s_max = 2.0
//!
//! [initial_density]
//! kind = "tent"
//! peak = 2.0
//!
//! [validation]
//! seed = 7
//! particles = 100000
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::coupling::{HjbControl, InitialControl, SolverConfig};
use crate::error::{Error, Result};
use crate::kfp::DensityClosure;
use crate::model::{InitialDensity, ModelParams, PriceSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    pub seed: u64,
    pub particles: usize,
    pub substeps: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            particles: 100_000,
            substeps: 4,
        }
    }
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub params: ModelParams,
    pub solver: SolverConfig,
    pub schedule: PriceSchedule,
    pub initial_density: InitialDensity,
    pub validation: ValidationConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    model: Option<RawModel>,
    solver: Option<RawSolver>,
    schedule: Option<RawSchedule>,
    initial_density: Option<RawDensity>,
    validation: Option<RawValidation>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    e_min: Option<f64>,
    e_max: Option<f64>,
    horizon: Option<f64>,
    sigma: Option<f64>,
    r: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    e0: Option<f64>,
    a: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    n: Option<usize>,
    k: Option<usize>,
    theta: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    relaxation: Option<f64>,
    initial_tau: Option<f64>,
    hjb_control: Option<String>,
    kfp_closure: Option<String>,
    inner_tol: Option<f64>,
    inner_max_iter: Option<usize>,
    tau_bounds: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    kind: Option<String>,
    price: Option<f64>,
    t_start: Option<f64>,
    t_end: Option<f64>,
    s_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDensity {
    kind: Option<String>,
    mean: Option<f64>,
    variance: Option<f64>,
    peak: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValidation {
    seed: Option<u64>,
    particles: Option<usize>,
    substeps: Option<usize>,
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Re-label a validation failure with the section it came from.
fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, reason } => {
            config_err(&format!("{section}.{name}"), reason)
        }
        other => other,
    }
}

fn unexpected(section: &str, key: &str, kind: &str) -> Error {
    config_err(
        &format!("{section}.{key}"),
        format!("not used with kind = \"{kind}\""),
    )
}

impl RunConfig {
    /// Parse TOML text. A blank or comment-only document means all defaults;
    /// anything else must contain a `[model]` table.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let blank = text
            .lines()
            .map(str::trim)
            .all(|l| l.is_empty() || l.starts_with('#'));
        if blank {
            return Ok(Self::default());
        }
        let raw: RawFile = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            config_err(&key, msg.trim())
        })?;
        if raw.model.is_none() {
            return Err(config_err("model", "missing [model] section"));
        }
        Self::from_raw(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn from_raw(raw: RawFile) -> Result<Self> {
        let mut cfg = RunConfig::default();

        let m = raw.model.unwrap_or_default();
        let p = &mut cfg.params;
        p.e_min = m.e_min.unwrap_or(p.e_min);
        p.e_max = m.e_max.unwrap_or(p.e_max);
        p.horizon = m.horizon.unwrap_or(p.horizon);
        p.sigma = m.sigma.unwrap_or(p.sigma);
        p.r = m.r.unwrap_or(p.r);
        p.c1 = m.c1.unwrap_or(p.c1);
        p.c2 = m.c2.unwrap_or(p.c2);
        p.e0 = m.e0.unwrap_or(p.e0);
        if let Some(a) = m.a {
            *p = p.clone().with_revenue_vertex(a);
        }
        p.validate().map_err(|e| in_section("model", e))?;

        let s = raw.solver.unwrap_or_default();
        let sc = &mut cfg.solver;
        sc.n = s.n.unwrap_or(sc.n);
        sc.k = s.k.unwrap_or(sc.k);
        sc.theta = s.theta.unwrap_or(sc.theta);
        sc.tol = s.tol.unwrap_or(sc.tol);
        sc.max_iter = s.max_iter.unwrap_or(sc.max_iter);
        sc.relaxation = s.relaxation.unwrap_or(sc.relaxation);
        if let Some(t) = s.initial_tau {
            sc.initial_tau = InitialControl::Constant(t);
        }
        if let Some(mode) = s.hjb_control.as_deref() {
            sc.hjb_control = match mode {
                "consistent" => HjbControl::SelfConsistent,
                "frozen" => HjbControl::Frozen,
                other => {
                    return Err(config_err(
                        "solver.hjb_control",
                        format!("expected \"consistent\" or \"frozen\", got \"{other}\""),
                    ))
                }
            };
        }
        if let Some(closure) = s.kfp_closure.as_deref() {
            sc.closure = match closure {
                "zero_flux" => DensityClosure::ZeroFlux,
                "neumann" => DensityClosure::Neumann,
                other => {
                    return Err(config_err(
                        "solver.kfp_closure",
                        format!("expected \"zero_flux\" or \"neumann\", got \"{other}\""),
                    ))
                }
            };
        }
        sc.inner.tol = s.inner_tol.unwrap_or(sc.inner.tol);
        sc.inner.max_iter = s.inner_max_iter.unwrap_or(sc.inner.max_iter);
        sc.tau_bounds = s.tau_bounds.map(|[lo, hi]| (lo, hi));
        if sc.n < 2 {
            return Err(config_err(
                "solver.n",
                format!("need at least 2 cells, got {}", sc.n),
            ));
        }
        if sc.k < 1 {
            return Err(config_err("solver.k", "need at least 1 time step"));
        }
        sc.validate().map_err(|e| in_section("solver", e))?;

        let sch = raw.schedule.unwrap_or_default();
        let kind = sch.kind.as_deref().unwrap_or("constant");
        cfg.schedule = match kind {
            "constant" => {
                for (key, val) in [
                    ("t_start", sch.t_start),
                    ("t_end", sch.t_end),
                    ("s_max", sch.s_max),
                ] {
                    if val.is_some() {
                        return Err(unexpected("schedule", key, kind));
                    }
                }
                PriceSchedule::Constant {
                    price: sch.price.unwrap_or(0.2),
                }
            }
            "ramp" => {
                if sch.price.is_some() {
                    return Err(unexpected("schedule", "price", kind));
                }
                let PriceSchedule::Ramp {
                    t_start,
                    t_end,
                    s_max,
                } = PriceSchedule::ramp(2.0)
                else {
                    unreachable!()
                };
                PriceSchedule::Ramp {
                    t_start: sch.t_start.unwrap_or(t_start),
                    t_end: sch.t_end.unwrap_or(t_end),
                    s_max: sch.s_max.unwrap_or(s_max),
                }
            }
            other => {
                return Err(config_err(
                    "schedule.kind",
                    format!("expected \"constant\" or \"ramp\", got \"{other}\""),
                ))
            }
        };
        cfg.schedule
            .validate(cfg.params.horizon)
            .map_err(|e| in_section("schedule", e))?;

        let d = raw.initial_density.unwrap_or_default();
        let kind = d.kind.as_deref().unwrap_or("truncated_normal");
        cfg.initial_density = match kind {
            "truncated_normal" => {
                if d.peak.is_some() {
                    return Err(unexpected("initial_density", "peak", kind));
                }
                InitialDensity::TruncatedNormal {
                    mean: d.mean.unwrap_or(3.0),
                    variance: d.variance.unwrap_or(0.35),
                }
            }
            "tent" => {
                for (key, val) in [("mean", d.mean), ("variance", d.variance)] {
                    if val.is_some() {
                        return Err(unexpected("initial_density", key, kind));
                    }
                }
                InitialDensity::Tent {
                    peak: d.peak.unwrap_or(2.0),
                }
            }
            other => {
                return Err(config_err(
                    "initial_density.kind",
                    format!("expected \"truncated_normal\" or \"tent\", got \"{other}\""),
                ))
            }
        };
        cfg.initial_density
            .validate(cfg.params.e_min, cfg.params.e_max)
            .map_err(|e| in_section("initial_density", e))?;

        let v = raw.validation.unwrap_or_default();
        let vc = &mut cfg.validation;
        vc.seed = v.seed.unwrap_or(vc.seed);
        vc.particles = v.particles.unwrap_or(vc.particles);
        vc.substeps = v.substeps.unwrap_or(vc.substeps);
        if vc.particles < 1 {
            return Err(config_err(
                "validation.particles",
                "need at least one particle",
            ));
        }
        if vc.substeps < 1 {
            return Err(config_err(
                "validation.substeps",
                "need at least one substep",
            ));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::from_toml_str(text).unwrap_err() {
            Error::Config { key, .. } => key,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn blank_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::from_toml_str("  \n# nothing\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn empty_model_section_is_defaults() {
        assert_eq!(
            RunConfig::from_toml_str("[model]\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn missing_model_section_is_named() {
        assert_eq!(key_of("[solver]\nn = 32\n"), "model");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml_str(
            "[model]\nc2 = 0.0\n[solver]\nn = 32\nk = 16\nhjb_control = \"frozen\"\ntau_bounds = [-1.0, 1.0]\n\
             [schedule]\nkind = \"ramp\"\ns_max = 3.0\n[initial_density]\nkind = \"tent\"\n\
             [validation]\nseed = 5\nparticles = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.params.c2, 0.0);
        assert_eq!((cfg.solver.n, cfg.solver.k), (32, 16));
        assert_eq!(cfg.solver.hjb_control, HjbControl::Frozen);
        assert_eq!(cfg.solver.tau_bounds, Some((-1.0, 1.0)));
        assert_eq!(cfg.schedule, PriceSchedule::ramp(3.0));
        assert_eq!(cfg.initial_density, InitialDensity::Tent { peak: 2.0 });
        assert_eq!(cfg.validation.seed, 5);
        assert_eq!(cfg.validation.particles, 10);
        assert_eq!(cfg.validation.substeps, 4);
    }

    #[test]
    fn bad_values_name_their_key() {
        assert_eq!(key_of("[model]\nsigma = -1.0\n"), "model.sigma");
        assert_eq!(key_of("[model]\n[solver]\ntheta = 0.2\n"), "solver.theta");
        assert_eq!(
            key_of("[model]\n[solver]\nhjb_control = \"x\"\n"),
            "solver.hjb_control"
        );
        assert_eq!(
            key_of("[model]\n[schedule]\nkind = \"step\"\n"),
            "schedule.kind"
        );
        assert_eq!(
            key_of("[model]\n[schedule]\nprice = 1.0\nkind = \"ramp\"\n"),
            "schedule.price"
        );
        assert_eq!(
            key_of("[model]\n[validation]\nparticles = 0\n"),
            "validation.particles"
        );
        assert_eq!(key_of("[model]\n[solver]\nn = 1\n"), "solver.n");
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of("[model]\nsigmaa = 0.3\n"), "sigmaa");
        assert_eq!(key_of("[model]\n[extra]\nx = 1\n"), "extra");
    }
}
