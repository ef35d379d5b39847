//! Exponentially fitted finite volume discretisation of
//! `-(a u' + b u)' + c u` on a vertex-centred mesh.
//!
//! On each primal interval the flux `a u' + b u` is taken as the constant
//! solving the two-point problem `(a u' + b u)' = 0` with the nodal values as
//! boundary data. Written in local increments this is
//!
//! ```text
//! ρ_{i+1/2} = (a/h_i) [ B(-x) u_{i+1} - B(x) u_i ],   x = b_{i+1/2} h_i / a
//! ```
//!
//! with the Bernoulli function `B(x) = x / (e^x - 1)`. Both weights are
//! positive for every drift, which gives the non-positive off-diagonals
//! needed for an M-matrix.

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::grid::SpaceGrid;

/// `B(x) = x / (e^x - 1)` with `B(0) = 1`.
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        // B(x) = 1 - x/2 + x²/12 - x⁴/720 + ...
        1.0 - 0.5 * x + x * x / 12.0
    } else {
        x / x.exp_m1()
    }
}

/// Weights `(w_low, w_high)` of the fitted flux across one edge, so that
/// `ρ = w_high u_{i+1} - w_low u_i`.
pub fn edge_flux_coeffs(b_edge: f64, a: f64, h: f64) -> Result<(f64, f64)> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(
            "a",
            format!("diffusion must be positive, got {a}"),
        ));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(
            "h",
            format!("step must be positive, got {h}"),
        ));
    }
    let scale = a / h;
    let x = b_edge / scale;
    Ok((scale * bernoulli(x), scale * bernoulli(-x)))
}

/// An `(N+1) x (N+1)` tridiagonal system. `sub[i]` is entry `(i+1, i)`,
/// `sup[i]` is entry `(i, i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn new(sub: Vec<f64>, diag: Vec<f64>, sup: Vec<f64>, rhs: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        if n == 0 {
            return Err(Error::mismatch("diagonal", 1, 0));
        }
        if sub.len() != n - 1 {
            return Err(Error::mismatch("sub-diagonal", n - 1, sub.len()));
        }
        if sup.len() != n - 1 {
            return Err(Error::mismatch("super-diagonal", n - 1, sup.len()));
        }
        if rhs.len() != n {
            return Err(Error::mismatch("right-hand side", n, rhs.len()));
        }
        Ok(Self {
            sub,
            diag,
            sup,
            rhs,
        })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Matrix-vector product `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        tridiag_apply(&self.sub, &self.diag, &self.sup, x)
    }
}

fn tridiag_apply(sub: &[f64], diag: &[f64], sup: &[f64], x: &[f64]) -> Vec<f64> {
    let n = diag.len();
    (0..n)
        .map(|i| {
            let mut acc = diag[i] * x[i];
            if i > 0 {
                acc += sub[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += sup[i] * x[i + 1];
            }
            acc
        })
        .collect()
}

/// Thomas algorithm (no pivoting). Stable for the diagonally dominant
/// M-matrices produced by the fitted scheme.
pub fn solve_tridiagonal(system: &TridiagonalSystem) -> Result<Vec<f64>> {
    let TridiagonalSystem {
        sub,
        diag,
        sup,
        rhs,
    } = system;
    let n = diag.len();
    let mut c_prime = vec![0.0; n];
    let mut x = vec![0.0; n];

    let mut pivot = diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::Singular { row: 0 });
    }
    if n > 1 {
        c_prime[0] = sup[0] / pivot;
    }
    x[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - sub[i - 1] * c_prime[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::Singular { row: i });
        }
        if i + 1 < n {
            c_prime[i] = sup[i] / pivot;
        }
        x[i] = (rhs[i] - sub[i - 1] * x[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        x[i] -= c_prime[i] * x[i + 1];
    }
    Ok(x)
}

/// Treatment of the two outer dual edges `E_{-1/2}` and `E_{N+1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BoundaryClosure {
    /// No flux crosses the domain ends. Column sums of the operator are then
    /// exactly `c_j l_j`, so a pure transport operator conserves mass.
    #[default]
    ZeroFlux,
    /// Homogeneous Neumann data `u' = 0`: only the advective part `b u` of
    /// the boundary flux survives, with the given boundary drifts.
    Neumann { left_drift: f64, right_drift: f64 },
}

/// Spatial operator `D` with `(D u)_i ≈ -∫ (a u' + b u)' + ∫ c u` over cell `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorAssembly {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    /// Drift `b` at the interior edges `E_{i+1/2}`, `i = 0..N`.
    pub drift_edges: Vec<f64>,
    /// Reaction `c` at the nodes.
    pub reaction_nodes: Vec<f64>,
    pub diffusion: f64,
}

/// Zero-flux assembly; see [`assemble_operator_with_closure`].
pub fn assemble_operator(
    drift_edges: &[f64],
    reaction_nodes: &[f64],
    a: f64,
    grid: &SpaceGrid,
) -> Result<OperatorAssembly> {
    assemble_operator_with_closure(
        drift_edges,
        reaction_nodes,
        a,
        grid,
        BoundaryClosure::ZeroFlux,
    )
}

pub fn assemble_operator_with_closure(
    drift_edges: &[f64],
    reaction_nodes: &[f64],
    a: f64,
    grid: &SpaceGrid,
    closure: BoundaryClosure,
) -> Result<OperatorAssembly> {
    let n = grid.cells();
    if drift_edges.len() != n {
        return Err(Error::mismatch("edge drift", n, drift_edges.len()));
    }
    if reaction_nodes.len() != n + 1 {
        return Err(Error::mismatch(
            "node reaction",
            n + 1,
            reaction_nodes.len(),
        ));
    }
    let widths = grid.cell_widths();
    let mut diag: Vec<f64> = reaction_nodes
        .iter()
        .zip(widths)
        .map(|(c, l)| c * l)
        .collect();
    let mut sub = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for (i, (&b, &h)) in drift_edges.iter().zip(grid.steps()).enumerate() {
        let (w_low, w_high) = edge_flux_coeffs(b, a, h)?;
        // Edge i+1/2 enters row i with -ρ and row i+1 with +ρ.
        diag[i] += w_low;
        sup[i] = -w_high;
        diag[i + 1] += w_high;
        sub[i] = -w_low;
    }
    if let BoundaryClosure::Neumann {
        left_drift,
        right_drift,
    } = closure
    {
        diag[0] += left_drift;
        diag[n] -= right_drift;
    }
    Ok(OperatorAssembly {
        sub,
        diag,
        sup,
        drift_edges: drift_edges.to_vec(),
        reaction_nodes: reaction_nodes.to_vec(),
        diffusion: a,
    })
}

impl OperatorAssembly {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        tridiag_apply(&self.sub, &self.diag, &self.sup, u)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let n = self.diag.len();
        (0..n)
            .map(|j| {
                let mut s = self.diag[j];
                if j > 0 {
                    s += self.sup[j - 1];
                }
                if j + 1 < n {
                    s += self.sub[j];
                }
                s
            })
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.apply(&vec![1.0; self.diag.len()])
    }

    /// System `θ D + G` with `G = diag(time_weight)` and the given rhs.
    pub fn implicit_system(
        &self,
        theta: f64,
        time_weight: &[f64],
        rhs: Vec<f64>,
    ) -> Result<TridiagonalSystem> {
        if time_weight.len() != self.diag.len() {
            return Err(Error::mismatch(
                "time weight",
                self.diag.len(),
                time_weight.len(),
            ));
        }
        TridiagonalSystem::new(
            self.sub.iter().map(|v| theta * v).collect(),
            self.diag
                .iter()
                .zip(time_weight)
                .map(|(d, g)| theta * d + g)
                .collect(),
            self.sup.iter().map(|v| theta * v).collect(),
            rhs,
        )
    }

    /// `(G - (1 - θ) D) u`.
    pub fn explicit_apply(&self, theta: f64, time_weight: &[f64], u: &[f64]) -> Vec<f64> {
        let du = self.apply(u);
        du.iter()
            .zip(time_weight)
            .zip(u)
            .map(|((d, g), x)| g * x - (1.0 - theta) * d)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MMatrixCondition {
    OffDiagonalSign,
    DiagonalPositive,
    ColumnDominance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MMatrixViolation {
    pub condition: MMatrixCondition,
    pub row: usize,
    pub col: usize,
    pub magnitude: f64,
}

/// Outcome of checking `θ D + G` against the sufficient M-matrix conditions:
/// non-positive off-diagonals, positive diagonal, and weak column diagonal
/// dominance with at least one strictly dominant column.
#[derive(Debug, Clone, PartialEq)]
pub struct MMatrixReport {
    pub offdiag_nonpositive: bool,
    pub diag_positive: bool,
    pub column_dominant: bool,
    /// Largest violation over all failed conditions.
    pub worst: Option<MMatrixViolation>,
    /// Nodes with `c_i < 0`, where the usual hypothesis on the reaction fails.
    pub negative_reaction: Vec<usize>,
}

impl MMatrixReport {
    pub fn passed(&self) -> bool {
        self.offdiag_nonpositive && self.diag_positive && self.column_dominant
    }
}

/// Running count of M-matrix checks over many assembled systems.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MMatrixTally {
    pub checked: usize,
    pub passed: usize,
    /// Systems where some `c_i < 0`.
    pub negative_reaction: usize,
}

impl MMatrixTally {
    pub fn record(&mut self, report: &MMatrixReport, equation: &str, level: usize) {
        self.checked += 1;
        if !report.negative_reaction.is_empty() {
            self.negative_reaction += 1;
        }
        if report.passed() {
            self.passed += 1;
            if !report.negative_reaction.is_empty() {
                debug!(
                    "{equation} level {level}: M-matrix holds although c < 0 at nodes {:?}",
                    report.negative_reaction
                );
            }
        } else {
            warn!(
                "{equation} level {level}: M-matrix check failed, worst {:?}, c < 0 at nodes {:?}",
                report.worst, report.negative_reaction
            );
        }
    }

    pub fn merge(&mut self, other: &MMatrixTally) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.negative_reaction += other.negative_reaction;
    }

    /// Fraction of checked systems that passed; 1 when nothing was checked.
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

pub fn is_m_matrix(assembly: &OperatorAssembly, time_weight: &[f64], theta: f64) -> MMatrixReport {
    let n = assembly.diag.len();
    let mut worst: Option<MMatrixViolation> = None;
    let mut note = |v: MMatrixViolation| {
        if worst.is_none_or(|w| v.magnitude > w.magnitude) {
            worst = Some(v);
        }
    };

    let mut offdiag_nonpositive = true;
    let off = assembly
        .sub
        .iter()
        .enumerate()
        .map(|(i, &v)| (i + 1, i, v))
        .chain(assembly.sup.iter().enumerate().map(|(i, &v)| (i, i + 1, v)));
    for (row, col, v) in off {
        if theta * v > 0.0 {
            offdiag_nonpositive = false;
            note(MMatrixViolation {
                condition: MMatrixCondition::OffDiagonalSign,
                row,
                col,
                magnitude: theta * v,
            });
        }
    }

    let weight = |j: usize| time_weight.get(j).copied().unwrap_or(0.0);
    let mut diag_positive = true;
    let mut column_dominant = true;
    let mut any_strict = false;
    for j in 0..n {
        let d = theta * assembly.diag[j] + weight(j);
        if d <= 0.0 || !d.is_finite() {
            diag_positive = false;
            note(MMatrixViolation {
                condition: MMatrixCondition::DiagonalPositive,
                row: j,
                col: j,
                magnitude: -d,
            });
        }
        let mut off_col = 0.0;
        if j > 0 {
            off_col += (theta * assembly.sup[j - 1]).abs();
        }
        if j + 1 < n {
            off_col += (theta * assembly.sub[j]).abs();
        }
        let margin = d - off_col;
        // Rounding in the column identity is relative to the entries involved.
        let slack = 1e-13 * (d.abs() + off_col);
        if margin < -slack {
            column_dominant = false;
            note(MMatrixViolation {
                condition: MMatrixCondition::ColumnDominance,
                row: j,
                col: j,
                magnitude: -margin,
            });
        } else if margin > slack {
            any_strict = true;
        }
    }
    if !any_strict && column_dominant {
        column_dominant = false;
        note(MMatrixViolation {
            condition: MMatrixCondition::ColumnDominance,
            row: 0,
            col: 0,
            magnitude: 0.0,
        });
    }

    let negative_reaction = assembly
        .reaction_nodes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < 0.0)
        .map(|(i, _)| i)
        .collect();

    MMatrixReport {
        offdiag_nonpositive,
        diag_positive,
        column_dominant,
        worst,
        negative_reaction,
    }
}
