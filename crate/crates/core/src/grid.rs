//! Vertex-centred space mesh and the backward time partition.
//!
//! Every node `E_i`, `i = 0..=N`, owns the control volume
//! `[E_{i-1/2}, E_{i+1/2}]`. Interior dual edges are arithmetic midpoints;
//! the outer dual edges coincide with the domain ends, so the two boundary
//! nodes own half-width cells.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    nodes: Vec<f64>,
    /// `N + 2` dual edges: `E_min`, the `N` interior midpoints, `E_max`.
    edges: Vec<f64>,
    cell_widths: Vec<f64>,
    steps: Vec<f64>,
}

impl SpaceGrid {
    /// Uniform mesh with `cells` sub-intervals on `[e_min, e_max]`.
    pub fn uniform(cells: usize, e_min: f64, e_max: f64) -> Result<Self> {
        if cells < 2 {
            return Err(Error::invalid(
                "N",
                format!("need at least 2 cells, got {cells}"),
            ));
        }
        if !(e_min.is_finite() && e_max.is_finite()) || e_min >= e_max {
            return Err(Error::invalid(
                "E_min/E_max",
                format!("need E_min < E_max, got [{e_min}, {e_max}]"),
            ));
        }
        let h = (e_max - e_min) / cells as f64;
        let mut nodes: Vec<f64> = (0..=cells).map(|i| e_min + i as f64 * h).collect();
        nodes[cells] = e_max;
        Ok(Self::from_nodes(nodes))
    }

    fn from_nodes(nodes: Vec<f64>) -> Self {
        let n = nodes.len() - 1;
        let mut edges = Vec::with_capacity(n + 2);
        edges.push(nodes[0]);
        edges.extend(nodes.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(nodes[n]);
        let cell_widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        let steps = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        Self {
            nodes,
            edges,
            cell_widths,
            steps,
        }
    }

    /// Number of sub-intervals `N`; there are `N + 1` nodes.
    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Dual edges `E_{-1/2}, E_{1/2}, ..., E_{N+1/2}`.
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Control-volume widths `l_i`.
    pub fn cell_widths(&self) -> &[f64] {
        &self.cell_widths
    }

    /// Node spacings `h_i = E_{i+1} - E_i`.
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn e_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn e_max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn max_step(&self) -> f64 {
        self.steps.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the control volume containing `e` (half-open on the right,
    /// except the last cell which is closed).
    pub fn cell_of(&self, e: f64) -> usize {
        let interior = &self.edges[1..self.edges.len() - 1];
        interior.partition_point(|&edge| edge <= e)
    }
}

/// Decreasing time partition `T = t_0 > t_1 > ... > t_K = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    levels: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("K", "need at least one time step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(
                "T",
                format!("horizon must be positive, got {horizon}"),
            ));
        }
        let mut levels: Vec<f64> = (0..=steps)
            .map(|k| horizon * (1.0 - k as f64 / steps as f64))
            .collect();
        levels[0] = horizon;
        levels[steps] = 0.0;
        Ok(Self { levels })
    }

    /// Number of steps `K`; there are `K + 1` levels.
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn horizon(&self) -> f64 {
        self.levels[0]
    }

    /// Signed step `t_{k+1} - t_k`, always negative.
    pub fn dt(&self, k: usize) -> f64 {
        self.levels[k + 1] - self.levels[k]
    }
}

/// Space and time meshes that every field of one solve shares.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub space: SpaceGrid,
    pub time: TimeGrid,
}

impl Grids {
    pub fn new(space: SpaceGrid, time: TimeGrid) -> Self {
        Self { space, time }
    }
}
