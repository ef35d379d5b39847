//! Time-level by node arrays for the density, value function and control.

use crate::error::{Error, Result};
use crate::grid::Grids;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Density,
    Value,
    Control,
    /// Control sampled at the interior dual edges.
    EdgeControl,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Density => "m",
            Quantity::Value => "v",
            Quantity::Control => "tau",
            Quantity::EdgeControl => "tau_edge",
        }
    }
}

/// Row-major `(K + 1) x width` array; row `k` is time level `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    quantity: Quantity,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(quantity: Quantity, levels: usize, width: usize) -> Self {
        Self {
            quantity,
            width,
            data: vec![0.0; levels * width],
        }
    }

    pub fn filled(quantity: Quantity, levels: usize, width: usize, value: f64) -> Self {
        Self {
            quantity,
            width,
            data: vec![value; levels * width],
        }
    }

    /// Node field (`N + 1` columns) on the given grids.
    pub fn on_nodes(quantity: Quantity, grids: &Grids) -> Self {
        Self::zeros(quantity, grids.time.len(), grids.space.len())
    }

    /// Edge field (`N` columns) on the given grids.
    pub fn on_edges(quantity: Quantity, grids: &Grids) -> Self {
        Self::zeros(quantity, grids.time.len(), grids.space.cells())
    }

    pub fn from_levels(quantity: Quantity, levels: Vec<Vec<f64>>) -> Result<Self> {
        let width = levels.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(levels.len() * width);
        for row in &levels {
            if row.len() != width {
                return Err(Error::mismatch("field level", width, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            quantity,
            width,
            data,
        })
    }

    pub fn quantity(&self) -> Quantity {
        self.quantity
    }

    pub fn levels(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.data[k * self.width..(k + 1) * self.width]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.width..(k + 1) * self.width]
    }

    pub fn set_level(&mut self, k: usize, values: &[f64]) {
        self.level_mut(k).copy_from_slice(values);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_levels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width.max(1))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.levels(), self.width)
    }

    pub fn check_shape(&self, levels: usize, width: usize) -> Result<()> {
        if self.width != width {
            return Err(Error::mismatch(self.quantity.name(), width, self.width));
        }
        if self.levels() != levels {
            return Err(Error::mismatch(self.quantity.name(), levels, self.levels()));
        }
        Ok(())
    }

    /// First non-finite entry, reported with its location.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::NonFinite {
                field: self.quantity.name(),
                level: p / self.width,
                node: p % self.width,
            }),
        }
    }
}

/// Feedback control: node values (used in the source term and output) and
/// edge values (used as the drift in the fitted flux).
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub nodes: Field,
    pub edges: Field,
}

impl Control {
    pub fn constant(grids: &Grids, tau: f64) -> Self {
        let (levels, n) = (grids.time.len(), grids.space.cells());
        Self {
            nodes: Field::filled(Quantity::Control, levels, n + 1, tau),
            edges: Field::filled(Quantity::EdgeControl, levels, n, tau),
        }
    }

    pub fn level(&self, k: usize) -> ControlLevel<'_> {
        ControlLevel {
            nodes: self.nodes.level(k),
            edges: self.edges.level(k),
        }
    }

    pub fn check_shape(&self, grids: &Grids) -> Result<()> {
        let levels = grids.time.len();
        self.nodes.check_shape(levels, grids.space.len())?;
        self.edges.check_shape(levels, grids.space.cells())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ControlLevel<'a> {
    pub nodes: &'a [f64],
    pub edges: &'a [f64],
}
