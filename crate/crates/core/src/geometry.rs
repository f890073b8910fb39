//! Geodesic-polar model of ℍ^d: radial quadrature grids and L^p norms.
//!
//! A point of ℍ^d is written `(ρ, ω)` with `ρ ≥ 0` the geodesic distance to
//! the origin and `ω ∈ S^{d-1}`; the metric is `dρ² + sinh²ρ dω²`, so radial
//! integrals carry the weight `ω_{d-1} sinh^{d-1}ρ dρ`.
//!
//! Radial grids are composite Gauss–Legendre panels on `[0, ρmax]`. With
//! `q` points per panel each panel integrates polynomials of degree `2q-1`
//! exactly, so for smooth integrands the composite rule converges like
//! `h^{2q}` in the panel width `h`. Defaults: `q = 8`, uniform panels
//! (grading exponent 1).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::quadrature::GaussLegendre;
use crate::special::sphere_area;
use crate::{invalid, Error, Result};

/// Fields must fall below this magnitude on the outermost panel.
pub const CUTOFF_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbolicModel {
    dim: usize,
}

impl HyperbolicModel {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(invalid(format!(
                "hyperbolic dimension must be at least 2, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// ω_{d-1}, the area of the unit sphere S^{d-1}.
    pub fn sphere_area(&self) -> f64 {
        sphere_area(self.dim - 1)
    }

    /// Volume density `ω_{d-1} sinh^{d-1}ρ`.
    pub fn volume_density(&self, rho: f64) -> f64 {
        self.sphere_area() * rho.sinh().powi(self.dim as i32 - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Gauss–Legendre points per panel.
    pub order: usize,
    /// Panel breakpoints are `ρmax (j/P)^grading`; 1 gives uniform panels.
    pub grading: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            order: 8,
            grading: 1.0,
        }
    }
}

/// Quadrature nodes and volume weights on `[0, ρmax]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    model: HyperbolicModel,
    rho_max: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl RadialGrid {
    /// `n` nodes with the default configuration; `n` is rounded down to a
    /// whole number of panels.
    pub fn build(model: HyperbolicModel, rho_max: f64, n: usize) -> Result<Self> {
        let cfg = GridConfig::default();
        if n < 8 {
            return Err(invalid(format!(
                "radial grid needs at least 8 nodes, got {n}"
            )));
        }
        Self::with_panels(model, rho_max, n / cfg.order, cfg)
    }

    pub fn with_panels(
        model: HyperbolicModel,
        rho_max: f64,
        panels: usize,
        cfg: GridConfig,
    ) -> Result<Self> {
        if !(rho_max > 0.0) || !rho_max.is_finite() {
            return Err(invalid(format!(
                "grid cutoff must be positive and finite, got {rho_max}"
            )));
        }
        if panels == 0 || cfg.order == 0 {
            return Err(invalid(
                "grid needs at least one panel and one node per panel",
            ));
        }
        if !(cfg.grading > 0.0) {
            return Err(invalid("grading exponent must be positive"));
        }
        let gl = GaussLegendre::new(cfg.order);
        let omega = model.sphere_area();
        let mut nodes = Vec::with_capacity(panels * cfg.order);
        let mut weights = Vec::with_capacity(panels * cfg.order);
        let bp = |j: usize| rho_max * (j as f64 / panels as f64).powf(cfg.grading);
        for j in 0..panels {
            for (x, w) in gl.mapped(bp(j), bp(j + 1)) {
                nodes.push(x);
                weights.push(w * omega * x.sinh().powi(model.dim() as i32 - 1));
            }
        }
        Ok(Self {
            model,
            rho_max,
            nodes,
            weights,
        })
    }

    /// Panels of width at most `max_width`.
    pub fn with_panel_width(model: HyperbolicModel, rho_max: f64, max_width: f64) -> Result<Self> {
        if !(max_width > 0.0) {
            return Err(invalid("panel width must be positive"));
        }
        let panels = (rho_max / max_width).ceil() as usize;
        Self::with_panels(model, rho_max, panels.max(1), GridConfig::default())
    }

    /// Rebuild a grid from explicit nodes and volume weights.
    pub fn from_parts(
        model: HyperbolicModel,
        rho_max: f64,
        nodes: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(invalid(
                "grid nodes and weights must be non-empty and of equal length",
            ));
        }
        if nodes[0] < 0.0 || nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid(
                "grid nodes must be non-negative and strictly increasing",
            ));
        }
        if *nodes.last().unwrap() > rho_max {
            return Err(invalid("grid nodes exceed the cutoff"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(invalid("grid weights must be positive and finite"));
        }
        Ok(Self {
            model,
            rho_max,
            nodes,
            weights,
        })
    }

    pub fn model(&self) -> HyperbolicModel {
        self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weights for plain `dρ` integration (volume density divided out).
    pub fn line_weights(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&r, &w)| w / self.model.volume_density(r))
            .collect()
    }

    /// `Σ w_i f(ρ_i)` ≈ `∫_{B(ρmax)} f dVol`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&r, &w)| w * f(r))
            .sum()
    }

    /// Volume of the geodesic ball of radius ρmax as seen by the grid.
    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Nodes lying in the outermost 1/16 of the cutoff radius (at least one).
    fn tail_range(&self) -> std::ops::Range<usize> {
        let start = self
            .nodes
            .partition_point(|&r| r < self.rho_max * (15.0 / 16.0));
        start.min(self.len() - 1)..self.len()
    }
}

/// Scalar radial profile on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialField {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
}

impl RadialField {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("field values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: Arc<RadialGrid>, f: F) -> Result<Self> {
        let values = grid.nodes().iter().map(|&r| f(r)).collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        lp_norm(self, p)
    }

    /// Rejects fields that have not decayed below `CUTOFF_TOLERANCE` near ρmax.
    pub fn check_cutoff(&self) -> Result<()> {
        check_cutoff_values(&self.grid, &self.values)
    }

    pub fn to_record(&self) -> FieldRecord {
        FieldRecord {
            nodes: self.grid.nodes.clone(),
            weights: self.grid.weights.clone(),
            values: self.values.clone(),
            dim: self.grid.dim(),
            rhomax: self.grid.rho_max,
        }
    }

    pub fn from_record(rec: FieldRecord) -> Result<Self> {
        let model = HyperbolicModel::new(rec.dim)?;
        let grid = RadialGrid::from_parts(model, rec.rhomax, rec.nodes, rec.weights)?;
        Self::new(Arc::new(grid), rec.values)
    }
}

pub(crate) fn check_cutoff_values(grid: &RadialGrid, values: &[f64]) -> Result<()> {
    let tail = grid.tail_range();
    let worst = values[tail].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > CUTOFF_TOLERANCE {
        return Err(Error::CutoffDecay {
            value: worst,
            threshold: CUTOFF_TOLERANCE,
        });
    }
    Ok(())
}

/// JSON form of a field together with its grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub values: Vec<f64>,
    pub dim: usize,
    pub rhomax: f64,
}

/// `(Σ w_i |u_i|^p)^{1/p}` for finite `p`, `max |u_i|` for `p = ∞`.
pub fn lp_norm(u: &RadialField, p: f64) -> Result<f64> {
    lp_norm_values(&u.grid, &u.values, p)
}

pub(crate) fn lp_norm_values(grid: &RadialGrid, values: &[f64], p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(invalid(format!("L^p exponent must be at least 1, got {p}")));
    }
    Ok(lp_unchecked(grid.weights(), values, p))
}

pub(crate) fn lp_unchecked(weights: &[f64], values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    if p == 1.0 {
        return weights.iter().zip(values).map(|(w, v)| w * v.abs()).sum();
    }
    if p == 2.0 {
        return weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt();
    }
    // Scale by the sup to keep |u|^p in range.
    let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = weights
        .iter()
        .zip(values)
        .map(|(w, v)| w * (v.abs() / m).powf(p))
        .sum();
    m * s.powf(1.0 / p)
}

/// L^p norm with respect to the probability measure `dVol / vol(B(ρmax))`.
pub fn normalized_lp_norm(u: &RadialField, p: f64) -> Result<f64> {
    let n = lp_norm(u, p)?;
    if p.is_infinite() {
        return Ok(n);
    }
    Ok(n / u.grid.volume().powf(1.0 / p))
}
