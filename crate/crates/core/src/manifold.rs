//! Discretized model geometries, quadrature and initial data.
//!
//! Three backgrounds are supported:
//!
//! * `HeisenbergSector2D`: Reeb-invariant (t-independent) fields on a lattice
//!   quotient of the Heisenberg group. The horizontal frame reduces to
//!   `∂x, ∂y` on a flat periodic torus.
//! * `HeisenbergLattice3D`: the full quotient by the lattice generated by
//!   `(a,0,0)`, `(0,b,0)`, `(0,0,c)`. Grid steps are chosen so every
//!   identification maps nodes to nodes, so the quotient is an exact symmetry
//!   of the stencils.
//! * `SphereReduced1D`: torus-invariant functions on the standard CR sphere,
//!   written in `s = |z1|^2` on a cell-centered grid.
//!
//! Heisenberg coordinates are `(x, y, t)` with contact form
//! `θ0 = dt + 2x dy - 2y dx`, frame `X = ∂x + 2y ∂t`, `Y = ∂y - 2x ∂t`, and
//! volume form `θ0 ∧ dθ0 = 4 dx dy dt`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::operators::{self, ConventionLedger};

/// Smallest admissible number of cells along any axis.
pub const MIN_RESOLUTION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeometryKind {
    #[serde(rename = "heisenberg_sector_2d")]
    HeisenbergSector2D,
    #[serde(rename = "heisenberg_lattice_3d")]
    HeisenbergLattice3D,
    #[serde(rename = "sphere_reduced_1d")]
    SphereReduced1D,
}

impl GeometryKind {
    pub fn name(self) -> &'static str {
        match self {
            GeometryKind::HeisenbergSector2D => "heisenberg_sector_2d",
            GeometryKind::HeisenbergLattice3D => "heisenberg_lattice_3d",
            GeometryKind::SphereReduced1D => "sphere_reduced_1d",
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            GeometryKind::HeisenbergSector2D => 2,
            GeometryKind::HeisenbergLattice3D => 3,
            GeometryKind::SphereReduced1D => 1,
        }
    }

    pub fn is_heisenberg(self) -> bool {
        !matches!(self, GeometryKind::SphereReduced1D)
    }
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeometryKind {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heisenberg_sector_2d" | "sector" => Ok(GeometryKind::HeisenbergSector2D),
            "heisenberg_lattice_3d" | "lattice" => Ok(GeometryKind::HeisenbergLattice3D),
            "sphere_reduced_1d" | "sphere" => Ok(GeometryKind::SphereReduced1D),
            other => Err(FlowError::UnknownKind(other.to_string())),
        }
    }
}

/// JSON description of a geometry.
///
/// `periods` defaults to `[1, 1]` for the sector, `[1]` for the sphere, and
/// for the lattice to `[1, 1, c]` with the smallest t-period `c` that makes
/// the x/y flow lines land on grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub kind: String,
    pub resolution: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<f64>>,
    /// Length of the Reeb fiber over the 2D sector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiber_length: Option<f64>,
    /// Expert override of the background Webster curvature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_curvature: Option<f64>,
}

impl GeometrySpec {
    pub fn sector(n: usize) -> Self {
        GeometrySpec {
            kind: GeometryKind::HeisenbergSector2D.name().into(),
            resolution: vec![n, n],
            periods: None,
            fiber_length: None,
            background_curvature: None,
        }
    }

    pub fn lattice(n: usize) -> Self {
        GeometrySpec {
            kind: GeometryKind::HeisenbergLattice3D.name().into(),
            resolution: vec![n, n, n],
            periods: None,
            fiber_length: None,
            background_curvature: None,
        }
    }

    pub fn sphere(n: usize) -> Self {
        GeometrySpec {
            kind: GeometryKind::SphereReduced1D.name().into(),
            resolution: vec![n],
            periods: None,
            fiber_length: None,
            background_curvature: None,
        }
    }
}

/// One half of a symmetric edge of the discrete Dirichlet form.
///
/// The operators evaluate `(1/m) Σ κ (f[row] - f[col])` over all taps of a
/// row; a well-formed stencil holds both `(a, b, κ)` and `(b, a, κ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub row: u32,
    pub col: u32,
    pub conductance: f64,
}

/// Neighbor tables along the horizontal frame, identifications included.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameNeighbors {
    pub x_next: Vec<u32>,
    pub x_prev: Vec<u32>,
    pub y_next: Vec<u32>,
    pub y_prev: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGeometry {
    kind: GeometryKind,
    resolution: Vec<usize>,
    periods: Vec<f64>,
    cell_volume_weight: f64,
    background_curvature: f64,
    conventions: ConventionLedger,
    t_wrap_shift: i64,
    cell_mass: f64,
    taps: Vec<Tap>,
    neighbors: Option<FrameNeighbors>,
}

impl ModelGeometry {
    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    /// Density of the background volume form per unit coordinate volume.
    pub fn cell_volume_weight(&self) -> f64 {
        self.cell_volume_weight
    }

    pub fn background_curvature(&self) -> f64 {
        self.background_curvature
    }

    pub fn conventions(&self) -> &ConventionLedger {
        &self.conventions
    }

    /// t-cells traversed by one x-step along `X` per y grid line (lattice
    /// only; zero otherwise). The x-wrap shifts t by `-t_wrap_shift * nx * j`
    /// cells on row `j`.
    pub fn t_wrap_shift(&self) -> i64 {
        self.t_wrap_shift
    }

    /// Quadrature weight of one cell.
    pub fn cell_mass(&self) -> f64 {
        self.cell_mass
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.periods[axis] / self.resolution[axis] as f64
    }

    pub fn background_volume(&self) -> f64 {
        self.cell_volume_weight * self.periods.iter().product::<f64>()
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    /// Copy with the first tap's conductance scaled by `factor`, breaking the
    /// symmetry of the stencil. Test fixture for the invariant suite.
    #[doc(hidden)]
    pub fn with_corrupted_tap(&self, factor: f64) -> Arc<ModelGeometry> {
        let mut g = self.clone();
        if let Some(tap) = g.taps.first_mut() {
            tap.conductance *= factor;
        }
        Arc::new(g)
    }

    pub fn neighbors(&self) -> Option<&FrameNeighbors> {
        self.neighbors.as_ref()
    }

    /// Coordinates of a cell: `(x, y, t)` on Heisenberg kinds (t = 0 on the
    /// sector), `(s, 0, 0)` on the sphere.
    pub fn point(&self, idx: usize) -> [f64; 3] {
        match self.kind {
            GeometryKind::HeisenbergSector2D => {
                let nx = self.resolution[0];
                let (i, j) = (idx % nx, idx / nx);
                [i as f64 * self.spacing(0), j as f64 * self.spacing(1), 0.0]
            }
            GeometryKind::HeisenbergLattice3D => {
                let (i, j, k) = self.lattice_index(idx);
                [
                    i as f64 * self.spacing(0),
                    j as f64 * self.spacing(1),
                    k as f64 * self.spacing(2),
                ]
            }
            GeometryKind::SphereReduced1D => [(idx as f64 + 0.5) * self.spacing(0), 0.0, 0.0],
        }
    }

    pub fn lattice_index(&self, idx: usize) -> (usize, usize, usize) {
        let (nx, ny) = (self.resolution[0], self.resolution[1]);
        (idx % nx, (idx / nx) % ny, idx / (nx * ny))
    }

    /// Index of the fundamental-domain node equivalent to the cover node
    /// `(i, j, k)` of the lattice grid.
    pub fn reduce_cover_node(&self, i: i64, j: i64, k: i64) -> usize {
        let (nx, ny, nt) = (
            self.resolution[0] as i64,
            self.resolution[1] as i64,
            self.resolution[2] as i64,
        );
        let q = self.t_wrap_shift;
        // (i, j0 + m ny, k) = (0, b, 0)^m · (i, j0, k - m q ny i)
        let m = j.div_euclid(ny);
        let j0 = j.rem_euclid(ny);
        let k = k - m * q * ny * i;
        // (i0 + l nx, j0, k) = (a, 0, 0)^l · (i0, j0, k + l q nx j0)
        let l = i.div_euclid(nx);
        let i0 = i.rem_euclid(nx);
        let k = (k + l * q * nx * j0).rem_euclid(nt);
        ((k * ny + j0) * nx + i0) as usize
    }
}

/// Builds and validates a geometry.
pub fn build_geometry(spec: &GeometrySpec) -> Result<Arc<ModelGeometry>> {
    let kind: GeometryKind = spec.kind.parse()?;
    if spec.resolution.len() != kind.dimension() {
        return Err(FlowError::Config(format!(
            "{kind} needs {} resolution entries, got {}",
            kind.dimension(),
            spec.resolution.len()
        )));
    }
    for (axis, &cells) in spec.resolution.iter().enumerate() {
        if cells < MIN_RESOLUTION {
            return Err(FlowError::ResolutionTooSmall {
                axis,
                cells,
                min: MIN_RESOLUTION,
            });
        }
    }
    let conventions = ConventionLedger::default();
    let res = spec.resolution.clone();
    let periods = match (&spec.periods, kind) {
        (Some(p), _) => p.clone(),
        (None, GeometryKind::HeisenbergSector2D) => vec![1.0, 1.0],
        (None, GeometryKind::SphereReduced1D) => vec![1.0],
        (None, GeometryKind::HeisenbergLattice3D) => {
            vec![1.0, 1.0, 2.0 * res[2] as f64 / (res[0] * res[1]) as f64]
        }
    };
    if periods.len() != kind.dimension() {
        return Err(FlowError::Config(format!(
            "{kind} needs {} periods, got {}",
            kind.dimension(),
            periods.len()
        )));
    }
    if periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(FlowError::Config("periods must be finite and positive".into()));
    }
    if kind == GeometryKind::SphereReduced1D && periods[0] != 1.0 {
        return Err(FlowError::Config("the sphere coordinate s spans [0, 1]".into()));
    }

    let fiber_length = spec.fiber_length.unwrap_or(1.0);
    if !(fiber_length.is_finite() && fiber_length > 0.0) {
        return Err(FlowError::Config("fiber_length must be positive".into()));
    }
    let cell_volume_weight = match kind {
        GeometryKind::HeisenbergSector2D => conventions.heisenberg_volume_density * fiber_length,
        GeometryKind::HeisenbergLattice3D => conventions.heisenberg_volume_density,
        GeometryKind::SphereReduced1D => conventions.sphere_total_volume,
    };
    let coordinate_cell: f64 = periods
        .iter()
        .zip(&res)
        .map(|(p, &n)| p / n as f64)
        .product();
    let cell_mass = cell_volume_weight * coordinate_cell;

    let background_curvature = match (spec.background_curvature, kind) {
        (Some(w), _) => {
            if !w.is_finite() {
                return Err(FlowError::Config("background_curvature must be finite".into()));
            }
            w
        }
        (None, GeometryKind::SphereReduced1D) => operators::sphere_background_curvature()?,
        (None, _) => 0.0,
    };

    let t_wrap_shift = if kind == GeometryKind::HeisenbergLattice3D {
        lattice_shift(&res, &periods)?
    } else {
        0
    };

    let mut geometry = ModelGeometry {
        kind,
        resolution: res,
        periods,
        cell_volume_weight,
        background_curvature,
        conventions,
        t_wrap_shift,
        cell_mass,
        taps: Vec::new(),
        neighbors: None,
    };
    match kind {
        GeometryKind::SphereReduced1D => geometry.taps = sphere_taps(&geometry),
        _ => {
            let neighbors = frame_neighbors(&geometry);
            geometry.taps = frame_taps(&geometry, &neighbors);
            geometry.neighbors = Some(neighbors);
        }
    }
    Ok(Arc::new(geometry))
}

/// Integer t-shift per y row; errors unless both the flow-line shift and the
/// lattice commutator are whole multiples of the grid.
fn lattice_shift(res: &[usize], periods: &[f64]) -> Result<i64> {
    let (a, b, c) = (periods[0], periods[1], periods[2]);
    let (nx, ny, nt) = (res[0] as f64, res[1] as f64, res[2] as f64);
    let as_integer = |v: f64| -> Option<i64> {
        let r = v.round();
        ((v - r).abs() <= 1e-9 * v.abs().max(1.0) && r >= 1.0).then_some(r as i64)
    };
    let shift = 2.0 * a * b * nt / (c * nx * ny);
    let q = as_integer(shift).ok_or_else(|| {
        FlowError::WrapShift(format!(
            "t-shift per y row is {shift} cells; need a positive integer (2ab·nt / (c·nx·ny))"
        ))
    })?;
    let commutator = 4.0 * a * b / c;
    as_integer(commutator).ok_or_else(|| {
        FlowError::WrapShift(format!(
            "lattice commutator 4ab/c = {commutator} is not an integer, the quotient is not a group"
        ))
    })?;
    Ok(q)
}

fn frame_neighbors(g: &ModelGeometry) -> FrameNeighbors {
    let n = g.len();
    let mut nb = FrameNeighbors {
        x_next: Vec::with_capacity(n),
        x_prev: Vec::with_capacity(n),
        y_next: Vec::with_capacity(n),
        y_prev: Vec::with_capacity(n),
    };
    match g.kind {
        GeometryKind::HeisenbergSector2D => {
            let (nx, ny) = (g.resolution[0], g.resolution[1]);
            for idx in 0..n {
                let (i, j) = (idx % nx, idx / nx);
                nb.x_next.push((j * nx + (i + 1) % nx) as u32);
                nb.x_prev.push((j * nx + (i + nx - 1) % nx) as u32);
                nb.y_next.push((((j + 1) % ny) * nx + i) as u32);
                nb.y_prev.push((((j + ny - 1) % ny) * nx + i) as u32);
            }
        }
        GeometryKind::HeisenbergLattice3D => {
            let q = g.t_wrap_shift;
            for idx in 0..n {
                let (i, j, k) = g.lattice_index(idx);
                let (i, j, k) = (i as i64, j as i64, k as i64);
                // X flow: (x, y, t) -> (x + dx, y, t + 2y dx), i.e. +q·j t-cells.
                nb.x_next.push(g.reduce_cover_node(i + 1, j, k + q * j) as u32);
                nb.x_prev.push(g.reduce_cover_node(i - 1, j, k - q * j) as u32);
                // Y flow: (x, y, t) -> (x, y + dy, t - 2x dy), i.e. -q·i t-cells.
                nb.y_next.push(g.reduce_cover_node(i, j + 1, k - q * i) as u32);
                nb.y_prev.push(g.reduce_cover_node(i, j - 1, k + q * i) as u32);
            }
        }
        GeometryKind::SphereReduced1D => unreachable!("sphere has no horizontal frame tables"),
    }
    nb
}

fn frame_taps(g: &ModelGeometry, nb: &FrameNeighbors) -> Vec<Tap> {
    let half = g.conventions.frame_half;
    let kx = g.cell_mass * half / g.spacing(0).powi(2);
    let ky = g.cell_mass * half / g.spacing(1).powi(2);
    let mut taps = Vec::with_capacity(4 * g.len());
    for row in 0..g.len() {
        let r = row as u32;
        taps.push(Tap { row: r, col: nb.x_next[row], conductance: kx });
        taps.push(Tap { row: r, col: nb.x_prev[row], conductance: kx });
        taps.push(Tap { row: r, col: nb.y_next[row], conductance: ky });
        taps.push(Tap { row: r, col: nb.y_prev[row], conductance: ky });
    }
    taps
}

/// Divergence form with face weight `s(1-s)`, which vanishes on the
/// boundary faces `s = 0, 1`, so no boundary taps exist.
fn sphere_taps(g: &ModelGeometry) -> Vec<Tap> {
    let n = g.resolution[0];
    let h = g.spacing(0);
    let c_s = g.conventions.sphere_frame_constant;
    let face = |f: usize| {
        let s = f as f64 * h;
        g.cell_mass * c_s * s * (1.0 - s) / (h * h)
    };
    let mut taps = Vec::with_capacity(2 * n);
    for i in 0..n {
        if i > 0 {
            taps.push(Tap { row: i as u32, col: (i - 1) as u32, conductance: face(i) });
        }
        if i + 1 < n {
            taps.push(Tap { row: i as u32, col: (i + 1) as u32, conductance: face(i + 1) });
        }
    }
    taps
}

/// Real values sampled on the cells of a geometry.
#[derive(Debug, Clone)]
pub struct ScalarField {
    geometry: Arc<ModelGeometry>,
    values: Vec<f64>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.same_geometry(other) && self.values == other.values
    }
}

impl ScalarField {
    pub fn new(geometry: Arc<ModelGeometry>, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(FlowError::Config(format!(
                "field has {} values, geometry has {} cells",
                values.len(),
                geometry.len()
            )));
        }
        Ok(ScalarField { geometry, values })
    }

    pub fn constant(geometry: &Arc<ModelGeometry>, value: f64) -> Self {
        ScalarField {
            values: vec![value; geometry.len()],
            geometry: Arc::clone(geometry),
        }
    }

    pub fn zeros(geometry: &Arc<ModelGeometry>) -> Self {
        Self::constant(geometry, 0.0)
    }

    /// Samples `f` at every cell's coordinates (see [`ModelGeometry::point`]).
    pub fn from_fn(geometry: &Arc<ModelGeometry>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..geometry.len()).map(|i| f(geometry.point(i))).collect();
        ScalarField {
            geometry: Arc::clone(geometry),
            values,
        }
    }

    pub fn geometry(&self) -> &Arc<ModelGeometry> {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_geometry(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.geometry, &other.geometry) || *self.geometry == *other.geometry
    }

    pub fn ensure_same_geometry(&self, other: &ScalarField) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(FlowError::GeometryMismatch)
        }
    }

    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((cell, value)) => Err(FlowError::NonFinite { cell, value }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            geometry: Arc::clone(&self.geometry),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<ScalarField> {
        self.ensure_same_geometry(other)?;
        Ok(ScalarField {
            geometry: Arc::clone(&self.geometry),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &ScalarField) -> Result<ScalarField> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: f64) -> ScalarField {
        self.map(|v| alpha * v)
    }

    pub fn max_abs(&self) -> (usize, f64) {
        let mut best = (0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            let a = v.abs();
            if a > best.1 || a.is_nan() {
                best = (i, a);
                if a.is_nan() {
                    break;
                }
            }
        }
        best
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Compensated (Neumaier) sum.
pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `∫ f θ̂∧dθ̂` by the cell-mass rule.
pub fn integrate(f: &ScalarField) -> Result<f64> {
    f.ensure_finite()?;
    let m = f.geometry.cell_mass;
    Ok(neumaier_sum(f.values.iter().map(|&v| v * m)))
}

/// `∫ f g θ̂∧dθ̂`.
pub fn inner(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    f.ensure_same_geometry(g)?;
    let m = f.geometry.cell_mass;
    let s = neumaier_sum(f.values.iter().zip(&g.values).map(|(a, b)| a * b * m));
    if s.is_finite() {
        Ok(s)
    } else {
        f.ensure_finite()?;
        g.ensure_finite()?;
        Err(FlowError::NonFinite { cell: 0, value: s })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    Constant {
        value: f64,
    },
    /// Band-limited trigonometric sum, rescaled so `max |λ| = amplitude`.
    SmoothRandom {
        seed: u64,
        amplitude: f64,
        cutoff: u32,
    },
    /// Periodized bump of the given width centered at `center` (geometry
    /// coordinates: `[x, y]`, `[x, y, t]` or `[s]`).
    Bump {
        center: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
}

pub fn initial_data(geometry: &Arc<ModelGeometry>, spec: &InitialData) -> Result<ScalarField> {
    match spec {
        InitialData::Constant { value } => {
            if !value.is_finite() {
                return Err(FlowError::Config("constant initial value must be finite".into()));
            }
            Ok(ScalarField::constant(geometry, *value))
        }
        InitialData::SmoothRandom {
            seed,
            amplitude,
            cutoff,
        } => {
            if !amplitude.is_finite() {
                return Err(FlowError::Config("amplitude must be finite".into()));
            }
            if *cutoff == 0 {
                return Err(FlowError::Config("cutoff frequency must be at least 1".into()));
            }
            let raw = smooth_random(geometry, *seed, *cutoff);
            Ok(normalize(raw, *amplitude))
        }
        InitialData::Bump {
            center,
            width,
            amplitude,
        } => {
            if !amplitude.is_finite() || !(width.is_finite() && *width > 0.0) {
                return Err(FlowError::Config("bump needs finite amplitude and positive width".into()));
            }
            if center.len() != geometry.kind.dimension() || center.iter().any(|c| !c.is_finite()) {
                return Err(FlowError::Config(format!(
                    "bump center needs {} finite coordinates",
                    geometry.kind.dimension()
                )));
            }
            Ok(bump(geometry, center, *width).scale(*amplitude))
        }
    }
}

fn normalize(field: ScalarField, amplitude: f64) -> ScalarField {
    let (_, peak) = field.max_abs();
    if peak == 0.0 {
        field
    } else {
        field.scale(amplitude / peak)
    }
}

fn smooth_random(geometry: &Arc<ModelGeometry>, seed: u64, cutoff: u32) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cutoff as i64;
    match geometry.kind {
        GeometryKind::SphereReduced1D => {
            let modes: Vec<(f64, f64)> = (1..=k)
                .map(|n| (n as f64, rng.gen_range(-1.0..1.0) / (1 + n * n) as f64))
                .collect();
            ScalarField::from_fn(geometry, |p| {
                modes
                    .iter()
                    .map(|&(n, a)| a * (std::f64::consts::PI * n * p[0]).cos())
                    .sum()
            })
        }
        // t-independent trigonometric sums on the torus descend to the
        // lattice quotient, so the same generator serves both kinds.
        _ => {
            let (lx, ly) = (geometry.periods[0], geometry.periods[1]);
            let mut modes = Vec::new();
            for k2 in 0..=k {
                for k1 in -k..=k {
                    if k2 == 0 && k1 <= 0 {
                        continue;
                    }
                    let decay = 1.0 / (1 + k1 * k1 + k2 * k2) as f64;
                    let a = rng.gen_range(-1.0..1.0) * decay;
                    let b = rng.gen_range(-1.0..1.0) * decay;
                    modes.push((k1 as f64 / lx, k2 as f64 / ly, a, b));
                }
            }
            let tau = std::f64::consts::TAU;
            ScalarField::from_fn(geometry, |p| {
                modes
                    .iter()
                    .map(|&(fx, fy, a, b)| {
                        let phase = tau * (fx * p[0] + fy * p[1]);
                        a * phase.cos() + b * phase.sin()
                    })
                    .sum()
            })
        }
    }
}

fn bump(geometry: &Arc<ModelGeometry>, center: &[f64], width: f64) -> ScalarField {
    match geometry.kind {
        GeometryKind::SphereReduced1D => {
            let s0 = center[0];
            ScalarField::from_fn(geometry, |p| (-((p[0] - s0) / width).powi(2)).exp())
        }
        GeometryKind::HeisenbergSector2D => {
            let (lx, ly) = (geometry.periods[0], geometry.periods[1]);
            let reach_x = (4.0 * width / lx).ceil() as i64 + 1;
            let reach_y = (4.0 * width / ly).ceil() as i64 + 1;
            ScalarField::from_fn(geometry, |p| {
                let mut acc = 0.0;
                for m in -reach_x..=reach_x {
                    for n in -reach_y..=reach_y {
                        let dx = p[0] + m as f64 * lx - center[0];
                        let dy = p[1] + n as f64 * ly - center[1];
                        acc += (-(dx * dx + dy * dy) / (width * width)).exp();
                    }
                }
                acc
            })
        }
        GeometryKind::HeisenbergLattice3D => {
            let c = [center[0], center[1], center[2]];
            ScalarField::from_fn(geometry, |p| lattice_bump(geometry, p, c, width))
        }
    }
}

/// Sum over the lattice of `exp(-N(p0⁻¹·γp)^4 / w^4)` with the homogeneous
/// norm `N^4 = (dx² + dy²)² + dt²`.
pub fn lattice_bump(geometry: &ModelGeometry, p: [f64; 3], center: [f64; 3], width: f64) -> f64 {
    let (a, b, c) = (geometry.periods[0], geometry.periods[1], geometry.periods[2]);
    let w4 = width.powi(4);
    let reach = |period: f64| (3.0 * width / period).ceil() as i64 + 1;
    let t_reach = 6.0 * width * width;
    let mut acc = 0.0;
    for m in -reach(a)..=reach(a) {
        // left action of (m a, 0, 0)
        let (x1, y1, t1) = (p[0] + m as f64 * a, p[1], p[2] - 2.0 * m as f64 * a * p[1]);
        for n in -reach(b)..=reach(b) {
            // left action of (0, n b, 0)
            let (x2, y2, t2) = (x1, y1 + n as f64 * b, t1 + 2.0 * n as f64 * b * x1);
            let dx = x2 - center[0];
            let dy = y2 - center[1];
            let base = t2 - center[2] + 2.0 * (center[0] * y2 - center[1] * x2);
            let r2 = dx * dx + dy * dy;
            let l_lo = ((-t_reach - base) / c).ceil() as i64;
            let l_hi = ((t_reach - base) / c).floor() as i64;
            for l in l_lo..=l_hi {
                let dt = base + l as f64 * c;
                acc += (-(r2 * r2 + dt * dt) / w4).exp();
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sector32() -> Arc<ModelGeometry> {
        build_geometry(&GeometrySpec::sector(32)).unwrap()
    }

    #[test]
    fn sector_volume_is_four() {
        let g = sector32();
        assert_eq!(g.background_volume(), 4.0);
        let one = ScalarField::constant(&g, 1.0);
        assert!((integrate(&one).unwrap() - 4.0).abs() < 1e-14);
        assert_eq!(integrate(&ScalarField::zeros(&g)).unwrap(), 0.0);
    }

    #[test]
    fn indicator_integrates_to_cell_mass() {
        let g = sector32();
        let mut f = ScalarField::zeros(&g);
        f.values_mut()[17] = 1.0;
        assert_eq!(integrate(&f).unwrap(), 4.0 / 1024.0);
        assert_eq!(g.cell_mass(), g.cell_volume_weight() * g.spacing(0) * g.spacing(1));
    }

    #[test]
    fn sphere_cell_centers_interior() {
        let g = build_geometry(&GeometrySpec::sphere(64)).unwrap();
        for i in 0..64 {
            let s = g.point(i)[0];
            assert_eq!(s, (i as f64 + 0.5) / 64.0);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn sphere_measure_is_uniform_in_s() {
        let g = build_geometry(&GeometrySpec::sphere(256)).unwrap();
        let kappa = g.conventions().sphere_total_volume;
        for k in 0..4 {
            let f = ScalarField::from_fn(&g, |p| p[0].powi(k));
            let exact = kappa / (k as f64 + 1.0);
            // midpoint rule: exact through degree 1, O(h^2) beyond
            let tol = if k <= 1 { 1e-13 } else { 1e-4 };
            assert!((integrate(&f).unwrap() - exact).abs() <= tol * kappa, "degree {k}");
        }
    }

    #[test]
    fn small_resolution_rejected() {
        let err = build_geometry(&GeometrySpec::sector(2)).unwrap_err();
        assert!(matches!(err, FlowError::ResolutionTooSmall { cells: 2, .. }));
        assert!(err.to_string().contains("resolution too small"));
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut spec = GeometrySpec::sector(8);
        spec.kind = "klein_bottle".into();
        assert!(matches!(build_geometry(&spec), Err(FlowError::UnknownKind(_))));
    }

    #[test]
    fn lattice_shift_constraints() {
        let g = build_geometry(&GeometrySpec::lattice(16)).unwrap();
        assert_eq!(g.t_wrap_shift(), 1);
        assert_eq!(g.periods()[2], 0.125);
        assert!((g.background_volume() - 0.5).abs() < 1e-15);

        let mut bad = GeometrySpec::lattice(16);
        bad.periods = Some(vec![1.0, 1.0, 1.0]);
        assert!(matches!(build_geometry(&bad), Err(FlowError::WrapShift(_))));

        // shift is integral (q = 2) but 4ab/c = 4/3 is not
        let mut bad = GeometrySpec::lattice(4);
        bad.resolution = vec![4, 4, 48];
        bad.periods = Some(vec![1.0, 1.0, 3.0]);
        let err = build_geometry(&bad).unwrap_err();
        assert!(err.to_string().contains("commutator"), "{err}");
    }

    #[test]
    fn cover_reduction_is_identity_on_fundamental_domain() {
        let g = build_geometry(&GeometrySpec::lattice(8)).unwrap();
        for idx in 0..g.len() {
            let (i, j, k) = g.lattice_index(idx);
            assert_eq!(g.reduce_cover_node(i as i64, j as i64, k as i64), idx);
        }
    }

    #[test]
    fn random_data_is_deterministic() {
        let g = sector32();
        let spec = InitialData::SmoothRandom {
            seed: 7,
            amplitude: 0.1,
            cutoff: 4,
        };
        let a = initial_data(&g, &spec).unwrap();
        let b = initial_data(&g, &spec).unwrap();
        assert_eq!(a.values(), b.values());
        assert!((a.max_abs().1 - 0.1).abs() < 1e-15);
        let c = initial_data(
            &g,
            &InitialData::SmoothRandom {
                seed: 8,
                amplitude: 0.1,
                cutoff: 4,
            },
        )
        .unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn lattice_bump_is_invariant_under_the_lattice() {
        let g = build_geometry(&GeometrySpec::lattice(8)).unwrap();
        let (a, b, c) = (g.periods()[0], g.periods()[1], g.periods()[2]);
        let center = [0.4, 0.55, 0.1];
        let width = 0.2;
        for &p in &[[0.1, 0.2, 0.03], [0.7, 0.9, 0.2], [0.45, 0.5, 0.11]] {
            let f = lattice_bump(&g, p, center, width);
            let x_wrap = [p[0] + a, p[1], p[2] - 2.0 * a * p[1]];
            let y_wrap = [p[0], p[1] + b, p[2] + 2.0 * b * p[0]];
            let t_wrap = [p[0], p[1], p[2] + c];
            for q in [x_wrap, y_wrap, t_wrap] {
                let fq = lattice_bump(&g, q, center, width);
                assert!((fq - f).abs() <= 1e-12 * f.abs().max(1e-300), "{p:?} -> {q:?}");
            }
        }
        assert!(lattice_bump(&g, center, center, width) >= 1.0);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let a = ScalarField::zeros(&sector32());
        let b = ScalarField::zeros(&build_geometry(&GeometrySpec::sector(16)).unwrap());
        assert!(matches!(a.axpy(1.0, &b), Err(FlowError::GeometryMismatch)));
    }

    #[test]
    fn non_finite_integrand_rejected() {
        let mut f = ScalarField::zeros(&sector32());
        f.values_mut()[3] = f64::NAN;
        assert!(matches!(integrate(&f), Err(FlowError::NonFinite { cell: 3, .. })));
    }
}
