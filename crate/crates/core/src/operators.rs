//! Discrete horizontal calculus on the model geometries.
//!
//! All grid operators are assembled in divergence form from the symmetric
//! taps of a [`ModelGeometry`]:
//!
//! ```text
//! (Δ̂_b f)_r   = (1/m)           Σ κ (f_r - f_c)
//! (Δ_b^θ f)_r = (1/(m e^{4λ_r})) Σ κ e^{λ_r + λ_c} (f_r - f_c)
//! ```
//!
//! The conformal weight `e^{λ_r + λ_c}` (geometric mean of `e^{2λ}` over the
//! edge) is the one for which the discrete conformal change law
//! `L_θ φ = u⁻³ L_θ̂(u φ)` holds exactly, and with it the energy gradient
//! identity used by the flow.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::manifold::{inner, ModelGeometry, ScalarField};

/// Direction of the flow relative to the energy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowSign {
    /// `∂t λ = -grad e`; energy decreases.
    #[default]
    Descending,
    /// `∂t λ = +grad e`; only used by the sign probe.
    Ascending,
}

impl FlowSign {
    pub fn factor(self) -> f64 {
        match self {
            FlowSign::Descending => -1.0,
            FlowSign::Ascending => 1.0,
        }
    }
}

/// Every normalization the operators rely on, pinned in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionLedger {
    /// `+1`: `⟨Δ̂_b f, f⟩ ≥ 0`. The opposite sign convention is not used.
    pub sublap_sign: f64,
    /// `Δ̂_b = -frame_half (X² + Y²)` on the Heisenberg kinds.
    pub frame_half: f64,
    /// `b` in `L_θ = b Δ_b + W`.
    pub yamabe_coefficient: f64,
    pub flow_sign: FlowSign,
    /// `θ0 ∧ dθ0 = 4 dx dy dt`.
    pub heisenberg_volume_density: f64,
    /// `c_s` in `Δ̂_b f = -c_s [s(1-s) f'' + (1-2s) f']` on the sphere.
    pub sphere_frame_constant: f64,
    /// Total volume `κ` of the sphere background.
    pub sphere_total_volume: f64,
}

impl Default for ConventionLedger {
    fn default() -> Self {
        ConventionLedger {
            sublap_sign: 1.0,
            frame_half: 0.5,
            yamabe_coefficient: 4.0,
            flow_sign: FlowSign::Descending,
            heisenberg_volume_density: 4.0,
            sphere_frame_constant: 8.0,
            sphere_total_volume: std::f64::consts::PI * std::f64::consts::PI,
        }
    }
}

impl ConventionLedger {
    /// `grad_θ e = gradient_factor · Δ_b^θ W`, with `gradient_factor = 2b`.
    pub fn gradient_factor(&self) -> f64 {
        2.0 * self.yamabe_coefficient
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StencilOrder {
    #[default]
    Second,
    Fourth,
}

/// `e^{kλ}` cellwise; overflow or underflow is a blow-up.
pub(crate) fn exp_scaled(lambda: &[f64], k: f64) -> Result<Vec<f64>> {
    lambda
        .iter()
        .enumerate()
        .map(|(cell, &l)| {
            let v = (k * l).exp();
            if l.is_finite() && v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(FlowError::BlowUp { cell, lambda: l })
            }
        })
        .collect()
}

fn require_heisenberg(g: &ModelGeometry, op: &'static str) -> Result<()> {
    if g.kind().is_heisenberg() {
        Ok(())
    } else {
        Err(FlowError::WrongKind {
            op,
            kind: g.kind().name(),
        })
    }
}

/// Centered approximations of `Xf, Yf` along the frame's flow lines.
pub fn horiz_derivs(f: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    horiz_derivs_with_order(f, StencilOrder::Second)
}

pub fn horiz_derivs_with_order(
    f: &ScalarField,
    order: StencilOrder,
) -> Result<(ScalarField, ScalarField)> {
    let g = f.geometry();
    require_heisenberg(g, "horiz_derivs")?;
    f.ensure_finite()?;
    let nb = g.neighbors().expect("heisenberg geometries carry frame tables");
    let v = f.values();
    let diff = |next: &[u32], prev: &[u32], h: f64| -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let (n1, p1) = (next[i] as usize, prev[i] as usize);
                match order {
                    StencilOrder::Second => (v[n1] - v[p1]) / (2.0 * h),
                    StencilOrder::Fourth => {
                        let (n2, p2) = (next[n1] as usize, prev[p1] as usize);
                        (-v[n2] + 8.0 * v[n1] - 8.0 * v[p1] + v[p2]) / (12.0 * h)
                    }
                }
            })
            .collect()
    };
    let xf = diff(&nb.x_next, &nb.x_prev, g.spacing(0));
    let yf = diff(&nb.y_next, &nb.y_prev, g.spacing(1));
    Ok((
        ScalarField::new(g.clone(), xf)?,
        ScalarField::new(g.clone(), yf)?,
    ))
}

pub(crate) fn sublap_raw(g: &ModelGeometry, f: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; f.len()];
    for tap in g.taps() {
        let (r, c) = (tap.row as usize, tap.col as usize);
        acc[r] += tap.conductance * (f[r] - f[c]);
    }
    let m = g.cell_mass();
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

/// `(Δ_b^θ f)` with `u = e^λ` and `u4 = e^{4λ}` precomputed.
pub(crate) fn conformal_sublap_raw(g: &ModelGeometry, u: &[f64], u4: &[f64], f: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; f.len()];
    for tap in g.taps() {
        let (r, c) = (tap.row as usize, tap.col as usize);
        acc[r] += tap.conductance * (u[r] * u[c]) * (f[r] - f[c]);
    }
    let m = g.cell_mass();
    acc.iter_mut().zip(u4).for_each(|(a, w)| *a /= m * w);
    acc
}

/// Positive sublaplacian of the background structure.
pub fn sublap(f: &ScalarField) -> Result<ScalarField> {
    f.ensure_finite()?;
    ScalarField::new(f.geometry().clone(), sublap_raw(f.geometry(), f.values()))
}

/// Sublaplacian of `θ = e^{2λ} θ̂`, self-adjoint for `∫ · e^{4λ} θ̂∧dθ̂`.
pub fn conformal_sublap(lambda: &ScalarField, f: &ScalarField) -> Result<ScalarField> {
    lambda.ensure_same_geometry(f)?;
    f.ensure_finite()?;
    let u = exp_scaled(lambda.values(), 1.0)?;
    let u4 = exp_scaled(lambda.values(), 4.0)?;
    let g = lambda.geometry();
    ScalarField::new(g.clone(), conformal_sublap_raw(g, &u, &u4, f.values()))
}

pub(crate) fn webster_raw(g: &ModelGeometry, lambda: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let b = g.conventions().yamabe_coefficient;
    let w_hat = g.background_curvature();
    let lap_u = sublap_raw(g, u);
    let inv_u3 = exp_scaled(lambda, -3.0)?;
    let inv_u2 = exp_scaled(lambda, -2.0)?;
    Ok(lap_u
        .iter()
        .zip(inv_u3.iter().zip(&inv_u2))
        .map(|(lu, (i3, i2))| b * i3 * lu + w_hat * i2)
        .collect())
}

/// Webster curvature of `θ = e^{2λ} θ̂` via `W = u⁻³ (b Δ̂_b u + Ŵ u)`.
pub fn webster_curvature(lambda: &ScalarField) -> Result<ScalarField> {
    let g = lambda.geometry();
    let u = exp_scaled(lambda.values(), 1.0)?;
    ScalarField::new(g.clone(), webster_raw(g, lambda.values(), &u)?)
}

/// CR Yamabe operator `L_θ φ = b Δ_b^θ φ + W_θ φ`.
pub fn yamabe_apply(lambda: &ScalarField, phi: &ScalarField) -> Result<ScalarField> {
    lambda.ensure_same_geometry(phi)?;
    phi.ensure_finite()?;
    let g = lambda.geometry();
    let b = g.conventions().yamabe_coefficient;
    let u = exp_scaled(lambda.values(), 1.0)?;
    let u4 = exp_scaled(lambda.values(), 4.0)?;
    let w = webster_raw(g, lambda.values(), &u)?;
    let lap = conformal_sublap_raw(g, &u, &u4, phi.values());
    let out = lap
        .iter()
        .zip(w.iter().zip(phi.values()))
        .map(|(l, (w, p))| b * l + w * p)
        .collect();
    ScalarField::new(g.clone(), out)
}

/// `max_cells |L_θ φ - u⁻³ L_θ̂(u φ)|` where the left side is the grid operator
/// and the right side is evaluated pointwise on the continuum with the
/// fourth-order stencil of step `1e-3`. Flat Heisenberg kinds only; `lambda`
/// and `phi` must respect the geometry's identifications.
pub fn covariance_residual(
    g: &std::sync::Arc<ModelGeometry>,
    lambda: &dyn Fn([f64; 3]) -> f64,
    phi: &dyn Fn([f64; 3]) -> f64,
) -> Result<f64> {
    require_heisenberg(g, "covariance_residual")?;
    let b = g.conventions().yamabe_coefficient;
    let lam = ScalarField::from_fn(g, lambda);
    let ph = ScalarField::from_fn(g, phi);
    let discrete = yamabe_apply(&lam, &ph)?;
    let uphi = |q: [f64; 3]| lambda(q).exp() * phi(q);
    let mut worst: f64 = 0.0;
    for (idx, d) in discrete.values().iter().enumerate() {
        let p = g.point(idx);
        let u = lambda(p).exp();
        let lhat = b * sublap_pointwise_signed(&uphi, p, 1e-3, StencilOrder::Fourth)
            + g.background_curvature() * uphi(p);
        worst = worst.max((d - lhat / (u * u * u)).abs());
    }
    Ok(worst)
}

/// Gershgorin upper bound on the spectrum of `Δ̂_b`.
pub fn spectral_bound(g: &ModelGeometry) -> f64 {
    let mut row_sum = vec![0.0; g.len()];
    for tap in g.taps() {
        row_sum[tap.row as usize] += tap.conductance;
    }
    2.0 * row_sum.iter().cloned().fold(0.0, f64::max) / g.cell_mass()
}

// ---------------------------------------------------------------------------
// Pointwise evaluation on the full Heisenberg group.

fn second_difference(
    u: &dyn Fn([f64; 3]) -> f64,
    p: [f64; 3],
    dir: [f64; 3],
    h: f64,
    order: StencilOrder,
) -> Result<f64> {
    let at = |tau: f64| -> Result<f64> {
        let v = u([p[0] + tau * dir[0], p[1] + tau * dir[1], p[2] + tau * dir[2]]);
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(FlowError::NonPositive(v))
        }
    };
    Ok(match order {
        StencilOrder::Second => (at(h)? - 2.0 * at(0.0)? + at(-h)?) / (h * h),
        StencilOrder::Fourth => {
            (-at(2.0 * h)? + 16.0 * at(h)? - 30.0 * at(0.0)? + 16.0 * at(-h)? - at(-2.0 * h)?)
                / (12.0 * h * h)
        }
    })
}

/// `Δ̂_b u (p) = -½ (X² + Y²) u (p)` by differences along the straight flow
/// lines of `X` (direction `(1, 0, 2y)`) and `Y` (direction `(0, 1, -2x)`).
///
/// `u` must be positive on the stencil; use [`sublap_pointwise_signed`] for
/// general functions.
pub fn sublap_pointwise(
    u: &dyn Fn([f64; 3]) -> f64,
    p: [f64; 3],
    h: f64,
    order: StencilOrder,
) -> Result<f64> {
    let half = ConventionLedger::default().frame_half;
    let xx = second_difference(u, p, [1.0, 0.0, 2.0 * p[1]], h, order)?;
    let yy = second_difference(u, p, [0.0, 1.0, -2.0 * p[0]], h, order)?;
    Ok(-half * (xx + yy))
}

/// Same stencil as [`sublap_pointwise`] without the positivity requirement.
pub fn sublap_pointwise_signed(
    f: &dyn Fn([f64; 3]) -> f64,
    p: [f64; 3],
    h: f64,
    order: StencilOrder,
) -> f64 {
    let half = ConventionLedger::default().frame_half;
    let d2 = |dir: [f64; 3]| {
        let at = |tau: f64| f([p[0] + tau * dir[0], p[1] + tau * dir[1], p[2] + tau * dir[2]]);
        match order {
            StencilOrder::Second => (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h),
            StencilOrder::Fourth => {
                (-at(2.0 * h) + 16.0 * at(h) - 30.0 * at(0.0) + 16.0 * at(-h) - at(-2.0 * h))
                    / (12.0 * h * h)
            }
        }
    };
    -half * (d2([1.0, 0.0, 2.0 * p[1]]) + d2([0.0, 1.0, -2.0 * p[0]]))
}

/// Webster curvature at `p` of `u² θ0` on the Heisenberg group (`Ŵ = 0`).
pub fn webster_pointwise(
    u: &dyn Fn([f64; 3]) -> f64,
    p: [f64; 3],
    h: f64,
    order: StencilOrder,
) -> Result<f64> {
    let b = ConventionLedger::default().yamabe_coefficient;
    let u0 = u(p);
    if !(u0 > 0.0 && u0.is_finite()) {
        return Err(FlowError::NonPositive(u0));
    }
    Ok(b * sublap_pointwise(u, p, h, order)? / (u0 * u0 * u0))
}

/// `Δ_b^θ f (p) = u⁻³ [Δ̂_b(u f) - f Δ̂_b u]` for `θ = u² θ0`.
pub fn conformal_sublap_pointwise(
    u: &dyn Fn([f64; 3]) -> f64,
    f: &dyn Fn([f64; 3]) -> f64,
    p: [f64; 3],
    h: f64,
    order: StencilOrder,
) -> Result<f64> {
    let u0 = u(p);
    if !(u0 > 0.0 && u0.is_finite()) {
        return Err(FlowError::NonPositive(u0));
    }
    let uf = |q: [f64; 3]| u(q) * f(q);
    let lap_uf = sublap_pointwise_signed(&uf, p, h, order);
    let lap_u = sublap_pointwise(u, p, h, order)?;
    Ok((lap_uf - f(p) * lap_u) / (u0 * u0 * u0))
}

/// `|w + i|⁻¹ = (t² + (1 + |z|²)²)^{-1/2}`: the factor carrying `θ0` to the
/// standard sphere form through the Cayley transform.
pub fn u_star(p: [f64; 3]) -> f64 {
    let r2 = p[0] * p[0] + p[1] * p[1];
    (p[2] * p[2] + (1.0 + r2) * (1.0 + r2)).powf(-0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub samples: usize,
    pub seed: u64,
    /// Coarse and fine stencil steps.
    pub steps: [f64; 2],
    pub order: StencilOrder,
    pub rel_std_tol: f64,
    /// Absolute spread accepted when the mean is zero (flat baseline).
    pub abs_floor: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            samples: 128,
            seed: 0x5eed_ca1b,
            steps: [2e-2, 1e-2],
            order: StencilOrder::Fourth,
            rel_std_tol: 1e-3,
            abs_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub value: f64,
    pub rel_std: f64,
    /// Largest change between the coarse and fine step, relative to the mean.
    pub refinement_change: f64,
    pub samples: usize,
}

/// Evaluates [`webster_pointwise`] for `u` at random points and returns the
/// common value, or [`FlowError::NotConstant`].
pub fn calibrate_with(u: &dyn Fn([f64; 3]) -> f64, settings: &CalibrationSettings) -> Result<Calibration> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut coarse = Vec::with_capacity(settings.samples);
    let mut fine = Vec::with_capacity(settings.samples);
    for _ in 0..settings.samples {
        let p = [
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-2.0..2.0),
        ];
        coarse.push(webster_pointwise(u, p, settings.steps[0], settings.order)?);
        fine.push(webster_pointwise(u, p, settings.steps[1], settings.order)?);
    }
    let n = fine.len() as f64;
    let mean = fine.iter().sum::<f64>() / n;
    let std = (fine.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = mean.abs().max(f64::MIN_POSITIVE);
    let rel_std = std / scale;
    let refinement_change = coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| (c - f).abs())
        .fold(0.0, f64::max)
        / scale;
    if !(std <= settings.rel_std_tol * mean.abs() || std <= settings.abs_floor) {
        return Err(FlowError::NotConstant { mean, rel_std });
    }
    let value = if std <= settings.abs_floor && mean.abs() <= settings.abs_floor {
        0.0
    } else {
        mean
    };
    Ok(Calibration {
        value,
        rel_std: if value == 0.0 { 0.0 } else { rel_std },
        refinement_change: if value == 0.0 { 0.0 } else { refinement_change },
        samples: settings.samples,
    })
}

/// Calibrates the background Webster curvature of the sphere model.
pub fn calibrate_sphere_curvature() -> Result<Calibration> {
    calibrate_with(&u_star, &CalibrationSettings::default())
}

/// Process-wide cached result of [`calibrate_sphere_curvature`].
pub fn sphere_background_curvature() -> Result<f64> {
    static CACHE: OnceLock<std::result::Result<f64, (f64, f64)>> = OnceLock::new();
    match CACHE.get_or_init(|| match calibrate_sphere_curvature() {
        Ok(c) => Ok(c.value),
        Err(FlowError::NotConstant { mean, rel_std }) => Err((mean, rel_std)),
        Err(_) => Err((f64::NAN, f64::NAN)),
    }) {
        Ok(v) => Ok(*v),
        Err((mean, rel_std)) => Err(FlowError::NotConstant {
            mean: *mean,
            rel_std: *rel_std,
        }),
    }
}

// ---------------------------------------------------------------------------
// Linear solver.

pub trait GridOperator {
    fn apply(&self, f: &ScalarField) -> Result<ScalarField>;
}

impl<F> GridOperator for F
where
    F: Fn(&ScalarField) -> Result<ScalarField>,
{
    fn apply(&self, f: &ScalarField) -> Result<ScalarField> {
        self(f)
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: ScalarField,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Conjugate gradients in the quadrature inner product, starting from `rhs`.
///
/// The operator must be symmetric positive semidefinite for that inner
/// product. Breakdown (`⟨p, Ap⟩ ≤ 0`) and exhaustion of `max_iter` are both
/// reported as [`FlowError::SolverDiverged`].
pub fn linear_solve(
    op: &dyn GridOperator,
    rhs: &ScalarField,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    rhs.ensure_finite()?;
    let b_norm = inner(rhs, rhs)?.sqrt();
    if b_norm == 0.0 {
        return Ok(SolveReport {
            solution: rhs.clone(),
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut x = rhs.clone();
    let mut r = rhs.axpy(-1.0, &op.apply(&x)?)?;
    let mut rr = inner(&r, &r)?;
    if rr.sqrt() <= tol * b_norm {
        return Ok(SolveReport {
            solution: x,
            iterations: 0,
            relative_residual: rr.sqrt() / b_norm,
        });
    }
    let mut p = r.clone();
    for it in 1..=max_iter {
        let ap = op.apply(&p)?;
        let pap = inner(&p, &ap)?;
        if !(pap > 0.0 && pap.is_finite()) {
            return Err(FlowError::SolverDiverged {
                iterations: it,
                residual: rr.sqrt() / b_norm,
            });
        }
        let alpha = rr / pap;
        x = x.axpy(alpha, &p)?;
        r = r.axpy(-alpha, &ap)?;
        let rr_new = inner(&r, &r)?;
        let rel = rr_new.sqrt() / b_norm;
        if rel <= tol {
            return Ok(SolveReport {
                solution: x,
                iterations: it,
                relative_residual: rel,
            });
        }
        p = r.axpy(rr_new / rr, &p)?;
        rr = rr_new;
    }
    Err(FlowError::SolverDiverged {
        iterations: max_iter,
        residual: rr.sqrt() / b_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{build_geometry, integrate, initial_data, GeometrySpec, InitialData};
    use std::f64::consts::{PI, TAU};

    fn random(g: &std::sync::Arc<ModelGeometry>, seed: u64, amp: f64) -> ScalarField {
        initial_data(
            g,
            &InitialData::SmoothRandom {
                seed,
                amplitude: amp,
                cutoff: 4,
            },
        )
        .unwrap()
    }

    /// Fresh random values, not smooth; exercises every stencil entry.
    fn noise(g: &std::sync::Arc<ModelGeometry>, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ScalarField::new(g.clone(), v).unwrap()
    }

    #[test]
    fn constants_have_zero_derivatives() {
        for spec in [GeometrySpec::sector(8), GeometrySpec::lattice(8)] {
            let g = build_geometry(&spec).unwrap();
            let c = ScalarField::constant(&g, 3.25);
            let (x, y) = horiz_derivs(&c).unwrap();
            assert!(x.values().iter().chain(y.values()).all(|&v| v == 0.0));
            assert!(sublap(&c).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn centered_derivative_matches_symbol() {
        let g = build_geometry(&GeometrySpec::sector(32)).unwrap();
        let k = 3.0;
        let dx = g.spacing(0);
        let f = ScalarField::from_fn(&g, |p| (TAU * k * p[0]).sin());
        let (xf, yf) = horiz_derivs(&f).unwrap();
        let symbol = (TAU * k * dx).sin() / dx;
        for i in 0..g.len() {
            let p = g.point(i);
            assert!((xf.values()[i] - symbol * (TAU * k * p[0]).cos()).abs() < 1e-12);
            assert!(yf.values()[i].abs() < 1e-12);
        }
        let (xf4, _) = horiz_derivs_with_order(&f, StencilOrder::Fourth).unwrap();
        let symbol4 = (8.0 * (TAU * k * dx).sin() - (2.0 * TAU * k * dx).sin()) / (6.0 * dx);
        for i in 0..g.len() {
            let p = g.point(i);
            assert!((xf4.values()[i] - symbol4 * (TAU * k * p[0]).cos()).abs() < 1e-11);
        }
    }

    #[test]
    fn horiz_derivs_rejects_sphere() {
        let g = build_geometry(&GeometrySpec::sphere(16)).unwrap();
        let f = ScalarField::zeros(&g);
        assert!(matches!(horiz_derivs(&f), Err(FlowError::WrongKind { .. })));
    }

    #[test]
    fn lattice_x_derivative_of_t_dependent_function() {
        // f = sin(2π t / c) differentiates to 2y·(2π/c) cos(2π t/c) along X,
        // which on grid nodes is exact up to the centered-difference symbol.
        let g = build_geometry(&GeometrySpec::lattice(8)).unwrap();
        let c = g.periods()[2];
        let w = TAU / c;
        // f is not lattice invariant, so only check nodes away from wraps
        let f = ScalarField::from_fn(&g, |p| (w * p[2]).sin());
        let (xf, _) = horiz_derivs(&f).unwrap();
        let dx = g.spacing(0);
        for idx in 0..g.len() {
            let (i, _, _) = g.lattice_index(idx);
            if i == 0 || i == 7 {
                continue;
            }
            let p = g.point(idx);
            let slope = 2.0 * p[1];
            let expected = (w * slope * dx).sin() / dx * (w * p[2]).cos();
            assert!((xf.values()[idx] - expected).abs() < 1e-9, "{idx}");
        }
    }

    #[test]
    fn plane_wave_eigenvalue() {
        let g = build_geometry(&GeometrySpec::sector(32)).unwrap();
        let dx = g.spacing(0);
        for k in [1.0, 2.0, 5.0] {
            let f = ScalarField::from_fn(&g, |p| (TAU * k * p[0]).cos());
            let lf = sublap(&f).unwrap();
            let lam = 0.5 * (4.0 / (dx * dx)) * (PI * k * dx).sin().powi(2);
            for (a, b) in lf.values().iter().zip(f.values()) {
                assert!((a - lam * b).abs() < 1e-9 * lam, "k={k}");
            }
        }
    }

    #[test]
    fn sphere_sublap_of_linear_is_exact() {
        let g = build_geometry(&GeometrySpec::sphere(64)).unwrap();
        let c_s = g.conventions().sphere_frame_constant;
        let f = ScalarField::from_fn(&g, |p| p[0]);
        let lf = sublap(&f).unwrap();
        for i in 0..g.len() {
            let s = g.point(i)[0];
            assert!((lf.values()[i] - c_s * (2.0 * s - 1.0)).abs() < 1e-11);
        }
    }

    #[test]
    fn sphere_sublap_converges_at_second_order_in_the_interior() {
        // Δ̂ s² = -c_s (4s - 6s²); the boundary cells carry an O(h) error from
        // the degenerate weight, so measure the discrete L2 error.
        let err = |n: usize| {
            let g = build_geometry(&GeometrySpec::sphere(n)).unwrap();
            let c_s = g.conventions().sphere_frame_constant;
            let f = ScalarField::from_fn(&g, |p| p[0] * p[0]);
            let lf = sublap(&f).unwrap();
            let e = ScalarField::from_fn(&g, |p| -c_s * (4.0 * p[0] - 6.0 * p[0] * p[0]));
            let d = lf.axpy(-1.0, &e).unwrap();
            inner(&d, &d).unwrap().sqrt()
        };
        let (e1, e2, e3) = (err(32), err(64), err(128));
        assert!(e2 < e1 && e3 < e2);
        assert!((e2 / e3).log2() > 0.9, "{e1} {e2} {e3}");
    }

    #[test]
    fn sublap_self_adjoint_and_positive() {
        for spec in [
            GeometrySpec::sector(16),
            GeometrySpec::lattice(8),
            GeometrySpec::sphere(32),
        ] {
            let g = build_geometry(&spec).unwrap();
            let f = noise(&g, 1);
            let h = noise(&g, 2);
            let a = inner(&sublap(&f).unwrap(), &h).unwrap();
            let b = inner(&f, &sublap(&h).unwrap()).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()), "{spec:?}");
            assert!(inner(&sublap(&f).unwrap(), &f).unwrap() > 0.0);
        }
    }

    #[test]
    fn conformal_sublap_reduces_and_annihilates() {
        let g = build_geometry(&GeometrySpec::sector(16)).unwrap();
        let f = noise(&g, 3);
        let zero = ScalarField::zeros(&g);
        assert_eq!(conformal_sublap(&zero, &f).unwrap().values(), sublap(&f).unwrap().values());
        let lam = random(&g, 4, 0.7);
        let one = ScalarField::constant(&g, 1.0);
        assert!(conformal_sublap(&lam, &one).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conformal_sublap_weighted_adjoint_and_mean_zero() {
        for spec in [GeometrySpec::sector(16), GeometrySpec::sphere(32)] {
            let g = build_geometry(&spec).unwrap();
            let lam = random(&g, 5, 0.5);
            let e4 = lam.map(|l| (4.0 * l).exp());
            let f = noise(&g, 6);
            let h = noise(&g, 7);
            let lf = conformal_sublap(&lam, &f).unwrap();
            let lh = conformal_sublap(&lam, &h).unwrap();
            let a = inner(&lf.zip_map(&e4, |x, w| x * w).unwrap(), &h).unwrap();
            let b = inner(&f, &lh.zip_map(&e4, |x, w| x * w).unwrap()).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
            let mean = integrate(&lf.zip_map(&e4, |x, w| x * w).unwrap()).unwrap();
            let scale = integrate(&lf.zip_map(&e4, |x, w| x.abs() * w).unwrap()).unwrap();
            assert!(mean.abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn webster_of_constants() {
        let g = build_geometry(&GeometrySpec::sector(16)).unwrap();
        for c in [0.0, 0.3, -1.7] {
            let w = webster_curvature(&ScalarField::constant(&g, c)).unwrap();
            assert!(w.values().iter().all(|&v| v == 0.0));
        }
        let s = build_geometry(&GeometrySpec::sphere(16)).unwrap();
        let w_hat = s.background_curvature();
        for c in [0.0, 0.3, -1.7] {
            let w = webster_curvature(&ScalarField::constant(&s, c)).unwrap();
            assert!(w.values().iter().all(|&v| v == w_hat * (-2.0 * c).exp()));
        }
    }

    #[test]
    fn overflow_is_blowup() {
        let g = build_geometry(&GeometrySpec::sector(8)).unwrap();
        let mut lam = ScalarField::zeros(&g);
        lam.values_mut()[5] = 400.0;
        assert!(matches!(webster_curvature(&lam), Err(FlowError::BlowUp { cell: 5, .. })));
        assert!(matches!(
            conformal_sublap(&lam, &ScalarField::zeros(&g)),
            Err(FlowError::BlowUp { cell: 5, .. })
        ));
    }

    #[test]
    fn yamabe_at_flat_background() {
        let g = build_geometry(&GeometrySpec::sphere(32)).unwrap();
        let phi = noise(&g, 9);
        let zero = ScalarField::zeros(&g);
        let l = yamabe_apply(&zero, &phi).unwrap();
        let lap = sublap(&phi).unwrap();
        let w_hat = g.background_curvature();
        for i in 0..g.len() {
            let expected = 4.0 * lap.values()[i] + w_hat * phi.values()[i];
            assert!((l.values()[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn discrete_conformal_covariance_is_exact() {
        let g = build_geometry(&GeometrySpec::sector(16)).unwrap();
        let lam = random(&g, 10, 0.4);
        let phi = noise(&g, 11);
        let lhs = yamabe_apply(&lam, &phi).unwrap();
        let u = lam.map(f64::exp);
        let uphi = u.zip_map(&phi, |a, b| a * b).unwrap();
        let rhs = yamabe_apply(&ScalarField::zeros(&g), &uphi)
            .unwrap()
            .zip_map(&u, |l, u| l / (u * u * u))
            .unwrap();
        for (a, b) in lhs.values().iter().zip(rhs.values()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn yamabe_of_inverse_factor_vanishes_at_second_order() {
        // L_θ(u⁻¹) = u⁻³ L_θ̂(1) = 0 on the flat sector
        let err = |n: usize| {
            let g = build_geometry(&GeometrySpec::sector(n)).unwrap();
            let lam = ScalarField::from_fn(&g, |p| 0.3 * (TAU * p[0]).sin() * (TAU * p[1]).cos());
            let inv_u = lam.map(|l| (-l).exp());
            yamabe_apply(&lam, &inv_u).unwrap().max_abs().1
        };
        // discretely the cancellation is exact
        assert!(err(16) < 1e-9 && err(32) < 1e-8);
    }

    #[test]
    fn pointwise_flat_baselines() {
        let one = |_: [f64; 3]| 1.0;
        let ec = |_: [f64; 3]| 0.7f64.exp();
        for p in [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]] {
            assert!(webster_pointwise(&one, p, 1e-2, StencilOrder::Fourth).unwrap().abs() < 1e-12);
            assert!(webster_pointwise(&ec, p, 1e-2, StencilOrder::Second).unwrap().abs() < 1e-11);
        }
        let neg = |_: [f64; 3]| -1.0;
        assert!(matches!(
            webster_pointwise(&neg, [0.0; 3], 1e-2, StencilOrder::Second),
            Err(FlowError::NonPositive(_))
        ));
    }

    #[test]
    fn u_star_curvature_is_constant_under_refinement() {
        let pts = [[0.3, -0.2, 0.7], [1.1, 0.4, -1.3]];
        for p in pts {
            let a = webster_pointwise(&u_star, p, 2e-2, StencilOrder::Fourth).unwrap();
            let b = webster_pointwise(&u_star, p, 1e-2, StencilOrder::Fourth).unwrap();
            assert!((a - b).abs() < 1e-4 * b.abs());
        }
        let a = webster_pointwise(&u_star, pts[0], 1e-2, StencilOrder::Fourth).unwrap();
        let b = webster_pointwise(&u_star, pts[1], 1e-2, StencilOrder::Fourth).unwrap();
        assert!((a - b).abs() < 1e-4 * a.abs());
    }

    #[test]
    fn calibration_value_and_scaling() {
        let cal = calibrate_sphere_curvature().unwrap();
        assert!(cal.value > 0.0);
        assert!(cal.rel_std <= 1e-3);
        let c: f64 = 0.4;
        let scaled = move |p: [f64; 3]| c.exp() * u_star(p);
        let cal2 = calibrate_with(&scaled, &CalibrationSettings::default()).unwrap();
        assert!((cal2.value - (-2.0 * c).exp() * cal.value).abs() < 1e-8 * cal.value);
        let flat = calibrate_with(&|_: [f64; 3]| 1.0, &CalibrationSettings::default()).unwrap();
        assert_eq!(flat.value, 0.0);
    }

    #[test]
    fn calibration_rejects_wrong_exponent() {
        let bad = |p: [f64; 3]| u_star(p).powf(0.8);
        assert!(matches!(
            calibrate_with(&bad, &CalibrationSettings::default()),
            Err(FlowError::NotConstant { .. })
        ));
    }

    #[test]
    fn sphere_frame_constant_matches_cayley_pullback() {
        // For torus-invariant f(s) with s = 4|z|²/|w+i|², the conformal
        // sublaplacian of u*² θ0 must equal -c_s [s(1-s) f'' + (1-2s) f'].
        let c_s = ConventionLedger::default().sphere_frame_constant;
        let s_of = |p: [f64; 3]| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            4.0 * r2 / (p[2] * p[2] + (1.0 + r2) * (1.0 + r2))
        };
        let f = |s: f64| (2.0 * s).sin() + s * s * s;
        let df = |s: f64| 2.0 * (2.0 * s).cos() + 3.0 * s * s;
        let d2f = |s: f64| -4.0 * (2.0 * s).sin() + 6.0 * s;
        let fp = move |p: [f64; 3]| f(s_of(p));
        for p in [[0.3, 0.1, 0.2], [0.8, -0.5, -0.9], [-0.2, 0.6, 1.4]] {
            let got = conformal_sublap_pointwise(&u_star, &fp, p, 1e-3, StencilOrder::Fourth).unwrap();
            let s = s_of(p);
            let want = -c_s * (s * (1.0 - s) * d2f(s) + (1.0 - 2.0 * s) * df(s));
            assert!((got - want).abs() < 1e-5 * want.abs().max(1.0), "{p:?}: {got} vs {want}");
        }
    }

    #[test]
    fn sphere_total_volume_matches_heisenberg_integral() {
        // ∫ 4 u*⁴ dx dy dt = 4π² ∫_0^∞ r / (1 + r²)³ dr after the t integral.
        let n = 200_000;
        let r_max: f64 = 400.0;
        let h = r_max / n as f64;
        let g = |r: f64| r / (1.0 + r * r).powi(3);
        let mut acc = g(0.0) + g(r_max);
        for i in 1..n {
            acc += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let vol = 4.0 * PI * PI * acc * h / 3.0;
        let kappa = ConventionLedger::default().sphere_total_volume;
        assert!((vol - kappa).abs() < 1e-8 * kappa);
    }

    #[test]
    fn cg_identity_returns_rhs() {
        let g = build_geometry(&GeometrySpec::sector(8)).unwrap();
        let b = noise(&g, 12);
        let id = |f: &ScalarField| Ok(f.clone());
        let rep = linear_solve(&id, &b, 1e-10, 10).unwrap();
        assert_eq!(rep.solution.values(), b.values());
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn cg_biharmonic_plane_wave() {
        let g = build_geometry(&GeometrySpec::sector(32)).unwrap();
        let dx = g.spacing(0);
        let alpha = 1e-6;
        let k = 3.0;
        let b = ScalarField::from_fn(&g, |p| (TAU * k * p[0]).cos());
        let op = |f: &ScalarField| f.axpy(alpha, &sublap(&sublap(f)?)?);
        let rep = linear_solve(&op, &b, 1e-12, 500).unwrap();
        let sym = 0.5 * (4.0 / (dx * dx)) * (PI * k * dx).sin().powi(2);
        let amp = 1.0 / (1.0 + alpha * sym * sym);
        for (x, bb) in rep.solution.values().iter().zip(b.values()) {
            assert!((x - amp * bb).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_inconsistent_singular_system_fails() {
        let g = build_geometry(&GeometrySpec::sector(8)).unwrap();
        let b = ScalarField::constant(&g, 1.0);
        let op = |f: &ScalarField| sublap(f);
        assert!(matches!(
            linear_solve(&op, &b, 1e-10, 100),
            Err(FlowError::SolverDiverged { .. })
        ));
    }

    #[test]
    fn gershgorin_bound_on_sector_is_sharp() {
        let g = build_geometry(&GeometrySpec::sector(32)).unwrap();
        let dx = g.spacing(0);
        assert!((spectral_bound(&g) - 4.0 / (dx * dx)).abs() < 1e-9);
    }
}
