//! The CR inversion `I(t, z) = (-t/|w|², z/w)` on the Heisenberg group minus
//! the origin, `w = t + i|z|²`.
//!
//! In real coordinates `z = x + iy`, `ρ = x² + y²`, `N = |w|² = t² + ρ²`:
//!
//! ```text
//! t' = -t / N
//! x' = (x t + y ρ) / N
//! y' = (y t - x ρ) / N
//! ```
//!
//! These are rational in `(t, x, y)`, so the differential is available both
//! in closed form and by complex-step differentiation; the two are compared
//! in [`InversionRecord::complex_step_gap`].

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeisenbergPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl HeisenbergPoint {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        HeisenbergPoint { t, x, y }
    }

    pub fn from_tz(t: f64, z: Complex64) -> Self {
        HeisenbergPoint { t, x: z.re, y: z.im }
    }

    pub fn z(&self) -> Complex64 {
        Complex64::new(self.x, self.y)
    }

    /// `w = t + i|z|²`.
    pub fn w(&self) -> Complex64 {
        Complex64::new(self.t, self.x * self.x + self.y * self.y)
    }

    pub fn is_origin(&self) -> bool {
        self.t == 0.0 && self.x == 0.0 && self.y == 0.0
    }

    fn checked(self) -> Result<Self> {
        if self.is_origin() {
            Err(FlowError::Origin)
        } else {
            Ok(self)
        }
    }
}

/// `|t + i|z|²|`.
pub fn wnorm(p: &HeisenbergPoint) -> f64 {
    let w = p.w();
    w.re.hypot(w.im)
}

pub fn invert(p: &HeisenbergPoint) -> Result<HeisenbergPoint> {
    let p = p.checked()?;
    let w = p.w();
    let n = w.norm_sqr();
    Ok(HeisenbergPoint::from_tz(-p.t / n, p.z() / w))
}

/// `I(I(p))`; equals `(t, -z)`.
pub fn double_invert(p: &HeisenbergPoint) -> Result<HeisenbergPoint> {
    invert(&invert(p)?)
}

/// Rows are `d t'`, `d x'`, `d y'`; columns are `∂t`, `∂x`, `∂y`.
pub type Jacobian = [[f64; 3]; 3];

/// Closed-form differential of `I` at `p`.
pub fn differential(p: &HeisenbergPoint) -> Result<Jacobian> {
    let p = p.checked()?;
    let (t, x, y) = (p.t, p.x, p.y);
    let rho = x * x + y * y;
    let w = p.w();
    let n = w.norm_sqr();
    let n2 = n * n;
    let z = p.z();
    let w2 = w * w;
    let i = Complex64::i();

    let dt_row = [
        (t * t - rho * rho) / n2,
        4.0 * t * rho * x / n2,
        4.0 * t * rho * y / n2,
    ];
    let dz = [
        -z / w2,
        1.0 / w - z * i * (2.0 * x) / w2,
        i / w - z * i * (2.0 * y) / w2,
    ];
    Ok([
        dt_row,
        [dz[0].re, dz[1].re, dz[2].re],
        [dz[0].im, dz[1].im, dz[2].im],
    ])
}

fn components(t: Complex64, x: Complex64, y: Complex64) -> [Complex64; 3] {
    let rho = x * x + y * y;
    let n = t * t + rho * rho;
    [-t / n, (x * t + y * rho) / n, (y * t - x * rho) / n]
}

/// Differential of `I` by complex-step differentiation.
pub fn differential_complex_step(p: &HeisenbergPoint) -> Result<Jacobian> {
    let p = p.checked()?;
    let base = [p.t, p.x, p.y];
    let scale = wnorm(&p).sqrt().max(f64::MIN_POSITIVE);
    let h = 1e-30 * scale;
    let mut jac = [[0.0; 3]; 3];
    for col in 0..3 {
        let mut q = base.map(|v| Complex64::new(v, 0.0));
        q[col].im = h;
        let out = components(q[0], q[1], q[2]);
        for row in 0..3 {
            jac[row][col] = out[row].im / h;
        }
    }
    Ok(jac)
}

pub fn determinant(j: &Jacobian) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

pub fn jacobian_det(p: &HeisenbergPoint) -> Result<f64> {
    Ok(determinant(&differential(p)?))
}

/// `θ0 = dt + 2x dy - 2y dx` at `p`, as `(dt, dx, dy)` components.
pub fn theta0(p: &HeisenbergPoint) -> [f64; 3] {
    [1.0, -2.0 * p.y, 2.0 * p.x]
}

/// `(I*θ0)_p` as `(dt, dx, dy)` components.
pub fn pullback_theta0(p: &HeisenbergPoint) -> Result<[f64; 3]> {
    let j = differential(p)?;
    let q = invert(p)?;
    let c = theta0(&q);
    Ok(std::array::from_fn(|k| c[0] * j[0][k] + c[1] * j[1][k] + c[2] * j[2][k]))
}

/// `max_k |(I*θ0)_p - |w|⁻² (θ0)_p|_k`.
pub fn pullback_residual(p: &HeisenbergPoint) -> Result<f64> {
    let pulled = pullback_theta0(p)?;
    let scale = wnorm(p).powi(-2);
    let base = theta0(p);
    Ok((0..3)
        .map(|k| (pulled[k] - scale * base[k]).abs())
        .fold(0.0, f64::max))
}

/// [`pullback_residual`] divided by `|w|⁻²`.
pub fn pullback_residual_relative(p: &HeisenbergPoint) -> Result<f64> {
    Ok(pullback_residual(p)? * wnorm(p).powi(2))
}

/// `|w(I(p)) w(p) + 1|`.
pub fn w_product_residual(p: &HeisenbergPoint) -> Result<f64> {
    let q = invert(p)?;
    Ok((q.w() * p.w() + 1.0).norm())
}

/// Random point with `wnorm = r`.
pub fn point_on_wsphere(rng: &mut impl Rng, r: f64) -> HeisenbergPoint {
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let arg: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (t, rho) = (r * phi.cos(), r * phi.sin());
    HeisenbergPoint::from_tz(t, Complex64::from_polar(rho.sqrt(), arg))
}

/// Random point with `log10 |w|` uniform in `[lo, hi]`.
pub fn random_point(rng: &mut impl Rng, log10_lo: f64, log10_hi: f64) -> HeisenbergPoint {
    let r = 10f64.powf(rng.gen_range(log10_lo..=log10_hi));
    point_on_wsphere(rng, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub r: f64,
    pub samples: usize,
    /// `max | |w(I(p))| r - 1 |`.
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Checks that `I` carries `|w| = r` onto `|w| = 1/r`.
pub fn sphere_swap_check(r: f64, n: usize, seed: u64) -> Result<SwapReport> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(FlowError::Config(format!("sphere radius must be positive, got {r}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..n {
        let p = point_on_wsphere(&mut rng, r);
        let q = invert(&p)?;
        max_rel_error = max_rel_error.max((wnorm(&q) * r - 1.0).abs());
    }
    Ok(SwapReport {
        r,
        samples: n,
        max_rel_error,
        passed: max_rel_error <= 1e-12,
    })
}

/// Least-squares slope of `log det dI` against `log |w|` over random points.
pub fn determinant_scaling_slope(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let p = random_point(&mut rng, -1.0, 1.0);
        let det = jacobian_det(&p)?;
        if !(det > 0.0) {
            return Err(FlowError::Config(format!(
                "non-positive jacobian determinant {det} at {p:?}"
            )));
        }
        pts.push((wnorm(&p).ln(), det.ln()));
    }
    let m = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / m, b + y / m));
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Everything the `invert` subcommand reports for one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub point: HeisenbergPoint,
    pub image: HeisenbergPoint,
    pub wnorm_before: f64,
    pub wnorm_after: f64,
    pub pullback_residual: f64,
    pub pullback_residual_relative: f64,
    pub jacobian_det: f64,
    /// Largest entrywise gap between the closed-form and complex-step
    /// differentials, relative to the largest closed-form entry.
    pub complex_step_gap: f64,
}

pub fn inversion_record(p: &HeisenbergPoint) -> Result<InversionRecord> {
    let image = invert(p)?;
    let closed = differential(p)?;
    let cs = differential_complex_step(p)?;
    let big = closed.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let gap = closed
        .iter()
        .flatten()
        .zip(cs.iter().flatten())
        .fold(0.0f64, |a, (c, s)| a.max((c - s).abs()));
    Ok(InversionRecord {
        point: *p,
        image,
        wnorm_before: wnorm(p),
        wnorm_after: wnorm(&image),
        pullback_residual: pullback_residual(p)?,
        pullback_residual_relative: pullback_residual_relative(p)?,
        jacobian_det: determinant(&closed),
        complex_step_gap: gap / big.max(f64::MIN_POSITIVE),
    })
}
