//! The invariant suite behind `webster-flow check`.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::{
    self, energy, gradient_check, run, step_explicit, step_imex, FlowSettings, FlowState, Integrator,
    Outcome, RunParameters,
};
use crate::inversion::{
    determinant_scaling_slope, double_invert, inversion_record, jacobian_det, random_point,
    sphere_swap_check, w_product_residual, wnorm,
};
use crate::manifold::{
    build_geometry, initial_data, inner, integrate, lattice_bump, GeometrySpec, InitialData,
    ModelGeometry, ScalarField,
};
use crate::operators::{
    calibrate_sphere_curvature, conformal_sublap, covariance_residual, horiz_derivs, sublap,
    webster_curvature, FlowSign,
};

pub const SUITES: [&str; 4] = ["manifold", "operators", "flow", "inversion"];

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: &'static str,
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    /// Break the symmetry of one stencil tap on the sector used by the
    /// operator suite.
    pub corrupt_stencil: bool,
}

fn result(suite: &'static str, property: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult {
            suite,
            property,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            suite,
            property,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn smooth(g: &Arc<ModelGeometry>, seed: u64, amplitude: f64) -> Result<ScalarField> {
    initial_data(
        g,
        &InitialData::SmoothRandom {
            seed,
            amplitude,
            cutoff: 3,
        },
    )
}

fn rel_gap(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

fn manifold_suite() -> Vec<CheckResult> {
    const S: &str = "manifold";
    let mut out = Vec::new();
    out.push(result(S, "background-volume", (|| {
        let sector = build_geometry(&GeometrySpec::sector(32))?;
        let sphere = build_geometry(&GeometrySpec::sphere(64))?;
        let vs = integrate(&ScalarField::constant(&sector, 1.0))?;
        let vp = integrate(&ScalarField::constant(&sphere, 1.0))?;
        let kappa = sphere.conventions().sphere_total_volume;
        let ok = (vs - 4.0).abs() <= 1e-13 && (vp - kappa).abs() <= 1e-13 * kappa;
        Ok((ok, format!("sector {vs:.15}, sphere {vp:.15}")))
    })()));
    out.push(result(S, "quadrature-linearity", (|| {
        let g = build_geometry(&GeometrySpec::sector(32))?;
        let f = smooth(&g, 1, 1.0)?;
        let h = smooth(&g, 2, 1.0)?;
        let (a, b) = (0.7, -1.3);
        let lhs = integrate(&f.scale(a).axpy(b, &h)?)?;
        let rhs = a * integrate(&f)? + b * integrate(&h)?;
        let scale = integrate(&f.map(f64::abs))? + integrate(&h.map(f64::abs))?;
        let gap = rel_gap(lhs, rhs, scale);
        Ok((gap <= 1e-14, format!("relative gap {gap:.2e}")))
    })()));
    out.push(result(S, "twisted-periodicity", (|| {
        let g = build_geometry(&GeometrySpec::lattice(8))?;
        let center = [0.4, 0.55, 0.1];
        let width = 0.2;
        let f = initial_data(
            &g,
            &InitialData::Bump {
                center: center.to_vec(),
                width,
                amplitude: 1.0,
            },
        )?;
        let nx = g.resolution()[0] as i64;
        let a = g.periods()[0];
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            let (i, j, k) = g.lattice_index(idx);
            let p = g.point(idx);
            let cover = lattice_bump(&g, [p[0] + a, p[1], p[2]], center, width);
            let stored = f.values()[g.reduce_cover_node(i as i64 + nx, j as i64, k as i64)];
            worst = worst.max((cover - stored).abs());
        }
        Ok((worst <= 1e-12, format!("max wrap mismatch {worst:.2e}")))
    })()));
    out.push(result(S, "stencil-commutes-with-wrap", (|| {
        let g = build_geometry(&GeometrySpec::lattice(8))?;
        let center = [0.9, 0.05, 0.2];
        let width = 0.25;
        let f = ScalarField::from_fn(&g, |p| lattice_bump(&g, p, center, width));
        let (xf, yf) = horiz_derivs(&f)?;
        let (dx, dy) = (g.spacing(0), g.spacing(1));
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            let p = g.point(idx);
            let at = |q: [f64; 3]| lattice_bump(&g, q, center, width);
            let ex = (at([p[0] + dx, p[1], p[2] + 2.0 * p[1] * dx])
                - at([p[0] - dx, p[1], p[2] - 2.0 * p[1] * dx]))
                / (2.0 * dx);
            let ey = (at([p[0], p[1] + dy, p[2] - 2.0 * p[0] * dy])
                - at([p[0], p[1] - dy, p[2] + 2.0 * p[0] * dy]))
                / (2.0 * dy);
            worst = worst
                .max((xf.values()[idx] - ex).abs())
                .max((yf.values()[idx] - ey).abs());
        }
        Ok((worst <= 1e-10, format!("max stencil mismatch {worst:.2e}")))
    })()));
    out.push(result(S, "sphere-measure", (|| {
        let g = build_geometry(&GeometrySpec::sphere(64))?;
        let kappa = g.conventions().sphere_total_volume;
        // midpoint rule: ∫ s² ds = 1/3 - h²/12 ... exact for degree ≤ 1
        let lin = integrate(&ScalarField::from_fn(&g, |p| 3.0 * p[0] - 1.0))?;
        let h = g.spacing(0);
        let quad = integrate(&ScalarField::from_fn(&g, |p| p[0] * p[0]))?;
        let quad_exact = kappa * (1.0 / 3.0 - h * h / 12.0);
        let gap = rel_gap(lin, kappa * 0.5, kappa) + rel_gap(quad, quad_exact, kappa);
        Ok((gap <= 1e-13, format!("relative gap {gap:.2e}")))
    })()));
    out
}

fn operators_suite(opts: CheckOptions) -> Vec<CheckResult> {
    const S: &str = "operators";
    let mut out = Vec::new();
    let geometries = || -> Result<Vec<Arc<ModelGeometry>>> {
        let mut sector = build_geometry(&GeometrySpec::sector(32))?;
        if opts.corrupt_stencil {
            sector = sector.with_corrupted_tap(1.5);
        }
        Ok(vec![
            sector,
            build_geometry(&GeometrySpec::lattice(8))?,
            build_geometry(&GeometrySpec::sphere(64))?,
        ])
    };
    out.push(result(S, "self-adjointness", (|| {
        let mut worst: f64 = 0.0;
        for g in geometries()? {
            for seed in 0..3 {
                let f = smooth(&g, 10 + seed, 1.0)?.axpy(0.1, &noise(&g, seed))?;
                let h = smooth(&g, 20 + seed, 1.0)?.axpy(0.1, &noise(&g, 50 + seed))?;
                let a = inner(&sublap(&f)?, &h)?;
                let b = inner(&f, &sublap(&h)?)?;
                worst = worst.max(rel_gap(a, b, a.abs().max(b.abs())));
            }
        }
        Ok((worst <= 1e-12, format!("max relative asymmetry {worst:.2e}")))
    })()));
    out.push(result(S, "weighted-self-adjointness", (|| {
        let mut worst: f64 = 0.0;
        for g in geometries()? {
            let lam = smooth(&g, 30, 0.4)?;
            let e4 = lam.map(|l| (4.0 * l).exp());
            let f = noise(&g, 31);
            let h = noise(&g, 32);
            let lf = conformal_sublap(&lam, &f)?.zip_map(&e4, |a, w| a * w)?;
            let lh = conformal_sublap(&lam, &h)?.zip_map(&e4, |a, w| a * w)?;
            let a = inner(&lf, &h)?;
            let b = inner(&f, &lh)?;
            worst = worst.max(rel_gap(a, b, a.abs().max(b.abs())));
        }
        Ok((worst <= 1e-12, format!("max relative asymmetry {worst:.2e}")))
    })()));
    out.push(result(S, "positivity", (|| {
        let mut least = f64::INFINITY;
        for g in geometries()? {
            for seed in 0..3 {
                let f = noise(&g, 40 + seed);
                least = least.min(inner(&sublap(&f)?, &f)? / inner(&f, &f)?);
            }
        }
        Ok((least >= 0.0, format!("min Rayleigh quotient {least:.3e}")))
    })()));
    out.push(result(S, "constants", (|| {
        let mut ok = true;
        for g in geometries()? {
            let c = ScalarField::constant(&g, 0.37);
            let lam = smooth(&g, 41, 0.5)?;
            ok &= sublap(&c)?.values().iter().all(|&v| v == 0.0);
            ok &= conformal_sublap(&lam, &c)?.values().iter().all(|&v| v == 0.0);
            let w = webster_curvature(&c)?;
            let expected = g.background_curvature() * (-2.0 * 0.37f64).exp();
            ok &= w.values().iter().all(|&v| v == expected);
        }
        Ok((ok, "Δ̂_b 1 = Δ_b^θ 1 = 0, W(c) = e^{-2c} Ŵ".into()))
    })()));
    out.push(result(S, "mean-zero-image", (|| {
        let mut worst: f64 = 0.0;
        for g in geometries()? {
            let lam = smooth(&g, 42, 0.4)?;
            let e4 = lam.map(|l| (4.0 * l).exp());
            let lf = conformal_sublap(&lam, &noise(&g, 43))?.zip_map(&e4, |a, w| a * w)?;
            let mean = integrate(&lf)?;
            let scale = integrate(&lf.map(f64::abs))?;
            worst = worst.max(mean.abs() / scale);
        }
        Ok((worst <= 1e-12, format!("max relative mean {worst:.2e}")))
    })()));
    out.push(result(S, "conformal-covariance", (|| {
        let order = covariance_order()?;
        Ok((
            order.min_slope >= 1.9,
            format!(
                "residuals {:.3e} {:.3e} {:.3e}, slopes {:.3} {:.3}",
                order.residuals[0], order.residuals[1], order.residuals[2], order.slopes[0], order.slopes[1]
            ),
        ))
    })()));
    out.push(result(S, "sphere-calibration", (|| {
        let cal = calibrate_sphere_curvature()?;
        Ok((
            cal.value > 0.0 && cal.rel_std <= 1e-3,
            format!("W_sphere {:.12} (relative std {:.2e})", cal.value, cal.rel_std),
        ))
    })()));
    out
}

/// Deterministic white noise in `[-1, 1]`.
pub fn noise(g: &Arc<ModelGeometry>, seed: u64) -> ScalarField {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    let values = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ScalarField::new(g.clone(), values).expect("length matches")
}

#[derive(Debug, Clone)]
pub struct CovarianceOrder {
    pub resolutions: [usize; 3],
    pub residuals: [f64; 3],
    pub slopes: [f64; 2],
    pub min_slope: f64,
}

/// Covariance residual of the grid CR Yamabe operator against the continuum on
/// the sector at 16, 32 and 64 cells per axis.
pub fn covariance_order() -> Result<CovarianceOrder> {
    let lambda = |p: [f64; 3]| 0.3 * (TAU * p[0]).sin() * (TAU * p[1]).cos() + 0.1 * (TAU * p[1]).sin();
    let phi = |p: [f64; 3]| (TAU * p[0]).cos() + 0.5 * (2.0 * TAU * p[1]).sin();
    let resolutions = [16, 32, 64];
    let mut residuals = [0.0; 3];
    for (r, &n) in residuals.iter_mut().zip(&resolutions) {
        let g = build_geometry(&GeometrySpec::sector(n))?;
        *r = covariance_residual(&g, &lambda, &phi)?;
    }
    let slopes = [
        (residuals[0] / residuals[1]).log2(),
        (residuals[1] / residuals[2]).log2(),
    ];
    Ok(CovarianceOrder {
        resolutions,
        residuals,
        slopes,
        min_slope: slopes[0].min(slopes[1]),
    })
}

fn flow_suite() -> Vec<CheckResult> {
    const S: &str = "flow";
    let mut out = Vec::new();
    let models = || -> Result<Vec<Arc<ModelGeometry>>> {
        Ok(vec![
            build_geometry(&GeometrySpec::sector(16))?,
            build_geometry(&GeometrySpec::sphere(32))?,
        ])
    };
    out.push(result(S, "gradient-identity", (|| {
        let mut worst: f64 = 0.0;
        for g in models()? {
            for seed in 0..3 {
                let lam = smooth(&g, 60 + seed, 0.3)?;
                let phi = smooth(&g, 70 + seed, 1.0)?;
                worst = worst.max(gradient_check(&lam, &phi, 1e-5)?.relative_error);
            }
        }
        Ok((worst <= 1e-6, format!("max relative error {worst:.2e}")))
    })()));
    out.push(result(S, "fixed-points", (|| {
        let mut ok = true;
        let settings = FlowSettings::default();
        for g in models()? {
            let lam = ScalarField::constant(&g, -0.21);
            let state = FlowState::new(lam.clone(), FlowSign::Descending);
            ok &= step_explicit(&state, 1e-7, &settings)?.lambda.values() == lam.values();
            ok &= step_imex(&state, 1e-7, &settings)?.lambda.values() == lam.values();
            if g.kind().is_heisenberg() {
                ok &= energy(&lam)? == 0.0;
            }
        }
        Ok((ok, "constant λ unchanged by both integrators".into()))
    })()));
    out.push(result(S, "scale-invariance", (|| {
        let mut worst: f64 = 0.0;
        for g in models()? {
            let lam = smooth(&g, 80, 0.3)?;
            let e0 = energy(&lam)?;
            let e1 = energy(&lam.map(|l| l + 0.45))?;
            worst = worst.max(rel_gap(e0, e1, e0));
        }
        Ok((worst <= 1e-13, format!("max relative change {worst:.2e}")))
    })()));
    out.push(result(S, "volume-conservation-and-dissipation", (|| {
        let mut drift: f64 = 0.0;
        let mut monotone = true;
        for g in models()? {
            let lam = smooth(&g, 90, 0.05)?;
            let dt = flow::auto_dt_explicit(&lam);
            let mut params = RunParameters::new(Integrator::Explicit, dt, 100.0 * dt);
            params.plateau_window = 0;
            let traj = run(lam, &params)?;
            let v0 = traj.diagnostics[0].volume;
            for w in traj.diagnostics.windows(2) {
                monotone &= w[1].energy <= w[0].energy * (1.0 + 1e-10);
                drift = drift.max(((w[1].volume - v0) / v0).abs());
            }
        }
        Ok((
            drift <= 1e-6 && monotone,
            format!("max volume drift {drift:.2e}, energy monotone: {monotone}"),
        ))
    })()));
    out.push(result(S, "sector-closure", (|| {
        let gap = sector_closure_gap(8, 10)?;
        Ok((gap <= 1e-12, format!("max field gap {gap:.2e} over 10 steps")))
    })()));
    out.push(result(S, "blowup-taxonomy", (|| {
        let g = build_geometry(&GeometrySpec::sector(16))?;
        let lam = smooth(&g, 91, 0.05)?;
        let dt = flow::auto_dt_explicit(&lam);
        let mut params = RunParameters::new(Integrator::Explicit, dt, 1e6 * dt);
        params.plateau_window = 0;
        params.settings.sign = FlowSign::Ascending;
        let traj = run(lam, &params)?;
        let ok = traj.outcome == Outcome::Blowup && traj.blowup.is_some();
        Ok((ok, format!("ascending probe: {} after {} steps", traj.outcome.label(), traj.final_state.step_index)))
    })()));
    out
}

/// Evolves the same t-independent data on the lattice and on the sector and
/// returns the largest cellwise difference over `steps` RK4 steps.
pub fn sector_closure_gap(n: usize, steps: usize) -> Result<f64> {
    let lattice = build_geometry(&GeometrySpec::lattice(n))?;
    let sector = build_geometry(&GeometrySpec::sector(n))?;
    let profile = |p: [f64; 3]| {
        0.08 * (TAU * p[0]).sin() * (TAU * p[1]).cos() + 0.05 * (2.0 * TAU * p[1] + 0.3).sin()
    };
    let settings = FlowSettings::default();
    let mut s3 = FlowState::new(ScalarField::from_fn(&lattice, profile), FlowSign::Descending);
    let mut s2 = FlowState::new(ScalarField::from_fn(&sector, profile), FlowSign::Descending);
    let dt = flow::auto_dt_explicit(&s2.lambda);
    let plane = n * n;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        s3 = step_explicit(&s3, dt, &settings)?;
        s2 = step_explicit(&s2, dt, &settings)?;
        for (idx, v) in s3.lambda.values().iter().enumerate() {
            worst = worst.max((v - s2.lambda.values()[idx % plane]).abs());
        }
    }
    Ok(worst)
}

fn inversion_suite() -> Vec<CheckResult> {
    const S: &str = "inversion";
    let mut out = Vec::new();
    let sample = |seed: u64, lo: f64, hi: f64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| random_point(&mut rng, lo, hi)).collect::<Vec<_>>()
    };
    out.push(result(S, "pullback", (|| {
        let mut worst: f64 = 0.0;
        for p in sample(1, -1.0, 1.0, 100) {
            worst = worst.max(inversion_record(&p)?.pullback_residual_relative);
        }
        Ok((worst <= 1e-10, format!("max relative residual {worst:.2e}")))
    })()));
    out.push(result(S, "w-product", (|| {
        let mut worst: f64 = 0.0;
        for p in sample(2, -3.0, 3.0, 200) {
            worst = worst.max(w_product_residual(&p)?);
        }
        Ok((worst <= 1e-12, format!("max |w(I(p)) w(p) + 1| {worst:.2e}")))
    })()));
    out.push(result(S, "double-inversion", (|| {
        let mut worst: f64 = 0.0;
        for p in sample(3, -3.0, 3.0, 200) {
            let q = double_invert(&p)?;
            let scale = wnorm(&p).sqrt().max(wnorm(&p));
            let gap = (q.t - p.t).abs().max((q.x + p.x).abs()).max((q.y + p.y).abs()) / scale;
            worst = worst.max(gap);
        }
        Ok((worst <= 1e-12, format!("max relative gap to (t, -z) {worst:.2e}")))
    })()));
    out.push(result(S, "orientation", (|| {
        let mut least = f64::INFINITY;
        for p in sample(4, -1.0, 1.0, 100) {
            least = least.min(jacobian_det(&p)? * wnorm(&p).powi(4));
        }
        let slope = determinant_scaling_slope(100, 5)?;
        Ok((
            least > 0.0 && (slope + 4.0).abs() <= 0.01,
            format!("min det·|w|⁴ {least:.6}, log-log slope {slope:.6}"),
        ))
    })()));
    out.push(result(S, "sphere-swap", (|| {
        let mut ok = true;
        let mut worst: f64 = 0.0;
        for r in [2.0, 0.5, 1.0, 10.0] {
            let rep = sphere_swap_check(r, 100, 6)?;
            ok &= rep.passed;
            worst = worst.max(rep.max_rel_error);
        }
        Ok((ok, format!("max relative radius error {worst:.2e}")))
    })()));
    out
}

/// Runs the selected suites (all when `only` is empty).
pub fn run_checks(only: &[String], opts: CheckOptions) -> Vec<CheckResult> {
    let wanted = |name: &str| only.is_empty() || only.iter().any(|o| o == name);
    let mut out = Vec::new();
    if wanted("manifold") {
        out.extend(manifold_suite());
    }
    if wanted("operators") {
        out.extend(operators_suite(opts));
    }
    if wanted("flow") {
        out.extend(flow_suite());
    }
    if wanted("inversion") {
        out.extend(inversion_suite());
    }
    out
}

pub fn render_table(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.property.len()).max().unwrap_or(8).max(8);
    let mut s = format!("{:<10} {:<w$} {:<4}  detail\n", "suite", "property", "");
    for r in results {
        s.push_str(&format!(
            "{:<10} {:<w$} {:<4}  {}\n",
            r.suite,
            r.property,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    s
}
