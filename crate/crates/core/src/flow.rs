//! Energy, volume and Bondi functionals, the gradient flow of the energy, and
//! time integration.
//!
//! For `θ = e^{2λ} θ̂` with `u = e^λ` the discrete energy is
//! `e(λ) = Σ m W² u⁴` with `W = u⁻³ (b Δ̂_b u + Ŵ u)`. Its gradient in the
//! `u⁴`-weighted inner product is exactly `2b Δ_b^θ W` for the divergence
//! form assembly in [`crate::operators`], so the descending flow is
//! `∂t λ = -2b Δ_b^θ W`. Every right-hand side has zero `u⁴`-weighted mean,
//! which makes the volume `Σ m u⁴` a conserved quantity of the semi-discrete
//! system.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::manifold::{neumaier_sum, ModelGeometry, ScalarField};
use crate::operators::{
    conformal_sublap_raw, exp_scaled, linear_solve, spectral_bound, sublap, webster_raw, FlowSign,
};

/// Absolute stability limit of classical RK4 on the negative real axis.
pub const RK4_STABILITY_LIMIT: f64 = 2.785;

/// Cellwise quantities of one right-hand-side evaluation.
struct Evaluation {
    u4: Vec<f64>,
    w: Vec<f64>,
    /// `2b Δ_b^θ W`, the energy gradient.
    grad: Vec<f64>,
}

fn evaluate(g: &ModelGeometry, lambda: &[f64]) -> Result<Evaluation> {
    let u = exp_scaled(lambda, 1.0)?;
    let u4 = exp_scaled(lambda, 4.0)?;
    let w = webster_raw(g, lambda, &u)?;
    let factor = g.conventions().gradient_factor();
    let mut grad = conformal_sublap_raw(g, &u, &u4, &w);
    grad.iter_mut().for_each(|v| *v *= factor);
    if let Some(cell) = grad.iter().chain(&w).position(|v| !v.is_finite()) {
        let cell = cell % lambda.len();
        return Err(FlowError::BlowUp {
            cell,
            lambda: lambda[cell],
        });
    }
    Ok(Evaluation { u4, w, grad })
}

fn weighted_sum(g: &ModelGeometry, terms: impl IntoIterator<Item = f64>) -> f64 {
    let m = g.cell_mass();
    neumaier_sum(terms.into_iter().map(|v| v * m))
}

/// `e_J(θ) = ∫ W² θ∧dθ`.
pub fn energy(lambda: &ScalarField) -> Result<f64> {
    let g = lambda.geometry();
    let u = exp_scaled(lambda.values(), 1.0)?;
    let u4 = exp_scaled(lambda.values(), 4.0)?;
    let w = webster_raw(g, lambda.values(), &u)?;
    Ok(weighted_sum(g, w.iter().zip(&u4).map(|(w, v)| w * w * v)))
}

/// `∫ e^{4λ} θ̂∧dθ̂`.
pub fn volume(lambda: &ScalarField) -> Result<f64> {
    let u4 = exp_scaled(lambda.values(), 4.0)?;
    Ok(weighted_sum(lambda.geometry(), u4))
}

/// Bondi-type monitor `∫ e^{5λ} θ̂∧dθ̂`.
pub fn bondi(lambda: &ScalarField) -> Result<f64> {
    let u5 = exp_scaled(lambda.values(), 5.0)?;
    Ok(weighted_sum(lambda.geometry(), u5))
}

/// Descending right-hand side `-2b Δ_b^θ W`.
pub fn flow_rhs(lambda: &ScalarField) -> Result<ScalarField> {
    flow_rhs_signed(lambda, FlowSign::Descending)
}

pub fn flow_rhs_signed(lambda: &ScalarField, sign: FlowSign) -> Result<ScalarField> {
    let g = lambda.geometry();
    let eval = evaluate(g, lambda.values())?;
    let s = sign.factor();
    ScalarField::new(g.clone(), eval.grad.iter().map(|v| s * v).collect())
}

/// `⟨f, h⟩_θ = ∫ f h e^{4λ} θ̂∧dθ̂`.
pub fn weighted_inner(lambda: &ScalarField, f: &ScalarField, h: &ScalarField) -> Result<f64> {
    lambda.ensure_same_geometry(f)?;
    lambda.ensure_same_geometry(h)?;
    let u4 = exp_scaled(lambda.values(), 4.0)?;
    Ok(weighted_sum(
        lambda.geometry(),
        f.values()
            .iter()
            .zip(h.values())
            .zip(&u4)
            .map(|((a, b), w)| a * b * w),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// `⟨-rhs, φ⟩_θ`.
    pub directional: f64,
    /// `(e(λ + hφ) - e(λ - hφ)) / 2h`.
    pub finite_difference: f64,
    pub relative_error: f64,
}

/// Compares the flow direction with a central difference of the energy.
pub fn gradient_check(lambda: &ScalarField, phi: &ScalarField, h: f64) -> Result<GradientCheck> {
    lambda.ensure_same_geometry(phi)?;
    let rhs = flow_rhs(lambda)?;
    let directional = -weighted_inner(lambda, &rhs, phi)?;
    let plus = energy(&lambda.axpy(h, phi)?)?;
    let minus = energy(&lambda.axpy(-h, phi)?)?;
    let finite_difference = (plus - minus) / (2.0 * h);
    let relative_error =
        (directional - finite_difference).abs() / finite_difference.abs().max(f64::MIN_POSITIVE);
    Ok(GradientCheck {
        directional,
        finite_difference,
        relative_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub step: u64,
    pub time: f64,
    pub volume: f64,
    pub energy: f64,
    pub bondi: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// `de/dt = ⟨grad e, rhs⟩_θ` of the semi-discrete system.
    pub dissipation: f64,
    /// `‖grad e‖_θ / sqrt(volume)`.
    pub gradient_norm: f64,
    pub max_abs_lambda: f64,
    pub argmax: usize,
    pub overflow_flag: bool,
}

/// Diagnostics of a state; a non-finite or overflowing state yields a row
/// with `overflow_flag` set instead of an error.
pub fn diagnose(lambda: &ScalarField, step: u64, time: f64, sign: FlowSign) -> Diagnostics {
    let g = lambda.geometry();
    let (argmax, max_abs_lambda) = lambda.max_abs();
    let computed = (|| -> Result<Diagnostics> {
        let eval = evaluate(g, lambda.values())?;
        let u5 = exp_scaled(lambda.values(), 5.0)?;
        let volume = weighted_sum(g, eval.u4.iter().copied());
        let energy = weighted_sum(g, eval.w.iter().zip(&eval.u4).map(|(w, v)| w * w * v));
        let bondi = weighted_sum(g, u5);
        let grad_sq = weighted_sum(g, eval.grad.iter().zip(&eval.u4).map(|(d, v)| d * d * v));
        let (w_min, w_max) = eval
            .w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Diagnostics {
            step,
            time,
            volume,
            energy,
            bondi,
            w_min,
            w_max,
            dissipation: sign.factor() * grad_sq,
            gradient_norm: (grad_sq / volume).sqrt(),
            max_abs_lambda,
            argmax,
            overflow_flag: false,
        })
    })();
    computed.unwrap_or(Diagnostics {
        step,
        time,
        volume: f64::NAN,
        energy: f64::NAN,
        bondi: f64::NAN,
        w_min: f64::NAN,
        w_max: f64::NAN,
        dissipation: f64::NAN,
        gradient_norm: f64::NAN,
        max_abs_lambda,
        argmax,
        overflow_flag: true,
    })
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub lambda: ScalarField,
    pub time: f64,
    pub step_index: u64,
    pub dt: f64,
    pub diagnostics: Diagnostics,
}

impl FlowState {
    pub fn new(lambda: ScalarField, sign: FlowSign) -> Self {
        let diagnostics = diagnose(&lambda, 0, 0.0, sign);
        FlowState {
            lambda,
            time: 0.0,
            step_index: 0,
            dt: 0.0,
            diagnostics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSettings {
    pub sign: FlowSign,
    /// `max |λ|` above which a state counts as blown up.
    pub blowup_threshold: f64,
    /// Stabilization constant of the IMEX splitting.
    pub c_stab: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            sign: FlowSign::Descending,
            blowup_threshold: 20.0,
            c_stab: 32.0,
            cg_tol: 1e-10,
            cg_max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupReport {
    pub cell: usize,
    pub lambda: f64,
}

/// `Some` iff the field has a non-finite entry or `max |λ| > threshold`;
/// the report locates the offending cell.
pub fn detect_blowup(lambda: &ScalarField, threshold: f64) -> Option<BlowupReport> {
    if let Some((cell, value)) = lambda.first_non_finite() {
        return Some(BlowupReport {
            cell,
            lambda: value,
        });
    }
    let (cell, value) = lambda.max_abs();
    (value > threshold).then(|| BlowupReport {
        cell,
        lambda: lambda.values()[cell],
    })
}

fn rhs_values(g: &ModelGeometry, lambda: &[f64], sign: FlowSign) -> Result<Vec<f64>> {
    let s = sign.factor();
    Ok(evaluate(g, lambda)?.grad.into_iter().map(|v| s * v).collect())
}

fn finish_step(
    state: &FlowState,
    lambda: Vec<f64>,
    dt: f64,
    settings: &FlowSettings,
) -> Result<FlowState> {
    let lambda = ScalarField::new(state.lambda.geometry().clone(), lambda)?;
    if let Some(b) = detect_blowup(&lambda, settings.blowup_threshold) {
        return Err(FlowError::BlowUp {
            cell: b.cell,
            lambda: b.lambda,
        });
    }
    let step_index = state.step_index + 1;
    let time = state.time + dt;
    let diagnostics = diagnose(&lambda, step_index, time, settings.sign);
    if diagnostics.overflow_flag {
        return Err(FlowError::BlowUp {
            cell: diagnostics.argmax,
            lambda: lambda.values()[diagnostics.argmax],
        });
    }
    Ok(FlowState {
        lambda,
        time,
        step_index,
        dt,
        diagnostics,
    })
}

/// One classical RK4 step of the semi-discrete flow.
pub fn step_explicit(state: &FlowState, dt: f64, settings: &FlowSettings) -> Result<FlowState> {
    check_dt(dt)?;
    let g = state.lambda.geometry();
    let l0 = state.lambda.values();
    let stage = |k: &[f64], a: f64| -> Vec<f64> { l0.iter().zip(k).map(|(l, k)| l + a * k).collect() };
    let k1 = rhs_values(g, l0, settings.sign)?;
    let k2 = rhs_values(g, &stage(&k1, 0.5 * dt), settings.sign)?;
    let k3 = rhs_values(g, &stage(&k2, 0.5 * dt), settings.sign)?;
    let k4 = rhs_values(g, &stage(&k3, dt), settings.sign)?;
    let next = (0..l0.len())
        .map(|i| l0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    finish_step(state, next, dt, settings)
}

/// Linearly stabilized semi-implicit step:
/// `(I + dt c Δ̂²) λ' = λ + dt (rhs(λ) + c Δ̂² λ)`.
pub fn step_imex(state: &FlowState, dt: f64, settings: &FlowSettings) -> Result<FlowState> {
    check_dt(dt)?;
    if !(settings.c_stab > 0.0) {
        return Err(FlowError::Config("c_stab must be positive".into()));
    }
    let lambda = &state.lambda;
    let g = lambda.geometry();
    let c = settings.c_stab;
    let rhs = ScalarField::new(g.clone(), rhs_values(g, lambda.values(), settings.sign)?)?;
    let bilap = sublap(&sublap(lambda)?)?;
    let b = lambda.axpy(dt, &rhs.axpy(c, &bilap)?)?;
    let op = |f: &ScalarField| f.axpy(dt * c, &sublap(&sublap(f)?)?);
    let solved = linear_solve(&op, &b, settings.cg_tol, settings.cg_max_iter)?;
    finish_step(state, solved.solution.into_values(), dt, settings)
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(FlowError::Config(format!("dt must be positive and finite, got {dt}")))
    }
}

/// Largest linearized decay rate of the flow at `λ`:
/// `2b² σ_max² e^{-4 min λ}` with `σ_max` bounding the spectrum of `Δ̂_b`.
pub fn stiffness(lambda: &ScalarField) -> f64 {
    let g = lambda.geometry();
    let b = g.conventions().yamabe_coefficient;
    let sigma = spectral_bound(g);
    let (lo, _) = lambda.min_max();
    2.0 * b * b * sigma * sigma * (-4.0 * lo).exp()
}

/// Default explicit step: `0.2 / stiffness`.
pub fn auto_dt_explicit(lambda: &ScalarField) -> f64 {
    0.2 / stiffness(lambda)
}

/// Default IMEX step: ten times the RK4 stability limit.
pub fn auto_dt_imex(lambda: &ScalarField) -> f64 {
    10.0 * RK4_STABILITY_LIMIT / stiffness(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Explicit,
    Imex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Converged,
    Plateau,
    Blowup,
    MaxTime,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Converged => "converged",
            Outcome::Plateau => "plateau",
            Outcome::Blowup => "blowup",
            Outcome::MaxTime => "max_time",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParameters {
    pub integrator: Integrator,
    pub dt: f64,
    pub max_time: f64,
    pub max_steps: u64,
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub converge_tol: f64,
    /// Keep a copy of `λ` every this many steps (0: never).
    pub snapshot_every: u64,
    pub settings: FlowSettings,
}

impl RunParameters {
    pub fn new(integrator: Integrator, dt: f64, max_time: f64) -> Self {
        RunParameters {
            integrator,
            dt,
            max_time,
            max_steps: 10_000_000,
            plateau_tol: 1e-10,
            plateau_window: 50,
            converge_tol: 1e-8,
            snapshot_every: 0,
            settings: FlowSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: u64,
    pub time: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub outcome: Outcome,
    /// One record per accepted state, starting with the initial one. A
    /// blown-up run ends with a row flagged `overflow_flag`.
    pub diagnostics: Vec<Diagnostics>,
    pub final_state: FlowState,
    pub snapshots: Vec<Snapshot>,
    /// Supremum over the run of the discrete time derivative of `bondi`.
    pub bondi_rate_sup: f64,
    pub blowup: Option<BlowupReport>,
}

impl Trajectory {
    /// `(step, argmax cell, max |λ|)` per recorded state.
    pub fn argmax_trace(&self) -> Vec<(u64, usize, f64)> {
        self.diagnostics
            .iter()
            .map(|d| (d.step, d.argmax, d.max_abs_lambda))
            .collect()
    }
}

fn decide(diags: &[Diagnostics], params: &RunParameters, rhs_is_zero: bool) -> Option<Outcome> {
    let last = diags.last().expect("at least the initial state");
    if rhs_is_zero {
        return Some(Outcome::Plateau);
    }
    let w = params.plateau_window;
    if w > 0 && diags.len() > w {
        let then = diags[diags.len() - 1 - w].energy;
        if (last.energy - then).abs() <= params.plateau_tol * then.abs() {
            return Some(Outcome::Plateau);
        }
    }
    if last.gradient_norm <= params.converge_tol {
        return Some(Outcome::Converged);
    }
    if last.time >= params.max_time || last.step >= params.max_steps {
        return Some(Outcome::MaxTime);
    }
    None
}

/// Integrates from `initial` until max time, plateau, convergence or
/// blow-up. Blow-up is a labeled outcome, not an error.
pub fn run(initial: ScalarField, params: &RunParameters) -> Result<Trajectory> {
    check_dt(params.dt)?;
    if !(params.max_time > 0.0) {
        return Err(FlowError::Config("max_time must be positive".into()));
    }
    initial.ensure_finite()?;
    let sign = params.settings.sign;
    let mut state = FlowState::new(initial, sign);
    let mut diagnostics = vec![state.diagnostics.clone()];
    let mut snapshots = Vec::new();
    let snapshot = |s: &FlowState, out: &mut Vec<Snapshot>| {
        if params.snapshot_every > 0 && s.step_index % params.snapshot_every == 0 {
            out.push(Snapshot {
                step: s.step_index,
                time: s.time,
                values: s.lambda.values().to_vec(),
            });
        }
    };
    snapshot(&state, &mut snapshots);
    let mut blowup = None;

    let outcome = if let Some(b) = detect_blowup(&state.lambda, params.settings.blowup_threshold)
        .or_else(|| {
            state.diagnostics.overflow_flag.then(|| BlowupReport {
                cell: state.diagnostics.argmax,
                lambda: state.lambda.values()[state.diagnostics.argmax],
            })
        }) {
        blowup = Some(b);
        Outcome::Blowup
    } else {
        loop {
            let rhs_zero = state.diagnostics.dissipation == 0.0;
            if let Some(o) = decide(&diagnostics, params, rhs_zero) {
                break o;
            }
            let dt = params.dt.min(params.max_time - state.time);
            let next = match params.integrator {
                Integrator::Explicit => step_explicit(&state, dt, &params.settings),
                Integrator::Imex => step_imex(&state, dt, &params.settings),
            };
            match next {
                Ok(s) => {
                    state = s;
                    diagnostics.push(state.diagnostics.clone());
                    snapshot(&state, &mut snapshots);
                }
                Err(FlowError::BlowUp { cell, lambda }) => {
                    let mut row = diagnose(&state.lambda, state.step_index + 1, state.time + dt, sign);
                    row.overflow_flag = true;
                    row.argmax = cell;
                    row.max_abs_lambda = lambda.abs();
                    diagnostics.push(row);
                    blowup = Some(BlowupReport { cell, lambda });
                    break Outcome::Blowup;
                }
                Err(e) => return Err(e),
            }
        }
    };

    let bondi_rate_sup = diagnostics
        .windows(2)
        .filter(|w| !w[1].overflow_flag)
        .map(|w| (w[1].bondi - w[0].bondi) / (w[1].time - w[0].time))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Trajectory {
        outcome,
        diagnostics,
        final_state: state,
        snapshots,
        bondi_rate_sup,
        blowup,
    })
}

/// Convenience wrapper building the initial state on `geometry`.
pub fn run_from(
    geometry: &Arc<ModelGeometry>,
    initial: Vec<f64>,
    params: &RunParameters,
) -> Result<Trajectory> {
    run(ScalarField::new(geometry.clone(), initial)?, params)
}
