use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{RunConfig, OUTPUT_ROOT_ENV};
use crate::error::{FlowError, Result};
use crate::flow::{run, BlowupReport, Diagnostics, Outcome, Trajectory};
use crate::inversion::{inversion_record, HeisenbergPoint, InversionRecord};
use crate::manifold::ModelGeometry;
use crate::operators::{calibrate_with, u_star, Calibration, CalibrationSettings, ConventionLedger};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;

pub const DIAGNOSTICS_HEADER: &str = "step,time,volume,energy,bondi,w_min,w_max,dissipation";

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn diagnostics_csv(rows: &[Diagnostics]) -> String {
    let mut out = String::with_capacity(rows.len() * 160);
    out.push_str(DIAGNOSTICS_HEADER);
    out.push('\n');
    for d in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.step,
            fmt_f64(d.time),
            fmt_f64(d.volume),
            fmt_f64(d.energy),
            fmt_f64(d.bondi),
            fmt_f64(d.w_min),
            fmt_f64(d.w_max),
            fmt_f64(d.dissipation),
        );
    }
    out
}

pub fn argmax_csv(traj: &Trajectory, g: &ModelGeometry) -> String {
    let mut out = String::from("step,cell,max_abs_lambda,coord0,coord1,coord2\n");
    for (step, cell, value) in traj.argmax_trace() {
        let p = g.point(cell);
        let _ = writeln!(
            out,
            "{step},{cell},{},{},{},{}",
            fmt_f64(value),
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(p[2])
        );
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| FlowError::io(path, e))
}

/// Write-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp, contents)?;
    fs::rename(&tmp, path).map_err(|e| FlowError::io(path, e))
}

#[derive(Serialize)]
struct ConventionSnapshot<'a> {
    ledger: &'a ConventionLedger,
    geometry_kind: &'static str,
    background_curvature: f64,
    cell_volume_weight: f64,
    t_wrap_shift: i64,
}

#[derive(Serialize)]
struct Meta<'a> {
    config: &'a RunConfig,
    conventions: ConventionSnapshot<'a>,
    outcome: &'static str,
    steps: u64,
    final_time: f64,
    dt: f64,
    bondi_rate_sup: f64,
    blowup: Option<BlowupReport>,
    last: &'a Diagnostics,
    wall_time_seconds: f64,
}

#[derive(Serialize)]
struct SnapshotSidecar<'a> {
    shape: &'a [usize],
    dtype: &'static str,
    geometry: &'static str,
    step: u64,
    time: f64,
}

pub struct RunSummary {
    pub outcome: Outcome,
    pub out_dir: PathBuf,
    pub steps: u64,
}

/// Runs a config and writes every artifact into `out_dir`.
pub fn execute_run(config: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    let resolved = config.resolve()?;
    fs::create_dir_all(out_dir).map_err(|e| FlowError::io(out_dir, e))?;
    write(&out_dir.join("resolved_config.json"), resolved.config.to_json()?)?;

    let g = resolved.geometry.clone();
    let conventions = ConventionSnapshot {
        ledger: g.conventions(),
        geometry_kind: g.kind().name(),
        background_curvature: g.background_curvature(),
        cell_volume_weight: g.cell_volume_weight(),
        t_wrap_shift: g.t_wrap_shift(),
    };
    write(
        &out_dir.join("conventions.json"),
        serde_json::to_string_pretty(&conventions)?,
    )?;

    let start = Instant::now();
    let traj = run(resolved.initial, &resolved.params)?;
    let wall = start.elapsed().as_secs_f64();

    write(&out_dir.join("diagnostics.csv"), diagnostics_csv(&traj.diagnostics))?;
    write(&out_dir.join("argmax_trace.csv"), argmax_csv(&traj, &g))?;

    if !traj.snapshots.is_empty() {
        let dir = out_dir.join("snapshots");
        fs::create_dir_all(&dir).map_err(|e| FlowError::io(&dir, e))?;
        for snap in &traj.snapshots {
            let stem = format!("step_{:010}", snap.step);
            let bytes: Vec<u8> = snap.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            write(&dir.join(format!("{stem}.f64")), bytes)?;
            let side = SnapshotSidecar {
                shape: g.resolution(),
                dtype: "float64-le",
                geometry: g.kind().name(),
                step: snap.step,
                time: snap.time,
            };
            write(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        }
    }

    let last = traj.diagnostics.last().expect("initial diagnostics");
    let meta = Meta {
        config: &resolved.config,
        conventions,
        outcome: traj.outcome.label(),
        steps: traj.final_state.step_index,
        final_time: traj.final_state.time,
        dt: resolved.params.dt,
        bondi_rate_sup: traj.bondi_rate_sup,
        blowup: traj.blowup,
        last,
        wall_time_seconds: wall,
    };
    write(&out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(RunSummary {
        outcome: traj.outcome,
        out_dir: out_dir.to_path_buf(),
        steps: traj.final_state.step_index,
    })
}

pub fn exit_code_for(outcome: Outcome) -> i32 {
    match outcome {
        Outcome::Blowup => EXIT_BLOWUP,
        _ => EXIT_OK,
    }
}

pub fn cmd_run(config_path: &Path, out: Option<&Path>) -> i32 {
    let config = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let dir = super::config::output_dir(out, &config, config_path);
    match execute_run(&config, &dir) {
        Ok(s) => {
            println!(
                "outcome: {} after {} steps ({})",
                s.outcome.label(),
                s.steps,
                s.out_dir.display()
            );
            exit_code_for(s.outcome)
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

pub fn default_cache_path() -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    root.join("conventions_cache.json")
}

#[derive(Serialize)]
struct CacheFile<'a> {
    ledger: ConventionLedger,
    sphere_background_curvature: f64,
    calibration: &'a Calibration,
    settings: &'a CalibrationSettings,
}

/// Calibrates with the factor `(t² + (1 + |z|²)²)^exponent`; `-1/2` is `u_*`.
pub fn calibrate(exponent: f64) -> Result<Calibration> {
    let settings = CalibrationSettings::default();
    if exponent == -0.5 {
        calibrate_with(&u_star, &settings)
    } else {
        let u = move |p: [f64; 3]| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            (p[2] * p[2] + (1.0 + r2) * (1.0 + r2)).powf(exponent)
        };
        calibrate_with(&u, &settings)
    }
}

pub fn cmd_calibrate(cache: Option<&Path>, exponent: f64) -> i32 {
    let cal = match calibrate(exponent) {
        Ok(c) => c,
        Err(e @ FlowError::NotConstant { .. }) => {
            eprintln!("calibration failed: {e}");
            return EXIT_INVARIANT;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let settings = CalibrationSettings::default();
    let body = CacheFile {
        ledger: ConventionLedger::default(),
        sphere_background_curvature: cal.value,
        calibration: &cal,
        settings: &settings,
    };
    let path = cache.map(Path::to_path_buf).unwrap_or_else(default_cache_path);
    let text = match serde_json::to_string_pretty(&body) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    if let Err(e) = write_atomic(&path, &text) {
        eprintln!("error: {e}");
        return EXIT_FAILURE;
    }
    println!("W_sphere = {}", fmt_f64(cal.value));
    println!("relative std = {:.3e} over {} points", cal.rel_std, cal.samples);
    println!("refinement change = {:.3e}", cal.refinement_change);
    println!("cache: {}", path.display());
    EXIT_OK
}

pub fn invert_json(t: f64, x: f64, y: f64) -> Result<(InversionRecord, String)> {
    let rec = inversion_record(&HeisenbergPoint::new(t, x, y))?;
    let text = serde_json::to_string_pretty(&rec)?;
    Ok((rec, text))
}

pub fn cmd_invert(t: f64, x: f64, y: f64) -> i32 {
    match invert_json(t, x, y) {
        Ok((_, text)) => {
            println!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
