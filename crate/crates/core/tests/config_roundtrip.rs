use proptest::prelude::*;

use webster_flow::cli::config::{Auto, ConventionOverrides, RunConfig, TimeStep};
use webster_flow::flow::Integrator;
use webster_flow::manifold::{GeometrySpec, InitialData};
use webster_flow::operators::FlowSign;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        -1e3..1e3f64,
        Just(0.1),
        Just(1e-300),
    ]
}

fn initial() -> impl Strategy<Value = InitialData> {
    prop_oneof![
        finite().prop_map(|value| InitialData::Constant { value }),
        (any::<u64>(), finite(), 1u32..64).prop_map(|(seed, amplitude, cutoff)| {
            InitialData::SmoothRandom {
                seed,
                amplitude,
                cutoff,
            }
        }),
        (prop::collection::vec(finite(), 1..4), finite(), finite()).prop_map(
            |(center, width, amplitude)| InitialData::Bump {
                center,
                width,
                amplitude
            }
        ),
    ]
}

fn geometry() -> impl Strategy<Value = GeometrySpec> {
    (
        prop_oneof![Just("heisenberg_sector_2d"), Just("sphere_reduced_1d"), Just("lattice")],
        prop::collection::vec(4usize..200, 1..4),
        prop::option::of(prop::collection::vec(finite(), 1..4)),
        prop::option::of(finite()),
        prop::option::of(finite()),
    )
        .prop_map(|(kind, resolution, periods, fiber_length, background_curvature)| GeometrySpec {
            kind: kind.into(),
            resolution,
            periods,
            fiber_length,
            background_curvature,
        })
}

fn config() -> impl Strategy<Value = RunConfig> {
    (
        geometry(),
        initial(),
        prop_oneof![Just(Integrator::Explicit), Just(Integrator::Imex)],
        prop_oneof![finite().prop_map(TimeStep::Fixed), Just(TimeStep::Auto(Auto::Auto))],
        finite(),
        (any::<u64>(), finite(), any::<usize>(), finite(), any::<u64>()),
        prop::option::of(prop_oneof![Just(FlowSign::Descending), Just(FlowSign::Ascending)]),
        prop::option::of(finite()),
    )
        .prop_map(
            |(geometry, initial, integrator, dt, max_time, (max_steps, plateau_tol, plateau_window, converge_tol, snapshot_every), flow_sign, c_stab)| {
                RunConfig {
                    geometry,
                    initial,
                    integrator,
                    dt,
                    max_time,
                    max_steps,
                    plateau_tol,
                    plateau_window,
                    converge_tol,
                    snapshot_every,
                    output_dir: None,
                    conventions: ConventionOverrides {
                        flow_sign,
                        c_stab,
                        ..Default::default()
                    },
                }
            },
        )
}

proptest! {
    #[test]
    fn config_round_trips_bit_exactly(cfg in config()) {
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}

#[test]
fn negative_zero_and_extremes_survive() {
    let mut cfg = RunConfig::new(GeometrySpec::sector(8), InitialData::Constant { value: -0.0 }, f64::MAX);
    cfg.plateau_tol = f64::MIN_POSITIVE;
    cfg.dt = TimeStep::Fixed(5e-324);
    let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    match back.initial {
        InitialData::Constant { value } => assert_eq!(value.to_bits(), (-0.0f64).to_bits()),
        _ => unreachable!(),
    }
    assert_eq!(back, cfg);
}
