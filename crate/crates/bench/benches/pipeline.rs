//! Throughput of the main pipeline stages on a 128x128 sensor.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use p2m_core::aer::{encode_window, AerGeometry};
use p2m_core::array::{build_array, run_stream, AreaBudget, KernelSpec, SimMode};
use p2m_core::device::{fit_response_poly, sample_device_grid, CalibrationPlan, DeviceParams};
use p2m_core::events::{synth_events, window_events};

fn pipeline(c: &mut Criterion) {
    let stream = synth_events(128, 128, 5000, 2.0, 1).unwrap();
    let spec = KernelSpec::random(3, 2, 32, 0.45, 1).unwrap();
    let array = build_array(128, 128, spec, &AreaBudget::default()).unwrap();
    let device = DeviceParams::default();
    let plan = CalibrationPlan::uniform(20, 14, 50);
    let model =
        fit_response_poly(&sample_device_grid(&device, &plan.weights, &plan.counts, plan.trials, 1).unwrap()).unwrap();

    c.bench_function("synth_events 128x128 5ms", |b| {
        b.iter(|| synth_events(128, 128, 5000, 2.0, black_box(1)).unwrap())
    });
    c.bench_function("window_events 1ms", |b| {
        b.iter(|| window_events(black_box(&stream), 1000).unwrap())
    });

    let transient = SimMode::Transient {
        params: device,
        variation: true,
    };
    let fitted = SimMode::Fitted { model, variation: true };
    let mut group = c.benchmark_group("run_stream");
    group.sample_size(10);
    group.bench_function("transient", |b| {
        b.iter(|| run_stream(&array, black_box(&stream), &transient, 1000, 0).unwrap())
    });
    group.bench_function("fitted", |b| {
        b.iter(|| run_stream(&array, black_box(&stream), &fitted, 1000, 0).unwrap())
    });
    group.finish();

    let out = run_stream(&array, &stream, &fitted, 1000, 0).unwrap();
    let g = AerGeometry::new(array.out_width, array.out_height, 32, 128, 128);
    c.bench_function("encode_window", |b| {
        b.iter(|| encode_window(black_box(&out.maps[0]), &g).unwrap())
    });

    let mut group = c.benchmark_group("calibration");
    group.sample_size(10);
    group.bench_function("grid 41x15x50 + fit", |b| {
        b.iter(|| {
            let grid = sample_device_grid(&device, &plan.weights, &plan.counts, plan.trials, black_box(2)).unwrap();
            fit_response_poly(&grid).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
