//! Brute-force reference for the ideal-device limit: a windowed linear
//! convolution of event counts followed by a threshold.
//!
//! [`ideal_conv_threshold`] deliberately shares no code with the array
//! pipeline; [`equivalence_report`] cross-checks the two on random
//! instances chosen so that no sum lands on a rail or a threshold.

use std::ops::Range;

use rand::Rng;

use crate::array::{build_array, run_stream, ActivationMap, AreaBudget, KernelSpec, SimMode};
use crate::device::{fit_response_poly, sample_device_grid, CalibrationPlan, DeviceParams, ResponseModel};
use crate::error::{Error, Result};
use crate::events::{CountGrid, DvsEvent, EventStream, Polarity};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub k: usize,
    pub stride: usize,
    pub channels: usize,
    /// Same layout as [`KernelSpec::weights`].
    pub weights: Vec<f64>,
    /// Volts per unit weight per event.
    pub step: f64,
    pub asym: f64,
    pub vdd: f64,
    pub v_reset: f64,
    pub v_th: f64,
}

/// Spike map of `v_reset + Σ w·n·step·(asym if w < 0)`, clamped to the
/// rails and compared strictly against `v_th`.
pub fn ideal_conv_threshold(counts: &CountGrid, cfg: &OracleConfig) -> Result<ActivationMap> {
    let (k, s, nc) = (cfg.k, cfg.stride, cfg.channels);
    if k == 0 || s == 0 || nc == 0 || cfg.weights.len() != nc * k * k * 2 {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for k={k}, channels={nc}",
            cfg.weights.len()
        )));
    }
    if counts.width < k || counts.height < k {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} counts smaller than kernel {k}",
            counts.width, counts.height
        )));
    }
    let out_w = (counts.width - k) / s + 1;
    let out_h = (counts.height - k) / s + 1;
    let mut map = ActivationMap::zeros(out_w, out_h, nc, 0);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for c in 0..nc {
                let mut v = cfg.v_reset;
                for ky in 0..k {
                    for kx in 0..k {
                        for (p, pol) in [Polarity::On, Polarity::Off].into_iter().enumerate() {
                            let w = cfg.weights[c * k * k * 2 + ky * k * 2 + kx * 2 + p];
                            let n = f64::from(counts.get(ox * s + kx, oy * s + ky, pol));
                            let gain = if w < 0.0 { cfg.asym } else { 1.0 };
                            v += w * n * cfg.step * gain;
                        }
                    }
                }
                let v = v.max(0.0).min(cfg.vdd);
                map.set(ox, oy, c, v > cfg.v_th);
            }
        }
    }
    Ok(map)
}

/// Size limits for random equivalence instances.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceBounds {
    pub max_side: usize,
    pub kernel_sides: Vec<usize>,
    pub strides: Vec<usize>,
    pub max_channels: usize,
    pub max_count: u32,
}

impl Default for EquivalenceBounds {
    fn default() -> Self {
        EquivalenceBounds {
            max_side: 16,
            kernel_sides: vec![1, 2, 3],
            strides: vec![1, 2],
            max_channels: 8,
            max_count: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub seed: u64,
    pub mode: &'static str,
    pub x: usize,
    pub y: usize,
    pub channel: usize,
    pub simulated: bool,
    pub expected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub seeds_run: usize,
    pub sites_compared: usize,
    pub first_mismatch: Option<Counterexample>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Per-event step of the equivalence device: a power of two, small enough
/// that `18 taps × 8 events` stays far from the rails.
pub const EQUIV_STEP: f64 = 1.0 / 1024.0;
const EQUIV_VDD: f64 = 0.8;
/// Thresholds sit on half-integer multiples of this grid, weights on
/// eighths; every sum is an integer multiple of it, so no site ties.
const EQUIV_TH_QUANTUM: f64 = EQUIV_STEP / 8.0;

/// The fitted-mode model used by [`equivalence_report`]: the ideal device
/// calibrated over counts `0..=max_count`.
pub fn linear_model(max_count: u32) -> Result<ResponseModel> {
    let p = DeviceParams::linear(EQUIV_VDD, EQUIV_STEP);
    let plan = CalibrationPlan::uniform(8, max_count.max(1), 1);
    fit_response_poly(&sample_device_grid(&p, &plan.weights, &plan.counts, plan.trials, 0)?)
}

struct Instance {
    spec: KernelSpec,
    stream: EventStream,
    counts: CountGrid,
}

fn random_instance(seed: u64, b: &EquivalenceBounds) -> Instance {
    let mut rng = rng_for(seed, &[0x0c1e]);
    let k = b.kernel_sides[rng.random_range(0..b.kernel_sides.len())];
    let stride = b.strides[rng.random_range(0..b.strides.len())];
    let w = rng.random_range(k..=b.max_side.max(k));
    let h = rng.random_range(k..=b.max_side.max(k));
    let channels = rng.random_range(1..=b.max_channels.max(1));
    let weights = (0..channels * k * k * 2)
        .map(|_| f64::from(rng.random_range(-8i32..=8)) / 8.0)
        .collect();
    let j = f64::from(rng.random_range(-400i32..=400));
    let v_th = 0.5 * EQUIV_VDD + (j + 0.5) * EQUIV_TH_QUANTUM;
    let spec = KernelSpec::new(k, stride, channels, weights, v_th).expect("valid by construction");

    let mut counts = CountGrid::zeros(w, h);
    let mut events = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for pol in [Polarity::On, Polarity::Off] {
                let n = rng.random_range(0..=b.max_count);
                counts.set(x, y, pol, n);
                for _ in 0..n {
                    events.push(DvsEvent {
                        x: x as u16,
                        y: y as u16,
                        t: rng.random_range(0..1000),
                        polarity: pol,
                    });
                }
            }
        }
    }
    let stream = EventStream::new(w as u32, h as u32, 1000, events).expect("in bounds by construction");
    Instance { spec, stream, counts }
}

/// Runs oracle vs transient and fitted modes on one random instance per
/// seed. `v_th_skew` is added to the simulator's threshold only, to
/// demonstrate fault detection.
pub fn equivalence_report(seeds: Range<u64>, bounds: &EquivalenceBounds, v_th_skew: f64) -> Result<EquivalenceReport> {
    let mut report = EquivalenceReport {
        seeds_run: 0,
        sites_compared: 0,
        first_mismatch: None,
    };
    if seeds.is_empty() {
        return Ok(report);
    }
    let model = linear_model(bounds.max_count)?;
    let device = DeviceParams::linear(EQUIV_VDD, EQUIV_STEP);
    for seed in seeds {
        let inst = random_instance(seed, bounds);
        let oracle_cfg = OracleConfig {
            k: inst.spec.k,
            stride: inst.spec.stride,
            channels: inst.spec.channels,
            weights: inst.spec.weights.clone(),
            step: EQUIV_STEP,
            asym: 1.0,
            vdd: EQUIV_VDD,
            v_reset: 0.5 * EQUIV_VDD,
            v_th: inst.spec.v_th,
        };
        let expected = ideal_conv_threshold(&inst.counts, &oracle_cfg)?;
        let mut spec = inst.spec;
        spec.v_th += v_th_skew;
        let array = build_array(inst.counts.width, inst.counts.height, spec, &AreaBudget::default())?;
        let modes = [
            (
                "transient",
                SimMode::Transient {
                    params: device,
                    variation: false,
                },
            ),
            (
                "fitted",
                SimMode::Fitted {
                    model: model.clone(),
                    variation: false,
                },
            ),
        ];
        for (name, mode) in modes {
            let out = run_stream(&array, &inst.stream, &mode, 1000, seed)?;
            let got = &out.maps[0];
            report.sites_compared += got.spikes.len();
            if report.first_mismatch.is_none() {
                report.first_mismatch = first_difference(got, &expected).map(|(x, y, channel)| Counterexample {
                    seed,
                    mode: name,
                    x,
                    y,
                    channel,
                    simulated: got.get(x, y, channel),
                    expected: expected.get(x, y, channel),
                });
            }
        }
        report.seeds_run += 1;
    }
    Ok(report)
}

fn first_difference(a: &ActivationMap, b: &ActivationMap) -> Option<(usize, usize, usize)> {
    assert_eq!(
        (a.out_width, a.out_height, a.channels),
        (b.out_width, b.out_height, b.channels)
    );
    for y in 0..a.out_height {
        for x in 0..a.out_width {
            for c in 0..a.channels {
                if a.get(x, y, c) != b.get(x, y, c) {
                    return Some((x, y, c));
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(weights: Vec<f64>, v_th: f64) -> OracleConfig {
        OracleConfig {
            k: 1,
            stride: 1,
            channels: 1,
            weights,
            step: 0.025,
            asym: 0.9,
            vdd: 0.8,
            v_reset: 0.4,
            v_th,
        }
    }

    #[test]
    fn zero_counts_give_empty_map() {
        let m = ideal_conv_threshold(&CountGrid::zeros(4, 4), &cfg(vec![1.0, -1.0], 0.45)).unwrap();
        assert_eq!((m.out_width, m.out_height), (4, 4));
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn one_tap_crosses_threshold() {
        let mut counts = CountGrid::zeros(2, 1);
        counts.set(1, 0, Polarity::On, 3);
        let m = ideal_conv_threshold(&counts, &cfg(vec![1.0, 0.0], 0.45)).unwrap();
        assert!(!m.get(0, 0, 0));
        assert!(m.get(1, 0, 0)); // 0.4 + 0.075
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn rails_clamp_before_threshold() {
        let mut counts = CountGrid::zeros(1, 1);
        counts.set(0, 0, Polarity::Off, 100);
        // would reach 0.4 - 100*0.025*0.9 < 0 without clamping; v_th just above 0
        let m = ideal_conv_threshold(&counts, &cfg(vec![0.0, -1.0], 1e-12)).unwrap();
        assert!(!m.get(0, 0, 0));
        let m = ideal_conv_threshold(&counts, &cfg(vec![0.0, 1.0], 0.8 - 1e-12)).unwrap();
        assert!(m.get(0, 0, 0));
    }

    #[test]
    fn shape_errors() {
        assert!(ideal_conv_threshold(&CountGrid::zeros(2, 2), &cfg(vec![1.0], 0.45)).is_err());
        let big = OracleConfig {
            k: 3,
            weights: vec![0.0; 18],
            ..cfg(vec![], 0.45)
        };
        assert!(ideal_conv_threshold(&CountGrid::zeros(2, 2), &big).is_err());
    }

    #[test]
    fn random_instances_match_both_modes() {
        let r = equivalence_report(0..30, &EquivalenceBounds::default(), 0.0).unwrap();
        assert_eq!(r.seeds_run, 30);
        assert!(r.passed(), "{:?}", r.first_mismatch);
    }

    #[test]
    fn injected_threshold_skew_is_caught() {
        let r = equivalence_report(0..30, &EquivalenceBounds::default(), 0.01).unwrap();
        let ce = r.first_mismatch.expect("skew must be detected");
        assert!(ce.expected && !ce.simulated);
    }

    #[test]
    fn empty_seed_range_passes_vacuously() {
        let r = equivalence_report(5..5, &EquivalenceBounds::default(), 1.0).unwrap();
        assert!(r.passed());
        assert_eq!(r.seeds_run, 0);
    }
}
