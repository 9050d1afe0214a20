//! Kernels mapped onto the pixel array and the per-window
//! reset / convolve / threshold pipeline.
//!
//! Output site `(ox, oy)` owns the receptive field
//! `[ox*stride, ox*stride + k) x [oy*stride, oy*stride + k)`; only fully
//! contained fields produce sites (no padding). Every site carries one
//! kernel capacitor per channel. Capacitors are reset to `vdd/2` at the
//! start of each window and nothing carries over between windows.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::KvConfig;
use crate::device::{apply_event, leak_drift, DeviceParams, ResponseModel};
use crate::error::{Error, Result};
use crate::events::{split_windows, window_events, CountGrid, DvsEvent, EventStream, Polarity};
use crate::rng::{rng_for, SimRng};

/// Leading four bytes of a weight tensor file.
pub const WEIGHT_MAGIC: &[u8; 4] = b"NPW1";
const WEIGHT_HEADER_WORDS: usize = 8;
/// Root of the per-capacitor generator path, see [`site_rng`].
const SITE_STREAM: u64 = 0xa77a;

/// Bottom-die area available under each output site, and what one channel
/// of analog MAC hardware costs.
///
/// The per-element areas are approximations chosen so that a 3x3 kernel
/// admits exactly 128 channels at stride 2 and 32 at stride 1 on a 40 µm
/// pixel pitch; the capacitor takes 47% of a channel's area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaBudget {
    /// Pixel pitch (µm).
    pub pixel_pitch: f64,
    /// Fraction of the stacked bottom die usable for MAC circuitry.
    pub stacking: f64,
    /// One weight transistor (µm²); each channel needs `2 k²` of them.
    pub a_weight: f64,
    /// Kernel capacitor (µm²).
    pub a_cap: f64,
    /// Comparator (µm²).
    pub a_cmp: f64,
}

impl Default for AreaBudget {
    fn default() -> Self {
        AreaBudget {
            pixel_pitch: 40.0,
            stacking: 1.0,
            a_weight: 1.0,
            a_cap: 23.4,
            a_cmp: 8.4,
        }
    }
}

impl AreaBudget {
    pub fn site_area(&self, stride: usize) -> f64 {
        let side = self.pixel_pitch * stride as f64;
        side * side * self.stacking
    }

    pub fn channel_area(&self, k: usize) -> f64 {
        2.0 * (k * k) as f64 * self.a_weight + self.a_cap + self.a_cmp
    }

    /// Capacitor share of one channel's area.
    pub fn cap_share(&self, k: usize) -> f64 {
        self.a_cap / self.channel_area(k)
    }

    /// Reads `area.*` keys over the defaults.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = AreaBudget::default();
        let b = AreaBudget {
            pixel_pitch: cfg.parse_or("area.pixel_pitch", d.pixel_pitch)?,
            stacking: cfg.parse_or("area.stacking", d.stacking)?,
            a_weight: cfg.parse_or("area.a_weight", d.a_weight)?,
            a_cap: cfg.parse_or("area.a_cap", d.a_cap)?,
            a_cmp: cfg.parse_or("area.a_cmp", d.a_cmp)?,
        };
        let fields = [b.pixel_pitch, b.stacking, b.a_weight, b.a_cap, b.a_cmp];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || b.pixel_pitch == 0.0 {
            return Err(Error::InvalidParameter(
                "area budget values must be finite and >= 0".into(),
            ));
        }
        Ok(b)
    }
}

/// Channels that fit under one output site.
pub fn max_channels(k: usize, stride: usize, budget: &AreaBudget) -> usize {
    let per_channel = budget.channel_area(k);
    if per_channel <= 0.0 {
        return usize::MAX;
    }
    (budget.site_area(stride) / per_channel).floor() as usize
}

/// Whether a capacitor exactly at the threshold spikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdRule {
    /// Spike iff `v > v_th`.
    #[default]
    Strict,
    /// Spike iff `v >= v_th`.
    Inclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub k: usize,
    pub stride: usize,
    pub channels: usize,
    /// Normalized weights, `[channel][ky][kx][polarity]` with ON before OFF.
    pub weights: Vec<f64>,
    pub v_th: f64,
    pub threshold: ThresholdRule,
}

impl KernelSpec {
    pub fn new(k: usize, stride: usize, channels: usize, weights: Vec<f64>, v_th: f64) -> Result<Self> {
        let spec = KernelSpec {
            k,
            stride,
            channels,
            weights,
            v_th,
            threshold: ThresholdRule::Strict,
        };
        spec.check_shape()?;
        Ok(spec)
    }

    /// Weights drawn uniformly from [-1, 1].
    pub fn random(k: usize, stride: usize, channels: usize, v_th: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[0x3e16_4e75]);
        let n = channels * k * k * 2;
        let weights = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        KernelSpec::new(k, stride, channels, weights, v_th)
    }

    fn check_shape(&self) -> Result<()> {
        if self.k == 0 || self.stride == 0 || self.channels == 0 {
            return Err(Error::InvalidParameter("k, stride and channels must be >= 1".into()));
        }
        let want = self.channels * self.k * self.k * 2;
        if self.weights.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "weight tensor has {} values, expected {want}",
                self.weights.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && w.abs() <= 1.0)) {
            return Err(Error::InvalidParameter(format!("weight {w} outside [-1, 1]")));
        }
        if !self.v_th.is_finite() {
            return Err(Error::InvalidParameter("v_th must be finite".into()));
        }
        Ok(())
    }

    /// Checks the threshold against the supply.
    pub fn validate(&self, vdd: f64) -> Result<()> {
        self.check_shape()?;
        if !(self.v_th > 0.0 && self.v_th < vdd) {
            return Err(Error::InvalidParameter(format!(
                "v_th {} outside (0, {vdd})",
                self.v_th
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn weight_index(&self, c: usize, ky: usize, kx: usize, plane: usize) -> usize {
        ((c * self.k + ky) * self.k + kx) * 2 + plane
    }

    #[inline]
    pub fn weight(&self, c: usize, ky: usize, kx: usize, polarity: Polarity) -> f64 {
        self.weights[self.weight_index(c, ky, kx, polarity.plane())]
    }

    /// Sum of weight magnitudes of one channel (out of `2 k²`).
    pub fn abs_sum(&self, c: usize) -> f64 {
        let per = self.k * self.k * 2;
        self.weights[c * per..(c + 1) * per].iter().map(|w| w.abs()).sum()
    }

    #[inline]
    pub fn fires(&self, v: f64) -> bool {
        match self.threshold {
            ThresholdRule::Strict => v > self.v_th,
            ThresholdRule::Inclusive => v >= self.v_th,
        }
    }

    /// Reads `kernel.*` keys. `kernel.weights` is a tensor file path or
    /// `random`, in which case weights are drawn from `seed`.
    pub fn from_config(cfg: &KvConfig, seed: u64) -> Result<Self> {
        let k: usize = cfg.parse_or("kernel.k", 3)?;
        let stride: usize = cfg.parse_or("kernel.stride", 2)?;
        let channels: usize = cfg.parse_or("kernel.channels", 8)?;
        let v_th: f64 = cfg.parse_or("kernel.v_th", 0.45)?;
        let mut spec = match cfg.get("kernel.weights").unwrap_or("random") {
            "random" => KernelSpec::random(k, stride, channels, v_th, seed)?,
            path => {
                let (dims, weights) = read_weight_file(path)?;
                if dims != [channels, k, k, 2] {
                    return Err(Error::ShapeMismatch(format!(
                        "weight file {path} has dims {dims:?}, config says [{channels}, {k}, {k}, 2]"
                    )));
                }
                KernelSpec::new(k, stride, channels, weights, v_th)?
            }
        };
        spec.threshold = match cfg.get("kernel.threshold").unwrap_or("strict") {
            "strict" => ThresholdRule::Strict,
            "inclusive" => ThresholdRule::Inclusive,
            other => return Err(Error::InvalidParameter(format!("threshold rule `{other}`"))),
        };
        Ok(spec)
    }
}

/// Encodes a weight tensor: 8-word header (magic, channels, k, k, 2,
/// 3 reserved zeros) followed by the weights, all little-endian `f32`.
pub fn encode_weights(spec: &KernelSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (WEIGHT_HEADER_WORDS + spec.weights.len()));
    out.extend_from_slice(WEIGHT_MAGIC);
    for d in [spec.channels, spec.k, spec.k, 2] {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 12]);
    for &w in &spec.weights {
        out.extend_from_slice(&(w as f32).to_le_bytes());
    }
    out
}

/// Decodes a weight tensor, returning `[channels, k, k, 2]` and the values.
pub fn decode_weights(bytes: &[u8]) -> Result<([usize; 4], Vec<f64>)> {
    let bad = |offset: usize, msg: &str| Error::MalformedBinary {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 4 * WEIGHT_HEADER_WORDS {
        return Err(bad(0, "truncated weight header"));
    }
    if &bytes[..4] != WEIGHT_MAGIC {
        return Err(bad(0, "bad weight file magic"));
    }
    let word = |i: usize| f32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = word(i + 1);
        if !(v >= 1.0 && v.fract() == 0.0 && v < 1e6) {
            return Err(bad(4 * (i + 1), "dimension is not a positive integer"));
        }
        *d = v as usize;
    }
    if dims[1] != dims[2] || dims[3] != 2 {
        return Err(bad(4, "expected [channels, k, k, 2]"));
    }
    let n: usize = dims.iter().product();
    let body = &bytes[4 * WEIGHT_HEADER_WORDS..];
    if body.len() != 4 * n {
        return Err(bad(4 * WEIGHT_HEADER_WORDS, "payload length does not match dims"));
    }
    let weights = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((dims, weights))
}

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<([usize; 4], Vec<f64>)> {
    decode_weights(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelArray {
    pub sensor_width: usize,
    pub sensor_height: usize,
    pub spec: KernelSpec,
    pub out_width: usize,
    pub out_height: usize,
}

pub fn build_array(width: usize, height: usize, spec: KernelSpec, budget: &AreaBudget) -> Result<PixelArray> {
    spec.check_shape()?;
    if spec.k > width || spec.k > height {
        return Err(Error::InvalidParameter(format!(
            "kernel side {} exceeds sensor {width}x{height}",
            spec.k
        )));
    }
    let max = max_channels(spec.k, spec.stride, budget);
    if spec.channels > max {
        return Err(Error::AreaViolation {
            channels: spec.channels,
            max,
            k: spec.k,
            stride: spec.stride,
        });
    }
    Ok(PixelArray {
        sensor_width: width,
        sensor_height: height,
        out_width: (width - spec.k) / spec.stride + 1,
        out_height: (height - spec.k) / spec.stride + 1,
        spec,
    })
}

impl PixelArray {
    #[inline]
    pub fn site_index(&self, ox: usize, oy: usize) -> usize {
        oy * self.out_width + ox
    }

    /// Output coordinates along one axis whose receptive field contains `p`.
    fn axis_sites(&self, p: usize, out: usize) -> std::ops::Range<usize> {
        let (k, s) = (self.spec.k, self.spec.stride);
        let lo = if p + 1 >= k { (p + 1 - k).div_ceil(s) } else { 0 };
        let hi = (p / s + 1).min(out);
        lo..hi.max(lo)
    }

    /// Every `(ox, oy, kx, ky)` such that pixel `(x, y)` sits at kernel
    /// offset `(kx, ky)` of output site `(ox, oy)`.
    pub fn sites_for_pixel(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let s = self.spec.stride;
        let xs = self.axis_sites(x, self.out_width);
        self.axis_sites(y, self.out_height)
            .flat_map(move |oy| xs.clone().map(move |ox| (ox, oy, x - ox * s, y - oy * s)))
    }

    fn check_event(&self, e: &DvsEvent) -> Result<()> {
        if (e.x as usize) < self.sensor_width && (e.y as usize) < self.sensor_height {
            Ok(())
        } else {
            Err(Error::EventOutOfBounds {
                x: e.x,
                y: e.y,
                width: self.sensor_width as u32,
                height: self.sensor_height as u32,
            })
        }
    }
}

/// Capacitor voltages, indexed `(oy * out_width + ox) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelState {
    pub out_width: usize,
    pub out_height: usize,
    pub channels: usize,
    pub v: Vec<f64>,
}

impl KernelState {
    pub fn new(array: &PixelArray, p: &DeviceParams) -> Self {
        KernelState {
            out_width: array.out_width,
            out_height: array.out_height,
            channels: array.spec.channels,
            v: vec![p.v_reset(); array.out_width * array.out_height * array.spec.channels],
        }
    }

    #[inline]
    pub fn get(&self, ox: usize, oy: usize, c: usize) -> f64 {
        self.v[(oy * self.out_width + ox) * self.channels + c]
    }
}

/// Precharges every capacitor to `vdd/2`.
pub fn reset_phase(mut state: KernelState, p: &DeviceParams) -> KernelState {
    state.v.fill(p.v_reset());
    state
}

/// Seeds per-capacitor variation draws for one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variation {
    pub seed: u64,
    pub window: u64,
}

/// Generator owned by one capacitor in one window, independent of
/// processing order.
pub fn site_rng(var: Variation, site: usize, channel: usize) -> SimRng {
    rng_for(var.seed, &[SITE_STREAM, var.window, site as u64, channel as u64])
}

/// Event-by-event accumulation with the voltage-dependent device model,
/// followed by one end-of-window leakage correction.
pub fn convolve_window_transient(
    array: &PixelArray,
    events: &[DvsEvent],
    p: &DeviceParams,
    window_us: u64,
    variation: Option<Variation>,
) -> Result<KernelState> {
    let spec = &array.spec;
    let sites = array.out_width * array.out_height;
    // (kernel offset, plane) hits per site, in event order
    let mut hits: Vec<Vec<(u8, u8, u8)>> = vec![Vec::new(); sites];
    for e in events {
        array.check_event(e)?;
        let plane = e.polarity.plane() as u8;
        for (ox, oy, kx, ky) in array.sites_for_pixel(e.x as usize, e.y as usize) {
            hits[array.site_index(ox, oy)].push((kx as u8, ky as u8, plane));
        }
    }

    let max_sum = (2 * spec.k * spec.k) as f64;
    let leak: Vec<f64> = (0..spec.channels)
        .map(|c| Ok(p.leak_direction.sign() * leak_drift(spec.abs_sum(c), max_sum, window_us, p)?))
        .collect::<Result<_>>()?;

    let mut state = KernelState::new(array, p);
    for (site, taps) in hits.iter().enumerate() {
        for (c, leak_c) in leak.iter().enumerate() {
            let mut v = p.v_reset();
            let mut rng = variation.map(|var| site_rng(var, site, c));
            for &(kx, ky, plane) in taps {
                let w = spec.weights[spec.weight_index(c, ky as usize, kx as usize, plane as usize)];
                if w != 0.0 {
                    v = apply_event(w, v, p, rng.as_mut())?;
                }
            }
            state.v[site * spec.channels + c] = (v + leak_c).clamp(0.0, p.vdd);
        }
    }
    Ok(state)
}

/// Per-window evaluation of the calibrated response: every tap contributes
/// `eval_response(w, n)` independently, contributions add, then clamp.
pub fn convolve_window_fitted(
    array: &PixelArray,
    counts: &CountGrid,
    model: &ResponseModel,
    variation: Option<Variation>,
) -> Result<KernelState> {
    if counts.width != array.sensor_width || counts.height != array.sensor_height {
        return Err(Error::ShapeMismatch(format!(
            "count grid {}x{} vs sensor {}x{}",
            counts.width, counts.height, array.sensor_width, array.sensor_height
        )));
    }
    let spec = &array.spec;
    let (k, s) = (spec.k, spec.stride);
    let v_reset = 0.5 * model.vdd;
    let mut state = KernelState {
        out_width: array.out_width,
        out_height: array.out_height,
        channels: spec.channels,
        v: vec![v_reset; array.out_width * array.out_height * spec.channels],
    };
    let mut taps: Vec<(usize, u32)> = Vec::with_capacity(2 * k * k);
    for oy in 0..array.out_height {
        for ox in 0..array.out_width {
            taps.clear();
            for ky in 0..k {
                for kx in 0..k {
                    for pol in [Polarity::On, Polarity::Off] {
                        let n = counts.get(ox * s + kx, oy * s + ky, pol);
                        if n > 0 {
                            taps.push((((ky * k) + kx) * 2 + pol.plane(), n));
                        }
                    }
                }
            }
            if taps.is_empty() {
                continue;
            }
            let site = array.site_index(ox, oy);
            for c in 0..spec.channels {
                let base = c * k * k * 2;
                let mut rng = variation.map(|var| site_rng(var, site, c));
                let mut v = v_reset;
                for &(tap, n) in &taps {
                    v += model.eval_response(spec.weights[base + tap], n, rng.as_mut())?;
                }
                state.v[site * spec.channels + c] = v.clamp(0.0, model.vdd);
            }
        }
    }
    Ok(state)
}

/// Binary spike grid for one window, indexed like [`KernelState`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationMap {
    pub out_width: usize,
    pub out_height: usize,
    pub channels: usize,
    pub window: usize,
    pub spikes: Vec<bool>,
}

impl ActivationMap {
    pub fn zeros(out_width: usize, out_height: usize, channels: usize, window: usize) -> Self {
        ActivationMap {
            out_width,
            out_height,
            channels,
            window,
            spikes: vec![false; out_width * out_height * channels],
        }
    }

    #[inline]
    fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.out_width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> bool {
        self.spikes[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, spike: bool) {
        let i = self.index(x, y, c);
        self.spikes[i] = spike;
    }

    pub fn count(&self) -> usize {
        self.spikes.iter().filter(|&&s| s).count()
    }

    /// Same dimensions and spikes, ignoring the window index.
    pub fn same_spikes(&self, other: &ActivationMap) -> bool {
        (self.out_width, self.out_height, self.channels) == (other.out_width, other.out_height, other.channels)
            && self.spikes == other.spikes
    }
}

pub fn threshold_phase(state: &KernelState, spec: &KernelSpec, window: usize) -> ActivationMap {
    ActivationMap {
        out_width: state.out_width,
        out_height: state.out_height,
        channels: state.channels,
        window,
        spikes: state.v.iter().map(|&v| spec.fires(v)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimMode {
    /// Event-by-event device model; `variation` enables per-step mismatch.
    Transient { params: DeviceParams, variation: bool },
    /// Calibrated per-tap response; `variation` enables truncated draws.
    Fitted { model: ResponseModel, variation: bool },
}

impl SimMode {
    pub fn vdd(&self) -> f64 {
        match self {
            SimMode::Transient { params, .. } => params.vdd,
            SimMode::Fitted { model, .. } => model.vdd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub maps: Vec<ActivationMap>,
    pub spike_counts: Vec<usize>,
    pub window_length: u64,
}

impl RunOutput {
    pub fn total_spikes(&self) -> usize {
        self.spike_counts.iter().sum()
    }

    /// Fraction of (window, site, channel) slots that spiked.
    pub fn sparsity(&self) -> f64 {
        let slots: usize = self.maps.iter().map(|m| m.spikes.len()).sum();
        if slots == 0 {
            0.0
        } else {
            self.total_spikes() as f64 / slots as f64
        }
    }
}

/// Reset, convolve and threshold every window of `stream` independently.
pub fn run_stream(
    array: &PixelArray,
    stream: &EventStream,
    mode: &SimMode,
    window_length: u64,
    seed: u64,
) -> Result<RunOutput> {
    if window_length == 0 {
        return Err(Error::InvalidParameter("window length must be positive".into()));
    }
    if stream.width as usize != array.sensor_width || stream.height as usize != array.sensor_height {
        return Err(Error::ShapeMismatch(format!(
            "stream {}x{} vs sensor {}x{}",
            stream.width, stream.height, array.sensor_width, array.sensor_height
        )));
    }
    array.spec.validate(mode.vdd())?;
    let variation = |window: usize, on: bool| {
        on.then_some(Variation {
            seed,
            window: window as u64,
        })
    };
    let states: Vec<KernelState> = match mode {
        SimMode::Transient { params, variation: on } => {
            params.validate()?;
            split_windows(stream, window_length)
                .into_iter()
                .enumerate()
                .map(|(i, evs)| convolve_window_transient(array, evs, params, window_length, variation(i, *on)))
                .collect::<Result<_>>()?
        }
        SimMode::Fitted { model, variation: on } => window_events(stream, window_length)?
            .windows
            .iter()
            .enumerate()
            .map(|(i, counts)| convolve_window_fitted(array, counts, model, variation(i, *on)))
            .collect::<Result<_>>()?,
    };
    let maps: Vec<ActivationMap> = states
        .iter()
        .enumerate()
        .map(|(i, st)| threshold_phase(st, &array.spec, i))
        .collect();
    let spike_counts = maps.iter().map(ActivationMap::count).collect();
    Ok(RunOutput {
        maps,
        spike_counts,
        window_length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{fit_response_poly, nonlinear_step, sample_device_grid, CalibrationPlan};
    use crate::events::synth_events;
    use proptest::prelude::*;
    use rand::Rng;

    fn ev(x: u16, y: u16, t: u64, polarity: Polarity) -> DvsEvent {
        DvsEvent { x, y, t, polarity }
    }

    fn no_leak() -> DeviceParams {
        DeviceParams {
            sigma_frac: 0.0,
            leak_rate_max: 0.0,
            ..DeviceParams::default()
        }
    }

    fn array(w: usize, h: usize, k: usize, stride: usize, channels: usize, seed: u64) -> PixelArray {
        let spec = KernelSpec::random(k, stride, channels, 0.45, seed).unwrap();
        build_array(w, h, spec, &AreaBudget::default()).unwrap()
    }

    #[test]
    fn published_channel_caps() {
        let b = AreaBudget::default();
        assert_eq!(max_channels(3, 2, &b), 128);
        assert_eq!(max_channels(3, 1, &b), 32);
        assert!((b.cap_share(3) - 0.47).abs() < 0.005);
        let doubled = AreaBudget {
            a_cap: 2.0 * b.a_cap,
            ..b
        };
        // 6400 / (18 + 46.8 + 8.4) = 87.4
        assert_eq!(max_channels(3, 2, &doubled), 87);
    }

    #[test]
    fn build_geometry_and_errors() {
        let a = array(128, 128, 3, 2, 32, 1);
        assert_eq!((a.out_width, a.out_height, a.spec.channels), (63, 63, 32));
        let a = array(34, 34, 3, 2, 8, 1);
        assert_eq!((a.out_width, a.out_height), (16, 16));
        let spec = KernelSpec::random(3, 2, 129, 0.45, 1).unwrap();
        assert!(matches!(
            build_array(128, 128, spec, &AreaBudget::default()),
            Err(Error::AreaViolation { max: 128, .. })
        ));
        let spec = KernelSpec::random(5, 1, 1, 0.45, 1).unwrap();
        assert!(build_array(4, 8, spec, &AreaBudget::default()).is_err());
    }

    #[test]
    fn reset_sets_half_vdd_and_is_idempotent() {
        let a = array(8, 8, 3, 2, 2, 0);
        let p = DeviceParams::default();
        let mut st = KernelState::new(&a, &p);
        st.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.01);
        let once = reset_phase(st, &p);
        assert!(once.v.iter().all(|&v| v == 0.4));
        assert_eq!(reset_phase(once.clone(), &p), once);
        assert_eq!(once, KernelState::new(&a, &p));
    }

    #[test]
    fn empty_window_stays_at_reset() {
        let a = array(8, 8, 3, 2, 2, 0);
        let st = convolve_window_transient(&a, &[], &no_leak(), 1000, None).unwrap();
        assert!(st.v.iter().all(|&v| v == 0.4));
    }

    #[test]
    fn single_event_single_channel() {
        let mut w = vec![0.0; 18];
        w[0] = 0.7; // channel 0, ky 0, kx 0, ON
        let spec = KernelSpec::new(3, 2, 1, w, 0.45).unwrap();
        let a = build_array(3, 3, spec, &AreaBudget::default()).unwrap();
        let p = no_leak();
        let st = convolve_window_transient(&a, &[ev(0, 0, 5, Polarity::On)], &p, 1000, None).unwrap();
        let expect = 0.4 + nonlinear_step(0.7, 0.4, &p).unwrap();
        assert_eq!(st.get(0, 0, 0), expect);
    }

    #[test]
    fn out_of_bounds_event_is_rejected() {
        let a = array(8, 8, 3, 2, 1, 0);
        let r = convolve_window_transient(&a, &[ev(8, 0, 0, Polarity::On)], &no_leak(), 1000, None);
        assert!(matches!(r, Err(Error::EventOutOfBounds { .. })));
    }

    #[test]
    fn trajectory_is_monotone_per_event_sign() {
        // 4 positive taps, 3 silent pixels, 2 negative taps
        let mut w = vec![0.0; 18];
        for (i, val) in [(0, 0.8), (1, 0.6), (2, 0.9), (3, 0.5), (7, -0.4), (8, -0.7)] {
            w[i * 2] = val;
        }
        let spec = KernelSpec::new(3, 1, 1, w, 0.45).unwrap();
        let a = build_array(3, 3, spec.clone(), &AreaBudget::default()).unwrap();
        let p = no_leak();
        let mut rng = rng_for(5, &[1]);
        let mut events: Vec<DvsEvent> = (0..40)
            .map(|_| {
                let pix = [0usize, 1, 2, 3, 7, 8][rng.random_range(0..6)];
                ev(
                    (pix % 3) as u16,
                    (pix / 3) as u16,
                    rng.random_range(0..1000),
                    Polarity::On,
                )
            })
            .collect();
        events.sort_by_key(|e| e.t);
        let mut v = p.v_reset();
        for e in &events {
            let wt = spec.weight(0, e.y as usize, e.x as usize, Polarity::On);
            let next = apply_event::<SimRng>(wt, v, &p, None).unwrap();
            assert!(if wt > 0.0 { next >= v } else { next <= v });
            v = next;
        }
        let st = convolve_window_transient(&a, &events, &p, 1000, None).unwrap();
        assert_eq!(st.get(0, 0, 0), v);
    }

    #[test]
    fn threshold_is_strict_by_default() {
        let spec = KernelSpec::new(1, 1, 1, vec![0.0, 0.0], 0.45).unwrap();
        let st = |v: f64| KernelState {
            out_width: 1,
            out_height: 1,
            channels: 1,
            v: vec![v],
        };
        assert!(!threshold_phase(&st(0.45), &spec, 0).get(0, 0, 0));
        assert!(threshold_phase(&st(0.8), &spec, 0).get(0, 0, 0));
        assert_eq!(threshold_phase(&st(0.4), &spec, 0).count(), 0);
        let incl = KernelSpec {
            threshold: ThresholdRule::Inclusive,
            ..spec
        };
        assert!(threshold_phase(&st(0.45), &incl, 0).get(0, 0, 0));
    }

    #[test]
    fn fitted_zero_counts_and_single_tap() {
        let lin = DeviceParams::linear(0.8, 0.025);
        let plan = CalibrationPlan::uniform(8, 8, 1);
        let grid = sample_device_grid(&lin, &plan.weights, &plan.counts, plan.trials, 0).unwrap();
        let model = fit_response_poly(&grid).unwrap();
        let mut w = vec![0.0; 18];
        w[4 * 2] = 0.5; // centre pixel, ON
        let spec = KernelSpec::new(3, 1, 1, w, 0.45).unwrap();
        let a = build_array(3, 3, spec, &AreaBudget::default()).unwrap();
        let mut counts = CountGrid::zeros(3, 3);
        let st = convolve_window_fitted(&a, &counts, &model, None).unwrap();
        assert_eq!(st.v, vec![0.4]);
        counts.set(1, 1, Polarity::On, 3);
        let st = convolve_window_fitted(&a, &counts, &model, None).unwrap();
        assert_eq!(st.v[0], 0.4 + model.mean(1.5).unwrap());
        counts.set(1, 1, Polarity::On, 50);
        assert!(matches!(
            convolve_window_fitted(&a, &counts, &model, None),
            Err(Error::OutsideFittedRange { .. })
        ));
    }

    #[test]
    fn windows_are_isolated_and_runs_deterministic() {
        let a = array(8, 8, 3, 2, 4, 3);
        let events = (0..30)
            .map(|i| ev((i % 8) as u16, (i / 4 % 8) as u16, 1000 + i as u64, Polarity::On))
            .collect();
        let stream = EventStream::new(8, 8, 3000, events).unwrap();
        let mode = SimMode::Transient {
            params: DeviceParams::default(),
            variation: true,
        };
        let out = run_stream(&a, &stream, &mode, 1000, 7).unwrap();
        assert_eq!(out.maps.len(), 3);
        assert_eq!(out.spike_counts[0], 0);
        assert_eq!(out.spike_counts[2], 0);
        assert_eq!(out, run_stream(&a, &stream, &mode, 1000, 7).unwrap());
    }

    #[test]
    fn weight_file_round_trip() {
        let spec = KernelSpec::random(3, 2, 5, 0.45, 9).unwrap();
        let bytes = encode_weights(&spec);
        assert_eq!(bytes.len(), 4 * (8 + 90));
        let (dims, w) = decode_weights(&bytes).unwrap();
        assert_eq!(dims, [5, 3, 3, 2]);
        for (a, b) in w.iter().zip(&spec.weights) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(decode_weights(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad).is_err());
    }

    #[test]
    fn kernel_config_random_and_file() {
        let cfg =
            KvConfig::parse_str("kernel.k = 3\nkernel.stride = 1\nkernel.channels = 2\nkernel.v_th = 0.5\n").unwrap();
        let a = KernelSpec::from_config(&cfg, 4).unwrap();
        assert_eq!(a, KernelSpec::from_config(&cfg, 4).unwrap());
        assert_eq!((a.k, a.stride, a.channels, a.v_th), (3, 1, 2, 0.5));

        let dir = std::env::temp_dir().join(format!("p2m-w-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let f = dir.join("k.npw");
        fs::write(&f, encode_weights(&a)).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.insert("kernel.weights", f.display());
        let b = KernelSpec::from_config(&cfg2, 99).unwrap();
        assert!(b.weights.iter().zip(&a.weights).all(|(x, y)| (x - y).abs() < 1e-7));
        cfg2.insert("kernel.channels", 3);
        assert!(KernelSpec::from_config(&cfg2, 99).is_err());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn synthetic_run_reports_counts() {
        let a = array(34, 34, 3, 2, 8, 11);
        let stream = synth_events(34, 34, 3000, 5.0, 2).unwrap();
        let mode = SimMode::Transient {
            params: no_leak(),
            variation: false,
        };
        let out = run_stream(&a, &stream, &mode, 1000, 0).unwrap();
        assert_eq!(out.spike_counts.len(), 3);
        assert_eq!(
            out.spike_counts.iter().sum::<usize>(),
            out.maps.iter().map(|m| m.count()).sum::<usize>()
        );
    }

    proptest! {
        #[test]
        fn receptive_fields_match_stride(
            w in 1usize..20, h in 1usize..20, k in 1usize..5, s in 1usize..4,
        ) {
            prop_assume!(k <= w && k <= h);
            let spec = KernelSpec::random(k, s, 1, 0.45, 0).unwrap();
            let a = build_array(w, h, spec, &AreaBudget::default()).unwrap();
            prop_assert!((a.out_width - 1) * s + k <= w);
            prop_assert!((a.out_height - 1) * s + k <= h);
            let cap = k.div_ceil(s).pow(2);
            for y in 0..h {
                for x in 0..w {
                    let sites: Vec<_> = a.sites_for_pixel(x, y).collect();
                    prop_assert!(sites.len() <= cap);
                    for &(ox, oy, kx, ky) in &sites {
                        prop_assert!(kx < k && ky < k);
                        prop_assert_eq!((ox * s + kx, oy * s + ky), (x, y));
                    }
                    // brute force: every containing site is reported
                    let brute = (0..a.out_height)
                        .flat_map(|oy| (0..a.out_width).map(move |ox| (ox, oy)))
                        .filter(|&(ox, oy)| x >= ox * s && x < ox * s + k && y >= oy * s && y < oy * s + k)
                        .count();
                    prop_assert_eq!(brute, sites.len());
                }
            }
        }

        #[test]
        fn fitted_mode_ignores_event_order(seed in 0u64..1000) {
            let lin = DeviceParams::linear(0.8, 0.025);
            let plan = CalibrationPlan::uniform(8, 8, 1);
            let grid = sample_device_grid(&lin, &plan.weights, &plan.counts, plan.trials, 0).unwrap();
            let model = fit_response_poly(&grid).unwrap();
            let a = array(6, 6, 3, 1, 2, seed);
            let mut rng = rng_for(seed, &[2]);
            let mut events: Vec<DvsEvent> = (0..20)
                .map(|_| ev(rng.random_range(0..6), rng.random_range(0..6), rng.random_range(0..1000), Polarity::On))
                .collect();
            let s1 = EventStream::new(6, 6, 1000, events.clone()).unwrap();
            events.reverse();
            for (i, e) in events.iter_mut().enumerate() { e.t = i as u64; }
            let s2 = EventStream::new(6, 6, 1000, events).unwrap();
            let mode = SimMode::Fitted { model, variation: true };
            prop_assert_eq!(run_stream(&a, &s1, &mode, 1000, seed).unwrap(), run_stream(&a, &s2, &mode, 1000, seed).unwrap());
        }

        #[test]
        fn extra_positive_event_never_lowers_voltage(seed in 0u64..1000, pos in 0usize..30) {
            let p = no_leak();
            let a = array(5, 5, 3, 1, 3, seed);
            let mut rng = rng_for(seed, &[3]);
            let pols = [Polarity::On, Polarity::Off];
            let events: Vec<DvsEvent> = (0..30)
                .map(|t| ev(rng.random_range(0..5), rng.random_range(0..5), t, pols[rng.random_range(0..2)]))
                .collect();
            let base = convolve_window_transient(&a, &events, &p, 1000, None).unwrap();
            let (x, y) = (rng.random_range(0..5usize), rng.random_range(0..5usize));
            let mut more = events.clone();
            more.insert(pos, ev(x as u16, y as u16, pos as u64, Polarity::On));
            let after = convolve_window_transient(&a, &more, &p, 1000, None).unwrap();
            for (ox, oy, kx, ky) in a.sites_for_pixel(x, y) {
                for c in 0..3 {
                    if a.spec.weight(c, ky, kx, Polarity::On) > 0.0 {
                        prop_assert!(after.get(ox, oy, c) >= base.get(ox, oy, c) - 1e-15);
                    }
                }
            }
        }

        #[test]
        fn moving_an_event_only_changes_its_windows(seed in 0u64..1000) {
            let a = array(6, 6, 3, 1, 2, seed);
            let mut stream = synth_events(6, 6, 4000, 2.0, seed).unwrap();
            prop_assume!(!stream.is_empty());
            let mode = SimMode::Transient { params: DeviceParams::default(), variation: true };
            let before = run_stream(&a, &stream, &mode, 1000, seed).unwrap();
            let i = (seed as usize) % stream.events.len();
            let from = (stream.events[i].t / 1000) as usize;
            let to = (from + 2) % 4;
            let mut ev_moved = stream.events.remove(i);
            ev_moved.t = to as u64 * 1000 + 500;
            stream.events.push(ev_moved);
            let stream = EventStream::new(6, 6, 4000, stream.events).unwrap();
            let after = run_stream(&a, &stream, &mode, 1000, seed).unwrap();
            for wdx in 0..4 {
                if wdx != from && wdx != to {
                    prop_assert_eq!(&before.maps[wdx], &after.maps[wdx]);
                }
            }
        }
    }
}
