//! Run configuration for `simulate` and the statistics file it writes.
//!
//! ```text
//! stream_file = gesture.bin          # or --stream
//! mode = fitted                      # fitted | transient
//! model_file = model.cfg             # fitted mode; calibrated in-process when absent
//! window_us = 1000
//! variation = true
//! kernel.k = 3
//! kernel.stride = 2
//! kernel.channels = 32
//! kernel.v_th = 0.45
//! kernel.weights = random            # or a weight tensor file
//! device.* / area.* / calibrate.*    # optional overrides
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;

use p2m_core::aer::{self, AerGeometry, AerWord};
use p2m_core::array::{build_array, run_stream, AreaBudget, KernelSpec, SimMode};
use p2m_core::device::{fit_response_poly, sample_device_grid, CalibrationPlan, DeviceParams, ResponseModel};
use p2m_core::events::{parse_event_stream, EventFormat};
use p2m_core::{ActivationMap, KvConfig};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Fitted,
    Transient,
}

pub struct RunConfig {
    pub stream: PathBuf,
    pub mode: ModeArg,
    pub window_us: u64,
    pub variation: bool,
    pub seed: u64,
    pub device: DeviceParams,
    pub kernel: KernelSpec,
    pub budget: AreaBudget,
    pub model: Option<ResponseModel>,
}

impl RunConfig {
    pub fn resolve(
        cfg: &KvConfig,
        seed: u64,
        stream: Option<&Path>,
        model: Option<&Path>,
        mode: Option<ModeArg>,
        window_us: Option<u64>,
    ) -> Result<Self> {
        let stream = match stream {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from(
                cfg.get("stream_file")
                    .context("no stream: pass --stream or set stream_file")?,
            ),
        };
        if !stream.is_file() {
            bail!("stream file {} does not exist", stream.display());
        }
        let mode = match mode {
            Some(m) => m,
            None => match cfg.get("mode").unwrap_or("fitted") {
                "fitted" => ModeArg::Fitted,
                "transient" => ModeArg::Transient,
                other => bail!("mode `{other}` is not fitted or transient"),
            },
        };
        let window_us = match window_us {
            Some(w) => w,
            None => cfg.parse_or("window_us", 1000)?,
        };
        let device = DeviceParams::from_config(cfg)?;
        let model = match mode {
            ModeArg::Transient => None,
            ModeArg::Fitted => Some(
                match model
                    .map(Path::to_path_buf)
                    .or_else(|| cfg.get("model_file").map(PathBuf::from))
                {
                    Some(path) => ResponseModel::from_config(
                        &KvConfig::load(&path).with_context(|| format!("loading model {}", path.display()))?,
                    )?,
                    None => {
                        let plan = CalibrationPlan::uniform(
                            cfg.parse_or("calibrate.weight_steps", 20)?,
                            cfg.parse_or("calibrate.max_count", 14)?,
                            cfg.parse_or("calibrate.trials", CalibrationPlan::default().trials)?,
                        );
                        fit_response_poly(&sample_device_grid(
                            &device,
                            &plan.weights,
                            &plan.counts,
                            plan.trials,
                            seed,
                        )?)?
                    }
                },
            ),
        };
        Ok(RunConfig {
            stream,
            mode,
            window_us,
            variation: cfg.parse_or("variation", true)?,
            seed,
            device,
            kernel: KernelSpec::from_config(cfg, seed)?,
            budget: AreaBudget::from_config(cfg)?,
            model,
        })
    }

    pub fn execute(&self) -> Result<(Stats, Vec<ActivationMap>, Vec<Vec<AerWord>>)> {
        let bytes = fs::read(&self.stream).with_context(|| format!("reading {}", self.stream.display()))?;
        let stream = parse_event_stream(&bytes, EventFormat::from_path(&self.stream))
            .with_context(|| format!("parsing {}", self.stream.display()))?;
        let array = build_array(
            stream.width as usize,
            stream.height as usize,
            self.kernel.clone(),
            &self.budget,
        )?;
        let mode = match (&self.model, self.mode) {
            (Some(model), ModeArg::Fitted) => SimMode::Fitted {
                model: model.clone(),
                variation: self.variation,
            },
            _ => SimMode::Transient {
                params: self.device,
                variation: self.variation,
            },
        };
        let out = run_stream(&array, &stream, &mode, self.window_us, self.seed)?;
        let geometry = AerGeometry::new(
            array.out_width,
            array.out_height,
            array.spec.channels,
            array.sensor_width,
            array.sensor_height,
        );
        let words = out
            .maps
            .iter()
            .map(|m| aer::encode_window(m, &geometry).map(|(w, _)| w))
            .collect::<p2m_core::Result<Vec<_>>>()?;
        let stats = Stats {
            geometry,
            window_us: self.window_us,
            input_events: stream.len() as u64,
            payload_bits: words.iter().map(|w| aer::window_bits(w, &geometry)).sum(),
            sparsity: out.sparsity(),
            spike_counts: out.spike_counts.clone(),
        };
        Ok((stats, out.maps, words))
    }
}

/// One line per spike: `window x y channel`.
pub fn format_activations(maps: &[ActivationMap]) -> String {
    let mut out = String::from("# window x y channel\n");
    for m in maps {
        for y in 0..m.out_height {
            for x in 0..m.out_width {
                for c in 0..m.channels {
                    if m.get(x, y, c) {
                        let _ = writeln!(out, "{} {x} {y} {c}", m.window);
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub geometry: AerGeometry,
    pub window_us: u64,
    pub input_events: u64,
    pub spike_counts: Vec<usize>,
    pub sparsity: f64,
    pub payload_bits: u64,
}

impl Stats {
    pub fn output_spikes(&self) -> u64 {
        self.spike_counts.iter().map(|&n| n as u64).sum()
    }

    pub fn to_kv(&self) -> String {
        let g = &self.geometry;
        let mut cfg = KvConfig::default();
        cfg.insert("sensor.width", g.sensor_width);
        cfg.insert("sensor.height", g.sensor_height);
        cfg.insert("out.width", g.out_width);
        cfg.insert("out.height", g.out_height);
        cfg.insert("out.channels", g.channels);
        cfg.insert("window_us", self.window_us);
        cfg.insert("windows", self.spike_counts.len());
        cfg.insert("input_events", self.input_events);
        cfg.insert("output_spikes", self.output_spikes());
        cfg.insert("sparsity", self.sparsity);
        cfg.insert("aer.per_event_bits", g.per_event_bits());
        cfg.insert("aer.baseline_bits", g.baseline_bits());
        cfg.insert("aer.payload_bits", self.payload_bits);
        let counts: Vec<String> = self.spike_counts.iter().map(usize::to_string).collect();
        cfg.insert("spikes_per_window", counts.join(" "));
        cfg.to_text()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = KvConfig::load(path).with_context(|| format!("loading stats {}", path.display()))?;
        let num = |key: &str| -> Result<usize> {
            cfg.parse(key)?
                .with_context(|| format!("{}: missing `{key}`", path.display()))
        };
        let spike_counts = cfg
            .get("spikes_per_window")
            .unwrap_or("")
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .context("spikes_per_window")?;
        Ok(Stats {
            geometry: AerGeometry::new(
                num("out.width")?,
                num("out.height")?,
                num("out.channels")?,
                num("sensor.width")?,
                num("sensor.height")?,
            ),
            window_us: num("window_us")? as u64,
            input_events: num("input_events")? as u64,
            sparsity: cfg.parse("sparsity")?.context("missing `sparsity`")?,
            payload_bits: num("aer.payload_bits")? as u64,
            spike_counts,
        })
    }
}
