//! `p2m` — synthesize event streams, calibrate the device response,
//! simulate the in-pixel convolution layer, read it out over AER, and
//! estimate energy.
//!
//! Every command is a pure function of its config files and `--seed`.

mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use p2m_core::aer::{self, AerGeometry};
use p2m_core::device::{fit_response_poly, sample_device_grid, CalibrationPlan, DeviceParams};
use p2m_core::energy::{compare, EnergyConsts, Network, StreamStats};
use p2m_core::events::{synth_events, EventFormat};
use p2m_core::oracle::{equivalence_report, EquivalenceBounds};
use p2m_core::{ActivationMap, KvConfig};

use run::{RunConfig, Stats};

#[derive(Parser, Debug)]
#[command(name = "p2m", version, about = "In-pixel DVS convolution simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Root seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic Poisson event stream.
    Synth(SynthArgs),
    /// Monte-Carlo the device over a (weight, count) grid and fit the response model.
    Calibrate(CalibrateArgs),
    /// Run the convolution layer over a stream; write activations, AER dump and stats.
    Simulate(SimulateArgs),
    /// Compare frontend/backend energy of the baseline and in-pixel pipelines.
    Energy(EnergyArgs),
    /// Cross-check both simulation modes against the brute-force oracle.
    Verify(VerifyArgs),
    /// Expand an AER dump into a handshake trace and verify it.
    AerTrace(AerTraceArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    /// Stream duration (µs).
    #[arg(long, default_value_t = 10_000)]
    duration_us: u64,
    /// Mean events per pixel per millisecond.
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    /// Output format; inferred from the extension (`.csv` or binary) when absent.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Format {
    Csv,
    Binary,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Monte-Carlo trials per grid point (overrides `calibrate.trials`).
    #[arg(long)]
    trials: Option<usize>,
    /// Weight steps per sign (overrides `calibrate.weight_steps`).
    #[arg(long)]
    weight_steps: Option<usize>,
    /// Largest event count (overrides `calibrate.max_count`).
    #[arg(long)]
    max_count: Option<u32>,
    /// Variation sigma as a fraction of the step (overrides `device.sigma_frac`).
    #[arg(long)]
    sigma: Option<f64>,
    /// Also write the grid statistics as a whitespace-separated data file.
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Event stream (overrides `stream_file`).
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Response model (overrides `model_file`).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<run::ModeArg>,
    /// Window length in µs (overrides `window_us`).
    #[arg(long)]
    window_us: Option<u64>,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    /// `stats.txt` written by `simulate`.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Number of random instances, starting at `--seed`.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Largest sensor side.
    #[arg(long, default_value_t = 16)]
    max_side: usize,
    /// Offset added to the simulator's threshold only (fault injection).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    v_th_skew: f64,
}

#[derive(Args, Debug)]
struct AerTraceArgs {
    /// AER dump written by `simulate`.
    #[arg(long)]
    dump: PathBuf,
    /// Only this window.
    #[arg(long)]
    window: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&cli.common, a),
        Command::Calibrate(a) => cmd_calibrate(&cli.common, a),
        Command::Simulate(a) => cmd_simulate(&cli.common, a),
        Command::Energy(a) => cmd_energy(&cli.common, a),
        Command::Verify(a) => cmd_verify(&cli.common, a),
        Command::AerTrace(a) => cmd_aer_trace(&cli.common, a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().context("--out is required for this command")
}

fn load_config(c: &Common) -> Result<KvConfig> {
    match &c.config {
        Some(p) => KvConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(KvConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(c: &Common, a: &SynthArgs) -> Result<bool> {
    let out = require_out(c)?;
    let format = match a.format {
        Some(Format::Csv) => EventFormat::Csv,
        Some(Format::Binary) => EventFormat::Binary,
        None => EventFormat::from_path(out),
    };
    let stream = synth_events(a.width, a.height, a.duration_us, a.rate, c.seed)?;
    write(out, stream.to_bytes(format)?)?;
    println!("events = {}", stream.len());
    Ok(true)
}

fn cmd_calibrate(c: &Common, a: &CalibrateArgs) -> Result<bool> {
    let out = require_out(c)?;
    let cfg = load_config(c)?;
    let mut device = DeviceParams::from_config(&cfg)?;
    if let Some(s) = a.sigma {
        device.sigma_frac = s;
        device.validate()?;
    }
    let d = CalibrationPlan::default();
    let plan = CalibrationPlan::uniform(
        a.weight_steps
            .map_or_else(|| cfg.parse_or("calibrate.weight_steps", 20), Ok)?,
        a.max_count
            .map_or_else(|| cfg.parse_or("calibrate.max_count", 14), Ok)?,
        a.trials
            .map_or_else(|| cfg.parse_or("calibrate.trials", d.trials), Ok)?,
    );
    let grid = sample_device_grid(&device, &plan.weights, &plan.counts, plan.trials, c.seed)?;
    let model = fit_response_poly(&grid)?;
    write(out, model.to_config(&device).to_text())?;
    if let Some(path) = &a.grid_out {
        let mut text = String::from("# weight count u mean std fit_mean fit_std\n");
        for pt in &grid.points {
            let u = pt.u();
            text.push_str(&format!(
                "{} {} {} {:e} {:e} {:e} {:e}\n",
                pt.weight,
                pt.count,
                u,
                pt.mean(),
                pt.std(),
                model.mean(u)?,
                model.std(u)?
            ));
        }
        write(path, text)?;
    }
    println!("grid_points = {}", grid.points.len());
    println!("trials = {}", grid.trials);
    println!("fit_rmse = {}", model.fit_rmse);
    Ok(true)
}

fn cmd_simulate(c: &Common, a: &SimulateArgs) -> Result<bool> {
    let out = require_out(c)?;
    let cfg = load_config(c)?;
    let rc = RunConfig::resolve(
        &cfg,
        c.seed,
        a.stream.as_deref(),
        a.model.as_deref(),
        a.mode,
        a.window_us,
    )?;
    let (stats, maps, words) = rc.execute()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("activations.txt"), run::format_activations(&maps))?;
    write(&out.join("aer.bin"), aer::write_dump(&words, &stats.geometry))?;
    write(&out.join("stats.txt"), stats.to_kv())?;
    println!(
        "windows = {}\ninput_events = {}\noutput_spikes = {}\nsparsity = {}",
        stats.spike_counts.len(),
        stats.input_events,
        stats.output_spikes(),
        stats.sparsity
    );
    Ok(true)
}

fn cmd_energy(c: &Common, a: &EnergyArgs) -> Result<bool> {
    let cfg = load_config(c)?;
    if c.config.is_none() {
        bail!("--config with energy constants and network layers is required");
    }
    let consts = EnergyConsts::from_config(&cfg)?;
    let mut net = Network::from_config(&cfg)?;
    let first = net.layers[0].clone();
    let sensor_w = cfg.parse_or("sensor.width", 128usize)?;
    let sensor_h = cfg.parse_or("sensor.height", 128usize)?;
    let mut geometry = AerGeometry::new(
        first.w_o as usize,
        first.h_o as usize,
        first.c_o as usize,
        sensor_w,
        sensor_h,
    );
    let mut stats = StreamStats {
        input_events: cfg.parse_or("stream.input_events", 0)?,
        output_spikes: cfg.parse_or("stream.output_spikes", 0)?,
    };
    if let Some(path) = &a.stats {
        let s = Stats::load(path)?;
        geometry = s.geometry;
        stats = StreamStats {
            input_events: s.input_events,
            output_spikes: s.output_spikes(),
        };
        // measured first-layer output activity drives the next layer
        if let Some(l2) = net.layers.get_mut(1) {
            l2.s = s.sparsity;
        }
    }
    let cmp = compare(&net, stats, &geometry, &consts);
    print!("{}", cmp.to_table());
    if let Some(out) = &c.out {
        write(out, cmp.to_kv())?;
    }
    Ok(true)
}

fn cmd_verify(c: &Common, a: &VerifyArgs) -> Result<bool> {
    let bounds = EquivalenceBounds {
        max_side: a.max_side,
        ..EquivalenceBounds::default()
    };
    let seeds = c.seed..c.seed.saturating_add(a.seeds);
    let report = equivalence_report(seeds.clone(), &bounds, a.v_th_skew)?;
    let mut text = format!(
        "seeds = {}..{}\nseeds_run = {}\nsites_compared = {}\nresult = {}\n",
        seeds.start,
        seeds.end,
        report.seeds_run,
        report.sites_compared,
        if report.passed() { "pass" } else { "fail" }
    );
    if let Some(ce) = &report.first_mismatch {
        text.push_str(&format!(
            "counterexample = seed {} mode {} site ({}, {}) channel {} simulated {} oracle {}\n",
            ce.seed, ce.mode, ce.x, ce.y, ce.channel, ce.simulated as u8, ce.expected as u8
        ));
    }
    print!("{text}");
    if let Some(out) = &c.out {
        write(out, &text)?;
    }
    Ok(report.passed())
}

fn cmd_aer_trace(c: &Common, a: &AerTraceArgs) -> Result<bool> {
    let bytes = fs::read(&a.dump).with_context(|| format!("reading {}", a.dump.display()))?;
    let (g, windows) = aer::read_dump(&bytes)?;
    let mut text = String::new();
    let mut edges = 0usize;
    for (k, words) in windows.iter().enumerate() {
        if a.window.is_some_and(|w| w != k) {
            continue;
        }
        let mut map = ActivationMap::zeros(g.out_width, g.out_height, g.channels, k);
        for w in words {
            map.set(w.x, w.y, w.channel, true);
        }
        let (_, trace) = aer::encode_window(&map, &g)?;
        let replayed = aer::replay_trace(&trace, &g)?;
        if !replayed.same_spikes(&map) {
            bail!("window {k}: replayed trace does not reproduce the map");
        }
        edges += trace.len();
        text.push_str(&format!("# window {k} words {}\n", words.len()));
        text.push_str(&aer::format_trace(&trace));
    }
    if let Some(w) = a.window {
        if w >= windows.len() {
            bail!("window {w} not in dump ({} windows)", windows.len());
        }
    }
    match &c.out {
        Some(out) => write(out, &text)?,
        None => print!("{text}"),
    }
    eprintln!("windows = {}, edges = {edges}, replay = ok", windows.len());
    Ok(true)
}
