//! Frontend (sensing + communication) and backend (network layers) energy
//! for a conventional DVS pipeline and for in-pixel first-layer processing.
//!
//! ```text
//! E_frontend = E_sens + (e_sens_to_tx + e_tx) * N_event * bits_per_event
//! E_backend  = Σ_layers  e_ac * N_ac * s * T  +  e_read * N_read
//! N_ac   = h_o * w_o * k² * c_i * c_o
//! N_read = k² * c_i * c_o
//! ```
//!
//! In the baseline the first layer uses `e_mac` and `s = 1`; in-pixel mode
//! drops the first layer from the backend altogether.

use std::fmt::Write as _;

use crate::aer::AerGeometry;
use crate::config::KvConfig;
use crate::device::fmt_f64;
use crate::error::{Error, Result};

/// Ratio of 32-bit fixed-point MAC to accumulate energy cited alongside
/// the table values.
pub const CITED_FIXED_POINT_MAC_AC_RATIO: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    P2m,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::P2m => "p2m",
        }
    }
}

/// Energy constants in joules (per event, per bit, per operation, or
/// lumped totals).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConsts {
    pub e_event: f64,
    pub e_bias: f64,
    pub e_sens_to_tx: f64,
    pub e_tx: f64,
    pub e_mac: f64,
    pub e_ac: f64,
    pub e_read: f64,
    /// Lumped sensing energy; overrides `e_event * N + e_bias` when set.
    pub e_sens_p2m: Option<f64>,
    pub e_sens_base: Option<f64>,
}

impl EnergyConsts {
    /// 22 nm table values. The communication cost (4.1 pJ/bit) is carried
    /// entirely by `e_tx`; `e_read` (5 pJ per parameter) is an assumption.
    pub fn reference_22nm() -> Self {
        EnergyConsts {
            e_event: 0.0,
            e_bias: 0.0,
            e_sens_to_tx: 0.0,
            e_tx: 4.1e-12,
            e_mac: 1.568e-12,
            e_ac: 0.03e-12,
            e_read: 5e-12,
            e_sens_p2m: Some(26.588e-3),
            e_sens_base: Some(26.032e-3),
        }
    }

    pub fn e_comm(&self) -> f64 {
        self.e_sens_to_tx + self.e_tx
    }

    pub fn e_sens(&self, n_event: u64, mode: Mode) -> f64 {
        let lumped = match mode {
            Mode::Baseline => self.e_sens_base,
            Mode::P2m => self.e_sens_p2m,
        };
        lumped.unwrap_or(self.e_event * n_event as f64 + self.e_bias)
    }

    /// Every constant multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        EnergyConsts {
            e_event: self.e_event * alpha,
            e_bias: self.e_bias * alpha,
            e_sens_to_tx: self.e_sens_to_tx * alpha,
            e_tx: self.e_tx * alpha,
            e_mac: self.e_mac * alpha,
            e_ac: self.e_ac * alpha,
            e_read: self.e_read * alpha,
            e_sens_p2m: self.e_sens_p2m.map(|e| e * alpha),
            e_sens_base: self.e_sens_base.map(|e| e * alpha),
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            Some(self.e_event),
            Some(self.e_bias),
            Some(self.e_sens_to_tx),
            Some(self.e_tx),
            Some(self.e_mac),
            Some(self.e_ac),
            Some(self.e_read),
            self.e_sens_p2m,
            self.e_sens_base,
        ];
        if all.iter().flatten().all(|e| e.is_finite() && *e >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "energy constants must be finite and >= 0".into(),
            ))
        }
    }

    /// Reads `energy.*` keys (joules). Every per-operation constant is
    /// required; the lumped sensing energies are optional.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let req = |key: &str| -> Result<f64> {
            cfg.require(key)?;
            Ok(cfg.parse(key)?.expect("present"))
        };
        let c = EnergyConsts {
            e_event: req("energy.e_event")?,
            e_bias: req("energy.e_bias")?,
            e_sens_to_tx: req("energy.e_sens_to_tx")?,
            e_tx: req("energy.e_tx")?,
            e_mac: req("energy.e_mac")?,
            e_ac: req("energy.e_ac")?,
            e_read: req("energy.e_read")?,
            e_sens_p2m: cfg.parse("energy.e_sens_p2m")?,
            e_sens_base: cfg.parse("energy.e_sens_base")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub h_o: u64,
    pub w_o: u64,
    pub c_i: u64,
    pub c_o: u64,
    pub k: u64,
    /// Fraction of active inputs.
    pub s: f64,
    pub is_first_layer: bool,
}

impl LayerShape {
    pub fn new(name: &str, h_o: u64, w_o: u64, c_i: u64, c_o: u64, k: u64, s: f64) -> Result<Self> {
        if [h_o, w_o, c_i, c_o, k].contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "layer {name}: dimensions must be >= 1"
            )));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidParameter(format!(
                "layer {name}: sparsity {s} outside [0, 1]"
            )));
        }
        Ok(LayerShape {
            name: name.to_string(),
            h_o,
            w_o,
            c_i,
            c_o,
            k,
            s,
            is_first_layer: false,
        })
    }

    /// Parses `name h_o w_o c_i c_o k s`.
    pub fn parse(spec: &str) -> Result<Self> {
        let f: Vec<&str> = spec.split_whitespace().collect();
        let bad = |msg: String| Error::InvalidParameter(format!("layer `{spec}`: {msg}"));
        if f.len() != 7 {
            return Err(bad("expected `name h_o w_o c_i c_o k s`".into()));
        }
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| bad(e.to_string()));
        let s = f[6].parse::<f64>().map_err(|e| bad(e.to_string()))?;
        LayerShape::new(f[0], int(1)?, int(2)?, int(3)?, int(4)?, int(5)?, s)
    }
}

pub fn n_ac(l: &LayerShape) -> u64 {
    l.h_o * l.w_o * l.k * l.k * l.c_i * l.c_o
}

pub fn n_read(l: &LayerShape) -> u64 {
    l.k * l.k * l.c_i * l.c_o
}

/// A network plus the number of algorithmic time steps it runs for.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<LayerShape>,
    pub time_steps: u64,
}

impl Network {
    /// Reads repeated `layer = name h_o w_o c_i c_o k s` lines (the first
    /// is the in-pixel layer) and `time_steps`.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let mut layers = cfg
            .get_all("layer")
            .map(LayerShape::parse)
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network has no `layer` entries".into()));
        }
        layers[0].is_first_layer = true;
        let time_steps = cfg.parse_or("time_steps", 1u64)?;
        Ok(Network { layers, time_steps })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub e_compute: f64,
    pub e_read: f64,
}

impl LayerEnergy {
    pub fn total(&self) -> f64 {
        self.e_compute + self.e_read
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub mode: Mode,
    pub n_event: u64,
    pub bits_per_event: u32,
    pub time_steps: u64,
    pub e_sens: f64,
    pub e_com: f64,
    pub layers: Vec<LayerEnergy>,
}

impl EnergyReport {
    pub fn frontend(&self) -> f64 {
        self.e_sens + self.e_com
    }

    pub fn backend(&self) -> f64 {
        self.layers.iter().map(LayerEnergy::total).sum()
    }

    pub fn total(&self) -> f64 {
        self.frontend() + self.backend()
    }
}

pub fn bits_per_event(g: &AerGeometry, mode: Mode) -> u32 {
    match mode {
        Mode::Baseline => g.baseline_bits(),
        Mode::P2m => g.per_event_bits(),
    }
}

pub fn frontend_energy(n_event: u64, g: &AerGeometry, c: &EnergyConsts, mode: Mode) -> f64 {
    c.e_sens(n_event, mode) + c.e_comm() * n_event as f64 * f64::from(bits_per_event(g, mode))
}

/// Per-layer backend energy; layers offloaded in `mode` are omitted.
pub fn backend_layers(layers: &[LayerShape], time_steps: u64, c: &EnergyConsts, mode: Mode) -> Vec<LayerEnergy> {
    let t = time_steps as f64;
    layers
        .iter()
        .filter(|l| !(l.is_first_layer && mode == Mode::P2m))
        .map(|l| {
            let e_compute = if l.is_first_layer {
                c.e_mac * n_ac(l) as f64 * t
            } else {
                c.e_ac * n_ac(l) as f64 * l.s * t
            };
            LayerEnergy {
                name: l.name.clone(),
                e_compute,
                e_read: c.e_read * n_read(l) as f64,
            }
        })
        .collect()
}

pub fn backend_energy(layers: &[LayerShape], time_steps: u64, c: &EnergyConsts, mode: Mode) -> f64 {
    backend_layers(layers, time_steps, c, mode)
        .iter()
        .map(LayerEnergy::total)
        .sum()
}

pub fn report(n_event: u64, g: &AerGeometry, net: &Network, c: &EnergyConsts, mode: Mode) -> EnergyReport {
    let bits = bits_per_event(g, mode);
    EnergyReport {
        mode,
        n_event,
        bits_per_event: bits,
        time_steps: net.time_steps,
        e_sens: c.e_sens(n_event, mode),
        e_com: c.e_comm() * n_event as f64 * f64::from(bits),
        layers: backend_layers(&net.layers, net.time_steps, c, mode),
    }
}

/// Event counts feeding the comparison: raw sensor events leave the
/// baseline sensor, first-layer output spikes leave the in-pixel array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStats {
    pub input_events: u64,
    pub output_spikes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: EnergyReport,
    pub p2m: EnergyReport,
    pub consts: EnergyConsts,
}

impl Comparison {
    /// In-pixel over baseline frontend energy.
    pub fn frontend_ratio(&self) -> f64 {
        self.p2m.frontend() / self.baseline.frontend()
    }

    /// Baseline over in-pixel backend energy.
    pub fn backend_ratio(&self) -> f64 {
        self.baseline.backend() / self.p2m.backend()
    }

    /// Share of the baseline backend spent in the first layer.
    pub fn first_layer_share(&self) -> f64 {
        self.baseline.layers.first().map_or(0.0, LayerEnergy::total) / self.baseline.backend()
    }

    pub fn sensing_ratio(&self) -> f64 {
        self.p2m.e_sens / self.baseline.e_sens
    }

    pub fn mac_ac_ratio(&self) -> f64 {
        self.consts.e_mac / self.consts.e_ac
    }

    /// Fixed-width text table plus summary lines.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>14} {:>14}", "", "frontend (J)", "backend (J)");
        for r in [&self.baseline, &self.p2m] {
            let _ = writeln!(
                out,
                "{:<10} {:>14.6e} {:>14.6e}",
                r.mode.name(),
                r.frontend(),
                r.backend()
            );
        }
        let _ = writeln!(
            out,
            "sensing energy (mJ)            baseline {:.3}, p2m {:.3}",
            self.baseline.e_sens * 1e3,
            self.p2m.e_sens * 1e3
        );
        let _ = writeln!(out, "frontend ratio (p2m/baseline)  {:.4}", self.frontend_ratio());
        let _ = writeln!(out, "backend ratio (baseline/p2m)   {:.4}", self.backend_ratio());
        let _ = writeln!(out, "baseline first-layer share     {:.4}", self.first_layer_share());
        let _ = writeln!(
            out,
            "e_mac/e_ac                     {:.2} (cited fixed-point: {})",
            self.mac_ac_ratio(),
            CITED_FIXED_POINT_MAC_AC_RATIO
        );
        out
    }

    /// Line-oriented `key = value` rendering.
    pub fn to_kv(&self) -> String {
        let mut cfg = KvConfig::default();
        for r in [&self.baseline, &self.p2m] {
            let m = r.mode.name();
            cfg.insert(format!("{m}.n_event"), r.n_event);
            cfg.insert(format!("{m}.bits_per_event"), r.bits_per_event);
            cfg.insert(format!("{m}.e_sens"), fmt_f64(r.e_sens));
            cfg.insert(format!("{m}.e_com"), fmt_f64(r.e_com));
            cfg.insert(format!("{m}.frontend"), fmt_f64(r.frontend()));
            cfg.insert(format!("{m}.backend"), fmt_f64(r.backend()));
            for l in &r.layers {
                cfg.insert(format!("{m}.layer.{}", l.name), fmt_f64(l.total()));
            }
        }
        cfg.insert("ratio.frontend", fmt_f64(self.frontend_ratio()));
        cfg.insert("ratio.backend", fmt_f64(self.backend_ratio()));
        cfg.insert("ratio.sensing", fmt_f64(self.sensing_ratio()));
        cfg.insert("ratio.mac_ac", fmt_f64(self.mac_ac_ratio()));
        cfg.insert(
            "ratio.mac_ac_cited_fixed_point",
            fmt_f64(CITED_FIXED_POINT_MAC_AC_RATIO),
        );
        cfg.insert("baseline.first_layer_share", fmt_f64(self.first_layer_share()));
        cfg.to_text()
    }
}

pub fn compare(net: &Network, stats: StreamStats, g: &AerGeometry, c: &EnergyConsts) -> Comparison {
    Comparison {
        baseline: report(stats.input_events, g, net, c, Mode::Baseline),
        p2m: report(stats.output_spikes, g, net, c, Mode::P2m),
        consts: *c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn first(h: u64, ci: u64, co: u64) -> LayerShape {
        LayerShape {
            is_first_layer: true,
            ..LayerShape::new("conv1", h, h, ci, co, 3, 1.0).unwrap()
        }
    }

    fn gesture() -> Network {
        let mut layers = vec![
            first(63, 2, 32),
            LayerShape::new("conv2", 63, 63, 32, 64, 3, 0.2).unwrap(),
            LayerShape::new("conv3", 31, 31, 64, 128, 3, 0.2).unwrap(),
            LayerShape::new("conv4", 15, 15, 128, 128, 3, 0.2).unwrap(),
            LayerShape::new("fc1", 1, 1, 6272, 512, 1, 0.2).unwrap(),
            LayerShape::new("fc2", 1, 1, 512, 10, 1, 0.2).unwrap(),
        ];
        layers[0].is_first_layer = true;
        Network { layers, time_steps: 10 }
    }

    fn geom() -> AerGeometry {
        AerGeometry::new(63, 63, 32, 128, 128)
    }

    #[test]
    fn op_counts() {
        let unit = LayerShape::new("u", 1, 1, 1, 1, 1, 1.0).unwrap();
        assert_eq!((n_ac(&unit), n_read(&unit)), (1, 1));
        let l = first(63, 2, 32);
        assert_eq!(n_ac(&l), 2_286_144);
        assert_eq!(n_read(&l), 576);
        let wide = LayerShape { c_o: 64, ..l.clone() };
        assert_eq!(n_ac(&wide), 2 * n_ac(&l));
        let small = LayerShape {
            h_o: 1,
            w_o: 1,
            ..l.clone()
        };
        assert_eq!(n_read(&small), n_read(&l));
    }

    #[test]
    fn frontend_examples() {
        let c = EnergyConsts::reference_22nm();
        assert_eq!(frontend_energy(0, &geom(), &c, Mode::P2m), 26.588e-3);
        let base = frontend_energy(1000, &geom(), &c, Mode::Baseline) - 26.032e-3;
        let p2m = frontend_energy(1000, &geom(), &c, Mode::P2m) - 26.588e-3;
        assert!(rel(base / p2m, 15.0 / 12.0) < 1e-9);
    }

    #[test]
    fn analytic_sensing_when_not_lumped() {
        let c = EnergyConsts {
            e_event: 2e-12,
            e_bias: 1e-6,
            e_sens_p2m: None,
            e_sens_base: None,
            ..EnergyConsts::reference_22nm()
        };
        assert_eq!(c.e_sens(1000, Mode::Baseline), 2e-9 + 1e-6);
    }

    #[test]
    fn baseline_first_layer_uses_mac() {
        let c = EnergyConsts::reference_22nm();
        let l = vec![first(63, 2, 32)];
        let e = backend_energy(&l, 1, &c, Mode::Baseline);
        assert!(rel(e, 2_286_144.0 * 1.568e-12 + 576.0 * c.e_read) < 1e-12);
        assert!((2_286_144.0f64 * 1.568e-12 - 3.585e-6).abs() < 1e-9);
        assert_eq!(backend_energy(&l, 1, &c, Mode::P2m), 0.0);
        assert!(rel(c.e_mac / c.e_ac, 52.27) < 1e-3);
    }

    #[test]
    fn gesture_network_reduction() {
        let cmp = compare(
            &gesture(),
            StreamStats {
                input_events: 0,
                output_spikes: 0,
            },
            &geom(),
            &EnergyConsts::reference_22nm(),
        );
        assert!(cmp.first_layer_share() > 0.5, "{}", cmp.first_layer_share());
        let r = cmp.backend_ratio();
        assert!((1.8..=2.5).contains(&r), "{r}");
        assert!(rel(cmp.frontend_ratio(), 26.588 / 26.032) < 1e-12);
        assert!(rel(cmp.sensing_ratio(), 1.021) < 0.005);
        assert!(cmp.to_kv().contains("ratio.backend = "));
    }

    #[test]
    fn network_and_consts_from_config() {
        let text = "layer = conv1 63 63 2 32 3 1\nlayer = conv2 63 63 32 64 3 0.2\ntime_steps = 4\n\
                    energy.e_event = 0\nenergy.e_bias = 0\nenergy.e_sens_to_tx = 0\nenergy.e_tx = 4.1e-12\n\
                    energy.e_mac = 1.568e-12\nenergy.e_ac = 3e-14\nenergy.e_read = 5e-12\n";
        let cfg = KvConfig::parse_str(text).unwrap();
        let net = Network::from_config(&cfg).unwrap();
        assert_eq!(net.time_steps, 4);
        assert!(net.layers[0].is_first_layer && !net.layers[1].is_first_layer);
        let c = EnergyConsts::from_config(&cfg).unwrap();
        assert_eq!(c.e_sens_p2m, None);
        let missing = KvConfig::parse_str("energy.e_mac = 1").unwrap();
        assert!(EnergyConsts::from_config(&missing).is_err());
        assert!(LayerShape::parse("x 1 1 1 1 1 2.0").is_err());
        assert!(LayerShape::parse("x 1 0 1 1 1 0.5").is_err());
    }

    proptest! {
        #[test]
        fn totals_scale_linearly(alpha in 0.01f64..100.0, n_in in 0u64..1_000_000, n_out in 0u64..100_000) {
            let c = EnergyConsts::reference_22nm();
            let stats = StreamStats { input_events: n_in, output_spikes: n_out };
            let a = compare(&gesture(), stats, &geom(), &c);
            let b = compare(&gesture(), stats, &geom(), &c.scaled(alpha));
            for (x, y) in [(&a.baseline, &b.baseline), (&a.p2m, &b.p2m)] {
                prop_assert!(rel(y.frontend(), alpha * x.frontend()) < 1e-12);
                prop_assert!(rel(y.backend(), alpha * x.backend()) < 1e-12);
                prop_assert!(rel(y.total(), alpha * x.total()) < 1e-12);
            }
        }

        #[test]
        fn offloading_first_layer_always_helps(
            h in 1u64..64, ci in 1u64..8, co in 1u64..64, s in 0.0f64..=1.0, t in 1u64..20,
        ) {
            let c = EnergyConsts::reference_22nm();
            let layers = vec![first(h, ci, co), LayerShape::new("l2", h, h, co, co, 3, s).unwrap()];
            prop_assert!(backend_energy(&layers, t, &c, Mode::P2m) < backend_energy(&layers, t, &c, Mode::Baseline));
        }

        #[test]
        fn dominant_first_layer_halves_backend(h in 1u64..64, ci in 1u64..8, co in 1u64..64, t in 1u64..20) {
            // premise: first-layer MAC energy >= everything else
            let c = EnergyConsts::reference_22nm();
            let l1 = first(h, ci, co);
            let mac = c.e_mac * n_ac(&l1) as f64 * t as f64;
            let l2 = LayerShape::new("l2", 1, 1, 1, 1, 1, 1.0).unwrap();
            let other = c.e_read * n_read(&l1) as f64 + backend_energy(std::slice::from_ref(&l2), t, &c, Mode::Baseline);
            prop_assume!(mac >= other);
            let layers = vec![l1, l2];
            let ratio = backend_energy(&layers, t, &c, Mode::Baseline) / backend_energy(&layers, t, &c, Mode::P2m);
            prop_assert!(ratio >= 2.0);
        }
    }
}
