//! Behavioral model of one weight transistor charging or discharging the
//! kernel capacitor.
//!
//! Each input event moves the capacitor voltage by a step proportional to
//! the normalized weight. Negative weights (nMOS pull-down) step by
//! `asym` times the positive magnitude. Near a rail the weight transistor
//! leaves saturation and the step shrinks linearly with the remaining
//! headroom once that headroom drops below `knee`.

mod calibration;

pub use calibration::{
    fit_response_poly, sample_device_grid, CalibrationPlan, Cubic, DeviceSampleGrid, GridPoint, ResponseModel,
    MODEL_FORMAT,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Direction of the residual leakage drift left after the nulling current.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeakDirection {
    Down,
    Up,
}

impl LeakDirection {
    pub fn sign(self) -> f64 {
        match self {
            LeakDirection::Down => -1.0,
            LeakDirection::Up => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceParams {
    /// Supply voltage (V).
    pub vdd: f64,
    /// Voltage step per event at |w| = 1, positive weight (V).
    pub max_step: f64,
    /// Headroom below which the step rolls off (V). Zero disables roll-off.
    pub knee: f64,
    /// Negative-weight step magnitude relative to positive.
    pub asym: f64,
    /// Per-step standard deviation as a fraction of the step, clipped at 3 sigma.
    pub sigma_frac: f64,
    /// Worst-case (all weights at full scale) residual leakage (V/ms).
    pub leak_rate_max: f64,
    pub leak_direction: LeakDirection,
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams {
            vdd: 0.8,
            max_step: 0.025,
            knee: 0.1,
            asym: 0.9,
            sigma_frac: 0.05,
            leak_rate_max: 0.022,
            leak_direction: LeakDirection::Down,
        }
    }
}

impl DeviceParams {
    /// An ideal device: no roll-off, symmetric, noiseless, leak-free.
    pub fn linear(vdd: f64, max_step: f64) -> Self {
        DeviceParams {
            vdd,
            max_step,
            knee: 0.0,
            asym: 1.0,
            sigma_frac: 0.0,
            leak_rate_max: 0.0,
            leak_direction: LeakDirection::Down,
        }
    }

    #[inline]
    pub fn v_reset(&self) -> f64 {
        0.5 * self.vdd
    }

    pub fn validate(&self) -> Result<()> {
        let half = 0.5 * self.vdd;
        let checks = [
            (self.vdd > 0.0 && self.vdd.is_finite(), "vdd must be positive"),
            (
                self.max_step > 0.0 && self.max_step < half,
                "max_step must be in (0, vdd/2)",
            ),
            (self.knee >= 0.0 && self.knee < half, "knee must be in [0, vdd/2)"),
            (self.asym > 0.0 && self.asym <= 1.0, "asym must be in (0, 1]"),
            (
                self.sigma_frac >= 0.0 && self.sigma_frac.is_finite(),
                "sigma_frac must be >= 0",
            ),
            (
                self.leak_rate_max >= 0.0 && self.leak_rate_max.is_finite(),
                "leak_rate_max must be >= 0",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidParameter((*msg).into())),
            None => Ok(()),
        }
    }

    /// Reads `device.*` keys, falling back to defaults for absent ones.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = DeviceParams::default();
        let leak_direction = match cfg.get("device.leak_direction").unwrap_or("down") {
            "down" => LeakDirection::Down,
            "up" => LeakDirection::Up,
            other => return Err(Error::InvalidParameter(format!("leak_direction `{other}`"))),
        };
        let p = DeviceParams {
            vdd: cfg.parse_or("device.vdd", d.vdd)?,
            max_step: cfg.parse_or("device.max_step", d.max_step)?,
            knee: cfg.parse_or("device.knee", d.knee)?,
            asym: cfg.parse_or("device.asym", d.asym)?,
            sigma_frac: cfg.parse_or("device.sigma_frac", d.sigma_frac)?,
            leak_rate_max: cfg.parse_or("device.leak_rate_max", d.leak_rate_max)?,
            leak_direction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn write_config(&self, cfg: &mut KvConfig) {
        cfg.insert("device.vdd", fmt_f64(self.vdd));
        cfg.insert("device.max_step", fmt_f64(self.max_step));
        cfg.insert("device.knee", fmt_f64(self.knee));
        cfg.insert("device.asym", fmt_f64(self.asym));
        cfg.insert("device.sigma_frac", fmt_f64(self.sigma_frac));
        cfg.insert("device.leak_rate_max", fmt_f64(self.leak_rate_max));
        cfg.insert(
            "device.leak_direction",
            match self.leak_direction {
                LeakDirection::Down => "down",
                LeakDirection::Up => "up",
            },
        );
    }
}

/// Shortest round-trip decimal rendering, switching to exponent form for
/// very small or large magnitudes.
pub(crate) fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e7).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn check_weight(w: f64) -> Result<()> {
    if w.is_finite() && w.abs() <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "normalized weight {w} outside [-1, 1]"
        )))
    }
}

/// Linear idealization: `w * max_step`, scaled by `asym` for negative weights.
pub fn ideal_step(w: f64, p: &DeviceParams) -> Result<f64> {
    check_weight(w)?;
    Ok(if w >= 0.0 {
        w * p.max_step
    } else {
        w * p.max_step * p.asym
    })
}

#[inline]
fn roll_off(headroom: f64, knee: f64) -> f64 {
    if knee == 0.0 {
        1.0
    } else {
        (headroom / knee).min(1.0)
    }
}

/// Voltage-dependent step from capacitor voltage `v`; the result never moves
/// `v` past a rail.
pub fn nonlinear_step(w: f64, v: f64, p: &DeviceParams) -> Result<f64> {
    if !(0.0..=p.vdd).contains(&v) {
        return Err(Error::VoltageOutsideRails { v, vdd: p.vdd });
    }
    let ideal = ideal_step(w, p)?;
    let headroom = if w > 0.0 { p.vdd - v } else { v };
    let dv = ideal * roll_off(headroom, p.knee);
    Ok((v + dv).clamp(0.0, p.vdd) - v)
}

/// Multiplicative process-variation factor `1 + g`, `g ~ N(0, sigma)`
/// clipped to `±3 sigma`.
pub fn variation_gain<R: Rng + ?Sized>(sigma_frac: f64, rng: &mut R) -> f64 {
    if sigma_frac == 0.0 {
        return 1.0;
    }
    let g: f64 = Normal::new(0.0, sigma_frac)
        .expect("sigma_frac validated non-negative")
        .sample(rng);
    1.0 + g.clamp(-3.0 * sigma_frac, 3.0 * sigma_frac)
}

/// Applies one event to a capacitor at `v` and returns the new voltage.
/// With `rng`, the step is scaled by [`variation_gain`].
#[inline]
pub fn apply_event<R: Rng + ?Sized>(w: f64, v: f64, p: &DeviceParams, rng: Option<&mut R>) -> Result<f64> {
    let mut dv = nonlinear_step(w, v, p)?;
    if let Some(rng) = rng {
        dv *= variation_gain(p.sigma_frac, rng);
    }
    Ok((v + dv).clamp(0.0, p.vdd))
}

/// Residual leakage drift magnitude (V) over `duration_us` for a kernel whose
/// summed weight magnitude is `kernel_sum` out of a possible `max_sum`.
pub fn leak_drift(kernel_sum: f64, max_sum: f64, duration_us: u64, p: &DeviceParams) -> Result<f64> {
    if !(max_sum > 0.0 && (0.0..=max_sum).contains(&kernel_sum)) {
        return Err(Error::InvalidParameter(format!(
            "kernel weight sum {kernel_sum} outside [0, {max_sum}]"
        )));
    }
    Ok(p.leak_rate_max * (kernel_sum / max_sum) * (duration_us as f64 / 1000.0))
}
