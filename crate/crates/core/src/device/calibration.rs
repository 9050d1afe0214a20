//! Monte-Carlo characterization of the device model and the cubic response
//! fit consumed by fitted-mode convolution.
//!
//! The fit variable is `u = w * n` (normalized weight times event count).
//! Positive and negative `u` get separate cubics because the pull-up and
//! pull-down devices differ; both pass through the origin so a silent tap
//! contributes exactly nothing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{apply_event, fmt_f64, DeviceParams};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const MODEL_FORMAT: &str = "p2m-response-model 1";

/// Minimum distinct nonzero `u` values per sign branch.
const MIN_BRANCH_POINTS: usize = 3;
/// Slack on the fitted-range check, absorbing `w * n` rounding.
const RANGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub weight: f64,
    pub count: u32,
    /// Total voltage change from reset, one entry per trial.
    pub samples: Vec<f64>,
}

impl GridPoint {
    pub fn u(&self) -> f64 {
        self.weight * f64::from(self.count)
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / self.samples.len() as f64;
        var.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSampleGrid {
    pub vdd: f64,
    pub trials: usize,
    pub points: Vec<GridPoint>,
}

/// Grid layout for [`sample_device_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPlan {
    pub weights: Vec<f64>,
    pub counts: Vec<u32>,
    pub trials: usize,
}

impl CalibrationPlan {
    /// `2 * weight_steps + 1` weights evenly spaced over [-1, 1] and every
    /// count in `0..=max_count`.
    pub fn uniform(weight_steps: usize, max_count: u32, trials: usize) -> Self {
        let weights = if weight_steps == 0 {
            vec![0.0]
        } else {
            let s = weight_steps as f64;
            (-(weight_steps as i64)..=weight_steps as i64)
                .map(|i| i as f64 / s)
                .collect()
        };
        CalibrationPlan {
            weights,
            counts: (0..=max_count).collect(),
            trials,
        }
    }
}

impl Default for CalibrationPlan {
    /// Weights in steps of 0.05, 0 to 14 events, 1000 trials per point.
    fn default() -> Self {
        CalibrationPlan::uniform(20, 14, 1000)
    }
}

/// Runs `trials` Monte-Carlo transients for every `(weight, count)` pair.
///
/// Trial `t` of point `i` draws from a generator keyed by `(seed, i, t)`.
pub fn sample_device_grid(
    p: &DeviceParams,
    weights: &[f64],
    counts: &[u32],
    trials: usize,
    seed: u64,
) -> Result<DeviceSampleGrid> {
    p.validate()?;
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(weights.len() * counts.len());
    for &w in weights {
        super::check_weight(w)?;
        for &n in counts {
            let idx = points.len() as u64;
            let samples = (0..trials as u64)
                .map(|t| {
                    let mut rng = rng_for(seed, &[idx, t]);
                    let mut v = p.v_reset();
                    for _ in 0..n {
                        v = apply_event(w, v, p, Some(&mut rng))?;
                    }
                    Ok(v - p.v_reset())
                })
                .collect::<Result<Vec<_>>>()?;
            points.push(GridPoint {
                weight: w,
                count: n,
                samples,
            });
        }
    }
    Ok(DeviceSampleGrid {
        vdd: p.vdd,
        trials,
        points,
    })
}

/// Cubic polynomial, constant term first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cubic(pub [f64; 4]);

impl Cubic {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        let c = &self.0;
        ((c[3] * u + c[2]) * u + c[1]) * u + c[0]
    }

    fn to_text(self) -> String {
        self.0.iter().map(|&c| fmt_f64(c)).collect::<Vec<_>>().join(" ")
    }

    fn parse(raw: &str) -> Option<Cubic> {
        let v: Vec<f64> = raw.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
        Some(Cubic(v.try_into().ok()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseModel {
    pub vdd: f64,
    /// Mean voltage change for `u >= 0`.
    pub mean_pos: Cubic,
    /// Mean voltage change for `u < 0`.
    pub mean_neg: Cubic,
    pub std_pos: Cubic,
    pub std_neg: Cubic,
    /// Mean absolute deviation of the mean fit from the grid means, over `vdd`.
    pub fit_rmse: f64,
    pub u_min: f64,
    pub u_max: f64,
}

/// Least-squares fit of `y ~ c1 u + c2 u^2 + c3 u^3` by SVD, with `u`
/// rescaled to [-1, 1] for conditioning.
fn fit_through_origin(us: &[f64], ys: &[f64], branch: &str) -> Result<Cubic> {
    let mut distinct: Vec<f64> = us.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < MIN_BRANCH_POINTS {
        return Err(Error::DegenerateGrid(format!(
            "{branch} branch has {} distinct nonzero u values, need {MIN_BRANCH_POINTS}",
            distinct.len()
        )));
    }
    let scale = us.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let a = DMatrix::from_fn(us.len(), 3, |r, c| (us[r] / scale).powi(c as i32 + 1));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if smin.is_nan() || smin <= smax * 1e-12 {
        return Err(Error::DegenerateGrid(format!("{branch} branch is rank deficient")));
    }
    let x = svd.solve(&b, 0.0).map_err(|e| Error::DegenerateGrid(e.to_string()))?;
    Ok(Cubic([0.0, x[0] / scale, x[1] / scale.powi(2), x[2] / scale.powi(3)]))
}

pub fn fit_response_poly(grid: &DeviceSampleGrid) -> Result<ResponseModel> {
    let stats: Vec<(f64, f64, f64)> = grid.points.iter().map(|pt| (pt.u(), pt.mean(), pt.std())).collect();
    if stats.iter().any(|(_, m, s)| !m.is_finite() || !s.is_finite()) {
        return Err(Error::DegenerateGrid("non-finite sample".into()));
    }
    let mut distinct: Vec<f64> = stats.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 8 || distinct[0] >= 0.0 || distinct[distinct.len() - 1] <= 0.0 {
        return Err(Error::DegenerateGrid(format!(
            "need >= 8 distinct u values spanning both signs, found {}",
            distinct.len()
        )));
    }

    let branch = |pos: bool| {
        let pts: Vec<_> = stats
            .iter()
            .filter(|(u, _, _)| if pos { *u > 0.0 } else { *u < 0.0 })
            .collect();
        let us: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let means: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let stds: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let name = if pos { "positive" } else { "negative" };
        Ok::<_, Error>((
            fit_through_origin(&us, &means, name)?,
            fit_through_origin(&us, &stds, name)?,
        ))
    };
    let (mean_pos, std_pos) = branch(true)?;
    let (mean_neg, std_neg) = branch(false)?;

    let mut model = ResponseModel {
        vdd: grid.vdd,
        mean_pos,
        mean_neg,
        std_pos,
        std_neg,
        fit_rmse: 0.0,
        u_min: distinct[0],
        u_max: distinct[distinct.len() - 1],
    };
    let abs_err: f64 = stats.iter().map(|&(u, m, _)| (model.mean_unchecked(u) - m).abs()).sum();
    model.fit_rmse = abs_err / stats.len() as f64 / grid.vdd;
    Ok(model)
}

impl ResponseModel {
    #[inline]
    fn mean_unchecked(&self, u: f64) -> f64 {
        if u >= 0.0 {
            self.mean_pos.eval(u)
        } else {
            self.mean_neg.eval(u)
        }
    }

    #[inline]
    fn std_unchecked(&self, u: f64) -> f64 {
        let s = if u >= 0.0 {
            self.std_pos.eval(u)
        } else {
            self.std_neg.eval(u)
        };
        s.max(0.0)
    }

    fn check_range(&self, u: f64) -> Result<()> {
        if u.is_finite() && u >= self.u_min - RANGE_EPS && u <= self.u_max + RANGE_EPS {
            Ok(())
        } else {
            Err(Error::OutsideFittedRange {
                u,
                min: self.u_min,
                max: self.u_max,
            })
        }
    }

    pub fn mean(&self, u: f64) -> Result<f64> {
        self.check_range(u)?;
        Ok(self.mean_unchecked(u))
    }

    pub fn std(&self, u: f64) -> Result<f64> {
        self.check_range(u)?;
        Ok(self.std_unchecked(u))
    }

    /// Voltage change contributed by one tap with weight `w` that saw `n`
    /// events. With `rng`, draws from `N(mean, std)` restricted to
    /// `[mean - std, mean + std]`; otherwise returns the mean.
    pub fn eval_response<R: Rng + ?Sized>(&self, w: f64, n: u32, rng: Option<&mut R>) -> Result<f64> {
        let u = w * f64::from(n);
        self.check_range(u)?;
        let mean = self.mean_unchecked(u);
        let std = self.std_unchecked(u);
        match rng {
            Some(rng) if std > 0.0 => {
                let normal = Normal::new(mean, std).expect("std is finite and positive");
                loop {
                    let x = normal.sample(rng);
                    if (x - mean).abs() <= std {
                        return Ok(x);
                    }
                }
            }
            _ => Ok(mean),
        }
    }

    /// Serializes the model together with the device it was calibrated on.
    pub fn to_config(&self, device: &DeviceParams) -> KvConfig {
        let mut cfg = KvConfig::default();
        cfg.insert("format", MODEL_FORMAT);
        device.write_config(&mut cfg);
        cfg.insert("model.vdd", fmt_f64(self.vdd));
        cfg.insert("model.mean_pos", self.mean_pos.to_text());
        cfg.insert("model.mean_neg", self.mean_neg.to_text());
        cfg.insert("model.std_pos", self.std_pos.to_text());
        cfg.insert("model.std_neg", self.std_neg.to_text());
        cfg.insert("model.fit_rmse", fmt_f64(self.fit_rmse));
        cfg.insert("model.u_min", fmt_f64(self.u_min));
        cfg.insert("model.u_max", fmt_f64(self.u_max));
        cfg
    }

    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let bad = |msg: String| Error::Config {
            path: cfg.origin().to_path_buf(),
            msg,
        };
        match cfg.get("format") {
            Some(MODEL_FORMAT) => {}
            other => return Err(bad(format!("unsupported model format {other:?}"))),
        }
        let cubic = |key: &str| -> Result<Cubic> {
            let raw = cfg.require(key)?;
            Cubic::parse(raw).ok_or_else(|| bad(format!("`{key}` needs 4 numbers, got `{raw}`")))
        };
        let num = |key: &str| -> Result<f64> {
            cfg.parse::<f64>(key)?
                .ok_or_else(|| bad(format!("missing key `{key}`")))
        };
        let m = ResponseModel {
            vdd: num("model.vdd")?,
            mean_pos: cubic("model.mean_pos")?,
            mean_neg: cubic("model.mean_neg")?,
            std_pos: cubic("model.std_pos")?,
            std_neg: cubic("model.std_neg")?,
            fit_rmse: num("model.fit_rmse")?,
            u_min: num("model.u_min")?,
            u_max: num("model.u_max")?,
        };
        if !(m.u_min <= 0.0 && 0.0 <= m.u_max) {
            return Err(bad("fitted range must contain 0".into()));
        }
        Ok(m)
    }
}
