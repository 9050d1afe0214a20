//! DVS event streams: parsing, serialization, windowing and synthesis.
//!
//! Two on-disk formats are supported:
//!
//! * CSV: a `width,height,duration_us` header line followed by one
//!   `x,y,t_us,polarity` record per line (`polarity` is `1` for ON, `0` for OFF).
//! * Packed binary: a 16-byte header (`b"NPX1"`, `u32` width, `u32` height,
//!   `u32` duration_us) followed by 8-byte records (`u16` x, `u16` y,
//!   `u24` t_us, `u8` polarity). All integers little-endian.
//!
//! Time is integer microseconds throughout.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const BINARY_MAGIC: &[u8; 4] = b"NPX1";
const BINARY_HEADER_LEN: usize = 16;
const BINARY_RECORD_LEN: usize = 8;
const MAX_U24: u64 = (1 << 24) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    /// Plane index used by count grids and weight tensors: ON = 0, OFF = 1.
    #[inline]
    pub fn plane(self) -> usize {
        match self {
            Polarity::On => 0,
            Polarity::Off => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::Off => 0,
            Polarity::On => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DvsEvent {
    pub x: u16,
    pub y: u16,
    /// Microseconds since stream start.
    pub t: u64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub duration: u64,
    pub events: Vec<DvsEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// Guesses the format from a file extension (`.csv` or anything else).
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

impl EventStream {
    /// Builds a stream, checking bounds and sorting events by time (stable).
    pub fn new(width: u32, height: u32, duration: u64, mut events: Vec<DvsEvent>) -> Result<Self> {
        for e in &events {
            if u32::from(e.x) >= width || u32::from(e.y) >= height {
                return Err(Error::EventOutOfBounds {
                    x: e.x,
                    y: e.y,
                    width,
                    height,
                });
            }
        }
        events.sort_by_key(|e| e.t);
        if let Some(last) = events.last() {
            if last.t > duration {
                return Err(Error::TimestampBeyondDuration { t: last.t, duration });
            }
        }
        Ok(EventStream {
            width,
            height,
            duration,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_bytes(&self, format: EventFormat) -> Result<Vec<u8>> {
        match format {
            EventFormat::Csv => Ok(self.to_csv().into_bytes()),
            EventFormat::Binary => self.to_binary(),
        }
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::with_capacity(16 + self.events.len() * 16);
        let _ = writeln!(out, "{},{},{}", self.width, self.height, self.duration);
        for e in &self.events {
            let _ = writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.polarity.bit());
        }
        out
    }

    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let duration = u32::try_from(self.duration).map_err(|_| Error::Unencodable {
            value: self.duration,
            msg: "duration does not fit in u32",
        })?;
        let mut out = Vec::with_capacity(BINARY_HEADER_LEN + self.events.len() * BINARY_RECORD_LEN);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&duration.to_le_bytes());
        for e in &self.events {
            if e.t > MAX_U24 {
                return Err(Error::Unencodable {
                    value: e.t,
                    msg: "timestamp does not fit in 24 bits",
                });
            }
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.extend_from_slice(&(e.t as u32).to_le_bytes()[..3]);
            out.push(e.polarity.bit());
        }
        Ok(out)
    }
}

pub fn parse_event_stream(source: &[u8], format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Csv => parse_csv(source),
        EventFormat::Binary => parse_binary(source),
    }
}

fn malformed(line: usize, msg: impl Into<String>) -> Error {
    Error::MalformedRecord { line, msg: msg.into() }
}

fn parse_fields<const N: usize>(line: &str, line_no: usize) -> Result<[i64; N]> {
    let mut out = [0i64; N];
    let mut fields = line.split(',');
    for (i, slot) in out.iter_mut().enumerate() {
        let raw = fields
            .next()
            .ok_or_else(|| malformed(line_no, format!("expected {N} fields, found {i}")))?;
        *slot = raw
            .trim()
            .parse::<i64>()
            .map_err(|e| malformed(line_no, format!("field {}: `{}`: {e}", i + 1, raw.trim())))?;
    }
    if fields.next().is_some() {
        return Err(malformed(line_no, format!("expected {N} fields, found more")));
    }
    Ok(out)
}

fn parse_csv(source: &[u8]) -> Result<EventStream> {
    let text = std::str::from_utf8(source).map_err(|e| malformed(0, e.to_string()))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hl, header) = lines.next().ok_or_else(|| malformed(1, "missing header"))?;
    let [w, h, d] = parse_fields::<3>(header, hl)?;
    if w <= 0 || h <= 0 || w > i64::from(u16::MAX) + 1 || h > i64::from(u16::MAX) + 1 {
        return Err(malformed(hl, "sensor dimensions must be in 1..=65536"));
    }
    if d < 0 {
        return Err(malformed(hl, "negative duration"));
    }
    let (width, height, duration) = (w as u32, h as u32, d as u64);

    let mut events = Vec::new();
    for (ln, line) in lines {
        let [x, y, t, p] = parse_fields::<4>(line, ln)?;
        if x < 0 || y < 0 || x >= i64::from(width) || y >= i64::from(height) {
            return Err(Error::CoordinateOutOfBounds {
                line: ln,
                x,
                y,
                width,
                height,
            });
        }
        if t < 0 {
            return Err(Error::NegativeTimestamp { line: ln, t });
        }
        let polarity = u8::try_from(p)
            .ok()
            .and_then(Polarity::from_bit)
            .ok_or_else(|| malformed(ln, format!("polarity must be 0 or 1, got {p}")))?;
        events.push(DvsEvent {
            x: x as u16,
            y: y as u16,
            t: t as u64,
            polarity,
        });
    }
    EventStream::new(width, height, duration, events)
}

fn parse_binary(source: &[u8]) -> Result<EventStream> {
    let bad = |offset: usize, msg: &str| Error::MalformedBinary {
        offset,
        msg: msg.to_string(),
    };
    if source.len() < BINARY_HEADER_LEN {
        return Err(bad(source.len(), "truncated header"));
    }
    if &source[..4] != BINARY_MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(source[o..o + 4].try_into().unwrap());
    let (width, height, duration) = (u32_at(4), u32_at(8), u64::from(u32_at(12)));
    if width == 0 || height == 0 || width > 65536 || height > 65536 {
        return Err(bad(4, "sensor dimensions must be in 1..=65536"));
    }
    let body = &source[BINARY_HEADER_LEN..];
    if !body.len().is_multiple_of(BINARY_RECORD_LEN) {
        return Err(bad(
            BINARY_HEADER_LEN + body.len() / BINARY_RECORD_LEN * BINARY_RECORD_LEN,
            "truncated record",
        ));
    }
    let mut events = Vec::with_capacity(body.len() / BINARY_RECORD_LEN);
    for (i, rec) in body.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let offset = BINARY_HEADER_LEN + i * BINARY_RECORD_LEN;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from(u32::from_le_bytes([rec[4], rec[5], rec[6], 0]));
        let polarity = Polarity::from_bit(rec[7]).ok_or_else(|| bad(offset + 7, "polarity byte must be 0 or 1"))?;
        if u32::from(x) >= width || u32::from(y) >= height {
            return Err(Error::CoordinateOutOfBounds {
                line: i + 1,
                x: i64::from(x),
                y: i64::from(y),
                width,
                height,
            });
        }
        events.push(DvsEvent { x, y, t, polarity });
    }
    EventStream::new(width, height, duration, events)
}

/// Per-pixel, per-polarity event counts for one time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountGrid {
    pub width: usize,
    pub height: usize,
    counts: Vec<u32>,
}

impl CountGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        CountGrid {
            width,
            height,
            counts: vec![0; width * height * 2],
        }
    }

    #[inline]
    fn index(&self, x: usize, y: usize, plane: usize) -> usize {
        (y * self.width + x) * 2 + plane
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, polarity: Polarity) -> u32 {
        self.counts[self.index(x, y, polarity.plane())]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, polarity: Polarity, n: u32) {
        let i = self.index(x, y, polarity.plane());
        self.counts[i] = n;
    }

    #[inline]
    pub fn add(&mut self, e: &DvsEvent) {
        let i = self.index(e.x as usize, e.y as usize, e.polarity.plane());
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedCounts {
    pub window_length: u64,
    pub windows: Vec<CountGrid>,
}

impl WindowedCounts {
    pub fn total(&self) -> u64 {
        self.windows.iter().map(CountGrid::total).sum()
    }
}

/// Number of half-open windows `[kL, (k+1)L)` needed to cover a stream.
///
/// This is `ceil(duration / L)`, extended by one when an event sits exactly
/// on `duration` and `duration` is a multiple of `L`.
pub fn window_count(stream: &EventStream, window_length: u64) -> usize {
    assert!(window_length > 0, "window length must be positive");
    let by_duration = stream.duration.div_ceil(window_length);
    let by_events = stream.events.last().map_or(0, |e| e.t / window_length + 1);
    by_duration.max(by_events) as usize
}

/// Splits a stream into per-window slices (events stay in time order).
pub fn split_windows(stream: &EventStream, window_length: u64) -> Vec<&[DvsEvent]> {
    let n = window_count(stream, window_length);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..n as u64 {
        let end_t = (k + 1) * window_length;
        let len = stream.events[start..].partition_point(|e| e.t < end_t);
        out.push(&stream.events[start..start + len]);
        start += len;
    }
    out
}

pub fn window_events(stream: &EventStream, window_length: u64) -> Result<WindowedCounts> {
    if window_length == 0 {
        return Err(Error::InvalidParameter("window length must be positive".into()));
    }
    let windows = split_windows(stream, window_length)
        .into_iter()
        .map(|slice| {
            let mut grid = CountGrid::zeros(stream.width as usize, stream.height as usize);
            slice.iter().for_each(|e| grid.add(e));
            grid
        })
        .collect();
    Ok(WindowedCounts { window_length, windows })
}

/// Generates a Poisson test stream: each pixel draws its event count from
/// `Poisson(mean_rate * duration_ms)`, timestamps uniform in `[0, duration)`,
/// polarity a fair coin. Pixels are visited in raster order from a single
/// generator seeded by `seed`.
pub fn synth_events(width: u32, height: u32, duration: u64, mean_rate: f64, seed: u64) -> Result<EventStream> {
    if !(mean_rate >= 0.0 && mean_rate.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "mean rate must be >= 0, got {mean_rate}"
        )));
    }
    if width == 0 || height == 0 || width > 65536 || height > 65536 {
        return Err(Error::InvalidParameter("sensor dimensions must be in 1..=65536".into()));
    }
    let lambda = mean_rate * duration as f64 / 1000.0;
    let mut events = Vec::new();
    if lambda > 0.0 {
        let poisson = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = rng_for(seed, &[0x5e_0e_57]);
        for y in 0..height {
            for x in 0..width {
                let n = poisson.sample(&mut rng) as u64;
                for _ in 0..n {
                    events.push(DvsEvent {
                        x: x as u16,
                        y: y as u16,
                        t: rng.random_range(0..duration),
                        polarity: if rng.random_bool(0.5) {
                            Polarity::On
                        } else {
                            Polarity::Off
                        },
                    });
                }
            }
        }
    }
    EventStream::new(width, height, duration, events)
}
