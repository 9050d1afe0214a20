//! Address-event readout of activation maps.
//!
//! Channels are read one at a time (the active channel is selected
//! globally, so event words carry no channel field and no polarity bit).
//! Within a channel, every row holding a spike raises a row request; rows
//! are serviced in ascending index order, the serviced row is latched, and
//! its spiking columns are sent left to right, each through a four-phase
//! column handshake.
//!
//! Trace shape for one channel `c` with spikes in row `y` at columns `x..`:
//!
//! ```text
//! VK+ c
//!   RR+ y  RA+ y
//!     CR+ x  CA+ x  CR- x  CA- x      (one per spiking column)
//!   RR- y  RA- y
//! VK- c
//! ```

use std::fmt;
use std::str::FromStr;

use bitvec::prelude::*;

use crate::array::ActivationMap;
use crate::error::{Error, ProtocolViolation, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"NPA1";

/// `ceil(log2(n))`, with `ceil_log2(0) = ceil_log2(1) = 0`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AerGeometry {
    pub out_width: usize,
    pub out_height: usize,
    pub channels: usize,
    pub sensor_width: usize,
    pub sensor_height: usize,
}

impl AerGeometry {
    pub fn new(
        out_width: usize,
        out_height: usize,
        channels: usize,
        sensor_width: usize,
        sensor_height: usize,
    ) -> Self {
        AerGeometry {
            out_width,
            out_height,
            channels,
            sensor_width,
            sensor_height,
        }
    }

    pub fn x_bits(&self) -> u32 {
        ceil_log2(self.out_width as u64).max(1)
    }

    pub fn y_bits(&self) -> u32 {
        ceil_log2(self.out_height as u64).max(1)
    }

    pub fn per_event_bits(&self) -> u32 {
        self.x_bits() + self.y_bits()
    }

    /// Raw sensor address plus one polarity bit.
    pub fn baseline_bits(&self) -> u32 {
        ceil_log2(self.sensor_width as u64) + ceil_log2(self.sensor_height as u64) + 1
    }

    /// Width of the per-channel header's channel field.
    pub fn channel_bits(&self) -> u32 {
        ceil_log2(self.channels as u64)
    }

    /// Width of the per-channel header's event-count field.
    pub fn count_bits(&self) -> u32 {
        ceil_log2((self.out_width * self.out_height) as u64 + 1)
    }

    fn check_map(&self, map: &ActivationMap) -> Result<()> {
        if (map.out_width, map.out_height, map.channels) == (self.out_width, self.out_height, self.channels) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "map {}x{}x{} vs geometry {}x{}x{}",
                map.out_width, map.out_height, map.channels, self.out_width, self.out_height, self.channels
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitsSaved {
    pub per_event_bits: u32,
    pub baseline_bits: u32,
    /// `baseline_bits - per_event_bits`; negative when the output map
    /// needs more address bits than the raw sensor.
    pub savings: i64,
}

pub fn bits_saved(g: &AerGeometry) -> BitsSaved {
    let (per_event_bits, baseline_bits) = (g.per_event_bits(), g.baseline_bits());
    BitsSaved {
        per_event_bits,
        baseline_bits,
        savings: i64::from(baseline_bits) - i64::from(per_event_bits),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AerWord {
    pub channel: usize,
    pub x: usize,
    pub y: usize,
    pub packed: u64,
}

pub fn encode_address(x: usize, y: usize, g: &AerGeometry) -> u64 {
    ((y as u64) << g.x_bits()) | x as u64
}

pub fn decode_word(packed: u64, g: &AerGeometry) -> Result<(usize, usize)> {
    let err = || Error::AddressOutOfBounds {
        packed,
        width: g.out_width,
        height: g.out_height,
    };
    if packed >> g.per_event_bits() != 0 {
        return Err(err());
    }
    let x = (packed & ((1 << g.x_bits()) - 1)) as usize;
    let y = (packed >> g.x_bits()) as usize;
    if x >= g.out_width || y >= g.out_height {
        return Err(err());
    }
    Ok((x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    RowRequestUp,
    RowAckUp,
    ColRequestUp,
    ColAckUp,
    ColRequestDown,
    ColAckDown,
    RowRequestDown,
    RowAckDown,
    ChannelSelectUp,
    ChannelSelectDown,
}

impl Signal {
    pub const ALL: [Signal; 10] = [
        Signal::RowRequestUp,
        Signal::RowAckUp,
        Signal::ColRequestUp,
        Signal::ColAckUp,
        Signal::ColRequestDown,
        Signal::ColAckDown,
        Signal::RowRequestDown,
        Signal::RowAckDown,
        Signal::ChannelSelectUp,
        Signal::ChannelSelectDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Signal::RowRequestUp => "RR+",
            Signal::RowAckUp => "RA+",
            Signal::ColRequestUp => "CR+",
            Signal::ColAckUp => "CA+",
            Signal::ColRequestDown => "CR-",
            Signal::ColAckDown => "CA-",
            Signal::RowRequestDown => "RR-",
            Signal::RowAckDown => "RA-",
            Signal::ChannelSelectUp => "VK+",
            Signal::ChannelSelectDown => "VK-",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Signal {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Signal::ALL
            .into_iter()
            .find(|sig| sig.name() == s)
            .ok_or_else(|| format!("unknown signal `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeEvent {
    pub tick: u64,
    pub signal: Signal,
    /// Row, column or channel index depending on `signal`.
    pub index: usize,
}

/// Reads out one window. Ticks start at 0 and advance by one per edge.
pub fn encode_window(map: &ActivationMap, g: &AerGeometry) -> Result<(Vec<AerWord>, Vec<HandshakeEvent>)> {
    g.check_map(map)?;
    let mut words = Vec::new();
    let mut trace = Vec::new();
    let mut emit = |signal, index| {
        let tick = trace.len() as u64;
        trace.push(HandshakeEvent { tick, signal, index });
    };
    for c in 0..g.channels {
        let rows: Vec<usize> = (0..g.out_height)
            .filter(|&y| (0..g.out_width).any(|x| map.get(x, y, c)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        emit(Signal::ChannelSelectUp, c);
        for y in rows {
            emit(Signal::RowRequestUp, y);
            emit(Signal::RowAckUp, y);
            for x in (0..g.out_width).filter(|&x| map.get(x, y, c)) {
                emit(Signal::ColRequestUp, x);
                emit(Signal::ColAckUp, x);
                words.push(AerWord {
                    channel: c,
                    x,
                    y,
                    packed: encode_address(x, y, g),
                });
                emit(Signal::ColRequestDown, x);
                emit(Signal::ColAckDown, x);
            }
            emit(Signal::RowRequestDown, y);
            emit(Signal::RowAckDown, y);
        }
        emit(Signal::ChannelSelectDown, c);
    }
    Ok((words, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Requested(usize),
    Acked(usize),
    Releasing(usize),
}

/// Protocol verifier: replays a trace and rebuilds the map it transmits.
pub fn replay_trace(trace: &[HandshakeEvent], g: &AerGeometry) -> Result<ActivationMap> {
    use ProtocolViolation as V;
    let mut map = ActivationMap::zeros(g.out_width, g.out_height, g.channels, 0);
    let mut channel: Option<usize> = None;
    let mut last_channel: Option<usize> = None;
    let mut row = Phase::Idle;
    let mut col = Phase::Idle;
    let mut last_tick: Option<u64> = None;

    for (i, ev) in trace.iter().enumerate() {
        let fail = |kind| Error::Protocol {
            index: i,
            tick: ev.tick,
            kind,
        };
        if last_tick.is_some_and(|t| ev.tick <= t) {
            return Err(fail(V::NonMonotonicTick));
        }
        last_tick = Some(ev.tick);
        let idx = ev.index;
        match ev.signal {
            Signal::ChannelSelectUp => {
                if channel.is_some() {
                    return Err(fail(V::RequestWhileBusy));
                }
                if idx >= g.channels {
                    return Err(fail(V::IndexOutOfBounds));
                }
                if last_channel.is_some_and(|c| idx <= c) {
                    return Err(fail(V::BadChannelSelect));
                }
                channel = Some(idx);
                last_channel = Some(idx);
            }
            Signal::ChannelSelectDown => {
                if channel != Some(idx) {
                    return Err(fail(V::ReleaseOutOfOrder));
                }
                if row != Phase::Idle {
                    return Err(fail(V::MissingRelease));
                }
                channel = None;
            }
            Signal::RowRequestUp => {
                if channel.is_none() {
                    return Err(fail(V::NoChannel));
                }
                if row != Phase::Idle {
                    return Err(fail(V::RequestWhileBusy));
                }
                if idx >= g.out_height {
                    return Err(fail(V::IndexOutOfBounds));
                }
                row = Phase::Requested(idx);
            }
            Signal::RowAckUp => {
                if row != Phase::Requested(idx) {
                    return Err(fail(V::AckWithoutRequest));
                }
                row = Phase::Acked(idx);
            }
            Signal::ColRequestUp => {
                if !matches!(row, Phase::Acked(_)) {
                    return Err(fail(V::AckWithoutRequest));
                }
                if col != Phase::Idle {
                    return Err(fail(V::RequestWhileBusy));
                }
                if idx >= g.out_width {
                    return Err(fail(V::IndexOutOfBounds));
                }
                col = Phase::Requested(idx);
            }
            Signal::ColAckUp => {
                if col != Phase::Requested(idx) {
                    return Err(fail(V::AckWithoutRequest));
                }
                let (Phase::Acked(y), Some(c)) = (row, channel) else {
                    unreachable!("column requests require an acknowledged row");
                };
                if map.get(idx, y, c) {
                    return Err(fail(V::DoubleService));
                }
                map.set(idx, y, c, true);
                col = Phase::Acked(idx);
            }
            Signal::ColRequestDown => {
                if col != Phase::Acked(idx) {
                    return Err(fail(V::ReleaseOutOfOrder));
                }
                col = Phase::Releasing(idx);
            }
            Signal::ColAckDown => {
                if col != Phase::Releasing(idx) {
                    return Err(fail(V::ReleaseOutOfOrder));
                }
                col = Phase::Idle;
            }
            Signal::RowRequestDown => {
                if row != Phase::Acked(idx) {
                    return Err(fail(V::ReleaseOutOfOrder));
                }
                if col != Phase::Idle {
                    return Err(fail(V::MissingRelease));
                }
                row = Phase::Releasing(idx);
            }
            Signal::RowAckDown => {
                if row != Phase::Releasing(idx) {
                    return Err(fail(V::ReleaseOutOfOrder));
                }
                row = Phase::Idle;
            }
        }
    }
    if channel.is_some() || row != Phase::Idle || col != Phase::Idle {
        return Err(Error::Protocol {
            index: trace.len(),
            tick: last_tick.map_or(0, |t| t + 1),
            kind: V::MissingRelease,
        });
    }
    Ok(map)
}

/// One `tick signal index` line per edge.
pub fn format_trace(trace: &[HandshakeEvent]) -> String {
    let mut out = String::with_capacity(trace.len() * 12);
    for ev in trace {
        out.push_str(&format!("{} {} {}\n", ev.tick, ev.signal, ev.index));
    }
    out
}

/// Parses [`format_trace`] output; blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<HandshakeEvent>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::MalformedRecord { line: i + 1, msg };
        let fields: Vec<&str> = body.split_whitespace().collect();
        let [tick, signal, index] = fields[..] else {
            return Err(bad(format!("expected `tick signal index`, got `{body}`")));
        };
        out.push(HandshakeEvent {
            tick: tick.parse().map_err(|e| bad(format!("tick: {e}")))?,
            signal: signal.parse().map_err(bad)?,
            index: index.parse().map_err(|e| bad(format!("index: {e}")))?,
        });
    }
    Ok(out)
}

type Bits = BitVec<u8, Lsb0>;

fn put_bits(bits: &mut Bits, value: u64, width: u32) {
    bits.extend_from_bitslice(&value.view_bits::<Lsb0>()[..width as usize]);
}

struct BitReader<'a> {
    bits: &'a BitSlice<u8, Lsb0>,
    pos: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> Option<u64> {
        let end = self.pos + width as usize;
        if end > self.bits.len() {
            return None;
        }
        let v = if width == 0 {
            0
        } else {
            self.bits[self.pos..end].load_le::<u64>()
        };
        self.pos = end;
        Some(v)
    }
}

/// Words of one window as they go off chip: per channel a header (channel
/// index, event count) and the packed addresses, bit-packed LSB first.
pub fn pack_window(words: &[AerWord], g: &AerGeometry) -> Vec<u8> {
    let mut bits = Bits::new();
    let mut i = 0;
    while i < words.len() {
        let c = words[i].channel;
        let run = words[i..].iter().take_while(|wd| wd.channel == c).count();
        put_bits(&mut bits, c as u64, g.channel_bits());
        put_bits(&mut bits, run as u64, g.count_bits());
        for wd in &words[i..i + run] {
            put_bits(&mut bits, wd.packed, g.per_event_bits());
        }
        i += run;
    }
    bits.into_vec()
}

/// Payload size in bits, before byte padding.
pub fn window_bits(words: &[AerWord], g: &AerGeometry) -> u64 {
    let mut channels: Vec<usize> = words.iter().map(|w| w.channel).collect();
    channels.dedup();
    channels.len() as u64 * u64::from(g.channel_bits() + g.count_bits())
        + words.len() as u64 * u64::from(g.per_event_bits())
}

/// Serializes a sequence of windows: `NPA1`, then `u32` out_width,
/// out_height, channels, window count; per window `u32` index, channels
/// present, payload bytes, then the [`pack_window`] payload.
pub fn write_dump(windows: &[Vec<AerWord>], g: &AerGeometry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DUMP_MAGIC);
    for v in [g.out_width, g.out_height, g.channels, windows.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (k, words) in windows.iter().enumerate() {
        let mut present: Vec<usize> = words.iter().map(|w| w.channel).collect();
        present.dedup();
        let payload = pack_window(words, g);
        for v in [k, present.len(), payload.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&payload);
    }
    out
}

/// Inverse of [`write_dump`]; sensor dimensions are not stored, so the
/// returned geometry reports the output map size for them.
pub fn read_dump(bytes: &[u8]) -> Result<(AerGeometry, Vec<Vec<AerWord>>)> {
    let bad = |offset: usize, msg: &str| Error::MalformedBinary {
        offset,
        msg: msg.to_string(),
    };
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| bad(off, "truncated"))
    };
    if bytes.get(..4) != Some(DUMP_MAGIC.as_slice()) {
        return Err(bad(0, "bad dump magic"));
    }
    let (w, h, nc, nw) = (u32_at(4)?, u32_at(8)?, u32_at(12)?, u32_at(16)?);
    let g = AerGeometry::new(w, h, nc, w, h);
    let mut off = 20;
    let mut windows = Vec::with_capacity(nw.min(1 << 16));
    for k in 0..nw {
        if u32_at(off)? != k {
            return Err(bad(off, "window index out of sequence"));
        }
        let (present, len) = (u32_at(off + 4)?, u32_at(off + 8)?);
        off += 12;
        let payload = bytes.get(off..off + len).ok_or_else(|| bad(off, "truncated payload"))?;
        let mut r = BitReader {
            bits: payload.view_bits(),
            pos: 0,
        };
        let mut words = Vec::new();
        for _ in 0..present {
            let c = r
                .take(g.channel_bits())
                .ok_or_else(|| bad(off, "truncated channel header"))? as usize;
            let n = r
                .take(g.count_bits())
                .ok_or_else(|| bad(off, "truncated channel header"))?;
            if c >= nc {
                return Err(bad(off, "channel index out of range"));
            }
            for _ in 0..n {
                let packed = r
                    .take(g.per_event_bits())
                    .ok_or_else(|| bad(off, "truncated event word"))?;
                let (x, y) = decode_word(packed, &g)?;
                words.push(AerWord {
                    channel: c,
                    x,
                    y,
                    packed,
                });
            }
        }
        off += len;
        windows.push(words);
    }
    if off != bytes.len() {
        return Err(bad(off, "trailing bytes"));
    }
    Ok((g, windows))
}
