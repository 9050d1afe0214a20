use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("byte offset {offset}: {msg}")]
    MalformedBinary { offset: usize, msg: String },

    #[error("line {line}: coordinate ({x}, {y}) outside {width}x{height} sensor")]
    CoordinateOutOfBounds {
        line: usize,
        x: i64,
        y: i64,
        width: u32,
        height: u32,
    },

    #[error("line {line}: negative timestamp {t}")]
    NegativeTimestamp { line: usize, t: i64 },

    #[error("event timestamp {t} us exceeds stream duration {duration} us")]
    TimestampBeyondDuration { t: u64, duration: u64 },

    #[error("event ({x}, {y}) outside {width}x{height} sensor")]
    EventOutOfBounds { x: u16, y: u16, width: u32, height: u32 },

    #[error("value {value} cannot be encoded: {msg}")]
    Unencodable { value: u64, msg: &'static str },

    #[error("address {packed:#x} does not decode inside a {width}x{height} map")]
    AddressOutOfBounds { packed: u64, width: usize, height: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("capacitor voltage {v} V outside rails [0, {vdd}] V")]
    VoltageOutsideRails { v: f64, vdd: f64 },

    #[error("weight-count product {u} outside fitted range [{min}, {max}]")]
    OutsideFittedRange { u: f64, min: f64, max: f64 },

    #[error("degenerate calibration grid: {0}")]
    DegenerateGrid(String),

    #[error("{channels} channels exceed the area budget of {max} channels for k={k}, stride={stride}")]
    AreaViolation {
        channels: usize,
        max: usize,
        k: usize,
        stride: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("trace entry {index} (tick {tick}): {kind}")]
    Protocol {
        index: usize,
        tick: u64,
        kind: ProtocolViolation,
    },

    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ways a handshake trace can break the four-phase protocol.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolViolation {
    #[error("acknowledge without matching request")]
    AckWithoutRequest,
    #[error("release out of order")]
    ReleaseOutOfOrder,
    #[error("request while another transaction is open")]
    RequestWhileBusy,
    #[error("site serviced twice in one channel scan")]
    DoubleService,
    #[error("channel select out of order or while a row is open")]
    BadChannelSelect,
    #[error("index outside map bounds")]
    IndexOutOfBounds,
    #[error("row or column request before a channel is selected")]
    NoChannel,
    #[error("ticks not strictly increasing")]
    NonMonotonicTick,
    #[error("trace ends with an open transaction")]
    MissingRelease,
}
