//! Event-driven simulation of in-pixel analog convolution on a dynamic
//! vision sensor: event streams, the weight-transistor device model and
//! its calibrated response, the kernel array pipeline, address-event
//! readout, an energy model, and a brute-force reference oracle.

pub mod aer;
pub mod array;
pub mod config;
pub mod device;
pub mod energy;
pub mod error;
pub mod events;
pub mod oracle;
pub mod rng;

pub use aer::{bits_saved, decode_word, encode_window, replay_trace, AerGeometry, AerWord, HandshakeEvent, Signal};
pub use array::{
    build_array, max_channels, run_stream, ActivationMap, AreaBudget, KernelSpec, KernelState, PixelArray, RunOutput,
    SimMode,
};
pub use config::KvConfig;
pub use device::{
    fit_response_poly, sample_device_grid, CalibrationPlan, DeviceParams, DeviceSampleGrid, ResponseModel,
};
pub use energy::{compare, Comparison, EnergyConsts, LayerShape, Network, StreamStats};
pub use error::{Error, ProtocolViolation, Result};
pub use events::{
    parse_event_stream, synth_events, window_events, CountGrid, DvsEvent, EventFormat, EventStream, Polarity,
};
pub use oracle::{equivalence_report, ideal_conv_threshold, EquivalenceBounds, EquivalenceReport, OracleConfig};
