//! Discrete-event core: clock, event queue, per-key random streams and the
//! metrics bus every other module reports into.

mod engine;
mod metrics;
mod rng;

pub use engine::{Engine, Event, EventError, SimError, SimTime, SUBFRAME_US};
pub use metrics::{write_metrics_csv, MetricRecord, MetricsBus, NodeNames, CSV_HEADER};
pub use rng::{derive_seed, RngStream, RngStreams, StreamKey};
