//! Interactive response time measurement.
//!
//! A trace of timed key and pointer events is replayed over RFB; the time
//! from each injection to the first framebuffer update that answers it is a
//! sample. Samples become an empirical CDF with nearest-rank percentiles, and
//! a sweep repeats the run at several session counts.

mod replay;
mod report;
mod sweep;
mod trace;

pub use replay::{replay, replay_endpoint, Endpoint, MatchRule, ReplayError, ReplayOptions};
pub use report::{
    compute_cdf, compute_cdf_with, nearest_rank, CdfPoint, LatencyReport, Percentile, ReportError, ResponseSample,
    DEFAULT_PERCENTILES,
};
pub use sweep::{proportional_delays, sweep, DelayModel, LevelReport, LifecycleFactory, SessionFactory, SweepError, STUB_IMAGE};
pub use trace::{EventTrace, InputEvent, TimedEvent, TraceError};
