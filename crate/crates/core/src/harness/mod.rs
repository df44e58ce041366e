//! Offline optimum, request generators and the experiment driver.

pub mod adversary;
pub mod distort;
pub mod opt;
pub mod run;

pub use distort::{distortion, DistortionReport};
pub use adversary::{cruel_request, Adversary, AdversaryKind};
pub use opt::{offline_opt_mcf, OptSolution};
pub use run::{
    initial_servers, run, Event, EventCounts, EventSink, ExperimentConfig, JsonlSink, LedgerSummary, NullSink, RunReport,
    ScaleStats, SeedOverrides, StepEvent, VecSink, Violations,
};
