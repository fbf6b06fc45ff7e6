//! Experiment runner: configuration, the auto-exposure baseline, the
//! virtual-time simulation loop, logs and the comparison drivers.

pub mod ae;
pub mod clock;
pub mod config;
pub mod experiments;
pub mod logs;
pub mod run;

pub use ae::auto_exposure_step;
pub use clock::EventQueue;
pub use config::{
    batch_confusables, batch_objects, AeParams, ExperimentConfig, InferenceMode, NetworkConfig, ObjectSpec, RunConfig, SceneConfig,
    SensingMode, TaskConfig, PRESETS,
};
pub use experiments::*;
pub use logs::{quantize, read_lap_log, replay, route_for_mode, ClassStats, FrameRecord, LapRecord, RunMetrics, FRAME_HEADER, LAP_HEADER};
pub use run::{run_experiment, run_frame_routing, FrameRouteEvent, FrameRouteReport, PolicyBundle, RunOutput};
