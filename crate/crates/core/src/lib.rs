//! Kinematic calibration of serial robot arms from cable-length
//! (distance-only) measurements.
//!
//! The nominal geometry is a standard DH table ([`kinematics`]). The unknowns
//! are additive deviations of every DH parameter, identified by minimising
//! the mean squared cable-length residual ([`objective`]) with beetle
//! antennae search or its cubic-interpolated variant ([`optimizer`]), and
//! optionally refined by a particle filter ([`particle_filter`]).
//! [`pipeline`] chains these into calibration runs and [`simdata`] produces
//! synthetic ground-truth experiments.

pub mod check;
pub mod error;
pub mod kinematics;
pub mod objective;
pub mod optimizer;
pub mod particle_filter;
pub mod pipeline;
pub mod simdata;

pub use error::{Error, Result};
pub use kinematics::{
    apply_deviation, end_position, error_jacobian, forward_kinematics, link_transform, Block, DeviationLayout,
    DeviationVector, DhLink, DhTable, LinkParams, Transform,
};
pub use objective::{fitness, metrics, nominal_cable_length, residuals, MeasurementSet, Metrics, Sample};
pub use optimizer::{optimize, Bounds, Method, SearchConfig, SearchResult};



pub use particle_filter::{pf_run, PfConfig, PfResult};
pub use simdata::{Dataset, NoiseModel, ScenarioConfig};
pub use pipeline::{calibrate, compare, CalibrationMethod, CalibrationReport, PipelineConfig};
