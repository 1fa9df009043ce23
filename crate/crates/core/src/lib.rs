//! Event-camera optical flow: event I/O, voxel representations, a scene
//! simulator with analytic ground truth, motion compensation, flow metrics
//! and a recurrent time-dense flow network.

pub mod events;
pub mod flow;
pub mod metrics;
pub mod mocomp;
pub mod network;
pub mod representation;
pub mod simulate;

pub use events::{Event, EventWindow, Polarity, SensorGeometry};
pub use flow::FlowField;
pub use representation::{BinSpec, Grid, GridKind};
