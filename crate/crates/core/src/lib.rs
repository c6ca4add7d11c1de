//! Neural control toolchain for a 6-DoF magnetic levitation planar motor:
//! numeric kernels, the NMLV model format, a GRU inference runtime, the
//! sensor/command codec, a plant simulator with an expert controller, dataset
//! generation, reference calibration and evaluation benches.

pub mod calibration;
pub mod codec;
pub mod datagen;
pub mod eval;
pub mod kernels;
pub mod model_format;
pub mod policy;
pub mod runtime;
pub mod sim;

pub use codec::{CoilCommand, CoilCommandFrame, HesFrame, Pose6D};
pub use kernels::Backend;
pub use model_format::{ModelBundle, ModelKind, NormSpec};
