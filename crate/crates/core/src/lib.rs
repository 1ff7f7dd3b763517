//! Tracer kinetics for dynamic PET with the irreversible two-tissue
//! compartment model: forward simulation of 4D scans, voxel-wise parameter
//! fitting, joint input-function estimation and image-quality metrics.

pub mod aif;
pub mod error;
pub mod fitting;
pub mod kinetics;
pub mod lm;
pub mod metrics;
pub mod phantom;
pub mod sime;
pub mod storage;
pub mod timegrid;

pub use aif::{FengAif, SampledCurve};
pub use error::{Error, Result};
pub use fitting::{FitConfig, FitMethod, FitResult, FitStatus};
pub use kinetics::{DynamicImage, ForwardModel, ForwardOptions, KineticParams, ParametricMaps};
pub use timegrid::{FineGrid, FrameMode, FrameSchedule};
