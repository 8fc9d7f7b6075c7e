//! Exact enumeration of the linear regions a ReLU network crosses along
//! line segments, and the absolute-deviation nonlinearity measure built on it.
//!
//! The crate is organised bottom-up:
//!
//! * [`net`]: f64 inference with live, frozen and directional forward passes,
//! * [`model_io`]: JSON manifest + raw weight blob, and the `.rten` tensor container,
//! * [`discovery`]: adaptive region discovery along segments,
//! * [`deviation`]: closed-form absolute deviation over a discovered trace,
//! * [`paths`]: closed circular trajectories and ablation paths,
//! * [`stats`]: ECDF, Spearman correlation, paired differences, median summaries,
//! * [`toy`]: synthetic 2-D datasets and a small SGD trainer for desk-scale experiments.

pub mod deviation;
pub mod discovery;
pub mod error;
pub mod measure;
pub mod model_io;
pub mod net;
pub mod paths;
pub mod pattern;
pub mod stats;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use net::{Layer, Network};
pub use pattern::ActivationPattern;
pub use tensor::Tensor;
