//! Two-modality salient object detection on a small autodiff engine.
//!
//! Data flow of one forward pass: the supplementary input runs through
//! [`aux_stream::AuxStream`]; each new backbone branch receives the
//! [`smim::Smim`] fusion of its entry feature and the matching auxiliary
//! feature; [`fusion::Fusion`] decodes the four backbone outputs from coarse to
//! fine; [`head::Head`] turns the finest decoded feature into a saliency map.

pub mod aux_stream;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod head;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod smim;
pub mod synth;
pub mod train;

pub use config::{HarnessConfig, Modality, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use hrtnet_tensor as tensor;
pub use model::{count_params_flops, Injection, Model, ModelState};
