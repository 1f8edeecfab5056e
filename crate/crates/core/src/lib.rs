//! Lightweight 3D medical segmentation network with anatomical priors.
//!
//! The crate contains a small tensor engine with reverse-mode autodiff, the
//! network blocks, the composite loss, an analytical cost model, a synthetic
//! phantom generator and a toy trainer.

pub mod accounting;
pub mod autograd;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod io;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod phantom;
pub mod priors;
pub mod router;
pub mod tensor;
pub mod train;

pub use autograd::{Ctx, Gradients, Tape, Var};
pub use config::{Ablations, HeadMode, ModelConfig};
pub use error::{Error, Result};
pub use loss::{LabelVolume, LossParts};
pub use model::{LightMedSeg, ModelOutput};
pub use params::{init_params, InitScheme, ParamStore, Registry};
pub use tensor::{Real, Tensor, Volume5D};
