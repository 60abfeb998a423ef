//! Online dense point tracking from a streaming video.
//!
//! Every pixel of the first frame is tracked into each later frame, one
//! frame at a time. Features of the current frame are enhanced by attending
//! to a small FIFO memory of first-frame features that were forward-warped
//! (splatted) with earlier flow estimates, then an iterative GRU decoder
//! refines a warm-started flow and visibility estimate.
//!
//! ```
//! use densetrack::{config::ModelConfig, encoder::Frame, tensor::Tensor, tracker::Model};
//! use rand::SeedableRng;
//!
//! let model = Model::new(ModelConfig::toy())?;
//! let params = model.init_params::<f32>(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
//! let frames = vec![Frame::new(Tensor::full([3, 32, 32], 0.5))?; 2];
//! let outputs = model.track_sequence(&params, &frames, 2)?;
//! assert_eq!(outputs[1].flow.0.shape(), &[2, 32, 32]);
//! # Ok::<(), densetrack::Error>(())
//! ```

pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
mod error;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod splatting;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
