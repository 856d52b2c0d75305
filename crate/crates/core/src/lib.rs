//! Multi-channel speech separation via time-domain filter-and-sum
//! beamforming networks, in two flavors: explicit waveform-domain filtering
//! and implicit latent-space filtering with feature-level cross-correlation
//! and context-aware masking. Includes the f64 autodiff core, DSP framing,
//! the DPRNN+TAC separator backbone, training objectives, and evaluation.

pub mod beamformer;
pub mod features;
pub mod framing;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod separator;
pub mod tensor;
pub mod train;
