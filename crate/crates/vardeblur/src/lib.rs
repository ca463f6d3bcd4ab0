//! Joint video deblurring, optical flow, and defocus-scale estimation.
//!
//! The library decomposes each blurry frame as a pixel-wise motion-blur
//! operator applied after a pixel-wise Gaussian defocus operator and
//! minimizes one variational energy over latent frames, bidirectional
//! flows, and defocus scales with alternating primal-dual solvers inside a
//! coarse-to-fine pyramid. A procedural scene renderer, frame-averaging
//! blur synthesizer, and PSNR/SSIM/EPE metrics round out the evaluation
//! tooling; the `vardeblur` binary exposes `synth`, `deblur`, and `eval`.

pub mod cli;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod pyramid;
pub mod solvers;
pub mod state;

pub use error::{Error, Result};
pub use grid::{FlowField, Image, Mask, SigmaMap};
