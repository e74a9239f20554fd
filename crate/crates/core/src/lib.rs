//! Infrared small-target detection at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] – NCHW tensors and forward/backward kernels (dilated conv,
//!   bilinear sampling, activations, pooling).
//! - [`gradcheck`] – central finite-difference verification of backward passes.
//! - [`nn`] – parameter containers, convolution units, CSP blocks and Adam.
//! - [`msfa`] – the three-branch dilated fusion block (rates 1/3/5) that
//!   terminates the backbone.
//! - [`dyhead`] – scale, spatial (deformable) and task attention over
//!   multi-level features.
//! - [`detnet`] – the two-scale detector, its loss, training step and checkpoints.
//! - [`postprocess`] – decoding, NMS and precision/recall/mAP evaluation.
//! - [`pipeline`] – epoch loop, batched prediction and evaluation.
//! - [`data`] – synthetic scenes, VOC/YOLO label parsing, augmentation,
//!   ×4 upsampling, PGM image I/O and dataset manifests.

pub mod data;
pub mod detnet;
pub mod dyhead;
pub mod error;
pub mod gradcheck;
pub mod msfa;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
