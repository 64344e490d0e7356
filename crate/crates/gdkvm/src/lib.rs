//! Linear key-value memory kernels with gated delta-rule state updates,
//! plus the evaluation stack and a desk-scale synthetic training harness.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`]: dense generic tensors and primitive kernels,
//! - [`attention`]: softmax / linear / recurrent matching over a growing
//!   key-value memory,
//! - [`memory`]: delta-rule and gated-delta-rule state updates with the
//!   ablation strategies,
//! - [`kpff`]: gated fusion of local, global, and pixel-level features,
//! - [`autodiff`] and [`optim`]: reverse-mode tape, clipping, AdamW,
//! - [`metrics`] and [`clinical`]: mask overlap/surface metrics, method
//!   of disks volumes, ejection fraction, agreement statistics,
//! - [`synth`], [`model`], [`train`]: synthetic echo-like videos, the toy
//!   segmentation model, the training and ablation drivers,
//! - [`scaling`]: sequence-length cost measurement of the matching forms.

pub mod attention;
pub mod autodiff;
pub mod clinical;
pub mod config;
pub mod element;
pub mod io;
pub mod kpff;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod scaling;
pub mod model;
pub mod synth;
pub mod train;
pub mod tensor;

pub use element::Element;
pub use rng::Rng;
pub use tensor::{Tensor, Tensor32, Tensor64};
