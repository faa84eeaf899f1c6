//! Saliency-guided vision transformer for few-shot keypoint detection.
//!
//! The encoder restricts attention to salient patches through a soft mask
//! whose sharpness is learned per image; the detector localizes novel
//! keypoint types from a handful of annotated support images.

pub mod encoder;
pub mod episodes;
pub mod error;
pub mod fskd;
pub mod gradsuite;
pub mod morph;
pub mod msa;
pub mod robust;
pub mod saliency;
pub mod transduce;

pub use error::{Error, Result};
