//! Explainability-guided active learning.
//!
//! A small convolutional classifier is trained from scratch on images that
//! carry expert region-of-interest masks. Each acquisition round ranks the
//! unlabeled pool by a blend of predictive entropy and the Dice
//! misalignment between the model's Grad-CAM attention and the mask, then
//! queries the top candidates from an annotation oracle.

pub mod acquisition;
pub mod data;
pub mod error;
pub mod explain;
pub mod harness;
pub mod model;
pub mod numeric;

pub use error::{Error, Result};
