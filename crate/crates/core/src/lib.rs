//! Multi-modal MRI brain tumor segmentation trained through modality
//! translation.
//!
//! Training runs in two phases. The transition phase learns unpaired
//! translation between two modality pairs with a pair of U-Net generators
//! and patch discriminators under least-squares adversarial and cycle
//! consistency losses. The fusion phase copies the generator trunks into
//! two segmentation branches and trains them jointly with a fusion branch
//! whose features are gated by the branches' own tumor predictions, under
//! a three-head soft Dice objective.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
