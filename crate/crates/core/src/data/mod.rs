//! Data ingestion: NIfTI volumes in the BraTS layout, normalisation, patch
//! sampling and the synthetic phantom.

pub mod nifti;
pub mod normalize;
pub mod patch;
pub mod phantom;
pub mod subject;

pub use normalize::z_normalize;
pub use patch::{build_pair_input, sample_patch, ForegroundRule, Patch, PatchSpec};
pub use phantom::{synth_phantom, IntensityMap, Manifest, PhantomConfig};
pub use subject::{discover, load_normalized, load_subject, Grade, Subject, SubjectRecord};
