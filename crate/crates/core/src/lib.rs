//! Red-reflex (Bruckner test) screening pipeline.
//!
//! Stages, in the order a capture flows through them:
//!
//! 1. [`dataset`]: eye records, the JSONL manifest, left-eye mirroring and
//!    subject-exclusive stratified splits.
//! 2. [`pipeline`]: pupil localisation, whiteness-score reflex detection with
//!    hysteresis, and the usability gate.
//! 3. [`imaging`]: the twelve image properties and two-sample KS testing.
//! 4. [`augment`]: training-time photometric and geometric augmentations.
//! 5. [`classifier`]: embedding providers, the two-layer head, AdamW training,
//!    ensembles and metrics; [`bundle`] stores trained models.
//! 6. [`interpret`]: occlusion attention maps, radial focus, exact t-SNE and
//!    confidence-driven capture feedback.
//! 7. [`synth`]: a labelled synthetic red-reflex image generator.
//!
//! [`config`] holds the TOML configuration shared by every stage.

pub mod augment;
pub mod bundle;
pub mod classifier;
pub mod config;
pub mod curate;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod interpret;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod regions;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{GrayImage, Mask, RgbImage};
