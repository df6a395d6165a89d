//! Non-learned machinery of a stain-robust mitotic-figure detector:
//! pseudo ground-truth masks, stain deconvolution and augmentation,
//! balanced patch sampling, overlap-tiled inference with test-time
//! augmentation and ensembling, morphological candidate extraction,
//! classifier refinement and distance-matched detection metrics.
//!
//! Trained networks plug in through the [`infer::Scorer`] trait; the
//! oracle and classical scorers make the whole pipeline runnable without
//! them.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod filter;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod postprocess;
pub mod stain;
pub mod synth;
pub mod types;

pub use error::{Error, Result, ScorerError};
pub use stain::StainMatrix;
pub use types::{AnnotationSet, BinaryMask, Detection, ImageRgb, Label, PointAnnotation, ProbMap};
