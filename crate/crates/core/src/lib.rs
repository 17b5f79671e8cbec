//! Weakly supervised vertebral body segmentation.
//!
//! Four corner landmarks per vertebral body on one sagittal slice are the only
//! supervision. Coarse quadrilateral labels seed a self-training loop that
//! alternates between fitting an instance segmentation backbone and refining
//! its predictions (confidence thresholds, spine-curve outlier rejection and a
//! dense CRF). The trained model is then propagated slice by slice away from
//! the annotated slice and the per-slice masks are stacked into a volume.

pub mod backbone;
pub mod data_model;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod labels;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod refinement;

pub use data_model::{
    BBox, DataError, InstanceMask, InstancePrediction, LandmarkAnnotation, Mask2, Point,
    Provenance, Spacing, VertebraLandmarks, Volume,
};
pub use labels::{LabelEntry, LabelStore};
