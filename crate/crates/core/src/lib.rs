//! Joint colour, geometry and semantic radiance fields trained from posed
//! images with sparse, noisy or partial labels.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod field;
pub mod fusion;
pub mod geometry;
pub mod labelops;
pub mod linalg;
pub mod meshing;
pub mod render;
pub mod rng;
pub mod synthgen;
pub mod train;

pub use dataset::{Dataset, DepthMap, Frame, Image, LabelMap, RgbImage, Split, SupervisionMask, VOID};
pub use error::{Error, Result};
pub use field::{DensityActivation, EncodingConfig, FieldConfig, FieldParams, Net};
pub use geometry::{Camera, Pixel, Pose, Ray, RayBounds, Vec3};
pub use render::{RenderConfig, RenderOutput, SampleSet};
pub use train::{TrainConfig, TrainingData};
