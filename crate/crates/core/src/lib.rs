//! Synthetic indoor scenes, voxel radiance fields, pose sampling and a convolutional
//! outpainter that widens the field of view of small images.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod outpaint;
pub mod pipeline;
pub mod scene;
pub mod sampling;
pub mod seeds;

pub use error::{NeoError, Result};
pub use geometry::{CameraIntrinsics, Pose, Ray, Vec3};
pub use image::ImageBuffer;
