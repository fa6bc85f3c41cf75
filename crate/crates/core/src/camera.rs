//! Pinhole camera model shared by the renderer and the data generator.
//!
//! Convention: x right, y down, z forward into the scene. The image is
//! square; pixel (row i, col j) has its center at (j + 0.5, i + 0.5) in
//! pixel coordinates.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Square image side length in pixels.
    pub image_size: usize,
    /// Vertical field of view in degrees.
    pub fov_degrees: f64,
    /// Closest representable canonical depth.
    pub depth_min: f64,
    /// Farthest representable canonical depth.
    pub depth_max: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            image_size: 64,
            fov_degrees: 10.0,
            depth_min: 0.9,
            depth_max: 1.1,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be at least 2, got {}",
                self.image_size
            )));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::InvalidConfig(format!(
                "fov_degrees must lie in (0, 180), got {}",
                self.fov_degrees
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::InvalidConfig(format!(
                "depth range must satisfy 0 < depth_min < depth_max, got ({}, {})",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        let half_fov = self.fov_degrees.to_radians() / 2.0;
        (self.image_size as f64 / 2.0) / half_fov.tan()
    }

    /// Principal point (image center), identical in x and y.
    pub fn center(&self) -> f64 {
        self.image_size as f64 / 2.0
    }

    /// Midpoint of the representable depth range.
    pub fn depth_mid(&self) -> f64 {
        0.5 * (self.depth_min + self.depth_max)
    }

    /// Half-width of the representable depth range.
    pub fn depth_half(&self) -> f64 {
        0.5 * (self.depth_max - self.depth_min)
    }

    /// The point every object is rotated and translated about: the center
    /// of the view volume on the optical axis.
    pub fn pivot(&self) -> [f64; 3] {
        [0.0, 0.0, self.depth_mid()]
    }

    /// Per-pixel unit-depth ray directions, shape (3, H, W). Multiplying by
    /// the depth at a pixel gives the 3D point seen through that pixel.
    pub fn ray_grid(&self) -> Array3<f64> {
        let n = self.image_size;
        let f = self.focal();
        let c = self.center();
        let mut rays = Array3::zeros((3, n, n));
        for i in 0..n {
            for j in 0..n {
                rays[[0, i, j]] = (j as f64 + 0.5 - c) / f;
                rays[[1, i, j]] = (i as f64 + 0.5 - c) / f;
                rays[[2, i, j]] = 1.0;
            }
        }
        rays
    }

    /// Projects a camera-space point to pixel coordinates (u, v). The point
    /// must have positive depth.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let f = self.focal();
        let c = self.center();
        (f * p[0] / p[2] + c, f * p[1] / p[2] + c)
    }
}
