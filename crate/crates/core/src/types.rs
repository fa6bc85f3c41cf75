//! Plain-data domain types passed between the decomposition networks, the
//! renderer, and the metrics. Validation lives in `new` constructors;
//! internal code that has already established the invariants builds the
//! structs directly.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical (frontal, object-centered) per-pixel depth, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub data: Array2<f64>,
}

impl DepthMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|&d| d.is_finite() && d > 0.0) {
            return Err(Error::InvalidArgument(
                "depth map must be finite and strictly positive".into(),
            ));
        }
        Ok(DepthMap { data })
    }

    pub fn size(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Per-pixel RGB reflectance in [0, 1], stored (3, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoMap {
    pub data: Array3<f64>,
}

impl AlbedoMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::InvalidArgument(
                "albedo map must have 3 channels".into(),
            ));
        }
        if !data.iter().all(|&a| (0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidArgument(
                "albedo values must lie in [0, 1]".into(),
            ));
        }
        Ok(AlbedoMap { data })
    }
}

/// Four-parameter lighting model: ambient strength, diffuse strength, and
/// the x/y components of the dominant light direction (z fixed at 1 before
/// normalization).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub ambient: f64,
    pub diffuse: f64,
    pub light_x: f64,
    pub light_y: f64,
}

impl Lighting {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.ambient)
            && (0.0..=1.0).contains(&self.diffuse)
            && (-1.0..=1.0).contains(&self.light_x)
            && (-1.0..=1.0).contains(&self.light_y);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "lighting out of range: {self:?}"
            )))
        }
    }

    pub fn to_array(self) -> ndarray::Array1<f64> {
        ndarray::arr1(&[self.ambient, self.diffuse, self.light_x, self.light_y])
    }

    pub fn from_array(a: &ndarray::Array1<f64>) -> Self {
        Lighting {
            ambient: a[0],
            diffuse: a[1],
            light_x: a[2],
            light_y: a[3],
        }
    }

    /// Unit direction pointing from the surface toward the light.
    pub fn direction(&self) -> [f64; 3] {
        let n = (self.light_x * self.light_x + self.light_y * self.light_y + 1.0).sqrt();
        [self.light_x / n, self.light_y / n, 1.0 / n]
    }
}

/// Rigid viewpoint: extrinsic x-y-z Euler rotation (radians) and camera-space
/// translation, both applied about the pivot at the center of the view volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rx: 0.0,
            ry: 0.0,
            rz: 0.0,
            tx: 0.0,
            ty: 0.0,
            tz: 0.0,
        }
    }

    /// Accepts rotations within a half turn per axis and translations up to
    /// half the default viewing distance; anything wilder is outside the
    /// regime the depth-grid representation supports.
    pub fn validate(&self) -> Result<()> {
        let arr = self.to_array();
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pose has non-finite entries".into()));
        }
        for (v, bound, name) in [
            (self.rx, PI, "rx"),
            (self.ry, PI, "ry"),
            (self.rz, PI, "rz"),
            (self.tx, 0.5, "tx"),
            (self.ty, 0.5, "ty"),
            (self.tz, 0.5, "tz"),
        ] {
            if v.abs() > bound {
                return Err(Error::InvalidArgument(format!(
                    "pose {name} = {v} exceeds bound {bound}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_array(self) -> ndarray::Array1<f64> {
        ndarray::arr1(&[self.rx, self.ry, self.rz, self.tx, self.ty, self.tz])
    }

    pub fn from_array(a: &ndarray::Array1<f64>) -> Self {
        Pose {
            rx: a[0],
            ry: a[1],
            rz: a[2],
            tx: a[3],
            ty: a[4],
            tz: a[5],
        }
    }
}

/// Unit surface normals, (3, H, W), z pointing toward the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub data: Array3<f64>,
}

impl NormalMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::InvalidArgument(
                "normal map must have 3 channels".into(),
            ));
        }
        for i in 0..data.dim().1 {
            for j in 0..data.dim().2 {
                let n2: f64 = (0..3).map(|c| data[[c, i, j]] * data[[c, i, j]]).sum();
                if (n2.sqrt() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "normal at ({i}, {j}) has length {}",
                        n2.sqrt()
                    )));
                }
            }
        }
        Ok(NormalMap { data })
    }
}

/// Output of rendering or warping: composited image, hard coverage mask,
/// and per-pixel depth in the rendered view (background pixels carry the
/// far end of the camera depth range).
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub image: Array3<f64>,
    pub mask: Array2<bool>,
    pub view_depth: Array2<f64>,
}

/// The pose-free object description produced by the decomposition networks.
#[derive(Clone, Debug)]
pub struct CanonicalModel {
    pub depth: DepthMap,
    pub albedo: AlbedoMap,
}
