//! Image formation: canonical depth + albedo under a lighting and pose
//! become a shaded, soft-silhouette composite over a white background, and
//! the shading-free warp re-renders canonical maps at a target pose so that
//! losses can compare them with an input image pixel for pixel.
//!
//! Everything here is built on the tape so the whole chain — unprojection,
//! rigid pose, rasterization, normal estimation, shading, compositing — is
//! differentiable end to end. The plain-data entry points (`render`, `warp`,
//! `normals_from_depth`, `shade`) run the same graph code on constants and
//! extract arrays.

use ndarray::{Array2, Array3, ArrayD, Ix3, IxDyn};

use crate::camera::CameraIntrinsics;
use crate::tape::{Graph, RasterOptions, Var};
use crate::types::{
    AlbedoMap, CanonicalModel, DepthMap, Lighting, NormalMap, Pose, RenderedView,
};
use crate::{Error, Result};

/// Composite color behind the object, all channels.
pub const BACKGROUND: f64 = 1.0;

/// Epsilon inside the normal-length square root. Tangent cross products for
/// plausible depth maps have squared norms around 1e-10; this must sit far
/// below that so unit length survives to within 1e-6.
const NORMAL_EPS: f64 = 1e-20;

/// Scalar lighting coefficients on the tape, each 0-d.
#[derive(Clone, Copy)]
pub struct LightVars {
    pub ambient: Var,
    pub diffuse: Var,
    pub light_x: Var,
    pub light_y: Var,
}

impl LightVars {
    pub fn constant(g: &mut Graph, l: &Lighting) -> LightVars {
        LightVars {
            ambient: g.constant_scalar(l.ambient),
            diffuse: g.constant_scalar(l.diffuse),
            light_x: g.constant_scalar(l.light_x),
            light_y: g.constant_scalar(l.light_y),
        }
    }
}

/// A differentiable render: image, per-pixel view-space depth, and the soft
/// silhouette coverage stay on the tape; the hard mask and the winning
/// triangle's barycentric margin are plain arrays (not differentiable).
pub struct TapeRender {
    /// (3, H, W), composited over the background.
    pub image: Var,
    /// (1, H, W); background pixels carry the far end of the depth range.
    pub view_depth: Var,
    /// (1, H, W) soft coverage in [0, 1]; exactly 1 away from the silhouette.
    pub coverage: Var,
    pub mask: Array2<bool>,
    /// Minimum barycentric coordinate of the covering triangle, -1 where
    /// uncovered. Tests use this to stay clear of non-smooth bands.
    pub interior_margin: Array2<f64>,
}

/// A differentiable warp: canonical albedo and view-space depth re-rendered
/// at a target pose, without shading or background compositing of albedo.
pub struct TapeWarp {
    /// (1, H, W); background pixels carry the far end of the depth range.
    pub view_depth: Var,
    /// (3, H, W) interpolated raw albedo; zero where uncovered.
    pub view_albedo: Var,
    pub mask: Array2<bool>,
    pub interior_margin: Array2<f64>,
}

/// Unit light direction (x, y, z) from the two free components; z is always
/// positive, so the light never comes from behind the object.
pub fn light_dir_on_tape(g: &mut Graph, light_x: Var, light_y: Var) -> [Var; 3] {
    let one = g.constant_scalar(1.0);
    let x2 = g.square(light_x);
    let y2 = g.square(light_y);
    let s = g.add(x2, y2);
    let s = g.add(s, one);
    let norm = g.sqrt(s);
    [g.div(light_x, norm), g.div(light_y, norm), g.div(one, norm)]
}

/// Per-pixel 3D positions: camera rays scaled by depth. Depth is (1, H, W),
/// result is (3, H, W) in camera space.
pub fn points_on_tape(g: &mut Graph, depth: Var, cam: &CameraIntrinsics) -> Var {
    let rays = g.constant(cam.ray_grid().into_dyn());
    g.mul_chan(rays, depth)
}

fn cross_channels(g: &mut Graph, a: Var, b: Var) -> Var {
    let ax = g.slice_channels(a, 0, 1);
    let ay = g.slice_channels(a, 1, 2);
    let az = g.slice_channels(a, 2, 3);
    let bx = g.slice_channels(b, 0, 1);
    let by = g.slice_channels(b, 1, 2);
    let bz = g.slice_channels(b, 2, 3);
    let aybz = g.mul(ay, bz);
    let azby = g.mul(az, by);
    let cx = g.sub(aybz, azby);
    let azbx = g.mul(az, bx);
    let axbz = g.mul(ax, bz);
    let cy = g.sub(azbx, axbz);
    let axby = g.mul(ax, by);
    let aybx = g.mul(ay, bx);
    let cz = g.sub(axby, aybx);
    g.concat_channels(&[cx, cy, cz])
}

/// Surface normals of a 3D point grid (3, H, W): cross product of the
/// clamped central-difference tangents, unit-normalized. The x-then-y order
/// makes a camera-facing surface come out with positive z.
pub fn normals_from_points_on_tape(g: &mut Graph, points: Var) -> Var {
    let d = g.clamped_diff2d(points);
    let tx = g.slice_channels(d, 0, 3);
    let ty = g.slice_channels(d, 3, 6);
    let n = cross_channels(g, tx, ty);
    g.normalize_channels(n, NORMAL_EPS)
}

pub fn normals_on_tape(g: &mut Graph, depth: Var, cam: &CameraIntrinsics) -> Var {
    let points = points_on_tape(g, depth, cam);
    normals_from_points_on_tape(g, points)
}

/// Lambertian shading with an ambient floor: albedo scaled per pixel by
/// ambient + diffuse * max(0, n . l), clamped to [0, 1]. Albedo and normals
/// are (3, H, W).
pub fn shade_on_tape(g: &mut Graph, albedo: Var, normals: Var, light: &LightVars) -> Var {
    let [lx, ly, lz] = light_dir_on_tape(g, light.light_x, light.light_y);
    let nx = g.slice_channels(normals, 0, 1);
    let ny = g.slice_channels(normals, 1, 2);
    let nz = g.slice_channels(normals, 2, 3);
    let px = g.mul_sv(nx, lx);
    let py = g.mul_sv(ny, ly);
    let pz = g.mul_sv(nz, lz);
    let ndl = g.add(px, py);
    let ndl = g.add(ndl, pz);
    let lit = g.relu(ndl);
    let dif = g.mul_sv(lit, light.diffuse);
    let shading = g.add_sv(dif, light.ambient);
    let img = g.mul_chan(albedo, shading);
    g.clamp01(img)
}

/// Full differentiable render. Depth is (1, H, W), albedo (3, H, W), pose a
/// (6,) tensor of (rx, ry, rz, tx, ty, tz). Albedo and canonical-frame
/// normals ride through the rasterizer as interpolated attributes; shading
/// happens afterwards on the interpolated values, so lighting stays
/// anchored to the canonical surface orientation rather than the pose.
pub fn render_on_tape(
    g: &mut Graph,
    depth: Var,
    albedo: Var,
    light: &LightVars,
    pose: Var,
    cam: &CameraIntrinsics,
    opts: &RasterOptions,
) -> TapeRender {
    let points = points_on_tape(g, depth, cam);
    let normals = normals_from_points_on_tape(g, points);
    let posed = g.rigid_transform(points, pose, cam.pivot());
    let attrs = g.concat_channels(&[albedo, normals]);
    let (out, info) = g.raster(posed, attrs, cam, opts);

    let interp_albedo = g.slice_channels(out, 0, 3);
    let interp_normals = g.slice_channels(out, 3, 6);
    let interp_normals = g.normalize_channels(interp_normals, NORMAL_EPS);
    let z = g.slice_channels(out, 6, 7);
    let coverage = g.slice_channels(out, 7, 8);
    let shaded = shade_on_tape(g, interp_albedo, interp_normals, light);

    let n = cam.image_size;
    let mask_arr = info.mask.clone();
    let m = g.constant(mask_arr.clone().into_shape_with_order((1, n, n)).unwrap().into_dyn());
    // image = bg + mask * coverage * (shaded - bg): exact background where
    // uncovered, exact shaded color where the coverage has saturated.
    let mcov = g.mul(coverage, m);
    let bg = g.constant(ArrayD::from_elem(IxDyn(&[3, n, n]), BACKGROUND));
    let dev = g.sub(shaded, bg);
    let dev = g.mul_chan(dev, mcov);
    let image = g.add(dev, bg);

    let mz = g.mul(z, m);
    let bg_depth =
        mask_arr.mapv(|v| (1.0 - v) * cam.depth_max).into_shape_with_order((1, n, n)).unwrap();
    let bg_depth = g.constant(bg_depth.into_dyn());
    let view_depth = g.add(mz, bg_depth);

    TapeRender {
        image,
        view_depth,
        coverage,
        mask: info.mask.mapv(|v| v > 0.5),
        interior_margin: info.interior_margin,
    }
}

/// Differentiable warp: rasterizes raw albedo (no shading, no background
/// blend) and view-space depth at the target pose.
pub fn warp_on_tape(
    g: &mut Graph,
    depth: Var,
    albedo: Var,
    pose: Var,
    cam: &CameraIntrinsics,
    opts: &RasterOptions,
) -> TapeWarp {
    let points = points_on_tape(g, depth, cam);
    let posed = g.rigid_transform(points, pose, cam.pivot());
    let (out, info) = g.raster(posed, albedo, cam, opts);
    let view_albedo = g.slice_channels(out, 0, 3);
    let z = g.slice_channels(out, 3, 4);

    let n = cam.image_size;
    let mask_arr = info.mask.clone();
    let m = g.constant(mask_arr.clone().into_shape_with_order((1, n, n)).unwrap().into_dyn());
    let mz = g.mul(z, m);
    let bg_depth =
        mask_arr.mapv(|v| (1.0 - v) * cam.depth_max).into_shape_with_order((1, n, n)).unwrap();
    let bg_depth = g.constant(bg_depth.into_dyn());
    let view_depth = g.add(mz, bg_depth);

    TapeWarp {
        view_depth,
        view_albedo,
        mask: info.mask.mapv(|v| v > 0.5),
        interior_margin: info.interior_margin,
    }
}

fn check_model(model: &CanonicalModel, cam: &CameraIntrinsics) -> Result<()> {
    let (h, w) = model.depth.size();
    if h != cam.image_size || w != cam.image_size {
        return Err(Error::InvalidArgument(format!(
            "model is {h}x{w} but the camera expects {0}x{0}",
            cam.image_size
        )));
    }
    Ok(())
}

fn depth_constant(g: &mut Graph, d: &DepthMap) -> Var {
    let (h, w) = d.size();
    g.constant(d.data.clone().into_shape_with_order((1, h, w)).unwrap().into_dyn())
}

fn extract3(g: &Graph, v: Var) -> Array3<f64> {
    g.value(v).clone().into_dimensionality::<Ix3>().unwrap()
}

fn extract_plane(g: &Graph, v: Var) -> Array2<f64> {
    let a = extract3(g, v);
    let (_, h, w) = a.dim();
    a.into_shape_with_order((h, w)).unwrap()
}

/// Render a canonical model at a pose under a lighting.
pub fn render(
    model: &CanonicalModel,
    light: &Lighting,
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Result<RenderedView> {
    cam.validate()?;
    light.validate()?;
    pose.validate()?;
    check_model(model, cam)?;

    let mut g = Graph::new();
    let depth = depth_constant(&mut g, &model.depth);
    let albedo = g.constant(model.albedo.data.clone().into_dyn());
    let light_vars = LightVars::constant(&mut g, light);
    let pose_var = g.constant(pose.to_array().into_dyn());
    let r = render_on_tape(
        &mut g,
        depth,
        albedo,
        &light_vars,
        pose_var,
        cam,
        &RasterOptions::default(),
    );
    Ok(RenderedView {
        image: extract3(&g, r.image),
        mask: r.mask,
        view_depth: extract_plane(&g, r.view_depth),
    })
}

/// Re-render canonical depth and albedo at a pose without shading. Returns
/// the view-space depth, the warped albedo, and the coverage mask; outside
/// the mask the depth carries the far range end and the albedo the
/// background color.
pub fn warp(
    model: &CanonicalModel,
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Result<(DepthMap, AlbedoMap, Array2<bool>)> {
    cam.validate()?;
    pose.validate()?;
    check_model(model, cam)?;

    let mut g = Graph::new();
    let depth = depth_constant(&mut g, &model.depth);
    let albedo = g.constant(model.albedo.data.clone().into_dyn());
    let pose_var = g.constant(pose.to_array().into_dyn());
    let w = warp_on_tape(&mut g, depth, albedo, pose_var, cam, &RasterOptions::default());

    let view_depth = DepthMap::new(extract_plane(&g, w.view_depth))?;
    let mut a = extract3(&g, w.view_albedo);
    for ((_, i, j), v) in a.indexed_iter_mut() {
        if w.mask[[i, j]] {
            // Interpolation can escape [0, 1] by rounding only.
            *v = v.clamp(0.0, 1.0);
        } else {
            *v = BACKGROUND;
        }
    }
    Ok((view_depth, AlbedoMap::new(a)?, w.mask))
}

/// Surface normals of a canonical depth map, unit length, z toward +.
pub fn normals_from_depth(depth: &DepthMap, cam: &CameraIntrinsics) -> Result<NormalMap> {
    cam.validate()?;
    let (h, w) = depth.size();
    if h != cam.image_size || w != cam.image_size {
        return Err(Error::InvalidArgument(format!(
            "depth is {h}x{w} but the camera expects {0}x{0}",
            cam.image_size
        )));
    }
    let mut g = Graph::new();
    let d = depth_constant(&mut g, depth);
    let n = normals_on_tape(&mut g, d, cam);
    NormalMap::new(extract3(&g, n))
}

/// Shade an albedo with normals and a lighting; no rasterization involved.
pub fn shade(albedo: &AlbedoMap, normals: &NormalMap, light: &Lighting) -> Result<Array3<f64>> {
    light.validate()?;
    if albedo.data.dim() != normals.data.dim() {
        return Err(Error::InvalidArgument(format!(
            "albedo {:?} and normals {:?} differ in shape",
            albedo.data.dim(),
            normals.data.dim()
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(albedo.data.clone().into_dyn());
    let n = g.constant(normals.data.clone().into_dyn());
    let l = LightVars::constant(&mut g, light);
    let s = shade_on_tape(&mut g, a, n, &l);
    Ok(extract3(&g, s))
}

/// Shrink a mask by one pixel with an 8-connected structuring element;
/// image-border pixels always drop out. Evaluation and the interior
/// assertions in tests use this to stay off silhouette and border pixels.
pub fn erode_mask(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        if i == 0 || j == 0 || i + 1 == h || j + 1 == w {
            return false;
        }
        (-1..=1).all(|di: isize| {
            (-1..=1).all(|dj: isize| {
                mask[[(i as isize + di) as usize, (j as isize + dj) as usize]]
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::FdCheck;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};

    fn cam64() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn cam8() -> CameraIntrinsics {
        CameraIntrinsics { image_size: 8, ..CameraIntrinsics::default() }
    }

    fn flat_model(cam: &CameraIntrinsics, depth: f64, albedo: impl Fn(usize, usize, usize) -> f64) -> CanonicalModel {
        let n = cam.image_size;
        CanonicalModel {
            depth: DepthMap::new(Array2::from_elem((n, n), depth)).unwrap(),
            albedo: AlbedoMap::new(Array3::from_shape_fn((3, n, n), |(c, i, j)| albedo(c, i, j)))
                .unwrap(),
        }
    }

    fn bumpy_depth(cam: &CameraIntrinsics) -> DepthMap {
        let n = cam.image_size;
        let c = (n as f64 - 1.0) / 2.0;
        DepthMap::new(Array2::from_shape_fn((n, n), |(i, j)| {
            let r2 = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (c * c).max(1.0);
            cam.depth_mid() - 0.06 * (-2.5 * r2).exp()
        }))
        .unwrap()
    }

    #[test]
    fn identity_pose_ambient_only_scales_albedo() {
        let cam = cam64();
        let model = flat_model(&cam, 1.0, |c, i, j| {
            0.1 + 0.8 * ((c + 1) * (i * 64 + j)) as f64 / (3.0 * 64.0 * 64.0)
        });
        let light = Lighting { ambient: 0.6, diffuse: 0.0, light_x: 0.3, light_y: -0.2 };
        let view = render(&model, &light, &Pose::identity(), &cam).unwrap();
        assert!(view.mask.iter().all(|&m| m), "flat identity render covers the frame");
        let interior = erode_mask(&view.mask);
        assert!(interior.iter().filter(|&&m| m).count() > 3000);
        for i in 0..64 {
            for j in 0..64 {
                if interior[[i, j]] {
                    for ch in 0..3 {
                        assert_abs_diff_eq!(
                            view.image[[ch, i, j]],
                            0.6 * model.albedo.data[[ch, i, j]],
                            epsilon = 1e-9
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn identity_pose_view_depth_matches_canonical() {
        let cam = cam64();
        let depth = bumpy_depth(&cam);
        let model = CanonicalModel {
            depth: depth.clone(),
            albedo: AlbedoMap::new(Array3::from_elem((3, 64, 64), 0.5)).unwrap(),
        };
        let light = Lighting { ambient: 0.5, diffuse: 0.4, light_x: 0.0, light_y: 0.0 };
        let view = render(&model, &light, &Pose::identity(), &cam).unwrap();
        let interior = erode_mask(&view.mask);
        for i in 0..64 {
            for j in 0..64 {
                if interior[[i, j]] {
                    assert_abs_diff_eq!(
                        view.view_depth[[i, j]],
                        depth.data[[i, j]],
                        epsilon = 1e-3
                    );
                }
            }
        }
    }

    #[test]
    fn far_off_frame_pose_leaves_background_only() {
        let cam = cam64();
        let model = flat_model(&cam, 1.0, |_, _, _| 0.5);
        let light = Lighting { ambient: 0.5, diffuse: 0.3, light_x: 0.0, light_y: 0.0 };
        // Half a camera unit sideways at a 10 degree fov moves the object
        // several frame widths off screen.
        let pose = Pose { tx: 0.5, ..Pose::identity() };
        let view = render(&model, &light, &pose, &cam).unwrap();
        assert!(view.mask.iter().all(|&m| !m));
        assert!(view.image.iter().all(|&v| v == BACKGROUND));
        assert!(view.view_depth.iter().all(|&v| v == cam.depth_max));
    }

    #[test]
    fn half_turn_shows_the_back_and_empties_the_mask() {
        let cam = cam64();
        let model = CanonicalModel {
            depth: bumpy_depth(&cam),
            albedo: AlbedoMap::new(Array3::from_elem((3, 64, 64), 0.5)).unwrap(),
        };
        let pose = Pose { ry: std::f64::consts::PI, ..Pose::identity() };
        let (_, _, mask) = warp(&model, &pose, &cam).unwrap();
        let covered = mask.iter().filter(|&&m| m).count();
        assert!(
            covered <= 64 * 64 / 100,
            "back-facing surface should be culled almost everywhere, got {covered} pixels"
        );
    }

    #[test]
    fn warp_at_identity_reproduces_canonical_maps() {
        let cam = cam64();
        let model = CanonicalModel {
            depth: bumpy_depth(&cam),
            albedo: AlbedoMap::new(Array3::from_shape_fn((3, 64, 64), |(c, i, j)| {
                0.15 + 0.7 * ((i * 31 + j * 17 + c * 101) % 97) as f64 / 96.0
            }))
            .unwrap(),
        };
        let (d, a, mask) = warp(&model, &Pose::identity(), &cam).unwrap();
        let interior = erode_mask(&mask);
        for i in 0..64 {
            for j in 0..64 {
                if interior[[i, j]] {
                    assert_abs_diff_eq!(d.data[[i, j]], model.depth.data[[i, j]], epsilon = 1e-3);
                    for ch in 0..3 {
                        assert_abs_diff_eq!(
                            a.data[[ch, i, j]],
                            model.albedo.data[[ch, i, j]],
                            epsilon = 1e-6
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pure_z_translation_offsets_view_depth() {
        let cam = cam64();
        let model = flat_model(&cam, 1.0, |_, _, _| 0.5);
        let t = 0.05;
        let pose = Pose { tz: t, ..Pose::identity() };
        let (d, _, mask) = warp(&model, &pose, &cam).unwrap();
        let interior = erode_mask(&mask);
        assert!(interior.iter().filter(|&&m| m).count() > 2000);
        for i in 0..64 {
            for j in 0..64 {
                if interior[[i, j]] {
                    assert_abs_diff_eq!(d.data[[i, j]], 1.0 + t, epsilon = 1e-3);
                }
            }
        }
    }

    #[test]
    fn flat_plane_normals_point_at_the_camera() {
        let cam = cam64();
        let d = DepthMap::new(Array2::from_elem((64, 64), 1.0)).unwrap();
        let n = normals_from_depth(&d, &cam).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                assert_abs_diff_eq!(n.data[[0, i, j]], 0.0, epsilon = 1e-9);
                assert_abs_diff_eq!(n.data[[1, i, j]], 0.0, epsilon = 1e-9);
                assert_abs_diff_eq!(n.data[[2, i, j]], 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn tilted_plane_normals_match_the_analytic_plane_normal() {
        // Construct depth so the surface is exactly the plane z = d0 + s*x
        // in camera space: z = d0 / (1 - s * xhat). Every chord between
        // surface points lies in the plane, so even the clamped border
        // stencils recover the exact normal (-s, 0, 1)/norm.
        let cam = cam64();
        let s = 0.3;
        let d0 = 1.0;
        let f = cam.focal();
        let c = cam.center();
        let d = DepthMap::new(Array2::from_shape_fn((64, 64), |(_, j)| {
            let xhat = (j as f64 + 0.5 - c) / f;
            d0 / (1.0 - s * xhat)
        }))
        .unwrap();
        let n = normals_from_depth(&d, &cam).unwrap();
        let norm = (1.0 + s * s).sqrt();
        for i in 0..64 {
            for j in 0..64 {
                assert_abs_diff_eq!(n.data[[0, i, j]], -s / norm, epsilon = 1e-9);
                assert_abs_diff_eq!(n.data[[1, i, j]], 0.0, epsilon = 1e-9);
                assert_abs_diff_eq!(n.data[[2, i, j]], 1.0 / norm, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn identity_render_equals_shaded_warp() {
        let cam = cam64();
        let model = CanonicalModel {
            depth: bumpy_depth(&cam),
            albedo: AlbedoMap::new(Array3::from_shape_fn((3, 64, 64), |(c, i, j)| {
                0.2 + 0.6 * ((i * 7 + j * 13 + c * 29) % 53) as f64 / 52.0
            }))
            .unwrap(),
        };
        let light = Lighting { ambient: 0.4, diffuse: 0.5, light_x: 0.2, light_y: -0.1 };
        let view = render(&model, &light, &Pose::identity(), &cam).unwrap();
        let (_, warped_albedo, mask) = warp(&model, &Pose::identity(), &cam).unwrap();
        let normals = normals_from_depth(&model.depth, &cam).unwrap();
        let reshaded = shade(&warped_albedo, &normals, &light).unwrap();
        let interior = erode_mask(&mask);
        for i in 0..64 {
            for j in 0..64 {
                if interior[[i, j]] {
                    for ch in 0..3 {
                        assert_abs_diff_eq!(
                            view.image[[ch, i, j]],
                            reshaded[[ch, i, j]],
                            epsilon = 1e-4
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn widening_the_depth_range_never_shrinks_the_mask() {
        let cam = cam64();
        let model = CanonicalModel {
            depth: bumpy_depth(&cam),
            albedo: AlbedoMap::new(Array3::from_elem((3, 64, 64), 0.5)).unwrap(),
        };
        let pose = Pose { ry: 0.3, tx: 0.02, ..Pose::identity() };
        let wide =
            CameraIntrinsics { depth_min: 0.7, depth_max: 1.3, ..cam };
        let (_, _, narrow_mask) = warp(&model, &pose, &cam).unwrap();
        let (_, _, wide_mask) = warp(&model, &pose, &wide).unwrap();
        for (n, w) in narrow_mask.iter().zip(wide_mask.iter()) {
            assert!(!n || *w, "pixel masked under the narrow range lost under the wide one");
        }
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let cam = cam64();
        let model = CanonicalModel {
            depth: bumpy_depth(&cam),
            albedo: AlbedoMap::new(Array3::from_shape_fn((3, 64, 64), |(c, i, j)| {
                0.2 + 0.013 * ((c * 7 + i + 2 * j) % 40) as f64
            }))
            .unwrap(),
        };
        let light = Lighting { ambient: 0.35, diffuse: 0.55, light_x: -0.3, light_y: 0.25 };
        let pose = Pose { rx: 0.1, ry: -0.2, rz: 0.05, tx: 0.01, ty: -0.02, tz: 0.03 };
        let a = render(&model, &light, &pose, &cam).unwrap();
        let b = render(&model, &light, &pose, &cam).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.view_depth, b.view_depth);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn render_rejects_invalid_inputs() {
        let cam = cam64();
        let model = flat_model(&cam, 1.0, |_, _, _| 0.5);
        let light = Lighting { ambient: 0.5, diffuse: 0.3, light_x: 0.0, light_y: 0.0 };
        let bad_pose = Pose { ry: 4.0, ..Pose::identity() };
        assert!(render(&model, &light, &bad_pose, &cam).is_err());
        let small = CameraIntrinsics { image_size: 32, ..cam };
        assert!(render(&model, &light, &Pose::identity(), &small).is_err());
    }

    /// Pseudo-random but deterministic per-pixel weights over the smooth
    /// interior, so gradient errors cannot cancel across pixels.
    fn interior_weights(margin: &Array2<f64>, n_ch: usize) -> ArrayD<f64> {
        let (h, w) = margin.dim();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.25 + 1.5 * ((state >> 11) as f64 / (1u64 << 53) as f64)
        };
        ArrayD::from_shape_fn(IxDyn(&[n_ch, h, w]), |idx| {
            let v = next();
            if margin[[idx[1], idx[2]]] > 0.05 {
                v
            } else {
                0.0
            }
        })
    }

    fn fd_inputs(cam: &CameraIntrinsics) -> Vec<ArrayD<f64>> {
        let n = cam.image_size;
        let c = (n as f64 - 1.0) / 2.0;
        let depth = ArrayD::from_shape_fn(IxDyn(&[1, n, n]), |idx| {
            let (i, j) = (idx[1] as f64, idx[2] as f64);
            let r2 = ((i - c).powi(2) + (j - c).powi(2)) / (c * c).max(1.0);
            1.0 - 0.05 * (-2.0 * r2).exp() + 0.004 * ((i * 3.1).sin() * (j * 2.3).cos())
        });
        let albedo = ArrayD::from_shape_fn(IxDyn(&[3, n, n]), |idx| {
            0.25 + 0.5 * ((idx[0] * 13 + idx[1] * 7 + idx[2] * 3) % 23) as f64 / 22.0
        });
        let light = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.4, 0.5, 0.1, -0.2]).unwrap();
        let pose = ArrayD::from_shape_vec(
            IxDyn(&[6]),
            vec![0.06, -0.05, 0.04, 0.008, -0.006, 0.012],
        )
        .unwrap();
        vec![depth, albedo, light, pose]
    }

    fn light_vars_from_array(g: &mut Graph, arr: Var) -> LightVars {
        LightVars {
            ambient: g.index1(arr, 0),
            diffuse: g.index1(arr, 1),
            light_x: g.index1(arr, 2),
            light_y: g.index1(arr, 3),
        }
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let cam = cam8();
        let inputs = fd_inputs(&cam);
        // One base render to freeze the smooth-interior weighting.
        let mut g = Graph::new();
        let d = g.input(inputs[0].clone());
        let a = g.input(inputs[1].clone());
        let l_arr = g.input(inputs[2].clone());
        let p = g.input(inputs[3].clone());
        let lv = light_vars_from_array(&mut g, l_arr);
        let base = render_on_tape(&mut g, d, a, &lv, p, &cam, &RasterOptions::default());
        let w_img = interior_weights(&base.interior_margin, 3);
        let w_depth = interior_weights(&base.interior_margin, 1);
        assert!(w_img.iter().filter(|&&v| v > 0.0).count() > 30, "need a usable interior");

        FdCheck::default()
            .run(&inputs, |g, v| {
                let lv = light_vars_from_array(g, v[2]);
                let r = render_on_tape(g, v[0], v[1], &lv, v[3], &cam, &RasterOptions::default());
                let wi = g.constant(w_img.clone());
                let wd = g.constant(w_depth.clone());
                let pi = g.mul(r.image, wi);
                let pd = g.mul(r.view_depth, wd);
                let si = g.sum_all(pi);
                let sd = g.sum_all(pd);
                g.add(si, sd)
            })
            .assert_ok();
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let cam = cam8();
        let inputs = fd_inputs(&cam);
        let mut g = Graph::new();
        let d = g.input(inputs[0].clone());
        let a = g.input(inputs[1].clone());
        let p = g.input(inputs[3].clone());
        let base = warp_on_tape(&mut g, d, a, p, &cam, &RasterOptions::default());
        let w_alb = interior_weights(&base.interior_margin, 3);
        let w_depth = interior_weights(&base.interior_margin, 1);

        let warp_inputs = vec![inputs[0].clone(), inputs[1].clone(), inputs[3].clone()];
        FdCheck::default()
            .run(&warp_inputs, |g, v| {
                let w = warp_on_tape(g, v[0], v[1], v[2], &cam, &RasterOptions::default());
                let wa = g.constant(w_alb.clone());
                let wd = g.constant(w_depth.clone());
                let pa = g.mul(w.view_albedo, wa);
                let pd = g.mul(w.view_depth, wd);
                let sa = g.sum_all(pa);
                let sd = g.sum_all(pd);
                g.add(sa, sd)
            })
            .assert_ok();
    }

    #[test]
    fn shade_gradients_match_finite_differences() {
        let n = 8;
        let albedo = ArrayD::from_shape_fn(IxDyn(&[3, n, n]), |idx| {
            0.2 + 0.6 * ((idx[0] * 11 + idx[1] * 5 + idx[2]) % 17) as f64 / 16.0
        });
        // Normals need not be unit for the formula to differentiate; keep
        // them near the +z pole so n . l stays clear of the relu kink.
        let normals = ArrayD::from_shape_fn(IxDyn(&[3, n, n]), |idx| match idx[0] {
            0 => 0.15 * ((idx[1] as f64) * 0.7).sin(),
            1 => 0.15 * ((idx[2] as f64) * 0.9).cos(),
            _ => 1.0,
        });
        let light = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.3, 0.45, 0.15, -0.25]).unwrap();
        FdCheck::default()
            .run(&[albedo, normals, light], |g, v| {
                let lv = light_vars_from_array(g, v[2]);
                let s = shade_on_tape(g, v[0], v[1], &lv);
                g.sum_all(s)
            })
            .assert_ok();
    }

    #[test]
    fn silhouette_coverage_gradient_matches_fd_inside_the_band() {
        // A single quad whose open edge crosses a pixel center's soft band:
        // checks the coverage path of the rasterizer backward against a
        // sub-band finite-difference step.
        let cam = CameraIntrinsics { image_size: 4, ..CameraIntrinsics::default() };
        let f = cam.focal();
        let c = cam.center();
        // Place a 2x2 vertex grid so its projection covers the left half of
        // the frame, with the right (open) edge passing a sliver to the
        // right of the column of pixel centers at u = 1.5: the distance is
        // a fraction of the soft band width, so those pixels get a coverage
        // strictly between 0 and 1 while staying firmly contained in the
        // triangle (the finite-difference step cannot flip the winner).
        let edge_u = 1.5 + 1.5e-4; // pixels; 0.75 sigma in ndc units
        let to_x = |u: f64| (u - c) / f; // x at z = 1
        let xs = [to_x(-0.7), to_x(edge_u)];
        let ys = [to_x(-0.7), to_x(3.3)];
        let mut pts = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        for (gi, &y) in ys.iter().enumerate() {
            for (gj, &x) in xs.iter().enumerate() {
                pts[[0, gi, gj]] = x;
                pts[[1, gi, gj]] = y;
                pts[[2, gi, gj]] = 1.0;
            }
        }
        let attrs = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 0.7);

        // Identify band pixels: coverage strictly between 0.02 and 0.98.
        let mut g = Graph::new();
        let p = g.input(pts.clone());
        let a = g.input(attrs.clone());
        let (out, _) = g.raster(p, a, &cam, &RasterOptions::default());
        let cov = g.value(out).index_axis(ndarray::Axis(0), 2).to_owned();
        let band: Vec<(usize, usize)> = cov
            .indexed_iter()
            .filter(|(_, &v)| v > 0.02 && v < 0.98)
            .map(|(idx, _)| (idx[0], idx[1]))
            .collect();
        assert!(!band.is_empty(), "constructed scene must place a pixel in the soft band");

        let w = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |idx| {
            if band.contains(&(idx[0], idx[1])) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(band.len(), 3, "expected the three pixel centers of column 1 in the band");
        FdCheck { step: 1e-7, rel_tol: 1e-3, abs_floor: 1e-7 }
            .run(&[pts, attrs], |g, v| {
                let (out, _) = g.raster(v[0], v[1], &cam, &RasterOptions::default());
                let cov = g.slice_channels(out, 2, 3);
                let cov = g.reshape(cov, &[4, 4]);
                let wc = g.constant(w.clone());
                let prod = g.mul(cov, wc);
                g.sum_all(prod)
            })
            .assert_ok();
    }

    #[test]
    fn light_direction_on_tape_matches_domain_type() {
        let l = Lighting { ambient: 0.4, diffuse: 0.4, light_x: 0.6, light_y: -0.3 };
        let mut g = Graph::new();
        let lx = g.constant_scalar(l.light_x);
        let ly = g.constant_scalar(l.light_y);
        let dir = light_dir_on_tape(&mut g, lx, ly);
        let expect = l.direction();
        for (v, e) in dir.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(g.scalar_value(*v), *e, epsilon = 1e-12);
        }
    }
}
