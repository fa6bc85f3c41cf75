//! Soft-edge triangle rasterization of a deformed pixel grid.
//!
//! The (3, H, W) input points are treated as a vertex grid; every 2x2 cell
//! contributes two triangles. Triangles are projected through the pinhole
//! camera, back-facing and degenerate ones are culled, and each output pixel
//! takes its attributes from the nearest (smallest interpolated depth)
//! triangle whose interior contains the pixel center.
//!
//! Coverage is a sigmoid of the distance to the mesh silhouette, not to
//! arbitrary triangle edges: only *open* edges count, i.e. edges whose
//! neighboring triangle is missing or culled. A pixel whose winning triangle
//! has no open edge nearby gets coverage exactly 1.0, so interiors reproduce
//! the shaded image bit-for-bit and only a subpixel band around the
//! silhouette is softened.
//!
//! Interpolation is screen-space affine (the triangles are pixel-sized, so
//! perspective correction would change nothing measurable).

use ndarray::{Array2, ArrayD, IxDyn};

use crate::camera::CameraIntrinsics;

#[derive(Clone, Debug)]
pub struct RasterOptions {
    /// Width of the soft silhouette band, in NDC units (2/image_size per
    /// pixel). Numerical softening only; keep it well below a pixel.
    pub sigma_ndc: f64,
    /// Triangles with projected signed area (px^2) below this are culled,
    /// which also removes back-facing geometry (negative area).
    pub min_area: f64,
    /// Vertices closer to the camera plane than this are culled with their
    /// triangles.
    pub near_clip: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions {
            sigma_ndc: 1e-4,
            min_area: 1e-12,
            near_clip: 1e-6,
        }
    }
}

/// Non-differentiable side outputs of a raster call.
pub struct RasterInfo {
    /// 1.0 where some triangle interior contains the pixel center.
    pub mask: Array2<f64>,
    /// Minimum barycentric coordinate of the winning triangle per pixel
    /// (-1.0 where uncovered). Near-zero values sit on a triangle edge,
    /// where the winner can switch under perturbations; gradient checks
    /// exclude that band.
    pub interior_margin: Array2<f64>,
}

pub(crate) struct RasterSaved {
    /// Per output pixel: packed winning triangle id, or -1.
    winner: Vec<i64>,
    /// Per triangle: survived culling. Determines which edges are open.
    alive: Vec<bool>,
    grid_h: usize,
    grid_w: usize,
    out_size: usize,
    n_attrs: usize,
    focal: f64,
    center: f64,
    sigma_ndc: f64,
}

#[derive(Clone, Copy)]
struct Tri {
    /// Flat grid indices of the three vertices.
    v: [usize; 3],
}

fn pack_tri(i: usize, j: usize, t: usize, w: usize) -> usize {
    (i * (w - 1) + j) * 2 + t
}

/// Vertex indices for triangle `t` (0 or 1) of cell (i, j) on an H x W grid.
fn cell_tri(i: usize, j: usize, t: usize, w: usize) -> Tri {
    let a = i * w + j;
    match t {
        0 => Tri { v: [a, a + 1, a + w] },
        _ => Tri { v: [a + w, a + 1, a + w + 1] },
    }
}

fn unpack_tri(id: i64, w: usize) -> (usize, usize, usize, Tri) {
    let t = (id % 2) as usize;
    let cell = (id / 2) as usize;
    let i = cell / (w - 1);
    let j = cell % (w - 1);
    (i, j, t, cell_tri(i, j, t, w))
}

/// For each edge e = (s[e], s[e+1]) of triangle (i, j, t), whether the edge
/// lies on the mesh silhouette: no neighboring triangle, or the neighbor was
/// culled. Edge order matches the vertex order from [`cell_tri`].
fn open_edges(i: usize, j: usize, t: usize, gh: usize, gw: usize, alive: &[bool]) -> [bool; 3] {
    let dead = |i2: Option<usize>, j2: Option<usize>, t2: usize| -> bool {
        match (i2, j2) {
            (Some(i2), Some(j2)) if i2 < gh - 1 && j2 < gw - 1 => {
                !alive[pack_tri(i2, j2, t2, gw)]
            }
            _ => true,
        }
    };
    if t == 0 {
        // top, diagonal, left
        [
            dead(i.checked_sub(1), Some(j), 1),
            dead(Some(i), Some(j), 1),
            dead(Some(i), j.checked_sub(1), 1),
        ]
    } else {
        // diagonal, right, bottom
        [
            dead(Some(i), Some(j), 0),
            dead(Some(i), Some(j + 1), 0),
            dead(Some(i + 1), Some(j), 0),
        ]
    }
}

fn cross2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Signed distance from point q to the nearest *open* edge of the triangle
/// (perpendicular distance, positive inside). `None` when every edge is
/// shared with a live neighbor, i.e. q is far from any silhouette.
fn silhouette_distance(s: &[[f64; 2]; 3], q: [f64; 2], open: [bool; 3]) -> Option<(f64, usize)> {
    let mut best = f64::INFINITY;
    let mut best_e = usize::MAX;
    for e in 0..3 {
        if !open[e] {
            continue;
        }
        let a = s[e];
        let b = s[(e + 1) % 3];
        let ux = b[0] - a[0];
        let uy = b[1] - a[1];
        let len = (ux * ux + uy * uy).sqrt().max(1e-30);
        let perp = cross2(ux, uy, q[0] - a[0], q[1] - a[1]) / len;
        if perp < best {
            best = perp;
            best_e = e;
        }
    }
    (best_e != usize::MAX).then_some((best, best_e))
}

pub(crate) fn raster_forward(
    points: &ArrayD<f64>,
    attrs: &ArrayD<f64>,
    cam: &CameraIntrinsics,
    opts: &RasterOptions,
) -> (ArrayD<f64>, RasterSaved, RasterInfo) {
    let sp = points.shape();
    assert_eq!(sp.len(), 3, "raster: points must be (3, H, W)");
    assert_eq!(sp[0], 3, "raster: points must be (3, H, W)");
    let (gh, gw) = (sp[1], sp[2]);
    assert!(gh >= 2 && gw >= 2, "raster: grid must be at least 2x2");
    let sa = attrs.shape();
    assert_eq!(&sa[1..], &sp[1..], "raster: attrs grid mismatch");
    let n_attrs = sa[0];
    let n = cam.image_size;
    let focal = cam.focal();
    let center = cam.center();
    let ndc_scale = 2.0 / n as f64;

    let px = points.as_slice().unwrap();
    let hw = gh * gw;
    let (xs, ys, zs) = (&px[..hw], &px[hw..2 * hw], &px[2 * hw..]);

    // Project every grid vertex once.
    let mut su = vec![0.0; hw];
    let mut sv = vec![0.0; hw];
    let mut ok = vec![false; hw];
    for v in 0..hw {
        if zs[v] > opts.near_clip {
            su[v] = focal * xs[v] / zs[v] + center;
            sv[v] = focal * ys[v] / zs[v] + center;
            ok[v] = true;
        }
    }

    // Cull pass: a triangle survives if all vertices project and its
    // projected area is positive (front-facing, non-degenerate).
    let mut alive = vec![false; (gh - 1) * (gw - 1) * 2];
    for i in 0..gh - 1 {
        for j in 0..gw - 1 {
            for t in 0..2 {
                let tri = cell_tri(i, j, t, gw);
                let [a, b, c] = tri.v;
                if !(ok[a] && ok[b] && ok[c]) {
                    continue;
                }
                let d = cross2(
                    su[b] - su[a],
                    sv[b] - sv[a],
                    su[c] - su[a],
                    sv[c] - sv[a],
                );
                if d > opts.min_area {
                    alive[pack_tri(i, j, t, gw)] = true;
                }
            }
        }
    }

    let mut winner = vec![-1i64; n * n];
    let mut best_z = vec![f64::INFINITY; n * n];
    let band = 0.5; // px of bbox slack; the soft band itself is subpixel

    for i in 0..gh - 1 {
        for j in 0..gw - 1 {
            for t in 0..2 {
                if !alive[pack_tri(i, j, t, gw)] {
                    continue;
                }
                let tri = cell_tri(i, j, t, gw);
                let [a, b, c] = tri.v;
                let s = [[su[a], sv[a]], [su[b], sv[b]], [su[c], sv[c]]];
                let d = cross2(s[1][0] - s[0][0], s[1][1] - s[0][1], s[2][0] - s[0][0], s[2][1] - s[0][1]);
                let (min_u, max_u) = minmax3(s[0][0], s[1][0], s[2][0]);
                let (min_v, max_v) = minmax3(s[0][1], s[1][1], s[2][1]);
                let j_lo = ((min_u - band - 0.5).ceil().max(0.0)) as usize;
                let j_hi = (max_u - 0.5 + band).floor().min((n - 1) as f64);
                let i_lo = ((min_v - band - 0.5).ceil().max(0.0)) as usize;
                let i_hi = (max_v - 0.5 + band).floor().min((n - 1) as f64);
                if j_hi < 0.0 || i_hi < 0.0 {
                    continue;
                }
                let (j_hi, i_hi) = (j_hi as usize, i_hi as usize);
                let id = pack_tri(i, j, t, gw) as i64;
                for pi in i_lo..=i_hi {
                    let qy = pi as f64 + 0.5;
                    for pj in j_lo..=j_hi {
                        let qx = pj as f64 + 0.5;
                        let n0 = cross2(s[1][0] - qx, s[1][1] - qy, s[2][0] - qx, s[2][1] - qy);
                        let n1 = cross2(s[2][0] - qx, s[2][1] - qy, s[0][0] - qx, s[0][1] - qy);
                        let n2 = cross2(s[0][0] - qx, s[0][1] - qy, s[1][0] - qx, s[1][1] - qy);
                        // Area-relative slack: a pixel center exactly on a
                        // shared edge otherwise falls out of both triangles
                        // through rounding alone.
                        let tol = -1e-9 * d;
                        if n0 < tol || n1 < tol || n2 < tol {
                            continue;
                        }
                        let (w0, w1, w2) = (n0 / d, n1 / d, n2 / d);
                        let z = w0 * zs[a] + w1 * zs[b] + w2 * zs[c];
                        let p = pi * n + pj;
                        if z < best_z[p] {
                            best_z[p] = z;
                            winner[p] = id;
                        }
                    }
                }
            }
        }
    }

    // Write pass: evaluate the winning triangle per covered pixel.
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n_attrs + 2, n, n]));
    let mut mask = Array2::<f64>::zeros((n, n));
    let mut margin = Array2::<f64>::from_elem((n, n), -1.0);
    let at = attrs.as_slice().unwrap();
    {
        let os = out.as_slice_mut().unwrap();
        let img_px = n * n;
        for pi in 0..n {
            for pj in 0..n {
                let p = pi * n + pj;
                if winner[p] < 0 {
                    continue;
                }
                let (ti, tj, tt, tri) = unpack_tri(winner[p], gw);
                let [a, b, c] = tri.v;
                let s = [[su[a], sv[a]], [su[b], sv[b]], [su[c], sv[c]]];
                let q = [pj as f64 + 0.5, pi as f64 + 0.5];
                let d = cross2(s[1][0] - s[0][0], s[1][1] - s[0][1], s[2][0] - s[0][0], s[2][1] - s[0][1]);
                let n0 = cross2(s[1][0] - q[0], s[1][1] - q[1], s[2][0] - q[0], s[2][1] - q[1]);
                let n1 = cross2(s[2][0] - q[0], s[2][1] - q[1], s[0][0] - q[0], s[0][1] - q[1]);
                let n2 = cross2(s[0][0] - q[0], s[0][1] - q[1], s[1][0] - q[0], s[1][1] - q[1]);
                let (w0, w1, w2) = (n0 / d, n1 / d, n2 / d);
                for ch in 0..n_attrs {
                    os[ch * img_px + p] =
                        w0 * at[ch * hw + a] + w1 * at[ch * hw + b] + w2 * at[ch * hw + c];
                }
                os[n_attrs * img_px + p] = w0 * zs[a] + w1 * zs[b] + w2 * zs[c];
                let open = open_edges(ti, tj, tt, gh, gw, &alive);
                let cov = match silhouette_distance(&s, q, open) {
                    Some((dist, _)) => sigmoid(dist * ndc_scale / opts.sigma_ndc),
                    None => 1.0,
                };
                os[(n_attrs + 1) * img_px + p] = cov;
                mask[[pi, pj]] = 1.0;
                margin[[pi, pj]] = w0.min(w1).min(w2);
            }
        }
    }

    let saved = RasterSaved {
        winner,
        alive,
        grid_h: gh,
        grid_w: gw,
        out_size: n,
        n_attrs,
        focal,
        center,
        sigma_ndc: opts.sigma_ndc,
    };
    let info = RasterInfo {
        mask,
        interior_margin: margin,
    };
    (out, saved, info)
}

fn minmax3(a: f64, b: f64, c: f64) -> (f64, f64) {
    (a.min(b).min(c), a.max(b).max(c))
}

fn rot90(p: [f64; 2]) -> [f64; 2] {
    [p[1], -p[0]]
}

fn rot270(p: [f64; 2]) -> [f64; 2] {
    [-p[1], p[0]]
}

pub(crate) fn raster_backward(
    points: &ArrayD<f64>,
    attrs: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    saved: &RasterSaved,
    need_points: bool,
    need_attrs: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    if !(need_points || need_attrs) {
        return (None, None);
    }
    let (gh, gw, n, ka) = (saved.grid_h, saved.grid_w, saved.out_size, saved.n_attrs);
    let hw = gh * gw;
    let img_px = n * n;
    let px = points.as_slice().unwrap();
    let (xs, ys, zs) = (&px[..hw], &px[hw..2 * hw], &px[2 * hw..]);
    let at = attrs.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    let ndc_scale = 2.0 / n as f64;

    let mut dpoints = ArrayD::<f64>::zeros(IxDyn(&[3, gh, gw]));
    let mut dattrs = ArrayD::<f64>::zeros(IxDyn(&[ka, gh, gw]));
    {
        let dp = dpoints.as_slice_mut().unwrap();
        let da = dattrs.as_slice_mut().unwrap();

        for pi in 0..n {
            for pj in 0..n {
                let p = pi * n + pj;
                if saved.winner[p] < 0 {
                    continue;
                }
                let (ti, tj, tt, tri) = unpack_tri(saved.winner[p], gw);
                let vids = tri.v;
                // Re-project the three vertices.
                let mut s = [[0.0f64; 2]; 3];
                for (k, &v) in vids.iter().enumerate() {
                    s[k] = [
                        saved.focal * xs[v] / zs[v] + saved.center,
                        saved.focal * ys[v] / zs[v] + saved.center,
                    ];
                }
                let q = [pj as f64 + 0.5, pi as f64 + 0.5];
                let e01 = [s[1][0] - s[0][0], s[1][1] - s[0][1]];
                let e02 = [s[2][0] - s[0][0], s[2][1] - s[0][1]];
                let d = cross2(e01[0], e01[1], e02[0], e02[1]);
                let r = [
                    [s[0][0] - q[0], s[0][1] - q[1]],
                    [s[1][0] - q[0], s[1][1] - q[1]],
                    [s[2][0] - q[0], s[2][1] - q[1]],
                ];
                let nb = [
                    cross2(r[1][0], r[1][1], r[2][0], r[2][1]),
                    cross2(r[2][0], r[2][1], r[0][0], r[0][1]),
                    cross2(r[0][0], r[0][1], r[1][0], r[1][1]),
                ];
                let w = [nb[0] / d, nb[1] / d, nb[2] / d];
                let zv = [zs[vids[0]], zs[vids[1]], zs[vids[2]]];

                let gz = gys[ka * img_px + p];
                let gcov = gys[(ka + 1) * img_px + p];

                // Direct attribute and z paths, plus the per-vertex weight
                // sensitivity G_w[k] = d(out)/d(w_k).
                let mut g_w = [0.0f64; 3];
                for k in 0..3 {
                    g_w[k] = gz * zv[k];
                }
                for ch in 0..ka {
                    let g_attr = gys[ch * img_px + p];
                    if g_attr == 0.0 {
                        continue;
                    }
                    for k in 0..3 {
                        let v = vids[k];
                        if need_attrs {
                            da[ch * hw + v] += g_attr * w[k];
                        }
                        g_w[k] += g_attr * at[ch * hw + v];
                    }
                }
                if !need_points {
                    continue;
                }
                let mut dz = [gz * w[0], gz * w[1], gz * w[2]];
                let mut ds = [[0.0f64; 2]; 3];

                // Barycentric sensitivities to vertex screen positions:
                // dn_k/ds_m and dD/ds_m are 90-degree rotations of edges.
                let dn: [[[f64; 2]; 3]; 3] = [
                    // dn0/ds0, dn0/ds1, dn0/ds2
                    [[0.0; 2], rot90(r[2]), rot270(r[1])],
                    [rot270(r[2]), [0.0; 2], rot90(r[0])],
                    [rot90(r[1]), rot270(r[0]), [0.0; 2]],
                ];
                let dd1 = rot90(e02);
                let dd2 = rot270(e01);
                let dd = [[-dd1[0] - dd2[0], -dd1[1] - dd2[1]], dd1, dd2];
                for k in 0..3 {
                    if g_w[k] == 0.0 {
                        continue;
                    }
                    let coeff = g_w[k] / d;
                    for m in 0..3 {
                        ds[m][0] += coeff * (dn[k][m][0] - w[k] * dd[m][0]);
                        ds[m][1] += coeff * (dn[k][m][1] - w[k] * dd[m][1]);
                    }
                }

                // Coverage path through the nearest open (silhouette) edge.
                if gcov != 0.0 {
                    let open = open_edges(ti, tj, tt, gh, gw, &saved.alive);
                    if let Some((dist, e)) = silhouette_distance(&s, q, open) {
                        let cov = sigmoid(dist * ndc_scale / saved.sigma_ndc);
                        let dcov_ddist = cov * (1.0 - cov) * ndc_scale / saved.sigma_ndc;
                        let ia = e;
                        let ib = (e + 1) % 3;
                        let u = [s[ib][0] - s[ia][0], s[ib][1] - s[ia][1]];
                        let v = [q[0] - s[ia][0], q[1] - s[ia][1]];
                        let len = (u[0] * u[0] + u[1] * u[1]).sqrt().max(1e-30);
                        let cval = cross2(u[0], u[1], v[0], v[1]);
                        // perp = c/len; dc/da = (u.y - v.y, v.x - u.x),
                        // dc/db = (v.y, -v.x); dlen/da = -u/len, dlen/db = u/len.
                        let g = gcov * dcov_ddist;
                        let da_ = [
                            (u[1] - v[1]) / len + cval * u[0] / (len * len * len),
                            (v[0] - u[0]) / len + cval * u[1] / (len * len * len),
                        ];
                        let db_ = [
                            v[1] / len - cval * u[0] / (len * len * len),
                            -v[0] / len - cval * u[1] / (len * len * len),
                        ];
                        ds[ia][0] += g * da_[0];
                        ds[ia][1] += g * da_[1];
                        ds[ib][0] += g * db_[0];
                        ds[ib][1] += g * db_[1];
                    }
                }

                // Screen position -> camera-space point.
                for k in 0..3 {
                    let v = vids[k];
                    let z = zs[v];
                    let du = ds[k][0];
                    let dv = ds[k][1];
                    dp[v] += du * saved.focal / z;
                    dp[hw + v] += dv * saved.focal / z;
                    dz[k] -= (du * xs[v] + dv * ys[v]) * saved.focal / (z * z);
                    dp[2 * hw + v] += dz[k];
                }
            }
        }
    }
    (
        need_points.then_some(dpoints),
        need_attrs.then_some(dattrs),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    /// Point grid for a constant-depth plane under the default camera.
    fn flat_points(cam: &CameraIntrinsics, depth: f64) -> ArrayD<f64> {
        let rays = cam.ray_grid();
        (rays * depth).into_dyn()
    }

    #[test]
    fn identity_grid_covers_everything_and_keeps_depth() {
        let cam = CameraIntrinsics {
            image_size: 16,
            ..CameraIntrinsics::default()
        };
        let pts = flat_points(&cam, 1.0);
        let mut attrs = Array3::<f64>::zeros((1, 16, 16));
        attrs.fill(0.7);
        let (out, _saved, info) =
            raster_forward(&pts, &attrs.into_dyn(), &cam, &RasterOptions::default());
        assert_eq!(info.mask.sum(), 256.0, "flat grid must cover every pixel");
        for i in 0..16 {
            for j in 0..16 {
                assert_abs_diff_eq!(out[[0, i, j]], 0.7, epsilon = 1e-12);
                assert_abs_diff_eq!(out[[1, i, j]], 1.0, epsilon = 1e-12);
                let on_rim = i == 0 || i == 15 || j == 0 || j == 15;
                if on_rim {
                    // Border pixel centers sit exactly on the mesh
                    // silhouette: half coverage.
                    assert_abs_diff_eq!(out[[2, i, j]], 0.5, epsilon = 1e-12);
                } else {
                    // No open edge near interior pixels: coverage is
                    // exactly 1.0 in f64, so identity renders reproduce
                    // the shaded image bit-for-bit inside the rim.
                    assert_eq!(out[[2, i, j]], 1.0);
                }
            }
        }
    }

    #[test]
    fn attributes_interpolate_linearly() {
        let cam = CameraIntrinsics {
            image_size: 8,
            ..CameraIntrinsics::default()
        };
        let pts = flat_points(&cam, 1.0);
        // Attribute = column index; affine interpolation must reproduce it.
        let mut attrs = Array3::<f64>::zeros((1, 8, 8));
        for i in 0..8 {
            for j in 0..8 {
                attrs[[0, i, j]] = j as f64;
            }
        }
        let (out, _, info) =
            raster_forward(&pts, &attrs.into_dyn(), &cam, &RasterOptions::default());
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(info.mask[[i, j]], 1.0);
                assert_abs_diff_eq!(out[[0, i, j]], j as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn points_behind_camera_are_culled() {
        let cam = CameraIntrinsics {
            image_size: 8,
            ..CameraIntrinsics::default()
        };
        let pts = flat_points(&cam, -1.0);
        let attrs = Array3::<f64>::zeros((1, 8, 8)).into_dyn();
        let (_, _, info) = raster_forward(&pts, &attrs, &cam, &RasterOptions::default());
        assert_eq!(info.mask.sum(), 0.0);
    }

    #[test]
    fn nearer_surface_wins() {
        let cam = CameraIntrinsics {
            image_size: 8,
            ..CameraIntrinsics::default()
        };
        // Fold the grid: left half at depth 1.05, right half at 0.95,
        // shifted sideways so both halves project onto the same pixels.
        let rays = cam.ray_grid();
        let mut pts = (rays * 1.05).into_dyn();
        for i in 0..8 {
            for j in 4..8 {
                let jj = j - 4; // overlap the left half
                pts[[0, i, j]] = (jj as f64 + 0.5 - 4.0) / cam.focal() * 0.95;
                pts[[1, i, j]] = (i as f64 + 0.5 - 4.0) / cam.focal() * 0.95;
                pts[[2, i, j]] = 0.95;
            }
        }
        let attrs = Array3::<f64>::zeros((1, 8, 8)).into_dyn();
        let (out, _, info) = raster_forward(&pts, &attrs, &cam, &RasterOptions::default());
        // Pixels covered by both halves must report the nearer depth.
        for i in 1..7 {
            for j in 0..4 {
                if info.mask[[i, j]] == 1.0 {
                    assert!(
                        out[[1, i, j]] < 1.0,
                        "expected near surface at ({i},{j}), got {}",
                        out[[1, i, j]]
                    );
                }
            }
        }
    }
}
