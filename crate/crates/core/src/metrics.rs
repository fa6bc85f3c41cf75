//! Depth evaluation: the scale-invariant depth error, the mean angle
//! deviation of surface normals, the reference baselines those numbers are
//! judged against, and a batch evaluator that scores a model on held-out
//! views with ground-truth depth.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::camera::CameraIntrinsics;
use crate::data::{gt_dir_for, write_text_atomic, InstanceRecord};
use crate::nets::Decomposer;
use crate::pngio;
use crate::render::{erode_mask, normals_from_depth, warp};
use crate::types::{CanonicalModel, DepthMap};
use crate::{Error, Result};

fn check_shapes(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() || pred.dim() != mask.dim() {
        return Err(Error::InvalidArgument(format!(
            "prediction {:?}, ground truth {:?}, and mask {:?} must agree in shape",
            pred.dim(),
            gt.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Scale-invariant depth error: the population standard deviation of the
/// masked log-depth differences. Multiplying either map by a constant
/// leaves it unchanged.
pub fn side(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let (p, g) = (pred[[i, j]], gt[[i, j]]);
        if !(p.is_finite() && p > 0.0 && g.is_finite() && g > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "depth must be positive and finite on the mask; ({i}, {j}) has {p} vs {g}"
            )));
        }
        let d = p.ln() - g.ln();
        n += 1;
        sum += d;
        sum_sq += d * d;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty evaluation mask".into()));
    }
    let mean = sum / n as f64;
    let mean_sq = sum_sq / n as f64;
    Ok((mean_sq - mean * mean).max(0.0).sqrt())
}

/// Mean angular deviation, in degrees, between two unit-normal maps over
/// the mask.
pub fn mad_from_normals(
    pred: &Array3<f64>,
    gt: &Array3<f64>,
    mask: &Array2<bool>,
) -> Result<f64> {
    let (h, w) = mask.dim();
    if pred.dim() != (3, h, w) || gt.dim() != (3, h, w) {
        return Err(Error::InvalidArgument(format!(
            "normal maps must be (3, {h}, {w}), got {:?} and {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut n = 0usize;
    let mut sum = 0.0;
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let mut dot = 0.0;
        for c in 0..3 {
            let (a, b) = (pred[[c, i, j]], gt[[c, i, j]]);
            if !(a.is_finite() && b.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite normal at ({i}, {j})"
                )));
            }
            dot += a * b;
        }
        n += 1;
        sum += dot.clamp(-1.0, 1.0).acos().to_degrees();
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty evaluation mask".into()));
    }
    Ok(sum / n as f64)
}

/// Mean angular deviation of the normals implied by two depth maps.
pub fn mad(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &Array2<bool>,
    cam: &CameraIntrinsics,
) -> Result<f64> {
    let np = normals_from_depth(pred, cam)?;
    let ng = normals_from_depth(gt, cam)?;
    mad_from_normals(&np.data, &ng.data, mask)
}

/// The no-information reference: a flat plane at the middle of the depth
/// range.
pub fn null_baseline(cam: &CameraIntrinsics) -> DepthMap {
    let n = cam.image_size;
    DepthMap::new(Array2::from_elem((n, n), cam.depth_mid()))
        .expect("the mid plane is a valid depth map")
}

/// The data-informed reference: the pixelwise mean of a set of ground-truth
/// depth maps.
pub fn mean_baseline(gts: &[Array2<f64>]) -> Result<DepthMap> {
    let first = gts
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean baseline needs at least one map".into()))?;
    let mut acc = Array2::<f64>::zeros(first.dim());
    for gt in gts {
        if gt.dim() != first.dim() {
            return Err(Error::InvalidArgument(format!(
                "ground-truth maps differ in shape: {:?} vs {:?}",
                gt.dim(),
                first.dim()
            )));
        }
        acc += gt;
    }
    acc /= gts.len() as f64;
    DepthMap::new(acc)
}

/// One held-out view with its ground truth.
pub struct EvalCase {
    pub image_id: String,
    pub image: Array3<f64>,
    pub gt_depth: Array2<f64>,
    pub gt_mask: Array2<bool>,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub image_id: String,
    pub side: f64,
    pub mad: f64,
    pub n_pixels: usize,
}

pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_side: f64,
    pub mean_mad: f64,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("nothing to evaluate".into()));
        }
        let n = rows.len() as f64;
        let mean_side = rows.iter().map(|r| r.side).sum::<f64>() / n;
        let mean_mad = rows.iter().map(|r| r.mad).sum::<f64>() / n;
        Ok(EvalReport { rows, mean_side, mean_mad })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,side,mad,n_pixels\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.image_id, r.side, r.mad, r.n_pixels));
        }
        let total: usize = self.rows.iter().map(|r| r.n_pixels).sum();
        out.push_str(&format!("mean,{},{},{}\n", self.mean_side, self.mean_mad, total));
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_text_atomic(path, &self.to_csv())
    }
}

/// Score one predicted view-space depth against ground truth. The
/// evaluation mask is the predicted coverage intersected with the
/// ground-truth mask eroded by one pixel, keeping boundary normals out of
/// the comparison.
pub fn score_depth_pair(
    image_id: &str,
    pred: &DepthMap,
    pred_mask: &Array2<bool>,
    gt_depth: &Array2<f64>,
    gt_mask: &Array2<bool>,
    cam: &CameraIntrinsics,
) -> Result<EvalRow> {
    check_shapes(&pred.data, gt_depth, pred_mask)?;
    let eroded = erode_mask(gt_mask);
    let mask = Array2::from_shape_fn(pred_mask.dim(), |ix| pred_mask[ix] && eroded[ix]);
    let n_pixels = mask.iter().filter(|&&m| m).count();
    if n_pixels == 0 {
        return Err(Error::InvalidArgument(format!(
            "{image_id}: prediction and ground truth do not overlap"
        )));
    }
    let gt = DepthMap::new(gt_depth.clone())?;
    Ok(EvalRow {
        image_id: image_id.to_string(),
        side: side(&pred.data, gt_depth, &mask)?,
        mad: mad(pred, &gt, &mask, cam)?,
        n_pixels,
    })
}

/// Decompose each held-out image, carry the predicted canonical depth into
/// the predicted view, and score it against the ground-truth view depth.
pub fn evaluate_dataset(
    decomposer: &Decomposer,
    cases: &[EvalCase],
    cam: &CameraIntrinsics,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let dec = decomposer.decompose(&case.image, cam)?;
        let model = CanonicalModel { depth: dec.depth, albedo: dec.albedo };
        let (view_depth, _, pred_mask) = warp(&model, &dec.pose, cam)?;
        rows.push(score_depth_pair(
            &case.image_id,
            &view_depth,
            &pred_mask,
            &case.gt_depth,
            &case.gt_mask,
            cam,
        )?);
    }
    EvalReport::from_rows(rows)
}

/// Score one fixed depth map — a baseline — against every case.
pub fn evaluate_fixed_depth(
    pred: &DepthMap,
    cases: &[EvalCase],
    cam: &CameraIntrinsics,
) -> Result<EvalReport> {
    let full = Array2::from_elem(pred.data.dim(), true);
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        rows.push(score_depth_pair(
            &case.image_id,
            pred,
            &full,
            &case.gt_depth,
            &case.gt_mask,
            cam,
        )?);
    }
    EvalReport::from_rows(rows)
}

/// Pair every view of the given records with the ground truth written by
/// the synthetic generator.
pub fn eval_cases_from_synthetic(
    root: &Path,
    records: &[InstanceRecord],
) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::new();
    for rec in records {
        let gt = gt_dir_for(root, rec);
        for (v, img_path) in rec.image_paths.iter().enumerate() {
            cases.push(EvalCase {
                image_id: format!("{}/{v:03}", rec.instance_id),
                image: pngio::load_image(img_path)?,
                gt_depth: pngio::load_depth(&gt.join(format!("depth_{v:03}.png")))?,
                gt_mask: pngio::load_mask(&gt.join(format!("mask_{v:03}.png")))?,
            });
        }
    }
    Ok(cases)
}
