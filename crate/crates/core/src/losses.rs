//! Training objectives: confidence-weighted photometric and feature-space
//! reconstruction, the pivot-pair cross-view consistency term built by
//! component swapping, and the intensity/depth-weighted albedo smoothness
//! regularizer — everything expressed on the tape so one backward pass
//! reaches all network parameters.

use std::f64::consts::SQRT_2;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::perceptual::PerceptualExtractor;
use crate::render::{render_on_tape, warp_on_tape, LightVars};
use crate::tape::{Graph, RasterOptions, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pe: f64,
    pub lambda_cross: f64,
    pub lambda_al: f64,
    pub sigma_c: f64,
    pub sigma_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pe: 1.0,
            lambda_cross: 0.5,
            lambda_al: 0.5,
            sigma_c: 0.05,
            sigma_d: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda_pe, self.lambda_cross, self.lambda_al];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.sigma_c > 0.0) || !(self.sigma_d > 0.0) {
            return Err(Error::InvalidConfig("sigma_c and sigma_d must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step scalar summary; `total` recombines the parts exactly as the
/// tape computed them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub rec_cross: f64,
    pub al: f64,
    pub al_cross: f64,
    pub total: f64,
}

/// Same-view or cross-view confidence maps on the tape: full-resolution
/// (1, H, W) for the photometric term, quarter-resolution (1, H/4, W/4) for
/// the feature term.
#[derive(Clone, Copy)]
pub struct ConfPairVars {
    pub c_l1: Var,
    pub c_pe: Var,
}

/// One view's decomposition, all live on the tape.
pub struct ViewDecomp {
    pub depth: Var,
    pub albedo: Var,
    pub light: LightVars,
    pub pose: Var,
    pub conf: ConfPairVars,
}

/// Cross confidence for one swapped render: the reconstruction
/// R(d_source, a_source, light_target, pose_target) is compared against
/// image `target` under these maps.
pub struct CrossConf {
    pub target: usize,
    pub source: usize,
    pub conf: ConfPairVars,
}

/// Everything the instance-level objectives need. `cross_conf` must hold
/// one entry per ordered pivot pair, in pivot order: for each non-pivot
/// view s, (target=s, source=0) then (target=0, source=s); empty when M < 2.
pub struct InstanceTerms<'a> {
    pub images: &'a [Array3<f64>],
    pub views: &'a [ViewDecomp],
    pub cross_conf: &'a [CrossConf],
    pub extractor: &'a PerceptualExtractor,
    pub cam: &'a CameraIntrinsics,
    pub raster: &'a RasterOptions,
    pub weights: &'a LossWeights,
}

pub struct CrossViewLoss {
    pub value: Var,
    pub pair_count: usize,
    /// False when M < 2 and the term is identically zero.
    pub active: bool,
}

pub struct LossBreakdownVars {
    pub rec: Var,
    pub rec_cross: Var,
    pub al: Var,
    pub al_cross: Var,
    pub total: Var,
    pub cross_pairs: usize,
}

impl LossBreakdownVars {
    pub fn extract(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            rec: g.scalar_value(self.rec),
            rec_cross: g.scalar_value(self.rec_cross),
            al: g.scalar_value(self.al),
            al_cross: g.scalar_value(self.al_cross),
            total: g.scalar_value(self.total),
        }
    }
}

/// Intensity closeness factor for a neighbor: exp(-dist^2 / (2 sigma_c^2)),
/// with `dist_sq` the squared color distance.
pub fn intensity_weight(dist_sq: f64, sigma_c: f64) -> f64 {
    (-dist_sq / (2.0 * sigma_c * sigma_c)).exp()
}

/// Depth closeness factor for a neighbor: exp(-diff^2 / (2 sigma_d^2)).
pub fn depth_weight(diff: f64, sigma_d: f64) -> f64 {
    (-diff * diff / (2.0 * sigma_d * sigma_d)).exp()
}

/// Per-pixel confidence-scaled color distance, averaged over the frame:
/// mean_p [ sqrt(2) |I - I'|_1 / c + ln c ], the L1 norm summing over the
/// color channels. Image and reconstruction are (3, H, W); c is (1, H, W).
pub fn l1_conf_on_tape(g: &mut Graph, image: Var, recon: Var, c: Var) -> Var {
    assert_eq!(g.shape(image), g.shape(recon), "image/reconstruction shape mismatch");
    assert_eq!(g.shape(image)[1..], g.shape(c)[1..], "confidence spatial mismatch");
    let diff = g.sub(image, recon);
    let mag = g.abs(diff);
    let l1 = g.sum_channels(mag);
    let l1 = g.scale(l1, SQRT_2);
    let weighted = g.div(l1, c);
    let lc = g.ln(c);
    let term = g.add(weighted, lc);
    g.mean_all(term)
}

/// Feature-space analog on the stride-4 grid: mean_p [ ||f - f'||^2 /
/// (2 c^2) + ln c ].
pub fn perceptual_conf_on_tape(g: &mut Graph, feat: Var, feat_recon: Var, c: Var) -> Var {
    assert_eq!(g.shape(feat), g.shape(feat_recon), "feature shape mismatch");
    assert_eq!(g.shape(feat)[1..], g.shape(c)[1..], "feature confidence spatial mismatch");
    let diff = g.sub(feat, feat_recon);
    let sq = g.square(diff);
    let ss = g.sum_channels(sq);
    let c2 = g.square(c);
    let c2 = g.scale(c2, 2.0);
    let weighted = g.div(ss, c2);
    let lc = g.ln(c);
    let term = g.add(weighted, lc);
    g.mean_all(term)
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Albedo smoothness over the masked pixels: for each pixel, aggregate the
/// weighted albedo differences to its in-mask 8-neighbors, then take the
/// squared channel norm of that aggregate, averaged over the mask. The
/// intensity weights come from the (fixed) input image; the depth weights
/// differentiate through the warped depth.
pub fn albedo_smoothness_on_tape(
    g: &mut Graph,
    image: &Array3<f64>,
    albedo: Var,
    depth: Var,
    mask: &Array2<bool>,
    weights: &LossWeights,
) -> Var {
    let (h, w) = mask.dim();
    assert_eq!(image.dim(), (3, h, w), "image/mask shape mismatch");
    assert_eq!(g.shape(albedo), &[3, h, w], "albedo shape mismatch");
    assert_eq!(g.shape(depth), &[1, h, w], "depth shape mismatch");
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return g.constant_scalar(0.0);
    }

    let inv_2sd2 = 1.0 / (2.0 * weights.sigma_d * weights.sigma_d);
    let mut inner: Option<Var> = None;
    for &(dy, dx) in NEIGHBORS.iter() {
        // Constant per-pixel gate: intensity weight where the neighbor is in
        // bounds and masked, zero otherwise.
        let mut wc = Array3::<f64>::zeros((1, h, w));
        for i in 0..h {
            for j in 0..w {
                if !mask[[i, j]] {
                    continue;
                }
                let (ni, nj) = (i as isize + dy, j as isize + dx);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if !mask[[ni, nj]] {
                    continue;
                }
                let dist_sq: f64 = (0..3)
                    .map(|c| {
                        let d = image[[c, i, j]] - image[[c, ni, nj]];
                        d * d
                    })
                    .sum();
                wc[[0, i, j]] = intensity_weight(dist_sq, weights.sigma_c);
            }
        }
        let wc = g.constant(wc.into_dyn());

        let shifted_d = g.shift2d(depth, -dy, -dx);
        let dd = g.sub(depth, shifted_d);
        let dd2 = g.square(dd);
        let e = g.scale(dd2, -inv_2sd2);
        let wd = g.exp(e);
        let w_all = g.mul(wd, wc);

        let shifted_a = g.shift2d(albedo, -dy, -dx);
        let da = g.sub(albedo, shifted_a);
        let term = g.mul_chan(da, w_all);
        inner = Some(match inner {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }

    let inner = inner.unwrap();
    let sq = g.square(inner);
    let norm_sq = g.sum_channels(sq);
    let mask_c = g.constant(
        Array2::from_shape_fn((h, w), |(i, j)| if mask[[i, j]] { 1.0 } else { 0.0 })
            .into_shape_with_order((1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let masked = g.mul(norm_sq, mask_c);
    let s = g.sum_all(masked);
    g.scale(s, 1.0 / count as f64)
}

/// Shared per-instance tape state: input images as constants plus their
/// (frozen) feature grids, built once per total-loss evaluation.
struct SharedInputs {
    img_vars: Vec<Var>,
    img_feats: Vec<Var>,
}

impl SharedInputs {
    fn build(g: &mut Graph, terms: &InstanceTerms) -> SharedInputs {
        let img_vars: Vec<Var> = terms
            .images
            .iter()
            .map(|img| g.constant(img.clone().into_dyn()))
            .collect();
        let img_feats = img_vars
            .iter()
            .map(|&v| terms.extractor.features_on_tape(g, v))
            .collect();
        SharedInputs { img_vars, img_feats }
    }
}

/// One reconstruction term: render view `source`'s canonical maps under
/// view `target`'s lighting and pose, compare against image `target`.
fn recon_term(
    g: &mut Graph,
    terms: &InstanceTerms,
    shared: &SharedInputs,
    target: usize,
    source: usize,
    conf: &ConfPairVars,
) -> Var {
    let vt = &terms.views[target];
    let vs = &terms.views[source];
    let r = render_on_tape(g, vs.depth, vs.albedo, &vt.light, vt.pose, terms.cam, terms.raster);
    let l1 = l1_conf_on_tape(g, shared.img_vars[target], r.image, conf.c_l1);
    let f_recon = terms.extractor.features_on_tape(g, r.image);
    let pe = perceptual_conf_on_tape(g, shared.img_feats[target], f_recon, conf.c_pe);
    let pe = g.scale(pe, terms.weights.lambda_pe);
    g.add(l1, pe)
}

fn check_instance(terms: &InstanceTerms) -> Result<()> {
    let m = terms.views.len();
    if m == 0 {
        return Err(Error::InvalidArgument("instance has no views".into()));
    }
    if terms.images.len() != m {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} views",
            terms.images.len(),
            m
        )));
    }
    let expected: Vec<(usize, usize)> = if m < 2 {
        Vec::new()
    } else {
        (1..m).flat_map(|s| [(s, 0), (0, s)]).collect()
    };
    let got: Vec<(usize, usize)> =
        terms.cross_conf.iter().map(|cc| (cc.target, cc.source)).collect();
    if got != expected {
        return Err(Error::InvalidArgument(format!(
            "cross confidence pairs {got:?} do not match pivot order {expected:?}"
        )));
    }
    Ok(())
}

fn reconstruction_core(g: &mut Graph, terms: &InstanceTerms, shared: &SharedInputs) -> Var {
    let mut acc: Option<Var> = None;
    for i in 0..terms.views.len() {
        let t = recon_term(g, terms, shared, i, i, &terms.views[i].conf.clone());
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t),
        });
    }
    acc.unwrap()
}

fn cross_view_core(g: &mut Graph, terms: &InstanceTerms, shared: &SharedInputs) -> CrossViewLoss {
    let m = terms.views.len();
    if m < 2 {
        return CrossViewLoss { value: g.constant_scalar(0.0), pair_count: 0, active: false };
    }
    let mut acc: Option<Var> = None;
    for cc in terms.cross_conf {
        let t = recon_term(g, terms, shared, cc.target, cc.source, &cc.conf);
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t),
        });
    }
    CrossViewLoss { value: acc.unwrap(), pair_count: terms.cross_conf.len(), active: true }
}

fn albedo_core(g: &mut Graph, terms: &InstanceTerms) -> (Var, Var) {
    let m = terms.views.len();
    let smooth = |g: &mut Graph, image_idx: usize, model_idx: usize, pose_idx: usize| {
        let vm = &terms.views[model_idx];
        let vp = &terms.views[pose_idx];
        let w = warp_on_tape(g, vm.depth, vm.albedo, vp.pose, terms.cam, terms.raster);
        albedo_smoothness_on_tape(
            g,
            &terms.images[image_idx],
            w.view_albedo,
            w.view_depth,
            &w.mask,
            terms.weights,
        )
    };

    let mut al: Option<Var> = None;
    for i in 0..m {
        let t = smooth(g, i, i, i);
        al = Some(match al {
            None => t,
            Some(a) => g.add(a, t),
        });
    }
    let al = al.unwrap();

    if m < 2 {
        let zero = g.constant_scalar(0.0);
        return (al, zero);
    }
    let mut alc: Option<Var> = None;
    for s in 1..m {
        // Non-pivot maps warped into the pivot's view, and vice versa.
        let t1 = smooth(g, 0, s, 0);
        let t2 = smooth(g, s, 0, s);
        let t = g.add(t1, t2);
        alc = Some(match alc {
            None => t,
            Some(a) => g.add(a, t),
        });
    }
    (al, alc.unwrap())
}

pub fn reconstruction_loss_on_tape(g: &mut Graph, terms: &InstanceTerms) -> Result<Var> {
    check_instance(terms)?;
    let shared = SharedInputs::build(g, terms);
    Ok(reconstruction_core(g, terms, &shared))
}

pub fn cross_view_loss_on_tape(g: &mut Graph, terms: &InstanceTerms) -> Result<CrossViewLoss> {
    check_instance(terms)?;
    let shared = SharedInputs::build(g, terms);
    Ok(cross_view_core(g, terms, &shared))
}

pub fn albedo_losses_on_tape(g: &mut Graph, terms: &InstanceTerms) -> Result<(Var, Var)> {
    check_instance(terms)?;
    Ok(albedo_core(g, terms))
}

/// The full objective: rec + lambda_cross * rec_cross + lambda_al * (al +
/// lambda_cross * al_cross), assembled in exactly that association so the
/// logged breakdown recombines bit for bit.
pub fn total_loss_on_tape(g: &mut Graph, terms: &InstanceTerms) -> Result<LossBreakdownVars> {
    check_instance(terms)?;
    terms.weights.validate()?;
    let shared = SharedInputs::build(g, terms);
    let rec = reconstruction_core(g, terms, &shared);
    let cross = cross_view_core(g, terms, &shared);
    let (al, al_cross) = albedo_core(g, terms);

    let w = terms.weights;
    let rc = g.scale(cross.value, w.lambda_cross);
    let t = g.add(rec, rc);
    let alc = g.scale(al_cross, w.lambda_cross);
    let u = g.add(al, alc);
    let u = g.scale(u, w.lambda_al);
    let total = g.add(t, u);
    Ok(LossBreakdownVars {
        rec,
        rec_cross: cross.value,
        al,
        al_cross,
        total,
        cross_pairs: cross.pair_count,
    })
}

fn to_chw1(a: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = a.dim();
    a.clone().into_shape_with_order((1, h, w)).unwrap().into_dyn()
}

fn check_positive(c: &Array2<f64>) -> Result<()> {
    if c.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("confidence must be strictly positive".into()));
    }
    Ok(())
}

/// Plain-array entry point for the photometric term.
pub fn l1_conf_loss(image: &Array3<f64>, recon: &Array3<f64>, c: &Array2<f64>) -> Result<f64> {
    if image.dim() != recon.dim() {
        return Err(Error::InvalidArgument(format!(
            "image {:?} vs reconstruction {:?}",
            image.dim(),
            recon.dim()
        )));
    }
    if (image.dim().1, image.dim().2) != c.dim() {
        return Err(Error::InvalidArgument("confidence size mismatch".into()));
    }
    check_positive(c)?;
    let mut g = Graph::new();
    let i = g.constant(image.clone().into_dyn());
    let r = g.constant(recon.clone().into_dyn());
    let cv = g.constant(to_chw1(c));
    let v = l1_conf_on_tape(&mut g, i, r, cv);
    Ok(g.scalar_value(v))
}

/// Plain-array entry point for the feature-space term.
pub fn perceptual_conf_loss(
    feat: &Array3<f64>,
    feat_recon: &Array3<f64>,
    c: &Array2<f64>,
) -> Result<f64> {
    if feat.dim() != feat_recon.dim() {
        return Err(Error::InvalidArgument(format!(
            "features {:?} vs {:?}",
            feat.dim(),
            feat_recon.dim()
        )));
    }
    if (feat.dim().1, feat.dim().2) != c.dim() {
        return Err(Error::InvalidArgument("confidence size mismatch".into()));
    }
    check_positive(c)?;
    let mut g = Graph::new();
    let f = g.constant(feat.clone().into_dyn());
    let fr = g.constant(feat_recon.clone().into_dyn());
    let cv = g.constant(to_chw1(c));
    let v = perceptual_conf_on_tape(&mut g, f, fr, cv);
    Ok(g.scalar_value(v))
}

/// Plain-array entry point for the albedo smoothness term.
pub fn albedo_smoothness(
    image: &Array3<f64>,
    albedo_view: &Array3<f64>,
    depth_view: &Array2<f64>,
    mask: &Array2<bool>,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let (h, w) = mask.dim();
    if image.dim() != (3, h, w) || albedo_view.dim() != (3, h, w) || depth_view.dim() != (h, w) {
        return Err(Error::InvalidArgument("albedo smoothness inputs misaligned".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(albedo_view.clone().into_dyn());
    let d = g.constant(to_chw1(depth_view));
    let v = albedo_smoothness_on_tape(&mut g, image, a, d, mask, weights);
    Ok(g.scalar_value(v))
}
