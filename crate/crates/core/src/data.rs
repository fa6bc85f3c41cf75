//! Dataset plumbing: instance discovery on disk, deterministic epoch
//! sampling, the mirror expansion used by flip training, and a synthetic
//! multi-view generator that also writes ground-truth depth for evaluation.
//!
//! On-disk layout. Multi-view sets keep one directory per instance with its
//! view images directly inside and ground truth under `gt/`; flip sets are
//! flat, one image per instance beside a shared `gt/` tree:
//!
//! ```text
//! root/instance/image_000.png      root/instance.png
//! root/instance/gt/...             root/gt/instance/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::pngio;
use crate::render::render;
use crate::types::{AlbedoMap, CanonicalModel, DepthMap, Lighting, Pose};
use crate::{Error, Result};

/// Subdirectory name that holds ground truth; never scanned for inputs.
pub const GT_DIR: &str = "gt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One image per instance; the second view is its exact mirror.
    FlipPair,
    /// Every image of the instance enters each epoch.
    FixedSet,
    /// A fresh subset of the instance's images is drawn each epoch.
    SampledCollection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    /// Lexicographically ordered, rooted at the dataset directory.
    pub image_paths: Vec<PathBuf>,
    pub regime: Regime,
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scan a dataset root into instance records, verifying every image
/// decodes. A root holding loose images and no instance directories is
/// flat — one single-image record per file, as flip and refinement sets
/// are laid out; otherwise each subdirectory is an instance whose images
/// sit directly inside it.
pub fn load_manifest(root: &Path, regime: Regime) -> Result<Vec<InstanceRecord>> {
    let entries = sorted_entries(root)?;
    let files: Vec<&PathBuf> = entries.iter().filter(|p| p.is_file() && is_png(p)).collect();
    let dirs: Vec<&PathBuf> = entries
        .iter()
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()) != Some(GT_DIR))
        .collect();

    let mut records = Vec::new();
    if dirs.is_empty() && !files.is_empty() {
        for &path in &files {
            pngio::load_image(path)?;
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("unusable file name {}", path.display())))?
                .to_string();
            records.push(InstanceRecord {
                instance_id: id,
                image_paths: vec![path.clone()],
                regime,
            });
        }
        return Ok(records);
    }

    for &dir in &dirs {
        let images: Vec<PathBuf> =
            sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_png(p)).collect();
        if images.is_empty() {
            return Err(Error::Dataset(format!("instance {} has no images", dir.display())));
        }
        for img in &images {
            pngio::load_image(img)?;
        }
        let id = dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("unusable directory name {}", dir.display())))?
            .to_string();
        records.push(InstanceRecord { instance_id: id, image_paths: images, regime });
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no instances under {}", root.display())));
    }
    Ok(records)
}

/// Mirror an image (or any channelwise map) left-right.
pub fn mirror_image(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| image[[ch, i, w - 1 - j]])
}

/// Mirror a single-channel map left-right.
pub fn mirror_plane(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(i, j)| plane[[i, w - 1 - j]])
}

/// The two-view expansion used by flip training: the image and its exact
/// mirror.
pub fn flip_pair_expand(image: &Array3<f64>) -> [Array3<f64>; 2] {
    [image.clone(), mirror_image(image)]
}

/// Pick each instance's views for one epoch. Fixed sets and flip pairs pass
/// through; sampled collections draw `m` views, without replacement when
/// the instance is large enough and with replacement otherwise.
pub fn sample_epoch(
    records: &[InstanceRecord],
    m: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<PathBuf>>> {
    if m == 0 {
        return Err(Error::InvalidArgument("cannot sample zero views per instance".into()));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let picks = match rec.regime {
            Regime::FlipPair | Regime::FixedSet => rec.image_paths.clone(),
            Regime::SampledCollection => {
                let n = rec.image_paths.len();
                if n >= m {
                    // Partial Fisher-Yates: the first m slots of a shuffle.
                    let mut idx: Vec<usize> = (0..n).collect();
                    for k in 0..m {
                        let pick = rng.gen_range(k..n);
                        idx.swap(k, pick);
                    }
                    idx[..m].iter().map(|&i| rec.image_paths[i].clone()).collect()
                } else {
                    (0..m)
                        .map(|_| rec.image_paths[rng.gen_range(0..n)].clone())
                        .collect()
                }
            }
        };
        out.push(picks);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of instances.
    pub count: usize,
    /// Views per instance (ignored in flip mode, which renders one).
    pub views: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Generate mirror-symmetric objects laid out for flip training.
    pub flip_pairs: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 8, views: 3, image_size: 64, seed: 0, flip_pairs: false }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("count must be positive".into()));
        }
        if self.views == 0 {
            return Err(Error::InvalidConfig("views must be positive".into()));
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::InvalidConfig(
                "image_size must be a power of two of at least 16".into(),
            ));
        }
        Ok(())
    }
}

/// Per-view generation parameters, stored next to the ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GtView {
    pub lighting: Lighting,
    pub pose: Pose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GtParams {
    pub views: Vec<GtView>,
}

pub(crate) fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn symmetrize3(a: &mut Array3<f64>) {
    let (c, h, w) = a.dim();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w.div_ceil(2) {
                let m = (a[[ch, i, j]] + a[[ch, i, w - 1 - j]]) / 2.0;
                a[[ch, i, j]] = m;
                a[[ch, i, w - 1 - j]] = m;
            }
        }
    }
}

fn symmetrize2(a: &mut Array2<f64>) {
    let (h, w) = a.dim();
    for i in 0..h {
        for j in 0..w.div_ceil(2) {
            let m = (a[[i, j]] + a[[i, w - 1 - j]]) / 2.0;
            a[[i, j]] = m;
            a[[i, w - 1 - j]] = m;
        }
    }
}

fn synth_canonical(rng: &mut ChaCha8Rng, cam: &CameraIntrinsics, flip: bool) -> CanonicalModel {
    let n = cam.image_size;
    let mid = cam.depth_mid();
    let half = cam.depth_half();

    let mut depth = Array2::from_elem((n, n), mid);
    let bumps = rng.gen_range(2..=4);
    for _ in 0..bumps {
        let cx = rng.gen_range(0.2..0.8) * n as f64;
        let cy = rng.gen_range(0.2..0.8) * n as f64;
        let s = rng.gen_range(0.10..0.25) * n as f64;
        let amp = rng.gen_range(-0.5..0.5) * half;
        for ((i, j), v) in depth.indexed_iter_mut() {
            let dx = j as f64 - cx;
            let dy = i as f64 - cy;
            *v += amp * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
        }
    }
    let (lo, hi) = (mid - 0.8 * half, mid + 0.8 * half);
    depth.mapv_inplace(|v| v.clamp(lo, hi));

    // Albedo stays soft everywhere: hard texture edges reward shaving the
    // photometric loss with sub-pixel geometry dithering, which wrecks the
    // recovered normals at this resolution. Smooth texture keeps shading
    // the dominant geometry cue, matching the regime the method targets.
    let mut albedo = Array3::zeros((3, n, n));
    let color = |rng: &mut ChaCha8Rng| [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    match rng.gen_range(0..3) {
        0 => {
            // Soft color blobs over a base tone.
            let base = color(rng);
            for ((c, _, _), v) in albedo.indexed_iter_mut() {
                *v = base[c];
            }
            for _ in 0..rng.gen_range(3..=6) {
                let tint = color(rng);
                let cx = rng.gen_range(0.1..0.9) * n as f64;
                let cy = rng.gen_range(0.1..0.9) * n as f64;
                let s = rng.gen_range(0.08..0.25) * n as f64;
                for ((c, i, j), v) in albedo.indexed_iter_mut() {
                    let dx = j as f64 - cx;
                    let dy = i as f64 - cy;
                    let w = (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                    *v += w * (tint[c] - *v);
                }
            }
        }
        1 => {
            // Low-frequency sinusoidal stripes at half contrast.
            let (a, b) = (color(rng), color(rng));
            let freq = rng.gen_range(1.5..3.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for ((c, i, j), v) in albedo.indexed_iter_mut() {
                let t = (j as f64 * theta.cos() + i as f64 * theta.sin()) / n as f64;
                let w = 0.5 * (1.0 + (std::f64::consts::TAU * freq * t + phase).sin());
                *v = a[c] + 0.5 * w * (b[c] - a[c]);
            }
        }
        _ => {
            // Bilinear blend of four corner colors.
            let corners = [color(rng), color(rng), color(rng), color(rng)];
            for ((c, i, j), v) in albedo.indexed_iter_mut() {
                let u = j as f64 / (n - 1) as f64;
                let t = i as f64 / (n - 1) as f64;
                *v = (1.0 - t) * ((1.0 - u) * corners[0][c] + u * corners[1][c])
                    + t * ((1.0 - u) * corners[2][c] + u * corners[3][c]);
            }
        }
    }
    albedo.mapv_inplace(|v| v.clamp(0.05, 0.95));

    if flip {
        symmetrize2(&mut depth);
        symmetrize3(&mut albedo);
    }
    CanonicalModel {
        depth: DepthMap::new(depth).expect("synthetic depth is in range"),
        albedo: AlbedoMap::new(albedo).expect("synthetic albedo is in range"),
    }
}

fn synth_view(rng: &mut ChaCha8Rng, flip: bool) -> GtView {
    let max_angle = std::f64::consts::PI / 6.0;
    // Oblique light keeps shading informative about slope: with a frontal
    // source n·l is a flat cosine near its peak and carries almost no
    // gradient signal.
    let light_x = rng.gen_range(0.2f64..0.6) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let light_x = if flip { light_x.signum() * light_x.abs().clamp(0.15, 0.5) } else { light_x };
    GtView {
        lighting: Lighting {
            ambient: rng.gen_range(0.2..0.45),
            diffuse: rng.gen_range(0.45..0.75),
            light_x,
            light_y: rng.gen_range(-0.5..0.5),
        },
        pose: Pose {
            rx: rng.gen_range(-max_angle..max_angle),
            ry: rng.gen_range(-max_angle..max_angle),
            rz: rng.gen_range(-max_angle..max_angle),
            tx: rng.gen_range(-0.04..0.04),
            ty: rng.gen_range(-0.04..0.04),
            tz: rng.gen_range(-0.03..0.03),
        },
    }
}

/// Render a synthetic dataset under `root` and return its records (the same
/// ones a later `load_manifest` scan would produce). Ground truth per view
/// — view-space depth with range sidecar, coverage mask — plus the
/// canonical maps and generation parameters go under the `gt` trees.
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig) -> Result<Vec<InstanceRecord>> {
    cfg.validate()?;
    let cam = CameraIntrinsics { image_size: cfg.image_size, ..CameraIntrinsics::default() };
    cam.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let views = if cfg.flip_pairs { 1 } else { cfg.views };
    let regime = if cfg.flip_pairs { Regime::FlipPair } else { Regime::SampledCollection };
    let mut records = Vec::with_capacity(cfg.count);
    let mut manifest = String::new();

    for idx in 0..cfg.count {
        let id = format!("inst_{idx:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(idx as u64),
        );
        let model = synth_canonical(&mut rng, &cam, cfg.flip_pairs);

        let (img_dir, gt_dir) = if cfg.flip_pairs {
            (root.to_path_buf(), root.join(GT_DIR).join(&id))
        } else {
            (root.join(&id), root.join(&id).join(GT_DIR))
        };
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;

        let mut image_paths = Vec::with_capacity(views);
        let mut params = GtParams { views: Vec::with_capacity(views) };
        for v in 0..views {
            let gv = synth_view(&mut rng, cfg.flip_pairs);
            let rendered = render(&model, &gv.lighting, &gv.pose, &cam)?;
            let img_path = if cfg.flip_pairs {
                img_dir.join(format!("{id}.png"))
            } else {
                img_dir.join(format!("image_{v:03}.png"))
            };
            pngio::save_image(&img_path, &rendered.image)?;
            pngio::save_depth(&gt_dir.join(format!("depth_{v:03}.png")), &rendered.view_depth)?;
            pngio::save_mask(&gt_dir.join(format!("mask_{v:03}.png")), &rendered.mask)?;
            image_paths.push(img_path);
            params.views.push(gv);
        }
        pngio::save_depth(&gt_dir.join("canonical_depth.png"), &model.depth.data)?;
        pngio::save_image(&gt_dir.join("canonical_albedo.png"), &model.albedo.data)?;
        write_text_atomic(&gt_dir.join("params.json"), &serde_json::to_string_pretty(&params)?)?;

        let record = InstanceRecord { instance_id: id, image_paths, regime };
        // The manifest stores root-relative paths so the tree relocates.
        let rel = InstanceRecord {
            image_paths: record
                .image_paths
                .iter()
                .map(|p| p.strip_prefix(root).expect("generated under root").to_path_buf())
                .collect(),
            ..record.clone()
        };
        manifest.push_str(&serde_json::to_string(&rel)?);
        manifest.push('\n');
        records.push(record);
    }
    write_text_atomic(&root.join("manifest.jsonl"), &manifest)?;
    Ok(records)
}

/// Where `generate_synthetic` put an instance's ground truth.
pub fn gt_dir_for(root: &Path, record: &InstanceRecord) -> PathBuf {
    match record.regime {
        Regime::FlipPair => root.join(GT_DIR).join(&record.instance_id),
        _ => root.join(&record.instance_id).join(GT_DIR),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(flip: bool) -> SynthConfig {
        SynthConfig { count: 2, views: 2, image_size: 32, seed: 11, flip_pairs: flip }
    }

    #[test]
    fn generation_layout_matches_the_scanner() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let records = generate_synthetic(root, &tiny(false)).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].image_paths.len(), 2);

        let scanned = load_manifest(root, Regime::SampledCollection).unwrap();
        assert_eq!(scanned, records);

        let manifest = fs::read_to_string(root.join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 2);

        for rec in &records {
            let gt = gt_dir_for(root, rec);
            for v in 0..2 {
                let depth = pngio::load_depth(&gt.join(format!("depth_{v:03}.png"))).unwrap();
                assert_eq!(depth.dim(), (32, 32));
                pngio::load_mask(&gt.join(format!("mask_{v:03}.png"))).unwrap();
            }
            let params: GtParams =
                serde_json::from_str(&fs::read_to_string(gt.join("params.json")).unwrap())
                    .unwrap();
            assert_eq!(params.views.len(), 2);
            let bound = std::f64::consts::PI / 6.0 + 1e-12;
            for gv in &params.views {
                for r in [gv.pose.rx, gv.pose.ry, gv.pose.rz] {
                    assert!(r.abs() <= bound, "pose angle {r} exceeds thirty degrees");
                }
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_synthetic(&a, &tiny(false)).unwrap();
        generate_synthetic(&b, &tiny(false)).unwrap();
        let walk = |root: &Path| -> Vec<(String, Vec<u8>)> {
            let mut out = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for p in sorted_entries(&d).unwrap() {
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(root).unwrap().display().to_string();
                        out.push((rel, fs::read(&p).unwrap()));
                    }
                }
            }
            out.sort();
            out
        };
        assert_eq!(walk(&a), walk(&b), "same seed must reproduce the same bytes");
    }

    #[test]
    fn flip_layout_is_flat_symmetric_and_side_lit() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let records = generate_synthetic(root, &tiny(true)).unwrap();
        assert_eq!(records.len(), 2);
        for rec in &records {
            assert_eq!(rec.regime, Regime::FlipPair);
            assert_eq!(rec.image_paths.len(), 1);
            assert!(rec.image_paths[0].parent().unwrap() == root, "flip images sit flat");

            let gt = gt_dir_for(root, rec);
            let canon = pngio::load_depth(&gt.join("canonical_depth.png")).unwrap();
            assert_eq!(canon, mirror_plane(&canon), "canonical depth must be symmetric");
            let params: GtParams =
                serde_json::from_str(&fs::read_to_string(gt.join("params.json")).unwrap())
                    .unwrap();
            assert!(params.views[0].lighting.light_x.abs() >= 0.15);
        }
        let scanned = load_manifest(root, Regime::FlipPair).unwrap();
        assert_eq!(scanned, records);
    }

    #[test]
    fn mirror_expansion_is_an_involution() {
        let img = Array3::from_shape_fn((3, 5, 7), |(c, i, j)| (c * 100 + i * 10 + j) as f64);
        let [same, flipped] = flip_pair_expand(&img);
        assert_eq!(same, img);
        assert_ne!(flipped, img);
        assert_eq!(mirror_image(&flipped), img);
    }

    #[test]
    fn epoch_sampling_is_seeded_and_respects_regimes() {
        let rec = |id: &str, n: usize, regime: Regime| InstanceRecord {
            instance_id: id.into(),
            image_paths: (0..n).map(|i| PathBuf::from(format!("{id}/{i}.png"))).collect(),
            regime,
        };
        let records = vec![
            rec("fixed", 3, Regime::FixedSet),
            rec("big", 5, Regime::SampledCollection),
            rec("small", 2, Regime::SampledCollection),
            rec("flip", 1, Regime::FlipPair),
        ];

        let a = sample_epoch(&records, 3, 42, 0).unwrap();
        let b = sample_epoch(&records, 3, 42, 0).unwrap();
        assert_eq!(a, b, "same seed and epoch must sample identically");
        let c = sample_epoch(&records, 3, 42, 1).unwrap();
        assert_ne!(a, c, "different epochs should differ");

        assert_eq!(a[0], records[0].image_paths, "fixed sets pass through");
        assert_eq!(a[3], records[3].image_paths, "flip pairs pass through");

        assert_eq!(a[1].len(), 3);
        let mut uniq = a[1].clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 3, "large instances sample without replacement");

        assert_eq!(a[2].len(), 3, "small instances draw with replacement");
        for p in &a[2] {
            assert!(records[2].image_paths.contains(p));
        }

        assert!(sample_epoch(&records, 0, 42, 0).is_err());
    }

    #[test]
    fn scanner_rejects_empty_roots_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(dir.path(), Regime::FixedSet).is_err());

        let inst = dir.path().join("thing");
        fs::create_dir(&inst).unwrap();
        assert!(load_manifest(dir.path(), Regime::FixedSet).is_err());

        fs::write(inst.join("junk.png"), b"not actually a png").unwrap();
        let err = load_manifest(dir.path(), Regime::FixedSet).unwrap_err().to_string();
        assert!(err.contains("junk.png"), "error should name the file: {err}");
    }
}
