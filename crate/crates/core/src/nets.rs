//! The single-image decomposition networks: canonical depth, albedo,
//! lighting, and viewpoint, plus confidence heads for the same-view and
//! cross-view reconstruction terms. All weights live in a flat named store
//! so the optimizer and checkpoints can treat them uniformly.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, Ix1, Ix3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::losses::ConfPairVars;
use crate::perceptual::gaussian;
use crate::render::LightVars;
use crate::tape::{Graph, Var};
use crate::types::{AlbedoMap, DepthMap, Lighting, Pose};
use crate::{Error, Result};

/// Confidence floor keeping the log terms finite: c = floor + exp(raw).
pub const CONF_FLOOR: f64 = 1e-3;

const GN_GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;
/// Output heads start near (but never exactly at) zero, so the squashed
/// predictions begin at their midpoints while every weight still carries
/// gradient.
const HEAD_SCALE: f64 = 0.01;
/// Channel growth is capped at base_channels * 8.
const WIDTH_CAP: usize = 8;

/// Names of the six networks, in store order.
pub const NET_NAMES: [&str; 6] = ["f_a", "f_c", "f_cc", "f_d", "f_l", "f_v"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposerConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub bottleneck_dim: usize,
    /// Half-range of each predicted Euler angle, radians.
    pub rot_bound: f64,
    /// Half-range of each predicted translation component.
    pub trans_bound: f64,
    pub seed: u64,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        DecomposerConfig {
            image_size: 64,
            base_channels: 32,
            bottleneck_dim: 256,
            rot_bound: PI / 3.0,
            trans_bound: 0.1,
            seed: 0,
        }
    }
}

impl DecomposerConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "image_size must be a power of two of at least 16, got {n}"
            )));
        }
        if self.base_channels < GN_GROUPS || self.base_channels % GN_GROUPS != 0 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be a positive multiple of {GN_GROUPS}, got {}",
                self.base_channels
            )));
        }
        if self.bottleneck_dim == 0 {
            return Err(Error::InvalidConfig("bottleneck_dim must be positive".into()));
        }
        if !(self.rot_bound > 0.0 && self.rot_bound <= PI) {
            return Err(Error::InvalidConfig(format!(
                "rot_bound must lie in (0, pi], got {}",
                self.rot_bound
            )));
        }
        if !(self.trans_bound > 0.0 && self.trans_bound <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "trans_bound must lie in (0, 0.5], got {}",
                self.trans_bound
            )));
        }
        Ok(())
    }

    /// Number of stride-2 stages taking the image down to a 4x4 bottleneck.
    fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    /// Encoder output channels after stage i (1-based).
    fn enc_ch(&self, i: usize) -> usize {
        (self.base_channels << (i - 1)).min(self.base_channels * WIDTH_CAP)
    }

    /// Decoder output channels after stage j (1-based); the last stage
    /// holds at base width.
    fn dec_ch(&self, j: usize) -> usize {
        let s = self.stages();
        if j < s {
            self.enc_ch(s - j)
        } else {
            self.base_channels
        }
    }
}

/// Flat parameter table. Ids are insertion indices, so a store built from
/// the same config is identically laid out and checkpoints can address
/// arrays by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<f64>>>,
    ids: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            !self.ids.contains_key(name),
            "parameter {name} registered twice"
        );
        let id = self.names.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Arc<ArrayD<f64>> {
        &self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Arc<ArrayD<f64>>> {
        self.id(name).map(|id| &self.values[id])
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, id: usize, value: ArrayD<f64>) {
        assert_eq!(
            self.values[id].shape(),
            value.shape(),
            "parameter {} changed shape",
            self.names[id]
        );
        self.values[id] = Arc::new(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Arc<ArrayD<f64>>)> {
        self.names
            .iter()
            .enumerate()
            .map(|(id, n)| (id, n.as_str(), &self.values[id]))
    }

    /// Put a parameter on the tape as a differentiable leaf.
    pub fn var(&self, g: &mut Graph, name: &str) -> Var {
        let id = self
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        g.param(id, &self.values[id])
    }
}

/// One view's decomposition on the tape.
pub struct DecompVars {
    pub depth: Var,
    pub albedo: Var,
    pub light: LightVars,
    pub pose: Var,
    pub conf: ConfPairVars,
}

/// Plain-array confidence maps: full resolution for the photometric term,
/// quarter resolution for the feature term.
#[derive(Clone, Debug)]
pub struct ConfidencePair {
    pub c_l1: Array2<f64>,
    pub c_pe: Array2<f64>,
}

/// Plain-array decomposition of a single image.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub depth: DepthMap,
    pub albedo: AlbedoMap,
    pub lighting: Lighting,
    pub pose: Pose,
    pub confidence: ConfidencePair,
}

pub struct Decomposer {
    config: DecomposerConfig,
    params: ParamStore,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = std * gaussian(&mut self.rng);
        }
        self.store.insert(name, a);
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, ArrayD::from_elem(IxDyn(shape), 1.0));
    }

    /// Convolution weights with He-style scaling; `head` shrinks the draw
    /// toward zero for output layers.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, head: bool) {
        let std = (2.0 / (cin * k * k) as f64).sqrt() * if head { HEAD_SCALE } else { 1.0 };
        self.tensor(&format!("{name}.w"), &[cout, cin, k, k], std);
        self.zeros(&format!("{name}.b"), &[cout]);
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.tensor(&format!("{name}.w"), &[cin, cout, k, k], std);
        self.zeros(&format!("{name}.b"), &[cout]);
    }

    fn gn(&mut self, name: &str, c: usize) {
        self.ones(&format!("{name}.gamma"), &[c]);
        self.zeros(&format!("{name}.beta"), &[c]);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, head: bool) {
        let std = (2.0 / inp as f64).sqrt() * if head { HEAD_SCALE } else { 1.0 };
        self.tensor(&format!("{name}.w"), &[out, inp], std);
        self.zeros(&format!("{name}.b"), &[out]);
    }
}

impl Decomposer {
    pub fn new(config: DecomposerConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let s = config.stages();

        // Map networks: encoder/decoder trunks plus their output heads.
        for (net, in_ch, out_ch) in [("f_a", 3, 3), ("f_c", 3, 1), ("f_cc", 6, 1), ("f_d", 3, 1)]
        {
            for i in 1..=s {
                let cin = if i == 1 { in_ch } else { config.enc_ch(i - 1) };
                b.conv(&format!("{net}.enc{i}"), config.enc_ch(i), cin, 4, false);
                b.gn(&format!("{net}.enc{i}"), config.enc_ch(i));
            }
            for j in 1..=s {
                let cin = if j == 1 { config.enc_ch(s) } else { config.dec_ch(j - 1) };
                b.deconv(&format!("{net}.dec{j}"), cin, config.dec_ch(j), 4);
                b.gn(&format!("{net}.dec{j}"), config.dec_ch(j));
            }
            b.conv(&format!("{net}.out"), out_ch, config.dec_ch(s), 3, true);
            if net == "f_c" || net == "f_cc" {
                // Quarter-resolution confidence for the feature-space term;
                // dec_ch(0) is the bottleneck width, reached when s == 2.
                b.conv(&format!("{net}.pe"), out_ch, config.dec_ch(s - 2), 3, true);
            }
        }

        // Vector networks: encoder, 4x4 -> 1x1 neck, affine head.
        for (net, out_dim) in [("f_l", 4), ("f_v", 6)] {
            for i in 1..=s {
                let cin = if i == 1 { 3 } else { config.enc_ch(i - 1) };
                b.conv(&format!("{net}.enc{i}"), config.enc_ch(i), cin, 4, false);
                b.gn(&format!("{net}.enc{i}"), config.enc_ch(i));
            }
            b.conv(&format!("{net}.neck"), config.bottleneck_dim, config.enc_ch(s), 4, false);
            b.linear(&format!("{net}.head"), out_dim, config.bottleneck_dim, true);
        }

        Ok(Decomposer { config, params })
    }

    /// Rebuild from stored parts (checkpoint load). The parameter layout
    /// must match what `new` would create for the same config.
    pub fn from_parts(config: DecomposerConfig, params: ParamStore) -> Result<Self> {
        let reference = Decomposer::new(config)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in reference.params.iter() {
            match params.id(name) {
                Some(got_id) if got_id == id => {
                    if params.value(id).shape() != value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            params.value(id).shape(),
                            value.shape()
                        )));
                    }
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "parameter table does not match the config (missing or misplaced {name})"
                    )))
                }
            }
        }
        Ok(Decomposer { config, params })
    }

    pub fn config(&self) -> &DecomposerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn enc_stage(&self, g: &mut Graph, net: &str, i: usize, x: Var) -> Var {
        let w = self.params.var(g, &format!("{net}.enc{i}.w"));
        let b = self.params.var(g, &format!("{net}.enc{i}.b"));
        let gamma = self.params.var(g, &format!("{net}.enc{i}.gamma"));
        let beta = self.params.var(g, &format!("{net}.enc{i}.beta"));
        let y = g.conv2d(x, w, b, 2, 1);
        let y = g.group_norm(y, gamma, beta, GN_GROUPS, GN_EPS);
        g.leaky_relu(y, LEAK)
    }

    fn dec_stage(&self, g: &mut Graph, net: &str, j: usize, x: Var) -> Var {
        let w = self.params.var(g, &format!("{net}.dec{j}.w"));
        let b = self.params.var(g, &format!("{net}.dec{j}.b"));
        let gamma = self.params.var(g, &format!("{net}.dec{j}.gamma"));
        let beta = self.params.var(g, &format!("{net}.dec{j}.beta"));
        let y = g.conv_transpose2d(x, w, b, 2, 1);
        let y = g.group_norm(y, gamma, beta, GN_GROUPS, GN_EPS);
        g.leaky_relu(y, LEAK)
    }

    /// Encoder-decoder trunk. Returns the full-resolution feature map and
    /// the quarter-resolution one the feature-confidence head reads.
    fn trunk(&self, g: &mut Graph, net: &str, image: Var) -> (Var, Var) {
        let s = self.config.stages();
        let mut x = image;
        for i in 1..=s {
            x = self.enc_stage(g, net, i, x);
        }
        let mut quarter = x;
        for j in 1..=s {
            x = self.dec_stage(g, net, j, x);
            if j == s - 2 {
                quarter = x;
            }
        }
        (x, quarter)
    }

    fn head(&self, g: &mut Graph, net: &str, which: &str, x: Var) -> Var {
        let w = self.params.var(g, &format!("{net}.{which}.w"));
        let b = self.params.var(g, &format!("{net}.{which}.b"));
        g.conv2d(x, w, b, 1, 1)
    }

    /// Encoder + neck + affine head for the vector networks.
    fn vector_net(&self, g: &mut Graph, net: &str, image: Var) -> Var {
        let s = self.config.stages();
        let mut x = image;
        for i in 1..=s {
            x = self.enc_stage(g, net, i, x);
        }
        let w = self.params.var(g, &format!("{net}.neck.w"));
        let b = self.params.var(g, &format!("{net}.neck.b"));
        let x = g.conv2d(x, w, b, 1, 0);
        let x = g.leaky_relu(x, LEAK);
        let x = g.reshape(x, &[self.config.bottleneck_dim]);
        let w = self.params.var(g, &format!("{net}.head.w"));
        let b = self.params.var(g, &format!("{net}.head.b"));
        g.linear(x, w, b)
    }

    fn conf_from_raw(&self, g: &mut Graph, raw: Var) -> Var {
        let e = g.exp(raw);
        g.add_scalar(e, CONF_FLOOR)
    }

    fn check_image_var(&self, g: &Graph, image: Var, channels: usize) {
        let n = self.config.image_size;
        assert_eq!(
            g.shape(image),
            &[channels, n, n],
            "decomposer expects a ({channels}, {n}, {n}) input"
        );
    }

    /// Full four-way decomposition plus same-view confidence, on the tape.
    pub fn decompose_on_tape(
        &self,
        g: &mut Graph,
        image: Var,
        cam: &CameraIntrinsics,
    ) -> DecompVars {
        self.check_image_var(g, image, 3);
        assert_eq!(cam.image_size, self.config.image_size, "camera/decomposer size mismatch");

        let (full_d, _) = self.trunk(g, "f_d", image);
        let raw_d = self.head(g, "f_d", "out", full_d);
        let t = g.tanh(raw_d);
        let t = g.scale(t, cam.depth_half());
        let depth = g.add_scalar(t, cam.depth_mid());

        let (full_a, _) = self.trunk(g, "f_a", image);
        let raw_a = self.head(g, "f_a", "out", full_a);
        let albedo = g.sigmoid(raw_a);

        let lv = self.vector_net(g, "f_l", image);
        let amb = g.index1(lv, 0);
        let ambient = g.sigmoid(amb);
        let dif = g.index1(lv, 1);
        let diffuse = g.sigmoid(dif);
        let lx = g.index1(lv, 2);
        let light_x = g.tanh(lx);
        let ly = g.index1(lv, 3);
        let light_y = g.tanh(ly);
        let light = LightVars { ambient, diffuse, light_x, light_y };

        let pv = self.vector_net(g, "f_v", image);
        let mut parts = Vec::with_capacity(6);
        for (k, bound) in [
            self.config.rot_bound,
            self.config.rot_bound,
            self.config.rot_bound,
            self.config.trans_bound,
            self.config.trans_bound,
            self.config.trans_bound,
        ]
        .into_iter()
        .enumerate()
        {
            let c = g.index1(pv, k);
            let c = g.tanh(c);
            parts.push(g.scale(c, bound));
        }
        let pose = g.stack_scalars(&parts);

        let conf = self.confidence_on_tape(g, "f_c", image);

        DecompVars { depth, albedo, light, pose, conf }
    }

    fn confidence_on_tape(&self, g: &mut Graph, net: &str, input: Var) -> ConfPairVars {
        let (full, quarter) = self.trunk(g, net, input);
        let raw_l1 = self.head(g, net, "out", full);
        let raw_pe = self.head(g, net, "pe", quarter);
        ConfPairVars {
            c_l1: self.conf_from_raw(g, raw_l1),
            c_pe: self.conf_from_raw(g, raw_pe),
        }
    }

    /// Cross-view confidence for reconstructing `target` from components of
    /// `source`. The two images are stacked channelwise, so the maps are
    /// direction-dependent.
    pub fn cross_confidence_on_tape(&self, g: &mut Graph, target: Var, source: Var) -> ConfPairVars {
        self.check_image_var(g, target, 3);
        self.check_image_var(g, source, 3);
        let stacked = g.concat_channels(&[target, source]);
        self.confidence_on_tape(g, "f_cc", stacked)
    }

    fn check_image(&self, image: &Array3<f64>, what: &str) -> Result<()> {
        let n = self.config.image_size;
        if image.dim() != (3, n, n) {
            return Err(Error::InvalidArgument(format!(
                "{what} must be (3, {n}, {n}), got {:?}",
                image.dim()
            )));
        }
        if !image.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{what} has non-finite values")));
        }
        Ok(())
    }

    /// Plain-array decomposition of one image.
    pub fn decompose(&self, image: &Array3<f64>, cam: &CameraIntrinsics) -> Result<Decomposition> {
        self.check_image(image, "image")?;
        cam.validate()?;
        if cam.image_size != self.config.image_size {
            return Err(Error::InvalidArgument(format!(
                "camera is {}px but the decomposer expects {}px",
                cam.image_size, self.config.image_size
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        let d = self.decompose_on_tape(&mut g, x, cam);

        let take2 = |g: &Graph, v: Var| -> Array2<f64> {
            let a = g.value(v).clone().into_dimensionality::<Ix3>().unwrap();
            let (_, h, w) = a.dim();
            a.into_shape_with_order((h, w)).unwrap()
        };
        let depth = DepthMap::new(take2(&g, d.depth))?;
        let albedo =
            AlbedoMap::new(g.value(d.albedo).clone().into_dimensionality::<Ix3>().unwrap())?;
        let lighting = Lighting {
            ambient: g.scalar_value(d.light.ambient),
            diffuse: g.scalar_value(d.light.diffuse),
            light_x: g.scalar_value(d.light.light_x),
            light_y: g.scalar_value(d.light.light_y),
        };
        lighting.validate()?;
        let pose_arr = g.value(d.pose).clone().into_dimensionality::<Ix1>().unwrap();
        let pose = Pose::from_array(&pose_arr);
        pose.validate()?;
        let confidence = ConfidencePair {
            c_l1: take2(&g, d.conf.c_l1),
            c_pe: take2(&g, d.conf.c_pe),
        };
        Ok(Decomposition { depth, albedo, lighting, pose, confidence })
    }

    /// Plain-array cross-view confidence maps.
    pub fn cross_confidence(
        &self,
        target: &Array3<f64>,
        source: &Array3<f64>,
    ) -> Result<ConfidencePair> {
        self.check_image(target, "target image")?;
        self.check_image(source, "source image")?;
        let mut g = Graph::new();
        let t = g.constant(target.clone().into_dyn());
        let s = g.constant(source.clone().into_dyn());
        let c = self.cross_confidence_on_tape(&mut g, t, s);
        let take2 = |g: &Graph, v: Var| -> Array2<f64> {
            let a = g.value(v).clone().into_dimensionality::<Ix3>().unwrap();
            let (_, h, w) = a.dim();
            a.into_shape_with_order((h, w)).unwrap()
        };
        Ok(ConfidencePair { c_l1: take2(&g, c.c_l1), c_pe: take2(&g, c.c_pe) })
    }
}
