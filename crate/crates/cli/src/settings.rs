//! Merged run settings: library defaults, overridden by a flat JSON config
//! file with dotted keys ("trainer.learning_rate"), overridden in turn by
//! command-line flags. Unknown keys are rejected so typos fail loudly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;

use lemul_core::camera::CameraIntrinsics;
use lemul_core::data::SynthConfig;
use lemul_core::nets::DecomposerConfig;
use lemul_core::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub net: DecomposerConfig,
    pub trainer: TrainConfig,
    pub synth: SynthConfig,
    pub fov_degrees: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let cam = CameraIntrinsics::default();
        Settings {
            net: DecomposerConfig::default(),
            trainer: TrainConfig::default(),
            synth: SynthConfig::default(),
            fov_degrees: cam.fov_degrees,
            depth_min: cam.depth_min,
            depth_max: cam.depth_max,
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().with_context(|| format!("{key} expects a number, got {v}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .with_context(|| format!("{key} expects a non-negative integer, got {v}"))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64().with_context(|| format!("{key} expects a non-negative integer, got {v}"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().with_context(|| format!("{key} expects true or false, got {v}"))
}

impl Settings {
    /// Defaults plus, when given, a config file.
    pub fn load(config: Option<&Path>) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            s.apply_file(path)?;
        }
        Ok(s)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let doc: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = doc else {
            bail!("config {} must be a flat JSON object", path.display());
        };
        for (key, value) in &map {
            self.set(key, value).with_context(|| format!("in config {}", path.display()))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "net.image_size" => self.net.image_size = as_usize(key, v)?,
            "net.base_channels" => self.net.base_channels = as_usize(key, v)?,
            "net.bottleneck_dim" => self.net.bottleneck_dim = as_usize(key, v)?,
            "net.rot_bound" => self.net.rot_bound = as_f64(key, v)?,
            "net.trans_bound" => self.net.trans_bound = as_f64(key, v)?,
            "net.seed" => self.net.seed = as_u64(key, v)?,
            "trainer.learning_rate" => self.trainer.learning_rate = as_f64(key, v)?,
            "trainer.batch_instances" => self.trainer.batch_instances = as_usize(key, v)?,
            "trainer.views_per_instance" => {
                self.trainer.views_per_instance = as_usize(key, v)?
            }
            "trainer.max_steps" => self.trainer.max_steps = as_usize(key, v)?,
            "trainer.seed" => self.trainer.seed = as_u64(key, v)?,
            "trainer.eval_every" => self.trainer.eval_every = as_usize(key, v)?,
            "trainer.early_stop" => self.trainer.early_stop = as_bool(key, v)?,
            "weights.lambda_pe" => self.trainer.weights.lambda_pe = as_f64(key, v)?,
            "weights.lambda_cross" => self.trainer.weights.lambda_cross = as_f64(key, v)?,
            "weights.lambda_al" => self.trainer.weights.lambda_al = as_f64(key, v)?,
            "weights.sigma_c" => self.trainer.weights.sigma_c = as_f64(key, v)?,
            "weights.sigma_d" => self.trainer.weights.sigma_d = as_f64(key, v)?,
            "camera.fov_degrees" => self.fov_degrees = as_f64(key, v)?,
            "camera.depth_min" => self.depth_min = as_f64(key, v)?,
            "camera.depth_max" => self.depth_max = as_f64(key, v)?,
            "synth.count" => self.synth.count = as_usize(key, v)?,
            "synth.views" => self.synth.views = as_usize(key, v)?,
            "synth.image_size" => self.synth.image_size = as_usize(key, v)?,
            "synth.seed" => self.synth.seed = as_u64(key, v)?,
            "synth.flip_pairs" => self.synth.flip_pairs = as_bool(key, v)?,
            other => bail!("unknown config key \"{other}\""),
        }
        Ok(())
    }

    /// The camera the current network size implies.
    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            image_size: self.net.image_size,
            fov_degrees: self.fov_degrees,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
        }
    }

    /// Same intrinsics at an explicit size (checkpoints carry their own).
    pub fn camera_sized(&self, image_size: usize) -> CameraIntrinsics {
        CameraIntrinsics { image_size, ..self.camera() }
    }
}
