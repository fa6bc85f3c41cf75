//! Training: Adam over the decomposition networks against the multi-view
//! objective, with deterministic batching, checkpoints that carry optimizer
//! state so runs resume bit-exactly, and a texture-refinement mode that
//! freezes geometry and viewpoint.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::checkpoint::Checkpoint;
use crate::data::{flip_pair_expand, sample_epoch, InstanceRecord, Regime};
use crate::losses::{
    total_loss_on_tape, CrossConf, InstanceTerms, LossBreakdown, LossBreakdownVars, LossWeights,
    ViewDecomp,
};
use crate::nets::{Decomposer, DecomposerConfig};
use crate::perceptual::PerceptualExtractor;
use crate::pngio;
use crate::tape::{Graph, Var};
use crate::{Error, Result};

/// Seed of the frozen feature extractor; shared by training and evaluation
/// so feature distances mean the same thing everywhere.
pub const FEATURE_SEED: u64 = 0x00fe_a7fe;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Early stopping compares the mean loss of the two most recent windows.
const STOP_WINDOW: usize = 100;
const STOP_MIN_IMPROVEMENT: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_instances: usize,
    /// Views drawn per instance each epoch (sampled collections only;
    /// fixed sets and flip pairs ignore it).
    pub views_per_instance: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Invoke the evaluation hook every this many steps; zero disables.
    pub eval_every: usize,
    /// Stop once a trailing loss window stops improving.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_instances: 8,
            views_per_instance: 3,
            max_steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 0,
            early_stop: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_instances == 0 {
            return Err(Error::InvalidConfig("batch_instances must be positive".into()));
        }
        if self.views_per_instance == 0 {
            return Err(Error::InvalidConfig("views_per_instance must be positive".into()));
        }
        self.weights.validate()
    }
}

/// First-moment/second-moment state per parameter, keyed by name so it
/// serializes into checkpoints alongside the weights.
#[derive(Default)]
struct Adam {
    m: HashMap<String, ArrayD<f64>>,
    v: HashMap<String, ArrayD<f64>>,
}

impl Adam {
    /// One update at time `t` (1-based). Parameters without a gradient
    /// entry are left untouched, state included.
    fn apply(
        &mut self,
        decomposer: &mut Decomposer,
        grads: &HashMap<usize, ArrayD<f64>>,
        lr: f64,
        t: usize,
    ) {
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let ids: Vec<usize> = grads.keys().copied().collect();
        for id in ids {
            let g = &grads[&id];
            let name = decomposer.params().name(id).to_string();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);

            let mut new = (**decomposer.params().value(id)).clone();
            ndarray::Zip::from(&mut new).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            });
            decomposer.params_mut().set(id, new);
        }
    }
}

/// Build one instance's full objective on a fresh tape: decompose every
/// view, attach cross-view confidence for each pivot pair, and assemble the
/// combined loss.
pub fn instance_loss_on_tape(
    g: &mut Graph,
    decomposer: &Decomposer,
    images: &[Array3<f64>],
    extractor: &PerceptualExtractor,
    cam: &CameraIntrinsics,
    weights: &LossWeights,
) -> Result<LossBreakdownVars> {
    let img_vars: Vec<Var> =
        images.iter().map(|im| g.constant(im.clone().into_dyn())).collect();
    let views: Vec<ViewDecomp> = img_vars
        .iter()
        .map(|&iv| {
            let d = decomposer.decompose_on_tape(g, iv, cam);
            ViewDecomp {
                depth: d.depth,
                albedo: d.albedo,
                light: d.light,
                pose: d.pose,
                conf: d.conf,
            }
        })
        .collect();
    let mut cross_conf = Vec::new();
    for s in 1..images.len() {
        cross_conf.push(CrossConf {
            target: s,
            source: 0,
            conf: decomposer.cross_confidence_on_tape(g, img_vars[s], img_vars[0]),
        });
        cross_conf.push(CrossConf {
            target: 0,
            source: s,
            conf: decomposer.cross_confidence_on_tape(g, img_vars[0], img_vars[s]),
        });
    }
    total_loss_on_tape(
        g,
        &InstanceTerms {
            images,
            views: &views,
            cross_conf: &cross_conf,
            extractor,
            cam,
            raster: &Default::default(),
            weights,
        },
    )
}

pub struct TrainOutcome {
    /// Global steps completed when the run ended.
    pub steps_run: usize,
    pub stopped_early: bool,
    pub final_loss: Option<LossBreakdown>,
    pub checkpoint_path: PathBuf,
}

/// A training run in progress: the model, its optimizer state, and the
/// global step counter that makes resumed runs indistinguishable from
/// uninterrupted ones.
pub struct TrainSession {
    decomposer: Decomposer,
    adam: Adam,
    cam: CameraIntrinsics,
    extractor: PerceptualExtractor,
    cfg: TrainConfig,
    step: usize,
    /// Networks the optimizer may touch; `None` trains everything.
    trainable: Option<Vec<&'static str>>,
}

const REFINE_NETS: [&str; 3] = ["f_a", "f_l", "f_c"];

impl TrainSession {
    pub fn new(net: DecomposerConfig, cam: CameraIntrinsics, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cam.validate()?;
        if cam.image_size != net.image_size {
            return Err(Error::InvalidConfig(format!(
                "camera size {} does not match network size {}",
                cam.image_size, net.image_size
            )));
        }
        Ok(TrainSession {
            decomposer: Decomposer::new(net)?,
            adam: Adam::default(),
            cam,
            extractor: PerceptualExtractor::seeded(FEATURE_SEED),
            cfg,
            step: 0,
            trainable: None,
        })
    }

    /// Restore a session from a checkpoint, optimizer state and all.
    pub fn resume(path: &Path, cam: CameraIntrinsics, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (decomposer, opt) = Checkpoint::load(path)?.split()?;
        if cam.image_size != decomposer.config().image_size {
            return Err(Error::InvalidConfig(format!(
                "camera size {} does not match checkpointed network size {}",
                cam.image_size,
                decomposer.config().image_size
            )));
        }
        let mut adam = Adam::default();
        let mut step = 0usize;
        for (name, a) in opt {
            if name == "opt.step" {
                let raw = a.iter().next().copied().unwrap_or(f64::NAN);
                if !(raw.is_finite() && raw >= 0.0 && raw.fract() == 0.0) {
                    return Err(Error::Checkpoint(format!("bad step counter {raw}")));
                }
                step = raw as usize;
            } else if let Some(p) = name.strip_prefix("opt.m.") {
                adam.m.insert(p.to_string(), a);
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                adam.v.insert(p.to_string(), a);
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer entry {name}")));
            }
        }
        for (which, map) in [("m", &adam.m), ("v", &adam.v)] {
            for (name, a) in map {
                match decomposer.params().get(name) {
                    Some(p) if p.shape() == a.shape() => {}
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "optimizer {which} state for {name} does not match any parameter"
                        )))
                    }
                }
            }
        }
        Ok(TrainSession {
            decomposer,
            adam,
            cam,
            extractor: PerceptualExtractor::seeded(FEATURE_SEED),
            cfg,
            step,
            trainable: None,
        })
    }

    /// Texture refinement: adapt albedo, lighting, and same-view confidence
    /// to single images while depth, viewpoint, and cross-view confidence
    /// stay frozen. Starts a fresh optimizer.
    pub fn refine(decomposer: Decomposer, cam: CameraIntrinsics, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cam.validate()?;
        if cam.image_size != decomposer.config().image_size {
            return Err(Error::InvalidConfig(format!(
                "camera size {} does not match network size {}",
                cam.image_size,
                decomposer.config().image_size
            )));
        }
        Ok(TrainSession {
            decomposer,
            adam: Adam::default(),
            cam,
            extractor: PerceptualExtractor::seeded(FEATURE_SEED),
            cfg,
            step: 0,
            trainable: Some(REFINE_NETS.to_vec()),
        })
    }

    pub fn decomposer(&self) -> &Decomposer {
        &self.decomposer
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.cam
    }

    pub fn extractor(&self) -> &PerceptualExtractor {
        &self.extractor
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn net_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    /// Mean loss and mean parameter gradients over a batch of instances.
    pub fn gradients(
        &self,
        batch: &[(String, Vec<Array3<f64>>)],
    ) -> Result<(LossBreakdown, HashMap<usize, ArrayD<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        // Instances carry independent tapes, so they parallelize cleanly;
        // merging in batch order keeps the result bit-identical for any
        // worker count.
        let per_instance: Vec<(LossBreakdown, HashMap<usize, ArrayD<f64>>)> = batch
            .par_iter()
            .map(|(instance_id, images)| {
                if self.trainable.is_some() && images.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "refinement works on single images, instance {instance_id} has {}",
                        images.len()
                    )));
                }
                let mut g = Graph::default();
                let vars = instance_loss_on_tape(
                    &mut g,
                    &self.decomposer,
                    images,
                    &self.extractor,
                    &self.cam,
                    &self.cfg.weights,
                )?;
                let bd = vars.extract(&g);
                if !bd.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.step,
                        instance_id: instance_id.clone(),
                        detail: format!(
                            "rec={} rec_cross={} al={} al_cross={}",
                            bd.rec, bd.rec_cross, bd.al, bd.al_cross
                        ),
                    });
                }
                let grads = g.backward(vars.total);
                let mut by_id = HashMap::new();
                for (id, var) in g.param_vars() {
                    let Some(grad) = grads.wrt(var) else { continue };
                    if !grad.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteLoss {
                            step: self.step,
                            instance_id: instance_id.clone(),
                            detail: format!(
                                "non-finite gradient for {}",
                                self.decomposer.params().name(id)
                            ),
                        });
                    }
                    by_id.insert(id, grad.clone());
                }
                Ok((bd, by_id))
            })
            .collect::<Result<_>>()?;

        let mut sum: HashMap<usize, ArrayD<f64>> = HashMap::new();
        let mut agg = LossBreakdown::default();
        for (bd, by_id) in per_instance {
            for (id, grad) in by_id {
                match sum.get_mut(&id) {
                    Some(acc) => *acc += &grad,
                    None => {
                        sum.insert(id, grad);
                    }
                }
            }
            agg.rec += bd.rec;
            agg.rec_cross += bd.rec_cross;
            agg.al += bd.al;
            agg.al_cross += bd.al_cross;
            agg.total += bd.total;
        }
        for g in sum.values_mut() {
            *g *= scale;
        }
        agg.rec *= scale;
        agg.rec_cross *= scale;
        agg.al *= scale;
        agg.al_cross *= scale;
        agg.total *= scale;
        Ok((agg, sum))
    }

    /// One optimizer update against the mean loss over the batch. Returns
    /// the averaged breakdown.
    pub fn train_step(&mut self, batch: &[(String, Vec<Array3<f64>>)]) -> Result<LossBreakdown> {
        let (agg, mut grads) = self.gradients(batch)?;
        if let Some(allowed) = &self.trainable {
            grads.retain(|&id, _| {
                allowed.contains(&Self::net_of(self.decomposer.params().name(id)))
            });
        }
        self.step += 1;
        self.adam.apply(&mut self.decomposer, &grads, self.cfg.learning_rate, self.step);
        Ok(agg)
    }

    /// Write the model plus optimizer state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut opt: Vec<(String, ArrayD<f64>)> =
            vec![("opt.step".into(), Array1::from(vec![self.step as f64]).into_dyn())];
        let mut names: Vec<&String> = self.adam.m.keys().collect();
        names.sort();
        for name in names {
            opt.push((format!("opt.m.{name}"), self.adam.m[name].clone()));
        }
        let mut names: Vec<&String> = self.adam.v.keys().collect();
        names.sort();
        for name in names {
            opt.push((format!("opt.v.{name}"), self.adam.v[name].clone()));
        }
        Checkpoint::from_decomposer(&self.decomposer, &opt)?.save(path)
    }

    fn load_batch(
        &self,
        records: &[InstanceRecord],
        picks: &[Vec<PathBuf>],
        ids: &[usize],
    ) -> Result<Vec<(String, Vec<Array3<f64>>)>> {
        let mut batch = Vec::with_capacity(ids.len());
        for &i in ids {
            let rec = &records[i];
            let images = match rec.regime {
                Regime::FlipPair => {
                    let img = pngio::load_image(&picks[i][0])?;
                    flip_pair_expand(&img).to_vec()
                }
                _ => picks[i]
                    .iter()
                    .map(|p| pngio::load_image(p))
                    .collect::<Result<Vec<_>>>()?,
            };
            batch.push((rec.instance_id.clone(), images));
        }
        Ok(batch)
    }

    /// Run the full loop over `records` until `max_steps` (or early stop):
    /// deterministic epoch shuffling and view sampling, a loss log, an
    /// optional evaluation hook, and a final checkpoint under `out_dir`.
    pub fn run(
        &mut self,
        records: &[InstanceRecord],
        out_dir: &Path,
        mut eval_hook: Option<&mut dyn FnMut(usize, &Decomposer) -> Result<()>>,
    ) -> Result<TrainOutcome> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("no instances to train on".into()));
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

        let log_path = out_dir.join("loss_log.csv");
        let fresh = !(self.step > 0 && log_path.exists());
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(log, "step,rec,rec_cross,al,al_cross,total")
                .map_err(|e| Error::io(&log_path, e))?;
        }

        let batches_per_epoch = records.len().div_ceil(self.cfg.batch_instances);
        let mut history: VecDeque<f64> = VecDeque::with_capacity(2 * STOP_WINDOW);
        let mut last = None;
        let mut stopped_early = false;

        let mut epoch_cache: Option<(u64, Vec<Vec<PathBuf>>, Vec<usize>)> = None;
        while self.step < self.cfg.max_steps {
            let epoch = (self.step / batches_per_epoch) as u64;
            let slot = self.step % batches_per_epoch;
            if epoch_cache.as_ref().map(|(e, _, _)| *e) != Some(epoch) {
                let picks =
                    sample_epoch(records, self.cfg.views_per_instance, self.cfg.seed, epoch)?;
                let mut order: Vec<usize> = (0..records.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                rng.set_stream(1);
                for k in (1..order.len()).rev() {
                    order.swap(k, rng.gen_range(0..=k));
                }
                epoch_cache = Some((epoch, picks, order));
            }
            let (_, picks, order) = epoch_cache.as_ref().unwrap();
            let lo = slot * self.cfg.batch_instances;
            let hi = (lo + self.cfg.batch_instances).min(records.len());
            let batch = self.load_batch(records, picks, &order[lo..hi])?;

            let bd = self.train_step(&batch)?;
            writeln!(
                log,
                "{},{},{},{},{},{}",
                self.step, bd.rec, bd.rec_cross, bd.al, bd.al_cross, bd.total
            )
            .map_err(|e| Error::io(&log_path, e))?;

            if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                if let Some(hook) = eval_hook.as_mut() {
                    hook(self.step, &self.decomposer)?;
                }
            }

            if history.len() == 2 * STOP_WINDOW {
                history.pop_front();
            }
            history.push_back(bd.total);
            last = Some(bd);
            if self.cfg.early_stop && history.len() == 2 * STOP_WINDOW {
                let older: f64 = history.iter().take(STOP_WINDOW).sum::<f64>();
                let newer: f64 = history.iter().skip(STOP_WINDOW).sum::<f64>();
                if (older - newer) / (STOP_WINDOW as f64) < STOP_MIN_IMPROVEMENT {
                    stopped_early = true;
                    break;
                }
            }
        }

        let checkpoint_path = out_dir.join(format!("ckpt_step{}.lemul", self.step));
        self.save(&checkpoint_path)?;
        Ok(TrainOutcome {
            steps_run: self.step,
            stopped_early,
            final_loss: last,
            checkpoint_path,
        })
    }
}
