//! The six subcommands. Each one writes its outputs under `--out` plus an
//! `artifacts.json` listing what it produced, and prints a short summary to
//! stdout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array3;
use serde::Serialize;

use lemul_core::checkpoint::Checkpoint;
use lemul_core::data::{generate_synthetic, load_manifest, Regime};
use lemul_core::metrics::{
    eval_cases_from_synthetic, evaluate_dataset, evaluate_fixed_depth, mean_baseline,
    null_baseline,
};
use lemul_core::nets::Decomposer;
use lemul_core::pngio;
use lemul_core::render::{normals_from_depth, render};
use lemul_core::trainer::TrainSession;
use lemul_core::types::{AlbedoMap, CanonicalModel, Lighting, Pose};

use crate::settings::Settings;
use crate::{EvalArgs, GenerateArgs, InferArgs, RefineArgs, RenderArgs, TrainArgs};

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Record what a command produced, so downstream tooling need not guess.
fn write_artifacts(out: &Path, command: &str, files: &[PathBuf]) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        outputs: Vec<String>,
    }
    let mut outputs: Vec<String> = files
        .iter()
        .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
        .collect();
    outputs.sort();
    let manifest = Manifest { command, outputs };
    let path = out.join("artifacts.json");
    let tmp = out.join("artifacts.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, &path).with_context(|| format!("finalizing {}", path.display()))?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("finalizing {}", path.display()))?;
    Ok(())
}

fn load_decomposer(ckpt: &Path) -> Result<Decomposer> {
    let (decomposer, _) = Checkpoint::load(ckpt)?.split()?;
    Ok(decomposer)
}

fn regime_for(flip_pairs: bool) -> Regime {
    if flip_pairs {
        Regime::FlipPair
    } else {
        Regime::SampledCollection
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    if let Some(n) = args.count {
        s.synth.count = n;
    }
    if let Some(m) = args.m_views {
        s.synth.views = m;
    }
    if let Some(n) = args.image_size {
        s.synth.image_size = n;
    }
    if let Some(seed) = args.seed {
        s.synth.seed = seed;
    }
    if args.flip_pairs {
        s.synth.flip_pairs = true;
    }
    ensure_out(&args.out)?;
    let records = generate_synthetic(&args.out, &s.synth)?;
    let views: usize = records.iter().map(|r| r.image_paths.len()).sum();
    write_artifacts(&args.out, "generate", &[args.out.join("manifest.jsonl")])?;
    println!(
        "generated {} instances ({views} views) at {}x{} under {}",
        records.len(),
        s.synth.image_size,
        s.synth.image_size,
        args.out.display()
    );
    Ok(())
}

fn check_data_size(records: &[lemul_core::data::InstanceRecord], expect: usize) -> Result<()> {
    let first = records
        .first()
        .and_then(|r| r.image_paths.first())
        .ok_or_else(|| anyhow!("dataset holds no images"))?;
    let img = pngio::load_image(first)?;
    let (_, h, w) = img.dim();
    if (h, w) != (expect, expect) {
        bail!(
            "dataset images are {h}x{w} but the network expects {expect}x{expect} \
             (set net.image_size to match)"
        );
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        s.trainer.seed = seed;
    }
    if let Some(steps) = args.steps {
        s.trainer.max_steps = steps;
    }
    if let Some(m) = args.m_views {
        s.trainer.views_per_instance = m;
    }
    let records = load_manifest(&args.data, regime_for(args.flip_pairs))?;

    let mut session = match &args.ckpt {
        Some(ckpt) => {
            let (decomposer, _) = Checkpoint::load(ckpt)?.split()?;
            let cam = s.camera_sized(decomposer.config().image_size);
            check_data_size(&records, cam.image_size)?;
            TrainSession::resume(ckpt, cam, s.trainer.clone())?
        }
        None => {
            check_data_size(&records, s.net.image_size)?;
            TrainSession::new(s.net.clone(), s.camera(), s.trainer.clone())?
        }
    };

    ensure_out(&args.out)?;
    write_json_atomic(&args.out.join("config.json"), &s)?;

    // With ground truth beside the data, evaluate on schedule; without it,
    // the eval hook stays off.
    let eval_cases = if s.trainer.eval_every > 0 {
        eval_cases_from_synthetic(&args.data, &records).ok()
    } else {
        None
    };
    let cam = *session.camera();
    let out_dir = args.out.clone();
    let mut eval_files: Vec<PathBuf> = Vec::new();
    let mut hook = |step: usize, d: &Decomposer| -> lemul_core::Result<()> {
        if let Some(cases) = &eval_cases {
            let report = evaluate_dataset(d, cases, &cam)?;
            let path = out_dir.join(format!("eval_step{step}.csv"));
            report.save_csv(&path)?;
            eval_files.push(path);
        }
        Ok(())
    };
    let outcome = session.run(&records, &args.out, Some(&mut hook))?;

    let mut files = vec![
        args.out.join("config.json"),
        args.out.join("loss_log.csv"),
        outcome.checkpoint_path.clone(),
    ];
    files.extend(eval_files);
    write_artifacts(&args.out, "train", &files)?;
    match outcome.final_loss {
        Some(bd) => println!(
            "trained to step {} (total {:.6}, rec {:.6}) -> {}",
            outcome.steps_run,
            bd.total,
            bd.rec,
            outcome.checkpoint_path.display()
        ),
        None => println!(
            "no steps to run; checkpointed initial weights -> {}",
            outcome.checkpoint_path.display()
        ),
    }
    if outcome.stopped_early {
        println!("stopped early: the loss plateaued");
    }
    Ok(())
}

pub fn cmd_refine(args: &RefineArgs) -> Result<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        s.trainer.seed = seed;
    }
    if let Some(steps) = args.steps {
        s.trainer.max_steps = steps;
    }
    let decomposer = load_decomposer(&args.ckpt)?;
    let cam = s.camera_sized(decomposer.config().image_size);

    let records = load_manifest(&args.data, Regime::FixedSet)?;
    if let Some(multi) = records.iter().find(|r| r.image_paths.len() != 1) {
        bail!(
            "refinement adapts to single images; instance {} has {}",
            multi.instance_id,
            multi.image_paths.len()
        );
    }
    check_data_size(&records, cam.image_size)?;

    let mut session = TrainSession::refine(decomposer, cam, s.trainer.clone())?;
    ensure_out(&args.out)?;
    write_json_atomic(&args.out.join("config.json"), &s)?;
    let outcome = session.run(&records, &args.out, None)?;

    write_artifacts(
        &args.out,
        "refine",
        &[
            args.out.join("config.json"),
            args.out.join("loss_log.csv"),
            outcome.checkpoint_path.clone(),
        ],
    )?;
    println!(
        "refined texture nets for {} steps on {} images -> {}",
        outcome.steps_run,
        records.len(),
        outcome.checkpoint_path.display()
    );
    Ok(())
}

/// Map unit normals from [-1, 1] into image range for viewing.
fn normals_to_image(n: &Array3<f64>) -> Array3<f64> {
    n.mapv(|v| (v + 1.0) / 2.0)
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let decomposer = load_decomposer(&args.ckpt)?;
    let cam = s.camera_sized(decomposer.config().image_size);
    let image = pngio::load_image(&args.image)?;
    let dec = decomposer.decompose(&image, &cam)?;

    ensure_out(&args.out)?;
    let depth_path = args.out.join("depth.png");
    pngio::save_depth(&depth_path, &dec.depth.data)?;
    let albedo_path = args.out.join("albedo.png");
    pngio::save_image(&albedo_path, &dec.albedo.data)?;
    let normals = normals_from_depth(&dec.depth, &cam)?;
    let normals_path = args.out.join("normals.png");
    pngio::save_image(&normals_path, &normals_to_image(&normals.data))?;

    #[derive(Serialize)]
    struct Summary {
        lighting: Lighting,
        pose: Pose,
        confidence_l1_mean: f64,
        confidence_pe_mean: f64,
    }
    let json_path = args.out.join("decomposition.json");
    write_json_atomic(
        &json_path,
        &Summary {
            lighting: dec.lighting,
            pose: dec.pose,
            confidence_l1_mean: dec.confidence.c_l1.mean().unwrap_or(f64::NAN),
            confidence_pe_mean: dec.confidence.c_pe.mean().unwrap_or(f64::NAN),
        },
    )?;

    write_artifacts(
        &args.out,
        "infer",
        &[
            depth_path,
            depth_path_range(&args.out),
            albedo_path,
            normals_path,
            json_path,
        ],
    )?;
    println!(
        "decomposed {} -> depth, albedo, normals, and parameters under {}",
        args.image.display(),
        args.out.display()
    );
    Ok(())
}

fn depth_path_range(out: &Path) -> PathBuf {
    out.join("depth.png.range")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let decomposer = load_decomposer(&args.ckpt)?;
    let cam = s.camera_sized(decomposer.config().image_size);

    let records = load_manifest(&args.data, regime_for(args.flip_pairs))?;
    check_data_size(&records, cam.image_size)?;
    let cases = eval_cases_from_synthetic(&args.data, &records)
        .context("this dataset carries no ground truth to score against")?;

    let report = evaluate_dataset(&decomposer, &cases, &cam)?;
    let null = evaluate_fixed_depth(&null_baseline(&cam), &cases, &cam)?;
    let gt_depths: Vec<_> = cases.iter().map(|c| c.gt_depth.clone()).collect();
    let mean_ref = evaluate_fixed_depth(&mean_baseline(&gt_depths)?, &cases, &cam)?;

    ensure_out(&args.out)?;
    let csv_path = args.out.join("eval.csv");
    report.save_csv(&csv_path)?;

    #[derive(Serialize)]
    struct Pair {
        side: f64,
        mad: f64,
    }
    #[derive(Serialize)]
    struct Summary {
        images: usize,
        model: Pair,
        null_baseline: Pair,
        mean_baseline: Pair,
    }
    let summary_path = args.out.join("summary.json");
    write_json_atomic(
        &summary_path,
        &Summary {
            images: report.rows.len(),
            model: Pair { side: report.mean_side, mad: report.mean_mad },
            null_baseline: Pair { side: null.mean_side, mad: null.mean_mad },
            mean_baseline: Pair { side: mean_ref.mean_side, mad: mean_ref.mean_mad },
        },
    )?;

    write_artifacts(&args.out, "eval", &[csv_path, summary_path])?;
    println!(
        "side {:.4} (mean baseline {:.4})  mad {:.2} deg (null baseline {:.2}) over {} images",
        report.mean_side,
        mean_ref.mean_side,
        report.mean_mad,
        null.mean_mad,
        report.rows.len()
    );
    Ok(())
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let decomposer = load_decomposer(&args.ckpt)?;
    let cam = s.camera_sized(decomposer.config().image_size);
    let image = pngio::load_image(&args.image)?;
    let dec = decomposer.decompose(&image, &cam)?;

    let model = CanonicalModel { depth: dec.depth, albedo: dec.albedo };
    let n = cam.image_size;
    let gray = CanonicalModel {
        depth: model.depth.clone(),
        albedo: AlbedoMap::new(Array3::from_elem((3, n, n), 0.8))
            .expect("a flat gray albedo is valid"),
    };

    // The predicted viewpoint plus a second one swung to the other side.
    let swing = 0.45;
    let alt = Pose {
        ry: if dec.pose.ry > 0.0 { dec.pose.ry - swing } else { dec.pose.ry + swing },
        ..dec.pose
    };
    let poses = [dec.pose, alt];

    ensure_out(&args.out)?;
    let mut files = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let textured = render(&model, &dec.lighting, pose, &cam)?;
        let path = args.out.join(format!("textured_{i:03}.png"));
        pngio::save_image(&path, &textured.image)?;
        files.push(path);

        let shape = render(&gray, &dec.lighting, pose, &cam)?;
        let path = args.out.join(format!("textureless_{i:03}.png"));
        pngio::save_image(&path, &shape.image)?;
        files.push(path);
    }

    write_artifacts(&args.out, "render", &files)?;
    println!(
        "rendered {} textured and {} textureless views under {}",
        poses.len(),
        poses.len(),
        args.out.display()
    );
    Ok(())
}
