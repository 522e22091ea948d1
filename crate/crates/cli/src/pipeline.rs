//! Command orchestration: scene export/reload, model construction, the
//! training stages with checkpoints and metric CSVs, rendering with
//! pointcloud export, refinement from PLY targets, and PSNR evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};

use shellnerf_core::charmodel::{
    character_forward, render_normal_map, DeformedMesh, MotionPredictor, SkeletalMotion,
};
use shellnerf_core::field::{ConvEncoder, FeatureEncoder, GridEncoder, RadianceMlp, TextureStack};
use shellnerf_core::math::derive_seed;
use shellnerf_core::refine::{
    mask_boundary_edt, refine_displacements, RefinementFrame, RefinementView, TargetPointCloud,
};
use shellnerf_core::render::{psnr, render_image, NeuralField, RenderResult};
use shellnerf_core::training::{
    alternate_training, evaluate_heldout, extract_pointclouds, pose_frames, train_field, Dataset,
    StageSnapshot, TrainOutcome,
};

use crate::config::{EncoderKind, RunConfig};
use crate::io;
use crate::scene::{gen_scene, SyntheticScene};

/// Loads a scene directory by regenerating it from its manifest; the PNG and
/// OBJ exports are for inspection, not the source of truth.
pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let manifest = io::read_scene_manifest(&dir.join("scene.json"))?;
    gen_scene(&manifest.params, manifest.seed).map_err(|e| anyhow::anyhow!("scene: {e}"))
}

/// Writes the full scene: manifest, template + rig, cameras, per-frame
/// ground-truth images, masks, and analytic surfaces.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_scene_manifest(&dir.join("scene.json"), &scene.params, scene.seed)?;
    io::write_template(dir, &scene.template, &scene.skeleton)?;
    io::write_cameras(&dir.join("cameras.json"), &scene.dataset.cameras)?;
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let gt_dir = dir.join("gt");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;
    fs::create_dir_all(&gt_dir)?;
    for (f, frame) in scene.dataset.frames.iter().enumerate() {
        for (c, (image, mask)) in frame.images.iter().zip(frame.masks.iter()).enumerate() {
            io::write_image_png(&images_dir.join(format!("f{f:03}_c{c:02}.png")), image)?;
            io::write_mask_png(&masks_dir.join(format!("f{f:03}_c{c:02}.png")), mask)?;
        }
        io::write_deformed_obj(&gt_dir.join(format!("f{f:03}.obj")), &scene.gt_meshes[f])?;
    }
    Ok(())
}

pub struct Models {
    pub mlp: RadianceMlp,
    pub encoder: FeatureEncoder,
    pub predictor: MotionPredictor,
}

pub fn build_models(scene: &SyntheticScene, config: &RunConfig) -> Result<Models> {
    let mlp = RadianceMlp::new(config.mlp_config(), derive_seed(&[config.seed, 1]));
    let encoder = match config.feature.encoder {
        EncoderKind::Grid => FeatureEncoder::Grid(GridEncoder::new(
            config.feature.resolution,
            config.feature.resolution,
            config.feature.dim,
        )),
        EncoderKind::Conv => {
            let in_channels = 3 * (scene.params.window_extent + 1);
            FeatureEncoder::Conv(
                ConvEncoder::new(
                    config.feature.resolution,
                    config.feature.resolution,
                    in_channels,
                    config.feature.dim,
                    derive_seed(&[config.seed, 2]),
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            )
        }
    };
    let predictor =
        MotionPredictor::new(&scene.template, scene.params.window_extent, derive_seed(&[config.seed, 3]));
    Ok(Models { mlp, encoder, predictor })
}

/// Texture stacks for the conv encoder: normal maps of the posed template
/// for every pose in the motion window (motion-dependent conditioning). The
/// grid encoder ignores stacks.
pub fn build_stacks(
    scene: &SyntheticScene,
    predictor: &MotionPredictor,
    config: &RunConfig,
) -> Result<Vec<Option<TextureStack>>> {
    if config.feature.encoder == EncoderKind::Grid {
        return Ok(vec![None; scene.dataset.frames.len()]);
    }
    let res = config.feature.resolution;
    let mut stacks = Vec::with_capacity(scene.dataset.frames.len());
    for frame in &scene.dataset.frames {
        let mut maps = Vec::with_capacity(frame.motion.window.len());
        for pose in &frame.motion.window {
            let single = SkeletalMotion::new(vec![pose.clone(); predictor.window_extent() + 1]);
            let mesh = character_forward(&scene.template, &scene.skeleton, predictor, &single)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let map = render_normal_map(&mesh, res);
            maps.push(shellnerf_core::field::FeatureTexture {
                width: res,
                height: res,
                channels: 3,
                texels: map.data,
            });
        }
        stacks.push(Some(TextureStack { maps }));
    }
    Ok(stacks)
}

fn loss_rows(stage: &str, outcome: &TrainOutcome) -> Vec<String> {
    outcome
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{stage},{i},{l}"))
        .collect()
}

fn eval_rows(stage: &str, outcome: &TrainOutcome) -> Vec<String> {
    outcome.evaluations.iter().map(|(b, p)| format!("{stage},{b},{p}")).collect()
}

fn snapshot_checkpoint(
    out: &Path,
    snap: &StageSnapshot,
    models: &Models,
) -> Result<PathBuf> {
    // Rebuild parameter-bearing structs from the snapshot for saving.
    let mut mlp = RadianceMlp::new(models.mlp.config, 0);
    mlp.params_mut().copy_from_slice(&snap.mlp_params);
    let mut encoder = models.encoder.clone();
    encoder.params_mut().copy_from_slice(&snap.encoder_params);
    let mut predictor = models.predictor.clone();
    predictor.delta_net.params_mut().copy_from_slice(&snap.delta_params);
    let path = out.join(format!("ckpt_cycle{}_{}.bin", snap.cycle, snap.name));
    io::save_checkpoint(&path, &snap.name, &mlp, &encoder, &predictor)?;
    Ok(path)
}

/// The `train` command: stage-1 only or the full alternating schedule.
/// Writes checkpoints, loss/psnr CSVs, and final held-out renders.
pub fn train_command(
    scene_dir: &Path,
    out_dir: &Path,
    config: &RunConfig,
    stage1_only: bool,
) -> Result<()> {
    config.validate()?;
    let scene = load_scene(scene_dir)?;
    fs::create_dir_all(out_dir)?;
    let mut models = build_models(&scene, config)?;
    let stacks = build_stacks(&scene, &models.predictor, config)?;
    let train_cfg = config.train_config();

    let mut loss_csv: Vec<String> = Vec::new();
    let mut psnr_csv: Vec<String> = Vec::new();

    if stage1_only {
        let meshes = pose_frames(&scene.template, &scene.skeleton, &models.predictor, &scene.dataset)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let outcome = train_field(
            &mut models.mlp,
            &mut models.encoder,
            &stacks,
            &meshes,
            &scene.dataset,
            &train_cfg,
            config.schedule.stage1_batches,
            derive_seed(&[config.seed, 0, 1]),
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let score = evaluate_heldout(&models.mlp, &models.encoder, &stacks, &meshes, &scene.dataset, &train_cfg)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        loss_csv.extend(loss_rows("stage1", &outcome));
        psnr_csv.extend(eval_rows("stage1", &outcome));
        psnr_csv.push(format!("stage1,final,{score}"));
        io::save_checkpoint(
            &out_dir.join("ckpt_cycle0_stage1.bin"),
            "stage1",
            &models.mlp,
            &models.encoder,
            &models.predictor,
        )?;
        render_heldout(out_dir, &scene, &models, &stacks, config)?;
    } else {
        let schedule = config.alternate_schedule();
        let report = alternate_training(
            &mut models.mlp,
            &mut models.encoder,
            &stacks,
            &mut models.predictor,
            &scene.template,
            &scene.skeleton,
            &scene.dataset,
            &train_cfg,
            &schedule,
            config.seed,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        for (cycle, outcome) in report.stage1.iter().enumerate() {
            loss_csv.extend(loss_rows(&format!("cycle{cycle}_stage1"), outcome));
            psnr_csv.extend(eval_rows(&format!("cycle{cycle}_stage1"), outcome));
        }
        for (cycle, outcome) in report.stage3.iter().enumerate() {
            loss_csv.extend(loss_rows(&format!("cycle{cycle}_stage3"), outcome));
            psnr_csv.extend(eval_rows(&format!("cycle{cycle}_stage3"), outcome));
        }
        for (cycle, refine) in report.refinements.iter().enumerate() {
            let rows: Vec<String> = refine
                .loss_curve
                .iter()
                .enumerate()
                .map(|(i, l)| format!("cycle{cycle}_refine,{i},{l}"))
                .collect();
            loss_csv.extend(rows);
        }
        for snap in &report.snapshots {
            psnr_csv.push(format!("cycle{}_{},final,{}", snap.cycle, snap.name, snap.heldout_psnr));
            snapshot_checkpoint(out_dir, snap, &models)?;
        }
        render_heldout(out_dir, &scene, &models, &stacks, config)?;
    }

    io::write_csv(&out_dir.join("loss.csv"), "stage,batch,loss", &loss_csv)?;
    io::write_csv(&out_dir.join("psnr.csv"), "stage,batch,psnr", &psnr_csv)?;
    Ok(())
}

fn render_heldout(
    out_dir: &Path,
    scene: &SyntheticScene,
    models: &Models,
    stacks: &[Option<TextureStack>],
    config: &RunConfig,
) -> Result<()> {
    let renders = out_dir.join("renders");
    fs::create_dir_all(&renders)?;
    let meshes = pose_frames(&scene.template, &scene.skeleton, &models.predictor, &scene.dataset)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (f, mesh) in meshes.iter().enumerate() {
        let texture = models.encoder.encode(stacks[f].as_ref()).map_err(|e| anyhow::anyhow!("{e}"))?;
        let field = NeuralField { mlp: &models.mlp };
        for &cam in &scene.dataset.heldout_cameras {
            let out = render_image(
                mesh,
                &texture,
                &field,
                &scene.dataset.cameras[cam],
                &config.shell,
                config.confidence_threshold,
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            io::write_image_png(&renders.join(format!("f{f:03}_c{cam:02}.png")), &out.image)?;
        }
    }
    Ok(())
}

/// The `render` command: renders frames and cameras from a checkpoint,
/// exporting images, pointclouds, optional depth maps and normal maps, and
/// a stats CSV.
pub fn render_command(
    scene_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    heldout_only: bool,
    with_depth: bool,
    with_normal_maps: bool,
    config: &RunConfig,
) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let ckpt = io::load_checkpoint(checkpoint)?;
    let predictor = io::restore_predictor(&ckpt, &scene.template)?;
    fs::create_dir_all(out_dir)?;
    let models = Models { mlp: ckpt.mlp, encoder: ckpt.encoder, predictor };
    let stacks = build_stacks(&scene, &models.predictor, config)?;
    let meshes = pose_frames(&scene.template, &scene.skeleton, &models.predictor, &scene.dataset)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let cams: Vec<usize> = if heldout_only {
        scene.dataset.heldout_cameras.clone()
    } else {
        (0..scene.dataset.cameras.len()).collect()
    };
    let mut stats_rows = Vec::new();
    for (f, mesh) in meshes.iter().enumerate() {
        let texture = models.encoder.encode(stacks[f].as_ref()).map_err(|e| anyhow::anyhow!("{e}"))?;
        let field = NeuralField { mlp: &models.mlp };
        if with_normal_maps {
            let map = render_normal_map(mesh, config.feature.resolution);
            io::write_normal_map_png(&out_dir.join(format!("normals_f{f:03}.png")), &map)?;
        }
        for &cam in &cams {
            let camera = &scene.dataset.cameras[cam];
            let start = Instant::now();
            let out: RenderResult =
                render_image(mesh, &texture, &field, camera, &config.shell, config.confidence_threshold)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            io::write_image_png(&out_dir.join(format!("f{f:03}_c{cam:02}.png")), &out.image)?;
            let mut points = Vec::new();
            let mut confidences = Vec::new();
            for entry in out.points.iter().flatten() {
                points.push(entry.0);
                confidences.push(entry.1);
            }
            io::write_ply(
                &out_dir.join(format!("points_f{f:03}_c{cam:02}.ply")),
                &TargetPointCloud { points, confidences },
            )?;
            if with_depth {
                let maps = shellnerf_core::meshops::DepthMaps::compute(mesh, camera, config.shell.kernel)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
                io::write_depth_binary(&out_dir.join(format!("depth_f{f:03}_c{cam:02}.bin")), &maps.depth)?;
                io::write_depth_png(&out_dir.join(format!("depth_f{f:03}_c{cam:02}.png")), &maps.depth)?;
            }
            stats_rows.push(format!(
                "{f},{cam},{},{},{ms:.3}",
                out.stats.foreground_rays, out.stats.field_evals
            ));
        }
    }
    io::write_csv(
        &out_dir.join("render_stats.csv"),
        "frame,camera,foreground_rays,field_evals,ms",
        &stats_rows,
    )?;
    Ok(())
}

/// The `refine` command: targets come from PLY files when `points_dir` is
/// given (the render command's exports), otherwise they are extracted from
/// the checkpointed field. Writes the refined checkpoint, a loss CSV, and
/// refined per-frame meshes.
pub fn refine_command(
    scene_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    points_dir: Option<&Path>,
    config: &RunConfig,
) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let ckpt = io::load_checkpoint(checkpoint)?;
    let mut predictor = io::restore_predictor(&ckpt, &scene.template)?;
    fs::create_dir_all(out_dir)?;
    let models = Models { mlp: ckpt.mlp, encoder: ckpt.encoder, predictor: predictor.clone() };
    let stacks = build_stacks(&scene, &models.predictor, config)?;
    let train_cfg = config.train_config();

    let frames: Vec<RefinementFrame> = match points_dir {
        Some(dir) => {
            let mut frames = Vec::new();
            for (f, frame) in scene.dataset.frames.iter().enumerate() {
                let mut views = Vec::new();
                for &cam in &scene.dataset.train_cameras {
                    let path = dir.join(format!("points_f{f:03}_c{cam:02}.ply"));
                    if !path.exists() {
                        continue;
                    }
                    let cloud = io::read_ply(&path)?;
                    if cloud.points.is_empty() {
                        continue;
                    }
                    views.push(RefinementView {
                        camera: scene.dataset.cameras[cam].clone(),
                        edt: mask_boundary_edt(&frame.masks[cam]),
                        cloud,
                    });
                }
                if views.is_empty() {
                    bail!("no pointclouds found for frame {f} under {}", dir.display());
                }
                frames.push(RefinementFrame { motion: frame.motion.clone(), views });
            }
            frames
        }
        None => {
            let meshes = pose_frames(&scene.template, &scene.skeleton, &models.predictor, &scene.dataset)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            extract_pointclouds(
                &models.mlp,
                &models.encoder,
                &stacks,
                &meshes,
                &scene.dataset,
                &train_cfg,
                config.refinement.points_per_view,
                derive_seed(&[config.seed, 20]),
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?
        }
    };

    let report = refine_displacements(
        &mut predictor,
        &scene.template,
        &scene.skeleton,
        &frames,
        &config.refinement,
        derive_seed(&[config.seed, 21]),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    let rows: Vec<String> =
        report.loss_curve.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
    io::write_csv(&out_dir.join("refine_loss.csv"), "iteration,loss", &rows)?;
    io::save_checkpoint(
        &out_dir.join("ckpt_refined.bin"),
        "refined",
        &models.mlp,
        &models.encoder,
        &predictor,
    )?;
    let meshes = pose_frames(&scene.template, &scene.skeleton, &predictor, &scene.dataset)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (f, mesh) in meshes.iter().enumerate() {
        io::write_deformed_obj(&out_dir.join(format!("refined_f{f:03}.obj")), mesh)?;
    }
    Ok(())
}

/// The `eval` command: PSNR of rendered PNGs against the scene ground truth
/// over the ground-truth masks.
pub fn eval_command(scene_dir: &Path, renders_dir: &Path, out_path: &Path) -> Result<()> {
    let scene = load_scene(scene_dir)?;
    let mut rows = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for (f, frame) in scene.dataset.frames.iter().enumerate() {
        for cam in 0..scene.dataset.cameras.len() {
            let path = renders_dir.join(format!("f{f:03}_c{cam:02}.png"));
            if !path.exists() {
                continue;
            }
            let rendered = io::read_image_png(&path)?;
            let score = psnr(&rendered, &frame.images[cam], &frame.masks[cam]);
            rows.push(format!("{f},{cam},{score}"));
            total += score;
            count += 1;
        }
    }
    if count == 0 {
        bail!("no renders found under {}", renders_dir.display());
    }
    rows.push(format!("mean,,{}", total / count as f64));
    io::write_csv(out_path, "frame,camera,psnr", &rows)?;
    Ok(())
}

/// Per-frame evaluation meshes for commands needing current geometry.
pub fn posed_meshes(scene: &SyntheticScene, predictor: &MotionPredictor) -> Result<Vec<DeformedMesh>> {
    let dataset: &Dataset = &scene.dataset;
    pose_frames(&scene.template, &scene.skeleton, predictor, dataset).map_err(|e| anyhow::anyhow!("{e}"))
}
