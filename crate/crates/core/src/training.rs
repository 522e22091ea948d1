//! Training orchestration: the ray-batch color-supervision loop for the
//! feature encoder and radiance MLP (geometry frozen), density-weighted
//! pointcloud extraction, and the alternating schedule that couples field
//! training with displacement refinement.
//!
//! Ray batches are split into fixed-size chunks; chunk gradient buffers merge
//! in chunk order, so results are identical with and without `rayon` worker
//! threads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::charmodel::{
    character_forward, CharModelError, DeformedMesh, MotionPredictor, SkeletalMotion, Skeleton,
    TemplateMesh,
};
use crate::field::{FeatureEncoder, FieldError, RadianceMlp, TextureStack};
use crate::math::derive_seed;
use crate::meshops::{Camera, MeshBvh, MeshOpsError};
use crate::nn::Adam;
use crate::refine::{
    mask_boundary_edt, refine_displacements, RefineError, RefineReport, RefinementConfig,
    RefinementFrame, RefinementView, TargetPointCloud,
};
use crate::render::{
    build_ray_samples, color_loss, color_loss_grad, composite, composite_backward,
    psnr, Image, Mask, NeuralField, QueryBatch, RenderContext, RenderError, ShellConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Config(String),
    NanLoss { batch: usize },
    Render(RenderError),
    Refine(RefineError),
    CharModel(CharModelError),
    Field(FieldError),
    MeshOps(MeshOpsError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "training: invalid configuration: {m}"),
            TrainError::NanLoss { batch } => write!(f, "training: NaN loss at batch {batch}"),
            TrainError::Render(e) => write!(f, "training: {e}"),
            TrainError::Refine(e) => write!(f, "training: {e}"),
            TrainError::CharModel(e) => write!(f, "training: {e}"),
            TrainError::Field(e) => write!(f, "training: {e}"),
            TrainError::MeshOps(e) => write!(f, "training: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<RenderError> for TrainError {
    fn from(e: RenderError) -> Self {
        TrainError::Render(e)
    }
}

impl From<RefineError> for TrainError {
    fn from(e: RefineError) -> Self {
        TrainError::Refine(e)
    }
}

impl From<CharModelError> for TrainError {
    fn from(e: CharModelError) -> Self {
        TrainError::CharModel(e)
    }
}

impl From<FieldError> for TrainError {
    fn from(e: FieldError) -> Self {
        TrainError::Field(e)
    }
}

impl From<MeshOpsError> for TrainError {
    fn from(e: MeshOpsError) -> Self {
        TrainError::MeshOps(e)
    }
}

/// Ground-truth views of one frame, indexed by camera.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub motion: SkeletalMotion,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
}

/// A multi-view dataset with a train/held-out camera split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameData>,
    pub train_cameras: Vec<usize>,
    pub heldout_cameras: Vec<usize>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.frames.is_empty() {
            return Err(TrainError::Config(String::from("dataset has no frames")));
        }
        if self.train_cameras.is_empty() {
            return Err(TrainError::Config(String::from("dataset has no training cameras")));
        }
        for frame in &self.frames {
            if frame.images.len() != self.cameras.len() || frame.masks.len() != self.cameras.len() {
                return Err(TrainError::Config(String::from("frame view count does not match cameras")));
            }
        }
        for &c in self.train_cameras.iter().chain(self.heldout_cameras.iter()) {
            if c >= self.cameras.len() {
                return Err(TrainError::Config(format!("camera index {c} out of range")));
            }
        }
        Ok(())
    }
}

/// Field-training hyperparameters; defaults are the production values.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub shell: ShellConfig,
    pub learning_rate: f64,
    pub batch_rays: usize,
    pub confidence_threshold: f64,
    /// Batches between held-out evaluations; 0 evaluates only on request.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shell: ShellConfig::default(),
            learning_rate: 0.0005,
            batch_rays: 1024,
            confidence_threshold: 0.5,
            eval_interval: 0,
        }
    }
}

/// Frozen per-(frame, camera) structures for one training stage.
struct FrameContext {
    bvh: MeshBvh,
    /// One render context and foreground pixel list per training camera.
    contexts: Vec<RenderContext>,
    foreground: Vec<Vec<(usize, usize)>>,
}

fn build_frame_contexts(
    meshes: &[DeformedMesh],
    dataset: &Dataset,
    shell: &ShellConfig,
) -> Result<Vec<FrameContext>, TrainError> {
    let mut out = Vec::with_capacity(meshes.len());
    for mesh in meshes {
        let bvh = MeshBvh::build(mesh)?;
        let mut contexts = Vec::new();
        let mut foreground = Vec::new();
        for &cam_idx in &dataset.train_cameras {
            let ctx = RenderContext::new(mesh, &dataset.cameras[cam_idx], shell)?;
            foreground.push(ctx.foreground_pixels());
            contexts.push(ctx);
        }
        out.push(FrameContext { bvh, contexts, foreground });
    }
    Ok(out)
}

/// One training ray: frame, train-camera slot, pixel, and its jitter stream.
#[derive(Clone, Copy)]
struct RayTicket {
    frame: usize,
    cam_slot: usize,
    row: usize,
    col: usize,
    jitter_seed: u64,
}

/// Per-batch loss record.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    /// Mean per-ray L1 color loss per batch.
    pub loss_curve: Vec<f64>,
    /// (batch index, held-out PSNR) at every evaluation point.
    pub evaluations: Vec<(usize, f64)>,
}

/// Trains the feature encoder and the radiance MLP with frozen geometry by
/// Adam on the L1 color loss over jittered shell samples.
pub fn train_field(
    mlp: &mut RadianceMlp,
    encoder: &mut FeatureEncoder,
    stacks: &[Option<TextureStack>],
    meshes: &[DeformedMesh],
    dataset: &Dataset,
    cfg: &TrainConfig,
    batches: usize,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    dataset.validate()?;
    cfg.shell.validate()?;
    if meshes.len() != dataset.frames.len() || stacks.len() != dataset.frames.len() {
        return Err(TrainError::Config(String::from("per-frame meshes/stacks must match the dataset")));
    }
    if encoder.feature_dim() != mlp.config.feature_dim {
        return Err(TrainError::Config(format!(
            "encoder produces {} channels, field expects {}",
            encoder.feature_dim(),
            mlp.config.feature_dim
        )));
    }
    let frame_contexts = build_frame_contexts(meshes, dataset, &cfg.shell)?;
    for (f, fc) in frame_contexts.iter().enumerate() {
        if fc.foreground.iter().all(|fg| fg.is_empty()) {
            return Err(TrainError::Config(format!("frame {f} has no foreground pixels")));
        }
    }

    let mut mlp_adam = Adam::new(mlp.param_len(), cfg.learning_rate);
    let mut enc_adam = Adam::new(encoder.param_len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x747261696e]));
    let mut outcome = TrainOutcome::default();

    for batch_idx in 0..batches {
        // One frame per batch, pixels drawn across its training cameras.
        let frame = rng.gen_range(0..dataset.frames.len());
        let fc = &frame_contexts[frame];
        let texture = encoder.encode(stacks[frame].as_ref())?;
        let mut tickets = Vec::with_capacity(cfg.batch_rays);
        for _ in 0..cfg.batch_rays {
            let cam_slot = rng.gen_range(0..fc.contexts.len());
            let fg = &fc.foreground[cam_slot];
            if fg.is_empty() {
                continue;
            }
            let (row, col) = fg[rng.gen_range(0..fg.len())];
            let jitter_seed = derive_seed(&[
                seed,
                frame as u64,
                dataset.train_cameras[cam_slot] as u64,
                (row * 100_000 + col) as u64,
                batch_idx as u64,
            ]);
            tickets.push(RayTicket { frame, cam_slot, row, col, jitter_seed });
        }
        if tickets.is_empty() {
            continue;
        }

        let step = process_batch(mlp, encoder, &texture, fc, dataset, cfg, &tickets)?;
        if !step.loss.is_finite() {
            return Err(TrainError::NanLoss { batch: batch_idx });
        }
        mlp_adam.step(mlp.params_mut(), &step.mlp_grads);
        let enc_grads = encoder.encode_backward(stacks[frame].as_ref(), &step.texel_grads)?;
        enc_adam.step(encoder.params_mut(), &enc_grads);
        outcome.loss_curve.push(step.loss);

        if cfg.eval_interval > 0 && (batch_idx + 1) % cfg.eval_interval == 0 {
            let score = evaluate_heldout(mlp, encoder, stacks, meshes, dataset, cfg)?;
            outcome.evaluations.push((batch_idx + 1, score));
        }
    }
    Ok(outcome)
}

struct BatchStep {
    loss: f64,
    mlp_grads: Vec<f64>,
    texel_grads: Vec<f64>,
}

/// Fixed chunk size for deterministic parallel gradient accumulation.
const TRAIN_CHUNK_RAYS: usize = 16;

fn process_batch(
    mlp: &RadianceMlp,
    encoder: &FeatureEncoder,
    texture: &crate::field::FeatureTexture,
    fc: &FrameContext,
    dataset: &Dataset,
    cfg: &TrainConfig,
    tickets: &[RayTicket],
) -> Result<BatchStep, TrainError> {
    let inv_rays = 1.0 / tickets.len() as f64;
    let chunks: Vec<&[RayTicket]> = tickets.chunks(TRAIN_CHUNK_RAYS).collect();
    let run_chunk = |chunk: &&[RayTicket]| -> Result<BatchStep, TrainError> {
        let mut queries = QueryBatch::new(texture.channels);
        let mut sets = Vec::with_capacity(chunk.len());
        let mut truths = Vec::with_capacity(chunk.len());
        for t in chunk.iter() {
            let mut jitter = ChaCha8Rng::seed_from_u64(t.jitter_seed);
            let samples = build_ray_samples(
                &fc.contexts[t.cam_slot],
                &fc.bvh,
                texture,
                &cfg.shell,
                t.row,
                t.col,
                Some(&mut jitter),
                &mut queries,
            )?;
            sets.push(samples);
            let cam_idx = dataset.train_cameras[t.cam_slot];
            truths.push(dataset.frames[t.frame].images[cam_idx].at(t.row, t.col));
        }
        let batch = NeuralField::encode_batch(mlp, &queries);
        let (rgb, sigma, cache) = mlp.forward_batch(&batch, true);
        let cache = cache.expect("cache requested");

        let mut loss = 0.0;
        let mut grad_rgb = vec![0.0; queries.count * 3];
        let mut grad_sigma = vec![0.0; queries.count];
        let mut cursor = 0usize;
        for (samples, truth) in sets.iter_mut().zip(truths.iter()) {
            let n = samples.sample_count();
            for i in 0..n {
                samples.colors[i] =
                    [rgb[3 * (cursor + i)], rgb[3 * (cursor + i) + 1], rgb[3 * (cursor + i) + 2]];
                samples.sigmas[i] = sigma[cursor + i];
            }
            let px = composite(samples);
            loss += color_loss(px.color, *truth);
            let up = color_loss_grad(px.color, *truth);
            let up = [up[0] * inv_rays, up[1] * inv_rays, up[2] * inv_rays];
            let (gs, gc) = composite_backward(
                &samples.deltas,
                &samples.colors,
                &samples.alphas,
                &samples.transmittances,
                &samples.weights,
                up,
                0.0,
            );
            for i in 0..n {
                grad_sigma[cursor + i] = gs[i];
                grad_rgb[3 * (cursor + i)] = gc[i][0];
                grad_rgb[3 * (cursor + i) + 1] = gc[i][1];
                grad_rgb[3 * (cursor + i) + 2] = gc[i][2];
            }
            cursor += n;
        }
        let grads = mlp.backward_batch(&cache, &grad_rgb, &grad_sigma);

        // Chain the surface-feature gradients onto the texel grid.
        let mut texel_grads = vec![0.0; texture.texels.len()];
        let total = mlp.config.input_dim();
        let fdim = mlp.config.feature_dim;
        for i in 0..queries.count {
            let gfeat = &grads.inputs[i * total..i * total + fdim];
            crate::field::sample_feature_texture_backward(
                texture.width,
                texture.height,
                texture.channels,
                queries.uvs[i],
                gfeat,
                &mut texel_grads,
            );
        }
        Ok(BatchStep { loss, mlp_grads: grads.params, texel_grads })
    };

    #[cfg(feature = "rayon")]
    let partials: Vec<Result<BatchStep, TrainError>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run_chunk).collect()
    };
    #[cfg(not(feature = "rayon"))]
    let partials: Vec<Result<BatchStep, TrainError>> = chunks.iter().map(run_chunk).collect();

    let mut merged = BatchStep {
        loss: 0.0,
        mlp_grads: vec![0.0; mlp.param_len()],
        texel_grads: vec![0.0; texture.texels.len()],
    };
    let _ = encoder;
    for partial in partials {
        let p = partial?;
        merged.loss += p.loss;
        for (a, b) in merged.mlp_grads.iter_mut().zip(p.mlp_grads.iter()) {
            *a += b;
        }
        for (a, b) in merged.texel_grads.iter_mut().zip(p.texel_grads.iter()) {
            *a += b;
        }
    }
    merged.loss *= inv_rays;
    Ok(merged)
}

/// Mean held-out PSNR over all frames and held-out cameras, masked by the
/// ground-truth foreground.
pub fn evaluate_heldout(
    mlp: &RadianceMlp,
    encoder: &FeatureEncoder,
    stacks: &[Option<TextureStack>],
    meshes: &[DeformedMesh],
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (f, frame) in dataset.frames.iter().enumerate() {
        let texture = encoder.encode(stacks[f].as_ref())?;
        let field = NeuralField { mlp };
        for &cam_idx in &dataset.heldout_cameras {
            let out = crate::render::render_image(
                &meshes[f],
                &texture,
                &field,
                &dataset.cameras[cam_idx],
                &cfg.shell,
                cfg.confidence_threshold,
            )?;
            total += psnr(&out.image, &frame.images[cam_idx], &frame.masks[cam_idx]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::Config(String::from("no held-out cameras to evaluate")));
    }
    Ok(total / count as f64)
}

/// Extracts per-(frame, view) target pointclouds from the trained field by
/// sampling up to `points_per_view` foreground rays and keeping reliable
/// points with their compositing confidences.
pub fn extract_pointclouds(
    mlp: &RadianceMlp,
    encoder: &FeatureEncoder,
    stacks: &[Option<TextureStack>],
    meshes: &[DeformedMesh],
    dataset: &Dataset,
    cfg: &TrainConfig,
    points_per_view: usize,
    seed: u64,
) -> Result<Vec<RefinementFrame>, TrainError> {
    dataset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x706f696e7473]));
    let mut frames = Vec::with_capacity(dataset.frames.len());
    for (f, frame) in dataset.frames.iter().enumerate() {
        let texture = encoder.encode(stacks[f].as_ref())?;
        let field = NeuralField { mlp };
        let bvh = MeshBvh::build(&meshes[f])?;
        let mut views = Vec::new();
        for &cam_idx in &dataset.train_cameras {
            let camera = &dataset.cameras[cam_idx];
            let ctx = RenderContext::new(&meshes[f], camera, &cfg.shell)?;
            let mut fg = ctx.foreground_pixels();
            if fg.is_empty() {
                continue;
            }
            // Sample without replacement up to the requested count.
            let take = points_per_view.min(fg.len());
            for i in 0..take {
                let j = rng.gen_range(i..fg.len());
                fg.swap(i, j);
            }
            fg.truncate(take);
            let rendered = crate::render::render_pixels(
                &ctx,
                &bvh,
                &texture,
                &field,
                &cfg.shell,
                &fg,
                cfg.confidence_threshold,
            )?;
            let mut points = Vec::new();
            let mut confidences = Vec::new();
            for px in rendered {
                if let Some(p) = px.surface_point {
                    points.push(p);
                    confidences.push(px.accumulated_weight);
                }
            }
            if points.is_empty() {
                continue;
            }
            views.push(RefinementView {
                camera: camera.clone(),
                edt: mask_boundary_edt(&frame.masks[cam_idx]),
                cloud: TargetPointCloud { points, confidences },
            });
        }
        frames.push(RefinementFrame { motion: frame.motion.clone(), views });
    }
    Ok(frames)
}

/// Evaluates the current predictor into per-frame deformed meshes.
pub fn pose_frames(
    template: &TemplateMesh,
    skeleton: &Skeleton,
    predictor: &MotionPredictor,
    dataset: &Dataset,
) -> Result<Vec<DeformedMesh>, TrainError> {
    dataset
        .frames
        .iter()
        .map(|f| character_forward(template, skeleton, predictor, &f.motion).map_err(TrainError::from))
        .collect()
}

/// Alternating schedule: per cycle, (1) train encoder + field on frozen
/// geometry, (2) extract pointclouds and refine the displacement network,
/// (3) retrain the field on the refined geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlternateSchedule {
    pub cycles: usize,
    pub stage1_batches: usize,
    pub stage3_batches: usize,
    pub refinement: RefinementConfig,
}

impl Default for AlternateSchedule {
    fn default() -> Self {
        AlternateSchedule {
            cycles: 1,
            stage1_batches: 20_000,
            stage3_batches: 10_000,
            refinement: RefinementConfig::default(),
        }
    }
}

/// Parameter snapshot taken after a stage, with its held-out PSNR.
#[derive(Clone, Debug)]
pub struct StageSnapshot {
    pub name: String,
    pub cycle: usize,
    pub mlp_params: Vec<f64>,
    pub encoder_params: Vec<f64>,
    pub delta_params: Vec<f64>,
    pub heldout_psnr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AlternateReport {
    pub snapshots: Vec<StageSnapshot>,
    pub stage1: Vec<TrainOutcome>,
    pub stage3: Vec<TrainOutcome>,
    pub refinements: Vec<RefineReport>,
}

pub fn alternate_training(
    mlp: &mut RadianceMlp,
    encoder: &mut FeatureEncoder,
    stacks: &[Option<TextureStack>],
    predictor: &mut MotionPredictor,
    template: &TemplateMesh,
    skeleton: &Skeleton,
    dataset: &Dataset,
    cfg: &TrainConfig,
    schedule: &AlternateSchedule,
    seed: u64,
) -> Result<AlternateReport, TrainError> {
    let mut report = AlternateReport::default();
    for cycle in 0..schedule.cycles {
        let stage_seed = derive_seed(&[seed, cycle as u64]);

        // Stage 1: field on frozen geometry.
        let meshes = pose_frames(template, skeleton, predictor, dataset)?;
        let outcome = train_field(
            mlp,
            encoder,
            stacks,
            &meshes,
            dataset,
            cfg,
            schedule.stage1_batches,
            derive_seed(&[stage_seed, 1]),
        )?;
        let psnr1 = evaluate_heldout(mlp, encoder, stacks, &meshes, dataset, cfg)?;
        report.stage1.push(outcome);
        report.snapshots.push(snapshot("stage1", cycle, mlp, encoder, predictor, psnr1));

        // Stage 2: pointclouds from the trained field, then refinement of
        // the displacement network (embedded graph net stays frozen).
        let frames = extract_pointclouds(
            mlp,
            encoder,
            stacks,
            &meshes,
            dataset,
            cfg,
            schedule.refinement.points_per_view,
            derive_seed(&[stage_seed, 2]),
        )?;
        let refine_report = refine_displacements(
            predictor,
            template,
            skeleton,
            &frames,
            &schedule.refinement,
            derive_seed(&[stage_seed, 3]),
        )?;
        report.refinements.push(refine_report);
        let refined_meshes = pose_frames(template, skeleton, predictor, dataset)?;
        let psnr2 = evaluate_heldout(mlp, encoder, stacks, &refined_meshes, dataset, cfg)?;
        report.snapshots.push(snapshot("stage2", cycle, mlp, encoder, predictor, psnr2));

        // Stage 3: field retrained on the refined geometry, continuing from
        // the stage-1 parameters.
        let outcome = train_field(
            mlp,
            encoder,
            stacks,
            &refined_meshes,
            dataset,
            cfg,
            schedule.stage3_batches,
            derive_seed(&[stage_seed, 4]),
        )?;
        let psnr3 = evaluate_heldout(mlp, encoder, stacks, &refined_meshes, dataset, cfg)?;
        report.stage3.push(outcome);
        report.snapshots.push(snapshot("stage3", cycle, mlp, encoder, predictor, psnr3));
    }
    Ok(report)
}

fn snapshot(
    name: &str,
    cycle: usize,
    mlp: &RadianceMlp,
    encoder: &FeatureEncoder,
    predictor: &MotionPredictor,
    heldout_psnr: f64,
) -> StageSnapshot {
    StageSnapshot {
        name: String::from(name),
        cycle,
        mlp_params: mlp.params().to_vec(),
        encoder_params: encoder.params().to_vec(),
        delta_params: predictor.delta_net.params().to_vec(),
        heldout_psnr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charmodel::tests::{quad_template, rigid_skeleton};
    use crate::charmodel::SkeletalPose;
    use crate::field::{GridEncoder, RadianceMlpConfig};
    use crate::math::{Mat3, Vec3};

    fn tiny_mlp_config() -> RadianceMlpConfig {
        RadianceMlpConfig {
            feature_dim: 4,
            distance_frequencies: 4,
            view_frequencies: 2,
            trunk_depth: 4,
            trunk_width: 16,
            view_depth: 2,
            view_width: 8,
            skip_every: 4,
        }
    }

    /// One-frame dataset: the unit quad at z=0 seen by a camera 2 m behind,
    /// ground truth a flat gray square.
    fn quad_dataset(value: f64) -> (Dataset, Vec<DeformedMesh>) {
        let template = quad_template();
        let mesh = DeformedMesh::from_vertices(template.rest_vertices.clone(), template.topology.clone());
        let cam = Camera {
            intrinsics: Mat3 { m: [24.0, 0.0, 12.0, 0.0, 24.0, 12.0, 0.0, 0.0, 1.0] },
            rotation: Mat3::IDENTITY,
            translation: Vec3::new(-0.5, -0.5, 2.0),
            width: 24,
            height: 24,
        };
        let mut image = Image::black(24, 24);
        let mut mask = Mask::empty(24, 24);
        for (i, px) in image.data.iter_mut().enumerate() {
            *px = [value; 3];
            mask.data[i] = true;
        }
        let dataset = Dataset {
            cameras: vec![cam.clone(), cam],
            frames: vec![FrameData {
                motion: SkeletalMotion::new(vec![SkeletalPose::identity()]),
                images: vec![image.clone(), image],
                masks: vec![mask.clone(), mask],
            }],
            train_cameras: vec![0],
            heldout_cameras: vec![1],
        };
        (dataset, vec![mesh])
    }

    #[test]
    fn train_field_reduces_loss_on_flat_target() {
        let (dataset, meshes) = quad_dataset(0.8);
        let mut mlp = RadianceMlp::new(tiny_mlp_config(), 3);
        let mut encoder = FeatureEncoder::Grid(GridEncoder::new(8, 8, 4));
        let cfg = TrainConfig {
            batch_rays: 16,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let out = train_field(
            &mut mlp,
            &mut encoder,
            &[None],
            &meshes,
            &dataset,
            &cfg,
            120,
            9,
        )
        .unwrap();
        let early: f64 = out.loss_curve[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = out.loss_curve[out.loss_curve.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(late < 0.6 * early, "loss should fall: {early} -> {late}");
    }

    #[test]
    fn train_field_is_deterministic() {
        let (dataset, meshes) = quad_dataset(0.4);
        let cfg = TrainConfig { batch_rays: 8, ..TrainConfig::default() };
        let run = || {
            let mut mlp = RadianceMlp::new(tiny_mlp_config(), 3);
            let mut encoder = FeatureEncoder::Grid(GridEncoder::new(8, 8, 4));
            let out =
                train_field(&mut mlp, &mut encoder, &[None], &meshes, &dataset, &cfg, 20, 11).unwrap();
            (out.loss_curve, mlp.params().to_vec())
        };
        let (curve_a, params_a) = run();
        let (curve_b, params_b) = run();
        assert_eq!(curve_a, curve_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn zero_cycle_schedule_is_identity() {
        let (dataset, _) = quad_dataset(0.5);
        let template = quad_template();
        let skeleton = rigid_skeleton();
        let mut mlp = RadianceMlp::new(tiny_mlp_config(), 1);
        let mut encoder = FeatureEncoder::Grid(GridEncoder::new(8, 8, 4));
        let mut predictor = MotionPredictor::new(&template, 0, 2);
        let mlp_before = mlp.params().to_vec();
        let enc_before = encoder.params().to_vec();
        let delta_before = predictor.delta_net.params().to_vec();
        let schedule = AlternateSchedule { cycles: 0, ..AlternateSchedule::default() };
        let report = alternate_training(
            &mut mlp,
            &mut encoder,
            &[None],
            &mut predictor,
            &template,
            &skeleton,
            &dataset,
            &TrainConfig::default(),
            &schedule,
            5,
        )
        .unwrap();
        assert!(report.snapshots.is_empty());
        assert_eq!(mlp.params(), &mlp_before[..]);
        assert_eq!(encoder.params(), &enc_before[..]);
        assert_eq!(predictor.delta_net.params(), &delta_before[..]);
    }

    #[test]
    fn extract_pointclouds_lands_near_the_quad() {
        let (dataset, meshes) = quad_dataset(0.5);
        // A strongly opaque field at the surface puts the extracted points
        // on the quad plane z = 0.
        let mlp = RadianceMlp::new(tiny_mlp_config(), 7);
        let encoder = FeatureEncoder::Grid(GridEncoder::new(8, 8, 4));
        // Use the occupancy test field through the neural extraction path by
        // rendering manually instead; here we only exercise the plumbing and
        // confidence filtering with the untrained (nearly transparent) MLP.
        let frames = extract_pointclouds(
            &mlp,
            &encoder,
            &[None],
            &meshes,
            &dataset,
            &TrainConfig::default(),
            64,
            3,
        )
        .unwrap();
        assert_eq!(frames.len(), 1);
        // The untrained field has sigma = softplus(~0) which is opaque over
        // many samples, so extraction produces points; every returned point
        // must be finite with confidence in (0, 1].
        for view in &frames[0].views {
            for (p, &c) in view.cloud.points.iter().zip(view.cloud.confidences.iter()) {
                assert!(p.is_finite());
                assert!(c > 0.0 && c <= 1.0 + 1e-12);
            }
        }
    }
}
