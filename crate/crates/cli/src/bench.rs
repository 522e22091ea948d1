//! Sampling-efficiency benchmark: shell-guided sampling at one or more
//! sample counts against a mesh-blind uniform baseline between global
//! near/far planes, reporting field evaluations per ray, PSNR, and wall
//! clock per frame.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Result;

use shellnerf_core::charmodel::DeformedMesh;
use shellnerf_core::field::FeatureTexture;
use shellnerf_core::meshops::{pixel_ray, Camera, MeshBvh};
use shellnerf_core::render::{
    composite, psnr, queries_for_samples, render_image, Image, QueryBatch, RadianceField, Ray,
    RaySampleSet, ShellConfig,
};

use crate::config::RunConfig;
use crate::io;
use crate::scene::SyntheticScene;

/// One benchmark configuration result.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub name: String,
    pub evals_per_ray: usize,
    pub psnr: f64,
    pub ms_per_frame: f64,
}

/// Renders one view with the baseline sampler: every pixel, a fixed number
/// of uniform samples between the global near/far planes, no mesh guidance.
pub fn render_baseline<F: RadianceField>(
    mesh: &DeformedMesh,
    texture: &FeatureTexture,
    field: &F,
    camera: &Camera,
    shell: &ShellConfig,
    near: f64,
    far: f64,
    samples: usize,
) -> Result<Image> {
    let bvh = MeshBvh::build(mesh).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut image = Image::black(camera.width, camera.height);
    let boundaries: Vec<f64> = (0..=samples)
        .map(|i| near + (far - near) * i as f64 / samples as f64)
        .collect();
    for row in 0..camera.height {
        for col in 0..camera.width {
            let (origin, dir) = pixel_ray(camera, col as f64 + 0.5, row as f64 + 0.5);
            let mut samples_set =
                RaySampleSet::new(Ray { origin, dir }, boundaries.clone(), None);
            let mut queries = QueryBatch::new(texture.channels);
            queries_for_samples(&bvh, texture, shell.t_mi, shell.t_ma, &samples_set, &mut queries);
            let mut rgb = Vec::new();
            let mut sigma = Vec::new();
            field.eval_batch(&queries, &mut rgb, &mut sigma);
            for i in 0..samples_set.sample_count() {
                samples_set.colors[i] = [rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]];
                samples_set.sigmas[i] = sigma[i];
            }
            let px = composite(&mut samples_set);
            image.set(row, col, px.color);
        }
    }
    Ok(image)
}

/// Global near/far planes from the mesh bounds across all benchmark cameras.
pub fn global_near_far(meshes: &[&DeformedMesh], cameras: &[&Camera]) -> (f64, f64) {
    let mut near = f64::INFINITY;
    let mut far = 0.0f64;
    for mesh in meshes {
        for camera in cameras {
            for v in &mesh.vertices {
                let z = camera.to_camera(*v).z;
                near = near.min(z);
                far = far.max(z);
            }
        }
    }
    ((near - 0.1).max(1e-3), far + 0.1)
}

/// The number of uniform baseline samples: a coarse pass of 64 plus a fine
/// pass of 128.
pub const BASELINE_SAMPLES: usize = 192;

/// Runs the benchmark over the scene's held-out cameras on frame 0.
pub fn run_bench<F: RadianceField>(
    scene: &SyntheticScene,
    mesh: &DeformedMesh,
    texture: &FeatureTexture,
    field: &F,
    config: &RunConfig,
) -> Result<Vec<BenchRow>> {
    let frame = &scene.dataset.frames[0];
    let eval_cams: Vec<usize> = scene.dataset.heldout_cameras.clone();
    anyhow::ensure!(!eval_cams.is_empty(), "bench needs held-out cameras");

    let mut rows = Vec::new();
    for s in [config.shell.samples, config.shell.samples * 2] {
        let shell = ShellConfig { samples: s, ..config.shell };
        let start = Instant::now();
        let mut total = 0.0;
        for &cam in &eval_cams {
            let out = render_image(
                mesh,
                texture,
                field,
                &scene.dataset.cameras[cam],
                &shell,
                config.confidence_threshold,
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            total += psnr(&out.image, &frame.images[cam], &frame.masks[cam]);
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / eval_cams.len() as f64;
        rows.push(BenchRow {
            name: format!("shell_s{s}"),
            evals_per_ray: s,
            psnr: total / eval_cams.len() as f64,
            ms_per_frame: ms,
        });
    }

    let cams: Vec<&Camera> = eval_cams.iter().map(|&c| &scene.dataset.cameras[c]).collect();
    let (near, far) = global_near_far(&[mesh], &cams);
    let start = Instant::now();
    let mut total = 0.0;
    for &cam in &eval_cams {
        let image = render_baseline(
            mesh,
            texture,
            field,
            &scene.dataset.cameras[cam],
            &config.shell,
            near,
            far,
            BASELINE_SAMPLES,
        )?;
        total += psnr(&image, &frame.images[cam], &frame.masks[cam]);
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / eval_cams.len() as f64;
    rows.push(BenchRow {
        name: format!("baseline_u{BASELINE_SAMPLES}"),
        evals_per_ray: BASELINE_SAMPLES,
        psnr: total / eval_cams.len() as f64,
        ms_per_frame: ms,
    });
    Ok(rows)
}

/// Writes `bench.csv` (with timing) and `bench_metrics.csv` (the
/// deterministic columns only).
pub fn write_bench_csvs(out_dir: &Path, rows: &[BenchRow]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let full: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{:.3}", r.name, r.evals_per_ray, r.psnr, r.ms_per_frame))
        .collect();
    io::write_csv(&out_dir.join("bench.csv"), "name,evals_per_ray,psnr,ms_per_frame", &full)?;
    let metrics: Vec<String> =
        rows.iter().map(|r| format!("{},{},{}", r.name, r.evals_per_ray, r.psnr)).collect();
    io::write_csv(&out_dir.join("bench_metrics.csv"), "name,evals_per_ray,psnr", &metrics)?;
    Ok(())
}
