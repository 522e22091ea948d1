//! File formats: OBJ templates with a JSON rig sidecar, binary PLY
//! pointclouds, float-binary and 16-bit-PNG depth maps, 8-bit PNG images,
//! normal maps, parameter checkpoints (JSON manifest + raw f64 blob), and
//! deterministic CSV writers.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use shellnerf_core::charmodel::{
    DeformedMesh, MeshTopology, MotionPredictor, NormalMap, Skeleton, TemplateMesh,
};
use shellnerf_core::field::{ConvEncoder, FeatureEncoder, GridEncoder, RadianceMlp, RadianceMlpConfig};
use shellnerf_core::math::Vec3;
use shellnerf_core::meshops::{Camera, DepthMap};
use shellnerf_core::refine::TargetPointCloud;
use shellnerf_core::render::{Image, Mask};

use crate::scene::SceneParams;

// ---------------------------------------------------------------------------
// OBJ + rig sidecar

/// Writes vertices, per-corner UVs, and faces of a mesh as Wavefront OBJ.
pub fn write_obj(path: &Path, vertices: &[Vec3], topology: &MeshTopology) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for v in vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for uvs in &topology.corner_uvs {
        for uv in uvs {
            writeln!(w, "vt {} {}", uv[0], uv[1])?;
        }
    }
    for (t_idx, tri) in topology.triangles.iter().enumerate() {
        let vt = t_idx * 3;
        writeln!(
            w,
            "f {}/{} {}/{} {}/{}",
            tri[0] + 1,
            vt + 1,
            tri[1] + 1,
            vt + 2,
            tri[2] + 1,
            vt + 3
        )?;
    }
    Ok(())
}

/// Reads an OBJ with positions, UVs, and triangular `v/vt` faces.
pub fn read_obj(path: &Path) -> Result<(Vec<Vec3>, MeshTopology)> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let mut vertices = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut triangles = Vec::new();
    let mut corner_uvs = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut take = || -> Result<f64> {
                    parts
                        .next()
                        .with_context(|| format!("line {}: vertex needs 3 coords", line_no + 1))?
                        .parse::<f64>()
                        .map_err(Into::into)
                };
                vertices.push(Vec3::new(take()?, take()?, take()?));
            }
            Some("vt") => {
                let u: f64 = parts.next().context("vt needs 2 coords")?.parse()?;
                let v: f64 = parts.next().context("vt needs 2 coords")?.parse()?;
                uvs.push([u, v]);
            }
            Some("f") => {
                let mut vi = [0usize; 3];
                let mut ti = [0usize; 3];
                for corner in 0..3 {
                    let item = parts
                        .next()
                        .with_context(|| format!("line {}: face needs 3 corners", line_no + 1))?;
                    let mut idx = item.split('/');
                    vi[corner] = idx.next().context("face corner")?.parse::<usize>()? - 1;
                    ti[corner] = match idx.next() {
                        Some(t) if !t.is_empty() => t.parse::<usize>()? - 1,
                        _ => bail!("line {}: face corners need v/vt indices", line_no + 1),
                    };
                }
                triangles.push(vi);
                corner_uvs.push([uvs[ti[0]], uvs[ti[1]], uvs[ti[2]]]);
            }
            _ => {}
        }
    }
    Ok((vertices, MeshTopology { triangles, corner_uvs }))
}

/// Rig sidecar: everything a template carries beyond raw geometry.
#[derive(Serialize, Deserialize)]
pub struct RigSidecar {
    pub schema_version: u32,
    pub skeleton: Skeleton,
    pub joint_count: usize,
    pub skinning_weights: Vec<f64>,
    pub graph_nodes: Vec<usize>,
    pub node_weights: Vec<f64>,
    pub node_neighbors: Vec<Vec<usize>>,
}

pub fn write_template(dir: &Path, template: &TemplateMesh, skeleton: &Skeleton) -> Result<()> {
    write_obj(&dir.join("template.obj"), &template.rest_vertices, &template.topology)?;
    let rig = RigSidecar {
        schema_version: 1,
        skeleton: skeleton.clone(),
        joint_count: template.joint_count,
        skinning_weights: template.skinning_weights.clone(),
        graph_nodes: template.graph_nodes.clone(),
        node_weights: template.node_weights.clone(),
        node_neighbors: template.node_neighbors.clone(),
    };
    fs::write(dir.join("rig.json"), serde_json::to_vec_pretty(&rig)?)?;
    Ok(())
}

pub fn read_template(dir: &Path) -> Result<(TemplateMesh, Skeleton)> {
    let (vertices, topology) = read_obj(&dir.join("template.obj"))?;
    let rig: RigSidecar = serde_json::from_slice(&fs::read(dir.join("rig.json"))?)?;
    let template = TemplateMesh {
        rest_vertices: vertices,
        topology: Arc::new(topology),
        skinning_weights: rig.skinning_weights,
        joint_count: rig.joint_count,
        graph_nodes: rig.graph_nodes,
        node_weights: rig.node_weights,
        node_neighbors: rig.node_neighbors,
    };
    template.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    rig.skeleton.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((template, rig.skeleton))
}

// ---------------------------------------------------------------------------
// Cameras and scene manifest

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(cameras)?)?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Scene manifest: parameters and seed; the scene itself regenerates
/// deterministically from these, so downstream commands never depend on the
/// 8-bit PNG exports.
#[derive(Serialize, Deserialize)]
pub struct SceneManifest {
    pub schema_version: u32,
    pub params: SceneParams,
    pub seed: u64,
}

pub fn write_scene_manifest(path: &Path, params: &SceneParams, seed: u64) -> Result<()> {
    let manifest = SceneManifest { schema_version: 1, params: *params, seed };
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_scene_manifest(path: &Path) -> Result<SceneManifest> {
    let manifest: SceneManifest = serde_json::from_slice(
        &fs::read(path).with_context(|| format!("read {}", path.display()))?,
    )?;
    if manifest.schema_version != 1 {
        bail!("unsupported scene manifest schema version {}", manifest.schema_version);
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// PLY pointclouds (binary little-endian, xyz + confidence as doubles)

pub fn write_ply(path: &Path, cloud: &TargetPointCloud) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "ply\r\nformat binary_little_endian 1.0\r\nelement vertex {}\r\nproperty double x\r\nproperty double y\r\nproperty double z\r\nproperty double confidence\r\nend_header\r\n",
        cloud.points.len()
    )?;
    for (p, &c) in cloud.points.iter().zip(cloud.confidences.iter()) {
        w.write_all(&p.x.to_le_bytes())?;
        w.write_all(&p.y.to_le_bytes())?;
        w.write_all(&p.z.to_le_bytes())?;
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<TargetPointCloud> {
    let mut file = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(12)
        .position(|w| w == b"end_header\r\n")
        .context("ply: missing end_header")?
        + 12;
    let header = std::str::from_utf8(&bytes[..header_end])?;
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .context("ply: missing vertex element")?
        .trim()
        .parse()?;
    let mut points = Vec::with_capacity(count);
    let mut confidences = Vec::with_capacity(count);
    let mut cursor = header_end;
    for _ in 0..count {
        let mut vals = [0.0f64; 4];
        for v in vals.iter_mut() {
            let chunk: [u8; 8] = bytes[cursor..cursor + 8].try_into()?;
            *v = f64::from_le_bytes(chunk);
            cursor += 8;
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        confidences.push(vals[3]);
    }
    Ok(TargetPointCloud { points, confidences })
}

// ---------------------------------------------------------------------------
// Depth maps

const DEPTH_MAGIC: &[u8; 4] = b"DMAP";

/// 32-bit float binary, row-major little-endian, header: magic, W, H.
pub fn write_depth_binary(path: &Path, depth: &DepthMap) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(depth.width as u32).to_le_bytes())?;
    w.write_all(&(depth.height as u32).to_le_bytes())?;
    for &v in &depth.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth_binary(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        bail!("not a depth binary: {}", path.display());
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into()?) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into()?) as usize;
    if bytes.len() != 12 + 4 * w * h {
        bail!("depth binary size mismatch");
    }
    let mut data = Vec::with_capacity(w * h);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into()?) as f64);
    }
    Ok(DepthMap { width: w, height: h, data })
}

/// 16-bit grayscale PNG in millimeters (clamped to u16).
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        depth.width as u32,
        depth.height as u32,
    );
    for (row, col, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y as usize, x as usize, p)) {
        let mm = (depth.at(row, col) * 1000.0).round().clamp(0.0, 65535.0) as u16;
        *px = image::Luma([mm]);
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Images, masks, normal maps

pub fn write_image_png(path: &Path, img: &Image) -> Result<()> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = img.at(y as usize, x as usize);
        *px = image::Rgb([
            (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
            (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ]);
    }
    out.save(path)?;
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("open {}", path.display()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::black(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(y as usize, x as usize, [
            px[0] as f64 / 255.0,
            px[1] as f64 / 255.0,
            px[2] as f64 / 255.0,
        ]);
    }
    Ok(out)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = image::Luma([if mask.at(y as usize, x as usize) { 255 } else { 0 }]);
    }
    out.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Mask::empty(w, h);
    for (x, y, px) in img.enumerate_pixels() {
        mask.data[y as usize * w + x as usize] = px[0] >= 128;
    }
    Ok(mask)
}

/// Normal map as 8-bit RGB with the n*0.5+0.5 encoding already applied.
pub fn write_normal_map_png(path: &Path, map: &NormalMap) -> Result<()> {
    let r = map.resolution;
    let mut out = image::RgbImage::new(r as u32, r as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let t = map.texel(y as usize, x as usize);
        *px = image::Rgb([
            (t[0].clamp(0.0, 1.0) * 255.0).round() as u8,
            (t[1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (t[2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ]);
    }
    out.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature texture float binary (for inspection)

pub fn write_feature_texture(path: &Path, tex: &shellnerf_core::field::FeatureTexture) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(b"FTEX")?;
    w.write_all(&(tex.width as u32).to_le_bytes())?;
    w.write_all(&(tex.height as u32).to_le_bytes())?;
    w.write_all(&(tex.channels as u32).to_le_bytes())?;
    for &v in &tex.texels {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + raw little-endian f64 parameter blob

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderSpec {
    Grid { width: usize, height: usize, channels: usize },
    Conv { width: usize, height: usize, in_channels: usize, out_channels: usize },
}

impl EncoderSpec {
    pub fn of(encoder: &FeatureEncoder) -> EncoderSpec {
        match encoder {
            FeatureEncoder::Grid(g) => {
                EncoderSpec::Grid { width: g.width, height: g.height, channels: g.channels }
            }
            FeatureEncoder::Conv(c) => EncoderSpec::Conv {
                width: c.width,
                height: c.height,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
            },
        }
    }

    pub fn build(&self) -> Result<FeatureEncoder> {
        Ok(match *self {
            EncoderSpec::Grid { width, height, channels } => {
                FeatureEncoder::Grid(GridEncoder::new(width, height, channels))
            }
            EncoderSpec::Conv { width, height, in_channels, out_channels } => FeatureEncoder::Conv(
                ConvEncoder::new(width, height, in_channels, out_channels, 0)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            ),
        })
    }
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub stage: String,
    pub mlp: RadianceMlpConfig,
    pub encoder: EncoderSpec,
    pub predictor_window: usize,
    pub predictor_nodes: usize,
    pub predictor_vertices: usize,
    pub lens: [u64; 4],
}

const CKPT_MAGIC: &[u8; 4] = b"SNCK";

pub struct Checkpoint {
    pub mlp: RadianceMlp,
    pub encoder: FeatureEncoder,
    pub eg_params: Vec<f64>,
    pub delta_params: Vec<f64>,
    pub manifest: CheckpointManifest,
}

pub fn save_checkpoint(
    path: &Path,
    stage: &str,
    mlp: &RadianceMlp,
    encoder: &FeatureEncoder,
    predictor: &MotionPredictor,
) -> Result<()> {
    let manifest = CheckpointManifest {
        schema_version: 1,
        stage: stage.to_string(),
        mlp: mlp.config,
        encoder: EncoderSpec::of(encoder),
        predictor_window: predictor.window_extent(),
        predictor_nodes: predictor.node_count(),
        predictor_vertices: predictor.vertex_count(),
        lens: [
            mlp.param_len() as u64,
            encoder.param_len() as u64,
            predictor.eg_net.param_len() as u64,
            predictor.delta_net.param_len() as u64,
        ],
    };
    let json = serde_json::to_vec(&manifest)?;
    let file = fs::File::create(path).with_context(|| format!("create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for block in [
        mlp.params(),
        encoder.params(),
        predictor.eg_net.params(),
        predictor.delta_net.params(),
    ] {
        for &v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
    if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
        bail!("not a checkpoint: {}", path.display());
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into()?) as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + json_len])?;
    let mut cursor = 16 + json_len;
    let mut take = |len: u64| -> Result<Vec<f64>> {
        let n = len as usize;
        let mut out = Vec::with_capacity(n);
        for chunk in bytes[cursor..cursor + 8 * n].chunks_exact(8) {
            out.push(f64::from_le_bytes(chunk.try_into()?));
        }
        cursor += 8 * n;
        Ok(out)
    };
    let mlp_params = take(manifest.lens[0])?;
    let enc_params = take(manifest.lens[1])?;
    let eg_params = take(manifest.lens[2])?;
    let delta_params = take(manifest.lens[3])?;
    let mut mlp = RadianceMlp::new(manifest.mlp, 0);
    if mlp.param_len() != mlp_params.len() {
        bail!("checkpoint mlp parameter count mismatch");
    }
    mlp.params_mut().copy_from_slice(&mlp_params);
    let mut encoder = manifest.encoder.build()?;
    if encoder.param_len() != enc_params.len() {
        bail!("checkpoint encoder parameter count mismatch");
    }
    encoder.params_mut().copy_from_slice(&enc_params);
    Ok(Checkpoint { mlp, encoder, eg_params, delta_params, manifest })
}

/// Rebuilds the predictor bound to a template from checkpointed parameters.
pub fn restore_predictor(ckpt: &Checkpoint, template: &TemplateMesh) -> Result<MotionPredictor> {
    if template.node_count() != ckpt.manifest.predictor_nodes
        || template.vertex_count() != ckpt.manifest.predictor_vertices
    {
        bail!(
            "checkpoint predictor was bound to K={} N={}, template has K={} N={}",
            ckpt.manifest.predictor_nodes,
            ckpt.manifest.predictor_vertices,
            template.node_count(),
            template.vertex_count()
        );
    }
    let mut predictor = MotionPredictor::new(template, ckpt.manifest.predictor_window, 0);
    if predictor.eg_net.param_len() != ckpt.eg_params.len()
        || predictor.delta_net.param_len() != ckpt.delta_params.len()
    {
        bail!("checkpoint predictor parameter count mismatch");
    }
    predictor.eg_net.params_mut().copy_from_slice(&ckpt.eg_params);
    predictor.delta_net.params_mut().copy_from_slice(&ckpt.delta_params);
    Ok(predictor)
}

// ---------------------------------------------------------------------------
// CSV

/// Writes rows with a header line; plain `Display` formatting keeps reruns
/// byte-identical.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Exports a deformed mesh as OBJ (shared topology, fresh vertices).
pub fn write_deformed_obj(path: &Path, mesh: &DeformedMesh) -> Result<()> {
    write_obj(path, &mesh.vertices, &mesh.topology)
}
