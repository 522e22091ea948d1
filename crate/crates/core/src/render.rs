//! Shell-restricted volume rendering: geometry-guided sample placement
//! between the eroded and dilated mesh depths, front-to-back alpha
//! compositing with exact analytic gradients, density-weighted surface point
//! extraction, image assembly, and image metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::charmodel::DeformedMesh;
use crate::field::{
    positional_encoding, sample_feature_texture, FeatureTexture, FieldBatch, FieldError, RadianceMlp,
};
use crate::math::{flt, Vec3};
use crate::meshops::{pixel_ray, Camera, DepthMaps, MeshBvh, MeshOpsError};

#[derive(Debug, Clone, PartialEq)]
pub enum RenderError {
    Config(String),
    /// The pixel has no eroded/dilated support; such rays are discarded.
    BackgroundPixel,
    MeshOps(MeshOpsError),
    Field(FieldError),
}

impl fmt::Display for RenderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderError::Config(m) => write!(f, "render: invalid configuration: {m}"),
            RenderError::BackgroundPixel => write!(f, "render: ray rejected, no foreground support"),
            RenderError::MeshOps(e) => write!(f, "render: {e}"),
            RenderError::Field(e) => write!(f, "render: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RenderError {}

impl From<MeshOpsError> for RenderError {
    fn from(e: MeshOpsError) -> Self {
        RenderError::MeshOps(e)
    }
}

impl From<FieldError> for RenderError {
    fn from(e: FieldError) -> Self {
        RenderError::Field(e)
    }
}

/// Shell sampling configuration: front/back margins in meters, sample count,
/// and the erosion/dilation kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShellConfig {
    pub t_mi: f64,
    pub t_ma: f64,
    pub samples: usize,
    pub kernel: usize,
}

impl Default for ShellConfig {
    fn default() -> Self {
        ShellConfig { t_mi: 0.04, t_ma: 0.04, samples: 32, kernel: 9 }
    }
}

impl ShellConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.t_mi > 0.0) || !(self.t_ma > 0.0) {
            return Err(RenderError::Config(String::from(
                "shell margins must be strictly positive (zero margins degenerate the shell)",
            )));
        }
        if self.samples < 2 {
            return Err(RenderError::Config(String::from("shell needs at least 2 samples")));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(RenderError::Config(String::from("kernel must be odd")));
        }
        Ok(())
    }
}

/// S+1 ascending bin boundaries from the eroded depth minus the front margin
/// to the dilated depth plus the back margin:
/// `t_i = (1 - i/S)(E - t_mi) + (i/S)(D + t_ma)`.
pub fn shell_depths(e_value: f64, d_value: f64, config: &ShellConfig) -> Result<Vec<f64>, RenderError> {
    config.validate()?;
    if e_value <= 0.0 || d_value <= 0.0 {
        return Err(RenderError::BackgroundPixel);
    }
    if e_value > d_value {
        return Err(RenderError::Config(String::from("eroded depth exceeds dilated depth")));
    }
    let s = config.samples;
    let front = e_value - config.t_mi;
    let back = d_value + config.t_ma;
    let mut out = Vec::with_capacity(s + 1);
    for i in 0..=s {
        let a = i as f64 / s as f64;
        out.push((1.0 - a) * front + a * back);
    }
    Ok(out)
}

/// Evaluation positions and owned interval lengths. Deterministic midpoints
/// for evaluation; uniform jitter within each bin during training.
pub fn sample_positions(depths: &[f64], jitter: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Vec<f64>) {
    let bins = depths.len() - 1;
    let mut positions = Vec::with_capacity(bins);
    let mut deltas = Vec::with_capacity(bins);
    match jitter {
        None => {
            for w in depths.windows(2) {
                positions.push(0.5 * (w[0] + w[1]));
                deltas.push(w[1] - w[0]);
            }
        }
        Some(rng) => {
            for w in depths.windows(2) {
                let u: f64 = rng.gen_range(0.0..1.0);
                positions.push(w[0] + u * (w[1] - w[0]));
                deltas.push(w[1] - w[0]);
            }
        }
    }
    (positions, deltas)
}

/// A camera ray with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// `x_i = o + t_i d` for every depth.
pub fn ray_points(ray: &Ray, depths: &[f64]) -> Vec<Vec3> {
    depths.iter().map(|&t| ray.origin + ray.dir * t).collect()
}

/// Per-ray sample bundle: S+1 bin boundaries, S evaluation samples, and the
/// compositing state filled in by [`composite`].
///
/// Shell boundaries live in the depth-map domain (camera-space z); ray
/// parameters are recovered through `depth_scale`, the camera-z component of
/// the unit direction, so samples actually bracket the rasterized surface on
/// oblique rays. An axial ray has `depth_scale == 1` and the two domains
/// coincide.
#[derive(Clone, Debug)]
pub struct RaySampleSet {
    pub ray: Ray,
    /// Camera-space z per unit ray parameter (positive).
    pub depth_scale: f64,
    /// Bin boundaries in depth space (ascending, S+1 of them).
    pub depths: Vec<f64>,
    /// Points at the bin boundaries.
    pub points: Vec<Vec3>,
    /// Field evaluation positions as ray parameters (bin midpoints, or
    /// jittered during training).
    pub sample_depths: Vec<f64>,
    pub sample_points: Vec<Vec3>,
    /// Ray-length interval owned by each sample.
    pub deltas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RaySampleSet {
    pub fn new(ray: Ray, depths: Vec<f64>, jitter: Option<&mut ChaCha8Rng>) -> RaySampleSet {
        RaySampleSet::with_depth_scale(ray, depths, 1.0, jitter)
    }

    pub fn with_depth_scale(
        ray: Ray,
        depths: Vec<f64>,
        depth_scale: f64,
        jitter: Option<&mut ChaCha8Rng>,
    ) -> RaySampleSet {
        debug_assert!(depths.windows(2).all(|w| w[1] > w[0]), "depths must ascend strictly");
        debug_assert!(depth_scale > 0.0);
        let ts: Vec<f64> = depths.iter().map(|&z| z / depth_scale).collect();
        let points = ray_points(&ray, &ts);
        let (sample_zs, z_deltas) = sample_positions(&depths, jitter);
        let sample_depths: Vec<f64> = sample_zs.iter().map(|&z| z / depth_scale).collect();
        let deltas: Vec<f64> = z_deltas.iter().map(|&d| d / depth_scale).collect();
        let sample_points = ray_points(&ray, &sample_depths);
        let n = sample_depths.len();
        RaySampleSet {
            ray,
            depth_scale,
            depths,
            points,
            sample_depths,
            sample_points,
            deltas,
            colors: vec![[0.0; 3]; n],
            sigmas: vec![0.0; n],
            alphas: Vec::new(),
            transmittances: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.sample_depths.len()
    }

    /// Depth-space position of sample `i` (for containment checks).
    pub fn sample_z(&self, i: usize) -> f64 {
        self.sample_depths[i] * self.depth_scale
    }
}

/// Composited pixel: accumulated color, total weight, and the extracted
/// surface point when the ray is confident enough.
#[derive(Clone, Copy, Debug)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub accumulated_weight: f64,
    pub surface_point: Option<Vec3>,
}

/// Front-to-back compositing state computed from densities alone.
pub struct CompositeOut {
    pub color: [f64; 3],
    pub weight_sum: f64,
    pub weighted_depth: f64,
}

/// `alpha_i = 1 - exp(-delta_i sigma_i)`, `T_i = prod_{j<i} (1 - alpha_j)`,
/// color = sum T_i alpha_i c_i. Also accumulates the weighted depth used for
/// pointcloud extraction.
pub fn composite_forward(
    deltas: &[f64],
    sigmas: &[f64],
    colors: &[[f64; 3]],
    sample_depths: &[f64],
    alphas: &mut Vec<f64>,
    transmittances: &mut Vec<f64>,
    weights: &mut Vec<f64>,
) -> CompositeOut {
    let n = deltas.len();
    debug_assert_eq!(sigmas.len(), n);
    debug_assert_eq!(colors.len(), n);
    alphas.clear();
    transmittances.clear();
    weights.clear();
    let mut trans = 1.0_f64;
    let mut color = [0.0_f64; 3];
    let mut weight_sum = 0.0;
    let mut weighted_depth = 0.0;
    for i in 0..n {
        let alpha = -flt::exp_m1(-deltas[i] * sigmas[i]);
        let w = trans * alpha;
        alphas.push(alpha);
        transmittances.push(trans);
        weights.push(w);
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        weight_sum += w;
        weighted_depth += w * sample_depths[i];
        trans *= 1.0 - alpha;
    }
    CompositeOut { color, weight_sum, weighted_depth }
}

/// Exact gradients of `gc . color + gw * weight_sum` w.r.t. every sigma and
/// color. Division-free: uses `d w_i / d sigma_m = delta_m (T_{m+1}[i==m] - w_i[i>m])`.
pub fn composite_backward(
    deltas: &[f64],
    colors: &[[f64; 3]],
    alphas: &[f64],
    transmittances: &[f64],
    weights: &[f64],
    grad_color: [f64; 3],
    grad_weight_sum: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = deltas.len();
    // phi_i = gc . c_i + gw, the per-sample payoff of one unit of weight.
    let phi: Vec<f64> = (0..n)
        .map(|i| grad_color[0] * colors[i][0] + grad_color[1] * colors[i][1] + grad_color[2] * colors[i][2] + grad_weight_sum)
        .collect();
    // suffix[i] = sum_{k>i} w_k phi_k.
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + weights[i] * phi[i];
    }
    let mut grad_sigmas = Vec::with_capacity(n);
    let mut grad_colors = Vec::with_capacity(n);
    for i in 0..n {
        let t_next = transmittances[i] * (1.0 - alphas[i]);
        grad_sigmas.push(deltas[i] * (t_next * phi[i] - suffix[i + 1]));
        grad_colors.push([
            weights[i] * grad_color[0],
            weights[i] * grad_color[1],
            weights[i] * grad_color[2],
        ]);
    }
    (grad_sigmas, grad_colors)
}

/// Runs compositing over a filled sample set and stores alphas,
/// transmittances, and weights back into it.
pub fn composite(samples: &mut RaySampleSet) -> RenderedPixel {
    let mut alphas = Vec::new();
    let mut trans = Vec::new();
    let mut weights = Vec::new();
    let out = composite_forward(
        &samples.deltas,
        &samples.sigmas,
        &samples.colors,
        &samples.sample_depths,
        &mut alphas,
        &mut trans,
        &mut weights,
    );
    samples.alphas = alphas;
    samples.transmittances = trans;
    samples.weights = weights;
    RenderedPixel { color: out.color, accumulated_weight: out.weight_sum, surface_point: None }
}

/// Density-weighted surface point `p = o + (sum w_i t_i) d`, flagged
/// unreliable below the confidence threshold so refinement can skip it.
#[derive(Clone, Copy, Debug)]
pub struct ExtractedPoint {
    pub point: Vec3,
    pub confidence: f64,
    pub reliable: bool,
}

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

pub fn extract_point(samples: &RaySampleSet, confidence_threshold: f64) -> ExtractedPoint {
    debug_assert_eq!(samples.weights.len(), samples.sample_count(), "composite() must run first");
    let mut weighted_depth = 0.0;
    let mut weight_sum = 0.0;
    for i in 0..samples.weights.len() {
        weighted_depth += samples.weights[i] * samples.sample_depths[i];
        weight_sum += samples.weights[i];
    }
    ExtractedPoint {
        point: samples.ray.origin + samples.ray.dir * weighted_depth,
        confidence: weight_sum,
        reliable: weight_sum >= confidence_threshold,
    }
}

/// A batch of field evaluation queries along rays. Everything a field might
/// condition on is precomputed: the sample position, unit view direction,
/// signed distances (normalized and in meters), the closest-point uv, and
/// the sampled surface feature.
pub struct QueryBatch {
    pub count: usize,
    pub feature_dim: usize,
    pub points: Vec<Vec3>,
    pub views: Vec<Vec3>,
    pub normalized_distances: Vec<f64>,
    pub meter_distances: Vec<f64>,
    pub uvs: Vec<[f64; 2]>,
    pub features: Vec<f64>,
}

impl QueryBatch {
    pub fn new(feature_dim: usize) -> QueryBatch {
        QueryBatch {
            count: 0,
            feature_dim,
            points: Vec::new(),
            views: Vec::new(),
            normalized_distances: Vec::new(),
            meter_distances: Vec::new(),
            uvs: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Anything that maps surface-relative queries to (color, density).
pub trait RadianceField: Sync {
    fn eval_batch(&self, queries: &QueryBatch, rgb: &mut Vec<f64>, sigma: &mut Vec<f64>);
}

/// The learned field: positional encodings of distance and view feeding the
/// radiance MLP together with the sampled surface feature.
pub struct NeuralField<'a> {
    pub mlp: &'a RadianceMlp,
}

impl<'a> NeuralField<'a> {
    /// Builds the encoded MLP batch for a query batch; shared by rendering
    /// and the training loop (which also needs the cache).
    pub fn encode_batch(mlp: &RadianceMlp, queries: &QueryBatch) -> FieldBatch {
        let cfg = &mlp.config;
        let mut batch = FieldBatch::with_capacity(cfg, queries.count);
        let dist_spec = cfg.distance_spec();
        let view_spec = cfg.view_spec();
        let mut dist_enc = Vec::new();
        let mut view_enc = Vec::new();
        for i in 0..queries.count {
            positional_encoding(&[queries.normalized_distances[i]], &dist_spec, &mut dist_enc);
            positional_encoding(&queries.views[i].to_array(), &view_spec, &mut view_enc);
            batch.push(queries.feature(i), &dist_enc, &view_enc);
        }
        batch
    }
}

impl<'a> RadianceField for NeuralField<'a> {
    fn eval_batch(&self, queries: &QueryBatch, rgb: &mut Vec<f64>, sigma: &mut Vec<f64>) {
        let batch = NeuralField::encode_batch(self.mlp, queries);
        let (c, s, _) = self.mlp.forward_batch(&batch, false);
        *rgb = c;
        *sigma = s;
    }
}

/// Hand-set field: constant color and density everywhere.
pub struct EmissiveField {
    pub color: [f64; 3],
    pub density: f64,
}

impl RadianceField for EmissiveField {
    fn eval_batch(&self, queries: &QueryBatch, rgb: &mut Vec<f64>, sigma: &mut Vec<f64>) {
        rgb.clear();
        sigma.clear();
        for _ in 0..queries.count {
            rgb.extend_from_slice(&self.color);
            sigma.push(self.density);
        }
    }
}

/// Hand-set field whose density is a hard wall at the mesh surface: zero
/// outside, `peak` inside. Along any crossing ray the compositing weight
/// collapses onto the first interior sample, i.e. a near-delta at the
/// surface-crossing depth, independent of incidence angle.
pub struct OccupancyField {
    pub color: [f64; 3],
    pub peak: f64,
}

impl RadianceField for OccupancyField {
    fn eval_batch(&self, queries: &QueryBatch, rgb: &mut Vec<f64>, sigma: &mut Vec<f64>) {
        rgb.clear();
        sigma.clear();
        for i in 0..queries.count {
            rgb.extend_from_slice(&self.color);
            sigma.push(if queries.meter_distances[i] < 0.0 { self.peak } else { 0.0 });
        }
    }
}

/// Precomputed per-(mesh, camera) rendering context.
pub struct RenderContext {
    pub maps: DepthMaps,
    pub camera: Camera,
}

impl RenderContext {
    pub fn new(mesh: &DeformedMesh, camera: &Camera, shell: &ShellConfig) -> Result<RenderContext, RenderError> {
        shell.validate()?;
        let maps = DepthMaps::compute(mesh, camera, shell.kernel)?;
        Ok(RenderContext { maps, camera: camera.clone() })
    }

    pub fn foreground_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..self.camera.height {
            for col in 0..self.camera.width {
                if self.maps.is_foreground(row, col) {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

/// Builds the sample set and query batch for one foreground pixel.
/// Returns the sample set with `colors`/`sigmas` still empty.
pub fn build_ray_samples(
    ctx: &RenderContext,
    bvh: &MeshBvh,
    texture: &FeatureTexture,
    shell: &ShellConfig,
    row: usize,
    col: usize,
    jitter: Option<&mut ChaCha8Rng>,
    queries: &mut QueryBatch,
) -> Result<RaySampleSet, RenderError> {
    let e = ctx.maps.eroded.at(row, col);
    let d = ctx.maps.dilated.at(row, col);
    let depths = shell_depths(e, d, shell)?;
    let (origin, dir) = pixel_ray(&ctx.camera, col as f64 + 0.5, row as f64 + 0.5);
    let depth_scale = ctx.camera.rotation.mul_vec(dir).z;
    let samples = RaySampleSet::with_depth_scale(Ray { origin, dir }, depths, depth_scale, jitter);
    queries_for_samples(bvh, texture, shell.t_mi, shell.t_ma, &samples, queries);
    Ok(samples)
}

/// Fills the surface-relative conditioning for every sample point of a ray:
/// closest point, signed distances, uv, and the bilinear feature fetch.
/// Shared by the shell renderer and alternative samplers.
pub fn queries_for_samples(
    bvh: &MeshBvh,
    texture: &FeatureTexture,
    t_mi: f64,
    t_ma: f64,
    samples: &RaySampleSet,
    queries: &mut QueryBatch,
) {
    let mut feature = vec![0.0; texture.channels];
    let dir = samples.ray.dir;
    for &p in &samples.sample_points {
        let cp = bvh.closest_point(p);
        let meters = {
            let n = bvh.pseudonormal(&cp);
            if cp.distance < 1e-9 {
                0.0
            } else if (p - cp.point).dot(n) >= 0.0 {
                cp.distance
            } else {
                -cp.distance
            }
        };
        let normalized = if meters >= 0.0 { meters / t_ma } else { meters / t_mi };
        sample_feature_texture(texture, cp.uv, &mut feature);
        queries.points.push(p);
        queries.views.push(dir);
        queries.normalized_distances.push(normalized);
        queries.meter_distances.push(meters);
        queries.uvs.push(cp.uv);
        queries.features.extend_from_slice(&feature);
        queries.count += 1;
    }
}

/// Per-pixel outputs of a render pass.
pub struct RenderResult {
    pub image: Image,
    pub weight_map: Vec<f64>,
    /// Extracted surface point and confidence per pixel (foreground only).
    pub points: Vec<Option<(Vec3, f64)>>,
    pub stats: RenderStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub foreground_rays: usize,
    pub field_evals: usize,
}

/// Renders one camera view: per foreground pixel, shell sampling at bin
/// midpoints, field evaluation, compositing, and point extraction.
/// Background pixels stay transparent black.
pub fn render_image<F: RadianceField>(
    mesh: &DeformedMesh,
    texture: &FeatureTexture,
    field: &F,
    camera: &Camera,
    shell: &ShellConfig,
    confidence_threshold: f64,
) -> Result<RenderResult, RenderError> {
    shell.validate()?;
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut result = RenderResult {
        image: Image::black(w, h),
        weight_map: vec![0.0; w * h],
        points: vec![None; w * h],
        stats: RenderStats::default(),
    };
    if mesh.triangle_count() == 0 {
        return Ok(result);
    }
    let bvh = MeshBvh::build(mesh)?;
    let ctx = RenderContext::new(mesh, camera, shell)?;
    let pixels = ctx.foreground_pixels();
    let outputs = render_pixels(&ctx, &bvh, texture, field, shell, &pixels, confidence_threshold)?;
    result.stats.foreground_rays = pixels.len();
    result.stats.field_evals = pixels.len() * shell.samples;
    for ((row, col), px) in pixels.iter().zip(outputs.iter()) {
        let idx = row * w + col;
        result.image.data[idx] = px.color;
        result.weight_map[idx] = px.accumulated_weight;
        if let Some(p) = px.surface_point {
            result.points[idx] = Some((p, px.accumulated_weight));
        }
    }
    Ok(result)
}

/// Renders an explicit pixel list; the workhorse behind [`render_image`] and
/// pointcloud extraction. Chunked and, with the `rayon` feature, parallel
/// with a fixed chunk size so results do not depend on thread count.
pub fn render_pixels<F: RadianceField>(
    ctx: &RenderContext,
    bvh: &MeshBvh,
    texture: &FeatureTexture,
    field: &F,
    shell: &ShellConfig,
    pixels: &[(usize, usize)],
    confidence_threshold: f64,
) -> Result<Vec<RenderedPixel>, RenderError> {
    const CHUNK: usize = 64;
    let chunks: Vec<&[(usize, usize)]> = pixels.chunks(CHUNK).collect();
    let process = |chunk: &&[(usize, usize)]| -> Result<Vec<RenderedPixel>, RenderError> {
        let mut queries = QueryBatch::new(texture.channels);
        let mut sets = Vec::with_capacity(chunk.len());
        for &(row, col) in chunk.iter() {
            let samples = build_ray_samples(ctx, bvh, texture, shell, row, col, None, &mut queries)?;
            sets.push(samples);
        }
        let mut rgb = Vec::new();
        let mut sigma = Vec::new();
        field.eval_batch(&queries, &mut rgb, &mut sigma);
        debug_assert_eq!(sigma.len(), queries.count);
        let mut out = Vec::with_capacity(chunk.len());
        let mut cursor = 0usize;
        for samples in sets.iter_mut() {
            let n = samples.sample_count();
            for i in 0..n {
                samples.colors[i] = [rgb[3 * (cursor + i)], rgb[3 * (cursor + i) + 1], rgb[3 * (cursor + i) + 2]];
                samples.sigmas[i] = sigma[cursor + i];
            }
            cursor += n;
            let mut px = composite(samples);
            let extracted = extract_point(samples, confidence_threshold);
            if extracted.reliable {
                px.surface_point = Some(extracted.point);
            }
            out.push(px);
        }
        Ok(out)
    };
    #[cfg(feature = "rayon")]
    let per_chunk: Vec<Result<Vec<RenderedPixel>, RenderError>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(process).collect()
    };
    #[cfg(not(feature = "rayon"))]
    let per_chunk: Vec<Result<Vec<RenderedPixel>, RenderError>> = chunks.iter().map(process).collect();

    let mut merged = Vec::with_capacity(pixels.len());
    for chunk in per_chunk {
        merged.extend(chunk?);
    }
    Ok(merged)
}

/// RGB image with components in [0,1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![[0.0; 3]; width * height] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, c: [f64; 3]) {
        self.data[row * self.width + col] = c;
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Mask {
        Mask { width, height, data: vec![false; width * height] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// L1 color loss: sum of absolute componentwise differences.
pub fn color_loss(predicted: [f64; 3], truth: [f64; 3]) -> f64 {
    (0..3).map(|c| (predicted[c] - truth[c]).abs()).sum()
}

/// Subgradient of [`color_loss`] w.r.t. the prediction; 0 at exact ties.
pub fn color_loss_grad(predicted: [f64; 3], truth: [f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for c in 0..3 {
        let d = predicted[c] - truth[c];
        g[c] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    g
}

/// Masked PSNR in decibels with peak 1.0; identical images (MSE = 0) report
/// +infinity.
pub fn psnr(a: &Image, b: &Image, mask: &Mask) -> f64 {
    assert_eq!(a.width, b.width, "psnr: image widths differ");
    assert_eq!(a.height, b.height, "psnr: image heights differ");
    assert_eq!(a.width, mask.width, "psnr: mask width differs");
    assert_eq!(a.height, mask.height, "psnr: mask height differs");
    let mut se = 0.0;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if mask.data[i] {
            for c in 0..3 {
                let d = a.data[i][c] - b.data[i][c];
                se += d * d;
            }
            n += 3;
        }
    }
    assert!(n > 0, "psnr: empty mask");
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * flt::log10(1.0 / mse)
    }
}
