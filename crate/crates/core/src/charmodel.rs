//! Motion-conditioned character model: skeletal poses, embedded deformation,
//! per-vertex displacements, linear blend skinning with forward kinematics,
//! and texture-space normal maps.
//!
//! The deformation pipeline is `embedded deformation -> add displacements ->
//! skinning -> root transform`, and every stage has an exact backward pass so
//! losses on the posed vertices can reach the predictor networks.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::{rotate_point_jacobian, rotation_from_axis_angle, Mat3, Rigid, Vec3};
use crate::nn::{Mlp, MlpCache};

/// Number of skeletal joint angles in a pose.
pub const JOINT_ANGLE_COUNT: usize = 57;

#[derive(Debug, Clone, PartialEq)]
pub enum CharModelError {
    InvalidPose(String),
    InvalidSkeleton(String),
    InvalidTemplate(String),
    ShapeMismatch(String),
}

impl fmt::Display for CharModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CharModelError::InvalidPose(m) => write!(f, "charmodel: invalid pose: {m}"),
            CharModelError::InvalidSkeleton(m) => write!(f, "charmodel: invalid skeleton: {m}"),
            CharModelError::InvalidTemplate(m) => write!(f, "charmodel: invalid template: {m}"),
            CharModelError::ShapeMismatch(m) => write!(f, "charmodel: shape mismatch: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CharModelError {}

/// One skeletal pose: joint angles plus the root rigid motion.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletalPose {
    /// Joint angles in radians; exactly [`JOINT_ANGLE_COUNT`] entries.
    pub joint_angles: Vec<f64>,
    /// Root rotation, axis-angle radians.
    pub root_rotation: Vec3,
    /// Root translation, meters.
    pub root_translation: Vec3,
}

impl SkeletalPose {
    pub fn identity() -> SkeletalPose {
        SkeletalPose {
            joint_angles: vec![0.0; JOINT_ANGLE_COUNT],
            root_rotation: Vec3::ZERO,
            root_translation: Vec3::ZERO,
        }
    }

    pub fn validate(&self) -> Result<(), CharModelError> {
        if self.joint_angles.len() != JOINT_ANGLE_COUNT {
            return Err(CharModelError::InvalidPose(format!(
                "expected {JOINT_ANGLE_COUNT} joint angles, got {}",
                self.joint_angles.len()
            )));
        }
        let finite = self.joint_angles.iter().all(|a| a.is_finite())
            && self.root_rotation.is_finite()
            && self.root_translation.is_finite();
        if !finite {
            return Err(CharModelError::InvalidPose(String::from("non-finite entries")));
        }
        Ok(())
    }
}

/// Sliding window of poses, oldest first; the last entry is the current pose.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletalMotion {
    pub window: Vec<SkeletalPose>,
}

impl SkeletalMotion {
    pub fn new(window: Vec<SkeletalPose>) -> SkeletalMotion {
        SkeletalMotion { window }
    }

    /// Window extent T; the window holds T+1 poses.
    pub fn extent(&self) -> usize {
        self.window.len().saturating_sub(1)
    }

    pub fn current(&self) -> &SkeletalPose {
        self.window.last().expect("motion window is never empty")
    }

    pub fn validate(&self) -> Result<(), CharModelError> {
        if self.window.is_empty() {
            return Err(CharModelError::InvalidPose(String::from("empty motion window")));
        }
        for pose in &self.window {
            pose.validate()?;
        }
        Ok(())
    }
}

/// A joint angle slot: which entry of `joint_angles` drives which local axis.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JointAxis {
    pub angle_index: usize,
    pub axis: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Joint {
    /// Parent joint index; `None` only for the root (index 0). Parents always
    /// precede children so one forward sweep computes the kinematic chain.
    pub parent: Option<usize>,
    /// Offset from the parent joint in the rest pose, meters.
    pub rest_offset: Vec3,
    /// Rotation axes driven by pose entries, applied in listed order.
    pub axes: Vec<JointAxis>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), CharModelError> {
        if self.joints.is_empty() {
            return Err(CharModelError::InvalidSkeleton(String::from("no joints")));
        }
        if self.joints[0].parent.is_some() {
            return Err(CharModelError::InvalidSkeleton(String::from("root joint must have no parent")));
        }
        let mut used = vec![false; JOINT_ANGLE_COUNT];
        for (i, joint) in self.joints.iter().enumerate() {
            match joint.parent {
                None if i != 0 => {
                    return Err(CharModelError::InvalidSkeleton(format!("joint {i} has no parent")));
                }
                Some(p) if p >= i => {
                    return Err(CharModelError::InvalidSkeleton(format!(
                        "joint {i} parent {p} does not precede it"
                    )));
                }
                _ => {}
            }
            for axis in &joint.axes {
                if axis.angle_index >= JOINT_ANGLE_COUNT {
                    return Err(CharModelError::InvalidSkeleton(format!(
                        "angle index {} out of range",
                        axis.angle_index
                    )));
                }
                if used[axis.angle_index] {
                    return Err(CharModelError::InvalidSkeleton(format!(
                        "angle index {} assigned twice",
                        axis.angle_index
                    )));
                }
                used[axis.angle_index] = true;
                if (axis.axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(CharModelError::InvalidSkeleton(String::from("rotation axis is not unit length")));
                }
            }
        }
        if used.iter().any(|u| !u) {
            return Err(CharModelError::InvalidSkeleton(String::from(
                "every joint angle entry must map to exactly one joint axis",
            )));
        }
        Ok(())
    }
}

/// Triangle connectivity plus per-corner UVs, shared between the template and
/// every deformed mesh derived from it.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeshTopology {
    pub triangles: Vec<[usize; 3]>,
    /// UV per triangle corner, in [0,1]^2.
    pub corner_uvs: Vec<[[f64; 2]; 3]>,
}

/// Rest-pose template: geometry, skinning weights, and the embedded graph.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemplateMesh {
    pub rest_vertices: Vec<Vec3>,
    pub topology: Arc<MeshTopology>,
    /// N x J convex weights, row-major.
    pub skinning_weights: Vec<f64>,
    pub joint_count: usize,
    /// Indices of the K embedded-graph nodes into `rest_vertices`.
    pub graph_nodes: Vec<usize>,
    /// N x K convex weights with local support, row-major.
    pub node_weights: Vec<f64>,
    /// Adjacency among graph nodes.
    pub node_neighbors: Vec<Vec<usize>>,
}

impl TemplateMesh {
    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn node_count(&self) -> usize {
        self.graph_nodes.len()
    }

    pub fn validate(&self) -> Result<(), CharModelError> {
        let n = self.vertex_count();
        let k = self.node_count();
        let j = self.joint_count;
        if self.skinning_weights.len() != n * j {
            return Err(CharModelError::InvalidTemplate(String::from("skinning weight shape mismatch")));
        }
        if self.node_weights.len() != n * k {
            return Err(CharModelError::InvalidTemplate(String::from("node weight shape mismatch")));
        }
        if self.topology.corner_uvs.len() != self.topology.triangles.len() {
            return Err(CharModelError::InvalidTemplate(String::from("per-corner uv count mismatch")));
        }
        for tri in &self.topology.triangles {
            if tri.iter().any(|&i| i >= n) {
                return Err(CharModelError::InvalidTemplate(String::from("triangle index out of range")));
            }
        }
        for &g in &self.graph_nodes {
            if g >= n {
                return Err(CharModelError::InvalidTemplate(String::from("graph node index out of range")));
            }
        }
        for (name, weights, cols) in [("skinning", &self.skinning_weights, j), ("node", &self.node_weights, k)] {
            for row in 0..n {
                let r = &weights[row * cols..(row + 1) * cols];
                if r.iter().any(|&w| w < 0.0) {
                    return Err(CharModelError::InvalidTemplate(format!("negative {name} weight in row {row}")));
                }
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(CharModelError::InvalidTemplate(format!(
                        "{name} weight row {row} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        // Consistent winding: no directed edge may repeat; undirected edges
        // carry at most two (opposite) half-edges. Boundary edges are allowed
        // so UV-seamed atlases remain valid.
        let mut half_edges: Vec<(usize, usize)> = Vec::with_capacity(self.topology.triangles.len() * 3);
        for tri in &self.topology.triangles {
            for e in 0..3 {
                half_edges.push((tri[e], tri[(e + 1) % 3]));
            }
        }
        half_edges.sort_unstable();
        for w in half_edges.windows(2) {
            if w[0] == w[1] {
                return Err(CharModelError::InvalidTemplate(format!(
                    "directed edge {:?} repeats; winding is inconsistent or the mesh is non-manifold",
                    w[0]
                )));
            }
        }
        Ok(())
    }

    /// Rest positions of the embedded graph nodes.
    pub fn node_positions(&self) -> Vec<Vec3> {
        self.graph_nodes.iter().map(|&i| self.rest_vertices[i]).collect()
    }
}

/// Embedded deformation parameters: one axis-angle rotation and one
/// translation per graph node.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EmbeddedParams {
    pub node_rotations: Vec<Vec3>,
    pub node_translations: Vec<Vec3>,
}

impl EmbeddedParams {
    pub fn zeros(node_count: usize) -> EmbeddedParams {
        EmbeddedParams {
            node_rotations: vec![Vec3::ZERO; node_count],
            node_translations: vec![Vec3::ZERO; node_count],
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_rotations.len()
    }

    pub fn is_finite(&self) -> bool {
        self.node_rotations.iter().chain(self.node_translations.iter()).all(|v| v.is_finite())
    }
}

/// Per-vertex displacement field, canonical space, meters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DisplacementField {
    pub displacements: Vec<Vec3>,
}

impl DisplacementField {
    pub fn zeros(vertex_count: usize) -> DisplacementField {
        DisplacementField { displacements: vec![Vec3::ZERO; vertex_count] }
    }
}

/// Posed-and-deformed mesh: the bridge object between the character model
/// and the radiance field.
#[derive(Clone, Debug)]
pub struct DeformedMesh {
    pub vertices: Vec<Vec3>,
    pub topology: Arc<MeshTopology>,
    pub vertex_normals: Vec<Vec3>,
}

impl DeformedMesh {
    /// Builds a deformed mesh from raw vertices, recomputing normals.
    pub fn from_vertices(vertices: Vec<Vec3>, topology: Arc<MeshTopology>) -> DeformedMesh {
        let vertex_normals = area_weighted_normals(&vertices, &topology.triangles);
        DeformedMesh { vertices, topology, vertex_normals }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.topology.triangles.len()
    }
}

/// Area-weighted vertex normals with coincident vertices welded, so seams of
/// a UV atlas get the normals of the underlying closed surface.
pub fn area_weighted_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let weld = weld_map(vertices);
    let mut accum = vec![Vec3::ZERO; vertices.len()];
    for tri in triangles {
        let [a, b, c] = *tri;
        // Cross product length is twice the triangle area.
        let n = (vertices[b] - vertices[a]).cross(vertices[c] - vertices[a]);
        accum[weld[a]] += n;
        accum[weld[b]] += n;
        accum[weld[c]] += n;
    }
    (0..vertices.len())
        .map(|i| {
            let n = accum[weld[i]];
            if n.norm_sq() > 0.0 {
                n.normalized()
            } else {
                Vec3::new(0.0, 0.0, 1.0)
            }
        })
        .collect()
}

/// Maps each vertex to the representative index of its exact position.
pub(crate) fn weld_map(vertices: &[Vec3]) -> Vec<usize> {
    use alloc::collections::BTreeMap;
    let mut reps: BTreeMap<[u64; 3], usize> = BTreeMap::new();
    let mut map = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
        let rep = *reps.entry(key).or_insert(i);
        map.push(rep);
    }
    map
}

/// The two desk-scale deformation predictors standing in for the cited
/// graph-convolutional networks: fully connected, two hidden layers of 256,
/// zero-initialized output layers so training starts from the undeformed
/// template.
#[derive(Clone, Debug)]
pub struct MotionPredictor {
    pub eg_net: Mlp,
    pub delta_net: Mlp,
    node_count: usize,
    vertex_count: usize,
    window_extent: usize,
}

pub const PREDICTOR_HIDDEN_WIDTH: usize = 256;

impl MotionPredictor {
    pub fn new(template: &TemplateMesh, window_extent: usize, seed: u64) -> MotionPredictor {
        let input_dim = encoded_motion_len(window_extent);
        let k = template.node_count();
        let n = template.vertex_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eg_net =
            Mlp::new(&[input_dim, PREDICTOR_HIDDEN_WIDTH, PREDICTOR_HIDDEN_WIDTH, 6 * k], true, &mut rng);
        let delta_net =
            Mlp::new(&[input_dim, PREDICTOR_HIDDEN_WIDTH, PREDICTOR_HIDDEN_WIDTH, 3 * n], true, &mut rng);
        MotionPredictor { eg_net, delta_net, node_count: k, vertex_count: n, window_extent }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn window_extent(&self) -> usize {
        self.window_extent
    }

    pub fn check_binding(&self, template: &TemplateMesh) -> Result<(), CharModelError> {
        if template.node_count() != self.node_count || template.vertex_count() != self.vertex_count {
            return Err(CharModelError::ShapeMismatch(format!(
                "predictor bound to K={} N={}, template has K={} N={}",
                self.node_count,
                self.vertex_count,
                template.node_count(),
                template.vertex_count()
            )));
        }
        Ok(())
    }
}

/// Encoded length of a motion window with extent T: per pose, sin and cos of
/// each joint angle plus root rotation plus current-relative root translation.
pub fn encoded_motion_len(window_extent: usize) -> usize {
    (window_extent + 1) * (2 * JOINT_ANGLE_COUNT + 6)
}

/// Deterministic fixed-length motion encoding. Root translations are taken
/// relative to the current frame's root so a global shift leaves the encoding
/// unchanged.
pub fn encode_motion(motion: &SkeletalMotion) -> Result<Vec<f64>, CharModelError> {
    motion.validate()?;
    let current_root = motion.current().root_translation;
    let mut out = Vec::with_capacity(encoded_motion_len(motion.extent()));
    for pose in &motion.window {
        for &angle in &pose.joint_angles {
            out.push(crate::math::flt::sin(angle));
            out.push(crate::math::flt::cos(angle));
        }
        out.extend_from_slice(&pose.root_rotation.to_array());
        out.extend_from_slice(&(pose.root_translation - current_root).to_array());
    }
    Ok(out)
}

/// Runs both predictor networks on the encoded motion.
pub fn predict_deformation(
    predictor: &MotionPredictor,
    motion: &SkeletalMotion,
) -> Result<(EmbeddedParams, DisplacementField), CharModelError> {
    let encoded = encode_motion(motion)?;
    if encoded.len() != predictor.eg_net.input_dim() {
        return Err(CharModelError::ShapeMismatch(format!(
            "motion encodes to {} values, predictor expects {}",
            encoded.len(),
            predictor.eg_net.input_dim()
        )));
    }
    let eg_out = predictor.eg_net.forward(&encoded, 1);
    let delta_out = predictor.delta_net.forward(&encoded, 1);
    Ok((unpack_embedded(&eg_out, predictor.node_count), unpack_displacements(&delta_out)))
}

fn unpack_embedded(raw: &[f64], node_count: usize) -> EmbeddedParams {
    let mut rotations = Vec::with_capacity(node_count);
    let mut translations = Vec::with_capacity(node_count);
    for k in 0..node_count {
        rotations.push(Vec3::new(raw[3 * k], raw[3 * k + 1], raw[3 * k + 2]));
        let off = 3 * node_count;
        translations.push(Vec3::new(raw[off + 3 * k], raw[off + 3 * k + 1], raw[off + 3 * k + 2]));
    }
    EmbeddedParams { node_rotations: rotations, node_translations: translations }
}

fn unpack_displacements(raw: &[f64]) -> DisplacementField {
    DisplacementField {
        displacements: raw.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
    }
}

/// Embedded deformation in canonical space:
/// `v' = v + sum_k w_jk (R(A_k)(v - g_k) - (v - g_k) + T_k)`.
///
/// Algebraically equal to the usual `sum_k w_jk (R(A_k)(v-g_k) + g_k + T_k)`
/// for convex weights, but reproduces the rest mesh bitwise at zero
/// parameters.
pub fn apply_embedded_deformation(template: &TemplateMesh, params: &EmbeddedParams) -> Vec<Vec3> {
    let k = template.node_count();
    assert_eq!(params.node_count(), k, "embedded parameter count must match the graph");
    let nodes = template.node_positions();
    let rotations: Vec<Mat3> = params.node_rotations.iter().map(|&a| rotation_from_axis_angle(a)).collect();
    template
        .rest_vertices
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let weights = &template.node_weights[j * k..(j + 1) * k];
            let mut out = v;
            for (idx, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let u = v - nodes[idx];
                out += (rotations[idx].mul_vec(u) - u + params.node_translations[idx]) * w;
            }
            out
        })
        .collect()
}

/// Gradients of [`apply_embedded_deformation`] w.r.t. the node parameters,
/// given upstream gradients on the canonical output vertices.
pub fn embedded_deformation_backward(
    template: &TemplateMesh,
    params: &EmbeddedParams,
    grad_canonical: &[Vec3],
) -> EmbeddedParams {
    let k = template.node_count();
    let nodes = template.node_positions();
    let mut grad_rot = vec![Vec3::ZERO; k];
    let mut grad_trans = vec![Vec3::ZERO; k];
    for (j, &v) in template.rest_vertices.iter().enumerate() {
        let weights = &template.node_weights[j * k..(j + 1) * k];
        let g = grad_canonical[j];
        for (idx, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            grad_trans[idx] += g * w;
            let jac = rotate_point_jacobian(params.node_rotations[idx], v - nodes[idx]);
            grad_rot[idx] += jac.transpose().mul_vec(g) * w;
        }
    }
    EmbeddedParams { node_rotations: grad_rot, node_translations: grad_trans }
}

/// World transform of every joint for the given pose (identity root; the
/// root rigid motion is applied after skinning).
pub fn forward_kinematics(skeleton: &Skeleton, pose: &SkeletalPose) -> Vec<Rigid> {
    let mut out: Vec<Rigid> = Vec::with_capacity(skeleton.joints.len());
    for joint in &skeleton.joints {
        let mut local = Mat3::IDENTITY;
        for axis in &joint.axes {
            let angle = pose.joint_angles[axis.angle_index];
            local = local.mul_mat(&rotation_from_axis_angle(axis.axis * angle));
        }
        let own = Rigid::new(local, Vec3::ZERO);
        let offset = Rigid::new(Mat3::IDENTITY, joint.rest_offset);
        let world = match joint.parent {
            Some(p) => out[p].compose(&offset).compose(&own),
            None => offset.compose(&own),
        };
        out.push(world);
    }
    out
}

/// Per-joint skinning transforms `posed * rest^-1`.
pub fn skinning_transforms(skeleton: &Skeleton, pose: &SkeletalPose) -> Vec<Rigid> {
    let rest_pose = SkeletalPose {
        joint_angles: vec![0.0; JOINT_ANGLE_COUNT],
        root_rotation: Vec3::ZERO,
        root_translation: Vec3::ZERO,
    };
    let rest = forward_kinematics(skeleton, &rest_pose);
    let posed = forward_kinematics(skeleton, pose);
    posed.iter().zip(rest.iter()).map(|(p, r)| p.compose(&r.inverse())).collect()
}

/// Output of [`skin`] plus the per-vertex linear maps needed for backprop.
pub struct SkinCache {
    /// `M_j = R_root * (I + sum_i w_ji (L_i - I))`: the Jacobian of the posed
    /// vertex w.r.t. its canonical position (and displacement).
    pub vertex_jacobians: Vec<Mat3>,
}

/// Applies displacements in canonical space, then linear blend skinning with
/// forward kinematics, then the root rotation and translation; recomputes
/// area-weighted vertex normals.
pub fn skin(
    template: &TemplateMesh,
    canonical_vertices: &[Vec3],
    displacements: &DisplacementField,
    pose: &SkeletalPose,
    skeleton: &Skeleton,
) -> Result<DeformedMesh, CharModelError> {
    Ok(skin_with_cache(template, canonical_vertices, displacements, pose, skeleton)?.0)
}

pub fn skin_with_cache(
    template: &TemplateMesh,
    canonical_vertices: &[Vec3],
    displacements: &DisplacementField,
    pose: &SkeletalPose,
    skeleton: &Skeleton,
) -> Result<(DeformedMesh, SkinCache), CharModelError> {
    pose.validate()?;
    let n = template.vertex_count();
    let j = template.joint_count;
    if canonical_vertices.len() != n || displacements.displacements.len() != n {
        return Err(CharModelError::ShapeMismatch(String::from("vertex buffers do not match the template")));
    }
    if skeleton.joint_count() != j {
        return Err(CharModelError::ShapeMismatch(format!(
            "template expects {j} joints, skeleton has {}",
            skeleton.joint_count()
        )));
    }
    let transforms = skinning_transforms(skeleton, pose);
    let root_rotation = rotation_from_axis_angle(pose.root_rotation);
    let mut vertices = Vec::with_capacity(n);
    let mut jacobians = Vec::with_capacity(n);
    for v_idx in 0..n {
        let p = canonical_vertices[v_idx] + displacements.displacements[v_idx];
        let weights = &template.skinning_weights[v_idx * j..(v_idx + 1) * j];
        // v + sum_i w_i (S_i v - v) reproduces the input bitwise when all
        // transforms are the identity, unlike the plain convex blend.
        let mut blended = p;
        let mut jac = Mat3::IDENTITY;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            blended += (transforms[i].apply(p) - p) * w;
            jac = jac.add_mat(&transforms[i].rotation.add_mat(&Mat3::IDENTITY.scale(-1.0)).scale(w));
        }
        vertices.push(root_rotation.mul_vec(blended) + pose.root_translation);
        jacobians.push(root_rotation.mul_mat(&jac));
    }
    let mesh = DeformedMesh::from_vertices(vertices, template.topology.clone());
    Ok((mesh, SkinCache { vertex_jacobians: jacobians }))
}

/// Pulls gradients on posed vertices back to the canonical positions (and,
/// identically, the displacements). Gradients do not flow through the
/// recomputed normals; all downstream losses act on vertex positions.
pub fn skin_backward(cache: &SkinCache, grad_vertices: &[Vec3]) -> Vec<Vec3> {
    cache
        .vertex_jacobians
        .iter()
        .zip(grad_vertices.iter())
        .map(|(m, &g)| m.transpose().mul_vec(g))
        .collect()
}

/// Everything needed to run [`character_backward`] after a forward pass.
pub struct CharacterCache {
    pub encoded_motion: Vec<f64>,
    pub embedded: EmbeddedParams,
    pub displacements: DisplacementField,
    eg_cache: MlpCache,
    delta_cache: MlpCache,
    skin_cache: SkinCache,
}

/// Gradients of a scalar loss w.r.t. both predictor parameter blocks.
pub struct PredictorGrads {
    pub eg: Vec<f64>,
    pub delta: Vec<f64>,
}

/// The full motion-to-mesh composition: predict deformation, apply embedded
/// deformation, then skin. Differentiable w.r.t. the predictor parameters.
pub fn character_forward(
    template: &TemplateMesh,
    skeleton: &Skeleton,
    predictor: &MotionPredictor,
    motion: &SkeletalMotion,
) -> Result<DeformedMesh, CharModelError> {
    Ok(character_forward_with_cache(template, skeleton, predictor, motion)?.0)
}

pub fn character_forward_with_cache(
    template: &TemplateMesh,
    skeleton: &Skeleton,
    predictor: &MotionPredictor,
    motion: &SkeletalMotion,
) -> Result<(DeformedMesh, CharacterCache), CharModelError> {
    predictor.check_binding(template)?;
    let encoded = encode_motion(motion)?;
    if encoded.len() != predictor.eg_net.input_dim() {
        return Err(CharModelError::ShapeMismatch(format!(
            "motion window extent {} does not match predictor extent {}",
            motion.extent(),
            predictor.window_extent()
        )));
    }
    let (eg_out, eg_cache) = predictor.eg_net.forward_with_cache(&encoded, 1);
    let (delta_out, delta_cache) = predictor.delta_net.forward_with_cache(&encoded, 1);
    let embedded = unpack_embedded(&eg_out, predictor.node_count());
    let displacements = unpack_displacements(&delta_out);
    if !embedded.is_finite() || displacements.displacements.iter().any(|d| !d.is_finite()) {
        return Err(CharModelError::InvalidPose(String::from("predictor produced non-finite deformation")));
    }
    let canonical = apply_embedded_deformation(template, &embedded);
    let (mesh, skin_cache) =
        skin_with_cache(template, &canonical, &displacements, motion.current(), skeleton)?;
    Ok((
        mesh,
        CharacterCache { encoded_motion: encoded, embedded, displacements, eg_cache, delta_cache, skin_cache },
    ))
}

/// Exact reverse pass of [`character_forward`]: gradients on the posed
/// vertices become gradients on both predictor parameter vectors.
pub fn character_backward(
    template: &TemplateMesh,
    predictor: &MotionPredictor,
    cache: &CharacterCache,
    grad_vertices: &[Vec3],
) -> PredictorGrads {
    let grad_canonical = skin_backward(&cache.skin_cache, grad_vertices);

    let mut grad_delta_flat = Vec::with_capacity(grad_canonical.len() * 3);
    for g in &grad_canonical {
        grad_delta_flat.extend_from_slice(&g.to_array());
    }
    let (delta_grads, _) = predictor.delta_net.backward(&cache.delta_cache, &grad_delta_flat);

    let grad_embedded = embedded_deformation_backward(template, &cache.embedded, &grad_canonical);
    let k = grad_embedded.node_rotations.len();
    let mut grad_eg_flat = Vec::with_capacity(6 * k);
    for g in &grad_embedded.node_rotations {
        grad_eg_flat.extend_from_slice(&g.to_array());
    }
    for g in &grad_embedded.node_translations {
        grad_eg_flat.extend_from_slice(&g.to_array());
    }
    let (eg_grads, _) = predictor.eg_net.backward(&cache.eg_cache, &grad_eg_flat);

    PredictorGrads { eg: eg_grads, delta: delta_grads }
}

/// Texture-space normal map: world normals encoded as `n * 0.5 + 0.5`.
#[derive(Clone, Debug)]
pub struct NormalMap {
    pub resolution: usize,
    /// Row-major H x W x 3; uncovered texels are (0,0,0).
    pub data: Vec<f64>,
    pub degenerate_triangles: usize,
}

impl NormalMap {
    pub fn texel(&self, row: usize, col: usize) -> [f64; 3] {
        let base = (row * self.resolution + col) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    /// Decodes a texel back to a unit normal; `None` for uncovered texels.
    pub fn decode(&self, row: usize, col: usize) -> Option<Vec3> {
        let t = self.texel(row, col);
        if t == [0.0, 0.0, 0.0] {
            None
        } else {
            Some((Vec3::new(t[0], t[1], t[2]) * 2.0 - Vec3::splat(1.0)).normalized())
        }
    }
}

/// Rasterizes interpolated world-space vertex normals into the UV atlas.
/// Texel centers sit at ((col+0.5)/R, (row+0.5)/R); degenerate UV triangles
/// are skipped and counted.
pub fn render_normal_map(mesh: &DeformedMesh, resolution: usize) -> NormalMap {
    assert!(resolution > 0, "normal map resolution must be positive");
    let r = resolution;
    let mut data = vec![0.0; r * r * 3];
    let mut degenerate = 0usize;
    for (tri, uvs) in mesh.topology.triangles.iter().zip(mesh.topology.corner_uvs.iter()) {
        let p: Vec<[f64; 2]> = uvs.iter().map(|uv| [uv[0] * r as f64, uv[1] * r as f64]).collect();
        let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        if area2.abs() < 1e-12 {
            degenerate += 1;
            continue;
        }
        let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        let col_lo = crate::math::flt::floor(min_x - 0.5).max(0.0) as usize;
        let col_hi = (crate::math::flt::ceil(max_x - 0.5) as isize).min(r as isize - 1).max(0) as usize;
        let row_lo = crate::math::flt::floor(min_y - 0.5).max(0.0) as usize;
        let row_hi = (crate::math::flt::ceil(max_y - 0.5) as isize).min(r as isize - 1).max(0) as usize;
        let normals = [
            mesh.vertex_normals[tri[0]],
            mesh.vertex_normals[tri[1]],
            mesh.vertex_normals[tri[2]],
        ];
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let x = col as f64 + 0.5;
                let y = row as f64 + 0.5;
                let w0 = ((p[1][0] - x) * (p[2][1] - y) - (p[2][0] - x) * (p[1][1] - y)) / area2;
                let w1 = ((p[2][0] - x) * (p[0][1] - y) - (p[0][0] - x) * (p[2][1] - y)) / area2;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let n = (normals[0] * w0 + normals[1] * w1 + normals[2] * w2).normalized();
                let base = (row * r + col) * 3;
                data[base] = n.x * 0.5 + 0.5;
                data[base + 1] = n.y * 0.5 + 0.5;
                data[base + 2] = n.z * 0.5 + 0.5;
            }
        }
    }
    NormalMap { resolution, data, degenerate_triangles: degenerate }
}
