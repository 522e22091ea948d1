//! Synthetic scenes: templates with rigs, analytic ground-truth surfaces, a
//! classical shader, camera rings, and motion tracks. The ground-truth
//! images come from ray casts against analytic geometry and share no code
//! path with the trainable field, so they cannot self-confirm.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use shellnerf_core::charmodel::{
    DeformedMesh, Joint, JointAxis, MeshTopology, SkeletalMotion, SkeletalPose, Skeleton,
    TemplateMesh, JOINT_ANGLE_COUNT,
};
use shellnerf_core::math::{rotation_from_axis_angle, Mat3, Vec3};
use shellnerf_core::meshops::{Camera, MeshBvh};
use shellnerf_core::render::{Image, Mask};
use shellnerf_core::training::{Dataset, FrameData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Sphere,
    BumpySphere,
    SwingingCylinder,
    TwoBoneCapsule,
}

impl SceneKind {
    pub fn parse(name: &str) -> Option<SceneKind> {
        match name {
            "sphere" => Some(SceneKind::Sphere),
            "bumpy-sphere" => Some(SceneKind::BumpySphere),
            "swinging-cylinder" => Some(SceneKind::SwingingCylinder),
            "two-bone-capsule" => Some(SceneKind::TwoBoneCapsule),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Sphere => "sphere",
            SceneKind::BumpySphere => "bumpy-sphere",
            SceneKind::SwingingCylinder => "swinging-cylinder",
            SceneKind::TwoBoneCapsule => "two-bone-capsule",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Shading {
    /// Constant unlit color inside the silhouette.
    Flat { color: [f64; 3] },
    /// Lambertian with a smooth procedural albedo.
    Lambert { light: Vec3, ambient: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub kind: SceneKind,
    pub cameras: usize,
    pub heldout_cameras: usize,
    pub image_size: usize,
    pub frames: usize,
    /// Motion window extent T (window holds T+1 poses).
    pub window_extent: usize,
    pub radius: f64,
    pub camera_distance: f64,
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    /// Every n-th vertex becomes an embedded-graph node.
    pub graph_node_stride: usize,
    pub bump_amplitude: f64,
    pub bump_frequency: f64,
    pub swing_amplitude: f64,
    pub shading: Shading,
}

impl SceneParams {
    pub fn preset(kind: SceneKind) -> SceneParams {
        let base = SceneParams {
            kind,
            cameras: 8,
            heldout_cameras: 2,
            image_size: 64,
            frames: 1,
            window_extent: 2,
            radius: 1.0,
            camera_distance: 3.0,
            mesh_rows: 48,
            mesh_cols: 96,
            graph_node_stride: 37,
            bump_amplitude: 0.0,
            bump_frequency: 3.0,
            swing_amplitude: 0.0,
            shading: Shading::Lambert { light: Vec3::new(0.4, 0.8, -0.45), ambient: 0.35 },
        };
        match kind {
            SceneKind::Sphere => base,
            SceneKind::BumpySphere => SceneParams { bump_amplitude: 0.03, ..base },
            SceneKind::SwingingCylinder => SceneParams {
                frames: 8,
                swing_amplitude: 0.5,
                mesh_rows: 40,
                mesh_cols: 64,
                ..base
            },
            SceneKind::TwoBoneCapsule => SceneParams {
                frames: 4,
                swing_amplitude: PI / 2.0,
                mesh_rows: 48,
                mesh_cols: 48,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cameras < 2 || self.heldout_cameras >= self.cameras {
            return Err(format!(
                "need at least 2 cameras with fewer held out ({} vs {})",
                self.heldout_cameras, self.cameras
            ));
        }
        if self.image_size < 8 {
            return Err(String::from("image size must be at least 8"));
        }
        if self.frames == 0 {
            return Err(String::from("at least one frame required"));
        }
        if self.radius <= 0.0 || self.camera_distance <= self.radius {
            return Err(String::from("camera distance must exceed the radius"));
        }
        if self.mesh_rows < 4 || self.mesh_cols < 8 {
            return Err(String::from("mesh resolution too low"));
        }
        if self.bump_amplitude < 0.0 || self.bump_amplitude >= self.radius {
            return Err(String::from("bump amplitude out of range"));
        }
        Ok(())
    }
}

/// Complete synthetic capture: rigged template plus ground-truth views and
/// per-frame analytic surfaces.
pub struct SyntheticScene {
    pub params: SceneParams,
    pub seed: u64,
    pub template: TemplateMesh,
    pub skeleton: Skeleton,
    pub dataset: Dataset,
    /// Analytic ground-truth surface mesh per frame (template resolution).
    pub gt_meshes: Vec<DeformedMesh>,
}

/// Fills the joint-angle slots a scene's driving joints do not use with a
/// chain of far-away parking joints so every pose entry maps to one axis.
fn park_remaining_angles(joints: &mut Vec<Joint>, mut next_angle: usize) {
    while next_angle < JOINT_ANGLE_COUNT {
        let mut axes = Vec::new();
        for (i, axis) in
            [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)]
                .into_iter()
                .enumerate()
        {
            if next_angle + i < JOINT_ANGLE_COUNT {
                axes.push(JointAxis { angle_index: next_angle + i, axis });
            }
        }
        joints.push(Joint { parent: Some(0), rest_offset: Vec3::new(50.0, 0.0, 0.0), axes });
        next_angle += 3;
    }
}

/// Lat-long sphere grid with duplicated seam column and per-column pole
/// vertices; seam and pole coordinates are copied bit-exactly so welding
/// reconnects them.
fn latlong_grid(rows: usize, cols: usize, surface: impl Fn(f64, f64) -> Vec3) -> (Vec<Vec3>, Arc<MeshTopology>) {
    let mut vertices = Vec::with_capacity((rows + 1) * (cols + 1));
    for i in 0..=rows {
        let v = i as f64 / rows as f64;
        let mut first = Vec3::ZERO;
        for j in 0..=cols {
            let u = j as f64 / cols as f64;
            let p = if j == cols {
                // Seam duplicates the first column bitwise.
                first
            } else if i == 0 || i == rows {
                // One pole position per row, shared bitwise by all columns.
                if j == 0 {
                    surface(0.0, v)
                } else {
                    vertices[i * (cols + 1)]
                }
            } else {
                surface(u, v)
            };
            if j == 0 {
                first = p;
            }
            vertices.push(p);
        }
    }
    let stride = cols + 1;
    let mut triangles = Vec::new();
    let mut uvs = Vec::new();
    let uv_of = |i: usize, j: usize| [j as f64 / cols as f64, i as f64 / rows as f64];
    for i in 0..rows {
        for j in 0..cols {
            let a = i * stride + j;
            let b = i * stride + j + 1;
            let c = (i + 1) * stride + j + 1;
            let d = (i + 1) * stride + j;
            // du x dv points outward for this parameterization, so [a,b,c]
            // and [a,c,d] wind outward. The degenerate pole triangles (two
            // corners on the same pole) are skipped.
            if i != 0 {
                triangles.push([a, b, c]);
                uvs.push([uv_of(i, j), uv_of(i, j + 1), uv_of(i + 1, j + 1)]);
            }
            if i != rows - 1 {
                triangles.push([a, c, d]);
                uvs.push([uv_of(i, j), uv_of(i + 1, j + 1), uv_of(i + 1, j)]);
            }
        }
    }
    (vertices, Arc::new(MeshTopology { triangles, corner_uvs: uvs }))
}

fn sphere_point(radius: f64, u: f64, v: f64) -> Vec3 {
    let theta = v * PI; // polar from +y
    let phi = u * TAU;
    Vec3::new(
        radius * theta.sin() * phi.cos(),
        radius * theta.cos(),
        radius * theta.sin() * phi.sin(),
    )
}

/// Smooth radial bump field over directions, in [-1, 1].
pub fn bump_field(dir: Vec3, frequency: f64) -> f64 {
    ((frequency * PI * dir.x).sin() * (frequency * PI * dir.y).sin()
        + (frequency * PI * dir.z).cos())
        * 0.5
}

/// Radius of the (possibly bumpy) sphere along a unit direction.
pub fn bumpy_radius(params: &SceneParams, dir: Vec3) -> f64 {
    params.radius + params.bump_amplitude * bump_field(dir, params.bump_frequency)
}

fn rigid_sphere_template(params: &SceneParams) -> (TemplateMesh, Skeleton) {
    let (vertices, topology) =
        latlong_grid(params.mesh_rows, params.mesh_cols, |u, v| sphere_point(params.radius, u, v));
    let mut joints = vec![Joint { parent: None, rest_offset: Vec3::ZERO, axes: Vec::new() }];
    park_remaining_angles(&mut joints, 0);
    let skeleton = Skeleton { joints };
    let j = skeleton.joint_count();
    let n = vertices.len();
    let mut skinning_weights = vec![0.0; n * j];
    for row in 0..n {
        skinning_weights[row * j] = 1.0;
    }
    let template = TemplateMesh {
        rest_vertices: vertices,
        topology,
        skinning_weights,
        joint_count: j,
        graph_nodes: Vec::new(),
        node_weights: Vec::new(),
        node_neighbors: Vec::new(),
    };
    (assign_graph_nodes(template, params.graph_node_stride), skeleton)
}

/// Picks every n-th vertex as a graph node and gives each vertex full weight
/// on its nearest node: convex rows with local support.
fn assign_graph_nodes(mut template: TemplateMesh, stride: usize) -> TemplateMesh {
    let n = template.vertex_count();
    let stride = stride.max(1);
    let nodes: Vec<usize> = (0..n).step_by(stride).collect();
    let k = nodes.len();
    let mut weights = vec![0.0; n * k];
    for v_idx in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (slot, &node) in nodes.iter().enumerate() {
            let d = (template.rest_vertices[v_idx] - template.rest_vertices[node]).norm_sq();
            if d < best_d {
                best_d = d;
                best = slot;
            }
        }
        weights[v_idx * k + best] = 1.0;
    }
    // Neighbors: chain in index order (adequate adjacency for a desk rig).
    let mut neighbors = vec![Vec::new(); k];
    for i in 0..k {
        if i > 0 {
            neighbors[i].push(i - 1);
        }
        if i + 1 < k {
            neighbors[i].push(i + 1);
        }
    }
    template.graph_nodes = nodes;
    template.node_weights = weights;
    template.node_neighbors = neighbors;
    template
}

fn cylinder_point(radius: f64, height: f64, u: f64, v: f64) -> Vec3 {
    // Capped lat-long-style cylinder: v in [0, 0.15] spreads over the bottom
    // cap, [0.15, 0.85] over the side, [0.85, 1] over the top cap.
    let phi = u * TAU;
    let (r, y) = if v < 0.15 {
        (radius * (v / 0.15), 0.0)
    } else if v > 0.85 {
        (radius * ((1.0 - v) / 0.15), height)
    } else {
        (radius, (v - 0.15) / 0.7 * height)
    };
    Vec3::new(r * phi.cos(), y, r * phi.sin())
}

fn capsule_point(radius: f64, length: f64, u: f64, v: f64) -> Vec3 {
    // Hemisphere / cylinder / hemisphere along +y, base sphere center at 0.
    let phi = u * TAU;
    let (r, y) = if v < 0.25 {
        let a = (v / 0.25) * (PI / 2.0);
        (radius * a.sin(), -radius * a.cos())
    } else if v > 0.75 {
        let a = ((v - 0.75) / 0.25) * (PI / 2.0);
        (radius * a.cos(), length + radius * a.sin())
    } else {
        (radius, (v - 0.25) / 0.5 * length)
    };
    Vec3::new(r * phi.cos(), y, r * phi.sin())
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Height-ramped swing: rotation about x at the base, with a smooth ramp so
/// the bottom stays put.
fn swing_deform(p: Vec3, angle: f64, height: f64) -> Vec3 {
    let ramp = smoothstep(p.y / height);
    rotation_from_axis_angle(Vec3::new(angle * ramp, 0.0, 0.0)).mul_vec(p)
}

/// Piecewise-rigid elbow bend about z at y = pivot with a narrow smooth
/// blend band.
fn elbow_deform(p: Vec3, angle: f64, pivot: f64, band: f64) -> Vec3 {
    let blend = smoothstep((p.y - (pivot - band)) / (2.0 * band));
    let pivot_point = Vec3::new(0.0, pivot, 0.0);
    let rotated = rotation_from_axis_angle(Vec3::new(0.0, 0.0, angle)).mul_vec(p - pivot_point) + pivot_point;
    p * (1.0 - blend) + rotated * blend
}

fn swinging_cylinder_template(params: &SceneParams) -> (TemplateMesh, Skeleton, f64) {
    let height = 2.0 * params.radius;
    let radius = 0.35 * params.radius;
    let (vertices, topology) = latlong_grid(params.mesh_rows, params.mesh_cols, |u, v| {
        cylinder_point(radius, height, u, v)
    });
    let mut joints = vec![
        Joint { parent: None, rest_offset: Vec3::ZERO, axes: Vec::new() },
        Joint {
            parent: Some(0),
            rest_offset: Vec3::ZERO,
            axes: vec![JointAxis { angle_index: 0, axis: Vec3::new(1.0, 0.0, 0.0) }],
        },
    ];
    park_remaining_angles(&mut joints, 1);
    let skeleton = Skeleton { joints };
    let j = skeleton.joint_count();
    let n = vertices.len();
    let mut skinning_weights = vec![0.0; n * j];
    for (v_idx, v) in vertices.iter().enumerate() {
        let w = smoothstep(v.y / height);
        skinning_weights[v_idx * j] = 1.0 - w;
        skinning_weights[v_idx * j + 1] = w;
    }
    let template = TemplateMesh {
        rest_vertices: vertices,
        topology,
        skinning_weights,
        joint_count: j,
        graph_nodes: Vec::new(),
        node_weights: Vec::new(),
        node_neighbors: Vec::new(),
    };
    (assign_graph_nodes(template, params.graph_node_stride), skeleton, height)
}

fn capsule_template(params: &SceneParams) -> (TemplateMesh, Skeleton, f64) {
    let length = 1.6 * params.radius;
    let radius = 0.3 * params.radius;
    let (vertices, topology) =
        latlong_grid(params.mesh_rows, params.mesh_cols, |u, v| capsule_point(radius, length, u, v));
    let pivot = length / 2.0;
    let mut joints = vec![
        Joint { parent: None, rest_offset: Vec3::ZERO, axes: Vec::new() },
        Joint {
            parent: Some(0),
            rest_offset: Vec3::new(0.0, pivot, 0.0),
            axes: vec![JointAxis { angle_index: 0, axis: Vec3::new(0.0, 0.0, 1.0) }],
        },
    ];
    park_remaining_angles(&mut joints, 1);
    let skeleton = Skeleton { joints };
    let j = skeleton.joint_count();
    let n = vertices.len();
    let band = 0.15 * length;
    let mut skinning_weights = vec![0.0; n * j];
    for (v_idx, v) in vertices.iter().enumerate() {
        let w = smoothstep((v.y - (pivot - band)) / (2.0 * band));
        skinning_weights[v_idx * j] = 1.0 - w;
        skinning_weights[v_idx * j + 1] = w;
    }
    let template = TemplateMesh {
        rest_vertices: vertices,
        topology,
        skinning_weights,
        joint_count: j,
        graph_nodes: Vec::new(),
        node_weights: Vec::new(),
        node_neighbors: Vec::new(),
    };
    (assign_graph_nodes(template, params.graph_node_stride), skeleton, pivot)
}

/// Ring of cameras on a horizontal circle, all aimed at the scene center.
pub fn camera_ring(params: &SceneParams, center: Vec3) -> Vec<Camera> {
    let size = params.image_size;
    let focal = size as f64 * 1.05;
    let mut cameras = Vec::with_capacity(params.cameras);
    for c in 0..params.cameras {
        let angle = c as f64 / params.cameras as f64 * TAU;
        let eye = center
            + Vec3::new(
                params.camera_distance * angle.cos(),
                0.15 * params.camera_distance,
                params.camera_distance * angle.sin(),
            );
        let forward = (center - eye).normalized();
        let up_hint = Vec3::new(0.0, 1.0, 0.0);
        let right = forward.cross(up_hint).normalized();
        let down = forward.cross(right).normalized();
        // Rows of the world->camera rotation: x right, y down, z forward.
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = rotation.mul_vec(-eye);
        cameras.push(Camera {
            intrinsics: Mat3 {
                m: [focal, 0.0, size as f64 / 2.0, 0.0, focal, size as f64 / 2.0, 0.0, 0.0, 1.0],
            },
            rotation,
            translation,
            width: size,
            height: size,
        });
    }
    cameras
}

/// Frame phase in [0, 1).
fn frame_phase(frame: usize, total: usize) -> f64 {
    frame as f64 / total.max(1) as f64
}

/// The scene's driving angle for a frame (entry 0 of the pose).
pub fn drive_angle(params: &SceneParams, frame: usize) -> f64 {
    match params.kind {
        SceneKind::Sphere | SceneKind::BumpySphere => 0.0,
        SceneKind::SwingingCylinder => {
            params.swing_amplitude * (TAU * frame_phase(frame, params.frames)).cos()
        }
        SceneKind::TwoBoneCapsule => {
            params.swing_amplitude * frame_phase(frame, params.frames)
        }
    }
}

fn motion_for_frame(params: &SceneParams, frame: usize) -> SkeletalMotion {
    let mut window = Vec::with_capacity(params.window_extent + 1);
    for back in (0..=params.window_extent).rev() {
        let f = frame.saturating_sub(back);
        let mut pose = SkeletalPose::identity();
        pose.joint_angles[0] = drive_angle(params, f);
        window.push(pose);
    }
    SkeletalMotion::new(window)
}

/// Analytic ground-truth surface: the deformation generator applied to the
/// undeformed analytic shape.
pub fn gt_surface_point(params: &SceneParams, aux: f64, frame: usize, u: f64, v: f64) -> Vec3 {
    match params.kind {
        SceneKind::Sphere | SceneKind::BumpySphere => {
            let base = sphere_point(1.0, u, v);
            base * bumpy_radius(params, base)
        }
        SceneKind::SwingingCylinder => {
            let p = cylinder_point(0.35 * params.radius, aux, u, v);
            swing_deform(p, drive_angle(params, frame), aux)
        }
        SceneKind::TwoBoneCapsule => {
            let p = capsule_point(0.3 * params.radius, 1.6 * params.radius, u, v);
            elbow_deform(p, drive_angle(params, frame), aux, 0.15 * 1.6 * params.radius)
        }
    }
}

/// Ground-truth renderer for one frame: analytic ray casting plus classical
/// shading. For the sphere family the intersection is an exact bracketed
/// root of the radial function; the articulated shapes ray-cast a fine
/// analytic-deformed mesh.
pub struct GroundTruth {
    params: SceneParams,
    frame: usize,
    aux: f64,
    fine_bvh: Option<MeshBvh>,
    fine_normals: Option<(Arc<MeshTopology>, Vec<Vec3>)>,
}

impl GroundTruth {
    pub fn new(params: &SceneParams, aux: f64, frame: usize) -> GroundTruth {
        match params.kind {
            SceneKind::Sphere | SceneKind::BumpySphere => {
                GroundTruth { params: *params, frame, aux, fine_bvh: None, fine_normals: None }
            }
            _ => {
                // Fine mesh at twice the template resolution.
                let (vertices, topology) =
                    latlong_grid(params.mesh_rows * 2, params.mesh_cols * 2, |u, v| {
                        gt_surface_point(params, aux, frame, u, v)
                    });
                let mesh = DeformedMesh::from_vertices(vertices, topology.clone());
                let normals = mesh.vertex_normals.clone();
                let bvh = MeshBvh::build(&mesh).expect("fine ground-truth mesh is non-empty");
                GroundTruth {
                    params: *params,
                    frame,
                    aux,
                    fine_bvh: Some(bvh),
                    fine_normals: Some((topology, normals)),
                }
            }
        }
    }

    /// Nearest analytic hit along the ray: (point, outward normal).
    pub fn ray_cast(&self, origin: Vec3, dir: Vec3) -> Option<(Vec3, Vec3)> {
        match self.params.kind {
            SceneKind::Sphere | SceneKind::BumpySphere => self.cast_radial(origin, dir),
            _ => {
                let bvh = self.fine_bvh.as_ref().unwrap();
                let hit = bvh.ray_cast(origin, dir)?;
                let (topology, normals) = self.fine_normals.as_ref().unwrap();
                let tri = topology.triangles[hit.triangle];
                let b = hit.barycentric;
                let n = (normals[tri[0]] * b[0] + normals[tri[1]] * b[1] + normals[tri[2]] * b[2])
                    .normalized();
                Some((origin + dir * hit.t, n))
            }
        }
    }

    fn radial_value(&self, x: Vec3) -> f64 {
        let r = x.norm();
        if r < 1e-12 {
            return -self.params.radius;
        }
        r - bumpy_radius(&self.params, x / r)
    }

    fn cast_radial(&self, origin: Vec3, dir: Vec3) -> Option<(Vec3, Vec3)> {
        let _ = self.frame;
        let _ = self.aux;
        // Bracket inside the outer bounding sphere.
        let outer = self.params.radius + self.params.bump_amplitude + 1e-9;
        let oc = origin;
        let b = oc.dot(dir);
        let c = oc.norm_sq() - outer * outer;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let t_enter = (-b - disc.sqrt()).max(1e-9);
        let t_exit = -b + disc.sqrt();
        if t_exit <= t_enter {
            return None;
        }
        // March for a sign change, then bisect.
        let steps = 256;
        let dt = (t_exit - t_enter) / steps as f64;
        let mut t_prev = t_enter;
        let mut f_prev = self.radial_value(origin + dir * t_prev);
        let mut bracket = None;
        for i in 1..=steps {
            let t = t_enter + i as f64 * dt;
            let f = self.radial_value(origin + dir * t);
            if f_prev > 0.0 && f <= 0.0 {
                bracket = Some((t_prev, t));
                break;
            }
            t_prev = t;
            f_prev = f;
        }
        let (mut lo, mut hi) = bracket?;
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if self.radial_value(origin + dir * mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        let p = origin + dir * t;
        // Implicit-surface normal by central differences.
        let h = 1e-6;
        let n = Vec3::new(
            self.radial_value(p + Vec3::new(h, 0.0, 0.0)) - self.radial_value(p - Vec3::new(h, 0.0, 0.0)),
            self.radial_value(p + Vec3::new(0.0, h, 0.0)) - self.radial_value(p - Vec3::new(0.0, h, 0.0)),
            self.radial_value(p + Vec3::new(0.0, 0.0, h)) - self.radial_value(p - Vec3::new(0.0, 0.0, h)),
        )
        .normalized();
        Some((p, n))
    }

    /// Smooth procedural albedo over surface points.
    fn albedo(&self, p: Vec3) -> [f64; 3] {
        let d = p.normalized();
        [
            0.55 + 0.35 * (2.0 * PI * d.x).sin() * 0.8,
            0.5 + 0.3 * (2.0 * PI * d.y + 1.3).sin() * 0.8,
            0.45 + 0.3 * (1.5 * PI * d.z + 0.7).cos() * 0.8,
        ]
    }

    pub fn shade(&self, point: Vec3, normal: Vec3) -> [f64; 3] {
        match self.params.shading {
            Shading::Flat { color } => color,
            Shading::Lambert { light, ambient } => {
                let l = light.normalized();
                let diffuse = normal.dot(l).max(0.0);
                let albedo = self.albedo(point);
                let k = ambient + (1.0 - ambient) * diffuse;
                [
                    (albedo[0] * k).clamp(0.0, 1.0),
                    (albedo[1] * k).clamp(0.0, 1.0),
                    (albedo[2] * k).clamp(0.0, 1.0),
                ]
            }
        }
    }

    /// Renders the ground-truth image and mask for one camera.
    pub fn render(&self, camera: &Camera) -> (Image, Mask) {
        let mut image = Image::black(camera.width, camera.height);
        let mut mask = Mask::empty(camera.width, camera.height);
        for row in 0..camera.height {
            for col in 0..camera.width {
                let (o, d) =
                    shellnerf_core::meshops::pixel_ray(camera, col as f64 + 0.5, row as f64 + 0.5);
                if let Some((p, n)) = self.ray_cast(o, d) {
                    image.set(row, col, self.shade(p, n));
                    mask.data[row * camera.width + col] = true;
                }
            }
        }
        (image, mask)
    }
}

/// Uniformly distributed points on the frame's analytic ground-truth
/// surface, for refinement targets and Chamfer oracles.
pub fn analytic_surface_points(
    params: &SceneParams,
    aux: f64,
    frame: usize,
    count: usize,
    seed: u64,
) -> Vec<Vec3> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen_range(0.0..1.0);
        // Area-uniform latitude for the sphere family; uniform (u,v) is an
        // acceptable sampling for the articulated shapes.
        let v: f64 = match params.kind {
            SceneKind::Sphere | SceneKind::BumpySphere => {
                let cos_theta: f64 = rng.gen_range(-1.0..1.0);
                cos_theta.acos() / PI
            }
            _ => rng.gen_range(0.0..1.0),
        };
        out.push(gt_surface_point(params, aux, frame, u, v));
    }
    out
}

/// Builds the full synthetic scene deterministically from parameters.
pub fn gen_scene(params: &SceneParams, seed: u64) -> Result<SyntheticScene, String> {
    params.validate()?;
    let (template, skeleton, aux) = match params.kind {
        SceneKind::Sphere | SceneKind::BumpySphere => {
            let (t, s) = rigid_sphere_template(params);
            (t, s, 0.0)
        }
        SceneKind::SwingingCylinder => swinging_cylinder_template(params),
        SceneKind::TwoBoneCapsule => capsule_template(params),
    };
    template.validate().map_err(|e| e.to_string())?;
    skeleton.validate().map_err(|e| e.to_string())?;
    let center = match params.kind {
        SceneKind::Sphere | SceneKind::BumpySphere => Vec3::ZERO,
        SceneKind::SwingingCylinder => Vec3::new(0.0, params.radius, 0.0),
        SceneKind::TwoBoneCapsule => Vec3::new(0.0, 0.8 * params.radius, 0.0),
    };
    let cameras = camera_ring(params, center);
    // Held-out cameras are spread uniformly around the ring (mirroring a
    // uniformly-sampled held-out rig) so every surface region keeps nearby
    // training views.
    let heldout_cameras: Vec<usize> = (0..params.heldout_cameras)
        .map(|k| params.cameras * (2 * k + 1) / (2 * params.heldout_cameras))
        .collect();
    let train_cameras: Vec<usize> =
        (0..params.cameras).filter(|c| !heldout_cameras.contains(c)).collect();

    let mut frames = Vec::with_capacity(params.frames);
    let mut gt_meshes = Vec::with_capacity(params.frames);
    for frame in 0..params.frames {
        let gt = GroundTruth::new(params, aux, frame);
        let mut images = Vec::with_capacity(cameras.len());
        let mut masks = Vec::with_capacity(cameras.len());
        for camera in &cameras {
            let (image, mask) = gt.render(camera);
            images.push(image);
            masks.push(mask);
        }
        frames.push(FrameData { motion: motion_for_frame(params, frame), images, masks });
        let (vertices, topology) = latlong_grid(params.mesh_rows, params.mesh_cols, |u, v| {
            gt_surface_point(params, aux, frame, u, v)
        });
        gt_meshes.push(DeformedMesh::from_vertices(vertices, topology));
    }
    let dataset = Dataset { cameras, frames, train_cameras, heldout_cameras };
    dataset.validate().map_err(|e| e.to_string())?;
    Ok(SyntheticScene { params: *params, seed, template, skeleton, dataset, gt_meshes })
}
