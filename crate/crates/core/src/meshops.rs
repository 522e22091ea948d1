//! Ray-independent mesh geometry services: exact closest-point queries over a
//! bounding volume hierarchy, inside/outside classification with
//! angle-weighted pseudonormals, normalized signed distance, z-buffer depth
//! rasterization, depth-map erosion/dilation, and pinhole cameras.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::charmodel::{weld_map, DeformedMesh};
use crate::math::{flt, Mat3, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub enum MeshOpsError {
    InvalidCamera(String),
    EmptyMesh,
    InvalidKernel(usize),
}

impl fmt::Display for MeshOpsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshOpsError::InvalidCamera(m) => write!(f, "meshops: invalid camera: {m}"),
            MeshOpsError::EmptyMesh => write!(f, "meshops: operation requires a non-empty mesh"),
            MeshOpsError::InvalidKernel(k) => write!(f, "meshops: kernel must be odd and >= 1, got {k}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MeshOpsError {}

/// Pinhole camera: upper-triangular intrinsics (pixels) and a world-to-camera
/// rigid transform; the camera looks down +z.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Camera {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<(), MeshOpsError> {
        let k = &self.intrinsics;
        if k.at(1, 0) != 0.0 || k.at(2, 0) != 0.0 || k.at(2, 1) != 0.0 || (k.at(2, 2) - 1.0).abs() > 1e-12 {
            return Err(MeshOpsError::InvalidCamera(String::from(
                "intrinsics must be upper triangular with unit scale",
            )));
        }
        if k.at(0, 0) <= 0.0 || k.at(1, 1) <= 0.0 {
            return Err(MeshOpsError::InvalidCamera(String::from("focal lengths must be positive")));
        }
        if self.rotation.orthonormality_error() > 1e-6 {
            return Err(MeshOpsError::InvalidCamera(format!(
                "rotation is not orthonormal (error {})",
                self.rotation.orthonormality_error()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(MeshOpsError::InvalidCamera(String::from("zero resolution")));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.rotation.transpose().mul_vec(-self.translation)
    }

    #[inline]
    pub fn to_camera(&self, x: Vec3) -> Vec3 {
        self.rotation.mul_vec(x) + self.translation
    }

    /// Projects a world point to continuous pixel coordinates and depth
    /// (camera-space z). Points at or behind the camera plane return None.
    pub fn project(&self, x: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(x);
        if c.z <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        let px = (k.at(0, 0) * c.x + k.at(0, 1) * c.y) / c.z + k.at(0, 2);
        let py = k.at(1, 1) * c.y / c.z + k.at(1, 2);
        Some((px, py, c.z))
    }
}

/// World-space ray through a continuous image point: origin at the camera
/// center, unit direction. Callers pass pixel centers as (col+0.5, row+0.5).
pub fn pixel_ray(camera: &Camera, px: f64, py: f64) -> (Vec3, Vec3) {
    let k = &camera.intrinsics;
    let y = (py - k.at(1, 2)) / k.at(1, 1);
    let x = (px - k.at(0, 2) - k.at(0, 1) * y) / k.at(0, 0);
    let dir_cam = Vec3::new(x, y, 1.0);
    let dir = camera.rotation.transpose().mul_vec(dir_cam).normalized();
    (camera.center(), dir)
}

/// Globally nearest surface point.
#[derive(Clone, Copy, Debug)]
pub struct ClosestPointResult {
    pub point: Vec3,
    pub triangle: usize,
    pub barycentric: [f64; 3],
    pub uv: [f64; 2],
    pub distance: f64,
}

/// Closest point on a triangle to `p`, with exact barycentric coordinates
/// (vertex and edge regions produce exact zeros, which downstream feature
/// classification relies on).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        let v = if denom > 0.0 { d1 / denom } else { 0.0 };
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        let w = if denom > 0.0 { d2 / denom } else { 0.0 };
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        let w = if denom > 0.0 { (d4 - d3) / denom } else { 0.0 };
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = va + vb + vc;
    if denom <= 0.0 {
        // Degenerate triangle; fall back to the nearest vertex.
        let candidates = [(a, [1.0, 0.0, 0.0]), (b, [0.0, 1.0, 0.0]), (c, [0.0, 0.0, 1.0])];
        let mut best = candidates[0];
        let mut best_d = (p - best.0).norm_sq();
        for cand in &candidates[1..] {
            let d = (p - cand.0).norm_sq();
            if d < best_d {
                best_d = d;
                best = *cand;
            }
        }
        return best;
    }
    let inv = 1.0 / denom;
    let v = vb * inv;
    let w = vc * inv;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Ray/triangle test (Moller-Trumbore). Returns the ray parameter and the
/// barycentric (u, v) of the hit with respect to corners b and c.
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<(f64, f64, f64)> {
    let ab = b - a;
    let ac = c - a;
    let pvec = dir.cross(ac);
    let det = ab.dot(pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(pvec) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(ab);
    let v = dir.dot(qvec) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = ac.dot(qvec) * inv_det;
    if t <= 1e-9 {
        return None;
    }
    Some((t, u, v))
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Aabb {
        Aabb { min: Vec3::splat(f64::INFINITY), max: Vec3::splat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: Vec3) {
        self.min = self.min.min_by_component(p);
        self.max = self.max.max_by_component(p);
    }

    fn union(&mut self, other: &Aabb) {
        self.min = self.min.min_by_component(other.min);
        self.max = self.max.max_by_component(other.max);
    }

    fn dist_sq(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for axis in 0..3 {
            let v = p.component(axis);
            let lo = self.min.component(axis);
            let hi = self.max.component(axis);
            let e = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d += e * e;
        }
        d
    }

    /// Slab test; true when the ray hits the box before `t_max`.
    fn ray_hits(&self, origin: Vec3, inv_dir: Vec3, t_max: f64) -> bool {
        let mut t0 = 1e-9_f64;
        let mut t1 = t_max;
        for axis in 0..3 {
            let inv = inv_dir.component(axis);
            let o = origin.component(axis);
            let mut near = (self.min.component(axis) - o) * inv;
            let mut far = (self.max.component(axis) - o) * inv;
            if near > far {
                core::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug)]
struct BvhNode {
    aabb: Aabb,
    /// Internal nodes store child indices; leaves store a range into
    /// `tri_indices` with `count > 0`.
    left: usize,
    right: usize,
    start: usize,
    count: usize,
}

/// Exact closest-point and ray-cast acceleration structure over one deformed
/// mesh, with welded pseudonormals for inside/outside queries.
pub struct MeshBvh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    corner_uvs: Vec<[[f64; 2]; 3]>,
    nodes: Vec<BvhNode>,
    tri_indices: Vec<usize>,
    weld: Vec<usize>,
    face_normals: Vec<Vec3>,
    vertex_pseudonormals: Vec<Vec3>,
    edge_normals: BTreeMap<(usize, usize), Vec3>,
}

const BVH_LEAF_SIZE: usize = 4;

impl MeshBvh {
    pub fn build(mesh: &DeformedMesh) -> Result<MeshBvh, MeshOpsError> {
        if mesh.triangle_count() == 0 {
            return Err(MeshOpsError::EmptyMesh);
        }
        let vertices = mesh.vertices.clone();
        let triangles = mesh.topology.triangles.clone();
        let corner_uvs = mesh.topology.corner_uvs.clone();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]) / 3.0)
            .collect();
        let tri_aabbs: Vec<Aabb> = triangles
            .iter()
            .map(|t| {
                let mut bb = Aabb::empty();
                bb.grow(vertices[t[0]]);
                bb.grow(vertices[t[1]]);
                bb.grow(vertices[t[2]]);
                bb
            })
            .collect();
        let mut tri_indices: Vec<usize> = (0..triangles.len()).collect();
        let mut nodes = Vec::new();
        build_node(&mut nodes, &mut tri_indices, &tri_aabbs, &centroids, 0);

        let weld = weld_map(&vertices);
        let face_normals: Vec<Vec3> = triangles
            .iter()
            .map(|t| (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).normalized())
            .collect();
        let mut vertex_pseudonormals = vec![Vec3::ZERO; vertices.len()];
        let mut edge_normals: BTreeMap<(usize, usize), Vec3> = BTreeMap::new();
        for (f, tri) in triangles.iter().enumerate() {
            let n = face_normals[f];
            for corner in 0..3 {
                let i = tri[corner];
                let prev = vertices[tri[(corner + 2) % 3]];
                let next = vertices[tri[(corner + 1) % 3]];
                let e1 = (next - vertices[i]).normalized();
                let e2 = (prev - vertices[i]).normalized();
                let angle = flt::acos(e1.dot(e2).clamp(-1.0, 1.0));
                vertex_pseudonormals[weld[i]] += n * angle;
                let a = weld[tri[corner]];
                let b = weld[tri[(corner + 1) % 3]];
                let key = (a.min(b), a.max(b));
                *edge_normals.entry(key).or_insert(Vec3::ZERO) += n;
            }
        }
        Ok(MeshBvh {
            vertices,
            triangles,
            corner_uvs,
            nodes,
            tri_indices,
            weld,
            face_normals,
            vertex_pseudonormals,
            edge_normals,
        })
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Globally nearest surface point; exact, with ties broken toward the
    /// lowest triangle index.
    pub fn closest_point(&self, x: Vec3) -> ClosestPointResult {
        let mut best = ClosestPointResult {
            point: Vec3::ZERO,
            triangle: usize::MAX,
            barycentric: [0.0; 3],
            uv: [0.0; 2],
            distance: f64::INFINITY,
        };
        let mut best_sq = f64::INFINITY;
        self.closest_recurse(0, x, &mut best, &mut best_sq);
        best.distance = flt::sqrt(best_sq);
        let uvs = self.corner_uvs[best.triangle];
        let b = best.barycentric;
        best.uv = [
            b[0] * uvs[0][0] + b[1] * uvs[1][0] + b[2] * uvs[2][0],
            b[0] * uvs[0][1] + b[1] * uvs[1][1] + b[2] * uvs[2][1],
        ];
        best
    }

    fn closest_recurse(&self, node_idx: usize, x: Vec3, best: &mut ClosestPointResult, best_sq: &mut f64) {
        let node = &self.nodes[node_idx];
        if node.count > 0 {
            for &tri_idx in &self.tri_indices[node.start..node.start + node.count] {
                let t = self.triangles[tri_idx];
                let (point, bary) = closest_point_on_triangle(
                    x,
                    self.vertices[t[0]],
                    self.vertices[t[1]],
                    self.vertices[t[2]],
                );
                let d = (x - point).norm_sq();
                if d < *best_sq || (d == *best_sq && tri_idx < best.triangle) {
                    *best_sq = d;
                    best.point = point;
                    best.triangle = tri_idx;
                    best.barycentric = bary;
                }
            }
            return;
        }
        let dl = self.nodes[node.left].aabb.dist_sq(x);
        let dr = self.nodes[node.right].aabb.dist_sq(x);
        let (first, first_d, second, second_d) =
            if dl <= dr { (node.left, dl, node.right, dr) } else { (node.right, dr, node.left, dl) };
        if first_d <= *best_sq {
            self.closest_recurse(first, x, best, best_sq);
        }
        if second_d <= *best_sq {
            self.closest_recurse(second, x, best, best_sq);
        }
    }

    /// Angle-weighted pseudonormal of the closest feature (face interior,
    /// edge, or vertex), classified from the exact barycentric zeros.
    pub fn pseudonormal(&self, result: &ClosestPointResult) -> Vec3 {
        let tri = self.triangles[result.triangle];
        let b = result.barycentric;
        let zeros: Vec<usize> = (0..3).filter(|&i| b[i] == 0.0).collect();
        match zeros.len() {
            0 => self.face_normals[result.triangle],
            1 => {
                let i = (zeros[0] + 1) % 3;
                let j = (zeros[0] + 2) % 3;
                let a = self.weld[tri[i]];
                let c = self.weld[tri[j]];
                let key = (a.min(c), a.max(c));
                self.edge_normals
                    .get(&key)
                    .map(|n| n.normalized())
                    .unwrap_or(self.face_normals[result.triangle])
            }
            _ => {
                let corner = (0..3).find(|&i| b[i] != 0.0).unwrap_or(0);
                self.vertex_pseudonormals[self.weld[tri[corner]]].normalized()
            }
        }
    }

    /// Nearest ray hit, if any.
    pub fn ray_cast(&self, origin: Vec3, dir: Vec3) -> Option<RayHit> {
        let inv_dir = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<RayHit> = None;
        let mut t_max = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(node_idx) = stack.pop() {
            let node = &self.nodes[node_idx];
            if !node.aabb.ray_hits(origin, inv_dir, t_max) {
                continue;
            }
            if node.count > 0 {
                for &tri_idx in &self.tri_indices[node.start..node.start + node.count] {
                    let t = self.triangles[tri_idx];
                    if let Some((hit_t, u, v)) = ray_triangle(
                        origin,
                        dir,
                        self.vertices[t[0]],
                        self.vertices[t[1]],
                        self.vertices[t[2]],
                    ) {
                        if hit_t < t_max {
                            t_max = hit_t;
                            best = Some(RayHit {
                                t: hit_t,
                                triangle: tri_idx,
                                barycentric: [1.0 - u - v, u, v],
                            });
                        }
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
    pub barycentric: [f64; 3],
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    tri_indices: &mut [usize],
    tri_aabbs: &[Aabb],
    centroids: &[Vec3],
    start: usize,
) -> usize {
    let count = tri_indices.len();
    let mut aabb = Aabb::empty();
    for &t in tri_indices.iter() {
        aabb.union(&tri_aabbs[t]);
    }
    let node_idx = nodes.len();
    nodes.push(BvhNode { aabb, left: 0, right: 0, start, count: 0 });
    if count <= BVH_LEAF_SIZE {
        nodes[node_idx].count = count;
        return node_idx;
    }
    let extent = aabb.max - aabb.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = count / 2;
    tri_indices.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a]
            .component(axis)
            .partial_cmp(&centroids[b].component(axis))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let (left_slice, right_slice) = tri_indices.split_at_mut(mid);
    let left = build_node(nodes, left_slice, tri_aabbs, centroids, start);
    let right = build_node(nodes, right_slice, tri_aabbs, centroids, start + mid);
    nodes[node_idx].left = left;
    nodes[node_idx].right = right;
    node_idx
}

/// Normalized signed distance: negative inside, magnitude divided by `t_mi`
/// inside and `t_ma` outside. Points closer than 1e-9 to the surface return
/// exactly 0.
pub fn signed_distance(bvh: &MeshBvh, x: Vec3, t_mi: f64, t_ma: f64) -> f64 {
    debug_assert!(t_mi > 0.0 && t_ma > 0.0);
    let cp = bvh.closest_point(x);
    if cp.distance < 1e-9 {
        return 0.0;
    }
    let n = bvh.pseudonormal(&cp);
    if (x - cp.point).dot(n) >= 0.0 {
        cp.distance / t_ma
    } else {
        -cp.distance / t_mi
    }
}

/// Depth image: camera-space z at pixel centers; 0 marks background.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> DepthMap {
        DepthMap { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Z-buffer rasterization with perspective-correct depth at pixel centers;
/// the nearest surface wins and background stays 0. Triangles touching the
/// camera plane are skipped. No backface culling: a depth renderer sees both
/// sides.
pub fn rasterize_depth(mesh: &DeformedMesh, camera: &Camera) -> Result<DepthMap, MeshOpsError> {
    camera.validate()?;
    let mut depth = DepthMap::zeros(camera.width, camera.height);
    let projected: Vec<Option<(f64, f64, f64)>> =
        mesh.vertices.iter().map(|&v| camera.project(v)).collect();
    for tri in &mesh.topology.triangles {
        let (Some(p0), Some(p1), Some(p2)) = (projected[tri[0]], projected[tri[1]], projected[tri[2]])
        else {
            continue;
        };
        let area2 = (p1.0 - p0.0) * (p2.1 - p0.1) - (p2.0 - p0.0) * (p1.1 - p0.1);
        if area2.abs() < 1e-14 {
            continue;
        }
        let min_x = p0.0.min(p1.0).min(p2.0);
        let max_x = p0.0.max(p1.0).max(p2.0);
        let min_y = p0.1.min(p1.1).min(p2.1);
        let max_y = p0.1.max(p1.1).max(p2.1);
        if max_x < 0.0 || max_y < 0.0 || min_x >= camera.width as f64 || min_y >= camera.height as f64 {
            continue;
        }
        let col_lo = crate::math::flt::floor(min_x - 0.5).max(0.0) as usize;
        let col_hi = (crate::math::flt::ceil(max_x - 0.5) as isize).clamp(0, camera.width as isize - 1) as usize;
        let row_lo = crate::math::flt::floor(min_y - 0.5).max(0.0) as usize;
        let row_hi = (crate::math::flt::ceil(max_y - 0.5) as isize).clamp(0, camera.height as isize - 1) as usize;
        let inv_z = [1.0 / p0.2, 1.0 / p1.2, 1.0 / p2.2];
        for row in row_lo..=row_hi {
            let y = row as f64 + 0.5;
            for col in col_lo..=col_hi {
                let x = col as f64 + 0.5;
                let w0 = ((p1.0 - x) * (p2.1 - y) - (p2.0 - x) * (p1.1 - y)) / area2;
                let w1 = ((p2.0 - x) * (p0.1 - y) - (p0.0 - x) * (p2.1 - y)) / area2;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let cur = depth.at(row, col);
                if cur == 0.0 || z < cur {
                    depth.set(row, col, z);
                }
            }
        }
    }
    Ok(depth)
}

/// Morphological erosion and dilation of a depth map over a square kernel.
///
/// Dilation is the plain windowed maximum (background zeros participate as
/// 0). Erosion takes the minimum over *foreground* values only, and a pixel
/// belongs to the eroded/dilated support whenever any window pixel is
/// foreground; windows with no foreground produce 0 in both.
pub fn erode_dilate(depth: &DepthMap, kernel: usize) -> Result<(DepthMap, DepthMap), MeshOpsError> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(MeshOpsError::InvalidKernel(kernel));
    }
    let r = kernel / 2;
    let (w, h) = (depth.width, depth.height);
    // Separable two-pass min/max; +inf marks "no foreground" for the min.
    let mut row_min = vec![f64::INFINITY; w * h];
    let mut row_max = vec![0.0_f64; w * h];
    for row in 0..h {
        for col in 0..w {
            let lo = col.saturating_sub(r);
            let hi = (col + r).min(w - 1);
            let mut mn = f64::INFINITY;
            let mut mx = 0.0_f64;
            for c in lo..=hi {
                let v = depth.at(row, c);
                if v > 0.0 && v < mn {
                    mn = v;
                }
                if v > mx {
                    mx = v;
                }
            }
            row_min[row * w + col] = mn;
            row_max[row * w + col] = mx;
        }
    }
    let mut eroded = DepthMap::zeros(w, h);
    let mut dilated = DepthMap::zeros(w, h);
    for row in 0..h {
        let lo = row.saturating_sub(r);
        let hi = (row + r).min(h - 1);
        for col in 0..w {
            let mut mn = f64::INFINITY;
            let mut mx = 0.0_f64;
            for rr in lo..=hi {
                let v = row_min[rr * w + col];
                if v < mn {
                    mn = v;
                }
                let v = row_max[rr * w + col];
                if v > mx {
                    mx = v;
                }
            }
            if mn.is_finite() {
                eroded.set(row, col, mn);
            }
            dilated.set(row, col, mx);
        }
    }
    Ok((eroded, dilated))
}

/// Rendered depth plus its eroded and dilated companions.
#[derive(Clone, Debug)]
pub struct DepthMaps {
    pub depth: DepthMap,
    pub eroded: DepthMap,
    pub dilated: DepthMap,
    pub kernel: usize,
}

impl DepthMaps {
    pub fn compute(mesh: &DeformedMesh, camera: &Camera, kernel: usize) -> Result<DepthMaps, MeshOpsError> {
        let depth = rasterize_depth(mesh, camera)?;
        let (eroded, dilated) = erode_dilate(&depth, kernel)?;
        Ok(DepthMaps { depth, eroded, dilated, kernel })
    }

    /// A ray is considered only when the dilated support covers its pixel.
    #[inline]
    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        self.dilated.at(row, col) > 0.0
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::charmodel::MeshTopology;
    use alloc::sync::Arc;

    fn quad_mesh(z: f64, half: f64) -> DeformedMesh {
        let vertices = vec![
            Vec3::new(-half, -half, z),
            Vec3::new(half, -half, z),
            Vec3::new(half, half, z),
            Vec3::new(-half, half, z),
        ];
        let topology = Arc::new(MeshTopology {
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            corner_uvs: vec![
                [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
                [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            ],
        });
        DeformedMesh::from_vertices(vertices, topology)
    }

    fn simple_camera(w: usize, h: usize) -> Camera {
        let f = w as f64;
        Camera {
            intrinsics: Mat3 { m: [f, 0.0, w as f64 / 2.0, 0.0, f, h as f64 / 2.0, 0.0, 0.0, 1.0] },
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
            width: w,
            height: h,
        }
    }

    pub(crate) fn cube_mesh(size: f64) -> DeformedMesh {
        let h = size / 2.0;
        let corners = [
            Vec3::new(-h, -h, -h),
            Vec3::new(h, -h, -h),
            Vec3::new(h, h, -h),
            Vec3::new(-h, h, -h),
            Vec3::new(-h, -h, h),
            Vec3::new(h, -h, h),
            Vec3::new(h, h, h),
            Vec3::new(-h, h, h),
        ];
        // Quads with outward winding.
        let quads = [
            [0usize, 3, 2, 1], // -z
            [4, 5, 6, 7],      // +z
            [0, 1, 5, 4],      // -y
            [2, 3, 7, 6],      // +y
            [1, 2, 6, 5],      // +x
            [0, 4, 7, 3],      // -x
        ];
        let mut triangles = Vec::new();
        let mut uvs = Vec::new();
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
            uvs.push([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);
            uvs.push([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        }
        DeformedMesh::from_vertices(corners.to_vec(), Arc::new(MeshTopology { triangles, corner_uvs: uvs }))
    }

    #[test]
    fn closest_point_on_vertex_has_zero_distance_and_vertex_uv() {
        let mesh = quad_mesh(0.0, 1.0);
        let bvh = MeshBvh::build(&mesh).unwrap();
        let r = bvh.closest_point(Vec3::new(1.0, -1.0, 0.0));
        assert!(r.distance < 1e-12);
        assert!((r.uv[0] - 1.0).abs() < 1e-12 && r.uv[1].abs() < 1e-12);
    }

    #[test]
    fn closest_point_matches_brute_force_on_random_queries() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        let tri_count = 120;
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut uvs = Vec::new();
        for i in 0..tri_count {
            let base = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            for _ in 0..3 {
                vertices.push(
                    base + Vec3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ),
                );
            }
            triangles.push([3 * i, 3 * i + 1, 3 * i + 2]);
            uvs.push([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        }
        let mesh = DeformedMesh::from_vertices(
            vertices.clone(),
            Arc::new(MeshTopology { triangles: triangles.clone(), corner_uvs: uvs }),
        );
        let bvh = MeshBvh::build(&mesh).unwrap();
        for _ in 0..300 {
            let q = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let fast = bvh.closest_point(q);
            let mut brute = f64::INFINITY;
            for t in &triangles {
                let (p, _) = closest_point_on_triangle(q, vertices[t[0]], vertices[t[1]], vertices[t[2]]);
                brute = brute.min((q - p).norm());
            }
            assert!((fast.distance - brute).abs() <= 1e-9, "bvh {} vs brute {brute}", fast.distance);
        }
    }

    #[test]
    fn signed_distance_sign_and_scaling() {
        let cube = cube_mesh(1.0);
        let bvh = MeshBvh::build(&cube).unwrap();
        // Outside along +x, 0.02 beyond the half-width 0.5 face.
        let outside = signed_distance(&bvh, Vec3::new(0.52, 0.0, 0.0), 0.04, 0.04);
        assert!((outside - 0.5).abs() < 1e-9, "{outside}");
        let inside = signed_distance(&bvh, Vec3::new(0.48, 0.0, 0.0), 0.04, 0.04);
        assert!((inside + 0.5).abs() < 1e-9, "{inside}");
        // Doubling t_ma halves positive outputs exactly; sign is unchanged.
        let half = signed_distance(&bvh, Vec3::new(0.52, 0.0, 0.0), 0.04, 0.08);
        assert_eq!(half, outside / 2.0);
        // Corner queries classify via vertex pseudonormals.
        assert!(signed_distance(&bvh, Vec3::new(0.51, 0.51, 0.51), 0.04, 0.04) > 0.0);
        assert!(signed_distance(&bvh, Vec3::new(0.49, 0.49, 0.49), 0.04, 0.04) < 0.0);
        // On-surface points return exactly zero.
        assert_eq!(signed_distance(&bvh, Vec3::new(0.5, 0.0, 0.0), 0.04, 0.04), 0.0);
    }

    #[test]
    fn rasterize_quad_fills_constant_depth() {
        let mesh = quad_mesh(2.0, 10.0);
        let cam = simple_camera(32, 32);
        let depth = rasterize_depth(&mesh, &cam).unwrap();
        for row in 0..32 {
            for col in 0..32 {
                assert!((depth.at(row, col) - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rasterize_empty_mesh_is_all_zero() {
        let topology = Arc::new(MeshTopology { triangles: vec![], corner_uvs: vec![] });
        let mesh = DeformedMesh::from_vertices(vec![], topology);
        let cam = simple_camera(16, 16);
        let depth = rasterize_depth(&mesh, &cam).unwrap();
        assert!(depth.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn rasterize_mesh_behind_camera_is_all_zero() {
        let mesh = quad_mesh(-2.0, 10.0);
        let cam = simple_camera(16, 16);
        let depth = rasterize_depth(&mesh, &cam).unwrap();
        assert!(depth.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn nearer_triangle_wins_contested_pixels() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cam = simple_camera(24, 24);
        for _ in 0..50 {
            let mut vertices = Vec::new();
            for _ in 0..6 {
                vertices.push(Vec3::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(1.0..3.0),
                ));
            }
            let topology = Arc::new(MeshTopology {
                triangles: vec![[0, 1, 2], [3, 4, 5]],
                corner_uvs: vec![
                    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                ],
            });
            let mesh = DeformedMesh::from_vertices(vertices.clone(), topology);
            let depth = rasterize_depth(&mesh, &cam).unwrap();
            for row in 0..24 {
                for col in 0..24 {
                    let (o, d) = pixel_ray(&cam, col as f64 + 0.5, row as f64 + 0.5);
                    let mut hits = Vec::new();
                    for t in [[0usize, 1, 2], [3usize, 4, 5]] {
                        if let Some((hit_t, u, v)) =
                            ray_triangle(o, d, vertices[t[0]], vertices[t[1]], vertices[t[2]])
                        {
                            // Skip near-edge hits where rasterizer in/out can
                            // legitimately disagree with the ray cast.
                            let w = 1.0 - u - v;
                            if u > 1e-3 && v > 1e-3 && w > 1e-3 {
                                // Stored depth is camera-space z, not ray length.
                                let z = cam.to_camera(o + d * hit_t).z;
                                hits.push(z);
                            }
                        }
                    }
                    if hits.is_empty() {
                        continue;
                    }
                    let expected = hits.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                    let got = depth.at(row, col);
                    assert!(got > 0.0, "pixel ({row},{col}) lost a robust hit");
                    assert!(
                        got <= expected + 1e-9,
                        "stored depth {got} exceeds analytic nearest {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn erode_dilate_constant_map() {
        let mut depth = DepthMap::zeros(16, 16);
        for v in depth.data.iter_mut() {
            *v = 2.0;
        }
        let (e, d) = erode_dilate(&depth, 9).unwrap();
        assert!(e.data.iter().all(|&v| v == 2.0));
        assert!(d.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn erode_dilate_kernel_one_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut depth = DepthMap::zeros(10, 10);
        for v in depth.data.iter_mut() {
            *v = if rng.gen_bool(0.5) { rng.gen_range(0.5..3.0) } else { 0.0 };
        }
        let (e, d) = erode_dilate(&depth, 1).unwrap();
        assert_eq!(e.data, depth.data);
        assert_eq!(d.data, depth.data);
    }

    #[test]
    fn erode_dilate_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for kernel in [3usize, 5, 9] {
            let (w, h) = (32usize, 32usize);
            let mut depth = DepthMap::zeros(w, h);
            for v in depth.data.iter_mut() {
                *v = if rng.gen_bool(0.6) { rng.gen_range(0.5..4.0) } else { 0.0 };
            }
            let (e, d) = erode_dilate(&depth, kernel).unwrap();
            let r = kernel / 2;
            for row in 0..h {
                for col in 0..w {
                    let mut mn = f64::INFINITY;
                    let mut mx = 0.0_f64;
                    for rr in row.saturating_sub(r)..=(row + r).min(h - 1) {
                        for cc in col.saturating_sub(r)..=(col + r).min(w - 1) {
                            let v = depth.at(rr, cc);
                            if v > 0.0 {
                                mn = mn.min(v);
                            }
                            mx = mx.max(v);
                        }
                    }
                    let expect_e = if mn.is_finite() { mn } else { 0.0 };
                    assert_eq!(e.at(row, col), expect_e);
                    assert_eq!(d.at(row, col), mx);
                    if depth.at(row, col) > 0.0 {
                        assert!(e.at(row, col) <= depth.at(row, col));
                        assert!(d.at(row, col) >= depth.at(row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn erode_dilate_monotone_in_kernel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut depth = DepthMap::zeros(20, 20);
        for v in depth.data.iter_mut() {
            *v = if rng.gen_bool(0.5) { rng.gen_range(1.0..2.0) } else { 0.0 };
        }
        let (e3, d3) = erode_dilate(&depth, 3).unwrap();
        let (e7, d7) = erode_dilate(&depth, 7).unwrap();
        for i in 0..depth.data.len() {
            if e3.data[i] > 0.0 && e7.data[i] > 0.0 {
                assert!(e7.data[i] <= e3.data[i]);
            }
            assert!(d7.data[i] >= d3.data[i]);
        }
    }

    #[test]
    fn erode_dilate_rejects_even_kernels() {
        let depth = DepthMap::zeros(4, 4);
        assert!(matches!(erode_dilate(&depth, 4), Err(MeshOpsError::InvalidKernel(4))));
    }

    #[test]
    fn pixel_ray_principal_point_is_optical_axis() {
        let cam = simple_camera(64, 64);
        let (o, d) = pixel_ray(&cam, 32.0, 32.0);
        assert!((o - Vec3::ZERO).norm() < 1e-12);
        assert!((d - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn pixel_ray_directions_are_unit_norm() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let cam = Camera {
            intrinsics: Mat3 { m: [80.0, 2.0, 31.0, 0.0, 75.0, 33.0, 0.0, 0.0, 1.0] },
            rotation: crate::math::rotation_from_axis_angle(Vec3::new(0.2, -0.4, 0.8)),
            translation: Vec3::new(0.3, 1.0, -2.0),
            width: 64,
            height: 64,
        };
        for _ in 0..1000 {
            let px = rng.gen_range(0.0..64.0);
            let py = rng.gen_range(0.0..64.0);
            let (_, d) = pixel_ray(&cam, px, py);
            assert!((d.norm() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn pixel_ray_project_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cam = Camera {
            intrinsics: Mat3 { m: [90.0, 1.5, 30.0, 0.0, 85.0, 35.0, 0.0, 0.0, 1.0] },
            rotation: crate::math::rotation_from_axis_angle(Vec3::new(-0.3, 0.5, 0.1)),
            translation: Vec3::new(1.0, -0.5, 0.25),
            width: 64,
            height: 64,
        };
        cam.validate().unwrap();
        for _ in 0..200 {
            let px = rng.gen_range(1.0..63.0);
            let py = rng.gen_range(1.0..63.0);
            let (o, d) = pixel_ray(&cam, px, py);
            let (qx, qy, _) = cam.project(o + d * 5.0).unwrap();
            assert!((qx - px).abs() <= 1e-6 && (qy - py).abs() <= 1e-6, "({px},{py}) vs ({qx},{qy})");
        }
    }

    #[test]
    fn camera_validation_rejects_bad_intrinsics() {
        let mut cam = simple_camera(8, 8);
        cam.intrinsics.m[3] = 0.5; // lower-triangular entry
        assert!(cam.validate().is_err());
    }

    #[test]
    fn ray_cast_finds_nearest_triangle() {
        let mesh = quad_mesh(2.0, 1.0);
        let bvh = MeshBvh::build(&mesh).unwrap();
        let hit = bvh.ray_cast(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((hit.t - 2.0).abs() < 1e-12);
        assert!(bvh.ray_cast(Vec3::ZERO, Vec3::new(0.0, 0.0, -1.0)).is_none());
    }
}
