//! Pointcloud-guided mesh refinement: robust bidirectional Chamfer loss,
//! silhouette loss over a squared Euclidean distance transform of the mask
//! boundary, Laplacian and edge-length regularizers, the combined mesh
//! objective, and the Adam loop that refines the displacement network while
//! the embedded-deformation network stays frozen.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::charmodel::{
    character_backward, character_forward_with_cache, CharModelError, DeformedMesh, MeshTopology,
    MotionPredictor, SkeletalMotion, Skeleton, TemplateMesh,
};
use crate::math::{flt, Vec3};
use crate::meshops::Camera;
use crate::nn::Adam;
use crate::render::Mask;

#[derive(Debug, Clone, PartialEq)]
pub enum RefineError {
    EmptyInput(String),
    Diverged { iteration: u64, loss: f64, initial: f64 },
    CharModel(CharModelError),
}

impl fmt::Display for RefineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineError::EmptyInput(m) => write!(f, "refine: empty input: {m}"),
            RefineError::Diverged { iteration, loss, initial } => write!(
                f,
                "refine: diverged at iteration {iteration}: loss {loss} vs initial {initial} (>10x for 100 consecutive iterations)"
            ),
            RefineError::CharModel(e) => write!(f, "refine: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RefineError {}

impl From<CharModelError> for RefineError {
    fn from(e: CharModelError) -> Self {
        RefineError::CharModel(e)
    }
}

/// Refinement hyperparameters. Defaults are the production values; desk-scale
/// runs override `iterations`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RefinementConfig {
    /// Robust loss cutoff in meters: squared distances beyond
    /// `outlier_threshold^2` contribute zero loss and zero gradient.
    pub outlier_threshold: f64,
    pub lambda_pc: f64,
    pub lambda_sil: f64,
    pub lambda_laplacian: f64,
    pub lambda_edge: f64,
    /// Points sampled per frame and view during extraction.
    pub points_per_view: usize,
    pub iterations: u64,
    pub learning_rate: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            outlier_threshold: 0.04,
            lambda_pc: 5000.0,
            lambda_sil: 50.0,
            lambda_laplacian: 4000.0,
            lambda_edge: 0.075,
            points_per_view: 8192,
            iterations: 360_000,
            learning_rate: 0.0005,
        }
    }
}

/// Extracted surface points for one frame/view with per-point compositing
/// confidences. Confidences of 1 reproduce the plain bidirectional loss.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TargetPointCloud {
    pub points: Vec<Vec3>,
    pub confidences: Vec<f64>,
}

impl TargetPointCloud {
    pub fn with_unit_confidence(points: Vec<Vec3>) -> TargetPointCloud {
        let confidences = vec![1.0; points.len()];
        TargetPointCloud { points, confidences }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.points.is_empty() {
            return Err(RefineError::EmptyInput(String::from("target pointcloud has no points")));
        }
        if self.points.len() != self.confidences.len() {
            return Err(RefineError::EmptyInput(String::from("confidence count mismatch")));
        }
        if self.points.iter().any(|p| !p.is_finite()) {
            return Err(RefineError::EmptyInput(String::from("non-finite target point")));
        }
        Ok(())
    }
}

/// Exact nearest-neighbor search tree over a fixed point set. Median split
/// on the widest axis; ties break toward the lowest point index.
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<KdNode>,
    order: Vec<usize>,
}

struct KdNode {
    axis: usize,
    split: f64,
    left: usize,
    right: usize,
    start: usize,
    count: usize,
}

const KD_LEAF_SIZE: usize = 8;

impl KdTree {
    pub fn build(points: &[Vec3]) -> KdTree {
        assert!(!points.is_empty(), "kd-tree needs at least one point");
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_kd(&mut nodes, &mut order, points, 0);
        KdTree { points: points.to_vec(), nodes, order }
    }

    /// Index of the nearest point and the squared distance.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        let mut best_idx = usize::MAX;
        let mut best_sq = f64::INFINITY;
        self.nearest_recurse(0, q, &mut best_idx, &mut best_sq);
        (best_idx, best_sq)
    }

    fn nearest_recurse(&self, node_idx: usize, q: Vec3, best_idx: &mut usize, best_sq: &mut f64) {
        let node = &self.nodes[node_idx];
        if node.count > 0 {
            for &idx in &self.order[node.start..node.start + node.count] {
                let d = (self.points[idx] - q).norm_sq();
                if d < *best_sq || (d == *best_sq && idx < *best_idx) {
                    *best_sq = d;
                    *best_idx = idx;
                }
            }
            return;
        }
        let delta = q.component(node.axis) - node.split;
        let (near, far) = if delta <= 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        self.nearest_recurse(near, q, best_idx, best_sq);
        if delta * delta <= *best_sq {
            self.nearest_recurse(far, q, best_idx, best_sq);
        }
    }
}

fn build_kd(nodes: &mut Vec<KdNode>, order: &mut [usize], points: &[Vec3], start: usize) -> usize {
    let count = order.len();
    let node_idx = nodes.len();
    nodes.push(KdNode { axis: 0, split: 0.0, left: 0, right: 0, start, count: 0 });
    if count <= KD_LEAF_SIZE {
        nodes[node_idx].count = count;
        return node_idx;
    }
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.min_by_component(points[i]);
        hi = hi.max_by_component(points[i]);
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = count / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a]
            .component(axis)
            .partial_cmp(&points[b].component(axis))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let split = points[order[mid]].component(axis);
    let (left_slice, right_slice) = order.split_at_mut(mid);
    let left = build_kd(nodes, left_slice, points, start);
    let right = build_kd(nodes, right_slice, points, start + mid);
    nodes[node_idx].axis = axis;
    nodes[node_idx].split = split;
    nodes[node_idx].left = left;
    nodes[node_idx].right = right;
    node_idx
}

/// The robust kernel: squared distances beyond the threshold are zeroed.
#[inline]
pub fn robust_kernel(squared: f64, threshold: f64) -> f64 {
    if squared <= threshold * threshold {
        squared
    } else {
        0.0
    }
}

/// Nearest-neighbor assignments in both directions, frozen for one gradient
/// evaluation (the standard treatment of the min's nondifferentiability).
#[derive(Clone, Debug)]
pub struct ChamferAssignments {
    pub vertex_to_point: Vec<usize>,
    pub point_to_vertex: Vec<usize>,
}

pub fn chamfer_assignments(
    vertices: &[Vec3],
    cloud: &TargetPointCloud,
) -> Result<ChamferAssignments, RefineError> {
    if vertices.is_empty() {
        return Err(RefineError::EmptyInput(String::from("no vertices for chamfer")));
    }
    cloud.validate()?;
    let point_tree = KdTree::build(&cloud.points);
    let vertex_tree = KdTree::build(vertices);
    let vertex_to_point = vertices.iter().map(|&v| point_tree.nearest(v).0).collect();
    let point_to_vertex = cloud.points.iter().map(|&p| vertex_tree.nearest(p).0).collect();
    Ok(ChamferAssignments { vertex_to_point, point_to_vertex })
}

/// Robust bidirectional Chamfer under fixed assignments. Returns the raw
/// (unnormalized) loss and its gradient w.r.t. the vertices. Each term is
/// weighted by the involved target point's confidence.
pub fn robust_chamfer_frozen(
    vertices: &[Vec3],
    cloud: &TargetPointCloud,
    assignments: &ChamferAssignments,
    threshold: f64,
) -> (f64, Vec<Vec3>) {
    let tau_sq = threshold * threshold;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::ZERO; vertices.len()];
    for (j, &v) in vertices.iter().enumerate() {
        let r = assignments.vertex_to_point[j];
        let conf = cloud.confidences[r];
        let diff = v - cloud.points[r];
        let sq = diff.norm_sq();
        if sq <= tau_sq {
            loss += conf * sq;
            grad[j] += diff * (2.0 * conf);
        }
    }
    for (r, &p) in cloud.points.iter().enumerate() {
        let j = assignments.point_to_vertex[r];
        let conf = cloud.confidences[r];
        let diff = vertices[j] - p;
        let sq = diff.norm_sq();
        if sq <= tau_sq {
            loss += conf * sq;
            grad[j] += diff * (2.0 * conf);
        }
    }
    (loss, grad)
}

/// `sum_j eta(min_r |V_j - p_r|^2) + sum_r eta(min_j |p_r - V_j|^2)` with
/// `eta` zeroing terms beyond the threshold; exact nearest neighbors.
pub fn robust_chamfer(
    vertices: &[Vec3],
    cloud: &TargetPointCloud,
    threshold: f64,
) -> Result<(f64, Vec<Vec3>), RefineError> {
    let assignments = chamfer_assignments(vertices, cloud)?;
    Ok(robust_chamfer_frozen(vertices, cloud, &assignments, threshold))
}

/// Squared Euclidean distance (in pixels^2) to the nearest mask-boundary
/// pixel, for every pixel of the grid.
#[derive(Clone, Debug)]
pub struct SilhouetteData {
    pub width: usize,
    pub height: usize,
    pub edt_sq: Vec<f64>,
    pub boundary_pixels: usize,
}

/// A mask pixel is boundary when it is foreground and any 4-neighbor is
/// background. The image border itself does not count: a silhouette cut off
/// by the frame is a framing artifact, not an object contour.
pub fn mask_boundary(mask: &Mask) -> Vec<bool> {
    let (w, h) = (mask.width, mask.height);
    let mut boundary = vec![false; w * h];
    for row in 0..h {
        for col in 0..w {
            if !mask.at(row, col) {
                continue;
            }
            let touches_bg = (row > 0 && !mask.at(row - 1, col))
                || (row + 1 < h && !mask.at(row + 1, col))
                || (col > 0 && !mask.at(row, col - 1))
                || (col + 1 < w && !mask.at(row, col + 1));
            boundary[row * w + col] = touches_bg;
        }
    }
    boundary
}

/// Exact squared EDT of the mask boundary (two-pass 1D lower envelopes).
pub fn mask_boundary_edt(mask: &Mask) -> SilhouetteData {
    let (w, h) = (mask.width, mask.height);
    let boundary = mask_boundary(mask);
    let boundary_pixels = boundary.iter().filter(|&&b| b).count();
    let mut grid: Vec<f64> =
        boundary.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    // Rows.
    let mut row_buf = vec![0.0; w.max(h)];
    for row in 0..h {
        let src: Vec<f64> = (0..w).map(|c| grid[row * w + c]).collect();
        edt_1d(&src, &mut row_buf[..w]);
        for c in 0..w {
            grid[row * w + c] = row_buf[c];
        }
    }
    // Columns.
    for col in 0..w {
        let src: Vec<f64> = (0..h).map(|r| grid[r * w + col]).collect();
        edt_1d(&src, &mut row_buf[..h]);
        for r in 0..h {
            grid[r * w + col] = row_buf[r];
        }
    }
    SilhouetteData { width: w, height: h, edt_sq: grid, boundary_pixels }
}

/// Felzenszwalb-Huttenlocher 1D squared distance transform. Infinite source
/// values carry no parabola; a row without any finite value transforms to
/// all-infinite.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let mut v = vec![0usize; finite.len()];
    let mut z = vec![0.0f64; finite.len() + 1];
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for &q in &finite[1..] {
        let mut s = intersect(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Bilinear sample of the squared EDT at a continuous pixel position plus
/// the exact gradient of the interpolant (pixels^2 per pixel).
pub fn edt_sample(data: &SilhouetteData, px: f64, py: f64) -> (f64, f64, f64) {
    let (w, h) = (data.width, data.height);
    let x = (px - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (py - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (flt::floor(x) as usize).min(w - 2.max(1) - 0);
    let x0 = x0.min(w.saturating_sub(2));
    let y0 = (flt::floor(y) as usize).min(h.saturating_sub(2));
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let v00 = data.edt_sq[y0 * w + x0];
    let v01 = data.edt_sq[y0 * w + x1];
    let v10 = data.edt_sq[y1 * w + x0];
    let v11 = data.edt_sq[y1 * w + x1];
    let value = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    let gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let gy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (value, gx, gy)
}

/// Edge -> adjacent faces map used to find occluding-contour vertices.
pub struct SilhouetteTopology {
    /// (vertex a, vertex b, face 1, optional face 2)
    pub edges: Vec<(usize, usize, usize, Option<usize>)>,
}

pub fn silhouette_topology(topology: &MeshTopology) -> SilhouetteTopology {
    use alloc::collections::BTreeMap;
    let mut map: BTreeMap<(usize, usize), (usize, Option<usize>)> = BTreeMap::new();
    for (f, tri) in topology.triangles.iter().enumerate() {
        for e in 0..3 {
            let a = tri[e];
            let b = tri[(e + 1) % 3];
            let key = (a.min(b), a.max(b));
            map.entry(key)
                .and_modify(|faces| {
                    if faces.1.is_none() {
                        faces.1 = Some(f);
                    }
                })
                .or_insert((f, None));
        }
    }
    SilhouetteTopology {
        edges: map.into_iter().map(|((a, b), (f1, f2))| (a, b, f1, f2)).collect(),
    }
}

/// Vertices on the occluding contour: endpoints of edges whose two adjacent
/// faces face opposite ways w.r.t. the camera, plus open-boundary edges.
pub fn silhouette_boundary_vertices(
    vertices: &[Vec3],
    topology: &MeshTopology,
    sil_topo: &SilhouetteTopology,
    camera_center: Vec3,
) -> Vec<usize> {
    let face_sign = |f: usize| -> f64 {
        let tri = topology.triangles[f];
        let n = (vertices[tri[1]] - vertices[tri[0]]).cross(vertices[tri[2]] - vertices[tri[0]]);
        let centroid = (vertices[tri[0]] + vertices[tri[1]] + vertices[tri[2]]) / 3.0;
        n.dot(centroid - camera_center)
    };
    let mut flags = vec![false; vertices.len()];
    for &(a, b, f1, f2) in &sil_topo.edges {
        let on_contour = match f2 {
            Some(f2) => face_sign(f1) * face_sign(f2) <= 0.0,
            None => true,
        };
        if on_contour {
            flags[a] = true;
            flags[b] = true;
        }
    }
    (0..vertices.len()).filter(|&i| flags[i]).collect()
}

/// Silhouette loss under a fixed boundary-vertex set: mean squared pixel
/// distance from each projected boundary vertex to the nearest mask-boundary
/// pixel. Vertices behind the camera are skipped.
pub fn silhouette_loss_frozen(
    vertices: &[Vec3],
    boundary: &[usize],
    edt: &SilhouetteData,
    camera: &Camera,
) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::ZERO; vertices.len()];
    if boundary.is_empty() || edt.boundary_pixels == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut contributions: Vec<(usize, f64, f64)> = Vec::with_capacity(boundary.len());
    for &v_idx in boundary {
        let Some((px, py, _)) = camera.project(vertices[v_idx]) else { continue };
        let (value, gx, gy) = edt_sample(edt, px, py);
        total += value;
        counted += 1;
        contributions.push((v_idx, gx, gy));
    }
    if counted == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / counted as f64;
    let k = &camera.intrinsics;
    for (v_idx, gx, gy) in contributions {
        let c = camera.to_camera(vertices[v_idx]);
        // d(px)/d(cam), d(py)/d(cam) for the upper-triangular intrinsics.
        let dpx = Vec3::new(
            k.at(0, 0) / c.z,
            k.at(0, 1) / c.z,
            -(k.at(0, 0) * c.x + k.at(0, 1) * c.y) / (c.z * c.z),
        );
        let dpy = Vec3::new(0.0, k.at(1, 1) / c.z, -k.at(1, 1) * c.y / (c.z * c.z));
        let g_cam = dpx * gx + dpy * gy;
        grad[v_idx] += camera.rotation.transpose().mul_vec(g_cam) * scale;
    }
    (total * scale, grad)
}

/// Full silhouette loss: extracts the current occluding contour, then
/// evaluates [`silhouette_loss_frozen`]. An empty mask yields loss 0.
pub fn silhouette_loss(
    mesh: &DeformedMesh,
    camera: &Camera,
    edt: &SilhouetteData,
    sil_topo: &SilhouetteTopology,
) -> (f64, Vec<Vec3>) {
    let boundary =
        silhouette_boundary_vertices(&mesh.vertices, &mesh.topology, sil_topo, camera.center());
    silhouette_loss_frozen(&mesh.vertices, &boundary, edt, camera)
}

/// Unique undirected edges with rest lengths; zero-length rest edges are
/// excluded and counted.
pub struct EdgeList {
    pub edges: Vec<(usize, usize)>,
    pub rest_lengths: Vec<f64>,
    pub excluded_zero_rest: usize,
}

pub fn edge_list(topology: &MeshTopology, rest_vertices: &[Vec3]) -> EdgeList {
    use alloc::collections::BTreeSet;
    let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for tri in &topology.triangles {
        for e in 0..3 {
            let a = tri[e];
            let b = tri[(e + 1) % 3];
            set.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges = Vec::new();
    let mut rest_lengths = Vec::new();
    let mut excluded = 0usize;
    for (a, b) in set {
        let len = (rest_vertices[a] - rest_vertices[b]).norm();
        if len <= 1e-12 {
            excluded += 1;
            continue;
        }
        edges.push((a, b));
        rest_lengths.push(len);
    }
    EdgeList { edges, rest_lengths, excluded_zero_rest: excluded }
}

/// Mean squared edge-length deviation from rest; invariant to rigid motion.
pub fn edge_loss(vertices: &[Vec3], edges: &EdgeList) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::ZERO; vertices.len()];
    if edges.edges.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / edges.edges.len() as f64;
    let mut loss = 0.0;
    for ((&(a, b), &rest), _) in edges.edges.iter().zip(edges.rest_lengths.iter()).zip(0..) {
        let diff = vertices[a] - vertices[b];
        let len = diff.norm();
        let dev = len - rest;
        loss += dev * dev * scale;
        if len > 1e-12 {
            let g = diff * (2.0 * dev * scale / len);
            grad[a] += g;
            grad[b] -= g;
        }
    }
    (loss, grad)
}

/// Per-vertex neighbor lists from the triangle topology.
pub fn vertex_neighbors(topology: &MeshTopology, vertex_count: usize) -> Vec<Vec<usize>> {
    use alloc::collections::BTreeSet;
    let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); vertex_count];
    for tri in &topology.triangles {
        for e in 0..3 {
            let a = tri[e];
            let b = tri[(e + 1) % 3];
            sets[a].insert(b);
            sets[b].insert(a);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Mean squared deviation of uniform-weight Laplacian differentials from the
/// rest pose; the rest mesh scores exactly 0 and global translations vanish.
pub fn laplacian_loss(
    vertices: &[Vec3],
    rest_vertices: &[Vec3],
    neighbors: &[Vec<usize>],
) -> (f64, Vec<Vec3>) {
    let n = vertices.len();
    let mut grad = vec![Vec3::ZERO; n];
    if n == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for j in 0..n {
        if neighbors[j].is_empty() {
            continue;
        }
        let inv = 1.0 / neighbors[j].len() as f64;
        let mut mean_cur = Vec3::ZERO;
        let mut mean_rest = Vec3::ZERO;
        for &k in &neighbors[j] {
            mean_cur += vertices[k];
            mean_rest += rest_vertices[k];
        }
        let delta_cur = vertices[j] - mean_cur * inv;
        let delta_rest = rest_vertices[j] - mean_rest * inv;
        let r = delta_cur - delta_rest;
        loss += r.norm_sq() * scale;
        let g = r * (2.0 * scale);
        grad[j] += g;
        for &k in &neighbors[j] {
            grad[k] -= g * inv;
        }
    }
    (loss, grad)
}

/// Static per-template structures reused across refinement iterations.
pub struct MeshLossTopology {
    pub neighbors: Vec<Vec<usize>>,
    pub edges: EdgeList,
    pub silhouette: SilhouetteTopology,
}

impl MeshLossTopology {
    pub fn build(template: &TemplateMesh) -> MeshLossTopology {
        MeshLossTopology {
            neighbors: vertex_neighbors(&template.topology, template.vertex_count()),
            edges: edge_list(&template.topology, &template.rest_vertices),
            silhouette: silhouette_topology(&template.topology),
        }
    }
}

/// One refinement view: target points plus silhouette supervision.
pub struct RefinementView {
    pub camera: Camera,
    pub cloud: TargetPointCloud,
    pub edt: SilhouetteData,
}

/// One refinement frame: the driving motion and its views.
pub struct RefinementFrame {
    pub motion: SkeletalMotion,
    pub views: Vec<RefinementView>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MeshLossTerms {
    pub total: f64,
    pub pc: f64,
    pub silhouette: f64,
    pub laplacian: f64,
    pub edge: f64,
}

/// The combined objective for one view:
/// `lambda_pc L_pc + lambda_sil L_sil + lambda_lap L_lap + lambda_edge L_edge`,
/// each term normalized by its own count (the Chamfer directions by N and R).
pub fn mesh_loss(
    mesh: &DeformedMesh,
    rest_vertices: &[Vec3],
    topo: &MeshLossTopology,
    view: &RefinementView,
    config: &RefinementConfig,
) -> Result<(MeshLossTerms, Vec<Vec3>), RefineError> {
    let assignments = chamfer_assignments(&mesh.vertices, &view.cloud)?;
    Ok(mesh_loss_frozen(mesh, rest_vertices, topo, view, config, &assignments, None))
}

/// Objective under externally fixed Chamfer assignments and (optionally) a
/// fixed silhouette boundary set; the form finite-difference checks probe.
pub fn mesh_loss_frozen(
    mesh: &DeformedMesh,
    rest_vertices: &[Vec3],
    topo: &MeshLossTopology,
    view: &RefinementView,
    config: &RefinementConfig,
    assignments: &ChamferAssignments,
    frozen_boundary: Option<&[usize]>,
) -> (MeshLossTerms, Vec<Vec3>) {
    let n = mesh.vertex_count();
    let r = view.cloud.len();
    let (pc_raw, pc_grad_raw) =
        robust_chamfer_frozen(&mesh.vertices, &view.cloud, assignments, config.outlier_threshold);
    // Normalize each direction by its count. The raw sum mixes both, so the
    // directions are recomputed against the same assignments for the split.
    let tau_sq = config.outlier_threshold * config.outlier_threshold;
    let mut v_term = 0.0;
    for (j, &v) in mesh.vertices.iter().enumerate() {
        let idx = assignments.vertex_to_point[j];
        let sq = (v - view.cloud.points[idx]).norm_sq();
        if sq <= tau_sq {
            v_term += view.cloud.confidences[idx] * sq;
        }
    }
    let p_term = pc_raw - v_term;
    let pc = v_term / n as f64 + p_term / r as f64;
    // The gradient splits the same way; rebuild it with the normalization.
    let mut grad = vec![Vec3::ZERO; n];
    {
        let _ = pc_grad_raw;
        let wn = config.lambda_pc / n as f64;
        let wr = config.lambda_pc / r as f64;
        for (j, &v) in mesh.vertices.iter().enumerate() {
            let idx = assignments.vertex_to_point[j];
            let conf = view.cloud.confidences[idx];
            let diff = v - view.cloud.points[idx];
            if diff.norm_sq() <= tau_sq {
                grad[j] += diff * (2.0 * conf * wn);
            }
        }
        for (r_idx, &p) in view.cloud.points.iter().enumerate() {
            let j = assignments.point_to_vertex[r_idx];
            let conf = view.cloud.confidences[r_idx];
            let diff = mesh.vertices[j] - p;
            if diff.norm_sq() <= tau_sq {
                grad[j] += diff * (2.0 * conf * wr);
            }
        }
    }

    let (sil, sil_grad) = match frozen_boundary {
        Some(boundary) => silhouette_loss_frozen(&mesh.vertices, boundary, &view.edt, &view.camera),
        None => silhouette_loss(mesh, &view.camera, &view.edt, &topo.silhouette),
    };
    let (lap, lap_grad) = laplacian_loss(&mesh.vertices, rest_vertices, &topo.neighbors);
    let (edge, edge_grad) = edge_loss(&mesh.vertices, &topo.edges);

    for j in 0..n {
        grad[j] += sil_grad[j] * config.lambda_sil
            + lap_grad[j] * config.lambda_laplacian
            + edge_grad[j] * config.lambda_edge;
    }
    let terms = MeshLossTerms {
        total: config.lambda_pc * pc
            + config.lambda_sil * sil
            + config.lambda_laplacian * lap
            + config.lambda_edge * edge,
        pc,
        silhouette: sil,
        laplacian: lap,
        edge,
    };
    (terms, grad)
}

/// Progress record of one refinement run.
#[derive(Clone, Debug)]
pub struct RefineReport {
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Adam refinement of the displacement network only; the embedded-deformation
/// network stays frozen. One random frame and one random view per iteration.
/// Aborts when the loss exceeds 10x the initial for 100 consecutive
/// iterations.
pub fn refine_displacements(
    predictor: &mut MotionPredictor,
    template: &TemplateMesh,
    skeleton: &Skeleton,
    frames: &[RefinementFrame],
    config: &RefinementConfig,
    seed: u64,
) -> Result<RefineReport, RefineError> {
    if frames.is_empty() || frames.iter().any(|f| f.views.is_empty()) {
        return Err(RefineError::EmptyInput(String::from("refinement needs frames with views")));
    }
    for frame in frames {
        for view in &frame.views {
            view.cloud.validate()?;
        }
    }
    let topo = MeshLossTopology::build(template);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(predictor.delta_net.param_len(), config.learning_rate);
    let mut loss_curve = Vec::with_capacity(config.iterations as usize);
    let mut initial_loss = None;
    let mut over_budget_streak = 0u32;
    for iteration in 0..config.iterations {
        let frame = &frames[rng.gen_range(0..frames.len())];
        let view = &frame.views[rng.gen_range(0..frame.views.len())];
        let (mesh, cache) =
            character_forward_with_cache(template, skeleton, predictor, &frame.motion)?;
        let (terms, grad_v) = mesh_loss(&mesh, &template.rest_vertices, &topo, view, config)?;
        let grads = character_backward(template, predictor, &cache, &grad_v);
        adam.step(predictor.delta_net.params_mut(), &grads.delta);
        loss_curve.push(terms.total);
        let initial = *initial_loss.get_or_insert(terms.total);
        if terms.total > 10.0 * initial && initial > 0.0 {
            over_budget_streak += 1;
            if over_budget_streak >= 100 {
                return Err(RefineError::Diverged { iteration, loss: terms.total, initial });
            }
        } else {
            over_budget_streak = 0;
        }
    }
    let initial_loss = initial_loss.unwrap_or(0.0);
    let final_loss = loss_curve.last().copied().unwrap_or(initial_loss);
    Ok(RefineReport { loss_curve, initial_loss, final_loss })
}

// The alternating training schedule lives in the training module (it drives
// both the field trainer and this refinement loop) and is re-exported here.
pub use crate::training::{alternate_training, AlternateReport, AlternateSchedule};
