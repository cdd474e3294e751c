//! Dense TSDF reconstruction: integration, raycasting, point-to-plane ICP
//! tracking and labeled surface extraction.
//!
//! Voxel `(i, j, k)` has its center at `origin + (i, j, k) * voxel_size`.
//! Stored tsdf values are signed distances divided by the truncation
//! distance `mu`, positive in free space.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{compute_normals, vertex_map, Intrinsics, NormalImage, PointCloud, Pose, Vec3};
use crate::image::DepthImage;

const UNSET: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeConfig {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    pub max_weight: f32,
    pub num_classes: usize,
    /// Weight each depth sample by its incidence: zero at
    /// `min_incidence_cos`, rising linearly to one head-on.
    pub angle_weighting: bool,
    /// Samples at a flatter incidence than this cosine are ignored when
    /// angle weighting is on.
    pub min_incidence_cos: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            // the synthetic tabletop scenes with a margin
            origin: [-0.8, -0.7, -0.05],
            voxel_size: 0.01,
            dims: [160, 140, 96],
            truncation_voxels: 4.0,
            max_weight: 64.0,
            num_classes: 5,
            angle_weighting: true,
            min_incidence_cos: 0.3,
        }
    }
}

impl VolumeConfig {
    /// Grid covering the axis-aligned box `[lo, hi]`.
    pub fn covering(lo: Vec3, hi: Vec3, voxel_size: f64, num_classes: usize) -> Self {
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / voxel_size).ceil() as usize + 1);
        Self {
            origin: [lo.x, lo.y, lo.z],
            voxel_size,
            dims,
            num_classes,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    origin: Vec3,
    voxel_size: f64,
    dims: [usize; 3],
    truncation: f64,
    max_weight: f32,
    num_classes: usize,
    angle_weighting: bool,
    min_incidence_cos: f64,
    tsdf: Vec<f32>,
    weight: Vec<f32>,
    /// Per voxel, the slot in `sem_probs`/`sem_weight` or `UNSET`.
    sem_index: Vec<u32>,
    sem_probs: Vec<f32>,
    sem_weight: Vec<f32>,
}

/// One voxel seen by a depth frame.
#[derive(Debug, Clone, Copy)]
pub(crate) struct VoxelSighting {
    pub voxel: usize,
    pub pixel: usize,
    /// Measured depth minus voxel depth, meters.
    pub sdf: f64,
}

impl TsdfVolume {
    pub fn new(config: &VolumeConfig) -> Result<Self> {
        if config.voxel_size <= 0.0 || config.truncation_voxels <= 0.0 {
            return Err(Error::InvalidConfig("voxel size and truncation must be positive".into()));
        }
        if config.dims.contains(&0) {
            return Err(Error::InvalidConfig("volume dimensions must be positive".into()));
        }
        if config.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        let n = config.dims.iter().product();
        Ok(Self {
            origin: Vec3::from(config.origin),
            voxel_size: config.voxel_size,
            dims: config.dims,
            truncation: config.truncation_voxels * config.voxel_size,
            max_weight: config.max_weight,
            num_classes: config.num_classes,
            angle_weighting: config.angle_weighting,
            min_incidence_cos: config.min_incidence_cos,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            sem_index: vec![UNSET; n],
            sem_probs: Vec::new(),
            sem_weight: Vec::new(),
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn max_weight(&self) -> f32 {
        self.max_weight
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.tsdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tsdf.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn voxel_center(&self, index: usize) -> Vec3 {
        let [i, j, k] = self.coords(index);
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    pub fn tsdf(&self, index: usize) -> f32 {
        self.tsdf[index]
    }

    pub fn weight(&self, index: usize) -> f32 {
        self.weight[index]
    }

    pub fn tsdf_values(&self) -> &[f32] {
        &self.tsdf
    }

    pub fn weights(&self) -> &[f32] {
        &self.weight
    }

    /// Fused class probabilities, `None` if the voxel never received any.
    pub fn class_probs(&self, index: usize) -> Option<&[f32]> {
        let s = self.sem_index[index];
        (s != UNSET).then(|| {
            let s = s as usize * self.num_classes;
            &self.sem_probs[s..s + self.num_classes]
        })
    }

    pub fn semantic_weight(&self, index: usize) -> f32 {
        match self.sem_index[index] {
            UNSET => 0.0,
            s => self.sem_weight[s as usize],
        }
    }

    /// Probabilities and weight for writing, allocating storage on first use.
    pub(crate) fn semantic_mut(&mut self, index: usize) -> (&mut [f32], &mut f32) {
        if self.sem_index[index] == UNSET {
            self.sem_index[index] = self.sem_weight.len() as u32;
            self.sem_weight.push(0.0);
            self.sem_probs.resize(self.sem_probs.len() + self.num_classes, 0.0);
        }
        let s = self.sem_index[index] as usize;
        let n = self.num_classes;
        (&mut self.sem_probs[s * n..(s + 1) * n], &mut self.sem_weight[s])
    }

    /// Number of voxels carrying semantic storage.
    pub fn semantic_voxels(&self) -> usize {
        self.sem_weight.len()
    }

    /// Calls `f` for every voxel in front of the camera that projects to a
    /// pixel with valid depth.
    pub(crate) fn for_each_sighting(
        &self,
        depth: &DepthImage,
        pose: &Pose,
        intr: &Intrinsics,
        mut f: impl FnMut(VoxelSighting),
    ) {
        let inv = pose.inverse();
        let r = inv.rotation();
        let [nx, ny, nz] = self.dims;
        let s = self.voxel_size;
        let step_i = r.column(0) * s;
        for k in 0..nz {
            for j in 0..ny {
                let first = self.origin + Vec3::new(0.0, j as f64 * s, k as f64 * s);
                let mut c = inv.apply(&first);
                let base = (k * ny + j) * nx;
                for i in 0..nx {
                    if i > 0 {
                        c += step_i;
                    }
                    if c.z <= 0.0 {
                        continue;
                    }
                    let (u, v) = intr.project_camera(&c);
                    let Some((u, v)) = intr.pixel(u, v) else { continue };
                    let pixel = v * intr.width + u;
                    let d = depth.data[pixel] as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    f(VoxelSighting {
                        voxel: base + i,
                        pixel,
                        sdf: d - c.z,
                    });
                }
            }
        }
    }

    /// Trilinear tsdf at `p`, `None` unless all eight neighbors are observed.
    pub fn sample(&self, p: &Vec3) -> Option<f64> {
        let g = (p - self.origin) / self.voxel_size;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let f = g[a].floor();
            if f < 0.0 || f as usize + 1 >= self.dims[a] {
                return None;
            }
            base[a] = f as usize;
            frac[a] = g[a] - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let idx = self.index(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
            if self.weight[idx] <= 0.0 {
                return None;
            }
            let w: f64 = (0..3)
                .map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            acc += w * self.tsdf[idx] as f64;
        }
        Some(acc)
    }

    /// Unit normal from central differences of the interpolated field.
    pub fn gradient_normal(&self, p: &Vec3) -> Option<Vec3> {
        let h = self.voxel_size;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            g[a] = self.sample(&(p + e))? - self.sample(&(p - e))?;
        }
        g.try_normalize(1e-12)
    }

    fn voxel_gradient(&self, index: usize) -> Option<Vec3> {
        let c = self.coords(index);
        let mut g = Vec3::zeros();
        for a in 0..3 {
            if c[a] == 0 || c[a] + 1 >= self.dims[a] {
                return None;
            }
            let mut lo = c;
            let mut hi = c;
            lo[a] -= 1;
            hi[a] += 1;
            let (l, h) = (self.index(lo[0], lo[1], lo[2]), self.index(hi[0], hi[1], hi[2]));
            if self.weight[l] <= 0.0 || self.weight[h] <= 0.0 {
                return None;
            }
            g[a] = (self.tsdf[h] - self.tsdf[l]) as f64 * self.truncation / (2.0 * self.voxel_size);
        }
        Some(g)
    }
}

/// Depth step between 4-neighbors above which a pixel counts as lying on
/// an occlusion boundary, meters.
pub const EDGE_JUMP: f64 = 0.05;

/// Normals with occlusion-boundary pixels removed: a pixel whose depth
/// differs from any 4-neighbor by more than `max_jump` gets no normal.
pub fn edge_aware_normals(depth: &DepthImage, intr: &Intrinsics, max_jump: f64) -> NormalImage {
    let mut normals = compute_normals(depth, intr);
    let w = depth.width;
    for i in 0..normals.data.len() {
        if normals.data[i].is_none() {
            continue;
        }
        // defined normals are never on the border
        let d = depth.data[i];
        if [i - 1, i + 1, i - w, i + w]
            .iter()
            .any(|&n| (depth.data[n] - d).abs() as f64 > max_jump)
        {
            normals.data[i] = None;
        }
    }
    normals
}

/// Per-pixel observation weight: the cosine between the viewing ray and
/// the surface normal, zero below `min_cos` or where the normal is undefined.
/// Without angle weighting every valid pixel weighs 1.
fn observation_weights(depth: &DepthImage, intr: &Intrinsics, angle_weighting: bool, min_cos: f64) -> Vec<f32> {
    if !angle_weighting {
        return depth.data.iter().map(|d| if *d > 0.0 { 1.0 } else { 0.0 }).collect();
    }
    compute_normals(depth, intr)
        .data
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let Some(n) = n else { return 0.0 };
            let ray = intr.ray((i % intr.width) as f64, (i / intr.width) as f64).normalize();
            let c = -Vec3::from(*n).dot(&ray);
            // ramps from zero at the cutoff so a view's influence fades in
            // without a step
            if c < min_cos {
                0.0
            } else {
                ((c - min_cos) / (1.0 - min_cos)) as f32
            }
        })
        .collect()
}

/// Fuses one depth frame into the volume by weighted running average.
pub fn tsdf_integrate(vol: &mut TsdfVolume, depth: &DepthImage, pose: &Pose, intr: &Intrinsics) {
    let mu = vol.truncation;
    let w_max = vol.max_weight;
    let obs = observation_weights(depth, intr, vol.angle_weighting, vol.min_incidence_cos);
    let mut updates = Vec::new();
    vol.for_each_sighting(depth, pose, intr, |s| {
        let o = obs[s.pixel];
        if o > 0.0 && s.sdf > -mu {
            updates.push((s.voxel, (s.sdf / mu).clamp(-1.0, 1.0) as f32, o));
        }
    });
    for (i, t, o) in updates {
        let w = vol.weight[i];
        vol.tsdf[i] = (w * vol.tsdf[i] + o * t) / (w + o);
        vol.weight[i] = (w + o).min(w_max);
    }
}

/// Predicted surface as seen from a camera, in world coordinates.
#[derive(Debug, Clone)]
pub struct ModelMaps {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub vertices: Vec<Option<Vec3>>,
    pub normals: Vec<Option<Vec3>>,
    /// Camera-frame depth of each vertex, 0 where invalid.
    pub depth: DepthImage,
}

impl ModelMaps {
    /// Model built directly from a depth frame (frame-to-frame tracking).
    pub fn from_depth(depth: &DepthImage, pose: &Pose, intr: &Intrinsics) -> Self {
        let verts = vertex_map(depth, intr);
        let normals = edge_aware_normals(depth, intr, EDGE_JUMP);
        let mut vertices = Vec::with_capacity(verts.len());
        let mut world_normals = Vec::with_capacity(verts.len());
        let mut out_depth = DepthImage::filled(depth.width, depth.height, 0.0);
        for (i, (v, n)) in verts.iter().zip(&normals.data).enumerate() {
            match (v, n) {
                (Some(v), Some(n)) => {
                    vertices.push(Some(pose.apply(v)));
                    world_normals.push(Some(pose.rotation() * Vec3::from(*n)));
                    out_depth.data[i] = v.z as f32;
                }
                _ => {
                    vertices.push(None);
                    world_normals.push(None);
                }
            }
        }
        Self {
            pose: *pose,
            intrinsics: *intr,
            vertices,
            normals: world_normals,
            depth: out_depth,
        }
    }

    /// Valid pixels whose 4-neighbors are valid and within `max_jump` in
    /// depth, i.e. away from silhouettes and occlusion boundaries.
    pub fn interior_mask(&self, max_jump: f64) -> Vec<bool> {
        let (w, h) = (self.depth.width, self.depth.height);
        let d = &self.depth.data;
        (0..w * h)
            .map(|i| {
                let (u, v) = (i % w, i / w);
                if d[i] <= 0.0 || self.normals[i].is_none() || u == 0 || v == 0 || u + 1 >= w || v + 1 >= h {
                    return false;
                }
                [i - 1, i + 1, i - w, i + w]
                    .iter()
                    .all(|&n| d[n] > 0.0 && ((d[n] - d[i]).abs() as f64) <= max_jump)
            })
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.vertices.iter().filter(|v| v.is_some()).count()
    }
}

/// Marches each pixel ray to the first positive-to-negative crossing.
pub fn raycast(vol: &TsdfVolume, pose: &Pose, intr: &Intrinsics) -> ModelMaps {
    let (w, h) = (intr.width, intr.height);
    let mut vertices = vec![None; w * h];
    let mut normals = vec![None; w * h];
    let mut depth = DepthImage::filled(w, h, 0.0);
    let origin = *pose.translation();
    let lo = vol.origin;
    let hi = vol.origin + Vec3::new(
        (vol.dims[0] - 1) as f64,
        (vol.dims[1] - 1) as f64,
        (vol.dims[2] - 1) as f64,
    ) * vol.voxel_size;
    let min_step = 0.5 * vol.voxel_size;
    for v in 0..h {
        for u in 0..w {
            let cam_ray = intr.ray(u as f64, v as f64);
            let dir_len = cam_ray.norm();
            let dir = pose.rotation() * (cam_ray / dir_len);
            let Some((t0, t1)) = ray_box(&origin, &dir, &lo, &hi) else { continue };
            let mut t = t0.max(0.0);
            let mut prev: Option<(f64, f64)> = None;
            while t <= t1 {
                let p = origin + dir * t;
                match vol.sample(&p) {
                    Some(f) => {
                        if f < 0.0 {
                            if let Some((tp, fp)) = prev {
                                let tz = tp + (t - tp) * fp / (fp - f);
                                let x = origin + dir * tz;
                                if let Some(n) = vol.gradient_normal(&x) {
                                    let i = v * w + u;
                                    vertices[i] = Some(x);
                                    normals[i] = Some(n);
                                    depth.data[i] = (tz / dir_len) as f32;
                                }
                            }
                            break;
                        }
                        prev = Some((t, f));
                        t += (f * vol.truncation * 0.8).max(min_step);
                    }
                    None => {
                        prev = None;
                        t += min_step;
                    }
                }
            }
        }
    }
    ModelMaps {
        pose: *pose,
        intrinsics: *intr,
        vertices,
        normals,
        depth,
    }
}

fn ray_box(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (x, y) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        t0 = t0.max(x.min(y));
        t1 = t1.min(x.max(y));
    }
    (t0 <= t1 && t1 > 0.0).then_some((t0, t1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the twist update norm.
    pub tolerance: f64,
    pub max_distance: f64,
    pub max_normal_angle_deg: f64,
    pub min_correspondences: usize,
    /// Directions whose Hessian eigenvalue falls below this fraction of the
    /// largest are treated as unconstrained.
    pub degeneracy_ratio: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            tolerance: 1e-6,
            max_distance: 0.05,
            max_normal_angle_deg: 30.0,
            min_correspondences: 100,
            degeneracy_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    pub iterations: usize,
    pub correspondences: usize,
    /// Some motion direction was unobservable and left unchanged.
    pub degenerate: bool,
}

/// Point-to-plane Gauss-Newton alignment of `depth` against `model`, with
/// projective correspondences and updates applied as `exp(xi) * T`.
pub fn icp_track(
    model: &ModelMaps,
    depth: &DepthImage,
    intr: &Intrinsics,
    init: &Pose,
    config: &IcpConfig,
) -> Result<TrackResult> {
    let verts = vertex_map(depth, intr);
    let normals = edge_aware_normals(depth, intr, EDGE_JUMP);
    let cos_max = config.max_normal_angle_deg.to_radians().cos();
    let model_inv = model.pose.inverse();
    let mi = &model.intrinsics;
    let usable = model.interior_mask(EDGE_JUMP);
    let mut pose = *init;
    let mut degenerate = false;
    let mut correspondences = 0;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let mut hess = Matrix6::<f64>::zeros();
        let mut rhs = Vector6::<f64>::zeros();
        correspondences = 0;
        for (p, n_cur) in verts.iter().zip(&normals.data) {
            let (Some(p), Some(n_cur)) = (p, n_cur) else { continue };
            let pw = pose.apply(p);
            let c = model_inv.apply(&pw);
            if c.z <= 0.0 {
                continue;
            }
            let (u, v) = mi.project_camera(&c);
            let Some((u, v)) = mi.pixel(u, v) else { continue };
            let j = v * mi.width + u;
            if !usable[j] {
                continue;
            }
            let (Some(q), Some(n)) = (model.vertices[j], model.normals[j]) else { continue };
            if (pw - q).norm() > config.max_distance {
                continue;
            }
            if (pose.rotation() * Vec3::from(*n_cur)).dot(&n) < cos_max {
                continue;
            }
            let r = n.dot(&(pw - q));
            let jac = Vector6::new(
                pw.y * n.z - pw.z * n.y,
                pw.z * n.x - pw.x * n.z,
                pw.x * n.y - pw.y * n.x,
                n.x,
                n.y,
                n.z,
            );
            hess += jac * jac.transpose();
            rhs -= jac * r;
            correspondences += 1;
        }
        if correspondences < config.min_correspondences {
            return Err(Error::TrackingLost {
                valid: correspondences,
                required: config.min_correspondences,
            });
        }
        let eig = SymmetricEigen::new(hess);
        let max_ev = eig.eigenvalues.max();
        let mut xi = Vector6::zeros();
        for k in 0..6 {
            let ev = eig.eigenvalues[k];
            if ev <= config.degeneracy_ratio * max_ev {
                degenerate = true;
                continue;
            }
            let axis = eig.eigenvectors.column(k);
            xi += axis * (axis.dot(&rhs) / ev);
        }
        let update = Pose::from_twist(xi.fixed_rows::<3>(0).into(), xi.fixed_rows::<3>(3).into());
        pose = update.compose(&pose).orthonormalized();
        if xi.norm() < config.tolerance {
            break;
        }
    }
    Ok(TrackResult {
        pose,
        iterations,
        correspondences,
        degenerate,
    })
}

/// One point per voxel whose tsdf changes sign toward a forward neighbor,
/// moved onto the zero level along the field gradient.
pub fn extract_surface(vol: &TsdfVolume) -> PointCloud {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    let [nx, ny, nz] = vol.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = vol.index(i, j, k);
                let t = vol.tsdf[idx];
                if vol.weight[idx] <= 0.0 || t.abs() >= 0.99 {
                    continue;
                }
                let crossing = [(i + 1 < nx, 1), (j + 1 < ny, nx), (k + 1 < nz, nx * ny)]
                    .into_iter()
                    .any(|(ok, stride)| {
                        if !ok {
                            return false;
                        }
                        let n = idx + stride;
                        let tn = vol.tsdf[n];
                        vol.weight[n] > 0.0 && tn.abs() < 0.99 && (t > 0.0) != (tn > 0.0)
                    });
                if !crossing {
                    continue;
                }
                let Some(g) = vol.voxel_gradient(idx) else { continue };
                let gn = g.norm();
                if gn < 1e-9 {
                    continue;
                }
                let n = g / gn;
                let dist = t as f64 * vol.truncation / gn;
                points.push(vol.voxel_center(idx) - n * dist);
                normals.push(n);
                labels.push(crate::semfuse::voxel_label(vol, idx));
            }
        }
    }
    PointCloud {
        points,
        normals: Some(normals),
        labels: Some(labels),
    }
}

// ---------------------------------------------------------------------------
// File formats

/// ASCII PLY with `x y z nx ny nz label`; unlabeled points get label -1.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let n = cloud.len();
    let mut text = format!(
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\nproperty int label\nend_header\n"
    );
    for i in 0..n {
        let p = cloud.points[i];
        let nrm = cloud.normals.as_ref().map_or(Vec3::zeros(), |ns| ns[i]);
        let label = cloud.labels.as_ref().and_then(|l| l[i]).map_or(-1, i64::from);
        text.push_str(&format!(
            "{} {} {} {} {} {} {label}\n",
            p.x as f32, p.y as f32, p.z as f32, nrm.x as f32, nrm.y as f32, nrm.z as f32
        ));
        if text.len() > 1 << 16 {
            out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
            text.clear();
        }
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(path, "missing ply magic"));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = n.trim().parse::<usize>().ok();
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "missing vertex count"))?;
    let mut cloud = PointCloud {
        points: Vec::with_capacity(count),
        normals: Some(Vec::with_capacity(count)),
        labels: Some(Vec::with_capacity(count)),
    };
    for line in lines.take(count) {
        let f: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad vertex line {line:?}")))?;
        if f.len() != 7 {
            return Err(Error::format(path, format!("expected 7 fields in {line:?}")));
        }
        cloud.points.push(Vec3::new(f[0], f[1], f[2]));
        cloud.normals.as_mut().unwrap().push(Vec3::new(f[3], f[4], f[5]));
        cloud.labels.as_mut().unwrap().push(u8::try_from(f[6] as i64).ok());
    }
    if cloud.points.len() != count {
        return Err(Error::format(path, "fewer vertices than declared"));
    }
    Ok(cloud)
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SMVL";
pub const SNAPSHOT_VERSION: u32 = 1;

impl TsdfVolume {
    /// Little-endian snapshot: magic, version, origin (3×f64), voxel size
    /// (f64), dims (3×u32), truncation (f64), max weight (f32), class count
    /// (u32), angle weighting flag (u32), minimum incidence cosine (f64), then tsdf, weight, probabilities (classes per voxel, zeros when
    /// unset) and semantic weight, all f32 in voxel order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut b = Vec::with_capacity(64 + n * 4 * (3 + self.num_classes));
        b.extend_from_slice(SNAPSHOT_MAGIC);
        b.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        for x in self.origin.iter() {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&self.voxel_size.to_le_bytes());
        for d in self.dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.truncation.to_le_bytes());
        b.extend_from_slice(&self.max_weight.to_le_bytes());
        b.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        b.extend_from_slice(&u32::from(self.angle_weighting).to_le_bytes());
        b.extend_from_slice(&self.min_incidence_cos.to_le_bytes());
        let put = |b: &mut Vec<u8>, v: f32| b.extend_from_slice(&v.to_le_bytes());
        self.tsdf.iter().for_each(|v| put(&mut b, *v));
        self.weight.iter().for_each(|v| put(&mut b, *v));
        for i in 0..n {
            match self.class_probs(i) {
                Some(p) => p.iter().for_each(|v| put(&mut b, *v)),
                None => (0..self.num_classes).for_each(|_| put(&mut b, 0.0)),
            }
        }
        (0..n).for_each(|i| put(&mut b, self.semantic_weight(i)));
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { rest: bytes, path };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::format(path, "not a volume snapshot"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::format(path, format!("unsupported snapshot version {version}")));
        }
        let origin = [r.f64()?, r.f64()?, r.f64()?];
        let voxel_size = r.f64()?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let truncation = r.f64()?;
        let max_weight = r.f32s(1)?[0];
        let num_classes = r.u32()? as usize;
        let angle_weighting = r.u32()? != 0;
        let min_incidence_cos = r.f64()?;
        let mut vol = TsdfVolume::new(&VolumeConfig {
            origin,
            voxel_size,
            dims,
            truncation_voxels: truncation / voxel_size,
            max_weight,
            num_classes,
            angle_weighting,
            min_incidence_cos,
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
        vol.truncation = truncation;
        let n = vol.len();
        vol.tsdf = r.f32s(n)?;
        vol.weight = r.f32s(n)?;
        let probs = r.f32s(n * num_classes)?;
        let sem_w = r.f32s(n)?;
        if !r.rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after volume snapshot"));
        }
        for i in 0..n {
            if sem_w[i] > 0.0 {
                let (p, w) = vol.semantic_mut(i);
                p.copy_from_slice(&probs[i * num_classes..(i + 1) * num_classes]);
                *w = sem_w[i];
            }
        }
        Ok(vol)
    }
}

struct ByteReader<'a> {
    rest: &'a [u8],
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.rest.len() < k {
            return Err(Error::format(self.path, "truncated volume snapshot"));
        }
        let (h, t) = self.rest.split_at(k);
        self.rest = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, k: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * k)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_snapshot(path: &Path, vol: &TsdfVolume) -> Result<()> {
    fs::write(path, vol.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<TsdfVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TsdfVolume::from_bytes(&bytes, path)
}
