//! Pinhole camera model, rigid transforms and surface normals.
//!
//! Conventions: camera x right, y down, z forward; integer pixel `(u, v)`
//! samples the ray through `((u - cx) / fx, (v - cy) / fy, 1)` with no
//! half-pixel shift; poses map camera coordinates to world coordinates.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::image::{ColorImage, DepthImage, Image};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && (0.0..width as f64).contains(&cx)
            && (0.0..height as f64).contains(&cy);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "intrinsics fx={fx} fy={fy} cx={cx} cy={cy} for {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square image with focal length equal to the side and a centered
    /// principal point.
    pub fn square(side: usize) -> Self {
        let s = side as f64;
        Self {
            fx: s,
            fy: s,
            cx: s / 2.0,
            cy: s / 2.0,
            width: side,
            height: side,
        }
    }

    /// Camera-frame direction (z = 1) through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Continuous pixel coordinates of a camera-frame point with `z > 0`.
    #[inline]
    pub fn project_camera(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Nearest integer pixel, if inside the image.
    #[inline]
    pub fn pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (ui, vi) = (u.round(), v.round());
        (ui >= 0.0 && vi >= 0.0 && (ui as usize) < self.width && (vi as usize) < self.height)
            .then_some((ui as usize, vi as usize))
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

const ORTHO_TOL: f64 = 1e-6;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if err > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (|RᵀR - I| = {err:.3e}, det = {det:.6})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        let r = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
        };
        Self {
            rotation: r,
            translation: t,
        }
    }

    /// Exponential-map update: rotation vector `omega` and translation `tau`.
    pub fn from_twist(omega: Vec3, tau: Vec3) -> Self {
        Self {
            rotation: Rotation3::new(omega).into_inner(),
            translation: tau,
        }
    }

    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, t: Vec3) -> Result<Self> {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidPose(format!("quaternion norm {} is not 1", q.norm())));
        }
        let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        Ok(Self {
            rotation: r,
            translation: t,
        })
    }

    /// Quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite the
    /// image y axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let f = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("eye and target coincide".into()))?;
        let r = f
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("view direction parallel to up".into()))?;
        let d = f.cross(&r);
        Ok(Self {
            rotation: Matrix3::from_columns(&[r, d, f]),
            translation: eye,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Re-projects the rotation onto SO(3).
    pub fn orthonormalized(&self) -> Pose {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation,
        }
    }

    /// Angle in radians of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

pub fn se3_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn se3_invert(p: &Pose) -> Pose {
    p.inverse()
}

pub fn se3_apply(p: &Pose, x: &Vec3) -> Vec3 {
    p.apply(x)
}

/// Root mean square of positional differences between two trajectories
/// that share their first pose (no further alignment is applied).
pub fn absolute_trajectory_error(estimate: &[Pose], truth: &[Pose]) -> f64 {
    let n = estimate.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.translation - b.translation).norm_squared())
        .sum();
    (ss / n as f64).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub labels: Option<Vec<Option<u8>>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projected camera-frame points with the flat pixel index each came from.
#[derive(Debug, Clone, Default)]
pub struct BackProjection {
    pub cloud: PointCloud,
    pub pixel_index: Vec<usize>,
}

pub fn backproject(depth: &DepthImage, intr: &Intrinsics) -> BackProjection {
    let mut out = BackProjection::default();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.get(u, v) as f64;
            if z > 0.0 {
                out.cloud.points.push(intr.ray(u as f64, v as f64) * z);
                out.pixel_index.push(v * depth.width + u);
            }
        }
    }
    out
}

/// Per-pixel camera-frame vertex, `None` where depth is missing.
pub fn vertex_map(depth: &DepthImage, intr: &Intrinsics) -> Vec<Option<Vec3>> {
    (0..depth.len())
        .map(|i| {
            let z = depth.data[i] as f64;
            (z > 0.0).then(|| intr.ray((i % depth.width) as f64, (i / depth.width) as f64) * z)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Projects world points into the camera at `pose`. Points behind the
/// camera or landing outside the image are `None`.
pub fn project(points: &[Vec3], intr: &Intrinsics, pose: &Pose) -> Vec<Option<Projection>> {
    points
        .iter()
        .map(|p| {
            let c = pose.apply_inverse(p);
            if c.z <= 0.0 {
                return None;
            }
            let (u, v) = intr.project_camera(&c);
            intr.pixel(u, v)?;
            Some(Projection { u, v, z: c.z })
        })
        .collect()
}

/// Unit normals in the camera frame, `None` where undefined.
pub type NormalImage = Image<Option<[f64; 3]>>;

/// Normals from central-difference tangents of the vertex map, oriented
/// toward the camera.
pub fn compute_normals(depth: &DepthImage, intr: &Intrinsics) -> NormalImage {
    let (w, h) = (depth.width, depth.height);
    let verts = vertex_map(depth, intr);
    let mut out = Image::filled(w, h, None);
    if w < 3 || h < 3 {
        return out;
    }
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let i = v * w + u;
            let (Some(c), Some(l), Some(r), Some(t), Some(b)) =
                (verts[i], verts[i - 1], verts[i + 1], verts[i - w], verts[i + w])
            else {
                continue;
            };
            let n = (r - l).cross(&(b - t));
            let Some(mut n) = n.try_normalize(1e-15) else { continue };
            if n.dot(&c) > 0.0 {
                n = -n;
            }
            out.data[i] = Some([n.x, n.y, n.z]);
        }
    }
    out
}

/// Maps normal components from `[-1, 1]` to `[0, 255]`; undefined normals
/// become black.
pub fn encode_normals(normals: &NormalImage) -> ColorImage {
    let mut img = ColorImage::new(normals.width, normals.height);
    for (i, n) in normals.data.iter().enumerate() {
        if let Some(n) = n {
            let enc = |c: f64| ((c + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8;
            img.data[3 * i..3 * i + 3].copy_from_slice(&[enc(n[0]), enc(n[1]), enc(n[2])]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::from_axis_angle(axis, rng.random_range(-3.0..3.0), t)
    }

    #[test]
    fn backproject_principal_point_and_unit_offset() {
        let intr = Intrinsics::new(50.0, 50.0, 10.0, 8.0, 64, 32).unwrap();
        let mut d = DepthImage::filled(64, 32, 0.0);
        d.set(10, 8, 2.0);
        d.set(60, 8, 1.0);
        let bp = backproject(&d, &intr);
        assert_eq!(bp.cloud.points, vec![Vec3::new(0.0, 0.0, 2.0), Vec3::new(1.0, 0.0, 1.0)]);
        assert_eq!(bp.pixel_index, vec![8 * 64 + 10, 8 * 64 + 60]);
    }

    #[test]
    fn project_axis_and_behind() {
        let intr = Intrinsics::square(64);
        let p = project(&[Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0)], &intr, &Pose::identity());
        assert_eq!(p[0], Some(Projection { u: 32.0, v: 32.0, z: 3.0 }));
        assert_eq!(p[1], None);
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let intr = Intrinsics::new(60.0, 58.0, 31.5, 30.0, 64, 60).unwrap();
        let pose = random_pose(&mut rng);
        let mut d = DepthImage::filled(64, 60, 0.0);
        for v in d.data.iter_mut() {
            if rng.random_bool(0.8) {
                *v = rng.random_range(0.3f32..4.0);
            }
        }
        let bp = backproject(&d, &intr);
        let world: Vec<Vec3> = bp.cloud.points.iter().map(|p| pose.apply(p)).collect();
        let proj = project(&world, &intr, &pose);
        for (pr, idx) in proj.iter().zip(&bp.pixel_index) {
            let pr = pr.expect("visible");
            assert!((pr.u - (idx % 64) as f64).abs() < 1e-6);
            assert!((pr.v - (idx / 64) as f64).abs() < 1e-6);
            assert!((pr.z - d.data[*idx] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn pose_algebra_matches_homogeneous_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let m = a.to_matrix() * b.to_matrix();
            assert!((a.compose(&b).to_matrix() - m).abs().max() < 1e-12);
            assert!((a.compose(&a.inverse()).to_matrix() - Matrix4::identity()).abs().max() < 1e-10);
            assert!((a.inverse().inverse().to_matrix() - a.to_matrix()).abs().max() < 1e-12);
            assert_eq!(Pose::identity().compose(&a), a);
            let x = Vec3::new(0.3, -1.0, 2.0);
            let h = a.to_matrix() * x.push(1.0);
            assert!((se3_apply(&a, &x) - h.xyz()).norm() < 1e-12);
        }
    }

    #[test]
    fn orthonormality_survives_many_compositions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Pose::identity();
        for _ in 0..1000 {
            p = se3_compose(&p, &random_pose(&mut rng));
        }
        let r = p.rotation();
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_rotation_is_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(matches!(Pose::new(r, Vec3::zeros()), Err(Error::InvalidPose(_))));
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let [w, x, y, z] = p.quaternion();
            let q = Pose::from_quaternion(w, x, y, z, *p.translation()).unwrap();
            assert!((q.to_matrix() - p.to_matrix()).abs().max() < 1e-12);
        }
    }

    fn plane_depth(intr: &Intrinsics, normal: Vec3, point: Vec3) -> DepthImage {
        let mut d = DepthImage::filled(intr.width, intr.height, 0.0);
        for v in 0..intr.height {
            for u in 0..intr.width {
                let ray = intr.ray(u as f64, v as f64);
                let t = normal.dot(&point) / normal.dot(&ray);
                d.set(u, v, t as f32);
            }
        }
        d
    }

    #[test]
    fn fronto_parallel_normals() {
        let intr = Intrinsics::square(32);
        let d = plane_depth(&intr, Vec3::z(), Vec3::new(0.0, 0.0, 1.5));
        let n = compute_normals(&d, &intr);
        for v in 1..31 {
            for u in 1..31 {
                let [x, y, z] = n.get(u, v).unwrap();
                assert!(x.abs() < 1e-5 && y.abs() < 1e-5 && (z + 1.0).abs() < 1e-9);
            }
        }
        assert!(n.get(0, 5).is_none());
    }

    #[test]
    fn tilted_plane_normals() {
        let intr = Intrinsics::square(32);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let normal = Vec3::new(0.0, s, -s);
        let d = plane_depth(&intr, normal, Vec3::new(0.0, 0.0, 2.0));
        let n = compute_normals(&d, &intr);
        for v in 1..31 {
            for u in 1..31 {
                let [x, y, z] = n.get(u, v).unwrap();
                // float32 depth storage limits the precision
                assert!(x.abs() < 1e-4 && (y - s).abs() < 1e-4 && (z + s).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sphere_normals_match_analytic() {
        let intr = Intrinsics::square(64);
        let (c, r) = (Vec3::new(0.0, 0.0, 2.0), 0.6);
        let mut d = DepthImage::filled(64, 64, 0.0);
        for v in 0..64 {
            for u in 0..64 {
                let ray = intr.ray(u as f64, v as f64);
                let (a, b, cc) = (ray.dot(&ray), -2.0 * ray.dot(&c), c.dot(&c) - r * r);
                let disc = b * b - 4.0 * a * cc;
                if disc > 0.0 {
                    d.set(u, v, ((-b - disc.sqrt()) / (2.0 * a)) as f32);
                }
            }
        }
        let n = compute_normals(&d, &intr);
        let verts = vertex_map(&d, &intr);
        let mut checked = 0;
        for v in 2..62 {
            for u in 2..62 {
                // interior: the whole 5x5 neighborhood sees the sphere
                let interior = (v - 2..=v + 2).all(|y| (u - 2..=u + 2).all(|x| d.get(x, y) > 0.0));
                if !interior {
                    continue;
                }
                let p = verts[v * 64 + u].unwrap();
                let want = (p - c) / r;
                let [x, y, z] = n.get(u, v).unwrap();
                let ang = Vec3::new(x, y, z).dot(&want).clamp(-1.0, 1.0).acos().to_degrees();
                assert!(ang < 2.0, "pixel ({u},{v}): {ang}°");
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    #[test]
    fn normal_encoding_range() {
        let mut n = NormalImage::filled(2, 1, None);
        n.data[0] = Some([-1.0, 0.0, 1.0]);
        let img = encode_normals(&n);
        assert_eq!(img.get(0, 0), [0, 128, 255]);
        assert_eq!(img.get(1, 0), [0, 0, 0]);
    }
}
