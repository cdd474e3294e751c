//! Procedural tabletop scenes rendered to RGB-D video with exact labels.
//!
//! A scene is a ground plane, one table and a handful of boxes, spheres and
//! upright cylinders resting on the table top. Frames are produced by exact
//! ray/primitive intersection, so depth, labels and poses are ground truth.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose, Vec3};
use crate::image::{ColorImage, DepthImage, LabelImage};

pub const CLASS_NAMES: [&str; 5] = ["background", "table", "box", "sphere", "cylinder"];
pub const BACKGROUND: u8 = 0;
pub const TABLE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Box,
    Sphere,
    Cylinder,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [ObjectKind::Box, ObjectKind::Sphere, ObjectKind::Cylinder];

    pub fn class(self) -> u8 {
        match self {
            ObjectKind::Box => 2,
            ObjectKind::Sphere => 3,
            ObjectKind::Cylinder => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Horizontal plane `z = height`, facing up.
    Ground { height: f64 },
    /// Box rotated by `yaw` about the vertical axis.
    Box { center: Vec3, half: Vec3, yaw: f64 },
    Sphere { center: Vec3, radius: f64 },
    /// Upright cylinder standing on `base`.
    Cylinder { base: Vec3, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: u8,
    pub albedo: [f32; 3],
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: Vec3,
}

fn to_box_frame(p: &Vec3, center: &Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    let d = p - center;
    Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
}

fn from_box_frame_dir(d: &Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z)
}

impl Shape {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        const EPS: f64 = 1e-9;
        match *self {
            Shape::Ground { height } => {
                if d.z.abs() < EPS {
                    return None;
                }
                let t = (height - o.z) / d.z;
                (t > EPS).then(|| Hit {
                    t,
                    normal: Vec3::z(),
                })
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.dot(d);
                let b = 2.0 * oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .find(|t| *t > EPS)?;
                Some(Hit {
                    t,
                    normal: (o + d * t - center) / radius,
                })
            }
            Shape::Box { center, half, yaw } => {
                let lo = to_box_frame(o, &center, yaw);
                let ld = to_box_frame(&(o + d), &center, yaw) - lo;
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                let mut axis_min = 0;
                let mut axis_max = 0;
                for a in 0..3 {
                    if ld[a].abs() < EPS {
                        if lo[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half[a] - lo[a]) / ld[a];
                    let t2 = (half[a] - lo[a]) / ld[a];
                    let (n, f) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if n > tmin {
                        tmin = n;
                        axis_min = a;
                    }
                    if f < tmax {
                        tmax = f;
                        axis_max = a;
                    }
                }
                if tmin > tmax || tmax <= EPS {
                    return None;
                }
                let (t, axis) = if tmin > EPS { (tmin, axis_min) } else { (tmax, axis_max) };
                let mut n = Vec3::zeros();
                n[axis] = if ld[axis] > 0.0 { -1.0 } else { 1.0 };
                if tmin <= EPS {
                    n = -n;
                }
                Some(Hit {
                    t,
                    normal: from_box_frame_dir(&n, yaw),
                })
            }
            Shape::Cylinder { base, radius, height } => {
                let mut best: Option<Hit> = None;
                let mut consider = |h: Hit| {
                    if h.t > EPS && best.is_none_or(|b| h.t < b.t) {
                        best = Some(h);
                    }
                };
                let (ox, oy) = (o.x - base.x, o.y - base.y);
                let a = d.x * d.x + d.y * d.y;
                if a > EPS {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            let z = o.z + t * d.z;
                            if z >= base.z && z <= base.z + height {
                                let p = o + d * t;
                                consider(Hit {
                                    t,
                                    normal: Vec3::new(p.x - base.x, p.y - base.y, 0.0) / radius,
                                });
                            }
                        }
                    }
                }
                if d.z.abs() > EPS {
                    for (zc, nz) in [(base.z + height, 1.0), (base.z, -1.0)] {
                        let t = (zc - o.z) / d.z;
                        let p = o + d * t;
                        if (p.x - base.x).powi(2) + (p.y - base.y).powi(2) <= radius * radius {
                            consider(Hit {
                                t,
                                normal: Vec3::new(0.0, 0.0, nz),
                            });
                        }
                    }
                }
                best
            }
        }
    }

    /// Signed distance from `p` to the surface (negative inside).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Ground { height } => p.z - height,
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { center, half, yaw } => {
                let l = to_box_frame(p, &center, yaw);
                let q = Vec3::new(l.x.abs() - half.x, l.y.abs() - half.y, l.z.abs() - half.z);
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Cylinder { base, radius, height } => {
                let r = ((p.x - base.x).powi(2) + (p.y - base.y).powi(2)).sqrt() - radius;
                let hz = height / 2.0;
                let z = (p.z - base.z - hz).abs() - hz;
                let outside = (r.max(0.0).powi(2) + z.max(0.0).powi(2)).sqrt();
                outside + r.max(z).min(0.0)
            }
        }
    }

    /// Radius of the vertical-axis bounding circle and its center.
    fn footprint(&self) -> Option<(f64, f64, f64)> {
        match *self {
            Shape::Ground { .. } => None,
            Shape::Box { center, half, .. } => Some((center.x, center.y, half.x.hypot(half.y))),
            Shape::Sphere { center, radius } => Some((center.x, center.y, radius)),
            Shape::Cylinder { base, radius, .. } => Some((base.x, base.y, radius)),
        }
    }

    /// Lowest and highest z of the shape.
    fn z_range(&self) -> (f64, f64) {
        match *self {
            Shape::Ground { height } => (height, height),
            Shape::Box { center, half, .. } => (center.z - half.z, center.z + half.z),
            Shape::Sphere { center, radius } => (center.z - radius, center.z + radius),
            Shape::Cylinder { base, height, .. } => (base.z, base.z + height),
        }
    }
}

/// Size ranges of one object kind, meters. `width` is the diameter, or a
/// box's long side (its short side is 0.6 of that).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSizes {
    pub width: (f64, f64),
    pub height: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub object_kinds: Vec<ObjectKind>,
    /// Table top extent along x, meters.
    pub table_length: (f64, f64),
    /// Table top extent along y, meters.
    pub table_width: (f64, f64),
    pub table_height: (f64, f64),
    pub boxes: ObjectSizes,
    /// Only `width` (the diameter) applies to spheres.
    pub spheres: ObjectSizes,
    pub cylinders: ObjectSizes,
    /// Minimum horizontal gap between object footprints, meters.
    pub gap: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 5,
            object_kinds: ObjectKind::ALL.to_vec(),
            table_length: (1.1, 1.3),
            table_width: (0.9, 1.1),
            table_height: (0.45, 0.55),
            boxes: ObjectSizes {
                width: (0.20, 0.28),
                height: (0.10, 0.18),
            },
            spheres: ObjectSizes {
                width: (0.14, 0.22),
                height: (0.14, 0.22),
            },
            cylinders: ObjectSizes {
                width: (0.09, 0.13),
                height: (0.20, 0.30),
            },
            gap: 0.02,
            max_retries: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
    /// Center of the table top surface.
    pub table_top: Vec3,
    /// Half extents of the table top along x and y.
    pub table_half: (f64, f64),
}

fn rand_range(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn random_albedo(rng: &mut impl Rng) -> [f32; 3] {
    [
        rng.random_range(0.15..0.95),
        rng.random_range(0.15..0.95),
        rng.random_range(0.15..0.95),
    ]
}

/// Samples a table with `num_objects` non-overlapping objects on top.
/// Deterministic in `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneDescription> {
    if config.object_kinds.is_empty() && config.num_objects > 0 {
        return Err(Error::InvalidConfig("no object kinds to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = rand_range(&mut rng, config.table_length);
    let width = rand_range(&mut rng, config.table_width);
    let height = rand_range(&mut rng, config.table_height);
    let mut primitives = vec![
        Primitive {
            shape: Shape::Ground { height: 0.0 },
            class: BACKGROUND,
            albedo: [0.55, 0.55, 0.5],
        },
        Primitive {
            shape: Shape::Box {
                center: Vec3::new(0.0, 0.0, height / 2.0),
                half: Vec3::new(length / 2.0, width / 2.0, height / 2.0),
                yaw: 0.0,
            },
            class: TABLE,
            albedo: random_albedo(&mut rng),
        },
    ];
    let (hx, hy) = (length / 2.0, width / 2.0);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for k in 0..config.num_objects {
        let kind = config.object_kinds[rng.random_range(0..config.object_kinds.len())];
        let sizes = match kind {
            ObjectKind::Box => config.boxes,
            ObjectKind::Sphere => config.spheres,
            ObjectKind::Cylinder => config.cylinders,
        };
        let size = rand_range(&mut rng, sizes.width);
        let h = rand_range(&mut rng, sizes.height);
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let albedo = random_albedo(&mut rng);
        let mut attempt = 0;
        let shape = loop {
            if attempt >= config.max_retries {
                return Err(Error::Generation(format!(
                    "could not place object {k} after {} attempts",
                    config.max_retries
                )));
            }
            attempt += 1;
            let x = rng.random_range(-hx..hx);
            let y = rng.random_range(-hy..hy);
            let shape = match kind {
                ObjectKind::Box => Shape::Box {
                    center: Vec3::new(x, y, height + h / 2.0),
                    half: Vec3::new(size / 2.0, size * 0.3, h / 2.0),
                    yaw,
                },
                ObjectKind::Sphere => Shape::Sphere {
                    center: Vec3::new(x, y, height + size / 2.0),
                    radius: size / 2.0,
                },
                ObjectKind::Cylinder => Shape::Cylinder {
                    base: Vec3::new(x, y, height),
                    radius: size / 2.0,
                    height: h,
                },
            };
            let (cx, cy, r) = shape.footprint().expect("objects have footprints");
            let inside = cx - r >= -hx && cx + r <= hx && cy - r >= -hy && cy + r <= hy;
            let disjoint = placed
                .iter()
                .all(|(px, py, pr)| (cx - px).hypot(cy - py) > r + pr + config.gap);
            if inside && disjoint {
                placed.push((cx, cy, r));
                break shape;
            }
        };
        primitives.push(Primitive {
            shape,
            class: kind.class(),
            albedo,
        });
    }
    Ok(SceneDescription {
        primitives,
        seed,
        table_top: Vec3::new(0.0, 0.0, height),
        table_half: (hx, hy),
    })
}

impl SceneDescription {
    /// Class of the primitive whose surface is closest to `p`.
    pub fn label_at(&self, p: &Vec3) -> u8 {
        self.primitives
            .iter()
            .map(|pr| (pr.shape.signed_distance(p).abs(), pr.class))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map_or(BACKGROUND, |(_, c)| c)
    }

    /// Index of the nearest primitive hit by the ray, and the hit.
    fn cast(&self, o: &Vec3, d: &Vec3) -> Option<(usize, Hit)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.shape.intersect(o, d).map(|h| (i, h)))
            .min_by(|a, b| a.1.t.total_cmp(&b.1.t))
    }

    /// Checks that objects sit on the table top inside its extent and that
    /// their footprints do not overlap.
    pub fn check_support(&self) -> bool {
        let objects: Vec<&Primitive> = self.primitives.iter().filter(|p| p.class > TABLE).collect();
        let top = self.table_top.z;
        let (hx, hy) = self.table_half;
        objects.iter().enumerate().all(|(i, a)| {
            let (ax, ay, ar) = a.shape.footprint().unwrap();
            let (zlo, _) = a.shape.z_range();
            (zlo - top).abs() < 1e-9
                && ax - ar >= -hx
                && ax + ar <= hx
                && ay - ar >= -hy
                && ay + ar <= hy
                && objects[i + 1..].iter().all(|b| {
                    let (bx, by, br) = b.shape.footprint().unwrap();
                    (ax - bx).hypot(ay - by) > ar + br
                })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Horizontal distance from the table center, meters.
    pub radius: f64,
    /// Camera height above the ground, meters.
    pub height: f64,
    /// Total swept angle around the table, degrees.
    pub arc_degrees: f64,
    /// Amplitude of smooth radius/height wobble, meters.
    pub jitter: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            radius: 0.6,
            height: 0.95,
            arc_degrees: 120.0,
            jitter: 0.0,
        }
    }
}

/// Orbit around the table looking at the table-top center. The start angle
/// and wobble phases derive from the scene seed.
pub fn sample_trajectory(scene: &SceneDescription, n_frames: usize, config: &TrajectoryConfig) -> Result<Vec<Pose>> {
    if n_frames < 2 {
        return Err(Error::InvalidConfig("a trajectory needs at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x7472_616a);
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let (p1, p2) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let step = config.arc_degrees.to_radians() / (n_frames - 1) as f64;
    let target = scene.table_top;
    (0..n_frames)
        .map(|k| {
            let s = k as f64 / (n_frames - 1) as f64;
            let theta = start + step * k as f64;
            let r = config.radius + config.jitter * (std::f64::consts::TAU * s + p1).sin();
            let h = config.height + config.jitter * (std::f64::consts::TAU * s + p2).cos();
            let eye = Vec3::new(target.x + r * theta.cos(), target.y + r * theta.sin(), h);
            Pose::look_at(eye, target, Vec3::z())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Fraction of pixels whose depth is dropped (set to 0).
    pub dropout: f64,
    /// Half-width of uniform per-channel color noise, in 0-255 units.
    pub color_noise: f64,
    /// Depth beyond this range is reported missing, meters.
    pub max_depth: f64,
    pub light_dir: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            dropout: 0.0,
            color_noise: 4.0,
            max_depth: 4.0,
            light_dir: [0.3, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub color: ColorImage,
    pub depth: DepthImage,
    pub labels: LabelImage,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl Frame {
    /// Rounds depth to whole millimeters, as stored on disk.
    pub fn quantize_depth(&mut self) {
        for d in &mut self.depth.data {
            *d = quantize_mm(*d);
        }
    }

    /// Pixels without a depth measurement.
    pub fn missing_mask(&self) -> Vec<bool> {
        self.depth.data.iter().map(|d| *d <= 0.0).collect()
    }
}

fn quantize_mm(d: f32) -> f32 {
    let mm = (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
    mm as f32 / 1000.0
}

/// Renders one frame by nearest-hit ray casting. `noise_seed` drives color
/// noise and depth dropout.
pub fn render_frame(
    scene: &SceneDescription,
    pose: &Pose,
    intr: &Intrinsics,
    config: &RenderConfig,
    noise_seed: u64,
) -> Frame {
    let (w, h) = (intr.width, intr.height);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut color = ColorImage::new(w, h);
    let mut depth = DepthImage::filled(w, h, 0.0);
    let mut labels = LabelImage::filled(w, h, BACKGROUND);
    let light = Vec3::from(config.light_dir).normalize();
    let origin = *pose.translation();
    for v in 0..h {
        for u in 0..w {
            let dir = pose.rotation() * intr.ray(u as f64, v as f64);
            let noise: [f64; 3] = std::array::from_fn(|_| {
                if config.color_noise > 0.0 {
                    rng.random_range(-config.color_noise..=config.color_noise)
                } else {
                    0.0
                }
            });
            let dropped = config.dropout > 0.0 && rng.random_bool(config.dropout.min(1.0));
            let Some((i, hit)) = scene.cast(&origin, &dir) else {
                continue;
            };
            let prim = &scene.primitives[i];
            let shade = 0.3 + 0.7 * hit.normal.dot(&light).max(0.0);
            let rgb: [u8; 3] = std::array::from_fn(|c| {
                (prim.albedo[c] as f64 * shade * 255.0 + noise[c]).round().clamp(0.0, 255.0) as u8
            });
            color.set(u, v, rgb);
            // the ray has unit z in the camera frame, so t is the depth
            if hit.t <= config.max_depth && !dropped {
                depth.set(u, v, hit.t as f32);
                labels.set(u, v, prim.class);
            }
        }
    }
    Frame {
        index: 0,
        color,
        depth,
        labels,
        pose: *pose,
        intrinsics: *intr,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoConfig {
    pub frames: usize,
    pub image_size: usize,
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
    pub render: RenderConfig,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            frames: 60,
            image_size: 64,
            scene: SceneConfig::default(),
            trajectory: TrajectoryConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub seed: u64,
    pub frames: Vec<Frame>,
}

impl Video {
    pub fn intrinsics(&self) -> Option<Intrinsics> {
        self.frames.first().map(|f| f.intrinsics)
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

/// Scene, trajectory and frames for one seed. Depth is quantized to
/// millimeters so in-memory videos equal what the dataset files hold.
pub fn generate_video(seed: u64, config: &VideoConfig) -> Result<(SceneDescription, Video)> {
    let scene = generate_scene(seed, &config.scene)?;
    let poses = sample_trajectory(&scene, config.frames, &config.trajectory)?;
    let intr = Intrinsics::square(config.image_size);
    let frames = poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let mut f = render_frame(&scene, pose, &intr, &config.render, seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
            f.index = k;
            f.quantize_depth();
            f
        })
        .collect();
    Ok((scene, Video { seed, frames }))
}

// ---------------------------------------------------------------------------
// Dataset files

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path, color: png::ColorType, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::format(
            path,
            format!("expected {color:?}/{depth:?}, found {:?}/{:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn write_label_png(path: &Path, labels: &LabelImage) -> Result<()> {
    write_png(path, labels.width, labels.height, png::ColorType::Grayscale, png::BitDepth::Eight, &labels.data)
}

pub fn read_label_png(path: &Path) -> Result<LabelImage> {
    let (w, h, data) = read_png(path, png::ColorType::Grayscale, png::BitDepth::Eight)?;
    LabelImage::from_vec(w, h, data)
}

/// 16-bit big-endian millimeters, as PNG requires.
pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let bytes: Vec<u8> = depth
        .data
        .iter()
        .flat_map(|d| {
            let mm = (*d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16;
            mm.to_be_bytes()
        })
        .collect();
    write_png(path, depth.width, depth.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    let (w, h, data) = read_png(path, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let depth = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 1000.0)
        .collect();
    DepthImage::from_vec(w, h, depth)
}

pub fn write_color_png(path: &Path, color: &ColorImage) -> Result<()> {
    write_png(path, color.width, color.height, png::ColorType::Rgb, png::BitDepth::Eight, &color.data)
}

pub fn read_color_png(path: &Path) -> Result<ColorImage> {
    let (w, h, data) = read_png(path, png::ColorType::Rgb, png::BitDepth::Eight)?;
    Ok(ColorImage {
        width: w,
        height: h,
        data,
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes one video into `dir` (created if needed).
pub fn write_video(video: &Video, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let intr = video
        .intrinsics()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty video".into()))?;
    write_text(
        &dir.join("camera.txt"),
        &format!("{} {} {} {} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height),
    )?;
    let mut meta = format!("seed {}\nclasses", video.seed);
    for name in CLASS_NAMES {
        meta.push(' ');
        meta.push_str(name);
    }
    meta.push('\n');
    write_text(&dir.join("meta.txt"), &meta)?;
    let mut poses = String::new();
    for f in &video.frames {
        let [qw, qx, qy, qz] = f.pose.quaternion();
        let t = f.pose.translation();
        poses.push_str(&format!("{} {qw} {qx} {qy} {qz} {} {} {}\n", f.index, t.x, t.y, t.z));
        write_color_png(&dir.join(format!("color_{:04}.png", f.index)), &f.color)?;
        write_depth_png(&dir.join(format!("depth_{:04}.png", f.index)), &f.depth)?;
        write_label_png(&dir.join(format!("label_{:04}.png", f.index)), &f.labels)?;
    }
    write_text(&dir.join("poses.txt"), &poses)
}

fn parse_fields<T: std::str::FromStr>(path: &Path, line: &str, n: usize) -> Result<Vec<T>> {
    let vals: Vec<T> = line
        .split_whitespace()
        .map(|s| s.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("cannot parse line {line:?}")))?;
    if vals.len() != n {
        return Err(Error::format(path, format!("expected {n} fields in {line:?}")));
    }
    Ok(vals)
}

pub fn read_camera(path: &Path) -> Result<Intrinsics> {
    let text = read_text(path)?;
    let line = text.lines().next().unwrap_or_default();
    let v: Vec<f64> = parse_fields(path, line, 6)?;
    Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v: Vec<f64> = parse_fields(path, line, 8)?;
            let pose = Pose::from_quaternion(v[1], v[2], v[3], v[4], Vec3::new(v[5], v[6], v[7]))
                .map_err(|e| Error::format(path, e.to_string()))?;
            Ok((v[0] as usize, pose))
        })
        .collect()
}

pub fn read_video(dir: &Path) -> Result<Video> {
    let intr = read_camera(&dir.join("camera.txt"))?;
    let meta_path = dir.join("meta.txt");
    let meta = read_text(&meta_path)?;
    let seed = meta
        .lines()
        .find_map(|l| l.strip_prefix("seed "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format(&meta_path, "missing seed"))?;
    let mut frames = Vec::new();
    for (index, pose) in read_poses(&dir.join("poses.txt"))? {
        let color = read_color_png(&dir.join(format!("color_{index:04}.png")))?;
        let depth = read_depth_png(&dir.join(format!("depth_{index:04}.png")))?;
        let labels = read_label_png(&dir.join(format!("label_{index:04}.png")))?;
        let sizes = [
            (color.width, color.height),
            (depth.width, depth.height),
            (labels.width, labels.height),
        ];
        if sizes.iter().any(|s| *s != (intr.width, intr.height)) {
            return Err(Error::format(dir, format!("frame {index} size does not match camera.txt")));
        }
        frames.push(Frame {
            index,
            color,
            depth,
            labels,
            pose,
            intrinsics: intr,
        });
    }
    Ok(Video { seed, frames })
}

pub fn write_dataset(videos: &[Video], root: &Path) -> Result<()> {
    for (i, v) in videos.iter().enumerate() {
        write_video(v, &scene_dir(root, i))?;
    }
    Ok(())
}

/// Reads every `scene_XXXX` directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<Video>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no scene_XXXX directories"));
    }
    dirs.iter().map(|d| read_video(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vertex_map;

    #[test]
    fn scenes_are_deterministic_in_seed() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(4, &c).unwrap(), generate_scene(4, &c).unwrap());
        let a = generate_scene(4, &c).unwrap();
        let b = generate_scene(5, &c).unwrap();
        assert_ne!(a.primitives, b.primitives);
    }

    #[test]
    fn objects_are_supported_and_disjoint() {
        for seed in 0..40 {
            let s = generate_scene(seed, &SceneConfig::default()).unwrap();
            assert_eq!(s.primitives.len(), 7);
            assert_eq!(s.primitives.iter().filter(|p| p.class == TABLE).count(), 1);
            assert!(s.check_support(), "seed {seed}");
        }
    }

    #[test]
    fn impossible_placement_reports_generation_error() {
        let c = SceneConfig {
            num_objects: 40,
            max_retries: 50,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &c), Err(Error::Generation(_))));
    }

    #[test]
    fn trajectory_motion_is_bounded_and_looks_at_table() {
        let scene = generate_scene(2, &SceneConfig::default()).unwrap();
        let intr = Intrinsics::square(64);
        for (n, arc, jitter) in [(60, 120.0, 0.0), (150, 360.0, 0.02), (100, 200.0, 0.0)] {
            let cfg = TrajectoryConfig {
                arc_degrees: arc,
                jitter,
                ..TrajectoryConfig::default()
            };
            let poses = sample_trajectory(&scene, n, &cfg).unwrap();
            for w in poses.windows(2) {
                assert!(w[0].rotation_angle_to(&w[1]).to_degrees() < 3.0);
                assert!(w[0].translation_distance_to(&w[1]) < 0.05);
            }
            for p in &poses {
                let c = p.apply_inverse(&scene.table_top);
                let (u, v) = intr.project_camera(&c);
                assert!((u - 32.0).hypot(v - 32.0) < 10.0);
            }
        }
        let poses = sample_trajectory(&scene, 30, &TrajectoryConfig::default()).unwrap();
        let center = scene.table_top;
        for p in &poses {
            let t = p.translation();
            assert!(((t.x - center.x).hypot(t.y - center.y) - 0.6).abs() < 1e-12);
            assert!((t.z - 0.95).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_depth_is_analytic() {
        let scene = SceneDescription {
            primitives: vec![Primitive {
                shape: Shape::Ground { height: 0.0 },
                class: BACKGROUND,
                albedo: [0.5; 3],
            }],
            seed: 0,
            table_top: Vec3::zeros(),
            table_half: (0.0, 0.0),
        };
        // camera 1 m above the ground looking straight down
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::zeros(), Vec3::y()).unwrap();
        let intr = Intrinsics::square(32);
        let f = render_frame(&scene, &pose, &intr, &RenderConfig::default(), 0);
        for v in 0..32 {
            for u in 0..32 {
                // depth along the optical axis is the plane distance itself
                assert!((f.depth.get(u, v) - 1.0).abs() < 1e-6);
                assert_eq!(f.labels.get(u, v), BACKGROUND);
            }
        }
    }

    #[test]
    fn sphere_silhouette_radius() {
        let (r, z) = (0.3, 2.0);
        let scene = SceneDescription {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: Vec3::new(0.0, 0.0, z),
                    radius: r,
                },
                class: 3,
                albedo: [0.5; 3],
            }],
            seed: 0,
            table_top: Vec3::zeros(),
            table_half: (0.0, 0.0),
        };
        let intr = Intrinsics::new(200.0, 200.0, 100.0, 100.0, 200, 200).unwrap();
        let f = render_frame(&scene, &Pose::identity(), &intr, &RenderConfig::default(), 0);
        let want = 200.0 * r / (z * z - r * r).sqrt();
        let row: Vec<usize> = (0..200).filter(|u| f.labels.get(*u, 100) == 3).collect();
        let half_width = (row.last().unwrap() - row.first().unwrap()) as f64 / 2.0;
        assert!((half_width - want).abs() <= 1.0, "{half_width} vs {want}");
    }

    #[test]
    fn rendered_depth_lies_on_labeled_primitive() {
        let config = VideoConfig {
            frames: 3,
            ..VideoConfig::default()
        };
        let scene = generate_scene(8, &config.scene).unwrap();
        let poses = sample_trajectory(&scene, 3, &config.trajectory).unwrap();
        let intr = Intrinsics::square(64);
        for pose in &poses {
            let f = render_frame(&scene, pose, &intr, &RenderConfig::default(), 1);
            let verts = vertex_map(&f.depth, &intr);
            for (i, v) in verts.iter().enumerate() {
                let Some(v) = v else {
                    assert_eq!(f.labels.data[i], BACKGROUND);
                    continue;
                };
                let w = pose.apply(v);
                let best = scene
                    .primitives
                    .iter()
                    .filter(|p| p.class == f.labels.data[i])
                    .map(|p| p.shape.signed_distance(&w).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-4, "pixel {i}: {best}");
            }
        }
    }

    #[test]
    fn dropout_clears_labels() {
        let scene = generate_scene(1, &SceneConfig::default()).unwrap();
        let pose = sample_trajectory(&scene, 2, &TrajectoryConfig::default()).unwrap()[0];
        let cfg = RenderConfig {
            dropout: 0.3,
            ..RenderConfig::default()
        };
        let f = render_frame(&scene, &pose, &Intrinsics::square(64), &cfg, 5);
        let missing = f.depth.data.iter().filter(|d| **d == 0.0).count();
        assert!(missing > 64 * 64 / 5);
        for (d, l) in f.depth.data.iter().zip(&f.labels.data) {
            if *d == 0.0 {
                assert_eq!(*l, BACKGROUND);
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = VideoConfig {
            frames: 3,
            image_size: 32,
            ..VideoConfig::default()
        };
        let (_, video) = generate_video(12, &config).unwrap();
        write_dataset(std::slice::from_ref(&video), dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].seed, 12);
        for (a, b) in video.frames.iter().zip(&back[0].frames) {
            assert_eq!(a.color, b.color);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.labels, b.labels);
            assert!((a.pose.to_matrix() - b.pose.to_matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn depth_unit_contract() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthImage::from_vec(2, 1, vec![1.234, 0.0]).unwrap();
        write_depth_png(&p, &d).unwrap();
        let back = read_depth_png(&p).unwrap();
        assert_eq!(back.data, vec![1.234, 0.0]);
    }

    #[test]
    fn missing_pose_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let config = VideoConfig {
            frames: 2,
            image_size: 16,
            ..VideoConfig::default()
        };
        let (_, video) = generate_video(3, &config).unwrap();
        write_video(&video, dir.path()).unwrap();
        fs::remove_file(dir.path().join("poses.txt")).unwrap();
        let err = read_video(dir.path()).unwrap_err();
        assert!(err.to_string().contains("poses.txt"), "{err}");
    }

    #[test]
    fn label_at_picks_nearest_surface() {
        let scene = generate_scene(6, &SceneConfig::default()).unwrap();
        for p in &scene.primitives[2..] {
            if let Shape::Sphere { center, radius } = p.shape {
                let top = center + Vec3::new(0.0, 0.0, radius);
                assert_eq!(scene.label_at(&top), 3);
            }
        }
        assert_eq!(scene.label_at(&Vec3::new(3.0, 3.0, 0.0)), BACKGROUND);
    }
}
