//! Browser demo: render a synthetic scene, inspect frame-to-frame
//! associations, and build an oracle-labeled semantic map.
//!
//! Images cross the boundary as RGBA byte buffers ready for `ImageData`.

use semmap::assoc::{association_stats, compute_association, DEPTH_THRESHOLD};
use semmap::mapping::VolumeConfig;
use semmap::pipeline::{run_semantic_mapping, LabelSource, MapConfig, PoseSource};
use semmap::synth::{generate_video, Video, VideoConfig};
use wasm_bindgen::prelude::*;

/// Display colors per class.
pub const PALETTE: [[u8; 3]; 5] = [[90, 90, 90], [200, 150, 90], [220, 60, 60], [70, 160, 230], [110, 200, 90]];

fn class_color(c: u8) -> [u8; 3] {
    PALETTE.get(c as usize).copied().unwrap_or([255, 255, 255])
}

fn to_js(e: semmap::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    video: Video,
    size: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, frames: u32, size: u32) -> Result<Demo, JsValue> {
        let cfg = VideoConfig {
            frames: frames.max(2) as usize,
            image_size: size as usize,
            ..VideoConfig::default()
        };
        let (_, video) = generate_video(seed as u64, &cfg).map_err(to_js)?;
        Ok(Demo {
            video,
            size: size as usize,
        })
    }

    pub fn size(&self) -> u32 {
        self.size as u32
    }

    pub fn frame_count(&self) -> u32 {
        self.video.frames.len() as u32
    }

    pub fn color(&self, k: u32) -> Vec<u8> {
        let f = &self.video.frames[k as usize];
        f.color.data.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    /// Depth as gray, near is bright; missing depth is black.
    pub fn depth(&self, k: u32) -> Vec<u8> {
        let f = &self.video.frames[k as usize];
        let valid = f.depth.data.iter().filter(|d| **d > 0.0);
        let (lo, hi) = valid.fold((f32::MAX, 0f32), |(a, b), d| (a.min(*d), b.max(*d)));
        f.depth
            .data
            .iter()
            .flat_map(|d| {
                let g = if *d > 0.0 {
                    (255.0 * (1.0 - (d - lo) / (hi - lo).max(1e-6)) * 0.8 + 40.0) as u8
                } else {
                    0
                };
                [g, g, g, 255]
            })
            .collect()
    }

    pub fn labels(&self, k: u32) -> Vec<u8> {
        let f = &self.video.frames[k as usize];
        f.labels
            .data
            .iter()
            .flat_map(|l| {
                let [r, g, b] = class_color(*l);
                [r, g, b, 255]
            })
            .collect()
    }

    /// Frame `k` tinted by its association to frame `k - 1`: associated
    /// pixels keep their label color, unassociated ones are red.
    pub fn associations(&self, k: u32) -> Vec<u8> {
        association_image(&self.video, k as usize).0
    }

    /// Percentage of frame `k`'s pixels associated to frame `k - 1`.
    pub fn associated_percent(&self, k: u32) -> f64 {
        association_image(&self.video, k as usize).1
    }

    /// Runs oracle-labeled semantic mapping over the first `frames` frames
    /// and returns a top-down `side`×`side` rendering of the labeled cloud.
    pub fn map_top_down(&self, frames: u32, voxel_cm: f64, side: u32) -> Result<Vec<u8>, JsValue> {
        top_down_map(&self.video, frames as usize, voxel_cm / 100.0, side as usize).map_err(to_js)
    }
}

fn association_image(video: &Video, k: usize) -> (Vec<u8>, f64) {
    let f = &video.frames[k];
    let n = f.labels.data.len();
    if k == 0 {
        return (vec![0; 4 * n], 0.0);
    }
    let p = &video.frames[k - 1];
    let a = compute_association(&f.depth, &p.pose, &f.pose, &f.intrinsics, &p.depth, DEPTH_THRESHOLD);
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        let [r, g, b] = match a.get(i) {
            Some(_) => class_color(f.labels.data[i]),
            None => [255, 0, 0],
        };
        out.extend_from_slice(&[r, g, b, 255]);
    }
    let s = association_stats(&a);
    (out, 100.0 * s.associated)
}

/// Oracle mapping with ground-truth poses, drawn from above.
pub fn top_down_map(video: &Video, frames: usize, voxel: f64, side: usize) -> semmap::Result<Vec<u8>> {
    let mut clip = video.clone();
    clip.frames.truncate(frames.max(1));
    let d = VolumeConfig::default();
    let extent = [
        d.dims[0] as f64 * d.voxel_size,
        d.dims[1] as f64 * d.voxel_size,
        d.dims[2] as f64 * d.voxel_size,
    ];
    let dims = extent.map(|e| (e / voxel).ceil() as usize);
    let cfg = MapConfig {
        volume: VolumeConfig {
            voxel_size: voxel,
            dims,
            ..d.clone()
        },
        poses: PoseSource::GroundTruth,
        ..MapConfig::default()
    };
    let r = run_semantic_mapping(&clip, LabelSource::Oracle, &cfg)?;
    let mut img = vec![0u8; 4 * side * side];
    for px in img.chunks_mut(4) {
        px[3] = 255;
    }
    // highest point wins each pixel
    let mut top = vec![f64::MIN; side * side];
    let labels = r.cloud.labels.clone().unwrap_or_default();
    for (i, p) in r.cloud.points.iter().enumerate() {
        let u = ((p.x - d.origin[0]) / extent[0] * side as f64) as isize;
        let v = ((1.0 - (p.y - d.origin[1]) / extent[1]) * side as f64) as isize;
        if u < 0 || v < 0 || u >= side as isize || v >= side as isize {
            continue;
        }
        let j = v as usize * side + u as usize;
        if p.z <= top[j] {
            continue;
        }
        top[j] = p.z;
        let [r, g, b] = labels.get(i).copied().flatten().map_or([255, 255, 255], class_color);
        let shade = (0.55 + 0.45 * ((p.z - d.origin[2]) / extent[2]).clamp(0.0, 1.0)) as f32;
        img[4 * j..4 * j + 3].copy_from_slice(&[r, g, b].map(|c| (c as f32 * shade) as u8));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_have_rgba_size() {
        let demo = Demo::new(1, 30, 32).unwrap();
        let n = 32 * 32 * 4;
        assert_eq!(demo.color(0).len(), n);
        assert_eq!(demo.depth(1).len(), n);
        assert_eq!(demo.labels(2).len(), n);
        assert_eq!(demo.associations(0).len(), n);
        assert!(demo.associated_percent(1) > 50.0);
    }

    #[test]
    fn top_down_map_draws_something() {
        let demo = Demo::new(2, 4, 32).unwrap();
        let img = top_down_map(&demo.video, 4, 0.03, 64).unwrap();
        assert_eq!(img.len(), 64 * 64 * 4);
        assert!(img.chunks(4).filter(|p| p[..3] != [0, 0, 0]).count() > 100);
    }
}
