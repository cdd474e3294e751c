//! Fusion of per-frame class probabilities into the voxel grid, and
//! multi-view labeling of 3D points.

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose, Vec3};
use crate::image::{DepthImage, LabelImage};
use crate::mapping::TsdfVolume;
use crate::net::LabelProbMap;

/// Depth agreement required for a point to count as seen by a frame, meters.
pub const VISIBILITY_THRESHOLD: f64 = 0.03;

/// Running average of `probs` into every near-surface voxel (`|sdf| < mu`)
/// that projects to valid depth. Each voxel keeps its own semantic weight,
/// capped at the volume's maximum weight.
pub fn fuse_labels(
    vol: &mut TsdfVolume,
    probs: &LabelProbMap,
    depth: &DepthImage,
    pose: &Pose,
    intr: &Intrinsics,
) -> Result<()> {
    if probs.classes() != vol.num_classes() {
        return Err(Error::InvalidInput(format!(
            "probability map has {} classes, volume has {}",
            probs.classes(),
            vol.num_classes()
        )));
    }
    if (probs.width(), probs.height()) != (intr.width, intr.height) {
        return Err(Error::InvalidInput("probability map size does not match the camera".into()));
    }
    probs.validate()?;
    let mu = vol.truncation();
    let w_max = vol.max_weight();
    let mut hits = Vec::new();
    vol.for_each_sighting(depth, pose, intr, |s| {
        if s.sdf.abs() < mu {
            hits.push((s.voxel, s.pixel));
        }
    });
    let n = probs.classes();
    let mut obs = vec![0f32; n];
    for (voxel, pixel) in hits {
        probs.pixel_probs(pixel, &mut obs);
        let (p, w) = vol.semantic_mut(voxel);
        let wf = *w;
        let mut sum = 0.0;
        for (pc, oc) in p.iter_mut().zip(&obs) {
            *pc = (wf * *pc + oc) / (wf + 1.0);
            sum += *pc;
        }
        if sum > 0.0 && sum != 1.0 {
            p.iter_mut().for_each(|x| *x /= sum);
        }
        *w = (wf + 1.0).min(w_max);
    }
    Ok(())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Most probable class of a voxel, `None` if it holds no probabilities.
pub fn voxel_label(vol: &TsdfVolume, index: usize) -> Option<u8> {
    vol.class_probs(index).map(|p| argmax(p) as u8)
}

/// One frame's evidence for point labeling.
#[derive(Debug, Clone, Copy)]
pub struct LabeledView<'a> {
    pub labels: &'a LabelImage,
    pub depth: &'a DepthImage,
    pub pose: &'a Pose,
}

/// Labels each world point with the most frequent label among frames that
/// see it. A frame sees a point if it projects inside the image onto valid
/// depth within `delta_vis` of the point's own depth. Ties pick the lowest
/// class; points seen by no frame get `None`.
pub fn label_points(
    points: &[Vec3],
    views: &[LabeledView<'_>],
    intr: &Intrinsics,
    num_classes: usize,
    delta_vis: f64,
) -> Vec<Option<u8>> {
    let mut counts = vec![0u32; points.len() * num_classes];
    for view in views {
        let inv = view.pose.inverse();
        for (i, p) in points.iter().enumerate() {
            let c = inv.apply(p);
            if c.z <= 0.0 {
                continue;
            }
            let (u, v) = intr.project_camera(&c);
            let Some((u, v)) = intr.pixel(u, v) else { continue };
            let d = view.depth.get(u, v) as f64;
            if d <= 0.0 || (d - c.z).abs() >= delta_vis {
                continue;
            }
            let l = view.labels.get(u, v) as usize;
            if l < num_classes {
                counts[i * num_classes + l] += 1;
            }
        }
    }
    counts
        .chunks(num_classes.max(1))
        .take(points.len())
        .map(|c| {
            let mut best = 0;
            for (k, n) in c.iter().enumerate() {
                if *n > c[best] {
                    best = k;
                }
            }
            (c[best] > 0).then_some(best as u8)
        })
        .collect()
}
