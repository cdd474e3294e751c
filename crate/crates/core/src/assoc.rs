//! Pose-derived pixel correspondences between consecutive frames.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::image::DepthImage;

/// Default depth agreement required to accept an association, meters.
pub const DEPTH_THRESHOLD: f64 = 0.03;

/// For every pixel of the current frame, the flat index of its associated
/// pixel in the previous frame, or -1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMap {
    width: usize,
    height: usize,
    entries: Vec<i32>,
}

impl AssociationMap {
    pub fn none(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            entries: vec![-1; width * height],
        }
    }

    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            entries: (0..(width * height) as i32).collect(),
        }
    }

    /// Builds a map whose entries must be -1 or index into a previous frame
    /// of `prev_len` pixels.
    pub fn from_entries(width: usize, height: usize, prev_len: usize, entries: Vec<i32>) -> Result<Self> {
        if entries.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "{} association entries for a {width}x{height} frame",
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|e| **e < -1 || **e >= prev_len as i32) {
            return Err(Error::Association {
                index: *bad as i64,
                len: prev_len,
            });
        }
        Ok(Self { width, height, entries })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[i32] {
        &self.entries
    }

    pub fn get(&self, pixel: usize) -> Option<usize> {
        usize::try_from(self.entries[pixel]).ok()
    }

    /// Debug dump: the entries as little-endian int32, row-major, no header.
    pub fn write_debug(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.entries.iter().flat_map(|e| e.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_debug(path: &Path, width: usize, height: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 4 * width * height {
            return Err(Error::format(path, format!("expected {} bytes", 4 * width * height)));
        }
        let entries = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_entries(width, height, width * height, entries).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Associates each valid pixel of frame t+1 with the pixel of frame t that
/// its back-projected point lands on (nearest pixel), provided frame t
/// measured a depth within `delta` of the projected depth there.
pub fn compute_association(
    depth_t1: &DepthImage,
    pose_t: &Pose,
    pose_t1: &Pose,
    intr: &Intrinsics,
    depth_t: &DepthImage,
    delta: f64,
) -> AssociationMap {
    let (w, h) = (depth_t1.width, depth_t1.height);
    let mut map = AssociationMap::none(w, h);
    // camera t+1 to camera t
    let rel = pose_t.inverse().compose(pose_t1);
    for v in 0..h {
        for u in 0..w {
            let z = depth_t1.get(u, v) as f64;
            if z <= 0.0 {
                continue;
            }
            let c = rel.apply(&(intr.ray(u as f64, v as f64) * z));
            if c.z <= 0.0 {
                continue;
            }
            let (pu, pv) = intr.project_camera(&c);
            let Some((pu, pv)) = intr.pixel(pu, pv) else { continue };
            if pu >= depth_t.width || pv >= depth_t.height {
                continue;
            }
            let d = depth_t.get(pu, pv) as f64;
            if d > 0.0 && (c.z - d).abs() < delta {
                map.entries[v * w + u] = (pv * depth_t.width + pu) as i32;
            }
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationStats {
    pub associated: f64,
    pub none: f64,
}

pub fn association_stats(map: &AssociationMap) -> AssociationStats {
    if map.is_empty() {
        return AssociationStats {
            associated: 0.0,
            none: 1.0,
        };
    }
    let n = map.entries.iter().filter(|e| **e >= 0).count();
    let associated = n as f64 / map.len() as f64;
    AssociationStats {
        associated,
        none: (map.len() - n) as f64 / map.len() as f64,
    }
}
