use serde::{Deserialize, Serialize};

use crate::assoc::{compute_association, AssociationMap, DEPTH_THRESHOLD};
use crate::daru::DaruState;
use crate::error::{Error, Result};
use crate::geom::{PointCloud, Pose};
use crate::mapping::{extract_surface, icp_track, raycast, tsdf_integrate, IcpConfig, TsdfVolume, VolumeConfig};
use crate::net::{LabelProbMap, Predictor};
use crate::semfuse::{fuse_labels, label_points, LabeledView, VISIBILITY_THRESHOLD};
use crate::synth::Video;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    GroundTruth,
    Icp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub volume: VolumeConfig,
    pub icp: IcpConfig,
    pub poses: PoseSource,
    pub assoc_threshold: f64,
    /// Keep every frame's association map in the result.
    pub record_associations: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            volume: VolumeConfig::default(),
            icp: IcpConfig::default(),
            poses: PoseSource::Icp,
            assoc_threshold: DEPTH_THRESHOLD,
            record_associations: false,
        }
    }
}

/// Where per-frame label probabilities come from.
pub enum LabelSource<'a> {
    Network(&'a mut Predictor),
    /// One-hot ground-truth labels.
    Oracle,
}

#[derive(Debug, Clone)]
pub struct MappingResult {
    pub volume: TsdfVolume,
    pub cloud: PointCloud,
    pub trajectory: Vec<Pose>,
    /// Frames where tracking failed and the previous pose was reused.
    pub lost: Vec<usize>,
    pub probs: Vec<LabelProbMap>,
    pub associations: Vec<AssociationMap>,
}

/// The full semantic mapping loop. Per frame: track against a raycast of
/// the volume, integrate depth, associate with the previous frame, predict
/// labels and fuse them. The first frame's recorded pose anchors the map.
pub fn run_semantic_mapping(video: &Video, mut source: LabelSource<'_>, config: &MapConfig) -> Result<MappingResult> {
    let mut volume = TsdfVolume::new(&config.volume)?;
    let mut result = MappingResult {
        volume: volume.clone(),
        cloud: PointCloud::default(),
        trajectory: Vec::new(),
        lost: Vec::new(),
        probs: Vec::new(),
        associations: Vec::new(),
    };
    if video.frames.is_empty() {
        return Ok(result);
    }
    let mut state: Option<DaruState<f32>> = None;
    for (k, frame) in video.frames.iter().enumerate() {
        let intr = &frame.intrinsics;
        let mut tracked = true;
        let pose = if k == 0 || config.poses == PoseSource::GroundTruth {
            frame.pose
        } else {
            let prev = result.trajectory[k - 1];
            let model = raycast(&volume, &prev, intr);
            match icp_track(&model, &frame.depth, intr, &prev, &config.icp) {
                Ok(r) => r.pose,
                Err(Error::TrackingLost { .. }) => {
                    tracked = false;
                    result.lost.push(k);
                    prev
                }
                Err(e) => return Err(e),
            }
        };
        result.trajectory.push(pose);
        tsdf_integrate(&mut volume, &frame.depth, &pose, intr);
        let assoc = if k == 0 || !tracked {
            AssociationMap::none(frame.depth.width, frame.depth.height)
        } else {
            let prev = &video.frames[k - 1];
            compute_association(
                &frame.depth,
                &result.trajectory[k - 1],
                &pose,
                intr,
                &prev.depth,
                config.assoc_threshold,
            )
        };
        let probs = match &mut source {
            LabelSource::Oracle => LabelProbMap::one_hot(&frame.labels, volume.num_classes()),
            LabelSource::Network(p) => {
                let (probs, next) = p.predict(frame, state.as_ref(), Some(&assoc))?;
                state = next;
                probs
            }
        };
        fuse_labels(&mut volume, &probs, &frame.depth, &pose, intr)?;
        result.probs.push(probs);
        if config.record_associations {
            result.associations.push(assoc);
        }
    }
    result.cloud = extract_surface(&volume);
    result.volume = volume;
    Ok(result)
}

/// Per-frame probabilities with the recurrent state carried along
/// associations computed from `poses` (one per frame).
pub fn infer_video(predictor: &mut Predictor, video: &Video, poses: &[Pose]) -> Result<Vec<LabelProbMap>> {
    if poses.len() != video.frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} poses for {} frames",
            poses.len(),
            video.frames.len()
        )));
    }
    let mut state = None;
    let mut out = Vec::with_capacity(poses.len());
    for (k, frame) in video.frames.iter().enumerate() {
        let assoc = if k == 0 {
            AssociationMap::none(frame.depth.width, frame.depth.height)
        } else {
            compute_association(
                &frame.depth,
                &poses[k - 1],
                &poses[k],
                &frame.intrinsics,
                &video.frames[k - 1].depth,
                DEPTH_THRESHOLD,
            )
        };
        let (probs, next) = predictor.predict(frame, state.as_ref(), Some(&assoc))?;
        state = next;
        out.push(probs);
    }
    Ok(out)
}

/// Camera trajectory from depth-only tracking (no labels fused).
pub fn track_video(video: &Video, config: &MapConfig) -> Result<(Vec<Pose>, Vec<usize>)> {
    let mut volume = TsdfVolume::new(&config.volume)?;
    let mut poses: Vec<Pose> = Vec::with_capacity(video.frames.len());
    let mut lost = Vec::new();
    for (k, frame) in video.frames.iter().enumerate() {
        let pose = if k == 0 {
            frame.pose
        } else {
            let prev = poses[k - 1];
            let model = raycast(&volume, &prev, &frame.intrinsics);
            match icp_track(&model, &frame.depth, &frame.intrinsics, &prev, &config.icp) {
                Ok(r) => r.pose,
                Err(Error::TrackingLost { .. }) => {
                    lost.push(k);
                    prev
                }
                Err(e) => return Err(e),
            }
        };
        tsdf_integrate(&mut volume, &frame.depth, &pose, &frame.intrinsics);
        poses.push(pose);
    }
    Ok((poses, lost))
}

/// Ground-truth point labels from the labeled frames, plus the indices of
/// the points no frame sees.
pub fn ground_truth_point_labels(points: &PointCloud, video: &Video, num_classes: usize) -> (Vec<u8>, Vec<usize>) {
    let Some(intr) = video.intrinsics() else {
        return (Vec::new(), Vec::new());
    };
    let views: Vec<LabeledView<'_>> = video
        .frames
        .iter()
        .map(|f| LabeledView {
            labels: &f.labels,
            depth: &f.depth,
            pose: &f.pose,
        })
        .collect();
    let labels = label_points(&points.points, &views, &intr, num_classes, VISIBILITY_THRESHOLD);
    let mut gt = Vec::with_capacity(labels.len());
    let mut unseen = Vec::new();
    for (i, l) in labels.into_iter().enumerate() {
        match l {
            Some(l) => gt.push(l),
            None => unseen.push(i),
        }
    }
    (gt, unseen)
}

/// Pairs the cloud's fused labels with ground truth over the points some
/// frame sees.
pub fn point_label_pairs(cloud: &PointCloud, video: &Video, num_classes: usize) -> (Vec<Option<u8>>, Vec<u8>) {
    let (gt, unseen) = ground_truth_point_labels(cloud, video, num_classes);
    let fused = cloud.labels.clone().unwrap_or_else(|| vec![None; cloud.len()]);
    let mut skip = unseen.into_iter().peekable();
    let mut pred = Vec::with_capacity(gt.len());
    for (i, l) in fused.into_iter().enumerate() {
        if skip.peek() == Some(&i) {
            skip.next();
            continue;
        }
        pred.push(l);
    }
    (pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{InputKind, NetConfig, Network, Recurrent};
    use crate::pipeline::metrics::point_accuracy;
    use crate::synth::{generate_video, VideoConfig};

    fn video(frames: usize) -> Video {
        let mut v = generate_video(11, &VideoConfig::default()).unwrap().1;
        v.frames.truncate(frames);
        v
    }

    fn coarse() -> MapConfig {
        MapConfig {
            volume: VolumeConfig {
                origin: [-0.8, -0.7, -0.05],
                voxel_size: 0.02,
                dims: [80, 70, 48],
                ..VolumeConfig::default()
            },
            ..MapConfig::default()
        }
    }

    #[test]
    fn empty_video_gives_empty_outputs() {
        let v = Video { seed: 0, frames: vec![] };
        let r = run_semantic_mapping(&v, LabelSource::Oracle, &coarse()).unwrap();
        assert!(r.cloud.is_empty() && r.trajectory.is_empty() && r.probs.is_empty());
    }

    #[test]
    fn oracle_mapping_labels_points() {
        let v = video(12);
        let mut cfg = coarse();
        cfg.record_associations = true;
        let r = run_semantic_mapping(&v, LabelSource::Oracle, &cfg).unwrap();
        assert_eq!(r.trajectory.len(), 12);
        assert_eq!(r.associations.len(), 12);
        assert!(r.lost.is_empty());
        let (pred, gt) = point_label_pairs(&r.cloud, &v, 5);
        assert!(gt.len() > 1000);
        assert!(point_accuracy(&pred, &gt) > 95.0);
    }

    #[test]
    fn fcn_inference_ignores_frame_order() {
        let v = video(3);
        let c = NetConfig {
            embed_dim: 4,
            feature_dim: 8,
            widths: vec![4, 4, 4, 4, 8, 8, 8, 8, 8, 8, 8, 8, 8],
            ..NetConfig::tiny(InputKind::Depth, Recurrent::None)
        };
        let mut p = Predictor::new(Network::init(&c, 1).unwrap());
        let fwd = infer_video(&mut p, &v, &v.poses()).unwrap();
        let mut rev = v.clone();
        rev.frames.reverse();
        let back = infer_video(&mut p, &rev, &rev.poses()).unwrap();
        assert_eq!(fwd[0], back[2]);
        let daru = NetConfig {
            recurrent: Recurrent::Daru,
            ..c
        };
        let mut p = Predictor::new(Network::init(&daru, 1).unwrap());
        let fwd = infer_video(&mut p, &v, &v.poses()).unwrap();
        let back = infer_video(&mut p, &rev, &rev.poses()).unwrap();
        assert_ne!(fwd[0], back[2]);
    }

    #[test]
    fn tracking_matches_ground_truth() {
        let v = video(10);
        let (poses, lost) = track_video(&v, &coarse()).unwrap();
        assert!(lost.is_empty());
        for (p, f) in poses.iter().zip(&v.frames) {
            assert!(p.translation_distance_to(&f.pose) < 0.02);
        }
    }
}
