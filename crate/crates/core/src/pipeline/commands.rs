//! File-level operations behind the command-line tool.
//!
//! Output layout mirrors the dataset: every per-scene output goes to
//! `<out>/scene_XXXX/`, so `eval` can pair predictions with ground truth by
//! directory name.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{point_accuracy, point_pr, ConfusionMatrix, MetricsReport};
use super::run::{infer_video, point_label_pairs, run_semantic_mapping, track_video, LabelSource, MapConfig, PoseSource};
use super::train::{train_network, TrainConfig};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::mapping::{extract_surface, read_ply, read_snapshot, write_ply, write_snapshot};
use crate::net::{NetConfig, Network, Predictor};
use crate::synth::{
    generate_video, read_label_png, read_video, write_label_png, write_video, Video, VideoConfig,
};
use crate::tensor::{read_checkpoint, write_checkpoint};

/// Every setting the command-line tool reads from its config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub video: VideoConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub map: MapConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.net.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Scene directories under `root`, or `root` itself when it is a scene.
pub fn list_scenes(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if root.join("camera.txt").is_file() {
        let name = root
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("scene_0000")
            .to_string();
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("camera.txt").is_file())
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p.clone())))
        .filter(|(n, _)| n.starts_with("scene_"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::format(root, "no scene_XXXX directories"));
    }
    Ok(out)
}

fn load_scenes(root: &Path) -> Result<Vec<(String, Video)>> {
    list_scenes(root)?
        .into_iter()
        .map(|(name, dir)| Ok((name, read_video(&dir)?)))
        .collect()
}

/// Class names listed in a scene's `meta.txt`.
pub fn read_class_names(scene: &Path) -> Result<Vec<String>> {
    let path = scene.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("classes"))
        .map(|rest| rest.split_whitespace().map(str::to_string).collect())
        .ok_or_else(|| Error::format(&path, "missing classes line"))
}

fn check_classes(scene: &Path, num_classes: usize) -> Result<Vec<String>> {
    let names = read_class_names(scene)?;
    if names.len() != num_classes {
        return Err(Error::InvalidConfig(format!(
            "{} lists {} classes, the network has {num_classes}",
            scene.display(),
            names.len()
        )));
    }
    Ok(names)
}

/// Writes `count` videos with seeds `first_seed..` as `scene_0000..`.
pub fn generate(out: &Path, first_seed: u64, count: usize, config: &VideoConfig) -> Result<()> {
    for i in 0..count {
        let (_, video) = generate_video(first_seed + i as u64, config)?;
        write_video(&video, &out.join(format!("scene_{i:04}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f32,
    pub last_loss: f32,
}

/// Trains from a dataset directory, writing the checkpoint and a
/// `step loss` log next to it (`<checkpoint>.log`).
pub fn train(data: &Path, net: &NetConfig, config: &TrainConfig, checkpoint: &Path) -> Result<TrainSummary> {
    let scenes = load_scenes(data)?;
    check_classes(&list_scenes(data)?[0].1, net.num_classes)?;
    let videos: Vec<Video> = scenes.into_iter().map(|(_, v)| v).collect();
    let init = Network::init(net, config.seed)?;
    let mut log = String::new();
    let (trained, losses) = train_network(&init, &videos, config, |step, loss| {
        log.push_str(&format!("{step} {loss}\n"));
    })?;
    write_checkpoint(&trained.params, checkpoint)?;
    write_file(&log_path(checkpoint), log.as_bytes())?;
    Ok(TrainSummary {
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(0.0),
        last_loss: losses.last().copied().unwrap_or(0.0),
    })
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

pub fn load_network(checkpoint: &Path, net: &NetConfig) -> Result<Network> {
    let params = read_checkpoint(checkpoint)?;
    Network::from_params(net, &params).map_err(|e| match e {
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", checkpoint.display())),
        other => other,
    })
}

fn write_predictions(dir: &Path, video: &Video, labels: impl Iterator<Item = crate::image::LabelImage>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, l) in video.frames.iter().zip(labels) {
        write_label_png(&dir.join(format!("pred_{:04}.png", f.index)), &l)?;
    }
    Ok(())
}

fn poses_text(poses: &[Pose], video: &Video) -> String {
    let mut s = String::new();
    for (p, f) in poses.iter().zip(&video.frames) {
        let [qw, qx, qy, qz] = p.quaternion();
        let t = p.translation();
        s.push_str(&format!("{} {qw} {qx} {qy} {qz} {} {} {}\n", f.index, t.x, t.y, t.z));
    }
    s
}

/// Per-frame label predictions (`pred_YYYY.png`) for every scene.
pub fn infer(data: &Path, checkpoint: &Path, net: &NetConfig, map: &MapConfig, out: &Path) -> Result<()> {
    let mut predictor = Predictor::new(load_network(checkpoint, net)?);
    for (name, video) in load_scenes(data)? {
        let poses = match map.poses {
            PoseSource::GroundTruth => video.poses(),
            PoseSource::Icp => {
                let (poses, lost) = track_video(&video, map)?;
                for k in lost {
                    eprintln!("warning: {name}: tracking lost at frame {k}");
                }
                poses
            }
        };
        let probs = infer_video(&mut predictor, &video, &poses)?;
        write_predictions(&out.join(&name), &video, probs.iter().map(|p| p.argmax()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary {
    pub scenes: usize,
    pub points: usize,
    pub lost_frames: usize,
    pub frames_per_second: f64,
}

/// Runs semantic mapping on every scene. Writes `volume.bin`, `cloud.ply`,
/// `trajectory.txt` and `pred_YYYY.png` per scene, plus `assoc_YYYY.bin`
/// when `dump_associations` is set. Without a checkpoint, ground-truth
/// labels stand in for the network.
pub fn map(
    data: &Path,
    checkpoint: Option<&Path>,
    net: &NetConfig,
    config: &MapConfig,
    out: &Path,
    dump_associations: bool,
) -> Result<MapSummary> {
    let mut predictor = match checkpoint {
        Some(c) => Some(Predictor::new(load_network(c, net)?)),
        None => None,
    };
    let mut cfg = config.clone();
    cfg.record_associations |= dump_associations;
    let mut summary = MapSummary {
        scenes: 0,
        points: 0,
        lost_frames: 0,
        frames_per_second: 0.0,
    };
    let (mut total_frames, mut total_seconds) = (0usize, 0f64);
    for (name, video) in load_scenes(data)? {
        let source = match predictor.as_mut() {
            Some(p) => LabelSource::Network(p),
            None => LabelSource::Oracle,
        };
        let start = Instant::now();
        let r = run_semantic_mapping(&video, source, &cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_snapshot(&dir.join("volume.bin"), &r.volume)?;
        write_ply(&dir.join("cloud.ply"), &r.cloud)?;
        write_file(&dir.join("trajectory.txt"), poses_text(&r.trajectory, &video).as_bytes())?;
        write_predictions(&dir, &video, r.probs.iter().map(|p| p.argmax()))?;
        if dump_associations {
            for (a, f) in r.associations.iter().zip(&video.frames) {
                a.write_debug(&dir.join(format!("assoc_{:04}.bin", f.index)))?;
            }
        }
        for k in &r.lost {
            eprintln!("warning: {name}: tracking lost at frame {k}");
        }
        summary.scenes += 1;
        summary.points += r.cloud.len();
        summary.lost_frames += r.lost.len();
        total_frames += video.frames.len();
        total_seconds += seconds;
    }
    summary.frames_per_second = total_frames as f64 / total_seconds.max(1e-9);
    Ok(summary)
}

/// Pixel IoU of `pred/scene_XXXX/pred_YYYY.png` against the dataset labels,
/// ignoring pixels without depth. Scenes with a `cloud.ply` also get 3D
/// point precision/recall.
pub fn eval(data: &Path, pred: &Path) -> Result<MetricsReport> {
    let scenes = list_scenes(data)?;
    let names = read_class_names(&scenes[0].1)?;
    let classes = names.len();
    let mut cm = ConfusionMatrix::new(classes);
    let (mut pt_pred, mut pt_gt) = (Vec::new(), Vec::new());
    let mut any_pixels = false;
    for (name, dir) in &scenes {
        let video = read_video(dir)?;
        let pdir = pred.join(name);
        for f in &video.frames {
            let path = pdir.join(format!("pred_{:04}.png", f.index));
            if !path.is_file() {
                continue;
            }
            let p = read_label_png(&path)?;
            if (p.width, p.height) != (f.labels.width, f.labels.height) {
                return Err(Error::format(&path, "prediction size does not match the labels"));
            }
            cm.add_labels(&p.data, &f.labels.data, Some(&f.missing_mask()));
            any_pixels = true;
        }
        let cloud_path = pdir.join("cloud.ply");
        if cloud_path.is_file() {
            let cloud = read_ply(&cloud_path)?;
            let (p, g) = point_label_pairs(&cloud, &video, classes);
            pt_pred.extend(p);
            pt_gt.extend(g);
        }
    }
    if !any_pixels && pt_gt.is_empty() {
        return Err(Error::InvalidInput(format!("no predictions found under {}", pred.display())));
    }
    let has_points = !pt_gt.is_empty();
    Ok(MetricsReport {
        class_names: names,
        iou: any_pixels.then(|| cm.iou()),
        pixel_accuracy: any_pixels.then(|| cm.accuracy()),
        points: has_points.then(|| point_pr(&pt_pred, &pt_gt, classes)),
        point_accuracy: has_points.then(|| point_accuracy(&pt_pred, &pt_gt)),
    })
}

/// Writes the report as `<out>.csv` and returns the table.
pub fn write_report(report: &MetricsReport, csv: &Path) -> Result<String> {
    write_file(csv, report.to_csv().as_bytes())?;
    Ok(report.to_table())
}

/// Surface of a volume snapshot as a labeled PLY.
pub fn export(snapshot: &Path, ply: &Path) -> Result<usize> {
    let vol = read_snapshot(snapshot)?;
    let cloud = extract_surface(&vol);
    write_ply(ply, &cloud)?;
    Ok(cloud.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("[train]\nepochs = 2\n[map]\nposes = \"ground_truth\"\n").unwrap();
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.map.poses, PoseSource::GroundTruth);
        assert!(RunConfig::from_toml("[train]\nepoch = 2\n").is_err());
    }

    #[test]
    fn eval_of_ground_truth_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cfg = VideoConfig {
            frames: 3,
            image_size: 32,
            ..VideoConfig::default()
        };
        generate(&data, 5, 2, &cfg).unwrap();
        let pred = dir.path().join("pred");
        for (name, video) in load_scenes(&data).unwrap() {
            write_predictions(&pred.join(name), &video, video.frames.iter().map(|f| f.labels.clone())).unwrap();
        }
        let r = eval(&data, &pred).unwrap();
        assert_eq!(r.iou.unwrap().mean, 100.0);
        assert_eq!(r.pixel_accuracy, Some(100.0));
        assert!(r.points.is_none());
    }
}
