use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[video]
frames = 6
image_size = 32

[video.trajectory]
arc_degrees = 15.0

[net]
input_kind = "depth"
recurrent = "daru"
embed_dim = 4
feature_dim = 8
widths = [4, 4, 4, 4, 8, 8, 8, 8, 8, 8, 8, 8, 8]

[train]
epochs = 1
lr = 0.01

[map.volume]
origin = [-0.8, -0.7, -0.05]
voxel_size = 0.02
dims = [80, 70, 48]
"#;

fn semmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = semmap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    tmp
}

#[test]
fn generate_writes_the_dataset_layout_deterministically() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["-c", "small.toml", "generate", "--out", "a", "--seed", "5", "--count", "2"]);
    ok(d, &["-c", "small.toml", "generate", "--out", "b", "--seed", "5", "--count", "2"]);
    for scene in ["scene_0000", "scene_0001"] {
        for f in ["poses.txt", "camera.txt", "meta.txt", "color_0005.png", "depth_0005.png", "label_0005.png"] {
            let (a, b) = (d.join("a").join(scene).join(f), d.join("b").join(scene).join(f));
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{}", a.display());
        }
    }
}

#[test]
fn map_with_ground_truth_labels_scores_perfectly_and_exports() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["-c", "small.toml", "generate", "--out", "data", "--seed", "3"]);
    ok(d, &["-c", "small.toml", "map", "--data", "data", "--out", "map", "--poses", "gt", "--dump-assoc"]);
    let scene = d.join("map/scene_0000");
    for f in ["volume.bin", "cloud.ply", "trajectory.txt", "pred_0000.png", "assoc_0003.bin"] {
        assert!(scene.join(f).is_file(), "missing {f}");
    }
    // association dump: one little-endian int32 per pixel, -1 for none
    let bytes = fs::read(scene.join("assoc_0000.bin")).unwrap();
    assert_eq!(bytes.len(), 4 * 32 * 32);
    assert!(bytes.chunks(4).all(|c| i32::from_le_bytes(c.try_into().unwrap()) == -1));
    let bytes = fs::read(scene.join("assoc_0003.bin")).unwrap();
    let entries: Vec<i32> = bytes.chunks(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
    assert!(entries.iter().all(|e| (-1..1024).contains(e)));
    assert!(entries.iter().filter(|e| **e >= 0).count() > 512);

    let table = ok(d, &["-c", "small.toml", "eval", "--data", "data", "--pred", "map"]);
    assert!(table.contains("mean"), "{table}");
    let csv = fs::read_to_string(d.join("map/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,iou,precision,recall"));
    let mean: Vec<&str> = csv.lines().find(|l| l.starts_with("mean,")).unwrap().split(',').collect();
    assert_eq!(mean[1].parse::<f64>().unwrap(), 100.0);

    ok(d, &["export", "--snapshot", "map/scene_0000/volume.bin", "--ply", "out.ply"]);
    let exported = fs::read_to_string(d.join("out.ply")).unwrap();
    assert_eq!(exported, fs::read_to_string(scene.join("cloud.ply")).unwrap());
    assert!(exported.starts_with("ply\nformat ascii 1.0\n"));
    assert!(exported.contains("property int label\nend_header\n"));
}

#[test]
fn train_then_infer_produces_predictions() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["-c", "small.toml", "generate", "--out", "data", "--count", "2"]);
    let msg = ok(d, &["-c", "small.toml", "train", "--data", "data", "--out", "net.smck"]);
    assert!(msg.contains("steps"), "{msg}");
    assert!(d.join("net.smck.log").is_file());
    ok(d, &["-c", "small.toml", "infer", "--data", "data", "--checkpoint", "net.smck", "--out", "pred", "--poses", "gt"]);
    assert!(d.join("pred/scene_0001/pred_0005.png").is_file());
    ok(d, &["-c", "small.toml", "eval", "--data", "data", "--pred", "pred", "--csv", "m.csv"]);
    assert!(d.join("m.csv").is_file());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = setup();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[net]\nnum_classes = 1\n").unwrap();
    let out = semmap(d, &["-c", "bad.toml", "generate", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_classes"));

    fs::write(d.join("typo.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    assert!(!semmap(d, &["-c", "typo.toml", "generate", "--out", "x"]).status.success());

    let out = semmap(d, &["eval", "--data", "missing", "--pred", "missing"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = semmap(d, &["export", "--snapshot", "small.toml", "--ply", "o.ply"]);
    assert!(!out.status.success());
}
