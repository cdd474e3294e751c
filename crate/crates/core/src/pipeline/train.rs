use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::{compute_association, AssociationMap, DEPTH_THRESHOLD};
use crate::error::{Error, Result};
use crate::net::{encode_frame, EncodedFrame, NetGraph, Network, Recurrent};
use crate::synth::Video;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// One epoch draws as many frames as the training set holds.
    pub epochs: usize,
    pub seed: u64,
    /// Frames per recurrent mini-batch.
    pub clip_length: usize,
    /// Gradients with a larger global L2 norm are rescaled to it; 0 disables.
    pub clip_norm: f64,
    /// Exclude pixels without depth from the loss.
    pub ignore_missing_depth: bool,
    /// L2 penalty on all parameters.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
            clip_length: 3,
            clip_norm: 0.0,
            ignore_missing_depth: true,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.clip_length == 0 {
            return Err(Error::InvalidConfig("clip_length must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::InvalidConfig("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Associations between consecutive frames from the recorded poses.
pub fn ground_truth_associations(video: &Video) -> Vec<Option<AssociationMap>> {
    let mut out = vec![None];
    for k in 1..video.frames.len() {
        let (a, b) = (&video.frames[k - 1], &video.frames[k]);
        out.push(Some(compute_association(
            &b.depth,
            &a.pose,
            &b.pose,
            &b.intrinsics,
            &a.depth,
            DEPTH_THRESHOLD,
        )));
    }
    out
}

struct Sample {
    input: EncodedFrame,
    ignore: Option<Vec<bool>>,
}

/// Trains `network` with SGD and momentum. FCNs see one uniformly drawn
/// frame per step; recurrent nets see `clip_length` consecutive frames
/// starting from a zero state, with ground-truth associations. `on_step`
/// receives the step index and loss. Returns the trained network and the
/// per-step losses.
pub fn train_network(
    network: &Network,
    videos: &[Video],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<(Network, Vec<f32>)> {
    config.validate()?;
    let net_cfg = &network.config;
    let first = videos
        .iter()
        .find_map(|v| v.frames.first())
        .ok_or_else(|| Error::InvalidInput("training set has no frames".into()))?;
    let (w, h) = (first.depth.width, first.depth.height);
    for v in videos {
        for f in &v.frames {
            if (f.depth.width, f.depth.height) != (w, h) {
                return Err(Error::InvalidInput("training frames differ in size".into()));
            }
            if let Some(l) = f.labels.data.iter().find(|l| **l as usize >= net_cfg.num_classes) {
                return Err(Error::InvalidConfig(format!(
                    "dataset label {l} exceeds the network's {} classes",
                    net_cfg.num_classes
                )));
            }
        }
    }
    let recurrent = net_cfg.recurrent != Recurrent::None;
    let clip = if recurrent { config.clip_length } else { 1 };
    let usable: Vec<usize> = (0..videos.len()).filter(|i| videos[*i].frames.len() >= clip).collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput(format!("no video has {clip} frames")));
    }
    let samples: Vec<Vec<Sample>> = videos
        .iter()
        .map(|v| {
            v.frames
                .iter()
                .map(|f| Sample {
                    input: encode_frame(f, net_cfg),
                    ignore: config.ignore_missing_depth.then(|| f.missing_mask()),
                })
                .collect()
        })
        .collect();
    let assocs: Vec<Vec<Option<AssociationMap>>> = if recurrent {
        videos.iter().map(ground_truth_associations).collect()
    } else {
        Vec::new()
    };
    let total_frames: usize = videos.iter().map(|v| v.frames.len()).sum();
    let steps_per_epoch = (total_frames / clip).max(1);
    let steps = steps_per_epoch * config.epochs;

    let mut g: NetGraph<f32> = network.build_graph(clip, w, h)?;
    let mut velocity: Vec<Vec<f32>> = g.params.iter().map(|(_, id)| vec![0.0; g.graph.value(*id).len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(steps);
    let (lr, mu, wd) = (config.lr as f32, config.momentum as f32, config.weight_decay as f32);
    for step in 0..steps {
        let (vi, start) = if recurrent {
            let vi = usable[rng.random_range(0..usable.len())];
            (vi, rng.random_range(0..=videos[vi].frames.len() - clip))
        } else {
            // uniform over all frames of the training set
            let mut k = rng.random_range(0..total_frames);
            let mut vi = 0;
            while k >= videos[vi].frames.len() {
                k -= videos[vi].frames.len();
                vi += 1;
            }
            (vi, k)
        };
        for t in 0..clip {
            let s = &samples[vi][start + t];
            g.set_inputs(t, &s.input)?;
            g.set_targets(t, &videos[vi].frames[start + t].labels, s.ignore.as_deref())?;
            if t > 0 {
                let a = assocs[vi][start + t].as_ref().expect("frames after the first have associations");
                g.set_association(t, a)?;
            }
        }
        g.set_initial_state(None)?;
        g.graph.forward()?;
        let loss = g.graph.value(g.loss)[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: step, loss: loss as f64 });
        }
        g.graph.backward(g.loss)?;
        let mut scale = 1.0f32;
        if config.clip_norm > 0.0 {
            let norm: f64 = g
                .params
                .iter()
                .filter_map(|(_, id)| g.graph.grad(*id))
                .flat_map(|gr| gr.iter().map(|v| (*v as f64) * (*v as f64)))
                .sum::<f64>()
                .sqrt();
            if norm > config.clip_norm {
                scale = (config.clip_norm / norm) as f32;
            }
        }
        // writing a parameter invalidates the graph's gradients, so read all first
        let grads: Vec<Option<Vec<f32>>> = g.params.iter().map(|(_, id)| g.graph.grad(*id).map(<[f32]>::to_vec)).collect();
        for (k, (_, id)) in g.params.iter().enumerate() {
            let Some(grad) = &grads[k] else { continue };
            let vel = &mut velocity[k];
            let value = g.graph.param_value_mut(*id)?;
            for i in 0..value.len() {
                vel[i] = mu * vel[i] - lr * (scale * grad[i] + wd * value[i]);
                value[i] += vel[i];
            }
        }
        losses.push(loss);
        on_step(step, loss);
    }
    let trained = Network::from_params(net_cfg, &g.export_params())?;
    Ok((trained, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{InputKind, NetConfig};
    use crate::synth::{generate_video, VideoConfig};

    fn videos(n: u64) -> Vec<Video> {
        let cfg = VideoConfig {
            frames: 6,
            image_size: 32,
            ..VideoConfig::default()
        };
        (0..n).map(|s| generate_video(s + 1, &cfg).unwrap().1).collect()
    }

    fn micro(rec: Recurrent) -> NetConfig {
        NetConfig {
            embed_dim: 4,
            feature_dim: 8,
            widths: vec![4, 4, 4, 4, 8, 8, 8, 8, 8, 8, 8, 8, 8],
            ..NetConfig::tiny(InputKind::Depth, rec)
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let net = Network::init(&micro(Recurrent::Daru), 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let (out, losses) = train_network(&net, &videos(1), &cfg, |_, _| {}).unwrap();
        assert_eq!(out, net);
        assert_eq!(losses.len(), 2);
    }

    #[test]
    fn loss_decreases() {
        let net = Network::init(&micro(Recurrent::None), 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 6,
            ..TrainConfig::default()
        };
        let (_, losses) = train_network(&net, &videos(2), &cfg, |_, _| {}).unwrap();
        let q = losses.len() / 4;
        let head: f32 = losses[..q].iter().sum::<f32>() / q as f32;
        let tail: f32 = losses[losses.len() - q..].iter().sum::<f32>() / q as f32;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let net = Network::init(&micro(Recurrent::Gru), 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 1,
            seed: 7,
            ..TrainConfig::default()
        };
        let v = videos(2);
        let a = train_network(&net, &v, &cfg, |_, _| {}).unwrap();
        let b = train_network(&net, &v, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.0.params.to_bytes(), b.0.params.to_bytes());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn nan_loss_aborts() {
        let mut net = Network::init(&micro(Recurrent::None), 1).unwrap();
        net.params.get_mut("cls.b").unwrap().data_mut()[0] = f32::NAN;
        assert!(matches!(
            train_network(&net, &videos(1), &TrainConfig::default(), |_, _| {}),
            Err(Error::Diverged { iteration: 0, .. })
        ));
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let mut c = micro(Recurrent::None);
        c.num_classes = 2;
        let net = Network::init(&c, 1).unwrap();
        assert!(matches!(
            train_network(&net, &videos(1), &TrainConfig::default(), |_, _| {}),
            Err(Error::InvalidConfig(_))
        ));
    }
}
