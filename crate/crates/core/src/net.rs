//! Fully convolutional labeling networks.
//!
//! Feature extraction is 13 3×3 convolutions in blocks of 2, 2, 3, 3, 3
//! with a 2×2 max pool after each of the first four blocks. The embedding
//! phase maps the block-5 features to `embed_dim` channels, upsamples ×2,
//! adds the block-4 features (mapped to `embed_dim` by a 3×3 convolution),
//! and upsamples ×8 back to input resolution. A 3×3 convolution then
//! produces per-class scores. Between the two sits the recurrent slot: a
//! plain ReLU for the FCN, or a DA-RU / GRU layer whose state flows between
//! frames along pixel associations.
//!
//! The two-stream variant runs separate RGB and depth towers and
//! concatenates their skip and main features.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::daru::{
    associate_state, daru_graph_step, gather_state, gru_graph_step,
    AssociationMap, DaruNodes, DaruParams, DaruState, GruNodes, GruParams, StateNodes,
};
use crate::error::{Error, Result};
use crate::geom::{compute_normals, encode_normals};
use crate::image::LabelImage;
use crate::synth::Frame;
use crate::tensor::kernels::bilinear_profile;
use crate::tensor::{Graph, NodeId, ParamSet, Scalar, SlotId, Tensor};

/// Block sizes of the feature extractor.
pub const BLOCKS: [usize; 5] = [2, 2, 3, 3, 3];
/// Index of the convolution whose output feeds the skip link.
const SKIP_SOURCE: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Rgb,
    Depth,
    Normal,
    Rgbd,
}

impl InputKind {
    pub fn is_double(self) -> bool {
        self == InputKind::Rgbd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recurrent {
    None,
    Daru,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    /// Output channels of the 13 feature convolutions.
    pub widths: Vec<usize>,
    pub input_kind: InputKind,
    pub recurrent: Recurrent,
    pub depth_range: DepthRange,
    /// Depth mapped to 255 under [`DepthRange::Fixed`], meters.
    pub max_depth: f64,
}

/// How depth values are stretched over 0..255 before entering the net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthRange {
    /// `[0, max_depth]`.
    Fixed,
    /// The frame's own valid depth range.
    Image,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            embed_dim: 64,
            feature_dim: 512,
            widths: vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
            input_kind: InputKind::Rgbd,
            recurrent: Recurrent::Daru,
            depth_range: DepthRange::Image,
            max_depth: 4.0,
        }
    }
}

impl NetConfig {
    /// A small configuration that trains in minutes on a CPU.
    pub fn tiny(input_kind: InputKind, recurrent: Recurrent) -> Self {
        Self {
            num_classes: 5,
            embed_dim: 16,
            feature_dim: 32,
            widths: vec![8, 8, 16, 16, 16, 16, 16, 32, 32, 32, 32, 32, 32],
            input_kind,
            recurrent,
            depth_range: DepthRange::Image,
            max_depth: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        let n: usize = BLOCKS.iter().sum();
        if self.widths.len() != n {
            return fail(format!("widths needs {n} entries, got {}", self.widths.len()));
        }
        if self.widths.contains(&0) {
            return fail("widths must be positive".into());
        }
        if self.widths[n - 1] != self.feature_dim {
            return fail(format!(
                "last width {} must equal feature_dim {}",
                self.widths[n - 1],
                self.feature_dim
            ));
        }
        if self.widths.iter().any(|w| *w > self.feature_dim) {
            return fail("widths are capped at feature_dim".into());
        }
        if self.max_depth <= 0.0 {
            return fail("max_depth must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Channel count of the concatenated (or single) features at the main
    /// and skip paths.
    fn fused_channels(&self) -> (usize, usize) {
        let k = if self.input_kind.is_double() { 2 } else { 1 };
        (k * self.feature_dim, k * self.widths[SKIP_SOURCE])
    }

    fn towers(&self) -> &'static [&'static str] {
        match self.input_kind {
            InputKind::Rgbd => &["rgb", "depth"],
            _ => &["feat"],
        }
    }
}

/// Shapes of every parameter, in creation order.
pub fn param_shapes(config: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for tower in config.towers() {
        let mut cin = 3;
        for (k, w) in config.widths.iter().enumerate() {
            out.push((format!("{tower}.c{k}.w"), vec![*w, cin, 3, 3]));
            out.push((format!("{tower}.c{k}.b"), vec![*w]));
            cin = *w;
        }
    }
    let (main, skip) = config.fused_channels();
    let e = config.embed_dim;
    out.push(("embed.w".into(), vec![e, main, 3, 3]));
    out.push(("embed.b".into(), vec![e]));
    out.push(("up2.w".into(), vec![e, e, 4, 4]));
    out.push(("skip.w".into(), vec![e, skip, 3, 3]));
    out.push(("skip.b".into(), vec![e]));
    out.push(("up8.w".into(), vec![e, e, 16, 16]));
    match config.recurrent {
        Recurrent::None => {}
        Recurrent::Daru => {
            out.push(("daru.w".into(), vec![e, 2 * e, 1, 1]));
            out.push(("daru.b".into(), vec![e]));
        }
        Recurrent::Gru => {
            for g in ["z", "r", "n"] {
                out.push((format!("gru.w{g}"), vec![e, 2 * e, 1, 1]));
                out.push((format!("gru.b{g}"), vec![e]));
            }
        }
    }
    out.push(("cls.w".into(), vec![config.num_classes, e, 3, 3]));
    out.push(("cls.b".into(), vec![config.num_classes]));
    out
}

/// Per-channel bilinear upsampling kernel `[c, c, 2f, 2f]`.
pub fn bilinear_kernel<T: Scalar>(channels: usize, factor: usize) -> Tensor<T> {
    let p = bilinear_profile(factor);
    let k = 2 * factor;
    let mut t = Tensor::zeros(&[channels, channels, k, k]);
    for c in 0..channels {
        for i in 0..k {
            for j in 0..k {
                t.data_mut()[((c * channels + c) * k + i) * k + j] = T::of(p[i] * p[j]);
            }
        }
    }
    t
}

/// Parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub params: ParamSet,
}

impl Network {
    /// He-normal convolutions, zero biases, bilinear deconvolutions and
    /// uniform recurrent weights, all drawn from `seed`.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.embed_dim;
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(config) {
            let t = if name == "up2.w" {
                bilinear_kernel(e, 2)
            } else if name == "up8.w" {
                bilinear_kernel(e, 8)
            } else if name.starts_with("daru.") || name.starts_with("gru.") {
                continue;
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            };
            params.insert(name, t);
        }
        match config.recurrent {
            Recurrent::None => {}
            Recurrent::Daru => {
                let (w, b) = DaruParams::<f32>::init(e, &mut rng).to_tensors();
                params.insert("daru.w", w);
                params.insert("daru.b", b);
            }
            Recurrent::Gru => {
                let t = GruParams::<f32>::init(e, &mut rng).to_tensors();
                for (k, g) in ["z", "r", "n"].iter().enumerate() {
                    params.insert(format!("gru.w{g}"), t[k].0.clone());
                    params.insert(format!("gru.b{g}"), t[k].1.clone());
                }
            }
        }
        // keep the canonical order regardless of insertion order above
        Self::from_params(config, &params)
    }

    /// Checks that `params` holds exactly the tensors `config` needs.
    pub fn from_params(config: &NetConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(config);
        if params.len() != shapes.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} tensors, the network needs {}",
                params.len(),
                shapes.len()
            )));
        }
        let mut ordered = ParamSet::new();
        for (name, shape) in shapes {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            ordered.insert(name, t.clone());
        }
        Ok(Self {
            config: config.clone(),
            params: ordered,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }
}

/// Graph input nodes for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameNodes {
    /// RGB, depth or normal image `[1, 3, H, W]`; RGB for two-stream nets.
    pub primary: NodeId,
    /// Depth image of a two-stream net.
    pub secondary: Option<NodeId>,
    pub targets: SlotId,
    /// Association to the previous frame of the unroll (absent on frame 0).
    pub assoc: Option<SlotId>,
    pub embedded: NodeId,
    pub recurrent_out: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub loss: NodeId,
    pub state: Option<StateNodes>,
}

/// A network unrolled over `frames` frames of a fixed size.
#[derive(Debug, Clone)]
pub struct NetGraph<T> {
    pub graph: Graph<T>,
    pub frames: Vec<FrameNodes>,
    /// Recurrent state fed into frame 0.
    pub init_state: Option<StateNodes>,
    /// Mean of the per-frame losses.
    pub loss: NodeId,
    pub params: Vec<(String, NodeId)>,
    pub width: usize,
    pub height: usize,
}

struct Builder<T: Scalar> {
    g: Graph<T>,
    param_ids: Vec<(String, NodeId)>,
}

impl<T: Scalar> Builder<T> {
    fn p(&self, name: &str) -> NodeId {
        self.param_ids
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} registered"))
            .1
    }

    fn conv(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        self.g.conv2d(x, w, b, 1, 1)
    }

    /// Returns (skip features, main features) of one tower.
    fn tower(&mut self, x: NodeId, tower: &str) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut k = 0;
        let mut skip = None;
        for (block, n) in BLOCKS.iter().enumerate() {
            for _ in 0..*n {
                let c = self.conv(h, &format!("{tower}.c{k}"))?;
                h = self.g.relu(c)?;
                if k == SKIP_SOURCE {
                    skip = Some(h);
                }
                k += 1;
            }
            if block < 4 {
                h = self.g.maxpool2x2(h)?;
            }
        }
        Ok((skip.expect("skip source inside the tower"), h))
    }
}

impl Network {
    /// Builds the training/inference graph for `frames` consecutive frames
    /// of `width`×`height` pixels.
    pub fn build_graph<T: Scalar>(&self, frames: usize, width: usize, height: usize) -> Result<NetGraph<T>> {
        let config = &self.config;
        if width % 16 != 0 || height % 16 != 0 || width == 0 || height == 0 {
            return Err(Error::InvalidShape(format!(
                "input size {width}x{height} must be a positive multiple of 16"
            )));
        }
        if frames == 0 {
            return Err(Error::InvalidShape("need at least one frame".into()));
        }
        let mut b = Builder {
            g: Graph::<T>::new(),
            param_ids: Vec::new(),
        };
        for (name, t) in self.params.iter() {
            let id = b.g.param(name, &t.cast());
            b.param_ids.push((name.to_string(), id));
        }
        let e = config.embed_dim;
        let n_pix = width * height;
        let state_shape = [1, e, height, width];
        let daru = (config.recurrent == Recurrent::Daru).then(|| DaruNodes {
            w: b.p("daru.w"),
            b: b.p("daru.b"),
        });
        let gru = (config.recurrent == Recurrent::Gru).then(|| GruNodes {
            gates: ["z", "r", "n"].map(|g| (b.p(&format!("gru.w{g}")), b.p(&format!("gru.b{g}")))),
        });
        let init_state = match config.recurrent {
            Recurrent::None => None,
            Recurrent::Daru => Some(StateNodes {
                hidden: b.g.input(&state_shape),
                weight: Some(b.g.input(&state_shape)),
            }),
            Recurrent::Gru => Some(StateNodes {
                hidden: b.g.input(&state_shape),
                weight: None,
            }),
        };
        let mut prev_state = init_state;
        let mut out_frames = Vec::with_capacity(frames);
        let mut total: Option<NodeId> = None;
        for t in 0..frames {
            let shape = [1, 3, height, width];
            let primary = b.g.input(&shape);
            let secondary = config.input_kind.is_double().then(|| b.g.input(&shape));
            let (skip, main) = match secondary {
                None => b.tower(primary, "feat")?,
                Some(sec) => {
                    let (s1, m1) = b.tower(primary, "rgb")?;
                    let (s2, m2) = b.tower(sec, "depth")?;
                    (b.g.concat_channels(s1, s2)?, b.g.concat_channels(m1, m2)?)
                }
            };
            let emb = b.conv(main, "embed")?;
            let up2w = b.p("up2.w");
            let up2 = b.g.deconv2d(emb, up2w, 2)?;
            let skip_e = b.conv(skip, "skip")?;
            let fused = b.g.add(up2, skip_e)?;
            let up8w = b.p("up8.w");
            let embedded = b.g.deconv2d(fused, up8w, 8)?;
            let mut assoc = None;
            let (recurrent_out, state) = match config.recurrent {
                Recurrent::None => (b.g.relu(embedded)?, None),
                kind => {
                    let prev = prev_state.expect("recurrent nets carry state");
                    let carried = if t == 0 {
                        prev
                    } else {
                        let slot = b.g.gather_slot(n_pix, n_pix);
                        assoc = Some(slot);
                        gather_state(&mut b.g, prev, slot)?
                    };
                    let next = if kind == Recurrent::Daru {
                        let w_prev = carried.weight.expect("DA-RU state has weights");
                        daru_graph_step(&mut b.g, daru.expect("daru params"), carried.hidden, w_prev, embedded)?
                    } else {
                        gru_graph_step(&mut b.g, gru.expect("gru params"), carried.hidden, embedded)?
                    };
                    prev_state = Some(next);
                    (next.hidden, Some(next))
                }
            };
            let logits = b.conv(recurrent_out, "cls")?;
            let probs = b.g.softmax(logits)?;
            let targets = b.g.target_slot(n_pix, config.num_classes);
            let loss = b.g.softmax_cross_entropy(logits, targets)?;
            total = Some(match total {
                None => loss,
                Some(acc) => b.g.add(acc, loss)?,
            });
            out_frames.push(FrameNodes {
                primary,
                secondary,
                targets,
                assoc,
                embedded,
                recurrent_out,
                logits,
                probs,
                loss,
                state,
            });
        }
        let total = total.expect("at least one frame");
        let loss = if frames > 1 {
            b.g.scale(total, 1.0 / frames as f64)?
        } else {
            total
        };
        Ok(NetGraph {
            graph: b.g,
            frames: out_frames,
            init_state,
            loss,
            params: b.param_ids,
            width,
            height,
        })
    }
}

impl<T: Scalar> NetGraph<T> {
    /// Loads encoded images for frame `t`.
    pub fn set_inputs(&mut self, t: usize, input: &EncodedFrame) -> Result<()> {
        let f = self.frames[t];
        let cast = |v: &[f32]| v.iter().map(|x| T::of(*x as f64)).collect::<Vec<T>>();
        self.graph.set_value(f.primary, &cast(input.primary.data()))?;
        match (f.secondary, &input.secondary) {
            (Some(id), Some(s)) => self.graph.set_value(id, &cast(s.data())),
            (None, None) => Ok(()),
            _ => Err(Error::InvalidInput("input streams do not match the network".into())),
        }
    }

    /// Ground-truth labels for frame `t`; pixels with `ignore` set do not
    /// contribute to the loss.
    pub fn set_targets(&mut self, t: usize, labels: &LabelImage, ignore: Option<&[bool]>) -> Result<()> {
        let data: Vec<i32> = labels
            .data
            .iter()
            .enumerate()
            .map(|(i, l)| if ignore.is_some_and(|m| m[i]) { -1 } else { *l as i32 })
            .collect();
        self.graph.set_slot(self.frames[t].targets, &data)
    }

    /// Association from frame `t` to frame `t - 1` of the unroll.
    pub fn set_association(&mut self, t: usize, assoc: &AssociationMap) -> Result<()> {
        match self.frames[t].assoc {
            Some(slot) => self.graph.set_slot(slot, assoc.entries()),
            None => Err(Error::State(format!("frame {t} has no association input"))),
        }
    }

    /// Sets the recurrent state entering frame 0 (zeros when `None`).
    pub fn set_initial_state(&mut self, state: Option<&DaruState<f32>>) -> Result<()> {
        let Some(nodes) = self.init_state else {
            return match state {
                None => Ok(()),
                Some(_) => Err(Error::State("network has no recurrent state".into())),
            };
        };
        let n = self.graph.shape(nodes.hidden).iter().product();
        let cast = |v: &[f32]| v.iter().map(|x| T::of(*x as f64)).collect::<Vec<T>>();
        match state {
            None => {
                self.graph.set_value(nodes.hidden, &vec![T::zero(); n])?;
                if let Some(w) = nodes.weight {
                    self.graph.set_value(w, &vec![T::zero(); n])?;
                }
            }
            Some(s) => {
                let e = self.graph.shape(nodes.hidden)[1];
                s.check(e, self.width, self.height)?;
                self.graph.set_value(nodes.hidden, &cast(&s.hidden))?;
                match (nodes.weight, s.weight.is_empty()) {
                    (Some(w), false) => self.graph.set_value(w, &cast(&s.weight))?,
                    (None, true) => {}
                    _ => return Err(Error::State("state kind does not match the recurrent layer".into())),
                }
            }
        }
        Ok(())
    }

    /// Probabilities of frame `t` after a forward pass.
    pub fn probs(&self, t: usize, classes: usize) -> LabelProbMap {
        let v = self.graph.value(self.frames[t].probs);
        LabelProbMap::new(classes, self.width, self.height, v.iter().map(|x| x.as_f64() as f32).collect())
            .expect("softmax output has the map shape")
    }

    /// Recurrent state leaving frame `t` after a forward pass.
    pub fn state(&self, t: usize, frame_index: usize) -> Option<DaruState<f32>> {
        let s = self.frames[t].state?;
        let conv = |id: NodeId| self.graph.value(id).iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let e = self.graph.shape(s.hidden)[1];
        Some(DaruState {
            dim: e,
            width: self.width,
            height: self.height,
            hidden: conv(s.hidden),
            weight: s.weight.map(conv).unwrap_or_default(),
            frame_index,
        })
    }

    /// Current parameter values as an fp32 set.
    pub fn export_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, id) in &self.params {
            let t = self.graph.tensor(*id);
            let data = t.data().iter().map(|x| x.as_f64() as f32).collect();
            ps.insert(name.clone(), Tensor::new(t.shape(), data).expect("same shape"));
        }
        ps
    }
}

/// Network-ready images of one frame, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub primary: Tensor<f32>,
    pub secondary: Option<Tensor<f32>>,
}

fn normalize(v: f32) -> f32 {
    (v - 127.5) / 127.5
}

/// Depth scaled to 0..255 over `[lo, hi]` and copied to three channels.
/// Missing depth maps to 0.
pub fn encode_depth(depth: &crate::image::DepthImage, range: DepthRange, max_depth: f64) -> Tensor<f32> {
    let (lo, hi) = match range {
        DepthRange::Fixed => (0.0, max_depth),
        DepthRange::Image => {
            let valid = depth.data.iter().filter(|d| **d > 0.0).map(|d| *d as f64);
            let (lo, hi) = valid.fold((f64::MAX, f64::MIN), |(a, b), d| (a.min(d), b.max(d)));
            if lo < hi {
                (lo, hi)
            } else {
                (0.0, max_depth)
            }
        }
    };
    let n = depth.len();
    let mut data = vec![0f32; 3 * n];
    for (i, d) in depth.data.iter().enumerate() {
        let v = if *d > 0.0 {
            (((*d as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0) as f32
        } else {
            0.0
        };
        for c in 0..3 {
            data[c * n + i] = normalize(v);
        }
    }
    Tensor::new(&[1, 3, depth.height, depth.width], data).expect("sizes match")
}

fn encode_color(color: &crate::image::ColorImage) -> Tensor<f32> {
    let n = color.width * color.height;
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = normalize(color.data[3 * i + c] as f32);
        }
    }
    Tensor::new(&[1, 3, color.height, color.width], data).expect("sizes match")
}

pub fn encode_frame(frame: &Frame, config: &NetConfig) -> EncodedFrame {
    match config.input_kind {
        InputKind::Rgb => EncodedFrame {
            primary: encode_color(&frame.color),
            secondary: None,
        },
        InputKind::Depth => EncodedFrame {
            primary: encode_depth(&frame.depth, config.depth_range, config.max_depth),
            secondary: None,
        },
        InputKind::Normal => EncodedFrame {
            primary: encode_color(&encode_normals(&compute_normals(&frame.depth, &frame.intrinsics))),
            secondary: None,
        },
        InputKind::Rgbd => EncodedFrame {
            primary: encode_color(&frame.color),
            secondary: Some(encode_depth(&frame.depth, config.depth_range, config.max_depth)),
        },
    }
}

/// Frame-by-frame inference with a cached single-frame graph.
#[derive(Debug, Clone)]
pub struct Predictor {
    network: Network,
    graph: Option<NetGraph<f32>>,
}

impl Predictor {
    pub fn new(network: Network) -> Self {
        Self { network, graph: None }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Labels one frame. Recurrent networks take the previous frame's
    /// state and the association from this frame to the previous one
    /// (a missing association means no pixel is associated) and return the
    /// updated state.
    pub fn predict(
        &mut self,
        frame: &Frame,
        state: Option<&DaruState<f32>>,
        assoc: Option<&AssociationMap>,
    ) -> Result<(LabelProbMap, Option<DaruState<f32>>)> {
        let (w, h) = (frame.depth.width, frame.depth.height);
        if self.graph.as_ref().is_none_or(|g| (g.width, g.height) != (w, h)) {
            self.graph = Some(self.network.build_graph(1, w, h)?);
        }
        let config = &self.network.config;
        let g = self.graph.as_mut().expect("graph built above");
        g.set_inputs(0, &encode_frame(frame, config))?;
        let recurrent = config.recurrent != Recurrent::None;
        let carried = if recurrent {
            if let Some(s) = state {
                if (s.width, s.height) != (w, h) {
                    return Err(Error::State(format!(
                        "state is {}x{}, frame is {w}x{h}",
                        s.width, s.height
                    )));
                }
            }
            let none = AssociationMap::none(w, h);
            let a = assoc.unwrap_or(&none);
            if (a.width(), a.height()) != (w, h) {
                return Err(Error::InvalidShape("association map does not match the frame".into()));
            }
            let mut c = associate_state(state, a, config.embed_dim)?;
            if config.recurrent == Recurrent::Gru && state.is_none() {
                c.weight.clear();
            }
            Some(c)
        } else {
            None
        };
        g.set_initial_state(carried.as_ref())?;
        g.graph.forward()?;
        let probs = g.probs(0, config.num_classes);
        let next = if recurrent {
            g.state(0, carried.as_ref().map_or(0, |c| c.frame_index))
        } else {
            None
        };
        Ok((probs, next))
    }
}

/// Per-pixel class probabilities, stored class-major (`C×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbMap {
    classes: usize,
    width: usize,
    height: usize,
    probs: Vec<f32>,
}

impl LabelProbMap {
    pub fn new(classes: usize, width: usize, height: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != classes * width * height {
            return Err(Error::InvalidShape(format!(
                "{} probabilities for {classes}x{height}x{width}",
                probs.len()
            )));
        }
        Ok(Self {
            classes,
            width,
            height,
            probs,
        })
    }

    /// `f(class, pixel)` for every entry.
    pub fn from_fn(classes: usize, width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let hw = width * height;
        let probs = (0..classes * hw).map(|i| f(i / hw, i % hw)).collect();
        Self {
            classes,
            width,
            height,
            probs,
        }
    }

    /// One-hot map of a label image. Labels outside the class range give
    /// a uniform column.
    pub fn one_hot(labels: &LabelImage, classes: usize) -> Self {
        Self::from_fn(classes, labels.width, labels.height, |c, i| {
            let l = labels.data[i] as usize;
            if l >= classes {
                1.0 / classes as f32
            } else if l == c {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.probs
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f32 {
        self.probs[class * self.width * self.height + pixel]
    }

    pub fn pixel_probs(&self, pixel: usize, out: &mut [f32]) {
        let hw = self.width * self.height;
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.probs[c * hw + pixel];
        }
    }

    /// Every entry in `[0, 1]` and every pixel summing to 1 within 1e-5.
    pub fn validate(&self) -> Result<()> {
        let hw = self.width * self.height;
        for i in 0..hw {
            let mut sum = 0.0f64;
            for c in 0..self.classes {
                let p = self.probs[c * hw + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidInput(format!("probability {p} at pixel {i}")));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!("probabilities at pixel {i} sum to {sum}")));
            }
        }
        Ok(())
    }

    /// Most probable class per pixel, lowest class on ties.
    pub fn argmax(&self) -> LabelImage {
        let hw = self.width * self.height;
        let data = (0..hw)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.probs[c * hw + i] > self.probs[best * hw + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, VideoConfig};

    fn small_video(frames: usize) -> Vec<Frame> {
        let cfg = VideoConfig {
            frames: frames.max(2),
            image_size: 32,
            ..VideoConfig::default()
        };
        let mut v = generate_video(3, &cfg).unwrap().1.frames;
        v.truncate(frames);
        v
    }

    fn micro(kind: InputKind, rec: Recurrent) -> NetConfig {
        NetConfig {
            embed_dim: 4,
            feature_dim: 8,
            widths: vec![4, 4, 4, 4, 8, 8, 8, 8, 8, 8, 8, 8, 8],
            ..NetConfig::tiny(kind, rec)
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = NetConfig::tiny(InputKind::Depth, Recurrent::Gru);
        assert_eq!(NetConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = NetConfig::from_toml("input_kind = \"rgb\"\nrecurrent = \"none\"\n").unwrap();
        assert_eq!(d.widths, NetConfig::default().widths);
        assert!(NetConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = NetConfig::tiny(InputKind::Depth, Recurrent::None);
        c.widths.pop();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = NetConfig::tiny(InputKind::Depth, Recurrent::None);
        c.feature_dim = 64;
        assert!(c.validate().is_err());
        c = NetConfig::tiny(InputKind::Depth, Recurrent::None);
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_net_has_sixteen_convolutions() {
        let shapes = param_shapes(&NetConfig {
            input_kind: InputKind::Depth,
            ..NetConfig::default()
        });
        let convs = shapes.iter().filter(|(n, s)| n.ends_with(".w") && s[2] == 3).count();
        assert_eq!(convs, 16);
    }

    #[test]
    fn bilinear_kernel_is_channel_diagonal() {
        let k = bilinear_kernel::<f64>(3, 2);
        assert_eq!(k.shape(), &[3, 3, 4, 4]);
        let d = k.data();
        for a in 0..3 {
            for b in 0..3 {
                let s: f64 = d[(a * 3 + b) * 16..(a * 3 + b + 1) * 16].iter().sum();
                if a == b {
                    assert!(s > 0.0);
                } else {
                    assert_eq!(s, 0.0);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_checkpoint_checked() {
        let c = micro(InputKind::Depth, Recurrent::Daru);
        let a = Network::init(&c, 9).unwrap();
        assert_eq!(a, Network::init(&c, 9).unwrap());
        assert_ne!(a.params, Network::init(&c, 10).unwrap().params);
        let back = ParamSet::from_bytes(&a.params.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(Network::from_params(&c, &back).unwrap(), a);
        let other = micro(InputKind::Depth, Recurrent::Gru);
        assert!(Network::from_params(&other, &a.params).is_err());
    }

    #[test]
    fn output_shapes_and_distribution() {
        let frames = small_video(1);
        for kind in [InputKind::Rgb, InputKind::Depth, InputKind::Normal, InputKind::Rgbd] {
            for rec in [Recurrent::None, Recurrent::Daru, Recurrent::Gru] {
                let net = Network::init(&micro(kind, rec), 1).unwrap();
                let mut p = Predictor::new(net);
                let (probs, state) = p.predict(&frames[0], None, None).unwrap();
                assert_eq!((probs.classes(), probs.width(), probs.height()), (5, 32, 32));
                probs.validate().unwrap();
                assert_eq!(state.is_some(), rec != Recurrent::None);
                if let Some(s) = state {
                    assert_eq!(s.weight.is_empty(), rec == Recurrent::Gru);
                }
            }
        }
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let net = Network::init(&micro(InputKind::Depth, Recurrent::None), 1).unwrap();
        assert!(matches!(net.build_graph::<f32>(1, 24, 32), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn zero_classifier_gives_uniform_output() {
        let c = micro(InputKind::Depth, Recurrent::None);
        let mut net = Network::init(&c, 1).unwrap();
        net.params.get_mut("cls.w").unwrap().data_mut().fill(0.0);
        let frames = small_video(1);
        let (probs, _) = Predictor::new(net).predict(&frames[0], None, None).unwrap();
        assert!(probs.data().iter().all(|p| (p - 0.2).abs() < 1e-6));
    }

    #[test]
    fn unassociated_daru_matches_fcn() {
        // with no association and zero state, the DA-RU output equals
        // relu of its input, which is exactly the FCN's recurrent slot
        let c = micro(InputKind::Depth, Recurrent::Daru);
        let daru = Network::init(&c, 4).unwrap();
        let mut fcn_params = daru.params.clone();
        let fcn_cfg = micro(InputKind::Depth, Recurrent::None);
        let mut keep = ParamSet::new();
        for (name, t) in fcn_params.iter() {
            if !name.starts_with("daru.") {
                keep.insert(name.to_string(), t.clone());
            }
        }
        fcn_params = keep;
        let fcn = Network::from_params(&fcn_cfg, &fcn_params).unwrap();
        let frames = small_video(3);
        let mut pd = Predictor::new(daru);
        let mut pf = Predictor::new(fcn);
        let mut state = None;
        for f in &frames {
            let none = AssociationMap::none(32, 32);
            let (a, s) = pd.predict(f, state.as_ref(), Some(&none)).unwrap();
            let (b, _) = pf.predict(f, None, None).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-6);
            }
            state = s;
        }
    }

    #[test]
    fn identity_association_accumulates_weight() {
        let net = Network::init(&micro(InputKind::Depth, Recurrent::Daru), 2).unwrap();
        let mut p = Predictor::new(net);
        let f = &small_video(1)[0];
        let (_, s1) = p.predict(f, None, None).unwrap();
        let s1 = s1.unwrap();
        let id = AssociationMap::identity(32, 32);
        let (_, s2) = p.predict(f, Some(&s1), Some(&id)).unwrap();
        let s2 = s2.unwrap();
        assert_eq!(s2.frame_index, 1);
        for (a, b) in s1.weight.iter().zip(&s2.weight) {
            assert!(b > a);
        }
        // identical inputs: the average of two equal values is unchanged
        for (a, b) in s1.hidden.iter().zip(&s2.hidden) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let f = &small_video(1)[0];
        let daru = Network::init(&micro(InputKind::Depth, Recurrent::Daru), 2).unwrap();
        let (_, s) = Predictor::new(daru).predict(f, None, None).unwrap();
        let gru = Network::init(&micro(InputKind::Depth, Recurrent::Gru), 2).unwrap();
        let id = AssociationMap::identity(32, 32);
        assert!(matches!(
            Predictor::new(gru).predict(f, s.as_ref(), Some(&id)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn double_stream_towers_are_symmetric() {
        // identical tower weights and identical inputs give identical halves
        // of the concatenated features; swapping the inputs is then a no-op
        let c = micro(InputKind::Rgbd, Recurrent::None);
        let mut net = Network::init(&c, 5).unwrap();
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| n.starts_with("rgb.")) {
            let t = net.params.get(n).unwrap().clone();
            *net.params.get_mut(&n.replacen("rgb.", "depth.", 1)).unwrap() = t;
        }
        let mut g = net.build_graph::<f64>(1, 32, 32).unwrap();
        let f = &small_video(1)[0];
        let e = encode_frame(f, &c);
        let both = EncodedFrame {
            primary: e.secondary.clone().unwrap(),
            secondary: e.secondary.clone(),
        };
        g.set_inputs(0, &both).unwrap();
        g.graph.forward().unwrap();
        let out = g.probs(0, 5);
        // zeroing the second half of the embed weights and doubling the
        // first half must give the same result
        let mut net2 = net.clone();
        let w = net2.params.get_mut("embed.w").unwrap();
        let [eo, ci, kh, kw] = w.dims4().unwrap();
        let half = ci / 2;
        let d = w.data_mut();
        for o in 0..eo {
            for c in 0..half {
                for k in 0..kh * kw {
                    let a = ((o * ci + c) * kh * kw) + k;
                    let b = ((o * ci + c + half) * kh * kw) + k;
                    d[a] += d[b];
                    d[b] = 0.0;
                }
            }
        }
        let w = net2.params.get_mut("skip.w").unwrap();
        let [eo, ci, kh, kw] = w.dims4().unwrap();
        let half = ci / 2;
        let d = w.data_mut();
        for o in 0..eo {
            for c in 0..half {
                for k in 0..kh * kw {
                    let a = ((o * ci + c) * kh * kw) + k;
                    let b = ((o * ci + c + half) * kh * kw) + k;
                    d[a] += d[b];
                    d[b] = 0.0;
                }
            }
        }
        let mut g2 = net2.build_graph::<f64>(1, 32, 32).unwrap();
        g2.set_inputs(0, &both).unwrap();
        g2.graph.forward().unwrap();
        let out2 = g2.probs(0, 5);
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn unrolled_graph_matches_stepwise_prediction() {
        let c = micro(InputKind::Depth, Recurrent::Gru);
        let net = Network::init(&c, 8).unwrap();
        let frames = small_video(2);
        let assoc = crate::assoc::compute_association(
            &frames[1].depth,
            &frames[0].pose,
            &frames[1].pose,
            &frames[1].intrinsics,
            &frames[0].depth,
            crate::assoc::DEPTH_THRESHOLD,
        );
        let mut g = net.build_graph::<f32>(2, 32, 32).unwrap();
        for (t, f) in frames.iter().enumerate() {
            g.set_inputs(t, &encode_frame(f, &c)).unwrap();
        }
        g.set_association(1, &assoc).unwrap();
        let mut p = Predictor::new(net);
        let (_, s) = p.predict(&frames[0], None, None).unwrap();
        let (b, _) = p.predict(&frames[1], s.as_ref(), Some(&assoc)).unwrap();
        let zero = DaruState {
            weight: Vec::new(),
            ..DaruState::zeros(4, 32, 32)
        };
        g.set_initial_state(Some(&zero)).unwrap();
        g.graph.forward().unwrap();
        let a = g.probs(1, 5);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn encoded_depth_spans_unit_range() {
        let f = &small_video(1)[0];
        let t = encode_depth(&f.depth, DepthRange::Fixed, 4.0);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let n = f.depth.len();
        assert_eq!(&t.data()[..n], &t.data()[n..2 * n]);
        let t = encode_depth(&f.depth, DepthRange::Image, 4.0);
        let (lo, hi) = t.data().iter().fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert_eq!((lo, hi), (-1.0, 1.0));
    }
}
