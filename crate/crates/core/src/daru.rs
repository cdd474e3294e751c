//! The data-associated recurrent unit (DA-RU) and a GRU baseline cell.
//!
//! Both cells run once per pixel with shared parameters. The state carried
//! into frame t+1 is fetched from frame t through an [`AssociationMap`];
//! unassociated pixels start from zero.
//!
//! The DA-RU keeps a hidden vector `h` and a weight vector `w` per pixel:
//!
//! ```text
//! w_hat = sigmoid(W [h~, x] + b)
//! w     = w~ + w_hat
//! h     = relu((w~ / w) * h~ + (w_hat / w) * x)
//! o     = h
//! ```
//!
//! so along a chain of associated pixels `h` is a weighted moving average of
//! the inputs.

use rand::Rng;

pub use crate::assoc::AssociationMap;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, SlotId, Tensor};

/// Per-pixel recurrent state for a `d`-channel layer over an image,
/// channel-major (`d×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct DaruState<T> {
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    pub hidden: Vec<T>,
    /// Accumulated weights; unused (empty) for GRU states.
    pub weight: Vec<T>,
    pub frame_index: usize,
}

impl<T: Scalar> DaruState<T> {
    pub fn zeros(dim: usize, width: usize, height: usize) -> Self {
        let n = dim * width * height;
        Self {
            dim,
            width,
            height,
            hidden: vec![T::zero(); n],
            weight: vec![T::zero(); n],
            frame_index: 0,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn check(&self, dim: usize, width: usize, height: usize) -> Result<()> {
        if (self.dim, self.width, self.height) != (dim, width, height) {
            return Err(Error::State(format!(
                "state is {}x{}x{}, expected {dim}x{height}x{width}",
                self.dim, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// `W` is `d×2d` row-major acting on `[h~, x]`; `b` has `d` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DaruParams<T> {
    pub dim: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> DaruParams<T> {
    pub fn new(dim: usize, w: Vec<T>, b: Vec<T>) -> Result<Self> {
        if w.len() != 2 * dim * dim || b.len() != dim {
            return Err(Error::InvalidShape(format!(
                "DA-RU parameters need a {dim}x{} matrix and {dim} biases",
                2 * dim
            )));
        }
        Ok(Self { dim, w, b })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            w: vec![T::zero(); 2 * dim * dim],
            b: vec![T::zero(); dim],
        }
    }

    /// `W ~ U(±1/sqrt(2d))`, `b = 0`.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        Self {
            dim,
            w: (0..2 * dim * dim).map(|_| T::of(rng.random_range(-bound..bound))).collect(),
            b: vec![T::zero(); dim],
        }
    }

    /// Weight as a 1×1 convolution kernel `[d, 2d, 1, 1]` and bias `[d]`.
    pub fn to_tensors(&self) -> (Tensor<T>, Tensor<T>) {
        let d = self.dim;
        (
            Tensor::new(&[d, 2 * d, 1, 1], self.w.clone()).expect("sizes checked"),
            Tensor::new(&[d], self.b.clone()).expect("sizes checked"),
        )
    }

    pub fn from_tensors(w: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        let d = b.numel();
        if w.shape() != [d, 2 * d, 1, 1] && w.shape() != [d, 2 * d] {
            return Err(Error::InvalidShape(format!("DA-RU weight of shape {:?}", w.shape())));
        }
        Self::new(d, w.data().to_vec(), b.data().to_vec())
    }
}

fn affine<T: Scalar>(w: &[T], b: &[T], h: &[T], x: &[T], out: &mut [T]) {
    let d = b.len();
    for r in 0..d {
        let row = &w[r * 2 * d..(r + 1) * 2 * d];
        let mut acc = b[r];
        for k in 0..d {
            acc = acc + row[k] * h[k] + row[d + k] * x[k];
        }
        out[r] = acc;
    }
}

fn sigmoid<T: Scalar>(a: T) -> T {
    crate::tensor::kernels::sigmoid(a)
}

/// Carried state for frame t+1: each pixel copies its associated pixel's
/// state from `prev`, or zero. Without `prev` everything is zero.
pub fn associate_state<T: Scalar>(
    prev: Option<&DaruState<T>>,
    assoc: &AssociationMap,
    dim: usize,
) -> Result<DaruState<T>> {
    let (w, h) = (assoc.width(), assoc.height());
    let mut out = DaruState::zeros(dim, w, h);
    let Some(prev) = prev else { return Ok(out) };
    if prev.dim != dim {
        return Err(Error::State(format!("state has {} channels, expected {dim}", prev.dim)));
    }
    let (n, pn) = (w * h, prev.pixels());
    let has_weight = !prev.weight.is_empty();
    if !has_weight {
        out.weight.clear();
    }
    for i in 0..n {
        let e = assoc.entries()[i];
        if e < 0 {
            continue;
        }
        let j = e as usize;
        if j >= pn {
            return Err(Error::Association {
                index: e as i64,
                len: pn,
            });
        }
        for c in 0..dim {
            out.hidden[c * n + i] = prev.hidden[c * pn + j];
            if has_weight {
                out.weight[c * n + i] = prev.weight[c * pn + j];
            }
        }
    }
    out.frame_index = prev.frame_index + 1;
    Ok(out)
}

/// Result of one DA-RU update at a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DaruStep<T> {
    pub hidden: Vec<T>,
    pub weight: Vec<T>,
    pub output: Vec<T>,
    /// The new-input weight `w_hat`, each entry in (0, 1).
    pub input_weight: Vec<T>,
}

pub fn daru_step<T: Scalar>(h_prev: &[T], w_prev: &[T], x: &[T], params: &DaruParams<T>) -> DaruStep<T> {
    let d = params.dim;
    let mut w_hat = vec![T::zero(); d];
    affine(&params.w, &params.b, h_prev, x, &mut w_hat);
    w_hat.iter_mut().for_each(|a| *a = sigmoid(*a));
    let weight: Vec<T> = w_prev.iter().zip(&w_hat).map(|(a, b)| *a + *b).collect();
    let hidden: Vec<T> = (0..d)
        .map(|k| {
            debug_assert!(weight[k] > T::zero());
            let v = w_prev[k] / weight[k] * h_prev[k] + w_hat[k] / weight[k] * x[k];
            v.max(T::zero())
        })
        .collect();
    DaruStep {
        output: hidden.clone(),
        hidden,
        weight,
        input_weight: w_hat,
    }
}

fn check_features<T: Scalar>(features: &Tensor<T>, dim: usize, assoc: &AssociationMap) -> Result<[usize; 4]> {
    let [n, c, h, w] = features.dims4()?;
    if n != 1 || c != dim || (w, h) != (assoc.width(), assoc.height()) {
        return Err(Error::InvalidShape(format!(
            "features {:?} do not match a {dim}-channel layer over {}x{} associations",
            features.shape(),
            assoc.height(),
            assoc.width()
        )));
    }
    Ok([n, c, h, w])
}

/// Applies [`associate_state`] and [`daru_step`] at every pixel of
/// `features` (`[1, d, H, W]`). Returns the new state and the outputs.
pub fn daru_layer<T: Scalar>(
    prev: Option<&DaruState<T>>,
    assoc: &AssociationMap,
    features: &Tensor<T>,
    params: &DaruParams<T>,
) -> Result<(DaruState<T>, Tensor<T>)> {
    let d = params.dim;
    let [_, _, h, w] = check_features(features, d, assoc)?;
    if let Some(p) = prev {
        if p.weight.is_empty() {
            return Err(Error::State("a GRU state cannot feed a DA-RU layer".into()));
        }
    }
    let carried = associate_state(prev, assoc, d)?;
    let n = h * w;
    let mut next = DaruState::zeros(d, w, h);
    next.frame_index = carried.frame_index;
    let (mut hp, mut wp, mut x) = (vec![T::zero(); d], vec![T::zero(); d], vec![T::zero(); d]);
    let f = features.data();
    for i in 0..n {
        for c in 0..d {
            hp[c] = carried.hidden[c * n + i];
            wp[c] = carried.weight[c * n + i];
            x[c] = f[c * n + i];
        }
        let s = daru_step(&hp, &wp, &x, params);
        for c in 0..d {
            next.hidden[c * n + i] = s.hidden[c];
            next.weight[c * n + i] = s.weight[c];
        }
    }
    let out = Tensor::new(&[1, d, h, w], next.hidden.clone())?;
    Ok((next, out))
}

/// Update, reset and candidate gates, each `d×2d` row-major over `[h, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub dim: usize,
    pub wz: Vec<T>,
    pub bz: Vec<T>,
    pub wr: Vec<T>,
    pub br: Vec<T>,
    pub wn: Vec<T>,
    pub bn: Vec<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(dim: usize) -> Self {
        let m = vec![T::zero(); 2 * dim * dim];
        let v = vec![T::zero(); dim];
        Self {
            dim,
            wz: m.clone(),
            bz: v.clone(),
            wr: m.clone(),
            br: v.clone(),
            wn: m,
            bn: v,
        }
    }

    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        let mut m = || -> Vec<T> { (0..2 * dim * dim).map(|_| T::of(rng.random_range(-bound..bound))).collect() };
        let (wz, wr, wn) = (m(), m(), m());
        Self {
            dim,
            wz,
            bz: vec![T::zero(); dim],
            wr,
            br: vec![T::zero(); dim],
            wn,
            bn: vec![T::zero(); dim],
        }
    }

    /// `[(wz, bz), (wr, br), (wn, bn)]` as 1×1 kernels and biases.
    pub fn to_tensors(&self) -> [(Tensor<T>, Tensor<T>); 3] {
        let d = self.dim;
        let pair = |w: &[T], b: &[T]| {
            (
                Tensor::new(&[d, 2 * d, 1, 1], w.to_vec()).expect("sizes checked"),
                Tensor::new(&[d], b.to_vec()).expect("sizes checked"),
            )
        };
        [pair(&self.wz, &self.bz), pair(&self.wr, &self.br), pair(&self.wn, &self.bn)]
    }
}

/// `z = σ(Wz[h,x]+bz)`, `r = σ(Wr[h,x]+br)`, `n = tanh(Wn[r⊙h,x]+bn)`,
/// `h' = (1−z)⊙n + z⊙h`.
pub fn gru_step<T: Scalar>(h_prev: &[T], x: &[T], p: &GruParams<T>) -> Vec<T> {
    let d = p.dim;
    let mut z = vec![T::zero(); d];
    let mut r = vec![T::zero(); d];
    let mut n = vec![T::zero(); d];
    affine(&p.wz, &p.bz, h_prev, x, &mut z);
    affine(&p.wr, &p.br, h_prev, x, &mut r);
    z.iter_mut().for_each(|a| *a = sigmoid(*a));
    r.iter_mut().for_each(|a| *a = sigmoid(*a));
    let rh: Vec<T> = r.iter().zip(h_prev).map(|(a, b)| *a * *b).collect();
    affine(&p.wn, &p.bn, &rh, x, &mut n);
    (0..d)
        .map(|k| {
            let nk = n[k].tanh();
            (T::one() - z[k]) * nk + z[k] * h_prev[k]
        })
        .collect()
}

/// GRU counterpart of [`daru_layer`]; the returned state has no weights.
pub fn gru_layer<T: Scalar>(
    prev: Option<&DaruState<T>>,
    assoc: &AssociationMap,
    features: &Tensor<T>,
    params: &GruParams<T>,
) -> Result<(DaruState<T>, Tensor<T>)> {
    let d = params.dim;
    let [_, _, h, w] = check_features(features, d, assoc)?;
    let carried = associate_state(prev, assoc, d)?;
    let n = h * w;
    let mut next = DaruState::zeros(d, w, h);
    next.weight.clear();
    next.frame_index = carried.frame_index;
    let (mut hp, mut x) = (vec![T::zero(); d], vec![T::zero(); d]);
    let f = features.data();
    for i in 0..n {
        for c in 0..d {
            hp[c] = carried.hidden[c * n + i];
            x[c] = f[c * n + i];
        }
        let out = gru_step(&hp, &x, params);
        for c in 0..d {
            next.hidden[c * n + i] = out[c];
        }
    }
    let out = Tensor::new(&[1, d, h, w], next.hidden.clone())?;
    Ok((next, out))
}

// ---------------------------------------------------------------------------
// Graph construction

/// Parameter nodes of a DA-RU layer inside a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct DaruNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// Parameter nodes of a GRU layer inside a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub gates: [(NodeId, NodeId); 3],
}

/// Recurrent state nodes carried between frames of an unrolled graph.
#[derive(Debug, Clone, Copy)]
pub struct StateNodes {
    pub hidden: NodeId,
    /// `None` for GRU.
    pub weight: Option<NodeId>,
}

/// One DA-RU step in the graph on `[1, d, H, W]` nodes.
pub fn daru_graph_step<T: Scalar>(
    g: &mut Graph<T>,
    p: DaruNodes,
    h_prev: NodeId,
    w_prev: NodeId,
    x: NodeId,
) -> Result<StateNodes> {
    let cat = g.concat_channels(h_prev, x)?;
    let a = g.conv2d(cat, p.w, p.b, 1, 0)?;
    let w_hat = g.sigmoid(a)?;
    let w = g.add(w_prev, w_hat)?;
    let keep = g.div(w_prev, w)?;
    let take = g.div(w_hat, w)?;
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(take, x)?;
    let sum = g.add(old, new)?;
    let h = g.relu(sum)?;
    Ok(StateNodes {
        hidden: h,
        weight: Some(w),
    })
}

/// One GRU step in the graph on `[1, d, H, W]` nodes.
pub fn gru_graph_step<T: Scalar>(g: &mut Graph<T>, p: GruNodes, h_prev: NodeId, x: NodeId) -> Result<StateNodes> {
    let [(wz, bz), (wr, br), (wn, bn)] = p.gates;
    let cat = g.concat_channels(h_prev, x)?;
    let za = g.conv2d(cat, wz, bz, 1, 0)?;
    let z = g.sigmoid(za)?;
    let ra = g.conv2d(cat, wr, br, 1, 0)?;
    let r = g.sigmoid(ra)?;
    let rh = g.mul(r, h_prev)?;
    let cat_n = g.concat_channels(rh, x)?;
    let na = g.conv2d(cat_n, wn, bn, 1, 0)?;
    let n = g.tanh(na)?;
    let diff = g.sub(h_prev, n)?;
    let zd = g.mul(z, diff)?;
    let h = g.add(n, zd)?;
    Ok(StateNodes { hidden: h, weight: None })
}

/// Fetches the previous frame's state through an association slot.
pub fn gather_state<T: Scalar>(g: &mut Graph<T>, prev: StateNodes, slot: SlotId) -> Result<StateNodes> {
    Ok(StateNodes {
        hidden: g.gather(prev.hidden, slot)?,
        weight: prev.weight.map(|w| g.gather(w, slot)).transpose()?,
    })
}

pub fn add_daru_params<T: Scalar>(g: &mut Graph<T>, prefix: &str, p: &DaruParams<T>) -> DaruNodes {
    let (w, b) = p.to_tensors();
    DaruNodes {
        w: g.param(&format!("{prefix}.w"), &w),
        b: g.param(&format!("{prefix}.b"), &b),
    }
}

pub fn add_gru_params<T: Scalar>(g: &mut Graph<T>, prefix: &str, p: &GruParams<T>) -> GruNodes {
    let names = ["z", "r", "n"];
    let t = p.to_tensors();
    GruNodes {
        gates: std::array::from_fn(|k| {
            (
                g.param(&format!("{prefix}.w{}", names[k]), &t[k].0),
                g.param(&format!("{prefix}.b{}", names[k]), &t[k].1),
            )
        }),
    }
}
