use super::kernels::{self, ConvGeometry, DeconvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to integer side data (association maps, training targets) that
/// an op reads but never differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(usize);

#[derive(Debug, Clone)]
enum SlotKind {
    /// Pixel indices into a source of `source_len` pixels, `-1` for none.
    Gather { source_len: usize },
    /// Class targets below `classes`, `-1` for ignored pixels.
    Targets { classes: usize },
}

#[derive(Debug, Clone)]
struct Slot {
    kind: SlotKind,
    data: Vec<i32>,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geo: ConvGeometry },
    MaxPool { x: NodeId },
    Deconv { x: NodeId, w: NodeId, geo: DeconvGeometry },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(NodeId, NodeId),
    SliceChannels { x: NodeId, start: usize },
    Gather { x: NodeId, slot: SlotId },
    Softmax(NodeId),
    SoftmaxCe { logits: NodeId, slot: SlotId },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
    /// Max-pool winners.
    arg: Vec<usize>,
    /// Softmax probabilities kept for the cross-entropy backward pass.
    cache: Vec<T>,
}

/// A computation graph that is built once and then executed any number of
/// times with fresh inputs. Nodes are stored in creation order, which is a
/// valid topological order because an op can only reference existing nodes.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    slots: Vec<Slot>,
    forwarded: bool,
    backwarded: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape(format!("expected NCHW, got {shape:?}"))),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            slots: Vec::new(),
            forwarded: false,
            backwarded: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, requires_grad: bool) -> NodeId {
        let n = shape.iter().product();
        self.nodes.push(Node {
            op,
            shape,
            value: vec![T::zero(); n],
            grad: Vec::new(),
            requires_grad,
            arg: Vec::new(),
            cache: Vec::new(),
        });
        self.forwarded = false;
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, shape, rg)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::State(format!("unknown node {}", id.0)))
    }

    /// A data leaf (no gradient).
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input, shape.to_vec(), false)
    }

    /// A trainable leaf initialized from `init`.
    pub fn param(&mut self, name: &str, init: &Tensor<T>) -> NodeId {
        let id = self.push(Op::Param(name.to_string()), init.shape().to_vec(), true);
        self.nodes[id.0].value.copy_from_slice(init.data());
        id
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Param(name) => Some((name.as_str(), NodeId(i))),
            _ => None,
        })
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Overwrites a leaf (input or parameter) value.
    pub fn set_value(&mut self, id: NodeId, data: &[T]) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::State(format!("unknown node {}", id.0)))?;
        if !matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(Error::State(format!("node {} is not a leaf", id.0)));
        }
        if node.value.len() != data.len() {
            return Err(Error::InvalidShape(format!(
                "node {} holds {} elements, got {}",
                id.0,
                node.value.len(),
                data.len()
            )));
        }
        node.value.copy_from_slice(data);
        self.forwarded = false;
        self.backwarded = false;
        Ok(())
    }

    /// Mutable access to a parameter's value, e.g. for optimizer steps.
    pub fn param_value_mut(&mut self, id: NodeId) -> Result<&mut [T]> {
        self.forwarded = false;
        self.backwarded = false;
        match self.nodes.get_mut(id.0) {
            Some(node) if matches!(node.op, Op::Param(_)) => Ok(&mut node.value),
            _ => Err(Error::State(format!("node {} is not a parameter", id.0))),
        }
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        if !self.backwarded {
            return None;
        }
        let n = &self.nodes[id.0];
        (!n.grad.is_empty()).then_some(n.grad.as_slice())
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        let mut t = Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent");
        if let Some(g) = self.grad(id) {
            t.set_grad(g.to_vec()).expect("gradient length matches");
        }
        t
    }

    pub fn gather_slot(&mut self, len: usize, source_len: usize) -> SlotId {
        self.slots.push(Slot {
            kind: SlotKind::Gather { source_len },
            data: vec![-1; len],
        });
        SlotId(self.slots.len() - 1)
    }

    pub fn target_slot(&mut self, len: usize, classes: usize) -> SlotId {
        self.slots.push(Slot {
            kind: SlotKind::Targets { classes },
            data: vec![-1; len],
        });
        SlotId(self.slots.len() - 1)
    }

    pub fn set_slot(&mut self, slot: SlotId, data: &[i32]) -> Result<()> {
        let s = self
            .slots
            .get_mut(slot.0)
            .ok_or_else(|| Error::State(format!("unknown slot {}", slot.0)))?;
        if data.len() != s.data.len() {
            return Err(Error::InvalidShape(format!(
                "slot holds {} entries, got {}",
                s.data.len(),
                data.len()
            )));
        }
        for &v in data {
            match s.kind {
                SlotKind::Gather { source_len } if v >= source_len as i32 || v < -1 => {
                    return Err(Error::Association {
                        index: v as i64,
                        len: source_len,
                    })
                }
                SlotKind::Targets { classes } if v >= classes as i32 || v < -1 => {
                    return Err(Error::InvalidLabel {
                        label: v as i64,
                        classes,
                    })
                }
                _ => {}
            }
        }
        s.data.copy_from_slice(data);
        self.forwarded = false;
        self.backwarded = false;
        Ok(())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let geo = ConvGeometry::new(
            &self.node(x)?.shape,
            &self.node(w)?.shape,
            &self.node(b)?.shape,
            stride,
            padding,
        )?;
        if x == w || x == b || w == b {
            return Err(Error::InvalidShape("conv operands must be distinct nodes".into()));
        }
        Ok(self.push_op(Op::Conv2d { x, w, b, geo }, geo.output_shape(), &[x, w, b]))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4(&self.node(x)?.shape)?;
        kernels::check_poolable(h, w)?;
        let id = self.push_op(Op::MaxPool { x }, vec![n, c, h / 2, w / 2], &[x]);
        self.nodes[id.0].arg = vec![0; n * c * (h / 2) * (w / 2)];
        Ok(id)
    }

    pub fn deconv2d(&mut self, x: NodeId, w: NodeId, factor: usize) -> Result<NodeId> {
        let geo = DeconvGeometry::new(&self.node(x)?.shape, &self.node(w)?.shape, factor)?;
        if x == w {
            return Err(Error::InvalidShape("deconv operands must be distinct nodes".into()));
        }
        Ok(self.push_op(Op::Deconv { x, w, geo }, geo.output_shape(), &[x, w]))
    }

    fn unary(&mut self, x: NodeId, op: Op) -> Result<NodeId> {
        let shape = self.node(x)?.shape.clone();
        Ok(self.push_op(op, shape, &[x]))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(Error::InvalidShape(format!(
                "pointwise op on shapes {sa:?} and {sb:?}"
            )));
        }
        let shape = sa.clone();
        Ok(self.push_op(op, shape, &[a, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.unary(x, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b))
    }

    /// Elementwise division; `forward` fails on a zero denominator.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = kernels::concat_shape(&self.node(a)?.shape, &self.node(b)?.shape)?;
        Ok(self.push_op(Op::Concat(a, b), shape, &[a, b]))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let [n, c, h, w] = dims4(&self.node(x)?.shape)?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidShape(format!(
                "channel slice {start}..{} of a {c}-channel tensor",
                start + len
            )));
        }
        Ok(self.push_op(Op::SliceChannels { x, start }, vec![n, len, h, w], &[x]))
    }

    /// Per-pixel gather through an association map held in `slot`.
    pub fn gather(&mut self, x: NodeId, slot: SlotId) -> Result<NodeId> {
        let [n, c, h, w] = dims4(&self.node(x)?.shape)?;
        let s = self
            .slots
            .get(slot.0)
            .ok_or_else(|| Error::State(format!("unknown slot {}", slot.0)))?;
        let SlotKind::Gather { source_len } = s.kind else {
            return Err(Error::State("gather needs a gather slot".into()));
        };
        if source_len != h * w || s.data.len() != h * w {
            return Err(Error::InvalidShape(format!(
                "association map over {} pixels for a {h}x{w} feature map",
                s.data.len()
            )));
        }
        Ok(self.push_op(Op::Gather { x, slot }, vec![n, c, h, w], &[x]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        dims4(&self.node(x)?.shape)?;
        self.unary(x, Op::Softmax(x))
    }

    /// Mean softmax cross entropy of `logits` against the targets in `slot`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, slot: SlotId) -> Result<NodeId> {
        let [n, c, h, w] = dims4(&self.node(logits)?.shape)?;
        let s = self
            .slots
            .get(slot.0)
            .ok_or_else(|| Error::State(format!("unknown slot {}", slot.0)))?;
        match s.kind {
            SlotKind::Targets { classes } if classes == c && s.data.len() == n * h * w => {}
            _ => {
                return Err(Error::InvalidShape(format!(
                    "target slot does not match logits {:?}",
                    [n, c, h, w]
                )))
            }
        }
        let id = self.push_op(Op::SoftmaxCe { logits, slot }, vec![1], &[logits]);
        self.nodes[id.0].cache = vec![T::zero(); n * c * h * w];
        Ok(id)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.node(x)?;
        Ok(self.push_op(Op::Sum(x), vec![1], &[x]))
    }

    pub fn is_forwarded(&self) -> bool {
        self.forwarded
    }

    /// Evaluates every node in creation order.
    pub fn forward(&mut self) -> Result<()> {
        self.backwarded = false;
        for i in 0..self.nodes.len() {
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &mut hi[0];
            let v = |id: NodeId| lo[id.0].value.as_slice();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d { x, w, b, geo } => {
                    kernels::conv2d_forward(geo, v(*x), v(*w), v(*b), &mut node.value)
                }
                Op::MaxPool { x } => {
                    let dims = dims4(&lo[x.0].shape)?;
                    kernels::maxpool_forward(dims, v(*x), &mut node.value, &mut node.arg)
                }
                Op::Deconv { x, w, geo } => kernels::deconv_forward(geo, v(*x), v(*w), &mut node.value),
                Op::Relu(x) => map1(&mut node.value, v(*x), kernels::relu),
                Op::Sigmoid(x) => map1(&mut node.value, v(*x), kernels::sigmoid),
                Op::Tanh(x) => map1(&mut node.value, v(*x), |a: T| a.tanh()),
                Op::Scale(x, s) => {
                    let s = T::of(*s);
                    for (o, a) in node.value.iter_mut().zip(v(*x)) {
                        *o = *a * s;
                    }
                }
                Op::Add(a, b) => map2(&mut node.value, v(*a), v(*b), |p, q| p + q),
                Op::Sub(a, b) => map2(&mut node.value, v(*a), v(*b), |p, q| p - q),
                Op::Mul(a, b) => map2(&mut node.value, v(*a), v(*b), |p, q| p * q),
                Op::Div(a, b) => {
                    if let Some(index) = v(*b).iter().position(|q| *q == T::zero()) {
                        self.forwarded = false;
                        return Err(Error::DivisionByZero { index });
                    }
                    map2(&mut node.value, v(*a), v(*b), |p, q| p / q)
                }
                Op::Concat(a, b) => kernels::concat_forward(
                    &lo[a.0].shape,
                    &lo[b.0].shape,
                    v(*a),
                    v(*b),
                    &mut node.value,
                ),
                Op::SliceChannels { x, start } => {
                    let dims = dims4(&lo[x.0].shape)?;
                    kernels::slice_channels_forward(dims, *start, node.shape[1], v(*x), &mut node.value)
                }
                Op::Gather { x, slot } => {
                    let dims = dims4(&lo[x.0].shape)?;
                    kernels::gather_forward(dims, &self.slots[slot.0].data, v(*x), &mut node.value)
                }
                Op::Softmax(x) => {
                    let dims = dims4(&node.shape)?;
                    kernels::softmax_forward(dims, v(*x), &mut node.value)
                }
                Op::SoftmaxCe { logits, slot } => {
                    let dims = dims4(&lo[logits.0].shape)?;
                    node.value[0] = kernels::softmax_ce_forward(
                        dims,
                        v(*logits),
                        &self.slots[slot.0].data,
                        &mut node.cache,
                    );
                }
                Op::Sum(x) => node.value[0] = v(*x).iter().copied().sum(),
            }
        }
        self.forwarded = true;
        Ok(())
    }

    /// Reverse-mode sweep from the scalar `loss`. Populates gradients of
    /// every node that depends on a parameter.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.forwarded {
            return Err(Error::State("backward called before forward".into()));
        }
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(Error::State(format!(
                "loss must be a scalar, node has shape {:?}",
                ln.shape
            )));
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                if node.grad.len() != node.value.len() {
                    node.grad = vec![T::zero(); node.value.len()];
                } else {
                    node.grad.fill(T::zero());
                }
            } else {
                node.grad.clear();
            }
        }
        if !self.nodes[loss.0].requires_grad {
            self.backwarded = true;
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = T::one();

        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &hi[0];
            if !node.requires_grad || matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let g = node.grad.as_slice();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d { x, w, b, geo } => {
                    let (mut gx, mut gw, mut gb) = (take_grad(lo, *x), take_grad(lo, *w), take_grad(lo, *b));
                    kernels::conv2d_backward(
                        geo,
                        &lo[x.0].value,
                        &lo[w.0].value,
                        g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    restore(lo, vec![(*x, gx), (*w, gw), (*b, gb)]);
                }
                Op::MaxPool { x } => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        kernels::maxpool_backward(&node.arg, g, &mut gx);
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Deconv { x, w, geo } => {
                    let (mut gx, mut gw) = (take_grad(lo, *x), take_grad(lo, *w));
                    kernels::deconv_backward(
                        geo,
                        &lo[x.0].value,
                        &lo[w.0].value,
                        g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                    );
                    restore(lo, vec![(*x, gx), (*w, gw)]);
                }
                Op::Relu(x) => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        for ((d, gv), xv) in gx.iter_mut().zip(g).zip(&lo[x.0].value) {
                            if *xv > T::zero() {
                                *d = *d + *gv;
                            }
                        }
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        for ((d, gv), y) in gx.iter_mut().zip(g).zip(&node.value) {
                            *d = *d + *gv * *y * (T::one() - *y);
                        }
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Tanh(x) => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        for ((d, gv), y) in gx.iter_mut().zip(g).zip(&node.value) {
                            *d = *d + *gv * (T::one() - *y * *y);
                        }
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        let s = T::of(*s);
                        for (d, gv) in gx.iter_mut().zip(g) {
                            *d = *d + *gv * s;
                        }
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    if let Some(mut ga) = take_grad(lo, *a) {
                        add_into(&mut ga, g);
                        restore(lo, vec![(*a, Some(ga))]);
                    }
                    if let Some(mut gb) = take_grad(lo, *b) {
                        for (d, gv) in gb.iter_mut().zip(g) {
                            *d = *d + sign * *gv;
                        }
                        restore(lo, vec![(*b, Some(gb))]);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(mut ga) = take_grad(lo, *a) {
                        for ((d, gv), q) in ga.iter_mut().zip(g).zip(&lo[b.0].value) {
                            *d = *d + *gv * *q;
                        }
                        restore(lo, vec![(*a, Some(ga))]);
                    }
                    if let Some(mut gb) = take_grad(lo, *b) {
                        for ((d, gv), p) in gb.iter_mut().zip(g).zip(&lo[a.0].value) {
                            *d = *d + *gv * *p;
                        }
                        restore(lo, vec![(*b, Some(gb))]);
                    }
                }
                Op::Div(a, b) => {
                    if let Some(mut ga) = take_grad(lo, *a) {
                        for ((d, gv), q) in ga.iter_mut().zip(g).zip(&lo[b.0].value) {
                            *d = *d + *gv / *q;
                        }
                        restore(lo, vec![(*a, Some(ga))]);
                    }
                    if let Some(mut gb) = take_grad(lo, *b) {
                        for (((d, gv), q), y) in gb.iter_mut().zip(g).zip(&lo[b.0].value).zip(&node.value) {
                            *d = *d - *gv * *y / *q;
                        }
                        restore(lo, vec![(*b, Some(gb))]);
                    }
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (lo[a.0].shape.clone(), lo[b.0].shape.clone());
                    if let Some(mut ga) = take_grad(lo, *a) {
                        kernels::concat_backward(&sa, &sb, g, Some(&mut ga), None);
                        restore(lo, vec![(*a, Some(ga))]);
                    }
                    if let Some(mut gb) = take_grad(lo, *b) {
                        kernels::concat_backward(&sa, &sb, g, None, Some(&mut gb));
                        restore(lo, vec![(*b, Some(gb))]);
                    }
                }
                Op::SliceChannels { x, start } => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        let dims = dims4(&lo[x.0].shape)?;
                        kernels::slice_channels_backward(dims, *start, node.shape[1], g, &mut gx);
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Gather { x, slot } => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        let dims = dims4(&lo[x.0].shape)?;
                        kernels::gather_backward(dims, &self.slots[slot.0].data, g, &mut gx);
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::Softmax(x) => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        let dims = dims4(&node.shape)?;
                        kernels::softmax_backward(dims, &node.value, g, &mut gx);
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
                Op::SoftmaxCe { logits, slot } => {
                    if let Some(mut gx) = take_grad(lo, *logits) {
                        let dims = dims4(&lo[logits.0].shape)?;
                        kernels::softmax_ce_backward(dims, &node.cache, &self.slots[slot.0].data, g[0], &mut gx);
                        restore(lo, vec![(*logits, Some(gx))]);
                    }
                }
                Op::Sum(x) => {
                    if let Some(mut gx) = take_grad(lo, *x) {
                        for d in gx.iter_mut() {
                            *d = *d + g[0];
                        }
                        restore(lo, vec![(*x, Some(gx))]);
                    }
                }
            }
        }
        self.backwarded = true;
        Ok(())
    }
}

/// Gradient buffers are moved out while written so that a node appearing
/// as several inputs of one op is updated one input at a time.
fn take_grad<T>(nodes: &mut [Node<T>], id: NodeId) -> Option<Vec<T>> {
    nodes[id.0]
        .requires_grad
        .then(|| std::mem::take(&mut nodes[id.0].grad))
}

fn restore<T>(nodes: &mut [Node<T>], grads: Vec<(NodeId, Option<Vec<T>>)>) {
    for (id, g) in grads {
        if let Some(g) = g {
            nodes[id.0].grad = g;
        }
    }
}

fn map1<T: Scalar>(out: &mut [T], x: &[T], f: impl Fn(T) -> T) {
    for (o, a) in out.iter_mut().zip(x) {
        *o = f(*a);
    }
}

fn map2<T: Scalar>(out: &mut [T], a: &[T], b: &[T], f: impl Fn(T, T) -> T) {
    for ((o, p), q) in out.iter_mut().zip(a).zip(b) {
        *o = f(*p, *q);
    }
}
