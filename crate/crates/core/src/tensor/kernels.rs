//! Slice-level forward and backward kernels. Layout is NCHW row-major.

use super::Scalar;
use crate::error::{Error, Result};

#[inline]
pub fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weights: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::InvalidShape(format!("conv input must be NCHW, got {input:?}")));
        };
        let [out_channels, w_in, kh, kw] = *weights else {
            return Err(Error::InvalidShape(format!(
                "conv weights must be [out, in, k, k], got {weights:?}"
            )));
        };
        if w_in != in_channels {
            return Err(Error::InvalidShape(format!(
                "conv input has {in_channels} channels but weights expect {w_in}"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(Error::InvalidShape(format!("conv kernel must be square, got {kh}x{kw}")));
        }
        if bias != [out_channels] {
            return Err(Error::InvalidShape(format!(
                "conv bias must be [{out_channels}], got {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv stride must be positive".into()));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} input with padding {padding} is smaller than the {kh}x{kw} kernel"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Range of output indices `o` with `0 <= o*stride + k - padding < len`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (len as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (h, wd, oh, ow, k, s) = (g.height, g.width, g.out_height, g.out_width, g.kernel, g.stride);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(n * g.out_channels + co) * out_plane..][..out_plane];
            o.fill(b[co]);
            for ci in 0..g.in_channels {
                let xp = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, h, oh);
                    for kx in 0..k {
                        let wv = w[((co * g.in_channels + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = g.valid(kx, wd, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let orow = &mut o[oy * ow + ox0..oy * ow + ox1];
                            if s == 1 {
                                let ix0 = ox0 + kx - g.padding;
                                let xrow = &xp[iy * wd + ix0..iy * wd + ix0 + (ox1 - ox0)];
                                for (ov, xv) in orow.iter_mut().zip(xrow) {
                                    *ov = *ov + wv * *xv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    let ix = (ox0 + j) * s + kx - g.padding;
                                    *ov = *ov + wv * xp[iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients. Any of the gradient
/// buffers may be `None` when that gradient is not needed.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (h, wd, oh, ow, k, s) = (g.height, g.width, g.out_height, g.out_width, g.kernel, g.stride);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    if let Some(db) = db {
        for n in 0..g.batch {
            for (co, dbv) in db.iter_mut().enumerate() {
                let d = &dout[(n * g.out_channels + co) * out_plane..][..out_plane];
                *dbv = *dbv + d.iter().copied().sum::<T>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let d = &dout[(n * g.out_channels + co) * out_plane..][..out_plane];
            for ci in 0..g.in_channels {
                let xoff = (n * g.in_channels + ci) * in_plane;
                for ky in 0..k {
                    let (oy0, oy1) = g.valid(ky, h, oh);
                    for kx in 0..k {
                        let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = g.valid(kx, wd, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let drow = &d[oy * ow + ox0..oy * ow + ox1];
                            if s == 1 {
                                let base = xoff + iy * wd + ox0 + kx - g.padding;
                                let span = ox1 - ox0;
                                if dw.is_some() {
                                    let xrow = &x[base..base + span];
                                    for (dv, xv) in drow.iter().zip(xrow) {
                                        acc = acc + *dv * *xv;
                                    }
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    for (dxv, dv) in dx[base..base + span].iter_mut().zip(drow) {
                                        *dxv = *dxv + wv * *dv;
                                    }
                                }
                            } else {
                                for (j, dv) in drow.iter().enumerate() {
                                    let ix = (ox0 + j) * s + kx - g.padding;
                                    let xi = xoff + iy * wd + ix;
                                    acc = acc + *dv * x[xi];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xi] = dx[xi] + wv * *dv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
}

pub fn check_poolable(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidShape(format!(
            "2x2 max pooling needs even spatial size, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(dims: [usize; 4], x: &[T], out: &mut [T], arg: &mut [usize]) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
}

pub fn maxpool_backward<T: Scalar>(arg: &[usize], dout: &[T], dx: &mut [T]) {
    for (a, d) in arg.iter().zip(dout) {
        dx[*a] = dx[*a] + *d;
    }
}

/// Transposed convolution with kernel `2 * factor`, stride `factor` and
/// padding `factor / 2`, so the output is exactly `factor` times larger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub factor: usize,
}

pub const DECONV_FACTORS: [usize; 2] = [2, 8];

impl DeconvGeometry {
    pub fn new(input: &[usize], weights: &[usize], factor: usize) -> Result<Self> {
        if !DECONV_FACTORS.contains(&factor) {
            return Err(Error::InvalidConfig(format!(
                "unsupported upsampling factor {factor} (supported: {DECONV_FACTORS:?})"
            )));
        }
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::InvalidShape(format!("deconv input must be NCHW, got {input:?}")));
        };
        let [w_in, out_channels, kh, kw] = *weights else {
            return Err(Error::InvalidShape(format!(
                "deconv weights must be [in, out, k, k], got {weights:?}"
            )));
        };
        if w_in != in_channels {
            return Err(Error::InvalidShape(format!(
                "deconv input has {in_channels} channels but weights expect {w_in}"
            )));
        }
        if kh != 2 * factor || kw != 2 * factor {
            return Err(Error::InvalidShape(format!(
                "factor {factor} needs a {0}x{0} kernel, got {kh}x{kw}",
                2 * factor
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            factor,
        })
    }

    pub fn kernel(&self) -> usize {
        2 * self.factor
    }

    pub fn padding(&self) -> usize {
        self.factor / 2
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.height * self.factor,
            self.width * self.factor,
        ]
    }

    #[inline]
    fn target(&self, i: usize, k: usize, out_len: usize) -> Option<usize> {
        let o = (i * self.factor + k) as isize - self.padding() as isize;
        (o >= 0 && (o as usize) < out_len).then_some(o as usize)
    }
}

pub fn deconv_forward<T: Scalar>(g: &DeconvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let k = g.kernel();
    let (oh, ow) = (g.height * g.factor, g.width * g.factor);
    let in_plane = g.height * g.width;
    out.fill(T::zero());
    for n in 0..g.batch {
        for ci in 0..g.in_channels {
            let xp = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
            for co in 0..g.out_channels {
                let o = &mut out[(n * g.out_channels + co) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((ci * g.out_channels + co) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for iy in 0..g.height {
                            let Some(oy) = g.target(iy, ky, oh) else { continue };
                            for ix in 0..g.width {
                                if let Some(ox) = g.target(ix, kx, ow) {
                                    let oi = oy * ow + ox;
                                    o[oi] = o[oi] + wv * xp[iy * g.width + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn deconv_backward<T: Scalar>(
    g: &DeconvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let k = g.kernel();
    let (oh, ow) = (g.height * g.factor, g.width * g.factor);
    let in_plane = g.height * g.width;
    for n in 0..g.batch {
        for ci in 0..g.in_channels {
            let xoff = (n * g.in_channels + ci) * in_plane;
            for co in 0..g.out_channels {
                let d = &dout[(n * g.out_channels + co) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((ci * g.out_channels + co) * k + ky) * k + kx;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for iy in 0..g.height {
                            let Some(oy) = g.target(iy, ky, oh) else { continue };
                            for ix in 0..g.width {
                                if let Some(ox) = g.target(ix, kx, ow) {
                                    let dv = d[oy * ow + ox];
                                    let xi = xoff + iy * g.width + ix;
                                    acc = acc + dv * x[xi];
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xi] = dx[xi] + wv * dv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear upsampling kernel for the given factor, as a 1-d profile of
/// length `2 * factor`.
pub fn bilinear_profile(factor: usize) -> Vec<f64> {
    let k = 2 * factor;
    let center = factor as f64 - 0.5;
    (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect()
}

pub fn concat_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    match (a, b) {
        ([na, ca, ha, wa], [nb, cb, hb, wb]) if na == nb && ha == hb && wa == wb => {
            Ok(vec![*na, ca + cb, *ha, *wa])
        }
        _ => Err(Error::InvalidShape(format!(
            "cannot concatenate channels of {a:?} and {b:?}"
        ))),
    }
}

pub fn concat_forward<T: Scalar>(a: &[usize], b: &[usize], xa: &[T], xb: &[T], out: &mut [T]) {
    let (n, plane) = (a[0], a[2] * a[3]);
    let (la, lb) = (a[1] * plane, b[1] * plane);
    for i in 0..n {
        let o = &mut out[i * (la + lb)..(i + 1) * (la + lb)];
        o[..la].copy_from_slice(&xa[i * la..(i + 1) * la]);
        o[la..].copy_from_slice(&xb[i * lb..(i + 1) * lb]);
    }
}

pub fn concat_backward<T: Scalar>(
    a: &[usize],
    b: &[usize],
    dout: &[T],
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (n, plane) = (a[0], a[2] * a[3]);
    let (la, lb) = (a[1] * plane, b[1] * plane);
    if let Some(da) = da {
        for i in 0..n {
            let d = &dout[i * (la + lb)..i * (la + lb) + la];
            for (g, v) in da[i * la..(i + 1) * la].iter_mut().zip(d) {
                *g = *g + *v;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..n {
            let d = &dout[i * (la + lb) + la..(i + 1) * (la + lb)];
            for (g, v) in db[i * lb..(i + 1) * lb].iter_mut().zip(d) {
                *g = *g + *v;
            }
        }
    }
}

pub fn slice_channels_forward<T: Scalar>(
    dims: [usize; 4],
    start: usize,
    len: usize,
    x: &[T],
    out: &mut [T],
) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for i in 0..n {
        out[i * len * plane..(i + 1) * len * plane]
            .copy_from_slice(&x[(i * c + start) * plane..(i * c + start + len) * plane]);
    }
}

pub fn slice_channels_backward<T: Scalar>(
    dims: [usize; 4],
    start: usize,
    len: usize,
    dout: &[T],
    dx: &mut [T],
) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for i in 0..n {
        let src = &dout[i * len * plane..(i + 1) * len * plane];
        let dst = &mut dx[(i * c + start) * plane..(i * c + start + len) * plane];
        for (g, v) in dst.iter_mut().zip(src) {
            *g = *g + *v;
        }
    }
}

/// Per-pixel gather: `out[n, c, i] = x[n, c, map[i]]`, zero where `map[i] < 0`.
pub fn gather_forward<T: Scalar>(dims: [usize; 4], map: &[i32], x: &[T], out: &mut [T]) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for p in 0..n * c {
        let src = &x[p * plane..(p + 1) * plane];
        for (o, m) in out[p * map.len()..(p + 1) * map.len()].iter_mut().zip(map) {
            *o = if *m >= 0 { src[*m as usize] } else { T::zero() };
        }
    }
}

pub fn gather_backward<T: Scalar>(dims: [usize; 4], map: &[i32], dout: &[T], dx: &mut [T]) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for p in 0..n * c {
        let d = &dout[p * map.len()..(p + 1) * map.len()];
        for (dv, m) in d.iter().zip(map) {
            if *m >= 0 {
                let i = p * plane + *m as usize;
                dx[i] = dx[i] + *dv;
            }
        }
    }
}

/// Converts labels plus ignore mask to targets: class index or `-1`.
pub fn targets_from_labels(labels: &[u8], ignore: &[bool], classes: usize) -> Result<Vec<i32>> {
    labels
        .iter()
        .zip(ignore)
        .map(|(&l, &skip)| {
            if skip {
                Ok(-1)
            } else if (l as usize) < classes {
                Ok(l as i32)
            } else {
                Err(Error::InvalidLabel {
                    label: l as i64,
                    classes,
                })
            }
        })
        .collect()
}

pub fn softmax_forward<T: Scalar>(dims: [usize; 4], x: &[T], out: &mut [T]) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(x[base + k * plane + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[base + k * plane + p] - m).exp();
                out[base + k * plane + p] = e;
                z = z + e;
            }
            for k in 0..c {
                let i = base + k * plane + p;
                out[i] = out[i] / z;
            }
        }
    }
}

pub fn softmax_backward<T: Scalar>(dims: [usize; 4], y: &[T], dout: &[T], dx: &mut [T]) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for k in 0..c {
                let i = base + k * plane + p;
                dot = dot + y[i] * dout[i];
            }
            for k in 0..c {
                let i = base + k * plane + p;
                dx[i] = dx[i] + y[i] * (dout[i] - dot);
            }
        }
    }
}

/// Returns the mean loss over non-ignored pixels and leaves the softmax
/// probabilities in `probs`.
pub fn softmax_ce_forward<T: Scalar>(dims: [usize; 4], logits: &[T], targets: &[i32], probs: &mut [T]) -> T {
    let [n, c, h, w] = dims;
    let plane = h * w;
    softmax_forward(dims, logits, probs);
    let mut total = T::zero();
    let mut count = 0usize;
    for b in 0..n {
        for p in 0..plane {
            let t = targets[b * plane + p];
            if t < 0 {
                continue;
            }
            let i = b * c * plane + t as usize * plane + p;
            // log-softmax computed from logits to stay finite for tiny probabilities
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(logits[b * c * plane + k * plane + p]);
            }
            let mut z = T::zero();
            for k in 0..c {
                z = z + (logits[b * c * plane + k * plane + p] - m).exp();
            }
            total = total - (logits[i] - m - z.ln());
            count += 1;
        }
    }
    if count == 0 {
        T::zero()
    } else {
        total / T::of(count as f64)
    }
}

pub fn softmax_ce_backward<T: Scalar>(
    dims: [usize; 4],
    probs: &[T],
    targets: &[i32],
    scale: T,
    dx: &mut [T],
) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = targets.iter().filter(|t| **t >= 0).count();
    if count == 0 {
        return;
    }
    let s = scale / T::of(count as f64);
    for b in 0..n {
        for p in 0..plane {
            let t = targets[b * plane + p];
            if t < 0 {
                continue;
            }
            for k in 0..c {
                let i = b * c * plane + k * plane + p;
                let onehot = if k as i32 == t { T::one() } else { T::zero() };
                dx[i] = dx[i] + s * (probs[i] - onehot);
            }
        }
    }
}
