use super::{GradBuf, Graph, Node, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Left padding of a "same" convolution with kernel `k`; the right side gets
/// `ceil((k-1)/2)`.
pub fn same_pad_left(k: usize) -> usize {
    (k - 1) / 2
}

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// 2-d convolution over (time, feature) with channels last, "same" padding on
/// both axes and a stride on time only.
pub(crate) struct Conv2d {
    x: Var,
    w: Var,
    stride: usize,
}

struct Conv2dGeom {
    b: usize,
    t: usize,
    f: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    t_out: usize,
    stride: usize,
}

impl Conv2dGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] {
            return shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}"));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if xs[1] == 0 {
            return Err(Error::EmptyInput("conv2d"));
        }
        Ok(Self {
            b: xs[0],
            t: xs[1],
            f: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
            t_out: ceil_div(xs[1], stride),
            stride,
        })
    }

    /// Calls `visit(out_offset, in_offset, w_offset)` for every valid tap; the
    /// offsets point at the start of the channel vectors.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (pt, pf) = (same_pad_left(self.kh), same_pad_left(self.kw));
        for b in 0..self.b {
            for to in 0..self.t_out {
                for fo in 0..self.f {
                    let o = ((b * self.t_out + to) * self.f + fo) * self.cout;
                    for i in 0..self.kh {
                        let ti = (to * self.stride + i) as isize - pt as isize;
                        if ti < 0 || ti >= self.t as isize {
                            continue;
                        }
                        for j in 0..self.kw {
                            let fi = (fo + j) as isize - pf as isize;
                            if fi < 0 || fi >= self.f as isize {
                                continue;
                            }
                            let x = ((b * self.t + ti as usize) * self.f + fi as usize) * self.cin;
                            let w = (i * self.kw + j) * self.cin * self.cout;
                            visit(o, x, w);
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let (xv, wv) = (&nodes[self.x.0].value, &nodes[self.w.0].value);
        let geom = Conv2dGeom::new(xv.shape(), wv.shape(), self.stride).expect("checked in forward");
        let (cin, cout) = (geom.cin, geom.cout);
        let (x, w) = (xv.data(), wv.data());
        if let Some(dx) = g.slot(self.x) {
            geom.for_each_tap(|o, xo, wo| {
                let d = &dy[o..o + cout];
                for c in 0..cin {
                    let wr = &w[wo + c * cout..wo + (c + 1) * cout];
                    dx[xo + c] += d.iter().zip(wr).map(|(&a, &b)| a * b).sum::<S>();
                }
            });
        }
        if let Some(dw) = g.slot(self.w) {
            geom.for_each_tap(|o, xo, wo| {
                let d = &dy[o..o + cout];
                for c in 0..cin {
                    let xv = x[xo + c];
                    for (k, &dk) in d.iter().enumerate() {
                        dw[wo + c * cout + k] += xv * dk;
                    }
                }
            });
        }
    }
}

/// Max-pool with window 2 and stride 2 over the feature axis of `[B, T, F, C]`.
/// An odd trailing feature forms a window of one.
pub(crate) struct FeatureMaxPool {
    x: Var,
    argmax: Vec<usize>,
}

impl FeatureMaxPool {
    pub(super) fn backward<S: Scalar>(&self, _nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        if let Some(dx) = g.slot(self.x) {
            for (o, &src) in self.argmax.iter().enumerate() {
                dx[src] += dy[o];
            }
        }
    }
}

/// Per-channel 1-d convolution over time of `[B, T, C]` with "same" padding.
pub(crate) struct Depthwise {
    x: Var,
    w: Var,
}

fn depthwise_taps(t: usize, k: usize, mut visit: impl FnMut(usize, usize, usize)) {
    let pl = same_pad_left(k);
    for to in 0..t {
        for i in 0..k {
            let ti = (to + i) as isize - pl as isize;
            if ti >= 0 && (ti as usize) < t {
                visit(to, ti as usize, i);
            }
        }
    }
}

impl Depthwise {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let (xv, wv) = (&nodes[self.x.0].value, &nodes[self.w.0].value);
        let (b, t, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let k = wv.dim(0);
        let (x, w) = (xv.data(), wv.data());
        if let Some(dx) = g.slot(self.x) {
            for bi in 0..b {
                depthwise_taps(t, k, |to, ti, i| {
                    for ch in 0..c {
                        dx[(bi * t + ti) * c + ch] += dy[(bi * t + to) * c + ch] * w[i * c + ch];
                    }
                });
            }
        }
        if let Some(dw) = g.slot(self.w) {
            for bi in 0..b {
                depthwise_taps(t, k, |to, ti, i| {
                    for ch in 0..c {
                        dw[i * c + ch] += dy[(bi * t + to) * c + ch] * x[(bi * t + ti) * c + ch];
                    }
                });
            }
        }
    }
}

/// Transposed 1-d convolution with kernel size equal to stride: each input
/// frame expands into `stride` output frames without overlap.
pub(crate) struct Transposed {
    x: Var,
    w: Var,
}

impl Transposed {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let (xv, wv) = (&nodes[self.x.0].value, &nodes[self.w.0].value);
        let (b, t, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (k, o) = (wv.dim(0), wv.dim(2));
        let (x, w) = (xv.data(), wv.data());
        if let Some(dx) = g.slot(self.x) {
            for bt in 0..b * t {
                for j in 0..k {
                    let d = &dy[(bt * k + j) * o..(bt * k + j + 1) * o];
                    for ch in 0..c {
                        let wr = &w[(j * c + ch) * o..(j * c + ch + 1) * o];
                        dx[bt * c + ch] += d.iter().zip(wr).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
            }
        }
        if let Some(dw) = g.slot(self.w) {
            for bt in 0..b * t {
                for j in 0..k {
                    let d = &dy[(bt * k + j) * o..(bt * k + j + 1) * o];
                    for ch in 0..c {
                        let xv = x[bt * c + ch];
                        let row = &mut dw[(j * c + ch) * o..(j * c + ch + 1) * o];
                        for (r, &dd) in row.iter_mut().zip(d) {
                            *r += xv * dd;
                        }
                    }
                }
            }
        }
    }
}

/// Keeps the first `t_out` frames of `[B, T, ...]`.
pub(crate) struct CropTime {
    x: Var,
}

impl CropTime {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let xs = nodes[self.x.0].value.shape();
        let (b, t) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let t_out = dy.len() / (b * inner);
        if let Some(dx) = g.slot(self.x) {
            for bi in 0..b {
                let src = &dy[bi * t_out * inner..(bi + 1) * t_out * inner];
                let dst = &mut dx[bi * t * inner..bi * t * inner + t_out * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// Max-pool over time with window = stride, restricted to each sequence's
/// valid frames. Windows with no valid frame produce zeros.
pub(crate) struct TimeMaxPool {
    x: Var,
    argmax: Vec<Option<usize>>,
}

impl TimeMaxPool {
    pub(super) fn backward<S: Scalar>(&self, _nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        if let Some(dx) = g.slot(self.x) {
            for (o, src) in self.argmax.iter().enumerate() {
                if let Some(s) = src {
                    dx[*s] += dy[o];
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// `x: [B, T, F, Cin]`, `w: [kh, kw, Cin, Cout]` → `[B, ceil(T/stride), F, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride_t: usize) -> Result<Var> {
        let geom = Conv2dGeom::new(self.shape(x), self.shape(w), stride_t)?;
        let (cin, cout) = (geom.cin, geom.cout);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![S::zero(); geom.b * geom.t_out * geom.f * cout];
        geom.for_each_tap(|o, xo, wo| {
            let acc = &mut out[o..o + cout];
            for c in 0..cin {
                let xv = xd[xo + c];
                let wr = &wd[wo + c * cout..wo + (c + 1) * cout];
                for (a, &wk) in acc.iter_mut().zip(wr) {
                    *a += xv * wk;
                }
            }
        });
        let out = Tensor::new([geom.b, geom.t_out, geom.f, cout], out)?;
        Ok(self.push(out, Op::Conv2d(Conv2d { x, w, stride: stride_t }), &[x, w]))
    }

    /// Halves the feature axis of `[B, T, F, C]` (rounding up).
    pub fn max_pool_feature(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("max_pool_feature", format!("{s:?}"));
        }
        let (b, t, f, c) = (s[0], s[1], s[2], s[3]);
        let fo = ceil_div(f, 2);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(b * t * fo * c);
        let mut argmax = Vec::with_capacity(b * t * fo * c);
        for bt in 0..b * t {
            for j in 0..fo {
                for ch in 0..c {
                    let i0 = (bt * f + 2 * j) * c + ch;
                    let mut best = i0;
                    if 2 * j + 1 < f {
                        let i1 = i0 + c;
                        if xd[i1] > xd[i0] {
                            best = i1;
                        }
                    }
                    data.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new([b, t, fo, c], data)?;
        Ok(self.push(out, Op::FeaturePool(FeatureMaxPool { x, argmax }), &[x]))
    }

    /// `x: [B, T, C]`, `w: [k, C]` → `[B, T, C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[2] || ws[0] == 0 {
            return shape_err("depthwise_conv1d", format!("input {xs:?}, kernel {ws:?}"));
        }
        let (b, t, c, k) = (xs[0], xs[1], xs[2], ws[0]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![S::zero(); b * t * c];
        for bi in 0..b {
            depthwise_taps(t, k, |to, ti, i| {
                for ch in 0..c {
                    out[(bi * t + to) * c + ch] += xd[(bi * t + ti) * c + ch] * wd[i * c + ch];
                }
            });
        }
        let out = Tensor::new(xs, out)?;
        Ok(self.push(out, Op::Depthwise(Depthwise { x, w }), &[x, w]))
    }

    /// `x: [B, T', C]`, `w: [k, C, Cout]` with `k == stride` → `[B, T'·stride, Cout]`.
    pub fn transposed_conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] {
            return shape_err("transposed_conv1d", format!("input {xs:?}, kernel {ws:?}"));
        }
        if ws[0] != stride || stride == 0 {
            return Err(Error::Config(format!(
                "transposed convolution kernel size {} must equal its stride {stride}",
                ws[0]
            )));
        }
        let (b, t, c, k, o) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![S::zero(); b * t * k * o];
        for bt in 0..b * t {
            for j in 0..k {
                let acc = &mut out[(bt * k + j) * o..(bt * k + j + 1) * o];
                for ch in 0..c {
                    let xv = xd[bt * c + ch];
                    let wr = &wd[(j * c + ch) * o..(j * c + ch + 1) * o];
                    for (a, &wk) in acc.iter_mut().zip(wr) {
                        *a += xv * wk;
                    }
                }
            }
        }
        let out = Tensor::new([b, t * k, o], out)?;
        Ok(self.push(out, Op::Transposed(Transposed { x, w }), &[x, w]))
    }

    /// Trims `[B, T, ...]` to its first `t_out` frames.
    pub fn crop_time(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || t_out > xs[1] {
            return shape_err(
                "crop_time",
                format!("cannot crop {xs:?} to {t_out} frames"),
            );
        }
        if t_out == xs[1] {
            return Ok(x);
        }
        let (b, t) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(b * t_out * inner);
        for bi in 0..b {
            data.extend_from_slice(&xd[bi * t * inner..bi * t * inner + t_out * inner]);
        }
        let mut shape = xs;
        shape[1] = t_out;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Crop(CropTime { x }), &[x]))
    }

    /// `[B, T, C]` → `[B, ceil(T/stride), C]`, pooling only frames below each
    /// sequence length.
    pub fn time_max_pool(&mut self, x: Var, lengths: &[usize], stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != lengths.len() || stride == 0 {
            return shape_err("time_max_pool", format!("{xs:?}, stride {stride}"));
        }
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let to = ceil_div(t, stride);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(b * to * c);
        let mut argmax = Vec::with_capacity(b * to * c);
        for (bi, &len) in lengths.iter().enumerate() {
            for w in 0..to {
                let lo = w * stride;
                let hi = ((w + 1) * stride).min(len.min(t));
                for ch in 0..c {
                    let mut best: Option<usize> = None;
                    for ti in lo..hi {
                        let i = (bi * t + ti) * c + ch;
                        if best.is_none_or(|bj| xd[i] > xd[bj]) {
                            best = Some(i);
                        }
                    }
                    data.push(best.map_or(S::zero(), |i| xd[i]));
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new([b, to, c], data)?;
        Ok(self.push(out, Op::TimePool(TimeMaxPool { x, argmax }), &[x]))
    }
}
