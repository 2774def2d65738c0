//! Tape-based reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes that do
//! not depend on a gradient-requiring leaf never get a backward closure, so
//! gradients of frozen parameters are not merely zero but never computed.
//! [`Tape::backward`] accepts several weighted scalar seeds and a set of stop
//! nodes, which is how loss terms are routed to specific parameter groups.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{matmul_acc, Array, Real};

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T> {
    value: Arc<Array<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Records a computation for later differentiation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradient accumulator handed to backward closures. Inputs are addressed by
/// their position in the op's input list.
pub struct GradSink<'a, T> {
    inputs: &'a [usize],
    requires: &'a [bool],
    grads: &'a mut Vec<Option<Vec<T>>>,
    sizes: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    /// Whether input `i` needs a gradient.
    pub fn wants(&self, i: usize) -> bool {
        self.requires[self.inputs[i]]
    }

    /// Mutable gradient buffer of input `i`, zero-initialised on first use.
    pub fn grad(&mut self, i: usize) -> &mut [T] {
        let id = self.inputs[i];
        let size = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![T::zero(); size])
    }
}

/// Gradients retained after [`Tape::backward`]: leaves and stop nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when no gradient reached the node.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node sharing `value`.
    pub fn leaf(&self, value: Arc<Array<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, inputs: Vec::new(), backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that takes gradients.
    pub fn variable(&self, value: Array<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf without gradients.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    /// Records an operation. `backward` receives the output gradient and must
    /// accumulate into the inputs it [`GradSink::wants`].
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t, T>], value: Array<T>, backward: F) -> Var<'t, T>
    where
        F: Fn(&[T], &mut GradSink<'_, T>) + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node { value: Arc::new(value), requires_grad, inputs: ids, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Back-propagates `Σ weight · seed` where every seed is a scalar node.
    ///
    /// Nodes listed in `stop` receive their gradient but do not propagate it
    /// further. Only leaf and stop-node gradients are retained.
    pub fn backward(&self, seeds: &[(Var<'_, T>, T)], stop: &[Var<'_, T>]) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut is_stop = vec![false; nodes.len()];
        for s in stop {
            is_stop[s.id] = true;
        }
        let mut top = 0;
        for (var, weight) in seeds {
            assert_eq!(sizes[var.id], 1, "backward seed must be a scalar");
            if !requires[var.id] {
                continue;
            }
            let g = grads[var.id].get_or_insert_with(|| vec![T::zero()]);
            g[0] = g[0] + *weight;
            top = top.max(var.id + 1);
        }
        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(f) if !is_stop[id] => {
                    let mut sink = GradSink {
                        inputs: &node.inputs,
                        requires: &requires,
                        grads: &mut grads,
                        sizes: &sizes,
                    };
                    f(&g, &mut sink);
                }
                Some(_) => grads[id] = Some(g),
                None => grads[id] = Some(g),
            }
        }
        Gradients { grads }
    }
}

/// Bilinear 2x upsampling weights (half-pixel centres, edge clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Normalized pixel-centre coordinate in `[-1, 1]`; a single pixel maps to 0.
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Columns `[Cin*k*k, B*Ho*Wo]`, built by appending so no buffer is zeroed twice.
fn im2col<T: Real>(
    x: &[T],
    (c, b, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let mut cols = Vec::with_capacity(c * k * k * b * ho * wo);
    let zeros = |cols: &mut Vec<T>, len: usize| cols.extend(std::iter::repeat(T::zero()).take(len));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                for bi in 0..b {
                    let src = &x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            zeros(&mut cols, wo);
                            continue;
                        }
                        let line = &src[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx).min(wo);
                            let hi = wo.min((w + pad).saturating_sub(kx)).max(lo);
                            zeros(&mut cols, lo);
                            let s0 = lo + kx - pad;
                            cols.extend_from_slice(&line[s0..s0 + hi - lo]);
                            zeros(&mut cols, wo - hi);
                        } else {
                            cols.extend((0..wo).map(|ox| {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    line[ix as usize]
                                } else {
                                    T::zero()
                                }
                            }));
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    (c, b, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let n = b * ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut dx[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let g = &src[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx).min(wo);
                            let hi = wo.min((w + pad).saturating_sub(kx)).max(lo);
                            let s0 = lo + kx - pad;
                            for (d, &gv) in line[s0..s0 + hi - lo].iter_mut().zip(&g[lo..hi]) {
                                *d = *d + gv;
                            }
                            continue;
                        }
                        for (ox, &gv) in g.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] = line[ix as usize] + gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    (rsa, csa): (usize, usize),
    b: *const T,
    (rsb, csb): (usize, usize),
    beta: T,
    c: *mut T,
    (rsc, csc): (usize, usize),
) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        beta,
        c,
        rsc as isize,
        csc as isize,
    )
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Array<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.leaf(self.value(), false)
    }

    fn unary(self, value: Array<T>, f: impl Fn(&[T], &mut [T]) + 'static) -> Var<'t, T> {
        self.tape.custom(&[self], value, move |g, sink| f(g, sink.grad(0)))
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        self.tape.custom(&[self, other], Array::from_vec(a.shape(), out), |g, sink| {
            for i in 0..2 {
                if sink.wants(i) {
                    for (d, &gv) in sink.grad(i).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
        })
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.add(other.scale(-1.0))
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        self.tape.custom(&[self, other], Array::from_vec(a.shape(), out), move |g, sink| {
            if sink.wants(0) {
                for ((d, &gv), &y) in sink.grad(0).iter_mut().zip(g).zip(b.data()) {
                    *d = *d + gv * y;
                }
            }
            if sink.wants(1) {
                for ((d, &gv), &x) in sink.grad(1).iter_mut().zip(g).zip(a.data()) {
                    *d = *d + gv * x;
                }
            }
        })
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let f = T::lit(factor);
        let out = self.value().map(|v| v * f);
        self.unary(out, move |g, d| {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d = *d + gv * f;
            }
        })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        let out = self.value().map(|v| v + c);
        self.unary(out, |g, d| {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d = *d + gv;
            }
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::lit(slope);
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * s });
        self.unary(out, move |g, d| {
            for ((d, &gv), &v) in d.iter_mut().zip(g).zip(x.data()) {
                *d = *d + if v > T::zero() { gv } else { gv * s };
            }
        })
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| {
            let v = v.as_f64();
            T::lit(-(v.max(0.0) - v + (-v.abs()).exp().ln_1p()))
        });
        self.unary(out, move |g, d| {
            for ((d, &gv), &v) in d.iter_mut().zip(g).zip(x.data()) {
                // d/dx log σ(x) = σ(-x)
                let s = 1.0 / (1.0 + v.as_f64().exp());
                *d = *d + gv * T::lit(s);
            }
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        self.unary(Array::scalar(x.sum()), |g, d| {
            for d in d.iter_mut() {
                *d = *d + g[0];
            }
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of squares, `Σ x²`.
    pub fn sum_squares(self) -> Var<'t, T> {
        let x = self.value();
        let total = x.data().iter().map(|&v| v * v).sum();
        self.unary(Array::scalar(total), move |g, d| {
            let two = T::lit(2.0) * g[0];
            for (d, &v) in d.iter_mut().zip(x.data()) {
                *d = *d + two * v;
            }
        })
    }

    /// 2-D convolution with square kernel `w[Cout, Cin, k, k]`, bias `[Cout]`,
    /// zero padding `k / 2`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize) -> Var<'t, T> {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let (c, b, h, w) = x.dims4();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k);
        assert_eq!(cin, c, "conv2d: input has {c} channels, weight expects {cin}");
        assert_eq!(bv.len(), cout);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let n = b * ho * wo;
        let rows = cin * k * k;
        let direct = k == 1 && stride == 1;
        let mut out = vec![T::zero(); cout * n];
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(bv.data()[co]);
        }
        if direct {
            matmul_acc(cout, rows, n, wv.data(), false, x.data(), false, &mut out, T::one());
        } else {
            let cols = im2col(x.data(), (c, b, h, w), k, stride, pad, (ho, wo));
            matmul_acc(cout, rows, n, wv.data(), false, &cols, false, &mut out, T::one());
        }
        let value = Array::from_vec(&[cout, b, ho, wo], out);
        self.tape.custom(&[self, weight, bias], value, move |g, sink| {
            let cols_owned;
            let cols: &[T] = if direct {
                x.data()
            } else if sink.wants(1) || sink.wants(0) {
                cols_owned = im2col(x.data(), (c, b, h, w), k, stride, pad, (ho, wo));
                &cols_owned
            } else {
                &[]
            };
            if sink.wants(1) {
                matmul_acc(cout, n, rows, g, false, cols, true, sink.grad(1), T::one());
            }
            if sink.wants(2) {
                let db = sink.grad(2);
                for (co, chunk) in g.chunks(n).enumerate() {
                    db[co] = db[co] + chunk.iter().copied().sum();
                }
            }
            if sink.wants(0) {
                if direct {
                    matmul_acc(rows, cout, n, wv.data(), true, g, false, sink.grad(0), T::one());
                } else {
                    let mut dcols = vec![T::zero(); rows * n];
                    matmul_acc(rows, cout, n, wv.data(), true, g, false, &mut dcols, T::zero());
                    col2im(&dcols, (c, b, h, w), k, stride, pad, ho, wo, sink.grad(0));
                }
            }
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let values: Vec<Arc<Array<T>>> = parts.iter().map(|p| p.value()).collect();
        let (_, b, h, w) = values[0].dims4();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(values.len());
        let mut channels = 0;
        for v in &values {
            let (c, b2, h2, w2) = v.dims4();
            assert_eq!((b2, h2, w2), (b, h, w), "concat_channels: spatial/batch mismatch");
            offsets.push(data.len());
            data.extend_from_slice(v.data());
            channels += c;
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
        parts[0].tape.custom(parts, Array::from_vec(&[channels, b, h, w], data), move |g, sink| {
            for (i, (&off, &len)) in offsets.iter().zip(&sizes).enumerate() {
                if sink.wants(i) {
                    for (d, &gv) in sink.grad(i).iter_mut().zip(&g[off..off + len]) {
                        *d = *d + gv;
                    }
                }
            }
        })
    }

    /// Appends row and column coordinate channels in `[-1, 1]`.
    pub fn coord_append(self) -> Var<'t, T> {
        let (_, b, h, w) = self.value().dims4();
        let mut coords = Vec::with_capacity(2 * b * h * w);
        for axis in 0..2 {
            for _ in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let v = if axis == 0 { normalized_coord(y, h) } else { normalized_coord(x, w) };
                        coords.push(T::lit(v));
                    }
                }
            }
        }
        let coords = self.tape.constant(Array::from_vec(&[2, b, h, w], coords));
        Var::concat_channels(&[self, coords])
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(self, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let (c, b, h, w) = x.dims4();
        assert!(start + len <= c, "narrow_channels out of range");
        let plane = b * h * w;
        let data = x.data()[start * plane..(start + len) * plane].to_vec();
        self.unary(Array::from_vec(&[len, b, h, w], data), move |g, d| {
            for (d, &gv) in d[start * plane..(start + len) * plane].iter_mut().zip(g) {
                *d = *d + gv;
            }
        })
    }

    /// Bilinear 2x upsampling.
    pub fn upsample2x(self) -> Var<'t, T> {
        let x = self.value();
        let (c, b, h, w) = x.dims4();
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * b * h2 * w2];
        for (plane, src) in x.data().chunks(h * w).enumerate() {
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = src[y0 * w + x0].as_f64() * (1.0 - ly) * (1.0 - lx)
                        + src[y0 * w + x1].as_f64() * (1.0 - ly) * lx
                        + src[y1 * w + x0].as_f64() * ly * (1.0 - lx)
                        + src[y1 * w + x1].as_f64() * ly * lx;
                    dst[oy * w2 + ox] = T::lit(v);
                }
            }
        }
        self.unary(Array::from_vec(&[c, b, h2, w2], out), move |g, d| {
            for (plane, dst) in d.chunks_mut(h * w).enumerate() {
                let src = &g[plane * h2 * w2..(plane + 1) * h2 * w2];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let gv = src[oy * w2 + ox];
                        let (ly, lx) = (T::lit(ly), T::lit(lx));
                        let one = T::one();
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gv * (one - ly) * (one - lx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gv * (one - ly) * lx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gv * ly * (one - lx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gv * ly * lx;
                    }
                }
            }
        })
    }

    /// 2x2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2x(self) -> Var<'t, T> {
        let x = self.value();
        let (c, b, h, w) = x.dims4();
        let (h2, w2) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); c * b * h2 * w2];
        for (plane, src) in x.data().chunks(h * w).enumerate() {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[plane * h2 * w2 + y * w2 + xx] = s * quarter;
                }
            }
        }
        self.unary(Array::from_vec(&[c, b, h2, w2], out), move |g, d| {
            for (plane, dst) in d.chunks_mut(h * w).enumerate() {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let gv = g[plane * h2 * w2 + y * w2 + xx] * quarter;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = (2 * y + dy) * w + 2 * xx + dx;
                            dst[i] = dst[i] + gv;
                        }
                    }
                }
            }
        })
    }

    /// Forward differences along rows (`axis = 0`) or columns (`axis = 1`);
    /// the last row/column gets 0.
    pub fn forward_diff(self, axis: usize) -> Var<'t, T> {
        let x = self.value();
        let (c, b, h, w) = x.dims4();
        let step = if axis == 0 { w } else { 1 };
        let valid = move |y: usize, xx: usize| if axis == 0 { y + 1 < h } else { xx + 1 < w };
        let mut out = vec![T::zero(); x.len()];
        for (plane, src) in x.data().chunks(h * w).enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    if valid(y, xx) {
                        let i = y * w + xx;
                        out[plane * h * w + i] = src[i + step] - src[i];
                    }
                }
            }
        }
        self.unary(Array::from_vec(&[c, b, h, w], out), move |g, d| {
            for (plane, dst) in d.chunks_mut(h * w).enumerate() {
                for y in 0..h {
                    for xx in 0..w {
                        if valid(y, xx) {
                            let i = y * w + xx;
                            let gv = g[plane * h * w + i];
                            dst[i + step] = dst[i + step] + gv;
                            dst[i] = dst[i] - gv;
                        }
                    }
                }
            }
        })
    }

    /// Spatial mean: `[C, B, H, W] -> [C, B, 1, 1]`.
    pub fn mean_spatial(self) -> Var<'t, T> {
        let x = self.value();
        let (c, b, h, w) = x.dims4();
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let out: Vec<T> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.unary(Array::from_vec(&[c, b, 1, 1], out), move |g, d| {
            for (dst, &gv) in d.chunks_mut(hw).zip(g) {
                for v in dst {
                    *v = *v + gv * inv;
                }
            }
        })
    }

    /// `[C*s*s, B, 1, 1] -> [C, B, s, s]`, channel index `c*s*s + y*s + x`.
    pub fn unflatten_spatial(self, side: usize) -> Var<'t, T> {
        let x = self.value();
        let (cs, b, h, w) = x.dims4();
        assert_eq!((h, w), (1, 1));
        assert_eq!(cs % (side * side), 0, "unflatten_spatial: {cs} channels not divisible");
        let c = cs / (side * side);
        let ss = side * side;
        let index = move |ci: usize, bi: usize, p: usize| ((ci * ss + p) * b + bi, (ci * b + bi) * ss + p);
        let mut out = vec![T::zero(); x.len()];
        for ci in 0..c {
            for bi in 0..b {
                for p in 0..ss {
                    let (src, dst) = index(ci, bi, p);
                    out[dst] = x.data()[src];
                }
            }
        }
        self.unary(Array::from_vec(&[c, b, side, side], out), move |g, d| {
            for ci in 0..c {
                for bi in 0..b {
                    for p in 0..ss {
                        let (src, dst) = index(ci, bi, p);
                        d[src] = d[src] + g[dst];
                    }
                }
            }
        })
    }

    /// Softmax over the channel axis at every `(b, y, x)`.
    pub fn softmax_channels(self) -> Var<'t, T> {
        let x = self.value();
        let p = softmax_channels(&x);
        let probs = Arc::new(p.clone());
        let (c, b, h, w) = x.dims4();
        let plane = b * h * w;
        self.unary(p, move |g, d| {
            let pd = probs.data();
            for pos in 0..plane {
                let mut dot = T::zero();
                for ch in 0..c {
                    dot = dot + g[ch * plane + pos] * pd[ch * plane + pos];
                }
                for ch in 0..c {
                    let i = ch * plane + pos;
                    d[i] = d[i] + pd[i] * (g[i] - dot);
                }
            }
        })
    }

    /// Per-part masking: `x[C, B, H, W] ⊙ p[N, B, H, W] -> [C, N*B, H, W]`,
    /// output batch index `n * B + b`.
    pub fn mask_parts(self, probs: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let p = probs.value();
        let (c, b, h, w) = x.dims4();
        let (n, b2, h2, w2) = p.dims4();
        assert_eq!((b, h, w), (b2, h2, w2), "mask_parts: image/probability mismatch");
        let hw = h * w;
        let mut out = vec![T::zero(); c * n * b * hw];
        for ci in 0..c {
            for ni in 0..n {
                for bi in 0..b {
                    let src = &x.data()[(ci * b + bi) * hw..(ci * b + bi + 1) * hw];
                    let m = &p.data()[(ni * b + bi) * hw..(ni * b + bi + 1) * hw];
                    let dst = &mut out[((ci * n + ni) * b + bi) * hw..((ci * n + ni) * b + bi + 1) * hw];
                    for ((o, &s), &mv) in dst.iter_mut().zip(src).zip(m) {
                        *o = s * mv;
                    }
                }
            }
        }
        self.tape.custom(&[self, probs], Array::from_vec(&[c, n * b, h, w], out), move |g, sink| {
            let block = |ci: usize, ni: usize, bi: usize| ((ci * n + ni) * b + bi) * hw;
            if sink.wants(0) {
                let dx = sink.grad(0);
                for ci in 0..c {
                    for ni in 0..n {
                        for bi in 0..b {
                            let gs = &g[block(ci, ni, bi)..block(ci, ni, bi) + hw];
                            let m = &p.data()[(ni * b + bi) * hw..(ni * b + bi + 1) * hw];
                            let d = &mut dx[(ci * b + bi) * hw..(ci * b + bi + 1) * hw];
                            for ((d, &gv), &mv) in d.iter_mut().zip(gs).zip(m) {
                                *d = *d + gv * mv;
                            }
                        }
                    }
                }
            }
            if sink.wants(1) {
                let dp = sink.grad(1);
                for ci in 0..c {
                    for ni in 0..n {
                        for bi in 0..b {
                            let gs = &g[block(ci, ni, bi)..block(ci, ni, bi) + hw];
                            let s = &x.data()[(ci * b + bi) * hw..(ci * b + bi + 1) * hw];
                            let d = &mut dp[(ni * b + bi) * hw..(ni * b + bi + 1) * hw];
                            for ((d, &gv), &sv) in d.iter_mut().zip(gs).zip(s) {
                                *d = *d + gv * sv;
                            }
                        }
                    }
                }
            }
        })
    }

    /// Per-pixel mixture of part codes: `codes[D, N*B, 1, 1]` (batch index
    /// `n * B + b`) weighted by `probs[N, B, H, W]` gives `[D, B, H, W]`.
    pub fn mix_codes(self, probs: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let p = probs.value();
        let (d, nb, one_h, one_w) = a.dims4();
        assert_eq!((one_h, one_w), (1, 1));
        let (n, b, h, w) = p.dims4();
        assert_eq!(nb, n * b, "mix_codes: codes batch {nb} != parts {n} x batch {b}");
        let hw = h * w;
        let mut out = vec![T::zero(); d * b * hw];
        for bi in 0..b {
            // out_b[D, HW] = A_b[D, N] · P_b[N, HW]
            unsafe {
                gemm_raw(
                    d,
                    n,
                    hw,
                    a.data().as_ptr().add(bi),
                    (nb, b),
                    p.data().as_ptr().add(bi * hw),
                    (b * hw, 1),
                    T::zero(),
                    out.as_mut_ptr().add(bi * hw),
                    (b * hw, 1),
                );
            }
        }
        self.tape.custom(&[self, probs], Array::from_vec(&[d, b, h, w], out), move |g, sink| {
            if sink.wants(0) {
                let da = sink.grad(0);
                for bi in 0..b {
                    // dA_b[D, N] += G_b[D, HW] · P_b^T
                    unsafe {
                        gemm_raw(
                            d,
                            hw,
                            n,
                            g.as_ptr().add(bi * hw),
                            (b * hw, 1),
                            p.data().as_ptr().add(bi * hw),
                            (1, b * hw),
                            T::one(),
                            da.as_mut_ptr().add(bi),
                            (nb, b),
                        );
                    }
                }
            }
            if sink.wants(1) {
                let dp = sink.grad(1);
                for bi in 0..b {
                    // dP_b[N, HW] += A_b^T · G_b
                    unsafe {
                        gemm_raw(
                            n,
                            d,
                            hw,
                            a.data().as_ptr().add(bi),
                            (b, nb),
                            g.as_ptr().add(bi * hw),
                            (b * hw, 1),
                            T::one(),
                            dp.as_mut_ptr().add(bi * hw),
                            (b * hw, 1),
                        );
                    }
                }
            }
        })
    }
}

/// Softmax over the channel axis of a `[C, B, H, W]` array, max-subtracted.
pub fn softmax_channels<T: Real>(x: &Array<T>) -> Array<T> {
    let (c, b, h, w) = x.dims4();
    let plane = b * h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for pos in 0..plane {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(xd[ch * plane + pos]);
        }
        let mut z = T::zero();
        for ch in 0..c {
            let e = (xd[ch * plane + pos] - m).exp();
            out[ch * plane + pos] = e;
            z = z + e;
        }
        for ch in 0..c {
            out[ch * plane + pos] = out[ch * plane + pos] / z;
        }
    }
    Array::from_vec(&[c, b, h, w], out)
}
