//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Forward ops evaluate eagerly and append a node; [`Graph::backward`]
//! walks the tape in reverse. Nodes only receive gradients when they
//! depend on a parameter or a tracked input.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    GlobalAvgPool(Var),
    ChannelScale {
        x: Var,
        gate: Var,
    },
    PixelShuffle {
        x: Var,
        factor: usize,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::Silu(_) => "silu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::ChannelScale { .. } => "channel_scale",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::UpsampleNearest { .. } => "upsample_nearest",
        }
    }

    fn primary_input(&self) -> Option<Var> {
        match *self {
            Op::Input | Op::Param => None,
            Op::Conv2d { x, .. }
            | Op::Clamp { x, .. }
            | Op::ChannelScale { x, .. }
            | Op::PixelShuffle { x, .. }
            | Op::UpsampleNearest { x, .. } => Some(x),
            Op::Add(a, _) => Some(a),
            Op::Relu(x) | Op::Silu(x) | Op::Sigmoid(x) | Op::GlobalAvgPool(x) => Some(x),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// One executed layer, as seen by cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCall {
    pub kind: &'static str,
    pub input_shape: [usize; 4],
    pub output_shape: [usize; 4],
    /// Kernel side for convolutions, `None` otherwise.
    pub kernel: Option<usize>,
    pub has_bias: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    marks: BTreeMap<&'static str, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    /// An input whose gradient is wanted (e.g. for gradient checks).
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true)
    }

    /// Loads a parameter once per graph; repeated calls share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param, store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Bumps a named counter; used to instrument block traversal.
    pub fn mark(&mut self, name: &'static str) {
        *self.marks.entry(name).or_default() += 1;
    }

    pub fn mark_count(&self, name: &str) -> usize {
        self.marks.get(name).copied().unwrap_or(0)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            out,
            tracked,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), out, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let tracked = self.tracked(x);
        self.push(Op::Relu(x), out, tracked)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let tracked = self.tracked(x);
        self.push(Op::Silu(x), out, tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let tracked = self.tracked(x);
        self.push(Op::Sigmoid(x), out, tracked)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let tracked = self.tracked(x);
        self.push(Op::Clamp { x, lo, hi }, out, tracked)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = (h * w) as f64;
        let data = t
            .data()
            .chunks_exact(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        let tracked = self.tracked(x);
        self.push(Op::GlobalAvgPool(x), out, tracked)
    }

    /// Multiplies every plane of `x` by the matching scalar in `gate` (N×C×1×1).
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Var {
        let xt = self.value(x);
        let gt = self.value(gate);
        let [n, c, h, w] = xt.shape();
        assert_eq!(gt.shape(), [n, c, 1, 1], "channel_scale: gate shape");
        let mut out = xt.clone();
        for (plane, &g) in out.data_mut().chunks_exact_mut(h * w).zip(gt.data()) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        let tracked = self.tracked(x) || self.tracked(gate);
        self.push(Op::ChannelScale { x, gate }, out, tracked)
    }

    /// Sub-pixel rearrangement: N×(C·r²)×H×W → N×C×(H·r)×(W·r).
    pub fn pixel_shuffle(&mut self, x: Var, factor: usize) -> Var {
        let xt = self.value(x);
        let [n, cr, h, w] = xt.shape();
        let r = factor;
        assert_eq!(cr % (r * r), 0, "pixel_shuffle: channels not divisible by r²");
        let c = cr / (r * r);
        let mut out = Tensor::zeros([n, c, h * r, w * r]);
        for b in 0..n {
            for co in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let ci = co * r * r + i * r + j;
                        for y in 0..h {
                            for xx in 0..w {
                                let v = xt.at(b, ci, y, xx);
                                out.set(b, co, y * r + i, xx * r + j, v);
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(Op::PixelShuffle { x, factor }, out, tracked)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        let r = factor;
        let mut out = Tensor::zeros([n, c, h * r, w * r]);
        let (ho, wo) = (h * r, w * r);
        for (src, dst) in xt
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(ho * wo))
        {
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / r) * w + xx / r];
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(Op::UpsampleNearest { x, factor }, out, tracked)
    }

    /// Every executed non-leaf op, in execution order.
    pub fn layer_trace(&self) -> Vec<LayerCall> {
        self.nodes
            .iter()
            .filter_map(|node| {
                let input = node.op.primary_input()?;
                let (kernel, has_bias) = match node.op {
                    Op::Conv2d { w, b, .. } => (Some(self.value(w).h()), b.is_some()),
                    _ => (None, false),
                };
                Some(LayerCall {
                    kind: node.op.kind(),
                    input_shape: self.value(input).shape(),
                    output_shape: node.value.shape(),
                    kernel,
                    has_bias,
                })
            })
            .collect()
    }

    /// Reverse-mode sweep from the given output gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "seed gradient {:?} for value {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads, v, g);
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = conv2d_backward(
                        self.value(x),
                        self.value(w),
                        &gout,
                        stride,
                        pad,
                        self.tracked(x),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads, x, gx);
                    }
                    if self.tracked(w) {
                        accumulate(&mut grads, w, gw);
                    }
                    if let Some(b) = b {
                        if self.tracked(b) {
                            accumulate(&mut grads, b, gb);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(a) && self.tracked(b) {
                        accumulate(&mut grads, a, gout.clone());
                        accumulate(&mut grads, b, gout);
                    } else if self.tracked(a) {
                        accumulate(&mut grads, a, gout);
                    } else if self.tracked(b) {
                        accumulate(&mut grads, b, gout);
                    }
                }
                Op::Relu(x) => {
                    let mut g = gout;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(x).data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::Silu(x) => {
                    let mut g = gout;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(x).data()) {
                        let s = sigmoid(xv);
                        *gv *= s * (1.0 + xv * (1.0 - s));
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = gout;
                    for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut g = gout;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(self.value(x).data()) {
                        if xv < lo || xv > hi {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(x).shape();
                    let hw = shape[2] * shape[3];
                    let mut g = Tensor::zeros(shape);
                    for (plane, &gv) in g.data_mut().chunks_exact_mut(hw).zip(gout.data()) {
                        plane.fill(gv / hw as f64);
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::ChannelScale { x, gate } => {
                    let xt = self.value(x);
                    let gt = self.value(gate);
                    let hw = xt.h() * xt.w();
                    if self.tracked(x) {
                        let mut gx = gout.clone();
                        for (plane, &s) in gx.data_mut().chunks_exact_mut(hw).zip(gt.data()) {
                            plane.iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads, x, gx);
                    }
                    if self.tracked(gate) {
                        let data = gout
                            .data()
                            .chunks_exact(hw)
                            .zip(xt.data().chunks_exact(hw))
                            .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads, gate, Tensor::from_vec(gt.shape(), data)?);
                    }
                }
                Op::PixelShuffle { x, factor } => {
                    let r = factor;
                    let shape = self.value(x).shape();
                    let [n, _, h, w] = shape;
                    let c = gout.c();
                    let mut g = Tensor::zeros(shape);
                    for b in 0..n {
                        for co in 0..c {
                            for i in 0..r {
                                for j in 0..r {
                                    let ci = co * r * r + i * r + j;
                                    for y in 0..h {
                                        for xx in 0..w {
                                            let v = gout.at(b, co, y * r + i, xx * r + j);
                                            g.set(b, ci, y, xx, v);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, g);
                }
                Op::UpsampleNearest { x, factor } => {
                    let r = factor;
                    let shape = self.value(x).shape();
                    let [_, _, h, w] = shape;
                    let (ho, wo) = (h * r, w * r);
                    let mut g = Tensor::zeros(shape);
                    for (dst, src) in g
                        .data_mut()
                        .chunks_exact_mut(h * w)
                        .zip(gout.data().chunks_exact(ho * wo))
                    {
                        for y in 0..ho {
                            for xx in 0..wo {
                                dst[(y / r) * w + xx / r] += src[y * wo + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, x, g);
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<BTreeMap<_, _>>();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients left on leaf nodes after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Row-major C[m×n] = A·B + beta·C with arbitrary A/B strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above describe the extents the kernel reads and
    // writes; every caller passes slices sized from the same m/k/n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    assert_eq!(cin, wcin, "conv2d: input channels {cin} vs weight {wcin}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let (ho, wo) = (out_dim(h, k, stride, pad), out_dim(wd, k, stride, pad));
    let ckk = cin * k * k;
    let hw_out = ho * wo;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let mut cols = vec![0.0; if is_pointwise(k, stride, pad) { 0 } else { ckk * hw_out }];
    for s in 0..n {
        let xs = x.sample(s);
        let cols_ref: &[f64] = if is_pointwise(k, stride, pad) {
            xs
        } else {
            im2col(xs, (cin, h, wd), k, stride, pad, (ho, wo), &mut cols);
            &cols
        };
        let os = out.sample_mut(s);
        if let Some(b) = b {
            for (plane, &bv) in os.chunks_exact_mut(hw_out).zip(b.data()) {
                plane.fill(bv);
            }
        }
        gemm(
            cout,
            ckk,
            hw_out,
            w.data(),
            (ckk, 1),
            cols_ref,
            (hw_out, 1),
            if b.is_some() { 1.0 } else { 0.0 },
            os,
        );
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let (ho, wo) = (gout.h(), gout.w());
    let ckk = cin * k * k;
    let hw_out = ho * wo;
    let pointwise = is_pointwise(k, stride, pad);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros([1, cout, 1, 1]);
    let mut gx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; if pointwise { 0 } else { ckk * hw_out }];
    let mut dcols = vec![0.0; if want_dx && !pointwise { ckk * hw_out } else { 0 }];
    for s in 0..n {
        let go = gout.sample(s);
        for (acc, plane) in gb.data_mut().iter_mut().zip(go.chunks_exact(hw_out)) {
            *acc += plane.iter().sum::<f64>();
        }
        let xs = x.sample(s);
        let cols_ref: &[f64] = if pointwise {
            xs
        } else {
            im2col(xs, (cin, h, wd), k, stride, pad, (ho, wo), &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        gemm(
            cout,
            hw_out,
            ckk,
            go,
            (hw_out, 1),
            cols_ref,
            (1, hw_out),
            1.0,
            gw.data_mut(),
        );
        if let Some(gx) = gx.as_mut() {
            let dst = gx.sample_mut(s);
            if pointwise {
                gemm(cin, cout, hw_out, w.data(), (1, ckk), go, (hw_out, 1), 1.0, dst);
            } else {
                gemm(
                    ckk,
                    cout,
                    hw_out,
                    w.data(),
                    (1, ckk),
                    go,
                    (hw_out, 1),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, (cin, h, wd), k, stride, pad, (ho, wo), dst);
            }
        }
    }
    (gx, gw, gb)
}
