//! Reverse-mode automatic differentiation over a recorded op list.
//!
//! A [`Graph`] owns every value produced during a forward pass. Ops are
//! appended in execution order, so the record list is topologically sorted by
//! construction and [`Graph::backward`] only has to walk it once in reverse.

use crate::disparity::DisparityMap;
use crate::error::{ensure, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the adjoint convolution (from this op's output to its input).
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Concat {
        xs: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    HSlicePad {
        x: Var,
        d: isize,
    },
    /// Per output element, the flat source index (usize::MAX = zero fill).
    Gather {
        x: Var,
        src: Vec<usize>,
    },
    Correlation1d {
        l: Var,
        r: Var,
        maxdisp: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Elementwise product with a constant tensor (stored as f64).
    MulConst {
        a: Var,
        c: Vec<f64>,
    },
    Scale {
        a: Var,
        s: f64,
    },
    AddConst {
        a: Var,
    },
    SmoothL1 {
        a: Var,
    },
    Abs {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SumSquares {
        a: Var,
    },
    MaskedMean {
        a: Var,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Not shareable across concurrent training steps.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are kept for it when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a gradient-tracked leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation with zero padding. `w` is `[out_c, in_c, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [co, ci, kh, kw] = ws.0;
        ensure!(
            xs.c() == ci,
            "conv2d: input channels {} != weight in-channels {ci}",
            xs.c()
        );
        ensure!(
            kh % 2 == 1 && kw % 2 == 1,
            "conv2d: kernel {kh}x{kw} must have odd extents"
        );
        if let Some(b) = b {
            ensure!(
                self.shape(b).numel() == co,
                "conv2d: bias length {} != out-channels {co}",
                self.shape(b).numel()
            );
        }
        let geom = ConvGeom::new(ci, xs.h(), xs.w(), co, kh, kw, stride, pad).ok_or_else(|| {
            Error::contract(format!(
                "conv2d: empty output for input {xs} kernel {kh}x{kw} stride {stride} pad {pad}"
            ))
        })?;
        let n = xs.n();
        let mut out = vec![T::zero(); n * geom.out_len()];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let bd = b.map(|b| self.data(b));
            for i in 0..n {
                kernels::conv_forward(
                    &geom,
                    &xd[i * geom.in_len()..(i + 1) * geom.in_len()],
                    wd,
                    bd,
                    &mut out[i * geom.out_len()..(i + 1) * geom.out_len()],
                );
            }
        }
        let t = Tensor::from_vec(Shape::new(n, co, geom.ho, geom.wo), out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.tracked(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution, the adjoint of a strided `conv2d`.
    /// `w` is `[in_c, out_c, kh, kw]`, the same tensor the matching
    /// convolution would use to map `out_c` channels back to `in_c`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [ci_t, co_t, kh, kw] = ws.0;
        ensure!(
            xs.c() == ci_t,
            "conv_transpose2d: input channels {} != weight in-channels {ci_t}",
            xs.c()
        );
        ensure!(
            xs.h() >= 1 && xs.w() >= 1,
            "conv_transpose2d: empty input {xs}"
        );
        let ho = (xs.h() - 1) * stride + kh;
        let wo = (xs.w() - 1) * stride + kw;
        ensure!(
            stride >= 1 && ho > 2 * pad && wo > 2 * pad,
            "conv_transpose2d: non-positive output extent for input {xs}"
        );
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
        if let Some(b) = b {
            ensure!(
                self.shape(b).numel() == co_t,
                "conv_transpose2d: bias length {} != out-channels {co_t}",
                self.shape(b).numel()
            );
        }
        let geom = ConvGeom::new(co_t, ho, wo, ci_t, kh, kw, stride, pad)
            .filter(|g| g.ho == xs.h() && g.wo == xs.w())
            .ok_or_else(|| {
                Error::contract(format!("conv_transpose2d: inconsistent geometry for {xs}"))
            })?;
        let n = xs.n();
        let mut out = vec![T::zero(); n * geom.in_len()];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            for i in 0..n {
                kernels::conv_backward_data(
                    &geom,
                    &xd[i * geom.out_len()..(i + 1) * geom.out_len()],
                    wd,
                    &mut out[i * geom.in_len()..(i + 1) * geom.in_len()],
                );
            }
            if let Some(b) = b {
                let bd = self.data(b);
                let plane = ho * wo;
                for i in 0..n {
                    for (c, &bias) in bd.iter().enumerate() {
                        let off = (i * co_t + c) * plane;
                        for v in &mut out[off..off + plane] {
                            *v = *v + bias;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(Shape::new(n, co_t, ho, wo), out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.tracked(&deps);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, ng))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first maximum in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        ensure!(
            h % 2 == 0 && w % 2 == 0,
            "maxpool2: extents {h}x{w} must be even"
        );
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::from_vec(Shape::new(n, c, ho, wo), out)?;
        let ng = self.tracked(&[x]);
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * s })
            .collect();
        let t = Tensor::from_vec(self.shape(x), data).expect("same shape");
        let ng = self.tracked(&[x]);
        self.push(t, Op::LeakyRelu { x, slope }, ng)
    }

    /// Channel-wise concatenation, order preserved.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat_channels: no inputs");
        let s0 = self.shape(xs[0]);
        let mut total = 0;
        for (i, &v) in xs.iter().enumerate() {
            let s = self.shape(v);
            ensure!(
                s.n() == s0.n() && s.h() == s0.h() && s.w() == s0.w(),
                "concat_channels: input {i} has shape {s}, expected N,H,W of {s0}"
            );
            total += s.c();
        }
        let (n, plane) = (s0.n(), s0.plane());
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v).c();
                data.extend_from_slice(&self.data(v)[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let t = Tensor::from_vec(Shape::new(n, total, s0.h(), s0.w()), data)?;
        let ng = self.tracked(xs);
        Ok(self.push(t, Op::Concat { xs: xs.to_vec() }, ng))
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).narrow_channels(start, len)?;
        let ng = self.tracked(&[x]);
        Ok(self.push(t, Op::Narrow { x, start }, ng))
    }

    /// Horizontal slice with zero padding: `out[.., x] = in[.., x + d]`,
    /// zero where `x + d` falls outside `[0, W)`.
    pub fn hslice_pad(&mut self, x: Var, d: isize) -> Result<Var> {
        let s = self.shape(x);
        let w = s.w();
        ensure!(
            d.unsigned_abs() < w,
            "hslice_pad: |displacement| {} must be < width {w}",
            d.unsigned_abs()
        );
        let xd = self.data(x);
        let mut out = vec![T::zero(); s.numel()];
        for (src, dst) in xd.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            if d >= 0 {
                let d = d as usize;
                dst[..w - d].copy_from_slice(&src[d..]);
            } else {
                let d = d.unsigned_abs();
                dst[d..].copy_from_slice(&src[..w - d]);
            }
        }
        let t = Tensor::from_vec(s, out)?;
        let ng = self.tracked(&[x]);
        Ok(self.push(t, Op::HSlicePad { x, d }, ng))
    }

    /// Nearest-neighbour horizontal gather:
    /// `out[n, c, y, x] = in[n, c, y, x - round(disp[y, x])]`, zero when out of
    /// range. `disps` holds one map for every batch item, or a single map
    /// shared by all of them. Rounding is half away from zero. Differentiable
    /// with respect to `x` only.
    pub fn warp_horizontal(&mut self, x: Var, disps: &[&DisparityMap]) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = s.0;
        ensure!(
            disps.len() == 1 || disps.len() == n,
            "warp_horizontal: {} disparity maps for batch of {n}",
            disps.len()
        );
        for d in disps {
            ensure!(
                d.height == h && d.width == w,
                "warp_horizontal: disparity {}x{} does not match source {h}x{w}",
                d.height,
                d.width
            );
        }
        let mut src = Vec::with_capacity(s.numel());
        for b in 0..n {
            let disp = disps[if disps.len() == 1 { 0 } else { b }];
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let dv = disp.at(y, xx);
                        let sx = if dv.is_finite() {
                            xx as i64 - dv.round() as i64
                        } else {
                            -1
                        };
                        src.push(if sx >= 0 && sx < w as i64 {
                            base + y * w + sx as usize
                        } else {
                            usize::MAX
                        });
                    }
                }
            }
        }
        let xd = self.data(x);
        let out = src
            .iter()
            .map(|&i| if i == usize::MAX { T::zero() } else { xd[i] })
            .collect();
        let t = Tensor::from_vec(s, out)?;
        let ng = self.tracked(&[x]);
        Ok(self.push(t, Op::Gather { x, src }, ng))
    }

    /// 1-D correlation: channel `d` at `x` is the channel mean of
    /// `left[.., x] * right[.., x - d]` for `d` in `0..=maxdisp`.
    pub fn correlation_1d(&mut self, l: Var, r: Var, maxdisp: usize) -> Result<Var> {
        let s = self.shape(l);
        ensure!(
            s == self.shape(r),
            "correlation_1d: left {s} and right {} differ",
            self.shape(r)
        );
        let [n, c, h, w] = s.0;
        ensure!(
            maxdisp < w,
            "correlation_1d: maxdisp {maxdisp} must be < width {w}"
        );
        let nd = maxdisp + 1;
        let inv_c = T::one() / T::of(c as f64);
        let (ld, rd) = (self.data(l), self.data(r));
        let mut out = vec![T::zero(); n * nd * h * w];
        for b in 0..n {
            for d in 0..nd {
                let o = &mut out[(b * nd + d) * h * w..(b * nd + d + 1) * h * w];
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for y in 0..h {
                        let lrow = &ld[base + y * w..base + (y + 1) * w];
                        let rrow = &rd[base + y * w..base + (y + 1) * w];
                        let orow = &mut o[y * w..(y + 1) * w];
                        for x in d..w {
                            orow[x] = orow[x] + lrow[x] * rrow[x - d];
                        }
                    }
                }
                for v in o.iter_mut() {
                    *v = *v * inv_c;
                }
            }
        }
        let t = Tensor::from_vec(Shape::new(n, nd, h, w), out)?;
        let ng = self.tracked(&[l, r]);
        Ok(self.push(t, Op::Correlation1d { l, r, maxdisp }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa == sb, "{op}: shapes {sa} and {sb} differ");
        Ok(sa)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("same shape");
        let ng = self.tracked(&[a, b]);
        self.push(t, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(self.shape(a), data).expect("same shape");
        let ng = self.tracked(&[a]);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let s = self.shape(a);
        ensure!(
            s == c.shape(),
            "mul_const: shapes {s} and {} differ",
            c.shape()
        );
        let data = self
            .data(a)
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(s, data)?;
        let ng = self.tracked(&[a]);
        let c = c.data().iter().map(|v| v.as_f64()).collect();
        Ok(self.push(t, Op::MulConst { a, c }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::of(s);
        self.map(a, |x| x * k, Op::Scale { a, s })
    }

    /// `a + c` with `c` a constant of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let s = self.shape(a);
        ensure!(
            s == c.shape(),
            "add_const: shapes {s} and {} differ",
            c.shape()
        );
        let data = self
            .data(a)
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(s, data)?;
        let ng = self.tracked(&[a]);
        Ok(self.push(t, Op::AddConst { a }, ng))
    }

    /// Elementwise `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.map(a, smooth_l1_value, Op::SmoothL1 { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.tracked(&[a]);
        self.push(t, Op::Sum { a }, ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x * x);
        let ng = self.tracked(&[a]);
        self.push(Tensor::scalar(v), Op::SumSquares { a }, ng)
    }

    /// Mean over the elements where `mask` is true.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(a);
        ensure!(
            mask.len() == s.numel(),
            "masked_mean: mask has {} entries for {s}",
            mask.len()
        );
        let count = mask.iter().filter(|&&m| m).count();
        ensure!(count > 0, "masked_mean: no valid elements");
        let total = self
            .data(a)
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold(T::zero(), |acc, (&x, _)| acc + x);
        let t = Tensor::scalar(total / T::of(count as f64));
        let ng = self.tracked(&[a]);
        Ok(self.push(
            t,
            Op::MaskedMean {
                a,
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar. Every tracked leaf ends up holding
    /// `d(loss)/d(leaf)` in its tensor's `grad`; gradients from fan-out add.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.shape(loss).numel() == 1,
            "backward: loss must be a scalar, got {}",
            self.shape(loss)
        );
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.backward_op(id, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[id];
                if node.value.requires_grad {
                    node.value.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = out_shape.n();
                let (il, ol) = (geom.in_len(), geom.out_len());
                if self.nodes[x.0].needs_grad {
                    let wd = self.data(*w);
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..n {
                        kernels::conv_backward_data(
                            geom,
                            &g[i * ol..(i + 1) * ol],
                            wd,
                            &mut gx[i * il..(i + 1) * il],
                        );
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let xd = self.data(*x);
                    let gw = self.grad_buf(grads, *w);
                    for i in 0..n {
                        kernels::conv_backward_weight(
                            geom,
                            &xd[i * il..(i + 1) * il],
                            &g[i * ol..(i + 1) * ol],
                            gw,
                        );
                    }
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let plane = geom.ho * geom.wo;
                        let gb = self.grad_buf(grads, *b);
                        bias_grad(g, n, geom.co, plane, gb);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // forward was conv_backward_data(x) into a (co_t, ho, wo) map
                let n = out_shape.n();
                let (il, ol) = (geom.in_len(), geom.out_len());
                if self.nodes[x.0].needs_grad {
                    let wd = self.data(*w);
                    let gx = self.grad_buf(grads, *x);
                    let mut tmp = vec![T::zero(); ol];
                    for i in 0..n {
                        kernels::conv_forward(geom, &g[i * il..(i + 1) * il], wd, None, &mut tmp);
                        for (a, &v) in gx[i * ol..(i + 1) * ol].iter_mut().zip(&tmp) {
                            *a = *a + v;
                        }
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let xd = self.data(*x);
                    let gw = self.grad_buf(grads, *w);
                    for i in 0..n {
                        kernels::conv_backward_weight(
                            geom,
                            &g[i * il..(i + 1) * il],
                            &xd[i * ol..(i + 1) * ol],
                            gw,
                        );
                    }
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let gb = self.grad_buf(grads, *b);
                        bias_grad(g, n, out_shape.c(), out_shape.plane(), gb);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = self.grad_buf(grads, *x);
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + gv;
                }
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::of(*slope);
                let xd = self.data(*x);
                let gx = self.grad_buf(grads, *x);
                for ((a, &xv), &gv) in gx.iter_mut().zip(xd).zip(g) {
                    *a = *a + if xv >= T::zero() { gv } else { gv * s };
                }
            }
            Op::Concat { xs } => {
                let (n, plane) = (out_shape.n(), out_shape.plane());
                let total = out_shape.c();
                let mut c0 = 0;
                for &v in xs {
                    let c = self.shape(v).c();
                    if self.nodes[v.0].needs_grad {
                        let gv = self.grad_buf(grads, v);
                        for b in 0..n {
                            let src = &g[(b * total + c0) * plane..(b * total + c0 + c) * plane];
                            for (a, &s) in gv[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src)
                            {
                                *a = *a + s;
                            }
                        }
                    }
                    c0 += c;
                }
            }
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let (n, plane, len) = (xs.n(), xs.plane(), out_shape.c());
                let gx = self.grad_buf(grads, *x);
                for b in 0..n {
                    let dst = &mut gx[(b * xs.c() + start) * plane..(b * xs.c() + start + len) * plane];
                    for (a, &s) in dst.iter_mut().zip(&g[b * len * plane..(b + 1) * len * plane]) {
                        *a = *a + s;
                    }
                }
            }
            Op::HSlicePad { x, d } => {
                let w = out_shape.w();
                let gx = self.grad_buf(grads, *x);
                for (dst, src) in gx.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                    if *d >= 0 {
                        let d = *d as usize;
                        for (a, &s) in dst[d..].iter_mut().zip(&src[..w - d]) {
                            *a = *a + s;
                        }
                    } else {
                        let d = d.unsigned_abs();
                        for (a, &s) in dst[..w - d].iter_mut().zip(&src[d..]) {
                            *a = *a + s;
                        }
                    }
                }
            }
            Op::Gather { x, src } => {
                let gx = self.grad_buf(grads, *x);
                for (&i, &gv) in src.iter().zip(g) {
                    if i != usize::MAX {
                        gx[i] = gx[i] + gv;
                    }
                }
            }
            Op::Correlation1d { l, r, maxdisp } => {
                let s = self.shape(*l);
                let [n, c, h, w] = s.0;
                let nd = maxdisp + 1;
                let inv_c = T::one() / T::of(c as f64);
                let (ld, rd) = (self.data(*l), self.data(*r));
                if self.nodes[l.0].needs_grad {
                    let gl = self.grad_buf(grads, *l);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            for d in 0..nd {
                                let go = &g[(b * nd + d) * h * w..];
                                for y in 0..h {
                                    for x in d..w {
                                        let i = base + y * w + x;
                                        gl[i] = gl[i] + go[y * w + x] * rd[i - d] * inv_c;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[r.0].needs_grad {
                    let gr = self.grad_buf(grads, *r);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            for d in 0..nd {
                                let go = &g[(b * nd + d) * h * w..];
                                for y in 0..h {
                                    for x in d..w {
                                        let i = base + y * w + x;
                                        gr[i - d] = gr[i - d] + go[y * w + x] * ld[i] * inv_c;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.nodes[v.0].needs_grad {
                        add_into(self.grad_buf(grads, v), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].needs_grad {
                    add_into(self.grad_buf(grads, *a), g);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_buf(grads, *b);
                    for (x, &v) in gb.iter_mut().zip(g) {
                        *x = *x - v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = self.grad_buf(grads, *a);
                    for ((x, &v), &o) in ga.iter_mut().zip(g).zip(bd) {
                        *x = *x + v * o;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_buf(grads, *b);
                    for ((x, &v), &o) in gb.iter_mut().zip(g).zip(ad) {
                        *x = *x + v * o;
                    }
                }
            }
            Op::MulConst { a, c } => {
                let ga = self.grad_buf(grads, *a);
                for ((x, &v), &k) in ga.iter_mut().zip(g).zip(c) {
                    *x = *x + v * T::of(k);
                }
            }
            Op::Scale { a, s } => {
                let k = T::of(*s);
                let ga = self.grad_buf(grads, *a);
                for (x, &v) in ga.iter_mut().zip(g) {
                    *x = *x + v * k;
                }
            }
            Op::AddConst { a } => add_into(self.grad_buf(grads, *a), g),
            Op::SmoothL1 { a } => {
                let ad = self.data(*a);
                let ga = self.grad_buf(grads, *a);
                for ((x, &v), &xv) in ga.iter_mut().zip(g).zip(ad) {
                    let d = if xv.abs() < T::one() { xv } else { xv.signum() };
                    *x = *x + v * d;
                }
            }
            Op::Abs { a } => {
                let ad = self.data(*a);
                let ga = self.grad_buf(grads, *a);
                for ((x, &v), &xv) in ga.iter_mut().zip(g).zip(ad) {
                    let d = if xv > T::zero() {
                        T::one()
                    } else if xv < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *x = *x + v * d;
                }
            }
            Op::Sum { a } => {
                let ga = self.grad_buf(grads, *a);
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }
            Op::SumSquares { a } => {
                let ad = self.data(*a);
                let two = T::of(2.0);
                let ga = self.grad_buf(grads, *a);
                for (x, &xv) in ga.iter_mut().zip(ad) {
                    *x = *x + two * xv * g[0];
                }
            }
            Op::MaskedMean { a, mask, count } => {
                let k = g[0] / T::of(*count as f64);
                let ga = self.grad_buf(grads, *a);
                for (x, &m) in ga.iter_mut().zip(mask) {
                    if m {
                        *x = *x + k;
                    }
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut Vec<T> {
        let n = self.nodes[v.0].value.shape().numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

pub(crate) fn smooth_l1_value<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::of(0.5) * x * x
    } else {
        a - T::of(0.5)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn bias_grad<T: Scalar>(g: &[T], n: usize, c: usize, plane: usize, gb: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let s = g[off..off + plane].iter().fold(T::zero(), |a, &v| a + v);
            gb[ch] = gb[ch] + s;
        }
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a kink lies within the stencil.
    pub excluded: usize,
}

/// Compares the analytic gradient of `f` at `point` against central
/// differences `(f(x+h) - f(x-h)) / 2h`.
///
/// Relative error per coordinate is `|a - b| / max(|a|, |b|, floor)` where
/// `floor` is `1e-3` times the largest analytic component (at least 1e-8).
/// Components far below the gradient's own scale are dominated by
/// cancellation in `f(x+h) - f(x-h)`, so they are not judged on their own
/// magnitude. When
/// `coords` is given only those flat indices are perturbed; otherwise every
/// element is.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_impl(f, point, step, coords, false)
}

/// [`grad_check`] that skips coordinates whose difference stencil straddles
/// a non-differentiable point (leaky-relu and abs at 0, max-pool ties,
/// smooth-L1 at |x| = 1).
///
/// A coordinate is treated as smooth when the central differences at `h`
/// and `h/2` agree and the one-sided slopes converge as the step halves;
/// both fail near a slope discontinuity.
pub fn grad_check_smooth<F>(f: F, point: &Tensor<f64>, step: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_impl(f, point, step, coords, true)
}

fn check_impl<F>(f: F, point: &Tensor<f64>, step: f64, coords: Option<&[usize]>, skip_kinks: bool) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let f0 = g.value(y).data()[0];
    let analytic = g
        .grad(x)
        .map(|v| v.to_vec())
        .unwrap_or_else(|| vec![0.0; point.shape().numel()]);

    let eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut p = point.clone();
        p.data_mut()[i] += delta;
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };

    let all: Vec<usize>;
    let idx = match coords {
        Some(c) => c,
        None => {
            all = (0..point.shape().numel()).collect();
            &all
        }
    };
    let floor = (1e-3 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-8);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: idx.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        excluded: 0,
    };
    for &i in idx {
        let (plus, minus) = (eval_at(i, step)?, eval_at(i, -step)?);
        let numeric = (plus - minus) / (2.0 * step);
        if skip_kinks {
            let (hp, hm) = (eval_at(i, step / 2.0)?, eval_at(i, -step / 2.0)?);
            let half = (hp - hm) / step;
            let scale = numeric.abs().max(1.0);
            // one-sided slope gaps: shrink by half for smooth f, stay put at a kink
            let gap = ((plus - f0) - (f0 - minus)) / step;
            let gap_half = ((hp - f0) - (f0 - hm)) / (step / 2.0);
            let kink = (numeric - half).abs() > 1e-6 * scale
                || (gap.abs() > 1e-6 * scale && gap_half.abs() > 0.75 * gap.abs());
            if kink {
                report.excluded += 1;
                continue;
            }
        }
        report.checked += 1;
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if report.checked == 1 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape(shape), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_counts_overlap() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = g.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.leaf(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels 2"), "{err}");
        let w2 = g.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(g.conv2d(x, w2, None, 1, 0).is_err());
    }

    #[test]
    fn transposed_conv_doubles_extents() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let w = g.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 0.5));
        let b = g.leaf(Tensor::full(Shape::new(1, 1, 1, 1), 0.25));
        let y = g.conv_transpose2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 4, 4));
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_values_and_tie_routing() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 2, 2], &[5.0, 5.0, 0.0, 0.0]));
        let y = g.maxpool2(x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 3, 2)));
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn maxpool_constant_input() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(Shape::new(2, 3, 4, 6), 1.5));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 3, 2, 3));
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn leaky_relu_values_and_slopes() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 4], &[2.0, -2.0, -3.0, 0.0]));
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[2.0, -0.2, -0.30000000000000004, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.1, 0.1, 1.0]);
    }

    #[test]
    fn concat_shapes_and_single_input() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::full(Shape::new(2, 3, 4, 5), 1.0));
        let b = g.leaf(Tensor::full(Shape::new(2, 5, 4, 5), 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(2, 8, 4, 5));
        let one = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(one).data(), g.value(a).data());
        let bad = g.leaf(Tensor::zeros(Shape::new(2, 1, 4, 6)));
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn hslice_pad_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g.hslice_pad(x, 1).unwrap();
        let r = g.hslice_pad(x, -1).unwrap();
        let z = g.hslice_pad(x, 0).unwrap();
        assert_eq!(g.value(l).data(), &[2.0, 3.0, 4.0, 0.0]);
        assert_eq!(g.value(r).data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(g.hslice_pad(x, 4).is_err());
        assert!(g.hslice_pad(x, -4).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 3], &[0.3, -1.0, 7.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x) + sum(3x) -> dy/dx = 4
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 2], &[1.0, -2.0]));
        let a = g.sum(x);
        let x3 = g.scale(x, 3.0);
        let b = g.sum(x3);
        let y = g.add(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn untracked_leaves_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 2], &[1.0, 2.0]));
        let c = g.constant(t([1, 1, 1, 2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::<f64>::uniform(Shape::new(1, 2, 3, 3), -2.0, 2.0, &mut rng);
        let r = grad_check(
            |g, x| {
                let s = g.sum_squares(x);
                Ok(s)
            },
            &p,
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn masked_mean_rejects_empty_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t([1, 1, 1, 2], &[1.0, 2.0]));
        assert!(g.masked_mean(x, &[false, false]).is_err());
        let m = g.masked_mean(x, &[false, true]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
    }
}
