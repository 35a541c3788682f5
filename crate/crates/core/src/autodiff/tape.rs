use super::kernels::{self, ConvGeom};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Smoothing constant in the multi-class Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Probabilities below this are clamped before the log in the pixel NLL.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    ChannelSoftmax(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    AdaptiveAvgPool(Var),
    Bilinear(Var),
    ConcatChannels(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        a: f64,
    },
    ChannelScale {
        x: Var,
        g: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Dice {
        probs: Var,
        labels: Vec<usize>,
    },
    PixelNll {
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations for one forward/backward run.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{what}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

/// Logistic function, clamped to the open unit interval even where f64
/// rounding would saturate.
fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn check_labels(labels: &[usize], classes: usize, expected: usize) -> Result<()> {
    if labels.len() != expected {
        bail!(Dimension, "expected {expected} labels, got {}", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        bail!(Input, "label {bad} out of range for {classes} classes");
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            bail!(NonFinite, "op produced NaN or infinity (shape {:?})", value.shape());
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- ops -------------------------------------------------------------

    /// Cross-correlation of `input [B,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if self.value(bias).shape() != [cout] {
            bail!(Dimension, "conv bias shape {:?} != [{cout}]", self.value(bias).shape());
        }
        if wcin != cin {
            bail!(Dimension, "conv weight expects {wcin} input channels, got {cin}");
        }
        if kh == 0 || kw == 0 || stride == 0 {
            bail!(Config, "conv kernel and stride must be positive");
        }
        let out_dim = |len: usize, k: usize| -> Result<usize> {
            let span = len + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                bail!(
                    Config,
                    "conv output size ({len} + 2*{padding} - {k})/{stride} + 1 is not a positive integer"
                );
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh: out_dim(h, kh)?,
            ow: out_dim(w, kw)?,
        };
        let k = geom.col_rows();
        let p = geom.col_cols();
        let keep_cols = self.requires_grad(weight) && !geom.is_pointwise();
        let mut cols_all = if keep_cols { vec![0.0; b * k * p] } else { Vec::new() };
        let mut scratch = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        let mut out = vec![0.0; b * cout * p];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bs = self.value(bias).data();
        for bi in 0..b {
            let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
            let cols: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                let dst = if keep_cols {
                    &mut cols_all[bi * k * p..(bi + 1) * k * p]
                } else {
                    &mut scratch[..]
                };
                kernels::im2col(xb, &geom, dst);
                dst
            };
            let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bs[co]);
            }
            kernels::gemm(cout, k, p, wt, false, cols, false, 1.0, ob);
        }
        let value = Tensor::new(vec![b, cout, geom.oh, geom.ow], out)?;
        self.push(
            value,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: keep_cols.then_some(cols_all),
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())?;
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect())?;
        self.push(out, &[x], Op::Sigmoid(x))
    }

    /// Row-wise softmax of 2-D logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (_, k) = v.dims2()?;
        let mut out = v.clone();
        out.data_mut().chunks_mut(k).for_each(softmax_in_place);
        self.push(out, &[x], Op::Softmax(x))
    }

    /// Softmax over the channel axis of a 4-D tensor, independently per pixel.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (b, c, h, w) = v.dims4()?;
        let hw = h * w;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; c];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                for ci in 0..c {
                    buf[ci] = src[base + ci * hw + p];
                }
                softmax_in_place(&mut buf);
                for ci in 0..c {
                    out[base + ci * hw + p] = buf[ci];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        self.push(out, &[x], Op::ChannelSoftmax(x))
    }

    /// Max pooling; ties resolve to the first position in row-major order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let v = self.value(x);
        let (b, c, h, w) = v.dims4()?;
        if k == 0 || stride == 0 || h < k || w < k {
            bail!(Config, "max_pool2d window {k} stride {stride} invalid for {h}x{w}");
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let src = v.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push(out, &[x], Op::MaxPool { input: x, argmax })
    }

    /// Spatial mean: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (b, c, h, w) = v.dims4()?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = v.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let out = Tensor::new(vec![b, c], out)?;
        self.push(out, &[x], Op::GlobalAvgPool(x))
    }

    /// Averages over a contiguous floor/ceil partition of each spatial axis.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = self.value(x);
        let (b, c, h, w) = v.dims4()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            bail!(Config, "adaptive pool to {out_h}x{out_w} invalid for {h}x{w} input");
        }
        let by = kernels::adaptive_bins(h, out_h);
        let bx = kernels::adaptive_bins(w, out_w);
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in v.data().chunks(h * w) {
            for &(y0, y1) in &by {
                for &(x0, x1) in &bx {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let out = Tensor::new(vec![b, c, out_h, out_w], out)?;
        self.push(out, &[x], Op::AdaptiveAvgPool(x))
    }

    /// Bilinear upsampling (align-corners=false, clamped source coordinates).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = self.value(x);
        let (b, c, h, w) = v.dims4()?;
        if out_h < h || out_w < w {
            bail!(Config, "bilinear upsample target {out_h}x{out_w} smaller than {h}x{w}");
        }
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in v.data().chunks(h * w) {
            out.extend(kernels::bilinear_plane(plane, h, w, out_h, out_w));
        }
        let out = Tensor::new(vec![b, c, out_h, out_w], out)?;
        self.push(out, &[x], Op::Bilinear(x))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                bail!(Dimension, "concat: {:?} incompatible with batch {b} and {h}x{w}", self.value(p).shape());
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let out = Tensor::new(vec![b, total_c, h, w], out)?;
        self.push(out, parts, Op::ConcatChannels(parts.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, &[a, b], Op::Add(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, &[a, b], Op::Mul(a, b))
    }

    /// `x * s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            bail!(Dimension, "scale_by needs a scalar, got {:?}", self.value(s).shape());
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * sv).collect())?;
        self.push(out, &[x, s], Op::ScaleBy { x, s })
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|t| a * t + b).collect())?;
        self.push(out, &[x], Op::Affine { x, a })
    }

    /// Scales each `[H,W]` plane of `x [B,C,H,W]` by `g [B,C]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(g).shape() != [b, c] {
            bail!(Dimension, "channel_scale gate {:?} != [{b}, {c}]", self.value(g).shape());
        }
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for (plane, &s) in out.chunks_mut(h * w).zip(gv) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        self.push(out, &[x, g], Op::ChannelScale { x, g })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// Batch-mean of `-log softmax(logits)[label]`, max-subtracted.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        check_labels(labels, k, b)?;
        let mut total = 0.0;
        for (row, &l) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        self.push(
            Tensor::scalar(total / b as f64),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// `1 - mean_c (2 Σ p·t + ε) / (Σ p + Σ t + ε)` with sums over batch and
    /// pixels; `labels` holds one class per `(b, y, x)` in row-major order.
    pub fn dice_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (b, c, h, w) = self.value(probs).dims4()?;
        check_labels(labels, c, b * h * w)?;
        let (inter, psum, tsum) = dice_sums(self.value(probs).data(), labels, b, c, h * w);
        let mean_dice = (0..c)
            .map(|ci| (2.0 * inter[ci] + DICE_SMOOTH) / (psum[ci] + tsum[ci] + DICE_SMOOTH))
            .sum::<f64>()
            / c as f64;
        self.push(
            Tensor::scalar(1.0 - mean_dice),
            &[probs],
            Op::Dice {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over batch and pixels of `-ln p[label]` for class probabilities.
    pub fn pixel_nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (b, c, h, w) = self.value(probs).dims4()?;
        check_labels(labels, c, b * h * w)?;
        let hw = h * w;
        let p = self.value(probs).data();
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let (bi, px) = (i / hw, i % hw);
            total -= p[(bi * c + l) * hw + px].max(LOG_FLOOR).ln();
        }
        self.push(
            Tensor::scalar(total / labels.len() as f64),
            &[probs],
            Op::PixelNll {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`]; intermediate gradients are rebuilt.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Backpropagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_seeded(&mut self, root: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            bail!(Dimension, "seed has {} values for a root of {}", seed.len(), self.value(root).numel());
        }
        if !self.requires_grad(root) {
            bail!(Usage, "backward root does not depend on any tensor requiring grad");
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(root, seed);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv_backward(*input, *weight, *bias, geom, cols.as_deref(), g),
            Op::Relu(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&a, &gi)| if a > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, &d);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = y.iter().zip(g).map(|(&s, &gi)| gi * s * (1.0 - s)).collect();
                self.accumulate(*x, &d);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let k = y.shape()[1];
                let mut d = vec![0.0; g.len()];
                for ((yr, gr), dr) in y.data().chunks(k).zip(g.chunks(k)).zip(d.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::ChannelSoftmax(x) => {
                let y = &self.nodes[i].value;
                let (b, c, h, w) = y.dims4().expect("4-D");
                let hw = h * w;
                let yd = y.data();
                let mut d = vec![0.0; g.len()];
                for bi in 0..b {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|ci| yd[base + ci * hw + p] * g[base + ci * hw + p]).sum();
                        for ci in 0..c {
                            let idx = base + ci * hw + p;
                            d[idx] = yd[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
                self.accumulate(*input, &d);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let mut d = vec![0.0; self.value(*x).numel()];
                for (plane, &gi) in d.chunks_mut(hw).zip(g) {
                    plane.fill(gi / hw as f64);
                }
                self.accumulate(*x, &d);
            }
            Op::AdaptiveAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let (_, _, oh, ow) = self.nodes[i].value.dims4().expect("4-D");
                let by = kernels::adaptive_bins(h, oh);
                let bx = kernels::adaptive_bins(w, ow);
                let mut d = vec![0.0; self.value(*x).numel()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for (iy, &(y0, y1)) in by.iter().enumerate() {
                        for (ix, &(x0, x1)) in bx.iter().enumerate() {
                            let share = gp[iy * ow + ix] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += share);
                            }
                        }
                    }
                }
                self.accumulate(*x, &d);
            }
            Op::Bilinear(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let (_, _, oh, ow) = self.nodes[i].value.dims4().expect("4-D");
                let mut d = vec![0.0; self.value(*x).numel()];
                for (plane, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    kernels::bilinear_plane_backward(gp, h, w, oh, ow, plane);
                }
                self.accumulate(*x, &d);
            }
            Op::ConcatChannels(parts) => {
                let (b, total_c, h, w) = self.nodes[i].value.dims4().expect("4-D");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(b * pc * hw);
                    for bi in 0..b {
                        let start = (bi * total_c + offset) * hw;
                        d.extend_from_slice(&g[start..start + pc * hw]);
                    }
                    self.accumulate(p, &d);
                    offset += pc;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = self.value(*b).data().iter().zip(g).map(|(y, gi)| y * gi).collect();
                let db: Vec<f64> = self.value(*a).data().iter().zip(g).map(|(x, gi)| x * gi).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                let dx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                let ds: f64 = self.value(*x).data().iter().zip(g).map(|(a, gi)| a * gi).sum();
                self.accumulate(*x, &dx);
                self.accumulate(*s, &[ds]);
            }
            Op::Affine { x, a } => {
                let dx: Vec<f64> = g.iter().map(|gi| gi * a).collect();
                self.accumulate(*x, &dx);
            }
            Op::ChannelScale { x, g: gate } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("4-D");
                let hw = h * w;
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                let mut dx = g.to_vec();
                let mut dg = vec![0.0; gv.len()];
                for (pi, plane) in dx.chunks_mut(hw).enumerate() {
                    dg[pi] = plane.iter().zip(&xv[pi * hw..(pi + 1) * hw]).map(|(a, b)| a * b).sum();
                    plane.iter_mut().for_each(|v| *v *= gv[pi]);
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gate, &dg);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, &d);
            }
            Op::CrossEntropy { logits, labels } => {
                let v = self.value(*logits);
                let k = v.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut d = v.data().to_vec();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    softmax_in_place(row);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|r| *r *= scale);
                }
                self.accumulate(*logits, &d);
            }
            Op::Dice { probs, labels } => {
                let (b, c, h, w) = self.value(*probs).dims4().expect("4-D");
                let hw = h * w;
                let (inter, psum, tsum) = dice_sums(self.value(*probs).data(), labels, b, c, hw);
                let mut d = vec![0.0; b * c * hw];
                for ci in 0..c {
                    let den = psum[ci] + tsum[ci] + DICE_SMOOTH;
                    let num = 2.0 * inter[ci] + DICE_SMOOTH;
                    let base = -g[0] / c as f64;
                    let d_off = base * (-num / (den * den));
                    let d_on = base * (2.0 / den - num / (den * den));
                    for bi in 0..b {
                        for p in 0..hw {
                            let on = labels[bi * hw + p] == ci;
                            d[(bi * c + ci) * hw + p] = if on { d_on } else { d_off };
                        }
                    }
                }
                self.accumulate(*probs, &d);
            }
            Op::PixelNll { probs, labels } => {
                let (_, c, h, w) = self.value(*probs).dims4().expect("4-D");
                let hw = h * w;
                let p = self.value(*probs).data();
                let n = labels.len() as f64;
                let mut d = vec![0.0; p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let idx = ((i / hw) * c + l) * hw + i % hw;
                    if p[idx] > LOG_FLOOR {
                        d[idx] = -g[0] / (p[idx] * n);
                    }
                }
                self.accumulate(*probs, &d);
            }
        }
    }

    fn conv_backward(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeom,
        cols: Option<&[f64]>,
        g: &[f64],
    ) {
        let b = self.value(input).shape()[0];
        let cout = self.value(weight).shape()[0];
        let k = geom.col_rows();
        let p = geom.col_cols();
        let in_sz = geom.cin * geom.h * geom.w;

        if self.requires_grad(bias) {
            let mut db = vec![0.0; cout];
            for gb in g.chunks(cout * p) {
                for (co, row) in gb.chunks(p).enumerate() {
                    db[co] += row.iter().sum::<f64>();
                }
            }
            self.accumulate(bias, &db);
        }
        if self.requires_grad(weight) {
            let mut dw = vec![0.0; cout * k];
            for bi in 0..b {
                let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                let cb = match cols {
                    Some(c) => &c[bi * k * p..(bi + 1) * k * p],
                    None => &self.value(input).data()[bi * in_sz..(bi + 1) * in_sz],
                };
                kernels::gemm(cout, p, k, gb, false, cb, true, 1.0, &mut dw);
            }
            self.accumulate(weight, &dw);
        }
        if self.requires_grad(input) {
            let wt = self.value(weight).data();
            let mut dx = vec![0.0; b * in_sz];
            let mut dcols = vec![0.0; k * p];
            for bi in 0..b {
                let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
                if geom.is_pointwise() {
                    kernels::gemm(k, cout, p, wt, true, gb, false, 0.0, dxb);
                } else {
                    kernels::gemm(k, cout, p, wt, true, gb, false, 0.0, &mut dcols);
                    kernels::col2im_add(&dcols, geom, dxb);
                }
            }
            self.accumulate(input, &dx);
        }
    }
}

/// Per-class `(Σ p·t, Σ p, Σ t)` over batch and pixels.
fn dice_sums(
    p: &[f64],
    labels: &[usize],
    b: usize,
    c: usize,
    hw: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut tsum = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &p[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            psum[ci] += plane.iter().sum::<f64>();
        }
        for px in 0..hw {
            let l = labels[bi * hw + px];
            tsum[l] += 1.0;
            inter[l] += p[(bi * c + l) * hw + px];
        }
    }
    (inter, psum, tsum)
}
