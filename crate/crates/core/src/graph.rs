//! Tape-based reverse-mode differentiation over single-image tensors.
//!
//! Feature maps are `[C, H, W]`; region batches are `[N, D]` or
//! `[N, C, P, P]`. Every op records its inputs on the tape when at least one
//! input requires a gradient; [`Graph::backward`] walks the tape in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{col2im, conv_out, gemm, im2col, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One region to pool: level index into the input list and corner
/// coordinates already mapped to that level's feature grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub level: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f32>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    RoiAlign {
        inputs: Vec<Var>,
        rois: Vec<RoiSample>,
        pooled: usize,
        sampling: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatCols(Var, Var),
    Bce {
        logits: Var,
        targets: Vec<(usize, f32)>,
        norm: f32,
    },
    SmoothL1 {
        pred: Var,
        targets: Vec<(usize, f32)>,
        beta: f32,
        norm: f32,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    MeanSquare(Var),
    L2Norm(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape bound to a parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    record: bool,
}

impl<'p> Graph<'p> {
    /// Graph that records ops for [`backward`](Self::backward).
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            record: true,
        }
    }

    /// Forward-only graph; nothing requires a gradient.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let rg = self.record && requires_grad;
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (finite-difference checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(id.0).copied().flatten() {
            return v;
        }
        let (value, op) = if self.record {
            (None, Op::Param(id))
        } else {
            (Some(self.params.tensor(id).clone()), Op::Leaf)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Sum of scalar losses, each weighted.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| invalid("weighted_sum of no terms"))
    }

    /// 2-D convolution, `x: [C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &ws, &xs));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid("conv2d: input smaller than kernel"));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            Vec::new()
        } else {
            let mut cols = vec![0.0; c * k * k * ho * wo];
            im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo, &mut cols);
            cols
        };
        let mut out = vec![0.0; o * ho * wo];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        let rhs = if direct { self.value(x).data() } else { &cols };
        let ckk = c * k * k;
        gemm(
            o,
            ckk,
            ho * wo,
            1.0,
            self.value(w).data(),
            ckk as isize,
            1,
            rhs,
            (ho * wo) as isize,
            1,
            1.0,
            &mut out,
        );
        let t = Tensor::from_vec(&[o, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if rg && self.record { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution, `x: [Cin,H,W]`, `w: [Cin,Cout,k,k]`.
    ///
    /// Output side is `(H - 1) * stride - 2 * pad + k + output_pad`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err("conv_transpose2d", &ws, &xs));
        }
        if output_pad.0 >= stride.max(1) && output_pad.0 > 0 || output_pad.1 >= stride.max(1) && output_pad.1 > 0 {
            return Err(invalid("conv_transpose2d: output padding must be < stride"));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        let ho = ((h - 1) * stride + k + output_pad.0)
            .checked_sub(2 * pad)
            .ok_or_else(|| invalid("conv_transpose2d: padding too large"))?;
        let wo = ((wd - 1) * stride + k + output_pad.1)
            .checked_sub(2 * pad)
            .ok_or_else(|| invalid("conv_transpose2d: padding too large"))?;
        let ckk = cout * k * k;
        let mut cols = vec![0.0; ckk * h * wd];
        // cols[Cout*k*k, H*W] = W^T x
        gemm(
            ckk,
            cin,
            h * wd,
            1.0,
            self.value(w).data(),
            1,
            ckk as isize,
            self.value(x).data(),
            (h * wd) as isize,
            1,
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; cout * ho * wo];
        col2im(&cols, cout, ho, wo, k, stride, pad, h, wd, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
        let t = Tensor::from_vec(&[cout, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    /// Bilinear x2 upsampling (half-pixel centers, edge clamped), cropped
    /// or extended to `(out_h, out_w)`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw();
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(invalid("upsample2x: empty map"));
        }
        let src = self.value(x).data();
        let ys = interp_table(h, out_h);
        let xs = interp_table(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                    o[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let t = Tensor::from_vec(&[c, out_h, out_w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// ROI-Align over a list of feature maps; output `[N, C, P, P]`.
    ///
    /// Each bin averages `sampling x sampling` bilinear samples. Region sides
    /// shorter than one feature cell are widened to one cell.
    pub fn roi_align(&mut self, inputs: &[Var], rois: &[RoiSample], pooled: usize, sampling: usize) -> Result<Var> {
        if inputs.is_empty() || pooled == 0 || sampling == 0 {
            return Err(invalid("roi_align: need inputs, pooled > 0 and sampling > 0"));
        }
        let c = self.value(inputs[0]).chw().0;
        for &v in inputs {
            if self.value(v).chw().0 != c {
                return Err(invalid("roi_align: levels disagree on channel count"));
            }
        }
        let pp = pooled * pooled;
        let mut out = vec![0.0; rois.len() * c * pp];
        for (r, roi) in rois.iter().enumerate() {
            let fv = inputs
                .get(roi.level)
                .ok_or_else(|| invalid("roi_align: level out of range"))?;
            let feat = self.value(*fv);
            let (_, h, w) = feat.chw();
            let data = feat.data();
            let dst = &mut out[r * c * pp..(r + 1) * c * pp];
            for_each_sample(roi, h, w, pooled, sampling, |bin, taps, scale| {
                for ch in 0..c {
                    let plane = &data[ch * h * w..(ch + 1) * h * w];
                    let mut acc = 0.0;
                    for &(idx, wt) in taps {
                        acc += plane[idx] * wt;
                    }
                    dst[ch * pp + bin] += acc * scale;
                }
            });
        }
        let t = Tensor::from_vec(&[rois.len(), c, pooled, pooled], out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            t,
            Op::RoiAlign {
                inputs: inputs.to_vec(),
                rois: rois.to_vec(),
                pooled,
                sampling,
            },
            rg,
        ))
    }

    /// `y = x W^T + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", &ws, &xs));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            1.0,
            &mut out,
        );
        let t = Tensor::from_vec(&[n, dout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Column-wise concatenation of `[N, A]` and `[N, B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for r in 0..n {
            out.extend_from_slice(&va[r * da..(r + 1) * da]);
            out.extend_from_slice(&vb[r * db..(r + 1) * db]);
        }
        let t = Tensor::from_vec(&[n, da + db], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatCols(a, b), rg))
    }

    /// Binary cross-entropy on selected logits, divided by `norm`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[(usize, f32)], norm: f32) -> Var {
        let z = self.value(logits).data();
        let mut loss = 0.0f32;
        for &(i, t) in targets {
            let x = z[i];
            loss += x.max(0.0) - x * t + libm::log1pf(libm::expf(-x.abs()));
        }
        let t = Tensor::scalar(if norm > 0.0 { loss / norm } else { 0.0 });
        let rg = self.rg(logits);
        self.push(
            t,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                norm,
            },
            rg,
        )
    }

    /// Smooth-L1 between selected entries of `pred` and targets, divided by `norm`.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[(usize, f32)], beta: f32, norm: f32) -> Var {
        let p = self.value(pred).data();
        let mut loss = 0.0f32;
        for &(i, t) in targets {
            loss += smooth_l1(p[i] - t, beta);
        }
        let t = Tensor::scalar(if norm > 0.0 { loss / norm } else { 0.0 });
        let rg = self.rg(pred);
        self.push(
            t,
            Op::SmoothL1 {
                pred,
                targets: targets.to_vec(),
                beta,
                norm,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", &[labels.len()], s));
        }
        let k = s[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(invalid("softmax_cross_entropy: label out of range"));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let n = labels.len();
        let mut loss = 0.0f32;
        for (r, &l) in labels.iter().enumerate() {
            loss -= libm::logf(probs[r * k + l].max(1e-30));
        }
        let t = Tensor::scalar(if n > 0 { loss / n as f32 } else { 0.0 });
        let rg = self.rg(logits);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            t,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let n = d.len().max(1) as f32;
        let t = Tensor::scalar(d.iter().map(|v| v * v).sum::<f32>() / n);
        let rg = self.rg(x);
        self.push(t, Op::MeanSquare(x), rg)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let t = Tensor::scalar(libm::sqrtf(d.iter().map(|v| v * v).sum()));
        let rg = self.rg(x);
        self.push(t, Op::L2Norm(x), rg)
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0; self.value(loss).numel()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, idx: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::Relu(a) => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(y) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => self.conv2d_backward(idx, *x, *w, *b, *stride, *pad, cols, gy, grads),
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                self.conv_t_backward(idx, *x, *w, *b, *stride, *pad, gy, grads)
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = self.nodes[idx].value.as_ref().unwrap().chw();
                let ys = interp_table(h, oh);
                let xs = interp_table(w, ow);
                if let Some(g) = self.acc(grads, *x) {
                    for ch in 0..c {
                        let gp = &mut g[ch * h * w..(ch + 1) * h * w];
                        let go = &gy[ch * oh * ow..(ch + 1) * oh * ow];
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                                let d = go[oy * ow + ox];
                                gp[y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                                gp[y0 * w + x1] += d * (1.0 - ly) * lx;
                                gp[y1 * w + x0] += d * ly * (1.0 - lx);
                                gp[y1 * w + x1] += d * ly * lx;
                            }
                        }
                    }
                }
            }
            Op::RoiAlign {
                inputs,
                rois,
                pooled,
                sampling,
            } => {
                let pp = pooled * pooled;
                for (r, roi) in rois.iter().enumerate() {
                    let fv = inputs[roi.level];
                    let (c, h, w) = self.value(fv).chw();
                    let Some(g) = self.acc(grads, fv) else {
                        continue;
                    };
                    let src = &gy[r * c * pp..(r + 1) * c * pp];
                    for_each_sample(roi, h, w, *pooled, *sampling, |bin, taps, scale| {
                        for ch in 0..c {
                            let d = src[ch * pp + bin] * scale;
                            let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                            for &(i, wt) in taps {
                                plane[i] += d * wt;
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                if let Some(gx) = self.acc(grads, *x) {
                    // dx[n,in] += dy[n,out] W[out,in]
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        gy,
                        dout as isize,
                        1,
                        self.value(*w).data(),
                        din as isize,
                        1,
                        1.0,
                        gx,
                    );
                }
                if let Some(gw) = self.acc(grads, *w) {
                    // dW[out,in] += dy^T x
                    gemm(
                        dout,
                        n,
                        din,
                        1.0,
                        gy,
                        1,
                        dout as isize,
                        self.value(*x).data(),
                        din as isize,
                        1,
                        1.0,
                        gw,
                    );
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in gy.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let n = self.value(*a).shape()[0];
                let da = self.value(*a).shape()[1];
                let db = self.value(*b).shape()[1];
                if let Some(g) = self.acc(grads, *a) {
                    for r in 0..n {
                        let src = &gy[r * (da + db)..r * (da + db) + da];
                        g[r * da..(r + 1) * da].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for r in 0..n {
                        let src = &gy[r * (da + db) + da..(r + 1) * (da + db)];
                        g[r * db..(r + 1) * db].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Bce { logits, targets, norm } => {
                if *norm <= 0.0 {
                    return;
                }
                let z = self.value(*logits).data();
                let scale = gy[0] / norm;
                if let Some(g) = self.acc(grads, *logits) {
                    for &(i, t) in targets {
                        g[i] += (sigmoid(z[i]) - t) * scale;
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                targets,
                beta,
                norm,
            } => {
                if *norm <= 0.0 {
                    return;
                }
                let p = self.value(*pred).data();
                let scale = gy[0] / norm;
                if let Some(g) = self.acc(grads, *pred) {
                    for &(i, t) in targets {
                        g[i] += smooth_l1_grad(p[i] - t, *beta) * scale;
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let k = self.value(*logits).shape()[1];
                let scale = gy[0] / n as f32;
                if let Some(g) = self.acc(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            g[r * k + c] += (probs[r * k + c] - onehot) * scale;
                        }
                    }
                }
            }
            Op::MeanSquare(x) => {
                let d = self.value(*x).data();
                let scale = 2.0 * gy[0] / d.len().max(1) as f32;
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(d).for_each(|(g, v)| *g += v * scale);
                }
            }
            Op::L2Norm(x) => {
                let norm = self.nodes[idx].value.as_ref().unwrap().data()[0];
                if norm <= 0.0 {
                    return;
                }
                let d = self.value(*x).data();
                let scale = gy[0] / norm;
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(d).for_each(|(g, v)| *g += v * scale);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        idx: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[f32],
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape();
        let (o, k) = (ws[0], ws[2]);
        let (_, ho, wo) = self.nodes[idx].value.as_ref().unwrap().chw();
        let hw = ho * wo;
        let ckk = c * k * k;
        let direct = cols.is_empty();
        let cols_ref: &[f32] = if direct { self.value(x).data() } else { cols };
        if let Some(gw) = self.acc(grads, w) {
            // dW[O, Ckk] += dy[O, HW] cols^T
            gemm(o, hw, ckk, 1.0, gy, hw as isize, 1, cols_ref, 1, hw as isize, 1.0, gw);
        }
        if let Some(b) = b {
            if let Some(gb) = self.acc(grads, b) {
                for (oc, chunk) in gy.chunks(hw).enumerate() {
                    gb[oc] += chunk.iter().sum::<f32>();
                }
            }
        }
        if self.rg(x) {
            let wv = self.value(w).data();
            if direct {
                let gx = self.acc(grads, x).unwrap();
                gemm(ckk, o, hw, 1.0, wv, 1, ckk as isize, gy, hw as isize, 1, 1.0, gx);
            } else {
                let mut dcols = vec![0.0; ckk * hw];
                gemm(
                    ckk,
                    o,
                    hw,
                    1.0,
                    wv,
                    1,
                    ckk as isize,
                    gy,
                    hw as isize,
                    1,
                    0.0,
                    &mut dcols,
                );
                let gx = self.acc(grads, x).unwrap();
                col2im(&dcols, c, h, wd, k, stride, pad, ho, wo, gx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t_backward(
        &self,
        idx: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape();
        let (cout, k) = (ws[1], ws[2]);
        let (_, ho, wo) = self.nodes[idx].value.as_ref().unwrap().chw();
        let ckk = cout * k * k;
        let hw = h * wd;
        let mut dcols = vec![0.0; ckk * hw];
        im2col(gy, cout, ho, wo, k, stride, pad, h, wd, &mut dcols);
        if let Some(gx) = self.acc(grads, x) {
            // dx[Cin, HW] += W[Cin, Ckk] dcols
            gemm(
                cin,
                ckk,
                hw,
                1.0,
                self.value(w).data(),
                ckk as isize,
                1,
                &dcols,
                hw as isize,
                1,
                1.0,
                gx,
            );
        }
        if let Some(gw) = self.acc(grads, w) {
            // dW[Cin, Ckk] += x[Cin, HW] dcols^T
            gemm(
                cin,
                hw,
                ckk,
                1.0,
                self.value(x).data(),
                hw as isize,
                1,
                &dcols,
                1,
                hw as isize,
                1.0,
                gw,
            );
        }
        if let Some(b) = b {
            if let Some(gb) = self.acc(grads, b) {
                for (oc, chunk) in gy.chunks(ho * wo).enumerate() {
                    gb[oc] += chunk.iter().sum::<f32>();
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient with respect to a node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients gathered per parameter.
    pub fn params(&self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(graph.params.len());
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                out.add(*id, g);
            }
        }
        out
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

pub fn smooth_l1(d: f32, beta: f32) -> f32 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f32, beta: f32) -> f32 {
    if d.abs() < beta {
        d / beta
    } else if d > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Row-wise softmax of a `[N, K]` buffer.
pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    if k == 0 {
        return out;
    }
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = libm::expf(v - m);
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    out
}

/// Source taps for x2 upsampling along one axis: `(lo, hi, frac)`.
fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|o| {
            let s = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (s as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { s - lo as f32 };
            (lo, hi, frac)
        })
        .collect()
}

/// Visits every bilinear sample of a region: `f(bin, taps, 1/count)`.
fn for_each_sample(
    roi: &RoiSample,
    h: usize,
    w: usize,
    pooled: usize,
    sampling: usize,
    mut f: impl FnMut(usize, &[(usize, f32)], f32),
) {
    let rw = (roi.x2 - roi.x1).max(1.0);
    let rh = (roi.y2 - roi.y1).max(1.0);
    let bw = rw / pooled as f32;
    let bh = rh / pooled as f32;
    let inv = 1.0 / (sampling * sampling) as f32;
    let mut taps: Vec<(usize, f32)> = Vec::with_capacity(4);
    for py in 0..pooled {
        for px in 0..pooled {
            let bin = py * pooled + px;
            for iy in 0..sampling {
                let y = roi.y1 + py as f32 * bh + (iy as f32 + 0.5) * bh / sampling as f32;
                for ix in 0..sampling {
                    let x = roi.x1 + px as f32 * bw + (ix as f32 + 0.5) * bw / sampling as f32;
                    taps.clear();
                    bilinear_taps(y, x, h, w, &mut taps);
                    if !taps.is_empty() {
                        f(bin, &taps, inv);
                    }
                }
            }
        }
    }
}

/// Bilinear taps at continuous `(y, x)` where integer coordinates are cell
/// centers. Points more than one cell outside the map contribute nothing.
fn bilinear_taps(y: f32, x: f32, h: usize, w: usize, taps: &mut Vec<(usize, f32)>) {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y0, y1, ly) = axis_taps(y, h);
    let (x0, x1, lx) = axis_taps(x, w);
    let hy = 1.0 - ly;
    let hx = 1.0 - lx;
    taps.push((y0 * w + x0, hy * hx));
    taps.push((y0 * w + x1, hy * lx));
    taps.push((y1 * w + x0, ly * hx));
    taps.push((y1 * w + x1, ly * lx));
}

fn axis_taps(v: f32, n: usize) -> (usize, usize, f32) {
    let lo = v as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f32)
    }
}
