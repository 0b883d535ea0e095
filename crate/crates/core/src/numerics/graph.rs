//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse, pushing vector-Jacobian products to each node's inputs and
//! accumulating the result into the `grad` slot of every leaf created with
//! `requires_grad = true`.
//!
//! Leaf gradients accumulate across calls to `backward`; call
//! [`Graph::zero_grad`] to reset them. Intermediate adjoints are discarded
//! after each pass.

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Square(Var),
    Sigmoid(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        // im2col buffers, kept only when the kernel needs a gradient
        cols: Option<Vec<f64>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    BceWithLogits {
        logits: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation supporting one or more backward passes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn elementwise(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.elementwise(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.elementwise(x, Op::Square(x), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Cross-correlation of `x[N,C,H,W]` with `kernel[F,C,kh,kw]` plus per-filter bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let xs = self.value(x).shape();
        let ks = self.value(kernel).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be N,C,H,W, got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be F,C,kh,kw, got {ks:?}")));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (filters, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != channels {
            return Err(Error::shape(
                "conv2d",
                format!("channel dimension: input has {channels}, kernel expects {kc}"),
            ));
        }
        if bs != [filters] {
            return Err(Error::shape(
                "conv2d",
                format!("bias dimension: expected [{filters}], got {bs:?}"),
            ));
        }
        if kh > height + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height {kh} exceeds padded input height {}", height + 2 * padding),
            ));
        }
        if kw > width + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel width {kw} exceeds padded input width {}", width + 2 * padding),
            ));
        }
        let geom = ConvGeometry {
            batch,
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        };

        let patch = geom.patch();
        let plane = geom.out_plane();
        let keep_cols = self.requires_grad(kernel);
        let xin = self.value(x).data();
        let kdata = self.value(kernel).data();
        let bdata = self.value(bias).data();

        let mut out = vec![0.0; batch * filters * plane];
        let mut all_cols = if keep_cols {
            vec![0.0; batch * patch * plane]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; patch * plane];
        let in_sample = channels * height * width;
        for n in 0..batch {
            let cols: &mut [f64] = if keep_cols {
                &mut all_cols[n * patch * plane..(n + 1) * patch * plane]
            } else {
                &mut scratch
            };
            im2col(&xin[n * in_sample..(n + 1) * in_sample], &geom, cols);
            let out_n = &mut out[n * filters * plane..(n + 1) * filters * plane];
            gemm(
                kdata,
                Layout::row_major(filters, patch),
                cols,
                Layout::row_major(patch, plane),
                0.0,
                out_n,
                Layout::row_major(filters, plane),
            );
            for (f, row) in out_n.chunks_exact_mut(plane).enumerate() {
                let b = bdata[f];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let value = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                kernel,
                bias,
                geom,
                cols: keep_cols.then_some(all_cols),
            },
            rg,
        ))
    }

    /// `x[N,D] * weight[K,D]^T + bias[K]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(weight).shape();
        let bs = self.value(bias).shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape(
                "linear",
                format!("expected 2-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        if ws[1] != d {
            return Err(Error::shape(
                "linear",
                format!("inner dimension: input has {d} features, weight expects {}", ws[1]),
            ));
        }
        if bs != [k] {
            return Err(Error::shape(
                "linear",
                format!("bias dimension: expected [{k}], got {bs:?}"),
            ));
        }
        let mut out = vec![0.0; n * k];
        gemm(
            self.value(x).data(),
            Layout::row_major(n, d),
            self.value(weight).data(),
            Layout::transposed(k, d),
            0.0,
            &mut out,
            Layout::row_major(n, k),
        );
        let bdata = self.value(bias).data();
        for row in out.chunks_exact_mut(k) {
            row.iter_mut().zip(bdata).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(vec![n, k], out)?;
        let rg = self.any_grad(&[x, weight, bias]);
        Ok(self.push(value, Op::Linear { input: x, weight, bias }, rg))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input must be N,C,H,W, got {xs:?}"),
            ));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a {0,1} target,
    /// computed in the fused stable form `max(z,0) - z*t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape(
                "bce",
                format!("logits {:?} vs target {:?}", z.shape(), target.shape()),
            ));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bce target must be 0 or 1, found {bad}"
            )));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / z.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    ///
    /// Gradients are added to whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(g) => g
                        .data_mut()
                        .iter_mut()
                        .zip(&upstream)
                        .for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), upstream)?)
                    }
                }
                continue;
            }
            self.propagate(idx, &upstream, &mut adjoints);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f64>| match &mut adjoints[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[idx].value.data();

        match &nodes[idx].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, up.to_vec());
                }
                if wants(*b) {
                    send(*b, up.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, up.to_vec());
                }
                if wants(*b) {
                    send(*b, up.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, up.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, up.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, factor) => send(*x, up.iter().map(|g| g * factor).collect()),
            Op::Sum(x) => send(*x, vec![up[0]; nodes[x.0].value.len()]),
            Op::Square(x) => send(*x, up.iter().zip(val(*x)).map(|(g, v)| 2.0 * v * g).collect()),
            Op::Sigmoid(x) => send(
                *x,
                up.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::Relu(x) => send(
                *x,
                up.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let mut g = Vec::with_capacity(nodes[x.0].value.len());
                for &u in up {
                    g.extend(std::iter::repeat_n(u * inv, plane));
                }
                send(*x, g);
            }
            Op::BceWithLogits { logits, target } => {
                let z = val(*logits);
                let scale = up[0] / z.len() as f64;
                send(
                    *logits,
                    z.iter()
                        .zip(target.data())
                        .map(|(&z, &t)| (sigmoid_scalar(z) - t) * scale)
                        .collect(),
                );
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, d) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                let k = nodes[weight.0].value.shape()[0];
                if wants(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(
                        up,
                        Layout::row_major(n, k),
                        val(*weight),
                        Layout::row_major(k, d),
                        0.0,
                        &mut dx,
                        Layout::row_major(n, d),
                    );
                    send(*input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; k * d];
                    gemm(
                        up,
                        Layout::transposed(n, k),
                        val(*input),
                        Layout::row_major(n, d),
                        0.0,
                        &mut dw,
                        Layout::row_major(k, d),
                    );
                    send(*weight, dw);
                }
                if wants(*bias) {
                    let mut db = vec![0.0; k];
                    for row in up.chunks_exact(k) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(*bias, db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let g = *geom;
                let (patch, plane) = (g.patch(), g.out_plane());
                let per_out = g.filters * plane;
                if wants(*bias) {
                    let mut db = vec![0.0; g.filters];
                    for sample in up.chunks_exact(per_out) {
                        for (f, row) in sample.chunks_exact(plane).enumerate() {
                            db[f] += row.iter().sum::<f64>();
                        }
                    }
                    send(*bias, db);
                }
                if wants(*kernel) {
                    let cols = cols.as_ref().expect("cols saved when kernel requires grad");
                    let mut dk = vec![0.0; g.filters * patch];
                    for n in 0..g.batch {
                        gemm(
                            &up[n * per_out..(n + 1) * per_out],
                            Layout::row_major(g.filters, plane),
                            &cols[n * patch * plane..(n + 1) * patch * plane],
                            Layout::transposed(patch, plane),
                            1.0,
                            &mut dk,
                            Layout::row_major(g.filters, patch),
                        );
                    }
                    send(*kernel, dk);
                }
                if wants(*input) {
                    let in_sample = g.channels * g.height * g.width;
                    let mut dx = vec![0.0; g.batch * in_sample];
                    let mut dcols = vec![0.0; patch * plane];
                    for n in 0..g.batch {
                        gemm(
                            val(*kernel),
                            Layout::transposed(g.filters, patch),
                            &up[n * per_out..(n + 1) * per_out],
                            Layout::row_major(g.filters, plane),
                            0.0,
                            &mut dcols,
                            Layout::row_major(patch, plane),
                        );
                        col2im(&dcols, &g, &mut dx[n * in_sample..(n + 1) * in_sample]);
                    }
                    send(*input, dx);
                }
            }
        }
    }
}

/// Unfolds one `[C,H,W]` sample into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let chan = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.channels {
        let chan = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
