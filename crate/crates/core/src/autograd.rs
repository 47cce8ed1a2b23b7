//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Because
//! nodes can only reference earlier nodes, tape order is already a
//! topological order, and [`Graph::backward`] walks it once in reverse.
//! Gradients that reach a node from several consumers are summed.
//!
//! A graph is single-use: build it for one forward pass, call `backward`
//! once, then drop it.

use crate::error::{contract_err, dim_err, QkdError, Result};
use crate::quant::{self, Interval, QuantSpec, SteMode};
use crate::tensor::{as_matrix, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Relu(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    ChannelBias { x: Var, bias: Var },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Reshape(Var),
    PickClass { x: Var, labels: Vec<usize> },
    // Closed-form straight-through rule; see `quant::quantize_backward`.
    FakeQuant { x: Var, interval: Var, spec: QuantSpec, ste: SteMode },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (x, w) else {
            return Err(dim_err!("conv2d expects NCHW input and OCKK kernel, got {:?} and {:?}", x, w));
        };
        if c != c2 {
            return Err(dim_err!("conv2d channel mismatch: input {} vs kernel {}", c, c2));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(dim_err!(
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                wd + 2 * padding
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel index inside one image for a patch row and output
    /// position, or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, row: usize, oy: usize, ox: usize) -> Option<usize> {
        let ch = row / (self.kh * self.kw);
        let ky = (row / self.kw) % self.kh;
        let kx = row % self.kw;
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((ch * self.h + y as usize) * self.w + x as usize)
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let pos = self.positions();
        for row in 0..self.patch() {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    cols[row * pos + oy * self.wo + ox] =
                        self.source(row, oy, ox).map_or(0.0, |i| image[i]);
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], image: &mut [f64]) {
        let pos = self.positions();
        for row in 0..self.patch() {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    if let Some(i) = self.source(row, oy, ox) {
                        image[i] += cols[row * pos + oy * self.wo + ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let img = g.c * g.h * g.w;
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![0.0; patch * pos];
    let mut out = vec![0.0; g.n * g.o * pos];
    for n in 0..g.n {
        g.im2col(&x.data()[n * img..(n + 1) * img], &mut cols);
        gemm_nn(g.o, patch, pos, w.data(), &cols, &mut out[n * g.o * pos..(n + 1) * g.o * pos]);
    }
    Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out)
}

fn conv2d_backward(
    upstream: &Tensor,
    x: &Tensor,
    w: &Tensor,
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let img = g.c * g.h * g.w;
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![0.0; patch * pos];
    let mut dcols = vec![0.0; patch * pos];
    let mut dx = want_x.then(|| vec![0.0; x.numel()]);
    let mut dw = want_w.then(|| vec![0.0; w.numel()]);
    for n in 0..g.n {
        let dout = &upstream.data()[n * g.o * pos..(n + 1) * g.o * pos];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[n * img..(n + 1) * img], &mut cols);
            gemm_nt(g.o, pos, patch, dout, &cols, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(patch, g.o, pos, w.data(), dout, &mut dcols);
            g.col2im_add(&dcols, &mut dx[n * img..(n + 1) * img]);
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    )
}

/// Length of axis 1 and the product of trailing axes for per-channel ops.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("per-channel op needs rank >= 2, got {:?}", shape));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn log_softmax_rows(z: &Tensor) -> Result<Tensor> {
    let (n, m) = as_matrix(z)?;
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &z.data()[r * m..(r + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input, such as a parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{}: shapes {:?} and {:?} differ", what, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Cross-correlation of an NCHW batch with an OCKK kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        let out = conv2d_forward(self.value(x), self.value(w), &geom);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x, w, geom }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, h, w] = t.shape() else {
            return Err(dim_err!("global_avg_pool expects NCHW, got {:?}", t.shape()));
        };
        let hw = h * w;
        let out: Vec<f64> = t
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let ng = self.needs(x);
        self.push(out, Op::Exp(x), ng)
    }

    /// Row-wise log-softmax of `[N, m]` scores, max-subtracted.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let out = log_softmax_rows(self.value(z))?;
        let ng = self.needs(z);
        Ok(self.push(out, Op::LogSoftmax(z), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Adds `bias[c]` along axis 1.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(dim_err!("bias shape {:?} does not match {} channels", b.shape(), c));
        }
        let mut out = self.value(x).clone();
        let bd = b.data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        debug_assert_eq!(out.numel(), n * c * inner);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias { x, bias }, ng))
    }

    /// Per-channel `x * scale[c] + shift[c]` along axis 1.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (_, c, inner) = channel_layout(self.value(x).shape())?;
        let (s, t) = (self.value(scale), self.value(shift));
        if s.shape() != [c] || t.shape() != [c] {
            return Err(dim_err!(
                "affine params {:?}/{:?} do not match {} channels",
                s.shape(),
                t.shape(),
                c
            ));
        }
        let (sd, td) = (s.data(), t.data());
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * sd[ch] + td[ch]
            })
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = *s.first().ok_or_else(|| dim_err!("flatten on a scalar"))?;
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Picks `x[n, labels[n]]` from a `[N, m]` matrix, giving `[N]`.
    pub fn pick_class(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (n, m) = as_matrix(self.value(x))?;
        if labels.len() != n {
            return Err(dim_err!("{} labels for {} rows", labels.len(), n));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(contract_err!("label {} out of range for {} classes", bad, m));
        }
        let d = self.value(x).data();
        let out = labels.iter().enumerate().map(|(r, &y)| d[r * m + y]).collect();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::PickClass {
                x,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Quantize-dequantize `x` on the grid of `spec` with a scalar interval
    /// node. The backward pass uses the straight-through rule.
    pub fn fake_quant(&mut self, x: Var, interval: Var, spec: QuantSpec, ste: SteMode) -> Result<Var> {
        let iv = self.value(interval);
        if !iv.is_scalar() {
            return Err(dim_err!("interval must be a scalar, got {:?}", iv.shape()));
        }
        let i = Interval::new(iv.item())?;
        let out = quant::quantize_dequantize(self.value(x), i, &spec);
        let ng = self.needs(x) || self.needs(interval);
        Ok(self.push(
            out,
            Op::FakeQuant {
                x,
                interval,
                spec,
                ste,
            },
            ng,
        ))
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that depends on a [`Graph::variable`].
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(QkdError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = as_matrix(ta)?;
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), tb.data(), &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, ta.data(), g.data(), &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv2d_backward(
                    g,
                    self.value(*x),
                    self.value(*w),
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f64;
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat(gi * inv).take(hw))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), data));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Exp(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::LogSoftmax(z) => {
                let (n, m) = as_matrix(&node.value)?;
                let y = node.value.data();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let total: f64 = gr.iter().sum();
                    for j in 0..m {
                        d[r * m + j] = gr[j] - y[r * m + j].exp() * total;
                    }
                }
                self.accumulate(grads, *z, Tensor::from_parts(vec![n, m], d));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(shape, g.item()));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = g.item() / t.numel() as f64;
                self.accumulate(grads, *x, Tensor::filled(t.shape(), v));
            }
            Op::ChannelBias { x, bias } => {
                let (_, c, inner) = channel_layout(g.shape())?;
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, &v) in g.data().iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, c, inner) = channel_layout(g.shape())?;
                let xv = self.value(*x);
                let sv = self.value(*scale).data();
                if self.needs(*x) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * sv[(i / inner) % c])
                        .collect();
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
                }
                if self.needs(*scale) || self.needs(*shift) {
                    let mut ds = vec![0.0; c];
                    let mut dt = vec![0.0; c];
                    for (i, (&v, &xi)) in g.data().iter().zip(xv.data()).enumerate() {
                        let ch = (i / inner) % c;
                        ds[ch] += v * xi;
                        dt[ch] += v;
                    }
                    self.accumulate(grads, *scale, Tensor::from_parts(vec![c], ds));
                    self.accumulate(grads, *shift, Tensor::from_parts(vec![c], dt));
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::PickClass { x, labels } => {
                let (n, m) = as_matrix(self.value(*x))?;
                let mut d = vec![0.0; n * m];
                for (r, &y) in labels.iter().enumerate() {
                    d[r * m + y] = g.data()[r];
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, m], d));
            }
            Op::FakeQuant {
                x,
                interval,
                spec,
                ste,
            } => {
                let i = Interval::new(self.value(*interval).item())?;
                let (dx, di) = quant::quantize_backward(g, self.value(*x), i, spec, *ste)?;
                self.accumulate(grads, *x, dx);
                let ishape = self.value(*interval).shape().to_vec();
                self.accumulate(grads, *interval, Tensor::from_parts(ishape, vec![di]));
            }
        }
        Ok(())
    }
}
