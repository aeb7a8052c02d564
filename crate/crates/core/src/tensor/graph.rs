use super::conv::{self, Conv1dGeom, Conv2dGeom};
use super::gemm::gemm;
use super::{Result, Tensor, TensorError};

/// Variance guard used by [`Graph::channel_norm`] and [`Graph::group_norm`].
pub const CHANNEL_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    SoftmaxRows { x: Var, cols: usize },
    Conv1d { x: Var, w: Var, geom: Conv1dGeom, cols: Vec<f64> },
    Conv2d { x: Var, w: Var, geom: Conv2dGeom, cols: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sum(Var),
    MeanAxis { x: Var, outer: usize, axis_len: usize, inner: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    ChannelNorm {
        x: Var,
        gain: Var,
        bias: Var,
        channels: usize,
        extent: usize,
        /// Elements sharing one mean and variance.
        span: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool2d { x: Var, channels: usize, h: usize, w: usize, k: usize },
    AdaptiveAvgPool1d { x: Var, rows: usize, t_in: usize, bins: usize },
    Map { x: Var, derivative: fn(f64) -> f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Bin `[start, end)` of an adaptive average pool with `bins` outputs over `len` inputs.
pub(crate) fn adaptive_bin(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

fn stable_sigmoid(x: f64) -> f64 {
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor into the graph; gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.value(v).iter().all(|x| x.is_finite())
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Row-wise softmax of a 2D tensor, computed with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Dimension {
                op: "softmax_rows",
                msg: format!("expected a 2D tensor, got shape {shape:?}"),
            });
        }
        let cols = shape[1];
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::SoftmaxRows { x, cols }))
    }

    /// Cross-correlation of `x: [C_in, T]` or `[B, C_in, T]` with `w: [C_out, C_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c_in, t_in, batched) = match xs.as_slice() {
            [c, t] => (1, *c, *t, false),
            [b, c, t] => (*b, *c, *t, true),
            _ => {
                return Err(TensorError::Shape {
                    op: "conv1d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        if ws.len() != 3 || ws[1] != c_in {
            return Err(TensorError::Shape {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (c_out, kernel) = (ws[0], ws[2]);
        let t_out = conv::output_len(t_in, kernel, stride, padding).ok_or_else(|| TensorError::Dimension {
            op: "conv1d",
            msg: format!(
                "kernel {kernel} with stride {stride} does not fit input length {t_in} padded by {padding}"
            ),
        })?;
        let geom = Conv1dGeom {
            batch,
            c_in,
            c_out,
            t_in,
            t_out,
            kernel,
            stride,
            padding,
        };
        let cols = conv::im2col_1d(self.value(x), &geom);
        let mut out = vec![0.0; batch * c_out * t_out];
        let wv = self.value(w);
        for b in 0..batch {
            gemm(
                c_out,
                geom.col_rows(),
                t_out,
                wv,
                false,
                &cols[b * geom.cols_per_batch()..(b + 1) * geom.cols_per_batch()],
                false,
                &mut out[b * c_out * t_out..(b + 1) * c_out * t_out],
                false,
            );
        }
        let shape = if batched {
            vec![batch, c_out, t_out]
        } else {
            vec![c_out, t_out]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, rg, Op::Conv1d { x, w, geom, cols }))
    }

    /// Cross-correlation of `x: [C_in, H, W]` with a square kernel `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (c_in, h_in, w_in) = (xs[0], xs[1], xs[2]);
        let (c_out, kernel) = (ws[0], ws[2]);
        let fit = |len: usize| {
            conv::output_len(len, kernel, stride, padding).ok_or_else(|| TensorError::Dimension {
                op: "conv2d",
                msg: format!(
                    "kernel {kernel} with stride {stride} does not fit input {h_in}x{w_in} padded by {padding}"
                ),
            })
        };
        let (h_out, w_out) = (fit(h_in)?, fit(w_in)?);
        let geom = Conv2dGeom {
            c_in,
            c_out,
            h_in,
            w_in,
            h_out,
            w_out,
            kernel,
            stride,
            padding,
        };
        let cols = conv::im2col_2d(self.value(x), &geom);
        let mut out = vec![0.0; c_out * geom.positions()];
        gemm(
            c_out,
            geom.col_rows(),
            geom.positions(),
            self.value(w),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![c_out, h_out, w_out], out, rg, Op::Conv2d { x, w, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Sigmoid(x))
    }

    /// Natural logarithm; callers clamp away from zero first.
    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Ln(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through only for entries already inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Clamp { x, lo, hi })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Sum of all entries, as a scalar of shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![total], rg, Op::Sum(x))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Dimension {
                op: "mean_over_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / axis_len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Per-channel mean of a `C × L` token grid.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Dimension {
                op: "global_avg_pool",
                msg: format!("expected C x L, got {:?}", self.shape(x)),
            });
        }
        self.mean_over_axis(x, 1)
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose2d",
                msg: format!("expected a 2D tensor, got shape {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], out, rg, Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(x)))
    }

    /// Normalizes every `(batch, channel)` row of `x: [C, S]` or `[B, C, S]` to zero mean and
    /// unit variance over its extent `S`, then applies per-channel `gain` and `bias` (`[C]`).
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let channels = match self.shape(x) {
            [c, _] | [_, c, _] => *c,
            _ => 1,
        };
        self.norm_impl("channel_norm", x, gain, bias, channels)
    }

    /// Like [`Graph::channel_norm`], but statistics are shared by `groups` contiguous channel
    /// groups per batch item. `groups == 1` normalizes each item over all channels jointly.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize) -> Result<Var> {
        self.norm_impl("group_norm", x, gain, bias, groups)
    }

    fn norm_impl(&mut self, op: &'static str, x: Var, gain: Var, bias: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (channels, extent) = match shape.as_slice() {
            [c, s] | [_, c, s] => (*c, *s),
            _ => {
                return Err(TensorError::Dimension {
                    op,
                    msg: format!("expected [C, S] or [B, C, S], got {shape:?}"),
                })
            }
        };
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::Dimension {
                op,
                msg: format!("{channels} channels do not split into {groups} groups"),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [channels] {
                return Err(TensorError::Shape {
                    op,
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let span = channels / groups * extent;
        let src = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / span);
        let mut out = vec![0.0; src.len()];
        for (seg_idx, seg) in src.chunks(span).enumerate() {
            let n = span as f64;
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + CHANNEL_NORM_EPS).sqrt();
            inv_std.push(is);
            for (i, v) in seg.iter().enumerate() {
                let idx = seg_idx * span + i;
                let c = (idx / extent) % channels;
                let h = (v - mean) * is;
                xhat[idx] = h;
                out[idx] = gv[c] * h + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::ChannelNorm {
                x,
                gain,
                bias,
                channels,
                extent,
                span,
                xhat,
                inv_std,
            },
        ))
    }

    /// Non-overlapping `k × k` average pooling of `x: [C, H, W]`; trailing remainders are dropped.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || k == 0 || shape[1] < k || shape[2] < k {
            return Err(TensorError::Dimension {
                op: "avg_pool2d",
                msg: format!("window {k} does not fit shape {shape:?}"),
            });
        }
        let (channels, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x);
        let mut out = vec![0.0; channels * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for c in 0..channels {
            for y in 0..ho * k {
                let row = &src[(c * h + y) * w..(c * h + y) * w + wo * k];
                let dst = &mut out[(c * ho + y / k) * wo..(c * ho + y / k + 1) * wo];
                for (xi, v) in row.iter().enumerate() {
                    dst[xi / k] += v * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![channels, ho, wo], out, rg, Op::AvgPool2d { x, channels, h, w, k }))
    }

    /// Adaptive mean pooling of `x: [R, T]` along its last axis into `bins` outputs.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, bins: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || bins == 0 {
            return Err(TensorError::Dimension {
                op: "adaptive_avg_pool1d",
                msg: format!("cannot pool shape {shape:?} into {bins} bins"),
            });
        }
        let (rows, t_in) = (shape[0], shape[1]);
        let src = self.value(x);
        let mut out = vec![0.0; rows * bins];
        for r in 0..rows {
            for i in 0..bins {
                let (s, e) = adaptive_bin(i, bins, t_in);
                let seg = &src[r * t_in + s..r * t_in + e];
                out[r * bins + i] = seg.iter().sum::<f64>() / seg.len() as f64;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, bins], out, rg, Op::AdaptiveAvgPool1d { x, rows, t_in, bins }))
    }

    /// Elementwise `f` with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, rg, Op::Map { x, derivative })
    }

    /// Same values, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let (shape, value) = (self.shape(x).to_vec(), self.value(x).to_vec());
        self.push(shape, value, false, Op::Leaf)
    }

    /// Hash of every piecewise-linear branch taken (relu signs, clamp ranges).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => self.value(x).iter().for_each(|&v| feed(v > 0.0)),
                Op::Clamp { x, lo, hi } => self.value(x).iter().for_each(|&v| {
                    feed(v < lo);
                    feed(v > hi);
                }),
                _ => {}
            }
        }
        h
    }

    // ------------------------------------------------------------ backward

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this graph; record a new forward pass first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoints(i, &dy);
            self.nodes[i].grad = Some(dy);
            for (v, d) in contributions {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            None => node.grad = Some(delta),
        }
    }

    fn adjoints(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, self.value(b), true, &mut da, false);
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a), true, dy, false, &mut db, false);
                    out.push((b, db));
                }
            }
            &Op::SoftmaxRows { x, cols } => {
                let mut dx = vec![0.0; y.len()];
                for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dxr[j] = yr[j] * (dyr[j] - dot);
                    }
                }
                out.push((x, dx));
            }
            Op::Conv1d { x, w, geom, cols } => {
                let g = geom;
                let per_out = g.c_out * g.t_out;
                if self.rg(*w) {
                    let mut dw = vec![0.0; g.c_out * g.col_rows()];
                    for b in 0..g.batch {
                        gemm(
                            g.c_out,
                            g.t_out,
                            g.col_rows(),
                            &dy[b * per_out..(b + 1) * per_out],
                            false,
                            &cols[b * g.cols_per_batch()..(b + 1) * g.cols_per_batch()],
                            true,
                            &mut dw,
                            true,
                        );
                    }
                    out.push((*w, dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.batch * g.c_in * g.t_in];
                    let mut dcols = vec![0.0; g.cols_per_batch()];
                    for b in 0..g.batch {
                        gemm(
                            g.col_rows(),
                            g.c_out,
                            g.t_out,
                            self.value(*w),
                            true,
                            &dy[b * per_out..(b + 1) * per_out],
                            false,
                            &mut dcols,
                            false,
                        );
                        conv::col2im_1d(&dcols, g, b, &mut dx);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let g = geom;
                if self.rg(*w) {
                    let mut dw = vec![0.0; g.c_out * g.col_rows()];
                    gemm(g.c_out, g.positions(), g.col_rows(), dy, false, cols, true, &mut dw, false);
                    out.push((*w, dw));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; g.col_rows() * g.positions()];
                    gemm(
                        g.col_rows(),
                        g.c_out,
                        g.positions(),
                        self.value(*w),
                        true,
                        dy,
                        false,
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![0.0; g.c_in * g.h_in * g.w_in];
                    conv::col2im_2d(&dcols, g, &mut dx);
                    out.push((*x, dx));
                }
            }
            &Op::Relu(x) => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            &Op::Sigmoid(x) => {
                let dx = y.iter().zip(dy).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                out.push((x, dx));
            }
            &Op::Ln(x) => {
                let dx = self.value(x).iter().zip(dy).map(|(&v, &d)| d / v).collect();
                out.push((x, dx));
            }
            &Op::Clamp { x, lo, hi } => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v >= lo && v <= hi { d } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            &Op::Add(a, b) => {
                out.push((a, dy.to_vec()));
                out.push((b, dy.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, dy.to_vec()));
                out.push((b, dy.iter().map(|d| -d).collect()));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    out.push((a, self.value(b).iter().zip(dy).map(|(v, d)| v * d).collect()));
                }
                if self.rg(b) {
                    out.push((b, self.value(a).iter().zip(dy).map(|(v, d)| v * d).collect()));
                }
            }
            &Op::Affine { x, scale } => out.push((x, dy.iter().map(|d| d * scale).collect())),
            &Op::Sum(x) => out.push((x, vec![dy[0]; self.value(x).len()])),
            &Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let inv = 1.0 / axis_len as f64;
                let mut dx = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    for a in 0..axis_len {
                        let base = (o * axis_len + a) * inner;
                        for j in 0..inner {
                            dx[base + j] = dy[o * inner + j] * inv;
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Transpose { x, rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = dy[c * rows + r];
                    }
                }
                out.push((x, dx));
            }
            &Op::Reshape(x) => out.push((x, dy.to_vec())),
            Op::ChannelNorm {
                x,
                gain,
                bias,
                channels,
                extent,
                span,
                xhat,
                inv_std,
            } => {
                let (channels, extent, span) = (*channels, *extent, *span);
                let gv = self.value(*gain);
                let mut dgain = vec![0.0; channels];
                let mut dbias = vec![0.0; channels];
                let mut dx = vec![0.0; dy.len()];
                let mut dh = vec![0.0; span];
                for (seg_idx, is) in inv_std.iter().enumerate() {
                    let base = seg_idx * span;
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for (i, slot) in dh.iter_mut().enumerate() {
                        let idx = base + i;
                        let c = (idx / extent) % channels;
                        let (d, h) = (dy[idx], xhat[idx]);
                        dgain[c] += d * h;
                        dbias[c] += d;
                        *slot = d * gv[c];
                        sum_d += *slot;
                        sum_dh += *slot * h;
                    }
                    let n = span as f64;
                    for (i, d) in dh.iter().enumerate() {
                        let idx = base + i;
                        dx[idx] = is * (d - sum_d / n - xhat[idx] * sum_dh / n);
                    }
                }
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if self.rg(*gain) {
                    out.push((*gain, dgain));
                }
                if self.rg(*bias) {
                    out.push((*bias, dbias));
                }
            }
            &Op::AvgPool2d { x, channels, h, w, k } => {
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; channels * h * w];
                for c in 0..channels {
                    for yy in 0..ho * k {
                        for xx in 0..wo * k {
                            dx[(c * h + yy) * w + xx] = dy[(c * ho + yy / k) * wo + xx / k] * inv;
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::AdaptiveAvgPool1d { x, rows, t_in, bins } => {
                let mut dx = vec![0.0; rows * t_in];
                for r in 0..rows {
                    for i in 0..bins {
                        let (s, e) = adaptive_bin(i, bins, t_in);
                        let share = dy[r * bins + i] / (e - s) as f64;
                        for t in s..e {
                            dx[r * t_in + t] += share;
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Map { x, derivative } => {
                let dx = self.value(x).iter().zip(dy).map(|(&v, &d)| d * derivative(v)).collect();
                out.push((x, dx));
            }
        }
        out.retain(|(v, _)| self.rg(*v));
        out
    }
}
