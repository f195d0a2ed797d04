//! Record-replay reverse mode.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the local derivative. [`Tape::backward`] walks the nodes in
//! reverse recording order exactly once.

use super::kernels::{self, ConvGeom, MatRef};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias { input: Var, bias: Var, inner: usize },
    Conv2d { input: Var, weight: Var, geom: ConvGeom, out_channels: usize },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { input: Var, indices: Vec<usize> },
    DropColumn { input: Var, indices: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    /// Records a leaf; gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    /// Gradient of the last backward output with respect to `var`, if it was
    /// tracked and reached.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Copy of the leaf value with its `grad` field populated.
    pub fn grad_tensor(&self, var: Var) -> Option<Tensor> {
        let g = self.grad(var)?;
        let mut t = self.value(var).clone().with_requires_grad(true);
        t.set_grad(g.to_vec()).ok()?;
        Some(t)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = &self.nodes[x.0].value;
        let data: Vec<f64> = value.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(value.shape().to_vec(), data).expect("shape preserved");
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, needs))
    }

    fn check_finite(&self, var: Var, what: &str) -> Result<Var> {
        if self.nodes[var.0].value.all_finite() {
            Ok(var)
        } else {
            Err(Error::Numeric(format!("{what} produced NaN or Inf")))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)?;
        self.check_finite(out, "div")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + offset)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, Op::Exp(x), f64::exp);
        self.check_finite(out, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, Op::Log(x), f64::ln);
        self.check_finite(out, "log")
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, Op::Sqrt(x), f64::sqrt);
        self.check_finite(out, "sqrt")
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let out = self.unary(x, Op::Powf(x, exponent), |v| v.powf(exponent));
        self.check_finite(out, "powf")
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let s: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), needs))
    }

    fn rows_cols(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension(format!("{what} expects a 2-D tensor, got {s:?}"))),
        }
    }

    /// Row sums of a (B, C) tensor, giving (B,).
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x, "sum_rows")?;
        let data: Vec<f64> = self.data(x).chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(data), Op::SumRows(x), needs))
    }

    fn rowwise(&mut self, x: Var, what: &str, op: Op, f: fn(&[f64], &mut [f64])) -> Result<Var> {
        let (_, c) = self.rows_cols(x, what)?;
        if c == 0 {
            return Err(Error::Dimension(format!("{what} over zero classes")));
        }
        let value = &self.nodes[x.0].value;
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{what} input contains NaN or Inf")));
        }
        let mut data = vec![0.0; value.len()];
        for (src, dst) in value.data().chunks(c).zip(data.chunks_mut(c)) {
            f(src, dst);
        }
        let out = Tensor::new(value.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, op, needs))
    }

    /// Row-wise softmax of (B, C) logits with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, "softmax", Op::Softmax(x), kernels::softmax_row)
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, "log_softmax", Op::LogSoftmax(x), kernels::log_softmax_row)
    }

    /// Picks `x[b, indices[b]]` from a (B, C) tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (b, c) = self.rows_cols(x, "gather")?;
        check_indices(indices, b, c)?;
        let d = self.data(x);
        let data: Vec<f64> = indices.iter().enumerate().map(|(r, &i)| d[r * c + i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(data),
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Removes column `indices[b]` from row `b`, giving (B, C-1).
    pub fn drop_column(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (b, c) = self.rows_cols(x, "drop_column")?;
        check_indices(indices, b, c)?;
        if c < 2 {
            return Err(Error::Dimension("drop_column needs at least two columns".into()));
        }
        let d = self.data(x);
        let mut data = Vec::with_capacity(b * (c - 1));
        for (r, &skip) in indices.iter().enumerate() {
            let row = &d[r * c..(r + 1) * c];
            data.extend_from_slice(&row[..skip]);
            data.extend_from_slice(&row[skip + 1..]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, c - 1], data)?,
            Op::DropColumn {
                input: x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// (M, K) · (K, N) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a, "matmul lhs")?;
        let (k2, n) = self.rows_cols(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: ({m}, {k}) x ({k2}, {n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Adds `bias` (length = axis-1 size) broadcast over every other axis.
    /// Serves dense layers (B, N) and conv feature maps (B, C, H, W).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match axis 1 of {shape:?}",
                self.shape(bias)
            )));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let add = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::AddBias {
                input: x,
                bias,
                inner,
            },
            needs,
        ))
    }

    /// Stride-1 2-D convolution with symmetric zero padding.
    /// `input` is (B, C_in, H, W), `weight` is (C_out, C_in, kh, kw).
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let (batch, channels, height, width) = match *self.shape(input) {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::Dimension(format!("conv2d input must be 4-D, got {s:?}"))),
        };
        let (out_channels, kh, kw) = match *self.shape(weight) {
            [o, c, kh, kw] if c == channels => (o, kh, kw),
            ref s => {
                return Err(Error::Dimension(format!(
                    "conv2d weight {s:?} incompatible with {channels} input channels"
                )))
            }
        };
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::Dimension("conv2d kernel larger than padded input".into()));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            pad,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; batch * out_channels * cols];
        let x = self.data(input);
        let w = self.data(weight);
        let in_len = channels * height * width;
        for b in 0..batch {
            kernels::im2col(&x[b * in_len..(b + 1) * in_len], geom, &mut col);
            kernels::gemm(
                MatRef::new(w, out_channels, rows),
                MatRef::new(&col, rows, cols),
                &mut out[b * out_channels * cols..(b + 1) * out_channels * cols],
                0.0,
            );
        }
        let shape = vec![batch, out_channels, geom.out_h(), geom.out_w()];
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                weight,
                geom,
                out_channels,
            },
            needs,
        ))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = match *self.shape(input) {
            [b, c, h, w] if h >= 2 && w >= 2 => (b, c, h, w),
            ref s => return Err(Error::Dimension(format!("max_pool2 needs (B, C, H>=2, W>=2), got {s:?}"))),
        };
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![b, c, ho, wo], out)?,
            Op::MaxPool2 { input, argmax },
            needs,
        ))
    }

    /// Reverse pass from the scalar `output`.
    ///
    /// Gradients accumulate additively when a value fans out. A tape can be
    /// differentiated once; afterwards [`Tape::grad`] serves the results.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(xb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xa) {
                        *d += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let xb = self.data(*b);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(xb) {
                        *d += g / y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((d, g), y), q) in d.iter_mut().zip(g).zip(xb).zip(out) {
                        *d -= g * q / y;
                    }
                });
            }
            Op::Scale(x, f) => self.acc(grads, *x, |d| axpy(d, g, *f)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::Relu(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Exp(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y;
                }
            }),
            Op::Log(x) => {
                let xs = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xs) {
                        *d += g / v;
                    }
                })
            }
            Op::Sqrt(x) => self.acc(grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += g * 0.5 / y;
                    }
                }
            }),
            Op::Powf(x, e) => {
                let xs = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xs) {
                        *d += g * e * v.powf(e - 1.0);
                    }
                })
            }
            Op::ClampMin(x, floor) => {
                let xs = self.data(*x);
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xs) {
                        if v >= floor {
                            *d += g;
                        }
                    }
                })
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.data(*x).len() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SumRows(x) => {
                let c = self.shape(*x)[1];
                self.acc(grads, *x, |d| {
                    for (row, g) in d.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += g);
                    }
                })
            }
            Op::Softmax(x) => {
                let c = self.shape(*x)[1];
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let c = self.shape(*x)[1];
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let total: f64 = g.iter().sum();
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += g - y.exp() * total;
                        }
                    }
                })
            }
            Op::Gather { input, indices } => {
                let c = self.shape(*input)[1];
                self.acc(grads, *input, |d| {
                    for (r, (&k, g)) in indices.iter().zip(g).enumerate() {
                        d[r * c + k] += g;
                    }
                })
            }
            Op::DropColumn { input, indices } => {
                let c = self.shape(*input)[1];
                self.acc(grads, *input, |d| {
                    for (r, &skip) in indices.iter().enumerate() {
                        let src = &g[r * (c - 1)..(r + 1) * (c - 1)];
                        let dst = &mut d[r * c..(r + 1) * c];
                        axpy(&mut dst[..skip], &src[..skip], 1.0);
                        axpy(&mut dst[skip + 1..], &src[skip..], 1.0);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let gm = MatRef::new(g, m, n);
                let (xa, xb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| kernels::gemm(gm, MatRef::new(xb, k, n).t(), d, 1.0));
                self.acc(grads, *b, |d| kernels::gemm(MatRef::new(xa, m, k).t(), gm, d, 1.0));
            }
            Op::AddBias { input, bias, inner } => {
                let channels = self.shape(*bias)[0];
                self.acc(grads, *input, |d| axpy(d, g, 1.0));
                self.acc(grads, *bias, |d| {
                    for (j, chunk) in g.chunks((*inner).max(1)).enumerate() {
                        d[j % channels] += chunk.iter().sum::<f64>();
                    }
                })
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                out_channels,
            } => self.conv2d_backward(*input, *weight, *geom, *out_channels, g, grads),
            Op::MaxPool2 { input, argmax } => self.acc(grads, *input, |d| {
                for (&idx, g) in argmax.iter().zip(g) {
                    d[idx] += g;
                }
            }),
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        geom: ConvGeom,
        out_channels: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let batch = self.shape(input)[0];
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = out_channels * cols;
        let x = self.data(input);
        let w = self.data(weight);
        let mut col = vec![0.0; rows * cols];

        if self.needs(weight) {
            self.acc(grads, weight, |dw| {
                for b in 0..batch {
                    kernels::im2col(&x[b * in_len..(b + 1) * in_len], geom, &mut col);
                    kernels::gemm(
                        MatRef::new(&g[b * out_len..(b + 1) * out_len], out_channels, cols),
                        MatRef::new(&col, rows, cols).t(),
                        dw,
                        1.0,
                    );
                }
            });
        }
        if self.needs(input) {
            self.acc(grads, input, |dx| {
                for b in 0..batch {
                    kernels::gemm(
                        MatRef::new(w, out_channels, rows).t(),
                        MatRef::new(&g[b * out_len..(b + 1) * out_len], out_channels, cols),
                        &mut col,
                        0.0,
                    );
                    kernels::col2im_add(&col, geom, &mut dx[b * in_len..(b + 1) * in_len]);
                }
            });
        }
    }

    /// Runs `f` on the gradient buffer of `var`, allocating it on first use.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(var) {
            return;
        }
        let len = self.nodes[var.0].value.len();
        let buf = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn check_indices(indices: &[usize], rows: usize, cols: usize) -> Result<()> {
    if indices.len() != rows {
        return Err(Error::Dimension(format!(
            "{} indices for {rows} rows",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
        return Err(Error::Label(format!("index {bad} out of range for {cols} columns")));
    }
    Ok(())
}
