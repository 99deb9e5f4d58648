//! Recording tape and reverse-mode differentiation.
//!
//! Every op appends a node holding its output value; nodes are stored in creation
//! order, so a reverse sweep over the node list is a valid topological order for
//! the backward pass. Gradients are only propagated into nodes that (transitively)
//! depend on a leaf created with `requires_grad`.

use crate::error::{precondition, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{strides_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied unary op: `(input, output, d_output) -> d_input`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    PadEnd { x: Var, axis: usize },
    BroadcastTo(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Bilinear(Var),
    Custom { x: Var, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Normalization epsilon shared by layer and instance norm.
pub const NORM_EPS: f64 = 1e-5;

/// Single-threaded recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    flops: u64,
    audit: Option<Vec<Vec<usize>>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .field("flops", &self.flops)
            .finish()
    }
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

    /// Multiply-add FLOPs (2 per MAC) of every conv, linear and matmul recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Starts recording the shape of every buffer the tape allocates.
    pub fn enable_shape_audit(&mut self) {
        self.audit = Some(Vec::new());
    }

    pub fn audited_shapes(&self) -> &[Vec<usize>] {
        self.audit.as_deref().unwrap_or(&[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a `requires_grad` leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients in `backward`.
    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.set_requires_grad(requires_grad);
        t.zero_grad();
        self.record(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Clears leaf gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.backward_done = false;
    }

    fn record(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if let Some(a) = &mut self.audit {
            a.push(value.shape().to_vec());
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.record(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(name, out, op, &[x])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", x, Op::AddScalar(x), |v| v + s)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, Op::Gelu(x), kernels::gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, Op::Softplus(x), kernels::softplus)
    }

    /// User-defined unary op with an explicit backward rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: impl Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + 'static,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        self.push(
            "custom",
            out,
            Op::Custom {
                x,
                backward: Box::new(backward),
            },
            &[x],
        )
    }

    // ---- reductions --------------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it as an extent-1 axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push("sum_axis", Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len)
    }

    /// Mean over the spatial axes of a `[B, C, H, W]` map, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(precondition("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let m = self.mean_axis(flat, 2)?;
        self.reshape(m, &[s[0], s[1]])
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    z += e;
                }
                let inv = 1.0 / z;
                for l in 0..len {
                    out[base + l * inner] *= inv;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x])
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: t.shape().to_vec(),
                got: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(precondition("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let in_strides = t.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![0.0; t.numel()];
        kernels::strided_gather(&out_shape, &src_strides, t.data(), &mut out);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| precondition("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: base.clone(),
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let t = self.value(x);
        let (outer, full, inner) = kernels::split_axis(t.shape(), axis);
        if len == 0 || start + len > full {
            return Err(precondition("narrow", format!("range {start}..{} exceeds extent {full}", start + len)));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("narrow", Tensor::from_parts(shape, out), Op::Narrow { x, axis, start }, &[x])
    }

    /// Appends `amount` zeros at the end of `axis`.
    pub fn pad_end(&mut self, x: Var, axis: usize, amount: usize) -> Result<Var> {
        self.check_axis("pad_end", x, axis)?;
        if amount == 0 {
            return Ok(x);
        }
        let t = self.value(x);
        let (outer, len, inner) = kernels::split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * (len + amount) * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            out.extend(std::iter::repeat(0.0).take(amount * inner));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] += amount;
        self.push("pad_end", Tensor::from_parts(shape, out), Op::PadEnd { x, axis }, &[x])
    }

    /// Expands extent-1 axes to `shape` (same rank). The only general broadcast on the tape.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let ok = t.rank() == shape.len()
            && t.shape().iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        let strides = broadcast_strides(t.shape(), shape);
        let mut out = vec![0.0; shape.iter().product()];
        kernels::strided_gather(shape, &strides, t.data(), &mut out);
        self.push("broadcast_to", Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(x), &[x])
    }

    // ---- linear algebra ----------------------------------------------------

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` plus optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(precondition("conv2d", format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![ws[0], xs[1], ws[2], ws[3]],
                got: ws,
            });
        }
        if stride == 0 {
            return Err(precondition("conv2d", "stride must be at least 1"));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(precondition("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: vec![ws[0]],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let (batch, cout) = (xs[0], ws[0]);
        let g = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let (k, p) = (g.patch(), g.positions());
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![0.0; batch * cout * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        for n in 0..batch {
            let xn = &xin[n * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
            let cols_ref: &[f64] = if g.is_pointwise() {
                xn
            } else {
                kernels::im2col(xn, &g, &mut cols);
                &cols
            };
            let on = &mut out[n * cout * p..(n + 1) * cout * p];
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data().iter().enumerate() {
                    on[c * p..(c + 1) * p].fill(bv);
                }
            }
            kernels::gemm(cout, k, p, 1.0, wt, false, cols_ref, false, if b.is_some() { 1.0 } else { 0.0 }, on);
        }
        self.flops += 2 * (batch * cout * k * p) as u64;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "conv2d",
            Tensor::from_parts(vec![batch, cout, g.ho, g.wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            &inputs,
        )
    }

    /// `x[..., Din] · w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != din {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                expected: vec![din, ws.last().copied().unwrap_or(0)],
                got: ws,
            });
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    expected: vec![dout],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let m = self.value(x).numel() / din;
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(
            m,
            din,
            dout,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        self.flops += 2 * (m * din * dout) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs)
    }

    /// Batched matrix product over the last two axes; leading axes must agree.
    /// `ta`/`tb` transpose the respective operand's last two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: sa,
                got: sb,
            });
        }
        let r = sa.len();
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(precondition("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                ka,
                n,
                1.0,
                &ad[i * m * ka..(i + 1) * m * ka],
                ta,
                &bd[i * ka * n..(i + 1) * ka * n],
                tb,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.flops += 2 * (batch * m * ka * n) as u64;
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    // ---- normalization and resampling --------------------------------------

    /// Normalizes over the last axis, then applies per-channel `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    expected: vec![d],
                    got: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            normalize_group(&xd[r * d..(r + 1) * d], &mut xhat[r * d..(r + 1) * d], &mut rstd[r]);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, &v)| v * g[i % d] + b[i % d]).collect();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-sample, per-channel normalization over `H x W` with per-channel affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(precondition("instance_norm", format!("expected rank 4, got {shape:?}")));
        }
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm",
                    expected: vec![c],
                    got: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let groups = xd.len() / hw;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; groups];
        for gi in 0..groups {
            normalize_group(&xd[gi * hw..(gi + 1) * hw], &mut xhat[gi * hw..(gi + 1) * hw], &mut rstd[gi]);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        self.push(
            "instance_norm",
            Tensor::from_parts(shape, out),
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Align-corners-false bilinear resampling of `[B, C, H, W]` to `out_h x out_w`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(precondition("bilinear_resize", format!("expected rank 4, got {s:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(precondition("bilinear_resize", "output extent must be at least 1"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let ty = kernels::bilinear_taps(out_h, h);
        let tx = kernels::bilinear_taps(out_w, w);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        self.push(
            "bilinear_resize",
            Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out),
            Op::Bilinear(x),
            &[x],
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients land in `requires_grad` leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&gy)?;
                continue;
            }
            let contributions = self.input_grads(i, &gy);
            for (v, g) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                if let Some(a) = &mut self.audit {
                    a.push(self.nodes[v.0].value.shape().to_vec());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `i` for every input that needs a gradient.
    fn input_grads(&self, i: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let bd = val(*b);
                if self.needs(*a) {
                    out.push((*a, gy.iter().zip(bd).map(|(g, d)| g / d).collect()));
                }
                if self.needs(*b) {
                    let g = gy.iter().zip(y).zip(bd).map(|((g, q), d)| -g * q / d).collect();
                    out.push((*b, g));
                }
            }
            Op::Scale(x, s) => out.push((*x, gy.iter().map(|g| g * s).collect())),
            Op::AddScalar(x) => out.push((*x, gy.to_vec())),
            Op::Gelu(x) => {
                out.push((*x, gy.iter().zip(val(*x)).map(|(g, &v)| g * kernels::gelu_grad(v)).collect()));
            }
            Op::Relu(x) => {
                out.push((*x, gy.iter().zip(val(*x)).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => out.push((*x, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())),
            Op::Softplus(x) => {
                out.push((*x, gy.iter().zip(val(*x)).map(|(g, &v)| g * kernels::sigmoid(v)).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        g[(o * len + l) * inner..][..inner].copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, g));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|l| gy[base + l * inner] * y[base + l * inner]).sum();
                        for l in 0..len {
                            let k = base + l * inner;
                            g[k] = y[k] * (gy[k] - dot);
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Permute { x, perm } => {
                let in_shape = self.shape(*x);
                let out_shape = node.value.shape();
                let in_strides = strides_of(in_shape);
                let dst_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut g = vec![0.0; gy.len()];
                kernels::strided_scatter_add(out_shape, &dst_strides, gy, &mut g);
                out.push((*x, g));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            g.extend_from_slice(&gy[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                        }
                        out.push((p, g));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = kernels::split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut g = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    g[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, g));
            }
            Op::PadEnd { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                let full = node.value.shape()[*axis];
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    g.extend_from_slice(&gy[o * full * inner..(o * full + len) * inner]);
                }
                out.push((*x, g));
            }
            Op::BroadcastTo(x) => {
                let in_shape = self.shape(*x);
                let out_shape = node.value.shape();
                let strides = broadcast_strides(in_shape, out_shape);
                let mut g = vec![0.0; self.value(*x).numel()];
                kernels::strided_scatter_add(out_shape, &strides, gy, &mut g);
                out.push((*x, g));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                out.extend(self.conv2d_backward(*x, *w, *b, *stride, *pad, gy));
            }
            Op::Linear { x, w, b } => {
                let din = self.shape(*w)[0];
                let dout = self.shape(*w)[1];
                let m = gy.len() / dout;
                if self.needs(*x) {
                    let mut g = vec![0.0; m * din];
                    kernels::gemm(m, dout, din, 1.0, gy, false, val(*w), true, 0.0, &mut g);
                    out.push((*x, g));
                }
                if self.needs(*w) {
                    let mut g = vec![0.0; din * dout];
                    kernels::gemm(din, m, dout, 1.0, val(*x), true, gy, false, 0.0, &mut g);
                    out.push((*w, g));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut g = vec![0.0; dout];
                    for row in gy.chunks(dout) {
                        g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    out.push((b, g));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (ar, ac) = (sa[r - 2], sa[r - 1]);
                let sb = self.shape(*b);
                let (br, bc) = (sb[r - 2], sb[r - 1]);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let batch = gy.len() / (m * n);
                let (ad, bd) = (val(*a), val(*b));
                if self.needs(*a) {
                    let mut g = vec![0.0; ad.len()];
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gi = &mut g[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // dA_stored[k, m] = op(B) · dC^T
                            kernels::gemm(k, n, m, 1.0, bi, *tb, gyi, true, 0.0, gi);
                        } else {
                            // dA[m, k] = dC · op(B)^T
                            kernels::gemm(m, n, k, 1.0, gyi, false, bi, !*tb, 0.0, gi);
                        }
                    }
                    out.push((*a, g));
                }
                if self.needs(*b) {
                    let mut g = vec![0.0; bd.len()];
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gi = &mut g[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // dB_stored[n, k] = dC^T · op(A)
                            kernels::gemm(n, m, k, 1.0, gyi, true, ai, *ta, 0.0, gi);
                        } else {
                            // dB[k, n] = op(A)^T · dC
                            kernels::gemm(k, m, n, 1.0, ai, !*ta, gyi, false, 0.0, gi);
                        }
                    }
                    out.push((*b, g));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                out.extend(self.norm_backward(*x, *gamma, *beta, xhat, rstd, gy, d, |i| i % d));
            }
            Op::InstanceNorm { x, gamma, beta, xhat, rstd } => {
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                out.extend(self.norm_backward(*x, *gamma, *beta, xhat, rstd, gy, hw, |i| (i / hw) % c));
            }
            Op::Bilinear(x) => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let ty = kernels::bilinear_taps(oh, h);
                let tx = kernels::bilinear_taps(ow, w);
                let mut g = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &gy[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = src[oy * ow + ox];
                            dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += v * ly * (1.0 - lx);
                            dst[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::Custom { x, backward } => out.push((*x, backward(self.value(*x), &node.value, gy))),
        }
        out
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gy: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (batch, cout) = (xs[0], ws[0]);
        let g = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let (k, p) = (g.patch(), g.positions());
        let plane = g.cin * g.h * g.w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = Vec::new();
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let mut dw = if need_w { vec![0.0; cout * k] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; batch * plane] } else { Vec::new() };
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        let mut dcols = if need_x && !g.is_pointwise() { vec![0.0; k * p] } else { Vec::new() };
        for n in 0..batch {
            let gyn = &gy[n * cout * p..(n + 1) * cout * p];
            if need_w {
                let xn = &xd[n * plane..(n + 1) * plane];
                let cols_ref: &[f64] = if g.is_pointwise() {
                    xn
                } else {
                    kernels::im2col(xn, &g, &mut cols);
                    &cols
                };
                kernels::gemm(cout, p, k, 1.0, gyn, false, cols_ref, true, 1.0, &mut dw);
            }
            if need_x {
                let dxn = &mut dx[n * plane..(n + 1) * plane];
                if g.is_pointwise() {
                    kernels::gemm(k, cout, p, 1.0, wd, true, gyn, false, 0.0, dxn);
                } else {
                    kernels::gemm(k, cout, p, 1.0, wd, true, gyn, false, 0.0, &mut dcols);
                    kernels::col2im_add(&dcols, &g, dxn);
                }
            }
        }
        if need_x {
            out.push((x, dx));
        }
        if need_w {
            out.push((w, dw));
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut db = vec![0.0; cout];
            for n in 0..batch {
                for (c, acc) in db.iter_mut().enumerate() {
                    *acc += gy[(n * cout + c) * p..(n * cout + c + 1) * p].iter().sum::<f64>();
                }
            }
            out.push((b, db));
        }
        out
    }

    /// Shared backward for normalizations whose groups are contiguous runs of `group`
    /// elements; `channel(i)` maps a flat index to its affine parameter index.
    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        rstd: &[f64],
        gy: &[f64],
        group: usize,
        channel: impl Fn(usize) -> usize,
    ) -> Vec<(Var, Vec<f64>)> {
        let gd = self.value(gamma).data();
        let mut out = Vec::new();
        if self.needs(x) {
            let mut dx = vec![0.0; gy.len()];
            for (gi, &rs) in rstd.iter().enumerate() {
                let range = gi * group..(gi + 1) * group;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for i in range.clone() {
                    let d = gy[i] * gd[channel(i)];
                    mean_d += d;
                    mean_dx += d * xhat[i];
                }
                mean_d /= group as f64;
                mean_dx /= group as f64;
                for i in range {
                    let d = gy[i] * gd[channel(i)];
                    dx[i] = rs * (d - mean_d - xhat[i] * mean_dx);
                }
            }
            out.push((x, dx));
        }
        let c = gd.len();
        if self.needs(gamma) {
            let mut dg = vec![0.0; c];
            for i in 0..gy.len() {
                dg[channel(i)] += gy[i] * xhat[i];
            }
            out.push((gamma, dg));
        }
        if self.needs(beta) {
            let mut db = vec![0.0; c];
            for (i, g) in gy.iter().enumerate() {
                db[channel(i)] += g;
            }
            out.push((beta, db));
        }
        out
    }
}

fn normalize_group(x: &[f64], xhat: &mut [f64], rstd: &mut f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + NORM_EPS).sqrt();
    for (o, v) in xhat.iter_mut().zip(x) {
        *o = (v - mean) * rs;
    }
    *rstd = rs;
}

fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides_of(in_shape);
    in_shape
        .iter()
        .zip(out_shape)
        .zip(s)
        .map(|((&i, &o), st)| if i == 1 && o != 1 { 0 } else { st })
        .collect()
}
