use super::kernels::{self, conv_out_len, ConvGeom, Padding};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-defined op.
///
/// Receives the upstream gradient, the input values and the output value,
/// and returns one optional gradient per input (`None` for inputs that do
/// not need one).
pub trait Backward {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

impl<F> Backward for F
where
    F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>,
{
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        self(grad_out, inputs, output)
    }
}

/// Stride and padding of a 2-D correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: Padding,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    TileSpatial(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation tape for one forward/backward pass.
///
/// Nodes are stored in recording order, which is also a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
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

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, value, &[a], op)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, value, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, |v| v + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map("leaky_relu", a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::LogDomain(bad));
        }
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map("neg", a, |v| -v, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map("abs", a, f64::abs, Op::Abs(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Matrix product of `[M×K]` and `[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Strided 2-D cross-correlation of `[C_in×F×T]` with `[C_out×C_in×k_f×k_t]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (out_f, out_t) = match (
            conv_out_len(si[1], spec.padding.f, sk[2], spec.stride.0),
            conv_out_len(si[2], spec.padding.t, sk[3], spec.stride.1),
        ) {
            (Some(f), Some(t)) => (f, t),
            _ => {
                return Err(TensorError::KernelTooLarge {
                    kernel: sk,
                    input: si,
                })
            }
        };
        let geom = ConvGeom {
            channels: si[0],
            in_f: si[1],
            in_t: si[2],
            k_f: sk[2],
            k_t: sk[3],
            s_f: spec.stride.0,
            s_t: spec.stride.1,
            pad: spec.padding,
            out_f,
            out_t,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let c_out = sk[0];
        let mut out = vec![0.0; c_out * geom.col_cols()];
        kernels::gemm_nn(self.value(kernel).data(), &cols, &mut out, c_out, geom.col_rows(), geom.col_cols());
        let value = Tensor::new(vec![c_out, out_f, out_t], out)?;
        let keep = if self.requires_grad(kernel) { cols } else { Vec::new() };
        self.push(
            "conv2d",
            value,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: keep,
            },
        )
    }

    /// Adjoint of [`Graph::conv2d`]: maps `[A×F×T]` to `[B×out.0×out.1]` with
    /// a `[A×B×k_f×k_t]` kernel. The output extent is declared explicitly and
    /// must be one that `conv2d` with the same stride/padding maps back to
    /// `F×T`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, spec: Conv2dSpec, out: (usize, usize)) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: si,
                rhs: sk,
            });
        }
        let fwd_f = conv_out_len(out.0, spec.padding.f, sk[2], spec.stride.0);
        let fwd_t = conv_out_len(out.1, spec.padding.t, sk[3], spec.stride.1);
        if fwd_f != Some(si[1]) || fwd_t != Some(si[2]) {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: si,
                rhs: vec![sk[1], out.0, out.1],
            });
        }
        let geom = ConvGeom {
            channels: sk[1],
            in_f: out.0,
            in_t: out.1,
            k_f: sk[2],
            k_t: sk[3],
            s_f: spec.stride.0,
            s_t: spec.stride.1,
            pad: spec.padding,
            out_f: si[1],
            out_t: si[2],
        };
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        kernels::gemm_tn(
            self.value(kernel).data(),
            self.value(input).data(),
            &mut cols,
            geom.col_rows(),
            si[0],
            geom.col_cols(),
        );
        let data = kernels::col2im(&cols, &geom);
        let value = Tensor::new(vec![sk[1], out.0, out.1], data)?;
        self.push(
            "conv_transpose2d",
            value,
            &[input, kernel],
            Op::ConvTranspose2d { input, kernel, geom },
        )
    }

    /// Per-channel normalization over all trailing axes of `[C×…]`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "instance_norm",
                msg: format!("expected [C×…], got {shape:?}"),
            });
        }
        let c = shape[0];
        let n = shape[1..].iter().product::<usize>();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = &src[ch * n..(ch + 1) * n];
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
        }
        let value = Tensor::new(shape, xhat.clone())?;
        self.push("instance_norm", value, &[x], Op::InstanceNorm { x, xhat, inv_std })
    }

    /// `out[c, …] = x[c, …] · scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        for v in [scale, shift] {
            if self.shape(v) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_affine",
                    lhs: shape,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let n = self.value(x).len() / c;
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i / n] + b[i / n])
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("channel_affine", value, &[x, scale, shift], Op::ChannelAffine { x, scale, shift })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, &[x], Op::Slice { x, axis, start })
    }

    /// Sums over `axes`; the result drops those axes (a full reduction has
    /// shape `[1]`).
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(TensorError::Invalid {
                op: "sum",
                msg: format!("axes {axes:?} out of range for {shape:?}"),
            });
        }
        let (out_shape, map) = reduce_map(&shape, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out[o] += v;
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("sum", value, &[x], Op::Sum { x, axes })
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        let s = self.sum(x, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, &[x], Op::Permute(x, perm.to_vec()))
    }

    /// Repeats a `[C]` vector over an `f×t` plane, giving `[C×f×t]`.
    pub fn tile_spatial(&mut self, z: Var, f: usize, t: usize) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape.len() != 1 {
            return Err(TensorError::Invalid {
                op: "tile_spatial",
                msg: format!("expected a vector, got {shape:?}"),
            });
        }
        let n = f * t;
        let mut data = Vec::with_capacity(shape[0] * n);
        for &v in self.value(z).data() {
            data.extend(std::iter::repeat_n(v, n));
        }
        let value = Tensor::new(vec![shape[0], f, t], data)?;
        self.push("tile_spatial", value, &[z], Op::TileSpatial(z))
    }

    /// Records an op whose value is computed by the caller and whose
    /// vector-Jacobian product is supplied by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Result<Var> {
        self.push(
            "custom",
            value,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and is reachable from `loss` gets one; fan-out contributions
    /// are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(g) if node.requires_grad => Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let unary = |grads: &mut [Option<Vec<f64>>], a: Var, f: &dyn Fn(usize, f64) -> f64| {
            if self.wants(a) {
                let contrib: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
                accumulate_owned(&mut grads[a.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                unary(grads, *b, &|_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                unary(grads, *a, &|i, gi| gi * y[i]);
                unary(grads, *b, &|i, gi| gi * x[i]);
            }
            Op::Scale(a, s) => unary(grads, *a, &|_, gi| gi * s),
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|i, gi| if x[i] > 0.0 { gi } else { 0.0 });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|i, gi| if x[i] > 0.0 { gi } else { gi * slope });
            }
            Op::Sigmoid(a) => unary(grads, *a, &|i, gi| gi * out[i] * (1.0 - out[i])),
            Op::Tanh(a) => unary(grads, *a, &|i, gi| gi * (1.0 - out[i] * out[i])),
            Op::Exp(a) => unary(grads, *a, &|i, gi| gi * out[i]),
            Op::Log(a) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|i, gi| gi / x[i]);
            }
            Op::Neg(a) => unary(grads, *a, &|_, gi| -gi),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|i, gi| {
                    if x[i] > 0.0 {
                        gi
                    } else if x[i] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                unary(grads, *a, &|i, gi| if x[i] >= *lo && x[i] <= *hi { gi } else { 0.0 });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(self.value(*a).data(), g, &mut db, k, m, n);
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let c_out = self.shape(*kernel)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; c_out * rows];
                    kernels::gemm_nt(g, cols, &mut dk, c_out, ncols, rows);
                    accumulate_owned(&mut grads[kernel.0], dk);
                }
                if self.wants(*input) {
                    let mut dcol = vec![0.0; rows * ncols];
                    kernels::gemm_tn(self.value(*kernel).data(), g, &mut dcol, rows, c_out, ncols);
                    accumulate_owned(&mut grads[input.0], kernels::col2im(&dcol, geom));
                }
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                let a_ch = self.shape(*input)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let dcol = kernels::im2col(g, geom);
                if self.wants(*input) {
                    let mut dx = vec![0.0; a_ch * ncols];
                    kernels::gemm_nn(self.value(*kernel).data(), &dcol, &mut dx, a_ch, rows, ncols);
                    accumulate_owned(&mut grads[input.0], dx);
                }
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; a_ch * rows];
                    kernels::gemm_nt(self.value(*input).data(), &dcol, &mut dk, a_ch, ncols, rows);
                    accumulate_owned(&mut grads[kernel.0], dk);
                }
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                if self.wants(*x) {
                    let c = inv_std.len();
                    let n = g.len() / c;
                    let mut dx = vec![0.0; g.len()];
                    for ch in 0..c {
                        let gs = &g[ch * n..(ch + 1) * n];
                        let xs = &xhat[ch * n..(ch + 1) * n];
                        let mean_g = gs.iter().sum::<f64>() / n as f64;
                        let mean_gx = kernels::dot(gs, xs) / n as f64;
                        for i in 0..n {
                            dx[ch * n + i] = inv_std[ch] * (gs[i] - mean_g - xs[i] * mean_gx);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(*x).data();
                let s = self.value(*scale).data();
                let c = s.len();
                let n = xv.len() / c;
                unary(grads, *x, &|i, gi| gi * s[i / n]);
                if self.wants(*scale) {
                    let ds = (0..c).map(|ch| kernels::dot(&g[ch * n..(ch + 1) * n], &xv[ch * n..(ch + 1) * n])).collect();
                    accumulate_owned(&mut grads[scale.0], ds);
                }
                if self.wants(*shift) {
                    let db = (0..c).map(|ch| g[ch * n..(ch + 1) * n].iter().sum()).collect();
                    accumulate_owned(&mut grads[shift.0], db);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            part.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        accumulate_owned(&mut grads[v.0], part);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let shape = self.shape(*x);
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis] * inner;
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        dx[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            Op::Sum { x, axes } => {
                if self.wants(*x) {
                    let (_, map) = reduce_map(self.shape(*x), axes);
                    accumulate_owned(&mut grads[x.0], map.iter().map(|&o| g[o]).collect());
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate_owned(&mut grads[x.0], permute_data(g, node.value.shape(), &inv));
                }
            }
            Op::TileSpatial(z) => {
                if self.wants(*z) {
                    let c = self.value(*z).len();
                    let n = g.len() / c;
                    let dz = (0..c).map(|ch| g[ch * n..(ch + 1) * n].iter().sum()).collect();
                    accumulate_owned(&mut grads[z.0], dz);
                }
            }
            Op::Custom { inputs, rule } => {
                let go = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g.to_vec(),
                };
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = rule.backward(&go, &vals, &node.value);
                for (&v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        if self.wants(v) {
                            accumulate_owned(&mut grads[v.0], part.data);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// For a reduction over `axes`, the output shape and the output flat index
/// of every input element.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&a| shape[a]).collect()
    };
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = vec![0; n];
    let mut idx = vec![0usize; shape.len()];
    for slot in map.iter_mut() {
        *slot = kept.iter().enumerate().map(|(k, &a)| idx[a] * out_strides[k]).sum::<usize>();
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        out.push(src[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
