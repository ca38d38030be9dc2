//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every operator evaluates eagerly and
//! records its inputs plus whatever it needs for the backward rule. Node ids
//! are issued in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameter leaves borrow their values from a [`ParamStore`]; a graph is
//! confined to the thread that built it, and independent graphs over the same
//! store may be built concurrently.

use std::borrow::Cow;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{PetError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Arithmetic mode of a graph.
///
/// `F64` is the verification mode used by gradient checks. `F32` rounds every
/// operator output to single precision, which is what the training path runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Deliberate backward-rule corruption, used only as a negative control for
/// the gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackwardFault {
    #[default]
    None,
    /// Scales the GELU derivative by 1.01.
    GeluSlope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        input: NodeId,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Softmax {
        input: NodeId,
    },
    SliceCols {
        input: NodeId,
        start: usize,
    },
    ConcatCols {
        inputs: Vec<NodeId>,
    },
    TileRows {
        input: NodeId,
        copies: usize,
    },
    MeanRows {
        input: NodeId,
    },
    Combine {
        coeffs: NodeId,
        inputs: Vec<NodeId>,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    Sum {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    precision: Precision,
    params: Vec<(ParamId, NodeId)>,
    fault: BackwardFault,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact-erf GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_slope(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn out_shape_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = last;
    s
}

impl<'a> Graph<'a> {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            params: Vec::new(),
            fault: BackwardFault::None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = fault;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf with an explicit gradient requirement.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf borrowing a stored parameter. Requires a gradient iff the
    /// parameter is trainable. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let tensor = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Leaf,
            requires_grad: tensor.trainable(),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.push((id, node));
        node
    }

    /// Valid (unpadded) strided 1-D convolution: `[C_in, L] * [C_out, C_in, K] -> [C_out, L_out]`.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 2 || w.rank() != 3 {
            return Err(PetError::dim(
                "conv1d",
                format!("expected input [C_in, L] and weight [C_out, C_in, K], got {:?} and {:?}", x.shape(), w.shape()),
            ));
        }
        let (c_in, len) = (x.shape()[0], x.shape()[1]);
        let (c_out, w_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if w_in != c_in {
            return Err(PetError::dim("conv1d", format!("weight expects {w_in} input channels, input has {c_in}")));
        }
        if stride == 0 {
            return Err(PetError::dim("conv1d", "stride must be >= 1"));
        }
        if k > len {
            return Err(PetError::EmptyOutput {
                op: "conv1d",
                detail: format!("kernel {k} exceeds input length {len}"),
            });
        }
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(PetError::dim("conv1d", format!("bias has {} values for {c_out} channels", self.value(b).numel())));
            }
        }
        let l_out = (len - k) / stride + 1;
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; c_out * l_out];
        for c in 0..c_out {
            let row = &mut out[c * l_out..(c + 1) * l_out];
            for i in 0..c_in {
                let wk = &wd[(c * c_in + i) * k..(c * c_in + i + 1) * k];
                let xr = &xd[i * len..(i + 1) * len];
                for (t, o) in row.iter_mut().enumerate() {
                    let base = t * stride;
                    let mut acc = 0.0;
                    for (kk, wv) in wk.iter().enumerate() {
                        acc += wv * xr[base + kk];
                    }
                    *o += acc;
                }
            }
            if let Some(b) = bias {
                let bv = self.value(b).data()[c];
                row.iter_mut().for_each(|o| *o += bv);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new([c_out, l_out], out)?;
        Ok(self.push(value, Op::Conv1d { input, weight, bias, stride }, rg))
    }

    /// Affine map along the last axis: `x[..., D_in] @ W[D_in, D_out] + b[D_out]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if w.rank() != 2 || w.shape()[0] != x.last_dim() {
            return Err(PetError::dim(
                "linear",
                format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
            ));
        }
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        if let Some(b) = bias {
            if self.value(b).numel() != d_out {
                return Err(PetError::dim("linear", format!("bias has {} values for {d_out} outputs", self.value(b).numel())));
            }
        }
        let rows = x.rows();
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bd);
            }
        }
        for r in 0..rows {
            let o = &mut out[r * d_out..(r + 1) * d_out];
            for d in 0..d_in {
                let xv = xd[r * d_in + d];
                if xv == 0.0 {
                    continue;
                }
                let wr = &wd[d * d_out..(d + 1) * d_out];
                for (ov, wv) in o.iter_mut().zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
        let shape = out_shape_last(x.shape(), d_out);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(PetError::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_kernel(av.data(), bv.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(PetError::dim("transpose", format!("expected rank 2, got {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let out = transpose_kernel(x.data(), r, c);
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([c, r], out)?;
        Ok(self.push(value, Op::Transpose { input }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(PetError::Numeric(format!("layer_norm eps must be positive, got {eps}")));
        }
        let x = self.value(input);
        let c = x.last_dim();
        let g = self.value(gain);
        let s = self.value(shift);
        if g.numel() != c || s.numel() != c {
            return Err(PetError::dim(
                "layer_norm",
                format!("gain/shift sizes {}/{} do not match {c} channels", g.numel(), s.numel()),
            ));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..c {
                let h = (xr[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + s.data()[j];
            }
        }
        let rg = self.any_grad(&[input, gain, shift]);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                shift,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Gelu { input }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(PetError::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(input).data().iter().map(|v| v * factor).collect();
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(value, Op::Scale { input, factor }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(xr, or);
        }
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 2 || len == 0 || start + len > x.shape()[1] {
            return Err(PetError::dim("slice_cols", format!("{start}..{} of {:?}", start + len, x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&x.data()[row * c + start..row * c + start + len]);
        }
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([r, len], out)?;
        Ok(self.push(value, Op::SliceCols { input, start }, rg))
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| PetError::dim("concat_cols", "no inputs"))?;
        let rows = self.shape(first)[0];
        if inputs.iter().any(|&i| self.value(i).rank() != 2 || self.shape(i)[0] != rows) {
            return Err(PetError::dim("concat_cols", "inputs must be rank 2 with equal row counts"));
        }
        let total: usize = inputs.iter().map(|&i| self.shape(i)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in inputs {
                let c = self.shape(i)[1];
                out.extend_from_slice(&self.value(i).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = self.any_grad(inputs);
        let value = Tensor::new([rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols { inputs: inputs.to_vec() }, rg))
    }

    /// Stacks `copies` copies of a `[c, L]` tensor along axis 0: row `j` of the
    /// result is row `j mod c` of the input.
    pub fn tile_rows(&mut self, input: NodeId, copies: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 2 || copies == 0 {
            return Err(PetError::dim("tile_rows", format!("{copies} copies of {:?}", x.shape())));
        }
        let (c, l) = (x.shape()[0], x.shape()[1]);
        let out = x.data().repeat(copies);
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([c * copies, l], out)?;
        Ok(self.push(value, Op::TileRows { input, copies }, rg))
    }

    /// Mean over all axes but the last: `[..., C] -> [C]`.
    pub fn mean_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.last_dim();
        let rows = x.rows();
        let mut out = vec![0.0; c];
        for xr in x.data().chunks(c) {
            out.iter_mut().zip(xr).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let rg = self.any_grad(&[input]);
        let value = Tensor::new([c], out)?;
        Ok(self.push(value, Op::MeanRows { input }, rg))
    }

    /// `sum_k coeffs[k] * inputs[k]` over equally shaped inputs.
    pub fn combine(&mut self, coeffs: NodeId, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() || self.value(coeffs).numel() != inputs.len() {
            return Err(PetError::dim(
                "combine",
                format!("{} coefficients for {} inputs", self.value(coeffs).numel(), inputs.len()),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        if inputs.iter().any(|&i| self.shape(i) != shape.as_slice()) {
            return Err(PetError::dim("combine", "inputs must share one shape"));
        }
        let mut out = vec![0.0; shape.iter().product()];
        for (k, &i) in inputs.iter().enumerate() {
            let ck = self.value(coeffs).data()[k];
            out.iter_mut().zip(self.value(i).data()).for_each(|(o, v)| *o += ck * v);
        }
        let mut deps = inputs.to_vec();
        deps.push(coeffs);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Combine {
                coeffs,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// `logsumexp(logits) - logits[label]`, computed with max subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let l = self.value(logits);
        let k = l.numel();
        if label >= k {
            return Err(PetError::Index {
                op: "cross_entropy",
                detail: format!("label {label} out of range for {k} classes"),
            });
        }
        if l.data().iter().any(|v| !v.is_finite()) {
            return Err(PetError::Numeric("cross_entropy: non-finite logits".into()));
        }
        let mut probs = vec![0.0; k];
        softmax_into(l.data(), &mut probs);
        let m = l.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - l.data()[label];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(PetError::dim("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'_>, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>| match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (c_in, len) = (x.shape()[0], x.shape()[1]);
                let (c_out, k) = (w.shape()[0], w.shape()[2]);
                let l_out = node.value.shape()[1];
                if self.wants(*input) {
                    let mut dx = vec![0.0; c_in * len];
                    for c in 0..c_out {
                        let gr = &gy[c * l_out..(c + 1) * l_out];
                        for i in 0..c_in {
                            let wk = &w.data()[(c * c_in + i) * k..(c * c_in + i + 1) * k];
                            let dxr = &mut dx[i * len..(i + 1) * len];
                            for (t, g) in gr.iter().enumerate() {
                                let base = t * stride;
                                for (kk, wv) in wk.iter().enumerate() {
                                    dxr[base + kk] += g * wv;
                                }
                            }
                        }
                    }
                    acc(grads, *input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; w.numel()];
                    for c in 0..c_out {
                        let gr = &gy[c * l_out..(c + 1) * l_out];
                        for i in 0..c_in {
                            let xr = &x.data()[i * len..(i + 1) * len];
                            let dwk = &mut dw[(c * c_in + i) * k..(c * c_in + i + 1) * k];
                            for (kk, d) in dwk.iter_mut().enumerate() {
                                let mut s = 0.0;
                                for (t, g) in gr.iter().enumerate() {
                                    s += g * xr[t * stride + kk];
                                }
                                *d += s;
                            }
                        }
                    }
                    acc(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let db = gy.chunks(l_out).map(|r| r.iter().sum()).collect();
                    acc(grads, b, db);
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
                let rows = x.rows();
                if self.wants(*input) {
                    let mut dx = vec![0.0; rows * d_in];
                    for r in 0..rows {
                        let g = &gy[r * d_out..(r + 1) * d_out];
                        for d in 0..d_in {
                            let wr = &w.data()[d * d_out..(d + 1) * d_out];
                            dx[r * d_in + d] = g.iter().zip(wr).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(grads, *input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; d_in * d_out];
                    for r in 0..rows {
                        let g = &gy[r * d_out..(r + 1) * d_out];
                        for d in 0..d_in {
                            let xv = x.data()[r * d_in + d];
                            if xv == 0.0 {
                                continue;
                            }
                            dw[d * d_out..(d + 1) * d_out].iter_mut().zip(g).for_each(|(o, gv)| *o += xv * gv);
                        }
                    }
                    acc(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; d_out];
                    for g in gy.chunks(d_out) {
                        db.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                    }
                    acc(grads, b, db);
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let bt = transpose_kernel(bv.data(), k, n);
                    acc(grads, *a, matmul_kernel(gy, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = transpose_kernel(av.data(), m, k);
                    acc(grads, *b, matmul_kernel(&at, gy, k, m, n));
                }
            }
            Op::Transpose { input } => {
                let s = node.value.shape();
                acc(grads, *input, transpose_kernel(gy, s[0], s[1]));
            }
            Op::LayerNorm {
                input,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let g = self.value(*gain).data();
                if self.wants(*input) {
                    let mut dx = vec![0.0; gy.len()];
                    for (r, inv) in rstd.iter().enumerate() {
                        let gr = &gy[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..c {
                            let gh = gr[j] * g[j];
                            mean_gh += gh;
                            mean_ghx += gh * hr[j];
                        }
                        mean_gh /= c as f64;
                        mean_ghx /= c as f64;
                        for j in 0..c {
                            dx[r * c + j] = inv * (gr[j] * g[j] - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                    acc(grads, *input, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if self.wants(*shift) {
                    let mut ds = vec![0.0; c];
                    for gr in gy.chunks(c) {
                        ds.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                    acc(grads, *shift, ds);
                }
            }
            Op::Gelu { input } => {
                let bump = match self.fault {
                    BackwardFault::None => 1.0,
                    BackwardFault::GeluSlope => 1.01,
                };
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&x, g)| g * gelu_slope(x) * bump)
                    .collect();
                acc(grads, *input, dx);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(grads, *a, gy.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, gy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d = gy.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect();
                    acc(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gy.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect();
                    acc(grads, *b, d);
                }
            }
            Op::Scale { input, factor } => {
                acc(grads, *input, gy.iter().map(|g| g * factor).collect());
            }
            Op::Softmax { input } => {
                let c = node.value.last_dim();
                let mut dx = vec![0.0; gy.len()];
                for ((yr, gr), dr) in node.value.data().chunks(c).zip(gy.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *input, dx);
            }
            Op::SliceCols { input, start } => {
                let x = self.value(*input);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len].copy_from_slice(&gy[row * len..(row + 1) * len]);
                }
                acc(grads, *input, dx);
            }
            Op::ConcatCols { inputs } => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &i in inputs {
                    let c = self.shape(i)[1];
                    if self.wants(i) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gy[r * total + offset..r * total + offset + c]);
                        }
                        acc(grads, i, d);
                    }
                    offset += c;
                }
            }
            Op::TileRows { input, copies } => {
                let n = self.value(*input).numel();
                let mut dx = vec![0.0; n];
                for copy in 0..*copies {
                    dx.iter_mut().zip(&gy[copy * n..(copy + 1) * n]).for_each(|(d, g)| *d += g);
                }
                acc(grads, *input, dx);
            }
            Op::MeanRows { input } => {
                let x = self.value(*input);
                let rows = x.rows() as f64;
                let dx = (0..x.rows()).flat_map(|_| gy.iter().map(move |g| g / rows)).collect();
                acc(grads, *input, dx);
            }
            Op::Combine { coeffs, inputs } => {
                let cv = self.value(*coeffs).data();
                if self.wants(*coeffs) {
                    let dc = inputs
                        .iter()
                        .map(|&i| self.value(i).data().iter().zip(gy).map(|(x, g)| x * g).sum())
                        .collect();
                    acc(grads, *coeffs, dc);
                }
                for (k, &i) in inputs.iter().enumerate() {
                    if self.wants(i) {
                        acc(grads, i, gy.iter().map(|g| g * cv[k]).collect());
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                let g = gy[0];
                let mut d: Vec<f64> = probs.iter().map(|p| g * p).collect();
                d[*label] -= g;
                acc(grads, *logits, d);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                acc(grads, *input, vec![gy[0]; n]);
            }
        }
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            o.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(ov, bv)| *ov += av * bv);
        }
    }
    out
}

fn transpose_kernel(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node; `None` if no gradient reached it.
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, n)| self.wrt(*n))
    }

    /// Per-parameter gradients aligned with a store of `n_params` entries.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; n_params];
        for (id, node) in &self.params {
            if let Some(g) = self.grads.get_mut(node.0).and_then(|g| g.take()) {
                out[id.0] = Some(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_length_formula() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::zeros([1, 400]));
        let w = g.constant(Tensor::zeros([1, 1, 10]));
        let y = g.conv1d(x, w, None, 5).unwrap();
        assert_eq!(g.shape(y), &[1, 79]);
    }

    #[test]
    fn conv1d_zero_weights_give_zero_output() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(t(&[2, 5], &[1., -2., 3., 4., 5., 6., 7., -8., 9., 10.]));
        let w = g.constant(Tensor::zeros([3, 2, 2]));
        let b = g.constant(Tensor::zeros([3]));
        let y = g.conv1d(x, w, Some(b), 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_errors() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::zeros([2, 5]));
        let w = g.constant(Tensor::zeros([3, 1, 2]));
        assert!(matches!(g.conv1d(x, w, None, 1), Err(PetError::Dimension { .. })));
        let w = g.constant(Tensor::zeros([3, 2, 6]));
        assert!(matches!(g.conv1d(x, w, None, 1), Err(PetError::EmptyOutput { .. })));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::full([5], 3.25));
        let gain = g.constant(Tensor::full([5], 1.0));
        let shift = g.constant(Tensor::zeros([5]));
        let y = g.layer_norm(x, gain, shift, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_pair() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let gain = g.constant(Tensor::full([2], 1.0));
        let shift = g.constant(Tensor::zeros([2]));
        let eps = 1e-5;
        let y = g.layer_norm(x, gain, shift, eps).unwrap();
        // mean 0, variance 1
        let expect = 1.0 / (1.0 + eps).sqrt();
        assert_eq!(g.value(y).data(), &[expect, -expect]);
        let bad = g.constant(Tensor::zeros([3]));
        assert!(g.layer_norm(x, bad, shift, eps).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
    }

    #[test]
    fn linear_identity_and_constant() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let mut eye = Tensor::zeros([3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros([3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let w0 = g.constant(Tensor::zeros([3, 2]));
        let c = g.constant(t(&[2], &[0.5, -2.0]));
        let y = g.linear(x, w0, Some(c)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
        let bad = g.constant(Tensor::zeros([4, 2]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new(Precision::F64);
        let l = g.constant(Tensor::full([4], 0.7));
        let loss = g.cross_entropy(l, 2).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);

        let l = g.constant(t(&[2], &[1000.0, 0.0]));
        let loss = g.cross_entropy(l, 0).unwrap();
        let v = g.value(loss).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-300);

        assert!(matches!(g.cross_entropy(l, 2), Err(PetError::Index { .. })));
        let bad = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.cross_entropy(bad, 0), Err(PetError::Numeric(_))));
    }

    #[test]
    fn tile_rows_matches_explicit_tiling() {
        let mut g = Graph::new(Precision::F64);
        let y = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let z = g.tile_rows(y, 2).unwrap();
        assert_eq!(g.shape(z), &[4, 2]);
        assert_eq!(g.value(z).data(), &[1., 2., 3., 4., 1., 2., 3., 4.]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new(Precision::F64);
        let w = g.input(Tensor::scalar(3.0), true);
        let sq = g.mul(w, w).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(w), Some(&[6.0][..]));
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let mut g = Graph::new(Precision::F32);
        let x = g.constant(Tensor::scalar(0.1));
        let y = g.scale(x, 1.0).unwrap();
        assert_eq!(g.value(y).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(5.0), true);
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b), Some(&[2.0][..]));
    }
}
