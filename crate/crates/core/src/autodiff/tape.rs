//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations append nodes to a shared tape during the forward pass; the
//! tape order is topological by construction, so the backward pass walks
//! node ids in reverse, visiting each node exactly once and accumulating
//! gradients into every consumer's inputs.
//!
//! Layout conventions: images and feature maps are NCHW, matrices are
//! row-major. All forward outputs are checked for NaN/Inf; a non-finite
//! value on finite inputs is a hard error, never silently propagated.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{self, PatchGeom};
use super::value::Value;
use crate::error::{Error, Result};

const NORM_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Recorded operation: which inputs produced a node plus whatever forward
/// state the backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f32),
    /// x * s where s is a single-element tensor broadcast over x.
    MulBcast(usize, usize),
    /// x / s where s is a single-element tensor broadcast over x.
    DivBcast(usize, usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Neg(usize),
    ClampMin(usize, f32),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    AddChanBias {
        x: usize,
        b: usize,
    },
    AddChanShift {
        x: usize,
        s: usize,
    },
    AddRowBias {
        x: usize,
        b: usize,
    },
    ResizeBilinear {
        x: usize,
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    AvgPool2d {
        x: usize,
        k: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxLast(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    SumAll(usize),
    MeanAll(usize),
}

pub(crate) struct Node {
    pub value: Value,
    pub op: Op,
    pub requires_grad: bool,
}

/// Shared recording tape. Cheap to clone; single-threaded by design
/// (independent tapes may live on different threads).
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input value. `requires_grad` marks it for gradient
    /// collection during backward.
    pub fn leaf(&self, value: Value, requires_grad: bool) -> Tensor {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    /// Register a constant (no gradient).
    pub fn constant(&self, value: Value) -> Tensor {
        self.leaf(value, false)
    }

    pub fn constant_from(&self, data: &[f32], shape: &[usize]) -> Result<Tensor> {
        Ok(self.constant(Value::new(shape.to_vec(), data.to_vec())?))
    }

    fn push_unchecked(&self, value: Value, op: Op, requires_grad: bool) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Append an op result, enforcing the finite-values invariant.
    fn push(&self, value: Value, op: Op, requires_grad: bool) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MulBcast(..) => "mul_bcast",
        Op::DivBcast(..) => "div_bcast",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Abs(..) => "abs",
        Op::Neg(..) => "neg",
        Op::ClampMin(..) => "clamp_min",
        Op::Matmul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::AddChanBias { .. } => "add_chan_bias",
        Op::AddChanShift { .. } => "add_chan_shift",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::ResizeBilinear { .. } => "resize_bilinear",
        Op::UpsampleNearest { .. } => "upsample_nearest",
        Op::AvgPool2d { .. } => "avg_pool2d",
        Op::MaxPool2d { .. } => "max_pool2d",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GroupNorm { .. } => "group_norm",
        Op::SoftmaxLast(..) => "softmax",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Gather { .. } => "gather",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
    }
}

/// Handle to a tape node.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Per-leaf gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient with respect to the given tensor, if it was reached and
    /// requires grad.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Clone out the node's value.
    pub fn value(&self) -> Value {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Clone out the raw data.
    pub fn data(&self) -> Vec<f32> {
        self.tape.nodes.borrow()[self.id].value.data.clone()
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> Result<f32> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        if v.numel() != 1 {
            return Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                v.shape
            )));
        }
        Ok(v.data[0])
    }

    fn with_value<R>(&self, f: impl FnOnce(&Value) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn binary_prep(&self, other: &Tensor, opname: &str) -> Result<(Vec<usize>, bool)> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::config(format!(
                "{opname}: operands recorded on different tapes"
            )));
        }
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "{opname}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok((sa, self.requires_grad() || other.requires_grad()))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_prep(other, "add")?;
        let out = self.with_value(|a| {
            other.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
        });
        self.tape
            .push(Value { shape, data: out }, Op::Add(self.id, other.id), rg)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_prep(other, "sub")?;
        let out = self.with_value(|a| {
            other.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect())
        });
        self.tape
            .push(Value { shape, data: out }, Op::Sub(self.id, other.id), rg)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_prep(other, "mul")?;
        let out = self.with_value(|a| {
            other.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
        });
        self.tape
            .push(Value { shape, data: out }, Op::Mul(self.id, other.id), rg)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, rg) = self.binary_prep(other, "div")?;
        let out = self.with_value(|a| {
            other.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x / y).collect())
        });
        self.tape
            .push(Value { shape, data: out }, Op::Div(self.id, other.id), rg)
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        let out = self.with_value(|a| Value {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x + c).collect(),
        });
        self.tape
            .push(out, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn mul_scalar(&self, c: f32) -> Result<Tensor> {
        let out = self.with_value(|a| Value {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x * c).collect(),
        });
        self.tape
            .push(out, Op::MulScalar(self.id, c), self.requires_grad())
    }

    fn bcast_prep(&self, s: &Tensor, opname: &str) -> Result<bool> {
        if !self.tape.same_tape(&s.tape) {
            return Err(Error::config(format!(
                "{opname}: operands recorded on different tapes"
            )));
        }
        if s.numel() != 1 {
            return Err(Error::shape(format!(
                "{opname}: broadcast operand must have one element, got shape {:?}",
                s.shape()
            )));
        }
        Ok(self.requires_grad() || s.requires_grad())
    }

    /// Multiply by a single-element tensor, broadcast over self.
    pub fn mul_bcast(&self, s: &Tensor) -> Result<Tensor> {
        let rg = self.bcast_prep(s, "mul_bcast")?;
        let sv = s.data()[0];
        let out = self.with_value(|a| Value {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x * sv).collect(),
        });
        self.tape.push(out, Op::MulBcast(self.id, s.id), rg)
    }

    /// Divide by a single-element tensor, broadcast over self.
    pub fn div_bcast(&self, s: &Tensor) -> Result<Tensor> {
        let rg = self.bcast_prep(s, "div_bcast")?;
        let sv = s.data()[0];
        let out = self.with_value(|a| Value {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x / sv).collect(),
        });
        self.tape.push(out, Op::DivBcast(self.id, s.id), rg)
    }

    fn unary(&self, f: impl Fn(f32) -> f32, op: Op) -> Result<Tensor> {
        let out = self.with_value(|a| Value {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x)).collect(),
        });
        self.tape.push(out, op, self.requires_grad())
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(f32::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(f32::ln, Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(f32::sqrt, Op::Sqrt(self.id))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.unary(gelu_fwd, Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(sigmoid_fwd, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(f32::tanh, Op::Tanh(self.id))
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary(f32::abs, Op::Abs(self.id))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn clamp_min(&self, c: f32) -> Result<Tensor> {
        self.unary(|x| x.max(c), Op::ClampMin(self.id, c))
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix multiply. Supported shapes:
    /// `[m,k] @ [k,n]`, `[B,m,k] @ [k,n]` and `[B,m,k] @ [B,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::config("matmul: operands recorded on different tapes"));
        }
        let sa = self.shape();
        let sb = other.shape();
        let rg = self.requires_grad() || other.requires_grad();
        let (out_shape, value) = self.with_value(|a| {
            other.with_value(|b| matmul_forward(a, b, &sa, &sb))
        })?;
        self.tape.push(
            Value {
                shape: out_shape,
                data: value,
            },
            Op::Matmul(self.id, other.id),
            rg,
        )
    }

    /// 2-D convolution, NCHW. `self`: [B, Cin, H, W], `w`: [Cout, Cin, k, k].
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if !self.tape.same_tape(&w.tape) {
            return Err(Error::config("conv2d: operands recorded on different tapes"));
        }
        let sx = self.shape();
        let sw = w.shape();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: expected 4-d input and weight, got {sx:?} and {sw:?}"
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d: input channels {:?} do not match weight {:?}",
                sx, sw
            )));
        }
        if sw[2] != sw[3] {
            return Err(Error::shape(format!(
                "conv2d: only square kernels supported, got {sw:?}"
            )));
        }
        let (b, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if ih + 2 * pad < k || iw + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} larger than padded input {sx:?} (pad {pad})"
            )));
        }
        let oh = kernels::conv_out_dim(ih, k, stride, pad);
        let ow = kernels::conv_out_dim(iw, k, stride, pad);
        let geom = PatchGeom {
            channels: cin,
            target_h: ih,
            target_w: iw,
            grid_h: oh,
            grid_w: ow,
            kernel: k,
            stride,
            pad,
        };
        let out = self.with_value(|xv| {
            w.with_value(|wv| {
                let mut out = vec![0.0f32; b * cout * oh * ow];
                let xs = xv.data.chunks_exact(cin * ih * iw).collect::<Vec<_>>();
                out.par_chunks_exact_mut(cout * oh * ow)
                    .zip(xs.into_par_iter())
                    .for_each(|(ob, xb)| {
                        let mut cols = vec![0.0f32; geom.rows() * geom.cols()];
                        kernels::im2col(&geom, xb, &mut cols);
                        kernels::gemm_nn(cout, geom.rows(), geom.cols(), 1.0, &wv.data, &cols, 0.0, ob);
                    });
                out
            })
        });
        self.tape.push(
            Value {
                shape: vec![b, cout, oh, ow],
                data: out,
            },
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
            self.requires_grad() || w.requires_grad(),
        )
    }

    /// Transposed 2-D convolution, NCHW. `self`: [B, Cin, H, W],
    /// `w`: [Cin, Cout, k, k].
    pub fn conv_transpose2d(
        &self,
        w: &Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Tensor> {
        if !self.tape.same_tape(&w.tape) {
            return Err(Error::config(
                "conv_transpose2d: operands recorded on different tapes",
            ));
        }
        let sx = self.shape();
        let sw = w.shape();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(format!(
                "conv_transpose2d: expected 4-d input and weight, got {sx:?} and {sw:?}"
            )));
        }
        if sx[1] != sw[0] {
            return Err(Error::shape(format!(
                "conv_transpose2d: input channels {:?} do not match weight {:?}",
                sx, sw
            )));
        }
        if sw[2] != sw[3] {
            return Err(Error::shape(format!(
                "conv_transpose2d: only square kernels supported, got {sw:?}"
            )));
        }
        if out_pad >= stride {
            return Err(Error::config(format!(
                "conv_transpose2d: output padding {out_pad} must be < stride {stride}"
            )));
        }
        let (b, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[1], sw[2]);
        let oh = kernels::conv_transpose_out_dim(ih, k, stride, pad, out_pad);
        let ow = kernels::conv_transpose_out_dim(iw, k, stride, pad, out_pad);
        let geom = PatchGeom {
            channels: cout,
            target_h: oh,
            target_w: ow,
            grid_h: ih,
            grid_w: iw,
            kernel: k,
            stride,
            pad,
        };
        let out = self.with_value(|xv| {
            w.with_value(|wv| {
                let mut out = vec![0.0f32; b * cout * oh * ow];
                let xs = xv.data.chunks_exact(cin * ih * iw).collect::<Vec<_>>();
                out.par_chunks_exact_mut(cout * oh * ow)
                    .zip(xs.into_par_iter())
                    .for_each(|(ob, xb)| {
                        // cols = w^T @ x_b, then scatter onto the output grid
                        let mut cols = vec![0.0f32; geom.rows() * geom.cols()];
                        kernels::gemm_tn(geom.rows(), cin, geom.cols(), 1.0, &wv.data, xb, 0.0, &mut cols);
                        kernels::col2im(&geom, &cols, ob);
                    });
                out
            })
        });
        self.tape.push(
            Value {
                shape: vec![b, cout, oh, ow],
                data: out,
            },
            Op::ConvTranspose2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
                out_pad,
            },
            self.requires_grad() || w.requires_grad(),
        )
    }

    // ---- broadcast adds --------------------------------------------------

    /// Add a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_chan_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&bias.tape) {
            return Err(Error::config("add_chan_bias: different tapes"));
        }
        let sx = self.shape();
        let sb = bias.shape();
        if sx.len() != 4 || sb != vec![sx[1]] {
            return Err(Error::shape(format!(
                "add_chan_bias: expected [B,C,H,W] and [C], got {sx:?} and {sb:?}"
            )));
        }
        let hw = sx[2] * sx[3];
        let c = sx[1];
        let out = self.with_value(|xv| {
            bias.with_value(|bv| {
                let mut data = xv.data.clone();
                for bi in 0..sx[0] {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let bval = bv.data[ci];
                        for v in &mut data[base..base + hw] {
                            *v += bval;
                        }
                    }
                }
                data
            })
        });
        self.tape.push(
            Value {
                shape: sx,
                data: out,
            },
            Op::AddChanBias {
                x: self.id,
                b: bias.id,
            },
            self.requires_grad() || bias.requires_grad(),
        )
    }

    /// Add a per-sample per-channel shift `[B,C]` to an NCHW tensor.
    pub fn add_chan_shift(&self, shift: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&shift.tape) {
            return Err(Error::config("add_chan_shift: different tapes"));
        }
        let sx = self.shape();
        let ss = shift.shape();
        if sx.len() != 4 || ss != vec![sx[0], sx[1]] {
            return Err(Error::shape(format!(
                "add_chan_shift: expected [B,C,H,W] and [B,C], got {sx:?} and {ss:?}"
            )));
        }
        let hw = sx[2] * sx[3];
        let out = self.with_value(|xv| {
            shift.with_value(|sv| {
                let mut data = xv.data.clone();
                for (bc, chunk) in data.chunks_exact_mut(hw).enumerate() {
                    let s = sv.data[bc];
                    for v in chunk {
                        *v += s;
                    }
                }
                data
            })
        });
        self.tape.push(
            Value {
                shape: sx,
                data: out,
            },
            Op::AddChanShift {
                x: self.id,
                s: shift.id,
            },
            self.requires_grad() || shift.requires_grad(),
        )
    }

    /// Add a bias `[D]` broadcast over all leading dimensions of `[..., D]`.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&bias.tape) {
            return Err(Error::config("add_row_bias: different tapes"));
        }
        let sx = self.shape();
        let sb = bias.shape();
        let d = *sx.last().ok_or_else(|| Error::shape("add_row_bias: rank-0 input"))?;
        if sb != vec![d] {
            return Err(Error::shape(format!(
                "add_row_bias: expected trailing dim {d} bias, got {sb:?} for input {sx:?}"
            )));
        }
        let out = self.with_value(|xv| {
            bias.with_value(|bv| {
                let mut data = xv.data.clone();
                for row in data.chunks_exact_mut(d) {
                    for (v, b) in row.iter_mut().zip(&bv.data) {
                        *v += b;
                    }
                }
                data
            })
        });
        self.tape.push(
            Value {
                shape: sx,
                data: out,
            },
            Op::AddRowBias {
                x: self.id,
                b: bias.id,
            },
            self.requires_grad() || bias.requires_grad(),
        )
    }

    // ---- resize / pooling --------------------------------------------------

    /// Bilinear resize of an NCHW tensor to (oh, ow).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let sx = self.shape();
        if sx.len() != 4 {
            return Err(Error::shape(format!(
                "resize_bilinear: expected [B,C,H,W], got {sx:?}"
            )));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::config("resize_bilinear: zero output size"));
        }
        let (ih, iw) = (sx[2], sx[3]);
        let planes = sx[0] * sx[1];
        let out = self.with_value(|xv| {
            let mut out = vec![0.0f32; planes * oh * ow];
            out.par_chunks_exact_mut(oh * ow)
                .zip(xv.data.par_chunks_exact(ih * iw))
                .for_each(|(d, s)| kernels::resize_bilinear_plane(s, ih, iw, d, oh, ow));
            out
        });
        self.tape.push(
            Value {
                shape: vec![sx[0], sx[1], oh, ow],
                data: out,
            },
            Op::ResizeBilinear { x: self.id },
            self.requires_grad(),
        )
    }

    /// Nearest-neighbour upsample by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let sx = self.shape();
        if sx.len() != 4 {
            return Err(Error::shape(format!(
                "upsample_nearest: expected [B,C,H,W], got {sx:?}"
            )));
        }
        if factor == 0 {
            return Err(Error::config("upsample_nearest: zero factor"));
        }
        let (ih, iw) = (sx[2], sx[3]);
        let (oh, ow) = (ih * factor, iw * factor);
        let out = self.with_value(|xv| {
            let mut out = vec![0.0f32; sx[0] * sx[1] * oh * ow];
            for (ob, sb) in out
                .chunks_exact_mut(oh * ow)
                .zip(xv.data.chunks_exact(ih * iw))
            {
                for oy in 0..oh {
                    let sy = oy / factor;
                    for ox in 0..ow {
                        ob[oy * ow + ox] = sb[sy * iw + ox / factor];
                    }
                }
            }
            out
        });
        self.tape.push(
            Value {
                shape: vec![sx[0], sx[1], oh, ow],
                data: out,
            },
            Op::UpsampleNearest {
                x: self.id,
                factor,
            },
            self.requires_grad(),
        )
    }

    /// Non-overlapping average pooling with window k (stride k).
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let sx = self.shape();
        if sx.len() != 4 {
            return Err(Error::shape(format!(
                "avg_pool2d: expected [B,C,H,W], got {sx:?}"
            )));
        }
        if k == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::config(format!(
                "avg_pool2d: window {k} too large for input {sx:?}"
            )));
        }
        let (ih, iw) = (sx[2], sx[3]);
        let (oh, ow) = (ih / k, iw / k);
        let inv = 1.0 / (k * k) as f32;
        let out = self.with_value(|xv| {
            let mut out = vec![0.0f32; sx[0] * sx[1] * oh * ow];
            for (ob, sb) in out
                .chunks_exact_mut(oh * ow)
                .zip(xv.data.chunks_exact(ih * iw))
            {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += sb[(oy * k + dy) * iw + ox * k + dx];
                            }
                        }
                        ob[oy * ow + ox] = acc * inv;
                    }
                }
            }
            out
        });
        self.tape.push(
            Value {
                shape: vec![sx[0], sx[1], oh, ow],
                data: out,
            },
            Op::AvgPool2d { x: self.id, k },
            self.requires_grad(),
        )
    }

    /// Non-overlapping max pooling with window k (stride k).
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor> {
        let sx = self.shape();
        if sx.len() != 4 {
            return Err(Error::shape(format!(
                "max_pool2d: expected [B,C,H,W], got {sx:?}"
            )));
        }
        if k == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::config(format!(
                "max_pool2d: window {k} too large for input {sx:?}"
            )));
        }
        let (ih, iw) = (sx[2], sx[3]);
        let (oh, ow) = (ih / k, iw / k);
        let planes = sx[0] * sx[1];
        let (out, argmax) = self.with_value(|xv| {
            let mut out = vec![0.0f32; planes * oh * ow];
            let mut argmax = vec![0u32; planes * oh * ow];
            for p in 0..planes {
                let sb = &xv.data[p * ih * iw..(p + 1) * ih * iw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = (oy * k + dy) * iw + ox * k + dx;
                                if sb[idx] > best {
                                    best = sb[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[p * oh * ow + oy * ow + ox] = best;
                        argmax[p * oh * ow + oy * ow + ox] = (p * ih * iw + best_idx) as u32;
                    }
                }
            }
            (out, argmax)
        });
        self.tape.push(
            Value {
                shape: vec![sx[0], sx[1], oh, ow],
                data: out,
            },
            Op::MaxPool2d {
                x: self.id,
                argmax,
            },
            self.requires_grad(),
        )
    }

    // ---- normalization / softmax -------------------------------------------

    /// Layer normalization over the last dimension with learned gamma/beta.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&gamma.tape) || !self.tape.same_tape(&beta.tape) {
            return Err(Error::config("layer_norm: different tapes"));
        }
        let sx = self.shape();
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm: rank-0 input"))?;
        if gamma.shape() != vec![d] || beta.shape() != vec![d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}] for input {sx:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let (out, mean, rstd) = self.with_value(|xv| {
            gamma.with_value(|gv| {
                beta.with_value(|bv| {
                    let mut out = vec![0.0f32; xv.numel()];
                    let mut mean = vec![0.0f32; rows];
                    let mut rstd = vec![0.0f32; rows];
                    for r in 0..rows {
                        let xrow = &xv.data[r * d..(r + 1) * d];
                        let m = xrow.iter().sum::<f32>() / d as f32;
                        let var = xrow.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / d as f32;
                        let rs = 1.0 / (var + NORM_EPS).sqrt();
                        mean[r] = m;
                        rstd[r] = rs;
                        let orow = &mut out[r * d..(r + 1) * d];
                        for j in 0..d {
                            orow[j] = (xrow[j] - m) * rs * gv.data[j] + bv.data[j];
                        }
                    }
                    (out, mean, rstd)
                })
            })
        });
        self.tape.push(
            Value {
                shape: sx,
                data: out,
            },
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                rstd,
            },
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        )
    }

    /// Group normalization over an NCHW tensor with learned per-channel
    /// gamma/beta.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&gamma.tape) || !self.tape.same_tape(&beta.tape) {
            return Err(Error::config("group_norm: different tapes"));
        }
        let sx = self.shape();
        if sx.len() != 4 {
            return Err(Error::shape(format!(
                "group_norm: expected [B,C,H,W], got {sx:?}"
            )));
        }
        let c = sx[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: groups {groups} must divide channels {c}"
            )));
        }
        if gamma.shape() != vec![c] || beta.shape() != vec![c] {
            return Err(Error::shape(format!(
                "group_norm: gamma {:?} / beta {:?} must be [{c}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let hw = sx[2] * sx[3];
        let cg = c / groups;
        let gsize = cg * hw;
        let ngroups = sx[0] * groups;
        let (out, mean, rstd) = self.with_value(|xv| {
            gamma.with_value(|gv| {
                beta.with_value(|bv| {
                    let mut out = vec![0.0f32; xv.numel()];
                    let mut mean = vec![0.0f32; ngroups];
                    let mut rstd = vec![0.0f32; ngroups];
                    for gidx in 0..ngroups {
                        let base = gidx * gsize;
                        let xs = &xv.data[base..base + gsize];
                        let m = xs.iter().sum::<f32>() / gsize as f32;
                        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / gsize as f32;
                        let rs = 1.0 / (var + NORM_EPS).sqrt();
                        mean[gidx] = m;
                        rstd[gidx] = rs;
                        let g_in_b = gidx % groups;
                        for ci in 0..cg {
                            let ch = g_in_b * cg + ci;
                            let (ga, be) = (gv.data[ch], bv.data[ch]);
                            let off = base + ci * hw;
                            for j in 0..hw {
                                out[off + j] = (xs[ci * hw + j] - m) * rs * ga + be;
                            }
                        }
                    }
                    (out, mean, rstd)
                })
            })
        });
        self.tape.push(
            Value {
                shape: sx,
                data: out,
            },
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                mean,
                rstd,
            },
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let sx = self.shape();
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("softmax: rank-0 input"))?;
        let out = self.with_value(|xv| {
            let mut out = vec![0.0f32; xv.numel()];
            for (orow, xrow) in out.chunks_exact_mut(d).zip(xv.data.chunks_exact(d)) {
                let mx = xrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for (o, &x) in orow.iter_mut().zip(xrow) {
                    *o = (x - mx).exp();
                    sum += *o;
                }
                let inv = 1.0 / sum;
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
            out
        });
        self.tape.push(
            Value {
                shape: sx,
                data: out,
            },
            Op::SoftmaxLast(self.id),
            self.requires_grad(),
        )
    }

    // ---- shape ops -----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        let out = self.with_value(|xv| Value {
            shape: shape.to_vec(),
            data: xv.data.clone(),
        });
        self.tape.push(out, Op::Reshape(self.id), self.requires_grad())
    }

    /// Materialized axis permutation.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let sx = self.shape();
        if !is_permutation(perm, sx.len()) {
            return Err(Error::shape(format!(
                "permute: {perm:?} is not a permutation of 0..{}",
                sx.len()
            )));
        }
        let out = self.with_value(|xv| permute_value(xv, perm));
        self.tape.push(
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Concatenate along an axis; all other dims must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat: empty input list"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat: axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut axis_total = 0;
        let mut rg = false;
        for p in parts {
            if !first.tape.same_tape(&p.tape) {
                return Err(Error::config("concat: parts recorded on different tapes"));
            }
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat: incompatible shapes {base:?} vs {s:?} on axis {axis}"
                )));
            }
            axis_total += s[axis];
            rg |= p.requires_grad();
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0f32; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let s = p.shape();
            let block = s[axis] * inner;
            p.with_value(|xv| {
                for o in 0..outer {
                    data[o * row_out + offset..o * row_out + offset + block]
                        .copy_from_slice(&xv.data[o * block..(o + 1) * block]);
                }
            });
            offset += block;
        }
        first.tape.push(
            Value {
                shape: out_shape,
                data,
            },
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let sx = self.shape();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(Error::shape(format!(
                "slice: range {start}..{} out of bounds on axis {axis} of {sx:?}",
                start + len
            )));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let row_in = sx[axis] * inner;
        let block = len * inner;
        let out = self.with_value(|xv| {
            let mut data = vec![0.0f32; outer * block];
            for o in 0..outer {
                data[o * block..(o + 1) * block].copy_from_slice(
                    &xv.data[o * row_in + start * inner..o * row_in + start * inner + block],
                );
            }
            data
        });
        self.tape.push(
            Value {
                shape: out_shape,
                data: out,
            },
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        )
    }

    /// Gather flat indices into a rank-1 tensor.
    pub fn gather(&self, idx: Arc<Vec<usize>>) -> Result<Tensor> {
        let n = self.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!(
                "gather: index {bad} out of bounds for {n} elements"
            )));
        }
        let out = self.with_value(|xv| idx.iter().map(|&i| xv.data[i]).collect::<Vec<f32>>());
        let shape = vec![idx.len()];
        self.tape.push(
            Value { shape, data: out },
            Op::Gather { x: self.id, idx },
            self.requires_grad(),
        )
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.with_value(|xv| xv.data.iter().sum::<f32>());
        self.tape
            .push(Value::scalar(s), Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let s = self.with_value(|xv| xv.data.iter().sum::<f32>() / xv.numel() as f32);
        self.tape
            .push(Value::scalar(s), Op::MeanAll(self.id), self.requires_grad())
    }

    /// Median of the forward values. Not differentiated: the result is a
    /// plain number detached from the tape.
    pub fn median_detached(&self) -> Result<f32> {
        self.with_value(|xv| super::value::median(&xv.data))
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar output. Returns gradients for every
    /// reachable node that requires grad.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward: output must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !nodes[id].requires_grad {
                continue;
            }
            backward_step(&nodes, id, &gout, &mut grads);
            // keep leaf gradients and re-store interior ones for reuse checks
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn permute_value(v: &Value, perm: &[usize]) -> Value {
    let rank = v.shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * v.shape[i + 1];
    }
    let mut out = vec![0.0f32; v.numel()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *slot = v.data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Value {
        shape: out_shape,
        data: out,
    }
}

fn sigmoid_fwd(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul_forward(
    a: &Value,
    b: &Value,
    sa: &[usize],
    sb: &[usize],
) -> Result<(Vec<usize>, Vec<f32>)> {
    match (sa.len(), sb.len()) {
        (2, 2) => {
            let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul: inner dims differ, {sa:?} vs {sb:?}"
                )));
            }
            let mut c = vec![0.0f32; m * n];
            kernels::gemm_nn(m, k, n, 1.0, &a.data, &b.data, 0.0, &mut c);
            Ok((vec![m, n], c))
        }
        (3, 2) => {
            let (bt, m, k, k2, n) = (sa[0], sa[1], sa[2], sb[0], sb[1]);
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul: inner dims differ, {sa:?} vs {sb:?}"
                )));
            }
            let mut c = vec![0.0f32; bt * m * n];
            kernels::gemm_nn(bt * m, k, n, 1.0, &a.data, &b.data, 0.0, &mut c);
            Ok((vec![bt, m, n], c))
        }
        (3, 3) => {
            let (bt, m, k) = (sa[0], sa[1], sa[2]);
            let (bt2, k2, n) = (sb[0], sb[1], sb[2]);
            if bt != bt2 || k != k2 {
                return Err(Error::shape(format!(
                    "matmul: batched shapes incompatible, {sa:?} vs {sb:?}"
                )));
            }
            let mut c = vec![0.0f32; bt * m * n];
            c.par_chunks_exact_mut(m * n)
                .zip(a.data.par_chunks_exact(m * k))
                .zip(b.data.par_chunks_exact(k * n))
                .for_each(|((cb, ab), bb)| {
                    kernels::gemm_nn(m, k, n, 1.0, ab, bb, 0.0, cb);
                });
            Ok((vec![bt, m, n], c))
        }
        _ => Err(Error::shape(format!(
            "matmul: unsupported ranks {sa:?} @ {sb:?}"
        ))),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, grad: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        None => *slot = Some(grad),
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, size: usize) -> &mut Vec<f32> {
    if slot.is_none() {
        *slot = Some(vec![0.0f32; size]);
    }
    slot.as_mut().unwrap()
}

/// Propagate `gout` (gradient at node `id`) to the node's inputs.
fn backward_step(nodes: &[Node], id: usize, gout: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
    let val = |i: usize| -> &Value { &nodes[i].value };
    let rg = |i: usize| -> bool { nodes[i].requires_grad };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], gout.to_vec());
            }
            if rg(*b) {
                accumulate(&mut grads[*b], gout.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(&mut grads[*a], gout.to_vec());
            }
            if rg(*b) {
                accumulate(&mut grads[*b], gout.iter().map(|g| -g).collect());
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let g = gout
                    .iter()
                    .zip(&val(*b).data)
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(&mut grads[*a], g);
            }
            if rg(*b) {
                let g = gout
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(g, x)| g * x)
                    .collect();
                accumulate(&mut grads[*b], g);
            }
        }
        Op::Div(a, b) => {
            if rg(*a) {
                let g = gout
                    .iter()
                    .zip(&val(*b).data)
                    .map(|(g, y)| g / y)
                    .collect();
                accumulate(&mut grads[*a], g);
            }
            if rg(*b) {
                let g = gout
                    .iter()
                    .zip(val(*a).data.iter().zip(&val(*b).data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                accumulate(&mut grads[*b], g);
            }
        }
        Op::AddScalar(a) => {
            if rg(*a) {
                accumulate(&mut grads[*a], gout.to_vec());
            }
        }
        Op::MulScalar(a, c) => {
            if rg(*a) {
                accumulate(&mut grads[*a], gout.iter().map(|g| g * c).collect());
            }
        }
        Op::MulBcast(a, s) => {
            let sv = val(*s).data[0];
            if rg(*a) {
                accumulate(&mut grads[*a], gout.iter().map(|g| g * sv).collect());
            }
            if rg(*s) {
                let ds: f32 = gout.iter().zip(&val(*a).data).map(|(g, x)| g * x).sum();
                accumulate(&mut grads[*s], vec![ds]);
            }
        }
        Op::DivBcast(a, s) => {
            let sv = val(*s).data[0];
            if rg(*a) {
                accumulate(&mut grads[*a], gout.iter().map(|g| g / sv).collect());
            }
            if rg(*s) {
                let ds: f32 = gout
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(g, x)| -g * x / (sv * sv))
                    .sum();
                accumulate(&mut grads[*s], vec![ds]);
            }
        }
        Op::Exp(a) => {
            if rg(*a) {
                let y = &val(id).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter().zip(y).map(|(g, y)| g * y).collect(),
                );
            }
        }
        Op::Log(a) => {
            if rg(*a) {
                let x = &val(*a).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter().zip(x).map(|(g, x)| g / x).collect(),
                );
            }
        }
        Op::Sqrt(a) => {
            if rg(*a) {
                let y = &val(id).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect(),
                );
            }
        }
        Op::Relu(a) => {
            if rg(*a) {
                let x = &val(*a).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Gelu(a) => {
            if rg(*a) {
                let x = &val(*a).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect(),
                );
            }
        }
        Op::Sigmoid(a) => {
            if rg(*a) {
                let y = &val(id).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                );
            }
        }
        Op::Tanh(a) => {
            if rg(*a) {
                let y = &val(id).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                );
            }
        }
        Op::Abs(a) => {
            if rg(*a) {
                let x = &val(*a).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter()
                        .zip(x)
                        .map(|(g, x)| match x.partial_cmp(&0.0) {
                            Some(std::cmp::Ordering::Greater) => *g,
                            Some(std::cmp::Ordering::Less) => -*g,
                            _ => 0.0,
                        })
                        .collect(),
                );
            }
        }
        Op::Neg(a) => {
            if rg(*a) {
                accumulate(&mut grads[*a], gout.iter().map(|g| -g).collect());
            }
        }
        Op::ClampMin(a, c) => {
            if rg(*a) {
                let x = &val(*a).data;
                accumulate(
                    &mut grads[*a],
                    gout.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > *c { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Op::Matmul(a, b) => {
            backward_matmul(nodes, *a, *b, gout, grads);
        }
        Op::Conv2d { x, w, stride, pad } => {
            backward_conv2d(nodes, id, *x, *w, *stride, *pad, gout, grads);
        }
        Op::ConvTranspose2d {
            x,
            w,
            stride,
            pad,
            out_pad: _,
        } => {
            backward_conv_transpose2d(nodes, id, *x, *w, *stride, *pad, gout, grads);
        }
        Op::AddChanBias { x, b } => {
            if rg(*x) {
                accumulate(&mut grads[*x], gout.to_vec());
            }
            if rg(*b) {
                let sx = &val(*x).shape;
                let (bs, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let mut db = vec![0.0f32; c];
                for bi in 0..bs {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        db[ci] += gout[base..base + hw].iter().sum::<f32>();
                    }
                }
                accumulate(&mut grads[*b], db);
            }
        }
        Op::AddChanShift { x, s } => {
            if rg(*x) {
                accumulate(&mut grads[*x], gout.to_vec());
            }
            if rg(*s) {
                let sx = &val(*x).shape;
                let hw = sx[2] * sx[3];
                let ds: Vec<f32> = gout
                    .chunks_exact(hw)
                    .map(|c| c.iter().sum::<f32>())
                    .collect();
                accumulate(&mut grads[*s], ds);
            }
        }
        Op::AddRowBias { x, b } => {
            if rg(*x) {
                accumulate(&mut grads[*x], gout.to_vec());
            }
            if rg(*b) {
                let d = val(*b).numel();
                let mut db = vec![0.0f32; d];
                for row in gout.chunks_exact(d) {
                    for (s, g) in db.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                accumulate(&mut grads[*b], db);
            }
        }
        Op::ResizeBilinear { x } => {
            if rg(*x) {
                let sx = &val(*x).shape;
                let so = &val(id).shape;
                let (ih, iw, oh, ow) = (sx[2], sx[3], so[2], so[3]);
                let mut dx = vec![0.0f32; val(*x).numel()];
                for (gi, go) in dx
                    .chunks_exact_mut(ih * iw)
                    .zip(gout.chunks_exact(oh * ow))
                {
                    kernels::resize_bilinear_plane_backward(go, oh, ow, gi, ih, iw);
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::UpsampleNearest { x, factor } => {
            if rg(*x) {
                let sx = &val(*x).shape;
                let (ih, iw) = (sx[2], sx[3]);
                let (oh, ow) = (ih * factor, iw * factor);
                let mut dx = vec![0.0f32; val(*x).numel()];
                for (gi, go) in dx
                    .chunks_exact_mut(ih * iw)
                    .zip(gout.chunks_exact(oh * ow))
                {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gi[(oy / factor) * iw + ox / factor] += go[oy * ow + ox];
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::AvgPool2d { x, k } => {
            if rg(*x) {
                let sx = &val(*x).shape;
                let (ih, iw) = (sx[2], sx[3]);
                let (oh, ow) = (ih / k, iw / k);
                let inv = 1.0 / (k * k) as f32;
                let mut dx = vec![0.0f32; val(*x).numel()];
                for (gi, go) in dx
                    .chunks_exact_mut(ih * iw)
                    .zip(gout.chunks_exact(oh * ow))
                {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[oy * ow + ox] * inv;
                            for dy in 0..*k {
                                for dxx in 0..*k {
                                    gi[(oy * k + dy) * iw + ox * k + dxx] += g;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if rg(*x) {
                let mut dx = vec![0.0f32; val(*x).numel()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    dx[src as usize] += g;
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let d = val(*gamma).numel();
            let xv = &val(*x).data;
            let gv = &val(*gamma).data;
            if rg(*beta) {
                let mut db = vec![0.0f32; d];
                for row in gout.chunks_exact(d) {
                    for (s, g) in db.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                accumulate(&mut grads[*beta], db);
            }
            if rg(*gamma) {
                let mut dg = vec![0.0f32; d];
                for (r, row) in gout.chunks_exact(d).enumerate() {
                    let (m, rs) = (mean[r], rstd[r]);
                    for j in 0..d {
                        dg[j] += row[j] * (xv[r * d + j] - m) * rs;
                    }
                }
                accumulate(&mut grads[*gamma], dg);
            }
            if rg(*x) {
                let rows = xv.len() / d;
                let mut dx = vec![0.0f32; xv.len()];
                for r in 0..rows {
                    let (m, rs) = (mean[r], rstd[r]);
                    let row = &gout[r * d..(r + 1) * d];
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for j in 0..d {
                        let xh = (xv[r * d + j] - m) * rs;
                        let dxh = row[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for j in 0..d {
                        let xh = (xv[r * d + j] - m) * rs;
                        let dxh = row[j] * gv[j];
                        dx[r * d + j] = rs * (dxh - m1 - xh * m2);
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let sx = &val(*x).shape;
            let (c, hw) = (sx[1], sx[2] * sx[3]);
            let cg = c / groups;
            let gsize = cg * hw;
            let xv = &val(*x).data;
            let gv = &val(*gamma).data;
            if rg(*beta) {
                let mut db = vec![0.0f32; c];
                for (bc, chunk) in gout.chunks_exact(hw).enumerate() {
                    db[bc % c] += chunk.iter().sum::<f32>();
                }
                accumulate(&mut grads[*beta], db);
            }
            if rg(*gamma) {
                let mut dg = vec![0.0f32; c];
                for gidx in 0..mean.len() {
                    let base = gidx * gsize;
                    let (m, rs) = (mean[gidx], rstd[gidx]);
                    let g_in_b = gidx % groups;
                    for ci in 0..cg {
                        let ch = g_in_b * cg + ci;
                        let off = base + ci * hw;
                        let mut acc = 0.0f32;
                        for j in 0..hw {
                            acc += gout[off + j] * (xv[off + j] - m) * rs;
                        }
                        dg[ch] += acc;
                    }
                }
                accumulate(&mut grads[*gamma], dg);
            }
            if rg(*x) {
                let mut dx = vec![0.0f32; xv.len()];
                for gidx in 0..mean.len() {
                    let base = gidx * gsize;
                    let (m, rs) = (mean[gidx], rstd[gidx]);
                    let g_in_b = gidx % groups;
                    let mut m1 = 0.0f32;
                    let mut m2 = 0.0f32;
                    for ci in 0..cg {
                        let ga = gv[g_in_b * cg + ci];
                        let off = base + ci * hw;
                        for j in 0..hw {
                            let xh = (xv[off + j] - m) * rs;
                            let dxh = gout[off + j] * ga;
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                    }
                    m1 /= gsize as f32;
                    m2 /= gsize as f32;
                    for ci in 0..cg {
                        let ga = gv[g_in_b * cg + ci];
                        let off = base + ci * hw;
                        for j in 0..hw {
                            let xh = (xv[off + j] - m) * rs;
                            let dxh = gout[off + j] * ga;
                            dx[off + j] = rs * (dxh - m1 - xh * m2);
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::SoftmaxLast(a) => {
            if rg(*a) {
                let y = &val(id).data;
                let d = *val(id).shape.last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_exact_mut(d)
                    .zip(y.chunks_exact(d))
                    .zip(gout.chunks_exact(d))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dxr[j] = (gr[j] - dot) * yr[j];
                    }
                }
                accumulate(&mut grads[*a], dx);
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                accumulate(&mut grads[*a], gout.to_vec());
            }
        }
        Op::Permute { x, perm } => {
            if rg(*x) {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gv = Value {
                    shape: val(id).shape.clone(),
                    data: gout.to_vec(),
                };
                accumulate(&mut grads[*x], permute_value(&gv, &inv).data);
            }
        }
        Op::Concat { parts, axis } => {
            let so = &val(id).shape;
            let outer: usize = so[..*axis].iter().product();
            let inner: usize = so[*axis + 1..].iter().product();
            let row_out = so[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let sp = &val(p).shape;
                let block = sp[*axis] * inner;
                if rg(p) {
                    let mut dp = vec![0.0f32; val(p).numel()];
                    for o in 0..outer {
                        dp[o * block..(o + 1) * block].copy_from_slice(
                            &gout[o * row_out + offset..o * row_out + offset + block],
                        );
                    }
                    accumulate(&mut grads[p], dp);
                }
                offset += block;
            }
        }
        Op::Slice { x, axis, start } => {
            if rg(*x) {
                let sx = &val(*x).shape;
                let so = &val(id).shape;
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[*axis + 1..].iter().product();
                let row_in = sx[*axis] * inner;
                let block = so[*axis] * inner;
                let mut dx = vec![0.0f32; val(*x).numel()];
                for o in 0..outer {
                    dx[o * row_in + start * inner..o * row_in + start * inner + block]
                        .copy_from_slice(&gout[o * block..(o + 1) * block]);
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::Gather { x, idx } => {
            if rg(*x) {
                let mut dx = vec![0.0f32; val(*x).numel()];
                for (&i, &g) in idx.iter().zip(gout) {
                    dx[i] += g;
                }
                accumulate(&mut grads[*x], dx);
            }
        }
        Op::SumAll(a) => {
            if rg(*a) {
                accumulate(&mut grads[*a], vec![gout[0]; val(*a).numel()]);
            }
        }
        Op::MeanAll(a) => {
            if rg(*a) {
                let n = val(*a).numel();
                accumulate(&mut grads[*a], vec![gout[0] / n as f32; n]);
            }
        }
    }
}

fn backward_matmul(
    nodes: &[Node],
    a: usize,
    b: usize,
    gout: &[f32],
    grads: &mut Vec<Option<Vec<f32>>>,
) {
    let sa = nodes[a].value.shape.clone();
    let sb = nodes[b].value.shape.clone();
    let av = &nodes[a].value.data;
    let bv = &nodes[b].value.data;
    match (sa.len(), sb.len()) {
        (2, 2) | (3, 2) => {
            // flatten leading batch into rows
            let k = *sa.last().unwrap();
            let n = sb[1];
            let m: usize = nodes[a].value.numel() / k;
            if nodes[a].requires_grad {
                let da = add_into(&mut grads[a], m * k);
                kernels::gemm_nt(m, n, k, 1.0, gout, bv, 1.0, da);
            }
            if nodes[b].requires_grad {
                let db = add_into(&mut grads[b], k * n);
                kernels::gemm_tn(k, m, n, 1.0, av, gout, 1.0, db);
            }
        }
        (3, 3) => {
            let (bt, m, k) = (sa[0], sa[1], sa[2]);
            let n = sb[2];
            if nodes[a].requires_grad {
                let da = add_into(&mut grads[a], bt * m * k);
                da.par_chunks_exact_mut(m * k)
                    .zip(gout.par_chunks_exact(m * n))
                    .zip(bv.par_chunks_exact(k * n))
                    .for_each(|((dab, gb), bb)| {
                        kernels::gemm_nt(m, n, k, 1.0, gb, bb, 1.0, dab);
                    });
            }
            if nodes[b].requires_grad {
                let db = add_into(&mut grads[b], bt * k * n);
                db.par_chunks_exact_mut(k * n)
                    .zip(gout.par_chunks_exact(m * n))
                    .zip(av.par_chunks_exact(m * k))
                    .for_each(|((dbb, gb), ab)| {
                        kernels::gemm_tn(k, m, n, 1.0, ab, gb, 1.0, dbb);
                    });
            }
        }
        _ => unreachable!("matmul forward validated ranks"),
    }
}

fn backward_conv2d(
    nodes: &[Node],
    out_id: usize,
    x: usize,
    w: usize,
    stride: usize,
    pad: usize,
    gout: &[f32],
    grads: &mut Vec<Option<Vec<f32>>>,
) {
    let sx = nodes[x].value.shape.clone();
    let sw = nodes[w].value.shape.clone();
    let so = nodes[out_id].value.shape.clone();
    let (b, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, k) = (sw[0], sw[2]);
    let (oh, ow) = (so[2], so[3]);
    let geom = PatchGeom {
        channels: cin,
        target_h: ih,
        target_w: iw,
        grid_h: oh,
        grid_w: ow,
        kernel: k,
        stride,
        pad,
    };
    let xv = &nodes[x].value.data;
    let wv = &nodes[w].value.data;
    if nodes[w].requires_grad {
        // dW += dY_b @ cols_b^T, accumulated over the batch in order
        let dw = add_into(&mut grads[w], cout * cin * k * k);
        let mut cols = vec![0.0f32; geom.rows() * geom.cols()];
        for bi in 0..b {
            kernels::im2col(&geom, &xv[bi * cin * ih * iw..(bi + 1) * cin * ih * iw], &mut cols);
            kernels::gemm_nt(
                cout,
                geom.cols(),
                geom.rows(),
                1.0,
                &gout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow],
                &cols,
                1.0,
                dw,
            );
        }
    }
    if nodes[x].requires_grad {
        let dx = add_into(&mut grads[x], b * cin * ih * iw);
        dx.par_chunks_exact_mut(cin * ih * iw)
            .zip(gout.par_chunks_exact(cout * oh * ow))
            .for_each(|(dxb, gb)| {
                // dcols = W^T @ dY_b, then scatter back to input pixels
                let mut dcols = vec![0.0f32; geom.rows() * geom.cols()];
                kernels::gemm_tn(geom.rows(), cout, geom.cols(), 1.0, wv, gb, 0.0, &mut dcols);
                kernels::col2im(&geom, &dcols, dxb);
            });
    }
}

fn backward_conv_transpose2d(
    nodes: &[Node],
    out_id: usize,
    x: usize,
    w: usize,
    stride: usize,
    pad: usize,
    gout: &[f32],
    grads: &mut Vec<Option<Vec<f32>>>,
) {
    let sx = nodes[x].value.shape.clone();
    let sw = nodes[w].value.shape.clone();
    let so = nodes[out_id].value.shape.clone();
    let (b, cin, ih, iw) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, k) = (sw[1], sw[2]);
    let (oh, ow) = (so[2], so[3]);
    let geom = PatchGeom {
        channels: cout,
        target_h: oh,
        target_w: ow,
        grid_h: ih,
        grid_w: iw,
        kernel: k,
        stride,
        pad,
    };
    let xv = &nodes[x].value.data;
    let wv = &nodes[w].value.data;
    if nodes[w].requires_grad {
        // forward was cols = W^T x, y = scatter(cols); so dcols = gather(dY)
        // and dW += x_b @ dcols_b^T
        let dw = add_into(&mut grads[w], cin * cout * k * k);
        let mut dcols = vec![0.0f32; geom.rows() * geom.cols()];
        for bi in 0..b {
            kernels::im2col(&geom, &gout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow], &mut dcols);
            kernels::gemm_nt(
                cin,
                geom.cols(),
                geom.rows(),
                1.0,
                &xv[bi * cin * ih * iw..(bi + 1) * cin * ih * iw],
                &dcols,
                1.0,
                dw,
            );
        }
    }
    if nodes[x].requires_grad {
        let dx = add_into(&mut grads[x], b * cin * ih * iw);
        dx.par_chunks_exact_mut(cin * ih * iw)
            .zip(gout.par_chunks_exact(cout * oh * ow))
            .for_each(|(dxb, gb)| {
                let mut dcols = vec![0.0f32; geom.rows() * geom.cols()];
                kernels::im2col(&geom, gb, &mut dcols);
                kernels::gemm_nn(cin, geom.rows(), geom.cols(), 1.0, wv, &dcols, 0.0, dxb);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &Tape, data: &[f32], shape: &[usize]) -> Tensor {
        tape.leaf(Value::new(shape.to_vec(), data.to_vec()).unwrap(), true)
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let tape = Tape::new();
        let x = leaf(&tape, &[-1.0], &[1]);
        assert_eq!(x.relu().unwrap().data(), vec![0.0]);
    }

    #[test]
    fn matmul_identity_preserves() {
        let tape = Tape::new();
        let i2 = leaf(&tape, &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = leaf(&tape, &[2.0, -3.0, 0.5, 4.0], &[2, 2]);
        assert_eq!(i2.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = leaf(&tape, &[1.0, 2.0], &[2]);
        let b = leaf(&tape, &[1.0, 2.0, 3.0], &[3]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn reused_leaf_accumulates_twice() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1.0, 2.0, 3.0], &[3]);
        let single = x.sum_all().unwrap();
        let gs = single.backward().unwrap();
        let g1 = gs.wrt(&x).unwrap().to_vec();

        let both = x.add(&x).unwrap().sum_all().unwrap();
        let gs2 = both.backward().unwrap();
        let g2 = gs2.wrt(&x).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1.0, 2.0, 3.0], &[3]);
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_finite_forward_is_hard_error() {
        let tape = Tape::new();
        let x = leaf(&tape, &[1.0, 0.0], &[2]);
        let y = leaf(&tape, &[0.0, 0.0], &[2]);
        assert!(matches!(
            x.div(&y).unwrap_err(),
            Error::Numerical(_)
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = leaf(&tape, &(0..24).map(|i| i as f32 * 0.3 - 2.0).collect::<Vec<_>>(), &[2, 3, 4]);
            let y = x.gelu().unwrap().softmax_last().unwrap();
            y.data()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::new();
        let a = leaf(&tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(&tape, &[5.0, 6.0], &[2, 1]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.data(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.slice(1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::new();
        let a = leaf(&tape, &(0..24).map(|i| i as f32).collect::<Vec<_>>(), &[2, 3, 4]);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let a = leaf(&tape, &[1.0, 2.0], &[2]);
        assert!(a.backward().is_err());
    }
}
