//! Parameter registry and the small set of layers shared by the networks.
//!
//! Parameters live outside any tape in a [`ParamSet`]; each training or
//! inference step opens a [`StepCtx`] that lazily registers them as leaves
//! on a fresh tape, so weight tensors stay immutable during a step and the
//! optimizer updates them between steps.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::value::sample_trunc_normal;
use crate::autodiff::{Gradients, Tape, Tensor, Value};
use crate::error::{Error, Result};

/// Index of a parameter within its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named weight tensors for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Value>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Value) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Value {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Value {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Name -> value map (sorted), e.g. for checkpointing.
    pub fn to_named_map(&self) -> BTreeMap<String, Value> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Bind values from a name -> value map. Every parameter must be present
    /// with a matching shape; extra map entries are ignored.
    pub fn load_named_map(&mut self, map: &BTreeMap<String, Value>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = map.get(name).ok_or_else(|| {
                Error::Checkpoint(crate::error::CheckpointError::MissingTensor(name.clone()))
            })?;
            if src.shape != value.shape {
                return Err(Error::Checkpoint(
                    crate::error::CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        found: src.shape.clone(),
                        expected: value.shape.clone(),
                    },
                ));
            }
            *value = src.clone();
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// Builds a [`ParamSet`] with seeded initializers.
pub struct ParamBuilder<'r> {
    pub set: ParamSet,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        ParamBuilder {
            set: ParamSet::new(),
            rng,
        }
    }

    /// Truncated normal (std, cut at 2 sigma), the ViT embedding/attention
    /// convention.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| sample_trunc_normal(std, 2.0, self.rng))
            .collect();
        self.set.add(
            name,
            Value {
                shape: shape.to_vec(),
                data,
            },
        )
    }

    /// Fan-in scaled init for conv kernels: std = sqrt(2 / fan_in).
    pub fn conv_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f32).sqrt();
        self.trunc_normal(name, shape, std)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> ParamId {
        self.set.add(name, Value::full(shape, v))
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// Per-step binding of a [`ParamSet`] onto a tape.
pub struct StepCtx<'p> {
    tape: Tape,
    params: &'p ParamSet,
    leaves: std::cell::RefCell<Vec<Option<Tensor>>>,
    trainable: bool,
}

impl<'p> StepCtx<'p> {
    pub fn new(params: &'p ParamSet, trainable: bool) -> Self {
        Self::with_tape(params, Tape::new(), trainable)
    }

    /// Bind the parameters onto an existing tape (used when the input leaf
    /// already lives on a caller-owned tape, e.g. gradient checks).
    pub fn with_tape(params: &'p ParamSet, tape: Tape, trainable: bool) -> Self {
        StepCtx {
            tape,
            params,
            leaves: std::cell::RefCell::new(vec![None; params.len()]),
            trainable,
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Leaf tensor for a parameter; registered once per step.
    pub fn param(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = &leaves[id.0] {
            return t.clone();
        }
        let t = self
            .tape
            .leaf(self.params.value(id).clone(), self.trainable);
        leaves[id.0] = Some(t.clone());
        t
    }

    /// Register an input tensor on this step's tape.
    pub fn input(&self, value: Value, requires_grad: bool) -> Tensor {
        self.tape.leaf(value, requires_grad)
    }

    pub fn constant(&self, value: Value) -> Tensor {
        self.tape.constant(value)
    }

    /// Extract per-parameter gradients after a backward pass, indexed like
    /// the underlying `ParamSet`.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f32>>> {
        let leaves = self.leaves.borrow();
        leaves
            .iter()
            .map(|slot| {
                slot.as_ref()
                    .and_then(|t| grads.wrt(t).map(|g| g.to_vec()))
            })
            .collect()
    }
}

// ---- layers ------------------------------------------------------------------

/// Dense layer: y = x @ w + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, std: f32) -> Self {
        Linear {
            w: pb.trunc_normal(&format!("{name}.w"), &[d_in, d_out], std),
            b: pb.constant(&format!("{name}.b"), &[d_out], 0.0),
        }
    }

    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        x.matmul(&ctx.param(self.w))?
            .add_row_bias(&ctx.param(self.b))
    }
}

/// 2-D convolution layer (square kernel, NCHW).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: pb.conv_fan_in(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k),
            b: pb.constant(&format!("{name}.b"), &[cout], 0.0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&ctx.param(self.w), self.stride, self.pad)?
            .add_chan_bias(&ctx.param(self.b))
    }
}

/// Transposed 2-D convolution layer (square kernel, NCHW).
#[derive(Clone, Debug)]
pub struct ConvT2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvT2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        ConvT2d {
            w: pb.conv_fan_in(&format!("{name}.w"), &[cin, cout, k, k], cin * k * k),
            b: pb.constant(&format!("{name}.b"), &[cout], 0.0),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose2d(&ctx.param(self.w), self.stride, self.pad, self.out_pad)?
            .add_chan_bias(&ctx.param(self.b))
    }
}

/// Layer norm over the trailing dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: pb.constant(&format!("{name}.gamma"), &[d], 1.0),
            beta: pb.constant(&format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&ctx.param(self.gamma), &ctx.param(self.beta))
    }
}

/// Group norm over NCHW channels.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: pb.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: pb.constant(&format!("{name}.beta"), &[channels], 0.0),
            groups,
        }
    }

    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, &ctx.param(self.gamma), &ctx.param(self.beta))
    }
}

/// Two 3x3 convs with pre-activation GELU and a skip connection.
#[derive(Clone, Debug)]
pub struct ResConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResConvBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, ch: usize) -> Self {
        ResConvBlock {
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            conv2: Conv2d::new(pb, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
        }
    }

    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(ctx, &x.gelu()?)?;
        let h = self.conv2.forward(ctx, &h.gelu()?)?;
        h.add(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    #[test]
    fn param_roundtrip_through_named_map() {
        let mut rng = seeded_rng(1, 0);
        let mut pb = ParamBuilder::new(&mut rng);
        let lin = Linear::new(&mut pb, "lin", 3, 2, 0.02);
        let mut set = pb.finish();
        let map = set.to_named_map();
        assert!(map.contains_key("lin.w") && map.contains_key("lin.b"));
        let orig = set.value(lin.w).clone();
        set.value_mut(lin.w).data[0] += 1.0;
        set.load_named_map(&map).unwrap();
        assert_eq!(set.value(lin.w).data, orig.data);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut rng = seeded_rng(1, 0);
        let mut pb = ParamBuilder::new(&mut rng);
        Linear::new(&mut pb, "lin", 3, 2, 0.02);
        let mut set = pb.finish();
        let mut map = set.to_named_map();
        map.insert("lin.w".into(), Value::zeros(&[2, 2]));
        assert!(set.load_named_map(&map).is_err());
    }

    #[test]
    fn step_ctx_caches_param_leaves() {
        let mut rng = seeded_rng(1, 0);
        let mut pb = ParamBuilder::new(&mut rng);
        let lin = Linear::new(&mut pb, "lin", 4, 4, 0.02);
        let set = pb.finish();
        let ctx = StepCtx::new(&set, true);
        let a = ctx.param(lin.w);
        let b = ctx.param(lin.w);
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn linear_forward_shape_and_grads() {
        let mut rng = seeded_rng(2, 0);
        let mut pb = ParamBuilder::new(&mut rng);
        let lin = Linear::new(&mut pb, "lin", 3, 2, 0.1);
        let set = pb.finish();
        let ctx = StepCtx::new(&set, true);
        let x = ctx.input(Value::uniform(&[5, 3], -1.0, 1.0, &mut rng), false);
        let y = lin.forward(&ctx, &x).unwrap();
        assert_eq!(y.shape(), vec![5, 2]);
        let loss = y.mul(&y).unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let collected = ctx.collect_grads(&grads);
        assert!(collected.iter().all(|g| g.is_some()));
    }
}
