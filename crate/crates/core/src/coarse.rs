//! Coarse depth predictor: ViT encoder with a convolutional fusion decoder.
//!
//! The encoder embeds non-overlapping patches, runs L pre-norm transformer
//! blocks and taps feature maps at four hook layers. Tapped token grids are
//! reassembled by patch position, resampled to four target scales and fused
//! top-down, each stage doubling resolution; the head emits a sigmoid depth
//! map at full input resolution from a feature at half resolution.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Value};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvT2d, LayerNorm, Linear, ParamBuilder, ParamSet, ResConvBlock, StepCtx};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub hook_layers: Vec<usize>,
    pub fusion_dim: usize,
    /// Downscale factor of each hooked feature map relative to the input.
    pub hook_scales: Vec<usize>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            hook_layers: vec![2, 4, 6, 8],
            fusion_dim: 64,
            hook_scales: vec![4, 8, 16, 32],
        }
    }
}

impl ViTConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny() -> Self {
        ViTConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            hook_layers: vec![1, 1, 2, 2],
            fusion_dim: 16,
            hook_scales: vec![1, 2, 4, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, p) = (self.image_size, self.patch_size);
        if p == 0 || h == 0 || h % p != 0 {
            return Err(Error::config(format!(
                "patch size {p} must divide image size {h}"
            )));
        }
        if self.hook_layers.len() != 4 || self.hook_scales.len() != 4 {
            return Err(Error::config(format!(
                "expected 4 hook layers and 4 hook scales, got {:?} / {:?}",
                self.hook_layers, self.hook_scales
            )));
        }
        if self
            .hook_layers
            .iter()
            .any(|&l| l == 0 || l > self.depth)
        {
            return Err(Error::config(format!(
                "hook layers {:?} must lie in 1..={}",
                self.hook_layers, self.depth
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        for &s in &self.hook_scales {
            if s == 0 || h % s != 0 {
                return Err(Error::config(format!(
                    "hook scale {s} must divide image size {h}"
                )));
            }
            if s >= p && s % p != 0 {
                return Err(Error::config(format!(
                    "downsampling hook scale {s} needs an integral stride over patch size {p}"
                )));
            }
            if s < p && p % s != 0 {
                return Err(Error::config(format!(
                    "upsampling hook scale {s} needs an integral stride under patch size {p}"
                )));
            }
        }
        let mut sorted = self.hook_scales.clone();
        sorted.sort_unstable();
        if sorted != self.hook_scales {
            return Err(Error::config(format!(
                "hook scales must be listed fine to coarse, got {:?}",
                self.hook_scales
            )));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.tokens_per_side() * self.tokens_per_side()
    }
}

/// Number of patch tokens for an h x w image: h*w / p^2.
pub fn patch_token_count(h: usize, w: usize, p: usize) -> Result<usize> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "patch size {p} must divide image dims {h}x{w}"
        )));
    }
    Ok((h / p) * (w / p))
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Resample {
    project: Conv2d,
    kind: ResampleKind,
}

#[derive(Clone, Debug)]
enum ResampleKind {
    Same(Conv2d),
    Down(Conv2d),
    Up(ConvT2d),
}

#[derive(Clone, Debug)]
struct FusionStage {
    rcu_lateral: Option<ResConvBlock>,
    rcu_post: ResConvBlock,
    out_conv: Conv2d,
}

/// The coarse depth network.
pub struct CoarseNet {
    pub cfg: ViTConfig,
    pub params: ParamSet,
    patch_proj: Conv2d,
    pos_embed: crate::nn::ParamId,
    readout: crate::nn::ParamId,
    blocks: Vec<Block>,
    resamples: Vec<Resample>,
    /// Stages ordered coarse -> fine.
    stages: Vec<FusionStage>,
    head_conv1: Conv2d,
    head_conv2: Conv2d,
}

impl CoarseNet {
    pub fn new(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(rng);
        let d = cfg.embed_dim;
        let dh = cfg.fusion_dim;
        let p = cfg.patch_size;

        let patch_proj = Conv2d::new(&mut pb, "vit.patch_proj", 3, d, p, p, 0);
        let pos_embed = pb.trunc_normal("vit.pos_embed", &[cfg.n_patches() + 1, d], 0.02);
        let readout = pb.trunc_normal("vit.readout", &[1, d], 0.02);

        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = format!("vit.blocks.{i}");
                Block {
                    ln1: LayerNorm::new(&mut pb, &format!("{n}.ln1"), d),
                    qkv: Linear::new(&mut pb, &format!("{n}.attn.qkv"), d, 3 * d, 0.02),
                    proj: Linear::new(&mut pb, &format!("{n}.attn.proj"), d, d, 0.02),
                    ln2: LayerNorm::new(&mut pb, &format!("{n}.ln2"), d),
                    fc1: Linear::new(&mut pb, &format!("{n}.mlp.fc1"), d, 4 * d, 0.02),
                    fc2: Linear::new(&mut pb, &format!("{n}.mlp.fc2"), 4 * d, d, 0.02),
                }
            })
            .collect();

        let resamples = cfg
            .hook_scales
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let n = format!("dec.resample.{i}");
                let project = Conv2d::new(&mut pb, &format!("{n}.project"), d, dh, 1, 1, 0);
                let kind = if s == p {
                    ResampleKind::Same(Conv2d::new(&mut pb, &format!("{n}.same"), dh, dh, 3, 1, 1))
                } else if s > p {
                    ResampleKind::Down(Conv2d::new(
                        &mut pb,
                        &format!("{n}.down"),
                        dh,
                        dh,
                        3,
                        s / p,
                        1,
                    ))
                } else {
                    let stride = p / s;
                    ResampleKind::Up(ConvT2d::new(
                        &mut pb,
                        &format!("{n}.up"),
                        dh,
                        dh,
                        3,
                        stride,
                        1,
                        stride - 1,
                    ))
                };
                Resample { project, kind }
            })
            .collect();

        let stages = (0..4)
            .map(|i| {
                let n = format!("dec.fusion.{i}");
                FusionStage {
                    rcu_lateral: (i > 0)
                        .then(|| ResConvBlock::new(&mut pb, &format!("{n}.lateral"), dh)),
                    rcu_post: ResConvBlock::new(&mut pb, &format!("{n}.post"), dh),
                    out_conv: Conv2d::new(&mut pb, &format!("{n}.out"), dh, dh, 1, 1, 0),
                }
            })
            .collect();

        let head_conv1 = Conv2d::new(&mut pb, "dec.head.conv1", dh, dh / 2, 3, 1, 1);
        let head_conv2 = Conv2d::new(&mut pb, "dec.head.conv2", dh / 2, 1, 1, 1, 0);

        Ok(CoarseNet {
            cfg: cfg.clone(),
            params: pb.finish(),
            patch_proj,
            pos_embed,
            readout,
            blocks,
            resamples,
            stages,
            head_conv1,
            head_conv2,
        })
    }

    /// Embed patches, prepend the readout token and add positional encodings.
    /// Input [B, 3, H, W] -> tokens [B, N+1, D].
    pub fn patch_embed(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (hw, p, d) = (self.cfg.image_size, self.cfg.patch_size, self.cfg.embed_dim);
        if s.len() != 4 || s[1] != 3 || s[2] != hw || s[3] != hw {
            return Err(Error::shape(format!(
                "patch_embed: expected [B, 3, {hw}, {hw}], got {s:?}"
            )));
        }
        let b = s[0];
        let n = patch_token_count(s[2], s[3], p)?;
        let feat = self.patch_proj.forward(ctx, x)?; // [B, D, H/p, W/p]
        let tokens = feat.reshape(&[b, d, n])?.permute(&[0, 2, 1])?; // [B, N, D]

        let readout = ctx.param(self.readout).reshape(&[1, 1, d])?;
        let readouts: Vec<Tensor> = (0..b).map(|_| readout.clone()).collect();
        let readout_refs: Vec<&Tensor> = readouts.iter().collect();
        let ro = Tensor::concat(&readout_refs, 0)?; // [B, 1, D]
        let full = Tensor::concat(&[&ro, &tokens], 1)?; // [B, N+1, D]

        // positional encodings broadcast over the batch
        let pos = ctx.param(self.pos_embed).reshape(&[(n + 1) * d])?;
        full.reshape(&[b, (n + 1) * d])?
            .add_row_bias(&pos)?
            .reshape(&[b, n + 1, d])
    }

    fn attention(&self, ctx: &StepCtx, block: &Block, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let qkv = block.qkv.forward(ctx, &block.ln1.forward(ctx, x)?)?; // [B, N, 3D]
        let split = |at: usize| -> Result<Tensor> {
            qkv.slice(2, at * d, d)?
                .reshape(&[b, n, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * heads, n, dh])
        };
        let q = split(0)?;
        let k = split(1)?;
        let v = split(2)?;
        let kt = k.reshape(&[b, heads, n, dh])?
            .permute(&[0, 1, 3, 2])?
            .reshape(&[b * heads, dh, n])?;
        let scores = q.matmul(&kt)?.mul_scalar(1.0 / (dh as f32).sqrt())?;
        let attn = scores.softmax_last()?;
        let out = attn
            .matmul(&v)?
            .reshape(&[b, heads, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, d])?;
        block.proj.forward(ctx, &out)
    }

    fn block_forward(&self, ctx: &StepCtx, block: &Block, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attention(ctx, block, x)?)?;
        let h = block.fc1.forward(ctx, &block.ln2.forward(ctx, &x)?)?;
        let h = block.fc2.forward(ctx, &h.gelu()?)?;
        x.add(&h)
    }

    /// Run the transformer and reassemble token grids at each hook layer.
    /// Returns one [B, D, H/p, W/p] map per hook slot, in hook order.
    pub fn encode(&self, ctx: &StepCtx, tokens: &Tensor) -> Result<Vec<Tensor>> {
        let s = tokens.shape();
        let n = self.cfg.n_patches();
        if s.len() != 3 || s[1] != n + 1 || s[2] != self.cfg.embed_dim {
            return Err(Error::shape(format!(
                "encode: expected [B, {}, {}], got {s:?}",
                n + 1,
                self.cfg.embed_dim
            )));
        }
        let mut hooks: Vec<Option<Tensor>> = vec![None; 4];
        let mut x = tokens.clone();
        for (li, block) in self.blocks.iter().enumerate() {
            x = self.block_forward(ctx, block, &x)?;
            let layer = li + 1;
            for (slot, &hl) in self.cfg.hook_layers.iter().enumerate() {
                if hl == layer {
                    hooks[slot] = Some(self.reassemble(&x)?);
                }
            }
        }
        Ok(hooks
            .into_iter()
            .map(|h| h.expect("hook layers validated against depth"))
            .collect())
    }

    /// Drop the readout token and lay the patch tokens back out on the grid.
    fn reassemble(&self, tokens: &Tensor) -> Result<Tensor> {
        let s = tokens.shape();
        let (b, d) = (s[0], self.cfg.embed_dim);
        let side = self.cfg.tokens_per_side();
        let n = self.cfg.n_patches();
        tokens
            .slice(1, 1, n)?
            .permute(&[0, 2, 1])?
            .reshape(&[b, d, side, side])
    }

    /// Position-indexed reassembly: token row `i` carries the patch at
    /// `positions[i]` (row-major grid index). The grid is rebuilt from the
    /// stored positions, so reordering tokens together with their positions
    /// leaves the output unchanged.
    pub fn reassemble_with_positions(
        &self,
        tokens_no_readout: &Tensor,
        positions: &[usize],
    ) -> Result<Tensor> {
        let s = tokens_no_readout.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        if positions.len() != n {
            return Err(Error::shape(format!(
                "reassemble: {} positions for {n} tokens",
                positions.len()
            )));
        }
        let side = self.cfg.tokens_per_side();
        // flat gather map: out[b, d, pos] = tokens[b, row_of(pos), d]
        let mut row_of = vec![usize::MAX; n];
        for (row, &pos) in positions.iter().enumerate() {
            if pos >= n || row_of[pos] != usize::MAX {
                return Err(Error::shape(format!(
                    "reassemble: positions must be a permutation of 0..{n}"
                )));
            }
            row_of[pos] = row;
        }
        let mut idx = Vec::with_capacity(b * d * n);
        for bi in 0..b {
            for di in 0..d {
                for pos in 0..n {
                    idx.push((bi * n + row_of[pos]) * d + di);
                }
            }
        }
        tokens_no_readout
            .gather(Arc::new(idx))?
            .reshape(&[b, d, side, side])
    }

    /// Resample one hooked map to its target scale: 1x1 projection to the
    /// fusion width, then a strided conv (scale >= patch) or transposed conv
    /// (scale < patch).
    pub fn resample(&self, ctx: &StepCtx, feat: &Tensor, slot: usize) -> Result<Tensor> {
        let r = self
            .resamples
            .get(slot)
            .ok_or_else(|| Error::config(format!("resample: no hook slot {slot}")))?;
        let y = r.project.forward(ctx, feat)?;
        match &r.kind {
            ResampleKind::Same(c) => c.forward(ctx, &y),
            ResampleKind::Down(c) => c.forward(ctx, &y),
            ResampleKind::Up(c) => c.forward(ctx, &y),
        }
    }

    /// Top-down fusion of the four resampled maps (passed in hook order,
    /// fine to coarse). Output is the fused feature at half input resolution.
    pub fn fuse(&self, ctx: &StepCtx, feats: &[Tensor]) -> Result<Tensor> {
        if feats.len() != 4 {
            return Err(Error::shape(format!(
                "fuse: expected 4 feature maps, got {}",
                feats.len()
            )));
        }
        let hw = self.cfg.image_size;
        for (slot, f) in feats.iter().enumerate() {
            let s = f.shape();
            let expect = hw / self.cfg.hook_scales[slot];
            if s.len() != 4 || s[2] != expect || s[3] != expect {
                return Err(Error::shape(format!(
                    "fuse: slot {slot} must be at {expect}x{expect} for scale {}, got {s:?}",
                    self.cfg.hook_scales[slot]
                )));
            }
        }
        // walk coarse -> fine
        let mut x: Option<Tensor> = None;
        for (stage_idx, stage) in self.stages.iter().enumerate() {
            let feat = &feats[3 - stage_idx];
            let y = match (&x, &stage.rcu_lateral) {
                (None, None) => feat.clone(),
                (Some(prev), Some(rcu)) => prev.add(&rcu.forward(ctx, feat)?)?,
                _ => unreachable!("only the coarsest stage lacks a lateral"),
            };
            let y = stage.rcu_post.forward(ctx, &y)?;
            let target = if stage_idx == 3 {
                hw / 2
            } else {
                hw / self.cfg.hook_scales[3 - stage_idx - 1]
            };
            let y = y.resize_bilinear(target, target)?;
            x = Some(stage.out_conv.forward(ctx, &y)?);
        }
        Ok(x.expect("four stages"))
    }

    /// Output head: 3x3 conv, nonlinearity, 1x1 conv, 2x bilinear upsample,
    /// sigmoid. Produces [B, 1, H, W] in (0, 1).
    pub fn head(&self, ctx: &StepCtx, fused: &Tensor) -> Result<Tensor> {
        let h = self.head_conv1.forward(ctx, fused)?.gelu()?;
        let logits = self.head_conv2.forward(ctx, &h)?;
        let s = logits.shape();
        logits
            .resize_bilinear(s[2] * 2, s[3] * 2)?
            .sigmoid()
    }

    /// Fusion plus head, the composition required of the decoder.
    pub fn fuse_and_head(&self, ctx: &StepCtx, feats: &[Tensor]) -> Result<Tensor> {
        let fused = self.fuse(ctx, feats)?;
        self.head(ctx, &fused)
    }

    /// Full forward pass: [B, 3, H, W] -> [B, 1, H, W].
    pub fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        let tokens = self.patch_embed(ctx, x)?;
        let hooks = self.encode(ctx, &tokens)?;
        let feats = hooks
            .iter()
            .enumerate()
            .map(|(slot, h)| self.resample(ctx, h, slot))
            .collect::<Result<Vec<_>>>()?;
        self.fuse_and_head(ctx, &feats)
    }

    /// Inference convenience: predict depth maps for a batch stored as a
    /// [B, 3, H, W] value. Deterministic in the weights and input.
    pub fn predict_coarse(&self, rgb: &Value) -> Result<Vec<DepthMap>> {
        let ctx = StepCtx::new(&self.params, false);
        let x = ctx.input(rgb.clone(), false);
        let out = self.forward(&ctx, &x)?;
        let s = out.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        let data = out.data();
        (0..b)
            .map(|bi| {
                DepthMap::from_values(h, w, data[bi * h * w..(bi + 1) * h * w].to_vec())
            })
            .collect()
    }
}
