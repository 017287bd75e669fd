//! Latent codec: a small VAE compressing images into a low-dimensional
//! latent space, plus an identity mode that keeps the refinement in pixel
//! space (the "no codec" ablation arm — same code path, zero codec error).
//!
//! Depth maps are replicated to 3 channels before encoding and the decoded
//! channels are averaged back to one, so a single codec serves images and
//! depth alike. Encoding is deterministic (posterior mean); sampling only
//! happens inside VAE training.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{seeded_rng, Tensor, Value};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvT2d, ParamBuilder, ParamSet, ResConvBlock, StepCtx};
use crate::optim::Adam;
use crate::plbr::Latent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Vae,
    Identity,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub kl_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mode: CodecMode::Vae,
            downsample_factor: 4,
            latent_channels: 4,
            base_channels: 32,
            kl_weight: 1e-6,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::config(format!(
                "downsample_factor must be a power of two, got {}",
                self.downsample_factor
            )));
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::config(
                "latent_channels and base_channels must be >= 1",
            ));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::config(format!(
                "kl_weight must be nonnegative, got {}",
                self.kl_weight
            )));
        }
        Ok(())
    }

    /// Pixels-to-latent compression factor in vae mode: 3 f^2 / c.
    pub fn compression_ratio(&self) -> f64 {
        3.0 * (self.downsample_factor * self.downsample_factor) as f64
            / self.latent_channels as f64
    }
}

/// Encoder/decoder pair. Identity mode passes data through unchanged.
pub enum Codec {
    Identity,
    Vae(VaeNet),
}

impl Codec {
    pub fn from_config(cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Result<Codec> {
        cfg.validate()?;
        Ok(match cfg.mode {
            CodecMode::Identity => Codec::Identity,
            CodecMode::Vae => Codec::Vae(VaeNet::new(cfg, rng)?),
        })
    }

    pub fn mode(&self) -> CodecMode {
        match self {
            Codec::Identity => CodecMode::Identity,
            Codec::Vae(_) => CodecMode::Vae,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Vae(net) => net.cfg.downsample_factor,
        }
    }

    /// Channel count of latents produced from 3-channel inputs.
    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Identity => 3,
            Codec::Vae(net) => net.cfg.latent_channels,
        }
    }

    pub fn params(&self) -> Option<&ParamSet> {
        match self {
            Codec::Identity => None,
            Codec::Vae(net) => Some(&net.params),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        match self {
            Codec::Identity => None,
            Codec::Vae(net) => Some(&mut net.params),
        }
    }

    /// Deterministic encode of a 3-channel image stored as [3, H, W].
    pub fn encode_rgb(&self, img: &Value) -> Result<Latent> {
        let s = &img.shape;
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!(
                "encode: expected [3, H, W], got {s:?}"
            )));
        }
        match self {
            Codec::Identity => Latent::new(3, s[1], s[2], img.data.clone()),
            Codec::Vae(net) => net.encode_mean(img),
        }
    }

    /// Replicate a depth map to 3 channels and encode it.
    pub fn encode_depth(&self, d: &DepthMap) -> Result<Latent> {
        let mut data = Vec::with_capacity(3 * d.numel());
        for _ in 0..3 {
            data.extend_from_slice(&d.values);
        }
        let img = Value::new(vec![3, d.height, d.width], data)?;
        self.encode_rgb(&img)
    }

    /// Decode a latent back to a [3, H, W] image in pixel range.
    pub fn decode_rgb(&self, z: &Latent) -> Result<Value> {
        match self {
            Codec::Identity => {
                if z.channels != 3 {
                    return Err(Error::shape(format!(
                        "identity decode: expected 3 channels, got {}",
                        z.channels
                    )));
                }
                Value::new(vec![3, z.height, z.width], z.values.clone())
            }
            Codec::Vae(net) => net.decode(z),
        }
    }

    /// Decode a depth latent: average the 3 decoded channels and clamp to
    /// [0, 1].
    pub fn decode_depth(&self, z: &Latent) -> Result<DepthMap> {
        let img = self.decode_rgb(z)?;
        let (h, w) = (img.shape[1], img.shape[2]);
        let hw = h * w;
        let values = (0..hw)
            .map(|i| {
                let m = (img.data[i] + img.data[hw + i] + img.data[2 * hw + i]) / 3.0;
                m.clamp(0.0, 1.0)
            })
            .collect();
        DepthMap::from_values(h, w, values)
    }
}

/// The trainable VAE.
pub struct VaeNet {
    pub cfg: CodecConfig,
    pub params: ParamSet,
    stem: Conv2d,
    downs: Vec<(Conv2d, ResConvBlock)>,
    to_mu: Conv2d,
    to_logvar: Conv2d,
    from_latent: Conv2d,
    bottom_res: ResConvBlock,
    ups: Vec<(ConvT2d, Option<ResConvBlock>)>,
    out_conv: Conv2d,
}

impl VaeNet {
    pub fn new(cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(rng);
        let base = cfg.base_channels;
        let stages = cfg.downsample_factor.trailing_zeros() as usize;
        let ch = |i: usize| base << i;
        let last = ch(stages.saturating_sub(1));

        let stem = Conv2d::new(&mut pb, "enc.stem", 3, base, 3, 1, 1);
        let downs = (0..stages)
            .map(|i| {
                let cin = ch(i.saturating_sub(1));
                let cout = ch(i);
                (
                    Conv2d::new(&mut pb, &format!("enc.down.{i}"), cin, cout, 3, 2, 1),
                    ResConvBlock::new(&mut pb, &format!("enc.res.{i}"), cout),
                )
            })
            .collect();
        let to_mu = Conv2d::new(&mut pb, "enc.mu", last, cfg.latent_channels, 1, 1, 0);
        let to_logvar = Conv2d::new(&mut pb, "enc.logvar", last, cfg.latent_channels, 1, 1, 0);

        let from_latent = Conv2d::new(&mut pb, "dec.in", cfg.latent_channels, last, 1, 1, 0);
        let bottom_res = ResConvBlock::new(&mut pb, "dec.res_in", last);
        let ups = (0..stages)
            .rev()
            .map(|i| {
                let cin = ch(i);
                let cout = ch(i.saturating_sub(1));
                let up = ConvT2d::new(&mut pb, &format!("dec.up.{i}"), cin, cout, 3, 2, 1, 1);
                // keep a residual block at every level except full resolution
                let res = (i > 0).then(|| ResConvBlock::new(&mut pb, &format!("dec.res.{i}"), cout));
                (up, res)
            })
            .collect();
        let out_conv = Conv2d::new(&mut pb, "dec.out", base, 3, 3, 1, 1);

        Ok(VaeNet {
            cfg: cfg.clone(),
            params: pb.finish(),
            stem,
            downs,
            to_mu,
            to_logvar,
            from_latent,
            bottom_res,
            ups,
            out_conv,
        })
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.cfg.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "vae encode: dims {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    /// Encoder forward on a batch [B, 3, H, W] -> (mu, logvar), each
    /// [B, c, H/f, W/f].
    pub fn encode_forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = x.shape();
        self.check_dims(s[2], s[3])?;
        let mut h = self.stem.forward(ctx, x)?;
        for (down, res) in &self.downs {
            h = res.forward(ctx, &down.forward(ctx, &h)?)?;
        }
        let h = h.gelu()?;
        Ok((self.to_mu.forward(ctx, &h)?, self.to_logvar.forward(ctx, &h)?))
    }

    /// Decoder forward on a batch [B, c, h, w] -> [B, 3, H, W] in (0, 1).
    pub fn decode_forward(&self, ctx: &StepCtx, z: &Tensor) -> Result<Tensor> {
        let mut h = self.bottom_res.forward(ctx, &self.from_latent.forward(ctx, z)?)?;
        for (up, res) in &self.ups {
            h = up.forward(ctx, &h)?;
            if let Some(res) = res {
                h = res.forward(ctx, &h)?;
            }
        }
        self.out_conv.forward(ctx, &h.gelu()?)?.sigmoid()
    }

    /// Deterministic single-image encode (posterior mean).
    pub fn encode_mean(&self, img: &Value) -> Result<Latent> {
        let ctx = StepCtx::new(&self.params, false);
        let x = ctx.input(
            Value::new(
                vec![1, img.shape[0], img.shape[1], img.shape[2]],
                img.data.clone(),
            )?,
            false,
        );
        let (mu, _) = self.encode_forward(&ctx, &x)?;
        let s = mu.shape();
        Latent::new(s[1], s[2], s[3], mu.data())
    }

    /// Single-latent decode.
    pub fn decode(&self, z: &Latent) -> Result<Value> {
        if z.channels != self.cfg.latent_channels {
            return Err(Error::shape(format!(
                "vae decode: expected {} channels, got {}",
                self.cfg.latent_channels, z.channels
            )));
        }
        let ctx = StepCtx::new(&self.params, false);
        let zt = ctx.input(
            Value::new(vec![1, z.channels, z.height, z.width], z.values.clone())?,
            false,
        );
        let out = self.decode_forward(&ctx, &zt)?;
        let s = out.shape();
        Value::new(vec![s[1], s[2], s[3]], out.data())
    }

    /// Training loss on a batch: L1 reconstruction plus `kl_weight` times the
    /// KL divergence of the posterior from the standard normal. Returns
    /// (total, recon, kl) scalars.
    pub fn loss_terms(
        &self,
        ctx: &StepCtx,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (mu, logvar) = self.encode_forward(ctx, x)?;
        let eps = ctx.constant(Value::randn(&mu.shape(), rng));
        let z = mu.add(&logvar.mul_scalar(0.5)?.exp()?.mul(&eps)?)?;
        let recon = self.decode_forward(ctx, &z)?;
        let recon_l1 = recon.sub(x)?.abs()?.mean_all()?;
        // KL per element: -(1 + logvar - mu^2 - exp(logvar)) / 2
        let kl = logvar
            .add_scalar(1.0)?
            .sub(&mu.mul(&mu)?)?
            .sub(&logvar.exp()?)?
            .mean_all()?
            .mul_scalar(-0.5)?;
        let total = recon_l1.add(&kl.mul_scalar(self.cfg.kl_weight as f32)?)?;
        Ok((total, recon_l1, kl))
    }
}

/// Options for [`train_vae`].
#[derive(Clone, Debug)]
pub struct VaeTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

/// Per-epoch mean training losses.
pub struct VaeTrainLog {
    pub train_loss: Vec<f32>,
}

/// Train the VAE on a set of [3, H, W] items (images and replicated depth
/// maps together, so one codec serves both).
pub fn train_vae(net: &mut VaeNet, items: &[Value], opts: &VaeTrainOpts) -> Result<VaeTrainLog> {
    if items.is_empty() {
        return Err(Error::data("train_vae: empty dataset"));
    }
    let mut opt = Adam::new(&net.params, opts.lr, 0.0);
    let mut log = VaeTrainLog {
        train_loss: Vec::new(),
    };
    let mut shuffle_rng = seeded_rng(opts.seed, 0xAE01);
    let mut noise_rng = seeded_rng(opts.seed, 0xAE02);
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..opts.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch = stack_items(items, chunk)?;
            let ctx = StepCtx::new(&net.params, true);
            let x = ctx.input(batch, false);
            let (total, _, _) = net.loss_terms(&ctx, &x, &mut noise_rng)?;
            let grads = total.backward()?;
            let per_param = ctx.collect_grads(&grads);
            opt.step(&mut net.params, &per_param)?;
            epoch_loss += total.scalar()? as f64;
            batches += 1;
        }
        log.train_loss.push((epoch_loss / batches as f64) as f32);
    }
    Ok(log)
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
}

pub(crate) fn stack_items(items: &[Value], idx: &[usize]) -> Result<Value> {
    let first = &items[idx[0]];
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&first.shape);
    let mut data = Vec::with_capacity(first.numel() * idx.len());
    for &i in idx {
        if items[i].shape != first.shape {
            return Err(Error::shape(format!(
                "cannot stack items of shapes {:?} and {:?}",
                first.shape, items[i].shape
            )));
        }
        data.extend_from_slice(&items[i].data);
    }
    Value::new(shape, data)
}
