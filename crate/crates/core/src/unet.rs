//! Conditional refiner U-Net.
//!
//! Predicts the clean latent directly from the channel concatenation of the
//! conditioning latent and the current blended latent, plus a sinusoidal
//! timestep embedding injected into every residual block as a learned
//! per-channel shift. The block inventory is deliberately small: residual
//! conv blocks, down/upsampling, and one single-head self-attention at the
//! bottleneck. There is no token conditioning of any kind.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{seeded_rng, Tensor, Value};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamBuilder, ParamId, ParamSet, StepCtx};
use crate::optim::{Adam, PlateauScheduler};
use crate::plbr::{forward_blend, Latent, LatentPredictor, PlbrSchedule};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub bottleneck_attn: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 128,
            groups: 8,
            bottleneck_attn: true,
        }
    }
}

impl UNetConfig {
    /// Two-level configuration for gradient checks.
    pub fn tiny() -> Self {
        UNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            time_embed_dim: 16,
            groups: 4,
            bottleneck_attn: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mults.is_empty() {
            return Err(Error::config(
                "unet needs base_channels >= 1 and at least one channel mult",
            ));
        }
        if self.channel_mults[0] != 1 {
            return Err(Error::config(format!(
                "first channel mult must be 1, got {:?}",
                self.channel_mults
            )));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "time_embed_dim must be an even number >= 4, got {}",
                self.time_embed_dim
            )));
        }
        if self.groups == 0 {
            return Err(Error::config("groups must be >= 1"));
        }
        for &m in &self.channel_mults {
            if (self.base_channels * m) % self.groups != 0 {
                return Err(Error::config(format!(
                    "groups {} must divide every level width (base {} x mults {:?})",
                    self.groups, self.base_channels, self.channel_mults
                )));
            }
        }
        Ok(())
    }

    /// Spatial divisibility required of input latents.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

/// Raw sinusoidal position encoding of an integer timestep.
pub fn embed_timestep(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let omega = (-(10_000f64.ln()) * exponent).exp();
        let arg = t as f64 * omega;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

#[derive(Clone, Debug)]
struct TimeResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, groups: usize, tdim: usize) -> Self {
        TimeResBlock {
            gn1: GroupNorm::new(pb, &format!("{name}.gn1"), cin, groups),
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), cin, cout, 3, 1, 1),
            time_proj: Linear::new(pb, &format!("{name}.time"), tdim, cout, 0.02),
            gn2: GroupNorm::new(pb, &format!("{name}.gn2"), cout, groups),
            conv2: Conv2d::new(pb, &format!("{name}.conv2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(pb, &format!("{name}.skip"), cin, cout, 1, 1, 0)),
        }
    }

    fn forward(&self, ctx: &StepCtx, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(ctx, &self.gn1.forward(ctx, x)?.gelu()?)?;
        let shift = self.time_proj.forward(ctx, temb)?;
        let h = h.add_chan_shift(&shift)?;
        let h = self.conv2.forward(ctx, &self.gn2.forward(ctx, &h)?.gelu()?)?;
        match &self.skip {
            Some(skip) => h.add(&skip.forward(ctx, x)?),
            None => h.add(x),
        }
    }
}

#[derive(Clone, Debug)]
struct SelfAttention2d {
    norm: GroupNorm,
    to_q: Conv2d,
    to_k: Conv2d,
    to_v: Conv2d,
    proj: Conv2d,
}

impl SelfAttention2d {
    fn new(pb: &mut ParamBuilder, name: &str, ch: usize, groups: usize) -> Self {
        SelfAttention2d {
            norm: GroupNorm::new(pb, &format!("{name}.norm"), ch, groups),
            to_q: Conv2d::new(pb, &format!("{name}.q"), ch, ch, 1, 1, 0),
            to_k: Conv2d::new(pb, &format!("{name}.k"), ch, ch, 1, 1, 0),
            to_v: Conv2d::new(pb, &format!("{name}.v"), ch, ch, 1, 1, 0),
            proj: Conv2d::new(pb, &format!("{name}.proj"), ch, ch, 1, 1, 0),
        }
    }

    fn forward(&self, ctx: &StepCtx, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = h * w;
        let normed = self.norm.forward(ctx, x)?;
        let tokens = |t: Tensor| -> Result<Tensor> { t.reshape(&[b, c, n])?.permute(&[0, 2, 1]) };
        let q = tokens(self.to_q.forward(ctx, &normed)?)?;
        let k = self.to_k.forward(ctx, &normed)?.reshape(&[b, c, n])?;
        let v = tokens(self.to_v.forward(ctx, &normed)?)?;
        let scores = q.matmul(&k)?.mul_scalar(1.0 / (c as f32).sqrt())?;
        let attn = scores.softmax_last()?;
        let out = attn
            .matmul(&v)?
            .permute(&[0, 2, 1])?
            .reshape(&[b, c, h, w])?;
        self.proj.forward(ctx, &out)?.add(x)
    }
}

pub struct RefinerUNet {
    pub cfg: UNetConfig,
    /// Latent channel count; the network consumes 2x this many channels.
    pub latent_channels: usize,
    pub params: ParamSet,
    time_fc1: Linear,
    time_fc2: Linear,
    stem: Conv2d,
    down_res: Vec<TimeResBlock>,
    downs: Vec<Conv2d>,
    mid_res1: TimeResBlock,
    mid_attn: Option<SelfAttention2d>,
    mid_res2: TimeResBlock,
    up_convs: Vec<Conv2d>,
    up_res: Vec<TimeResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl RefinerUNet {
    pub fn new(cfg: &UNetConfig, latent_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if latent_channels == 0 {
            return Err(Error::config("latent_channels must be >= 1"));
        }
        let mut pb = ParamBuilder::new(rng);
        let tdim = cfg.time_embed_dim;
        let levels = cfg.channel_mults.len();
        let ch = |i: usize| cfg.base_channels * cfg.channel_mults[i];

        let time_fc1 = Linear::new(&mut pb, "time.fc1", tdim, tdim, 0.02);
        let time_fc2 = Linear::new(&mut pb, "time.fc2", tdim, tdim, 0.02);
        let stem = Conv2d::new(&mut pb, "stem", 2 * latent_channels, ch(0), 3, 1, 1);

        let mut down_res = Vec::new();
        let mut downs = Vec::new();
        for i in 0..levels - 1 {
            down_res.push(TimeResBlock::new(
                &mut pb,
                &format!("down.{i}.res"),
                ch(i),
                ch(i),
                cfg.groups,
                tdim,
            ));
            downs.push(Conv2d::new(
                &mut pb,
                &format!("down.{i}.pool"),
                ch(i),
                ch(i + 1),
                3,
                2,
                1,
            ));
        }

        let cl = ch(levels - 1);
        let mid_res1 = TimeResBlock::new(&mut pb, "mid.res1", cl, cl, cfg.groups, tdim);
        let mid_attn = cfg
            .bottleneck_attn
            .then(|| SelfAttention2d::new(&mut pb, "mid.attn", cl, cfg.groups));
        let mid_res2 = TimeResBlock::new(&mut pb, "mid.res2", cl, cl, cfg.groups, tdim);

        let mut up_convs = Vec::new();
        let mut up_res = Vec::new();
        for i in (0..levels - 1).rev() {
            up_convs.push(Conv2d::new(
                &mut pb,
                &format!("up.{i}.conv"),
                ch(i + 1),
                ch(i),
                3,
                1,
                1,
            ));
            up_res.push(TimeResBlock::new(
                &mut pb,
                &format!("up.{i}.res"),
                2 * ch(i),
                ch(i),
                cfg.groups,
                tdim,
            ));
        }

        let out_norm = GroupNorm::new(&mut pb, "out.norm", ch(0), cfg.groups);
        let out_conv = Conv2d::new(&mut pb, "out.conv", ch(0), latent_channels, 3, 1, 1);

        Ok(RefinerUNet {
            cfg: cfg.clone(),
            latent_channels,
            params: pb.finish(),
            time_fc1,
            time_fc2,
            stem,
            down_res,
            downs,
            mid_res1,
            mid_attn,
            mid_res2,
            up_convs,
            up_res,
            out_norm,
            out_conv,
        })
    }

    /// Embedding MLP over the raw sinusoids, one row per batch item.
    fn time_embedding(&self, ctx: &StepCtx, ts: &[usize]) -> Result<Tensor> {
        let dim = self.cfg.time_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            data.extend(embed_timestep(t, dim));
        }
        let raw = ctx.constant(Value::new(vec![ts.len(), dim], data)?);
        self.time_fc2
            .forward(ctx, &self.time_fc1.forward(ctx, &raw)?.gelu()?)
    }

    /// Forward on a batch. `zx_zt`: [B, 2*latent_channels, h, w] (condition
    /// and state concatenated on the channel axis); `ts`: one timestep per
    /// batch item. Output has the latent shape [B, latent_channels, h, w].
    pub fn forward(&self, ctx: &StepCtx, zx_zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let s = zx_zt.shape();
        if s.len() != 4 || s[1] != 2 * self.latent_channels {
            return Err(Error::shape(format!(
                "unet forward: expected [B, {}, h, w], got {s:?}",
                2 * self.latent_channels
            )));
        }
        if s[0] != ts.len() {
            return Err(Error::shape(format!(
                "unet forward: {} timesteps for batch of {}",
                ts.len(),
                s[0]
            )));
        }
        let div = self.cfg.spatial_divisor();
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::shape(format!(
                "unet forward: spatial dims {}x{} must be divisible by {div}",
                s[2], s[3]
            )));
        }
        let temb = self.time_embedding(ctx, ts)?;

        let mut h = self.stem.forward(ctx, zx_zt)?;
        let mut skips = Vec::new();
        for (res, down) in self.down_res.iter().zip(&self.downs) {
            h = res.forward(ctx, &h, &temb)?;
            skips.push(h.clone());
            h = down.forward(ctx, &h)?;
        }
        h = self.mid_res1.forward(ctx, &h, &temb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(ctx, &h)?;
        }
        h = self.mid_res2.forward(ctx, &h, &temb)?;
        for (conv, res) in self.up_convs.iter().zip(&self.up_res) {
            let skip = skips.pop().expect("one skip per up stage");
            h = conv.forward(ctx, &h.upsample_nearest(2)?)?;
            h = Tensor::concat(&[&h, &skip], 1)?;
            h = res.forward(ctx, &h, &temb)?;
        }
        self.out_conv
            .forward(ctx, &self.out_norm.forward(ctx, &h)?.gelu()?)
    }

    /// Single-sample inference.
    pub fn predict(&self, zx: &Latent, zt: &Latent, t: usize) -> Result<Latent> {
        if zx.shape() != zt.shape() {
            return Err(Error::shape(format!(
                "predict: latent shapes differ, {:?} vs {:?}",
                zx.shape(),
                zt.shape()
            )));
        }
        if zx.channels != self.latent_channels {
            return Err(Error::shape(format!(
                "predict: expected {} latent channels, got {}",
                self.latent_channels, zx.channels
            )));
        }
        let ctx = StepCtx::new(&self.params, false);
        let mut data = Vec::with_capacity(2 * zx.numel());
        data.extend_from_slice(&zx.values);
        data.extend_from_slice(&zt.values);
        let x = ctx.input(
            Value::new(vec![1, 2 * zx.channels, zx.height, zx.width], data)?,
            false,
        );
        let out = self.forward(&ctx, &x, &[t])?;
        let s = out.shape();
        Latent::new(s[1], s[2], s[3], out.data())
    }

    /// Ids of the embedding MLP parameters (exposed for gradient-flow checks).
    pub fn time_mlp_param_ids(&self) -> Vec<ParamId> {
        vec![
            self.time_fc1.w,
            self.time_fc1.b,
            self.time_fc2.w,
            self.time_fc2.b,
        ]
    }
}

impl LatentPredictor for RefinerUNet {
    fn predict_latent(&self, zx: &Latent, zt: &Latent, t: usize) -> Result<Latent> {
        self.predict(zx, zt, t)
    }
}

/// One refiner training example: clean latent, coarse latent, image latent.
#[derive(Clone, Debug)]
pub struct RefinerSample {
    pub z0: Latent,
    pub zc: Latent,
    pub zx: Latent,
}

#[derive(Clone, Debug)]
pub struct RefinerTrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub plateau_factor: f32,
    pub plateau_patience: usize,
    pub seed: u64,
}

pub struct RefinerTrainLog {
    pub train_loss: Vec<f32>,
    pub val_loss: Vec<f32>,
    pub lrs: Vec<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f32,
    /// Weights at the best validation epoch.
    pub best_params: std::collections::BTreeMap<String, Value>,
}

/// Mean absolute error between a prediction batch and a target batch.
pub fn latent_l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.sub(target)?.abs()?.mean_all()
}

fn batch_of(samples: &[RefinerSample], idx: &[usize], ts: &[usize], sched: &PlbrSchedule) -> Result<(Value, Value)> {
    let first = &samples[idx[0]].z0;
    let (c, h, w) = first.shape();
    let mut input = Vec::with_capacity(idx.len() * 2 * c * h * w);
    let mut target = Vec::with_capacity(idx.len() * c * h * w);
    for (pos, &i) in idx.iter().enumerate() {
        let s = &samples[i];
        let zt = forward_blend(&s.z0, &s.zc, ts[pos], sched)?;
        input.extend_from_slice(&s.zx.values);
        input.extend_from_slice(&zt.values);
        target.extend_from_slice(&s.z0.values);
    }
    Ok((
        Value::new(vec![idx.len(), 2 * c, h, w], input)?,
        Value::new(vec![idx.len(), c, h, w], target)?,
    ))
}

/// Validation loss: mean L1 over every sample and every timestep actually
/// visited at inference (1..T-1). Deterministic, no sampling.
pub fn refiner_val_loss(
    net: &RefinerUNet,
    samples: &[RefinerSample],
    sched: &PlbrSchedule,
    batch_size: usize,
) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in 1..sched.steps {
        let idx: Vec<usize> = (0..samples.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let ts = vec![t; chunk.len()];
            let (input, target) = batch_of(samples, chunk, &ts, sched)?;
            let ctx = StepCtx::new(&net.params, false);
            let x = ctx.input(input, false);
            let y = ctx.constant(target);
            let pred = net.forward(&ctx, &x, &ts)?;
            let loss = latent_l1_loss(&pred, &y)?.scalar()?;
            total += loss as f64 * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok((total / count as f64) as f32)
}

/// Train the refiner on (z0, zc, zx) triples. Per step a timestep is drawn
/// uniformly from {1..T-1} for each sample, the blended latent is built and
/// the network is fit with L1 loss against the clean latent.
pub fn train_refiner(
    net: &mut RefinerUNet,
    train: &[RefinerSample],
    val: &[RefinerSample],
    sched: &PlbrSchedule,
    opts: &RefinerTrainOpts,
) -> Result<RefinerTrainLog> {
    use rand::Rng;
    if train.is_empty() {
        return Err(Error::data("train_refiner: empty sample set"));
    }
    let mut opt = Adam::new(&net.params, opts.lr, 0.0);
    let mut sched_lr = PlateauScheduler::new(opts.lr, opts.plateau_factor, opts.plateau_patience)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = seeded_rng(opts.seed, 0x5E01);
    let mut t_rng = seeded_rng(opts.seed, 0x5E02);

    let mut log = RefinerTrainLog {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        lrs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f32::INFINITY,
        best_params: net.params.to_named_map(),
    };

    for epoch in 0..opts.epochs {
        crate::vae::shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let ts: Vec<usize> = chunk
                .iter()
                .map(|_| t_rng.gen_range(1..sched.steps))
                .collect();
            let (input, target) = batch_of(train, chunk, &ts, sched)?;
            let ctx = StepCtx::new(&net.params, true);
            let x = ctx.input(input, false);
            let y = ctx.constant(target);
            let pred = net.forward(&ctx, &x, &ts)?;
            let loss = latent_l1_loss(&pred, &y)?;
            let grads = loss.backward()?;
            let per_param = ctx.collect_grads(&grads);
            opt.step(&mut net.params, &per_param)?;
            epoch_loss += loss.scalar()? as f64;
            batches += 1;
        }
        log.train_loss.push((epoch_loss / batches as f64) as f32);

        let val_loss = if val.is_empty() {
            *log.train_loss.last().unwrap()
        } else {
            refiner_val_loss(net, val, sched, opts.batch_size)?
        };
        log.val_loss.push(val_loss);
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            log.best_params = net.params.to_named_map();
        }
        opt.lr = sched_lr.observe(val_loss);
        log.lrs.push(opt.lr);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plbr::make_schedule;
    use rand::Rng;

    fn rand_latent(c: usize, h: usize, w: usize, stream: u64) -> Latent {
        let mut rng = seeded_rng(41, stream);
        Latent::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn raw_sinusoid_at_zero_is_zeros_then_ones() {
        let e = embed_timestep(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn distinct_timesteps_embed_distinctly() {
        let a = embed_timestep(3, 128);
        let b = embed_timestep(4, 128);
        let d2: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(d2 > 0.0);
    }

    #[test]
    fn predict_shape_contract_and_determinism() {
        let mut rng = seeded_rng(42, 0);
        let net = RefinerUNet::new(&UNetConfig::default(), 4, &mut rng).unwrap();
        let zx = rand_latent(4, 16, 16, 0);
        let zt = rand_latent(4, 16, 16, 1);
        let out = net.predict(&zx, &zt, 3).unwrap();
        assert_eq!(out.shape(), (4, 16, 16));
        let out2 = net.predict(&zx, &zt, 3).unwrap();
        assert_eq!(out.values, out2.values);
    }

    #[test]
    fn predict_rejects_mismatched_shapes() {
        let mut rng = seeded_rng(43, 0);
        let net = RefinerUNet::new(&UNetConfig::tiny(), 2, &mut rng).unwrap();
        let zx = rand_latent(2, 8, 8, 2);
        let zt = rand_latent(2, 8, 4, 3);
        assert!(net.predict(&zx, &zt, 1).is_err());
        let zt3 = rand_latent(3, 8, 8, 4);
        assert!(net.predict(&zt3, &zt3, 1).is_err());
    }

    #[test]
    fn block_inventory_has_no_token_conditioning() {
        let mut rng = seeded_rng(44, 0);
        let net = RefinerUNet::new(&UNetConfig::default(), 4, &mut rng).unwrap();
        let allowed = [
            "time.", "stem.", "down.", "mid.res", "mid.attn.", "up.", "out.",
        ];
        for id in net.params.ids() {
            let name = net.params.name(id);
            assert!(
                allowed.iter().any(|p| name.starts_with(p)),
                "unexpected block parameter {name}"
            );
            assert!(!name.contains("cross") && !name.contains("text"), "{name}");
        }
    }

    #[test]
    fn l1_loss_nonnegative_and_zero_iff_equal() {
        let mut rng = seeded_rng(45, 0);
        let tape = crate::autodiff::Tape::new();
        let a = tape.leaf(Value::uniform(&[2, 3], -1.0, 1.0, &mut rng), false);
        let b = tape.leaf(Value::uniform(&[2, 3], -1.0, 1.0, &mut rng), false);
        assert!(latent_l1_loss(&a, &b).unwrap().scalar().unwrap() > 0.0);
        assert_eq!(latent_l1_loss(&a, &a).unwrap().scalar().unwrap(), 0.0);
    }

    #[test]
    fn degenerate_data_has_zero_loss_at_identity_prediction() {
        // when zc == z0 every blended state equals z0, so a model copying
        // its state input would be exact
        let sched = make_schedule(6, 0.8).unwrap();
        let z0 = rand_latent(2, 8, 8, 5);
        for t in 1..6 {
            let zt = forward_blend(&z0, &z0, t, &sched).unwrap();
            assert_eq!(zt.values, z0.values);
        }
    }

    #[test]
    fn time_mlp_receives_gradient() {
        let mut rng = seeded_rng(46, 0);
        let net = RefinerUNet::new(&UNetConfig::tiny(), 2, &mut rng).unwrap();
        let ctx = StepCtx::new(&net.params, true);
        let x = ctx.input(Value::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut rng), false);
        let pred = net.forward(&ctx, &x, &[1, 3]).unwrap();
        let target = ctx.constant(Value::uniform(&[2, 2, 8, 8], -1.0, 1.0, &mut rng));
        let loss = latent_l1_loss(&pred, &target).unwrap();
        let grads = loss.backward().unwrap();
        let per_param = ctx.collect_grads(&grads);
        let ids: Vec<usize> = net.params.ids().enumerate().map(|(i, _)| i).collect();
        for want in net.time_mlp_param_ids() {
            let idx = net
                .params
                .ids()
                .position(|id| id == want)
                .unwrap();
            let g = per_param[ids[idx]].as_ref().expect("time mlp grad");
            let norm: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm > 0.0);
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let mut rng = seeded_rng(47, 0);
        let mut net = RefinerUNet::new(&UNetConfig::tiny(), 2, &mut rng).unwrap();
        let sched = make_schedule(4, 0.8).unwrap();
        let samples: Vec<RefinerSample> = (0..8)
            .map(|i| RefinerSample {
                z0: rand_latent(2, 8, 8, 100 + i),
                zc: rand_latent(2, 8, 8, 200 + i),
                zx: rand_latent(2, 8, 8, 300 + i),
            })
            .collect();
        let log = train_refiner(
            &mut net,
            &samples,
            &samples[..2],
            &sched,
            &RefinerTrainOpts {
                epochs: 8,
                batch_size: 4,
                lr: 2e-3,
                plateau_factor: 0.5,
                plateau_patience: 5,
                seed: 42,
            },
        )
        .unwrap();
        assert!(
            log.train_loss.last().unwrap() < &log.train_loss[0],
            "{:?}",
            log.train_loss
        );
        assert!(log.best_val_loss <= log.val_loss[0]);
    }

    #[test]
    fn empty_sample_set_is_error() {
        let mut rng = seeded_rng(48, 0);
        let mut net = RefinerUNet::new(&UNetConfig::tiny(), 2, &mut rng).unwrap();
        let sched = make_schedule(4, 0.8).unwrap();
        assert!(train_refiner(
            &mut net,
            &[],
            &[],
            &sched,
            &RefinerTrainOpts {
                epochs: 1,
                batch_size: 1,
                lr: 1e-3,
                plateau_factor: 0.5,
                plateau_patience: 5,
                seed: 42
            }
        )
        .is_err());
    }
}
