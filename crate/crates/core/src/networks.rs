//! KL autoencoder (E1, D), condition encoder (E2), conditional U-Net
//! denoiser, and the KOA classifier stub.
//!
//! Every network is a plain struct of [`ParamId`]s built against a
//! [`ParamStore`]; the same struct evaluates `f32` weights for training and
//! an `f64` cast of them for gradient checks.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Real, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{mean_squared_error, EmaState, LatentGrid, ScheduleConfig};
use crate::error::{Error, Result};
use crate::guidance::{self, AdaptiveWeight, GuidanceConfig, KoaDistribution, NUM_GRADES};
use crate::nn::{
    norm_groups, timestep_embedding, Bound, Builder, Conv2d, CrossAttention, Downsample, GroupNorm, Linear, ParamStore,
    ResBlock, Upsample,
};

/// One grayscale slice, intensities in `[-1, 1]`.
pub type SliceImage = Array2<f32>;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// 1 internally at desk scale, 3 for triplicated paper-scale inputs.
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub latent_channels: usize,
    pub input_resolution: usize,
    pub kl_weight: f64,
    pub norm_groups: usize,
}

impl AutoencoderConfig {
    pub fn latent_resolution(&self) -> usize {
        self.input_resolution >> (self.channel_multipliers.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        validate_stack(
            "autoencoder",
            self.base_channels,
            &self.channel_multipliers,
            self.input_resolution,
        )?;
        if self.latent_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("autoencoder channel counts must be positive".into()));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEncoderConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    pub latent_channels: usize,
    pub input_resolution: usize,
    pub context_dim: usize,
    /// The context is pooled to a `grid x grid` set of tokens.
    pub context_grid: usize,
    pub norm_groups: usize,
}

impl ConditionEncoderConfig {
    pub fn latent_resolution(&self) -> usize {
        self.input_resolution >> (self.channel_multipliers.len().saturating_sub(1))
    }

    pub fn context_tokens(&self) -> usize {
        self.context_grid * self.context_grid
    }

    pub fn validate(&self) -> Result<()> {
        validate_stack(
            "condition encoder",
            self.base_channels,
            &self.channel_multipliers,
            self.input_resolution,
        )?;
        let lr = self.latent_resolution();
        if self.context_grid == 0 || lr % self.context_grid != 0 {
            return Err(Error::Config(format!(
                "context grid {} must divide the latent resolution {lr}",
                self.context_grid
            )));
        }
        if self.context_dim == 0 {
            return Err(Error::Config("context_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    /// Downsampling factors (1 = full latent resolution) that get cross-attention.
    pub attention_resolutions: Vec<usize>,
    pub attention_heads: usize,
    pub context_dim: usize,
    pub latent_resolution: usize,
    pub norm_groups: usize,
}

impl UNetConfig {
    pub fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        validate_stack(
            "unet",
            self.base_channels,
            &self.channel_multipliers,
            self.latent_resolution,
        )?;
        if self.in_channels != 2 * self.out_channels {
            return Err(Error::Config(format!(
                "unet in_channels {} must be twice out_channels {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::Config("unet base_channels must be even".into()));
        }
        for (l, m) in self.channel_multipliers.iter().enumerate() {
            let factor = 1 << l;
            let ch = self.base_channels * m;
            if self.attention_resolutions.contains(&factor) && ch % self.attention_heads.clamp(1, ch) != 0 {
                return Err(Error::Config(format!(
                    "{ch} channels at level {l} not divisible by {} heads",
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub image_channels: usize,
    pub channels: Vec<usize>,
    pub input_resolution: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.input_resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "classifier: resolution {} not divisible by 2^{}",
                self.input_resolution,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// All network shapes of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub autoencoder: AutoencoderConfig,
    pub condition: ConditionEncoderConfig,
    pub unet: UNetConfig,
    pub guidance: GuidanceConfig,
    pub classifier: ClassifierConfig,
    /// Applied after encoding, divided out before decoding. The small
    /// autoencoders trained from scratch give latents near unit variance and
    /// use 1.0; the full-size one uses 0.2.
    pub latent_scale: f64,
    pub ema_decay: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    /// Default sizes for a single CPU: 64x64 slices, 16x16x4 latents.
    pub fn desk_scale() -> Self {
        Self::build(Sizes {
            image_channels: 1,
            resolution: 64,
            ae_base: 32,
            ae_mults: vec![1, 2, 4],
            ae_blocks: 2,
            e2_base: 32,
            e2_blocks: 1,
            unet_base: 64,
            unet_mults: vec![1, 2, 4],
            unet_blocks: 2,
            attention: vec![4, 2, 1],
            heads: 8,
            context_dim: 64,
            guidance_attn: 16,
            classifier: vec![16, 32, 64],
            groups: 8,
            latent_scale: 1.0,
        })
    }

    /// Full-size architecture: 256x256 triplicated inputs, 128-channel
    /// autoencoder, 320-channel U-Net with context dimension 768.
    pub fn paper_scale() -> Self {
        Self::build(Sizes {
            image_channels: 3,
            resolution: 256,
            ae_base: 128,
            ae_mults: vec![1, 2, 4, 4],
            ae_blocks: 2,
            e2_base: 128,
            e2_blocks: 2,
            unet_base: 320,
            unet_mults: vec![1, 2, 4, 4],
            unet_blocks: 2,
            attention: vec![4, 2, 1],
            heads: 8,
            context_dim: 768,
            guidance_attn: 64,
            classifier: vec![32, 64, 128, 256],
            groups: 32,
            latent_scale: 0.2,
        })
    }

    /// Smallest useful model at a given slice resolution; used by tests and
    /// quick overfitting runs.
    pub fn tiny(resolution: usize) -> Self {
        Self::build(Sizes {
            image_channels: 1,
            resolution,
            ae_base: 8,
            ae_mults: vec![1, 2, 4],
            ae_blocks: 1,
            e2_base: 8,
            e2_blocks: 1,
            unet_base: 16,
            unet_mults: vec![1, 2],
            unet_blocks: 1,
            attention: vec![2],
            heads: 2,
            context_dim: 16,
            guidance_attn: 8,
            classifier: vec![8, 16, 16],
            groups: 4,
            latent_scale: 1.0,
        })
    }

    fn build(s: Sizes) -> Self {
        let latent_resolution = s.resolution >> (s.ae_mults.len() - 1);
        Self {
            autoencoder: AutoencoderConfig {
                image_channels: s.image_channels,
                base_channels: s.ae_base,
                channel_multipliers: s.ae_mults.clone(),
                res_blocks_per_stage: s.ae_blocks,
                latent_channels: 4,
                input_resolution: s.resolution,
                kl_weight: 1e-6,
                norm_groups: s.groups,
            },
            condition: ConditionEncoderConfig {
                image_channels: s.image_channels,
                base_channels: s.e2_base,
                channel_multipliers: s.ae_mults,
                res_blocks_per_stage: s.e2_blocks,
                latent_channels: 4,
                input_resolution: s.resolution,
                context_dim: s.context_dim,
                context_grid: 2,
                norm_groups: s.groups,
            },
            unet: UNetConfig {
                in_channels: 8,
                out_channels: 4,
                base_channels: s.unet_base,
                channel_multipliers: s.unet_mults,
                res_blocks_per_stage: s.unet_blocks,
                attention_resolutions: s.attention,
                attention_heads: s.heads,
                context_dim: s.context_dim,
                latent_resolution,
                norm_groups: s.groups,
            },
            guidance: GuidanceConfig {
                height: latent_resolution,
                width: latent_resolution,
                attn_dim: s.guidance_attn,
            },
            classifier: ClassifierConfig {
                image_channels: s.image_channels,
                channels: s.classifier,
                input_resolution: s.resolution,
            },
            latent_scale: s.latent_scale,
            ema_decay: 0.99,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.condition.validate()?;
        self.unet.validate()?;
        self.classifier.validate()?;
        let lr = self.autoencoder.latent_resolution();
        let lc = self.autoencoder.latent_channels;
        if self.condition.latent_resolution() != lr || self.unet.latent_resolution != lr {
            return Err(Error::Config(format!(
                "condition encoder / unet latent resolution must equal the autoencoder's {lr}"
            )));
        }
        if self.condition.latent_channels != lc || self.unet.out_channels != lc {
            return Err(Error::Config(format!("latent channel counts must all equal {lc}")));
        }
        if self.condition.context_dim != self.unet.context_dim {
            return Err(Error::Config("condition context_dim must match the unet".into()));
        }
        if self.guidance.height != lr || self.guidance.width != lr {
            return Err(Error::Config(format!("guidance plane must be {lr}x{lr}")));
        }
        if self.condition.input_resolution != self.autoencoder.input_resolution
            || self.classifier.input_resolution != self.autoencoder.input_resolution
        {
            return Err(Error::Config("all image encoders must share the input resolution".into()));
        }
        if !(self.latent_scale > 0.0) {
            return Err(Error::Config("latent_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        Ok(())
    }
}

struct Sizes {
    image_channels: usize,
    resolution: usize,
    ae_base: usize,
    ae_mults: Vec<usize>,
    ae_blocks: usize,
    e2_base: usize,
    e2_blocks: usize,
    unet_base: usize,
    unet_mults: Vec<usize>,
    unet_blocks: usize,
    attention: Vec<usize>,
    heads: usize,
    context_dim: usize,
    guidance_attn: usize,
    classifier: Vec<usize>,
    groups: usize,
    latent_scale: f64,
}

fn validate_stack(what: &str, base: usize, mults: &[usize], resolution: usize) -> Result<()> {
    if mults.is_empty() || base == 0 || mults.contains(&0) {
        return Err(Error::Config(format!("{what}: channel multipliers must be nonempty and positive")));
    }
    let div = 1usize << (mults.len() - 1);
    if resolution == 0 || resolution % div != 0 {
        return Err(Error::Config(format!(
            "{what}: resolution {resolution} not divisible by 2^{}",
            mults.len() - 1
        )));
    }
    Ok(())
}

/// Stacks slices into `(b, channels, h, w)`, repeating grayscale across channels.
pub fn images_to_tensor<F: Real>(images: &[&SliceImage], channels: usize) -> ArrayD<F> {
    let (h, w) = images[0].dim();
    ArrayD::from_shape_fn(IxDyn(&[images.len(), channels, h, w]), |ix| {
        F::of(images[ix[0]][[ix[2], ix[3]]] as f64)
    })
}

/// Channel mean of `(b, c, h, w)` back to per-sample slices.
pub fn tensor_to_images<F: Real>(t: &ArrayD<F>) -> Vec<SliceImage> {
    let s = t.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    (0..b)
        .map(|i| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let total: f64 = (0..c).map(|k| t[[i, k, y, x]].as_f64()).sum();
                (total / c as f64) as f32
            })
        })
        .collect()
}

/// Stacks latents into `(b, c, h, w)`.
pub fn latent_to_tensor<F: Real>(z: &[&LatentGrid<F>]) -> ArrayD<F> {
    let [c, h, w] = z[0].shape();
    ArrayD::from_shape_fn(IxDyn(&[z.len(), c, h, w]), |ix| z[ix[0]].values()[[ix[1], ix[2], ix[3]]])
}

/// Item `index` of a `(b, c, h, w)` tensor.
pub fn tensor_to_latent<F: Real>(t: &ArrayD<F>, index: usize) -> LatentGrid<F> {
    let v = t.index_axis(Axis(0), index).to_owned();
    LatentGrid::new(v.into_dimensionality::<ndarray::Ix3>().expect("(c, h, w) latent"))
}

pub(crate) fn check_image(x: &SliceImage, resolution: usize) -> Result<()> {
    if x.dim() != (resolution, resolution) {
        return Err(Error::ShapeMismatch {
            expected: vec![resolution, resolution],
            got: vec![x.nrows(), x.ncols()],
        });
    }
    Ok(())
}

/// Conv stem, residual stages with stride-2 downsampling, a middle block and
/// a normalised output head.
#[derive(Debug, Clone)]
struct ConvEncoder {
    conv_in: Conv2d,
    stages: Vec<(Vec<ResBlock>, Option<Downsample>)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ConvEncoder {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        b: &mut Builder<'_, F>,
        cin: usize,
        base: usize,
        mults: &[usize],
        blocks: usize,
        cout: usize,
        groups: usize,
    ) -> (Self, usize) {
        let conv_in = Conv2d::new(&mut b.pp("conv_in"), cin, base, 3, Conv2dSpec::same3());
        let mut ch = base;
        let mut stages = Vec::new();
        for (l, &m) in mults.iter().enumerate() {
            let out = base * m;
            let mut s = b.pp(format!("down{l}"));
            let mut res = Vec::new();
            for r in 0..blocks {
                res.push(ResBlock::new(&mut s.pp(format!("res{r}")), ch, out, None, groups));
                ch = out;
            }
            let down = (l + 1 < mults.len()).then(|| Downsample::new(&mut s.pp("down"), ch));
            stages.push((res, down));
        }
        let mid = ResBlock::new(&mut b.pp("mid"), ch, ch, None, groups);
        let norm_out = GroupNorm::new(&mut b.pp("norm_out"), norm_groups(groups, ch), ch);
        let conv_out = Conv2d::new(&mut b.pp("conv_out"), ch, cout, 3, Conv2dSpec::same3());
        (
            Self {
                conv_in,
                stages,
                mid,
                norm_out,
                conv_out,
            },
            ch,
        )
    }

    fn features<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let mut h = self.conv_in.forward(p, x);
        for (res, down) in &self.stages {
            for r in res {
                h = r.forward(p, h, None);
            }
            if let Some(d) = down {
                h = d.forward(p, h);
            }
        }
        self.mid.forward(p, h, None)
    }

    fn head<'t, F: Real>(&self, p: &Bound<'t, F>, h: Var<'t, F>) -> Var<'t, F> {
        self.conv_out.forward(p, self.norm_out.forward(p, h).silu())
    }
}

#[derive(Debug, Clone)]
struct ConvDecoder {
    conv_in: Conv2d,
    mid: ResBlock,
    stages: Vec<(Vec<ResBlock>, Option<Upsample>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ConvDecoder {
    fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &AutoencoderConfig) -> Self {
        let mults = &cfg.channel_multipliers;
        let g = cfg.norm_groups;
        let mut ch = cfg.base_channels * mults[mults.len() - 1];
        let conv_in = Conv2d::new(&mut b.pp("conv_in"), cfg.latent_channels, ch, 3, Conv2dSpec::same3());
        let mid = ResBlock::new(&mut b.pp("mid"), ch, ch, None, g);
        let mut stages = Vec::new();
        for (l, &m) in mults.iter().enumerate().rev() {
            let out = cfg.base_channels * m;
            let mut s = b.pp(format!("up{l}"));
            let mut res = Vec::new();
            for r in 0..cfg.res_blocks_per_stage {
                res.push(ResBlock::new(&mut s.pp(format!("res{r}")), ch, out, None, g));
                ch = out;
            }
            let up = (l > 0).then(|| Upsample::new(&mut s.pp("up"), ch));
            stages.push((res, up));
        }
        Self {
            conv_in,
            mid,
            stages,
            norm_out: GroupNorm::new(&mut b.pp("norm_out"), norm_groups(g, ch), ch),
            conv_out: Conv2d::new(&mut b.pp("conv_out"), ch, cfg.image_channels, 3, Conv2dSpec::same3()),
        }
    }

    fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, z: Var<'t, F>) -> Var<'t, F> {
        let mut h = self.mid.forward(p, self.conv_in.forward(p, z), None);
        for (res, up) in &self.stages {
            for r in res {
                h = r.forward(p, h, None);
            }
            if let Some(u) = up {
                h = u.forward(p, h);
            }
        }
        self.conv_out.forward(p, self.norm_out.forward(p, h).silu())
    }
}

/// Diagonal Gaussian over the latent plane of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: LatentGrid<f32>,
    pub logvar: LatentGrid<f32>,
}

/// E1 and D.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    encoder: ConvEncoder,
    decoder: ConvDecoder,
}

/// Loss terms of one autoencoder batch.
pub struct AeLoss<'t, F: Real> {
    pub total: Var<'t, F>,
    pub rec: Var<'t, F>,
    pub kl: Var<'t, F>,
}

impl Autoencoder {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &AutoencoderConfig) -> Self {
        let (encoder, _) = ConvEncoder::new(
            &mut b.pp("e1"),
            cfg.image_channels,
            cfg.base_channels,
            &cfg.channel_multipliers,
            cfg.res_blocks_per_stage,
            2 * cfg.latent_channels,
            cfg.norm_groups,
        );
        let decoder = ConvDecoder::new(&mut b.pp("d"), cfg);
        Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        }
    }

    /// `(mean, clamped logvar)`, each `(b, latent_channels, h, w)`.
    pub fn encode<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> (Var<'t, F>, Var<'t, F>) {
        let moments = self.encoder.head(p, self.encoder.features(p, x));
        let lc = self.cfg.latent_channels;
        let logvar = moments.narrow(1, lc, lc).clamp(F::of(LOGVAR_MIN), F::of(LOGVAR_MAX));
        (moments.narrow(1, 0, lc), logvar)
    }

    /// Unclamped reconstruction from an unscaled latent.
    pub fn decode<'t, F: Real>(&self, p: &Bound<'t, F>, z: Var<'t, F>) -> Var<'t, F> {
        self.decoder.forward(p, z)
    }

    /// Reparameterised reconstruction + KL on a batch `x: (b, c, h, w)`.
    pub fn loss<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>, rng: &mut impl Rng) -> AeLoss<'t, F> {
        let tape = x.tape();
        let (mean, logvar) = self.encode(p, x);
        let noise = ArrayD::from_shape_simple_fn(IxDyn(&mean.shape()), || F::of(rng.sample::<f64, _>(StandardNormal)));
        let z = mean + logvar.scale(F::of(0.5)).exp() * tape.constant(noise);
        let x_hat = self.decode(p, z);
        let rec = (x_hat - x).sqr().mean_all();
        let kl = (mean.sqr() + logvar.exp() - logvar)
            .add_scalar(-F::one())
            .mean_all()
            .scale(F::of(0.5));
        let total = rec + kl.scale(F::of(self.cfg.kl_weight));
        AeLoss { total, rec, kl }
    }
}

/// E2: latent-resolution condition plane plus a token context for
/// cross-attention.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub cfg: ConditionEncoderConfig,
    backbone: ConvEncoder,
    ctx_proj: Linear,
    top_channels: usize,
}

impl ConditionEncoder {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ConditionEncoderConfig) -> Self {
        let (backbone, top) = ConvEncoder::new(
            b,
            cfg.image_channels,
            cfg.base_channels,
            &cfg.channel_multipliers,
            cfg.res_blocks_per_stage,
            cfg.latent_channels,
            cfg.norm_groups,
        );
        Self {
            cfg: cfg.clone(),
            backbone,
            ctx_proj: Linear::new(&mut b.pp("ctx_proj"), top, cfg.context_dim, true),
            top_channels: top,
        }
    }

    /// `x: (b, c, h, w)` -> `(cond_latent (b, lc, lh, lw), context (b, tokens, dim))`.
    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> (Var<'t, F>, Var<'t, F>) {
        let feats = self.backbone.features(p, x);
        let cond = self.backbone.head(p, feats);
        let bsz = feats.shape()[0];
        let g = self.cfg.context_grid;
        let tokens = g * g;
        let c = self.top_channels;
        let pooled = feats
            .avg_pool(self.cfg.latent_resolution() / g)
            .reshape(&[bsz, c, tokens])
            .permute(&[0, 2, 1])
            .reshape(&[bsz * tokens, c]);
        let ctx = self
            .ctx_proj
            .forward(p, pooled)
            .reshape(&[bsz, tokens, self.cfg.context_dim]);
        (cond, ctx)
    }
}

#[derive(Debug, Clone)]
struct EmbedMlp {
    l1: Linear,
    l2: Linear,
}

impl EmbedMlp {
    fn new<F: Real>(b: &mut Builder<'_, F>, din: usize, dout: usize) -> Self {
        Self {
            l1: Linear::new(&mut b.pp("l1"), din, dout, true),
            l2: Linear::new(&mut b.pp("l2"), dout, dout, true),
        }
    }

    fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.l2.forward(p, self.l1.forward(p, x).silu())
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<(ResBlock, Option<CrossAttention>)>,
    resample: Option<Resample>,
}

#[derive(Debug, Clone)]
enum Resample {
    Down(Downsample),
    Up(Upsample),
}

/// Denoiser ε_θ: residual encoder/decoder with skips, time + depth
/// embeddings in the downsampling path, the guidance plane added at the start
/// of every upsampling level, and cross-attention on the E2 context.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    time_mlp: EmbedMlp,
    depth_mlp: EmbedMlp,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid: (ResBlock, CrossAttention, ResBlock),
    up: Vec<(Conv2d, Level)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &UNetConfig) -> Self {
        let base = cfg.base_channels;
        let emb = cfg.emb_dim();
        let g = cfg.norm_groups;
        let heads = cfg.attention_heads;
        let n = cfg.channel_multipliers.len();
        let attn_at = |l: usize| cfg.attention_resolutions.contains(&(1 << l));

        let time_mlp = EmbedMlp::new(&mut b.pp("time_mlp"), base, emb);
        let depth_mlp = EmbedMlp::new(&mut b.pp("depth_mlp"), base, emb);
        let conv_in = Conv2d::new(&mut b.pp("conv_in"), cfg.in_channels, base, 3, Conv2dSpec::same3());

        let mut ch = base;
        let mut skips = vec![ch];
        let mut down = Vec::new();
        for (l, &m) in cfg.channel_multipliers.iter().enumerate() {
            let out = base * m;
            let mut s = b.pp(format!("down{l}"));
            let mut blocks = Vec::new();
            for r in 0..cfg.res_blocks_per_stage {
                let rb = ResBlock::new(&mut s.pp(format!("res{r}")), ch, out, Some(emb), g);
                ch = out;
                let at = attn_at(l).then(|| CrossAttention::new(&mut s.pp(format!("attn{r}")), ch, cfg.context_dim, heads, g));
                blocks.push((rb, at));
                skips.push(ch);
            }
            let resample = (l + 1 < n).then(|| {
                skips.push(ch);
                Resample::Down(Downsample::new(&mut s.pp("down"), ch))
            });
            down.push(Level { blocks, resample });
        }

        let mid = {
            let mut s = b.pp("mid");
            (
                ResBlock::new(&mut s.pp("res0"), ch, ch, Some(emb), g),
                CrossAttention::new(&mut s.pp("attn"), ch, cfg.context_dim, heads, g),
                ResBlock::new(&mut s.pp("res1"), ch, ch, Some(emb), g),
            )
        };

        let mut up = Vec::new();
        for (l, &m) in cfg.channel_multipliers.iter().enumerate().rev() {
            let out = base * m;
            let mut s = b.pp(format!("up{l}"));
            let inject = Conv2d::new(&mut s.pp("guide"), 1, ch, 1, Conv2dSpec::default());
            let mut blocks = Vec::new();
            for r in 0..=cfg.res_blocks_per_stage {
                let skip = skips.pop().expect("skip stack matches the down path");
                let rb = ResBlock::new(&mut s.pp(format!("res{r}")), ch + skip, out, Some(emb), g);
                ch = out;
                let at = attn_at(l).then(|| CrossAttention::new(&mut s.pp(format!("attn{r}")), ch, cfg.context_dim, heads, g));
                blocks.push((rb, at));
            }
            let resample = (l > 0).then(|| Resample::Up(Upsample::new(&mut s.pp("up"), ch)));
            up.push((inject, Level { blocks, resample }));
        }
        assert!(skips.is_empty(), "unbalanced skip connections");

        Self {
            cfg: cfg.clone(),
            time_mlp,
            depth_mlp,
            conv_in,
            down,
            mid,
            up,
            norm_out: GroupNorm::new(&mut b.pp("norm_out"), norm_groups(g, ch), ch),
            conv_out: Conv2d::zeros(&mut b.pp("conv_out"), ch, cfg.out_channels, 3, Conv2dSpec::same3()),
        }
    }

    /// `z_concat: (b, in, h, w)`, one step index and depth per sample,
    /// `guide: (b, h, w)`, `context: (b, tokens, dim)`.
    pub fn forward<'t, F: Real>(
        &self,
        p: &Bound<'t, F>,
        z_concat: Var<'t, F>,
        steps: &[f64],
        depths: &[f64],
        guide: Var<'t, F>,
        context: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let tape = z_concat.tape();
        let s = z_concat.shape();
        let r = self.cfg.latent_resolution;
        let bsz = s[0];
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != r || s[3] != r {
            return Err(Error::ShapeMismatch {
                expected: vec![bsz, self.cfg.in_channels, r, r],
                got: s,
            });
        }
        if steps.len() != bsz || depths.len() != bsz || guide.shape() != [bsz, r, r] {
            return Err(Error::ShapeMismatch {
                expected: vec![bsz, r, r],
                got: guide.shape(),
            });
        }
        let base = self.cfg.base_channels;
        let temb = self.time_mlp.forward(p, tape.constant(timestep_embedding(steps, base)));
        let mut dvec = Vec::with_capacity(bsz * base);
        for &d in depths {
            dvec.extend(guidance::embed_depth(d, base)?.into_iter().map(F::of));
        }
        let demb = self
            .depth_mlp
            .forward(p, tape.constant(ArrayD::from_shape_vec(IxDyn(&[bsz, base]), dvec).expect("depth rows")));
        let down_emb = temb + demb;

        let mut h = self.conv_in.forward(p, z_concat);
        let mut skips = vec![h];
        for level in &self.down {
            for (rb, at) in &level.blocks {
                h = rb.forward(p, h, Some(down_emb));
                if let Some(a) = at {
                    h = a.forward(p, h, context);
                }
                skips.push(h);
            }
            if let Some(Resample::Down(d)) = &level.resample {
                h = d.forward(p, h);
                skips.push(h);
            }
        }
        h = self.mid.0.forward(p, h, Some(down_emb));
        h = self.mid.1.forward(p, h, context);
        h = self.mid.2.forward(p, h, Some(down_emb));

        let guide = guide.reshape(&[bsz, 1, r, r]);
        let n = self.up.len();
        for (i, (inject, level)) in self.up.iter().enumerate() {
            let factor = 1 << (n - 1 - i);
            h = h + inject.forward(p, guide.avg_pool(factor));
            for (rb, at) in &level.blocks {
                let skip = skips.pop().expect("skip available");
                h = rb.forward(p, Var::concat(&[h, skip], 1), Some(temb));
                if let Some(a) = at {
                    h = a.forward(p, h, context);
                }
            }
            if let Some(Resample::Up(u)) = &level.resample {
                h = u.forward(p, h);
            }
        }
        Ok(self.conv_out.forward(p, self.norm_out.forward(p, h).silu()))
    }
}

/// Small strided CNN producing 5 grade logits.
#[derive(Debug, Clone)]
pub struct KoaClassifier {
    pub cfg: ClassifierConfig,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl KoaClassifier {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ClassifierConfig) -> Self {
        let mut cin = cfg.image_channels;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut b.pp(format!("conv{i}")), cin, c, 3, Conv2dSpec::down3());
                cin = c;
                conv
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            convs,
            head: Linear::new(&mut b.pp("head"), cin, NUM_GRADES, true),
        }
    }

    /// `x: (b, c, h, w)` -> logits `(b, 5)`.
    pub fn logits<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(p, h).silu();
        }
        let s = h.shape();
        let hw = s[2] * s[3];
        let pooled = h
            .reshape(&[s[0], s[1], hw])
            .sum_axis_keep(2)
            .scale(F::of(1.0 / hw as f64))
            .reshape(&[s[0], s[1]]);
        self.head.forward(p, pooled)
    }
}

/// Where the grade distribution `p` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ClassifierMode {
    Learned,
    /// Ground-truth grade as a smoothed one-hot.
    Bypass { grade: usize, smoothing: f64 },
}

/// Everything trained in the diffusion stage: E2, U and the guidance module.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub e2: ConditionEncoder,
    pub unet: UNet,
    pub guidance: AdaptiveWeight,
}

impl Denoiser {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: &ModelConfig) -> Self {
        Self {
            e2: ConditionEncoder::new(&mut b.pp("e2"), &cfg.condition),
            unet: UNet::new(&mut b.pp("unet"), &cfg.unet),
            guidance: AdaptiveWeight::new(&mut b.pp("guide"), cfg.guidance),
        }
    }
}

/// Condition signals for a batch, computed once and reused across the
/// denoising steps of a sampler.
pub struct Conditioning<'t, F: Real> {
    pub cond_latent: Var<'t, F>,
    pub context: Var<'t, F>,
    pub guide: Var<'t, F>,
    pub depths: Vec<f64>,
}

impl Denoiser {
    /// `xray: (b, c, H, W)`, `probs: (b, 5)`, `i_map: (b, h, w)`.
    pub fn condition<'t, F: Real>(
        &self,
        p: &Bound<'t, F>,
        xray: Var<'t, F>,
        probs: Var<'t, F>,
        i_map: Var<'t, F>,
        depths: Vec<f64>,
    ) -> Result<Conditioning<'t, F>> {
        let (cond_latent, context) = self.e2.forward(p, xray);
        let guide = self.guidance.forward(p, probs, i_map)?.y;
        Ok(Conditioning {
            cond_latent,
            context,
            guide,
            depths,
        })
    }

    pub fn eps<'t, F: Real>(&self, p: &Bound<'t, F>, z_t: Var<'t, F>, steps: &[f64], c: &Conditioning<'t, F>) -> Result<Var<'t, F>> {
        let z = Var::concat(&[z_t, c.cond_latent], 1);
        self.unet.forward(p, z, steps, &c.depths, c.guide, c.context)
    }
}

/// All parameters of one model plus the EMA shadow of the diffusion stage.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub autoencoder: Autoencoder,
    pub ae_params: ParamStore<f32>,
    pub denoiser: Denoiser,
    pub diff_params: ParamStore<f32>,
    pub ema: EmaState<f32>,
    pub classifier: KoaClassifier,
    pub cls_params: ParamStore<f32>,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ae_params = ParamStore::new();
        let autoencoder = Autoencoder::new(&mut Builder::new(&mut ae_params, &mut rng), &config.autoencoder);
        let mut diff_params = ParamStore::new();
        let denoiser = Denoiser::new(&mut Builder::new(&mut diff_params, &mut rng), &config);
        let mut cls_params = ParamStore::new();
        let classifier = KoaClassifier::new(&mut Builder::new(&mut cls_params, &mut rng).pp("cls"), &config.classifier);
        let ema = EmaState::new(config.ema_decay, diff_params.flatten())?;
        Ok(Self {
            config,
            autoencoder,
            ae_params,
            denoiser,
            diff_params,
            ema,
            classifier,
            cls_params,
        })
    }

    /// Diffusion-stage parameters with the EMA shadow swapped in.
    pub fn ema_params(&self) -> ParamStore<f32> {
        let mut store = self.diff_params.clone();
        store.unflatten(self.ema.shadow());
        store
    }

    /// Serialises every store into named tensors under the section
    /// prefixes `ae/`, `diff/`, `ema/`, `cls/`, with the model config in the
    /// header table.
    pub fn to_checkpoint(&self, mut header: toml::Table) -> Result<Checkpoint> {
        header.insert(
            "model".into(),
            toml::Value::try_from(&self.config).map_err(|e| Error::Config(e.to_string()))?,
        );
        let mut ck = Checkpoint::new(header);
        let ema = self.ema_params();
        for (section, store) in [
            ("ae", &self.ae_params),
            ("diff", &self.diff_params),
            ("ema", &ema),
            ("cls", &self.cls_params),
        ] {
            for (_, name, v) in store.iter() {
                ck.push(format!("{section}/{name}"), v.clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck
            .header
            .get("model")
            .ok_or_else(|| Error::Missing("checkpoint header has no [model] table".into()))?;
        let config: ModelConfig = model.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut bundle = Self::new(config, 0)?;
        let fill = |section: &str, store: &mut ParamStore<f32>| -> Result<()> {
            let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
            for (id, name) in ids {
                let key = format!("{section}/{name}");
                let v = ck.get(&key).ok_or_else(|| Error::Missing(format!("tensor {key}")))?;
                crate::error::ensure_shape(store.get(id).shape(), v.shape())?;
                *store.get_mut(id) = v.clone();
            }
            Ok(())
        };
        fill("ae", &mut bundle.ae_params)?;
        fill("diff", &mut bundle.diff_params)?;
        fill("cls", &mut bundle.cls_params)?;
        let mut ema = bundle.diff_params.clone();
        fill("ema", &mut ema)?;
        bundle.ema = EmaState::new(bundle.config.ema_decay, ema.flatten())?;
        Ok(bundle)
    }
}

/// Posterior of E1 for one slice.
pub fn encode_kl(x: &SliceImage, ae: &Autoencoder, params: &ParamStore<f32>) -> Result<GaussianPosterior> {
    check_image(x, ae.cfg.input_resolution)?;
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let (mean, logvar) = ae.encode(&p, tape.constant(images_to_tensor(&[x], ae.cfg.image_channels)));
    Ok(GaussianPosterior {
        mean: tensor_to_latent(&mean.value(), 0),
        logvar: tensor_to_latent(&logvar.value(), 0),
    })
}

/// `scale · (mean + exp(logvar/2)·n)`, `n` standard normal.
pub fn sample_posterior(post: &GaussianPosterior, scale: f64, rng: &mut impl Rng) -> LatentGrid<f32> {
    let mut z = post.mean.values().clone();
    ndarray::Zip::from(&mut z).and(post.logvar.values()).for_each(|m, &lv| {
        let n: f64 = rng.sample(StandardNormal);
        *m = ((*m as f64 + (0.5 * lv as f64).exp() * n) * scale) as f32;
    });
    LatentGrid::new(z)
}

/// Decodes a diffusion-space latent (scale divided out first), clamped to
/// `[-1, 1]`.
pub fn decode(z: &LatentGrid<f32>, scale: f64, ae: &Autoencoder, params: &ParamStore<f32>) -> Result<SliceImage> {
    Ok(decode_batch(&[z], scale, ae, params)?.remove(0))
}

pub fn decode_batch(z: &[&LatentGrid<f32>], scale: f64, ae: &Autoencoder, params: &ParamStore<f32>) -> Result<Vec<SliceImage>> {
    let r = ae.cfg.latent_resolution();
    for g in z {
        crate::error::ensure_shape(&[ae.cfg.latent_channels, r, r], &g.shape())?;
    }
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let inv = (1.0 / scale) as f32;
    let zt = latent_to_tensor(z).mapv(|v| v * inv);
    let x = ae.decode(&p, tape.constant(zt)).value();
    Ok(tensor_to_images(&x).into_iter().map(|im| im.mapv(|v| v.clamp(-1.0, 1.0))).collect())
}

/// `MSE(x, x_hat) + kl_weight · mean KL(post ‖ N(0, I))`.
pub fn recon_kl_loss(x: &SliceImage, x_hat: &SliceImage, post: &GaussianPosterior, kl_weight: f64) -> Result<f64> {
    crate::error::ensure_shape(&[x.nrows(), x.ncols()], &[x_hat.nrows(), x_hat.ncols()])?;
    crate::error::ensure_shape(&post.mean.shape(), &post.logvar.shape())?;
    let rec = mean_squared_error(
        x.as_slice().expect("standard layout"),
        x_hat.as_slice().expect("standard layout"),
    );
    Ok(rec + kl_weight * kl_standard_normal(post))
}

/// Closed-form KL to the standard normal, averaged per element.
pub fn kl_standard_normal(post: &GaussianPosterior) -> f64 {
    let n = post.mean.values().len() as f64;
    post.mean
        .values()
        .iter()
        .zip(post.logvar.values())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum::<f64>()
        / n
}

/// E2 on one conditioning radiograph: `(cond_latent, context (tokens, dim))`.
pub fn encode_condition(x_c: &SliceImage, e2: &ConditionEncoder, params: &ParamStore<f32>) -> Result<(LatentGrid<f32>, Array2<f32>)> {
    check_image(x_c, e2.cfg.input_resolution)?;
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let (cond, ctx) = e2.forward(&p, tape.constant(images_to_tensor(&[x_c], e2.cfg.image_channels)));
    let ctx = ctx
        .value()
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("(tokens, dim)");
    Ok((tensor_to_latent(&cond.value(), 0), ctx))
}

/// One ε prediction for a single latent. `z_concat` holds the noisy latent
/// followed by the condition latent along channels.
#[allow(clippy::too_many_arguments)]
pub fn unet_denoise(
    z_concat: &LatentGrid<f32>,
    t: usize,
    depth: f64,
    guidance: &guidance::GuidanceBundle,
    context: &Array2<f32>,
    unet: &UNet,
    params: &ParamStore<f32>,
) -> Result<LatentGrid<f32>> {
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let z = tape.constant(latent_to_tensor(&[z_concat]));
    let guide = tape.constant(guidance.y_combined.mapv(|v| v as f32).insert_axis(Axis(0)).into_dyn());
    let ctx = tape.constant(context.clone().insert_axis(Axis(0)).into_dyn());
    let eps = unet.forward(&p, z, &[t as f64], &[depth], guide, ctx)?;
    Ok(tensor_to_latent(&eps.value(), 0))
}

/// Grade distribution for one radiograph, from the classifier or the
/// ground-truth bypass.
pub fn koa_classify_stub(
    x_c: &SliceImage,
    clf: &KoaClassifier,
    params: &ParamStore<f32>,
    mode: ClassifierMode,
) -> Result<KoaDistribution> {
    match mode {
        ClassifierMode::Bypass { grade, smoothing } => KoaDistribution::smoothed_one_hot(grade, smoothing),
        ClassifierMode::Learned => {
            check_image(x_c, clf.cfg.input_resolution)?;
            let tape = Tape::inference();
            let p = params.bind(&tape, false);
            let logits = clf.logits(&p, tape.constant(images_to_tensor::<f32>(&[x_c], clf.cfg.image_channels)));
            let probs = logits.softmax_last().value();
            let mut out = [0.0; NUM_GRADES];
            for (k, o) in out.iter_mut().enumerate() {
                *o = probs[[0, k]] as f64;
            }
            KoaDistribution::new(out)
        }
    }
}
