use ndarray::{Array2, ArrayD};

use super::params::{Bound, Builder, ParamId};
use crate::autograd::{Conv2dSpec, Real, Var};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Self {
            weight: b.uniform("weight", &[cout, cin, kernel, kernel], bound),
            bias: Some(b.uniform("bias", &[cout], bound)),
            spec,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Zero-initialised variant, used for output heads.
    pub fn zeros<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        Self {
            weight: b.constant("weight", &[cout, cin, kernel, kernel], 0.0),
            bias: Some(b.constant("bias", &[cout], 0.0)),
            spec,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.conv2d(p[self.weight], self.bias.map(|b| p[b]), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, din: usize, dout: usize, bias: bool) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            weight: b.uniform("weight", &[dout, din], bound),
            bias: bias.then(|| b.uniform("bias", &[dout], bound)),
        }
    }

    /// `x: (n, din)` -> `(n, dout)`
    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.linear(p[self.weight], self.bias.map(|b| p[b]))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new<F: Real>(b: &mut Builder<'_, F>, groups: usize, channels: usize) -> Self {
        assert!(
            channels % groups == 0,
            "group norm: {channels} channels not divisible by {groups} groups"
        );
        Self {
            gamma: b.constant("weight", &[channels], 1.0),
            beta: b.constant("bias", &[channels], 0.0),
            groups,
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let c = x.shape()[1];
        let gamma = p[self.gamma].reshape(&[c]);
        let beta = p[self.beta].reshape(&[c]);
        x.group_norm(gamma, beta, self.groups, Self::EPS)
    }
}

/// Largest group count `<= preferred` dividing `channels`.
pub fn norm_groups(preferred: usize, channels: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Residual block: GroupNorm, Swish, conv, optional embedding shift, GroupNorm,
/// Swish, conv, plus a 1x1 shortcut when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    pub out_channels: usize,
}

impl ResBlock {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cin: usize, cout: usize, emb_dim: Option<usize>, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), norm_groups(groups, cin), cin),
            conv1: Conv2d::new(&mut b.pp("conv1"), cin, cout, 3, Conv2dSpec::same3()),
            emb_proj: emb_dim.map(|d| Linear::new(&mut b.pp("emb_proj"), d, cout, true)),
            norm2: GroupNorm::new(&mut b.pp("norm2"), norm_groups(groups, cout), cout),
            conv2: Conv2d::new(&mut b.pp("conv2"), cout, cout, 3, Conv2dSpec::same3()),
            shortcut: (cin != cout).then(|| Conv2d::new(&mut b.pp("shortcut"), cin, cout, 1, Conv2dSpec::default())),
            out_channels: cout,
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>, emb: Option<Var<'t, F>>) -> Var<'t, F> {
        let mut h = self.conv1.forward(p, self.norm1.forward(p, x).silu());
        if let (Some(proj), Some(emb)) = (&self.emb_proj, emb) {
            let e = proj.forward(p, emb.silu());
            let bsz = e.shape()[0];
            h = h + e.reshape(&[bsz, self.out_channels, 1, 1]);
        }
        let h = self.conv2.forward(p, self.norm2.forward(p, h).silu());
        let skip = match &self.shortcut {
            Some(s) => s.forward(p, x),
            None => x,
        };
        skip + h
    }
}

#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut b.pp("conv"), channels, channels, 3, Conv2dSpec::down3()),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.conv.forward(p, x)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut b.pp("conv"), channels, channels, 3, Conv2dSpec::same3()),
        }
    }

    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.conv.forward(p, x.upsample_nearest2())
    }
}

/// Multi-head cross-attention from spatial features to a token context,
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    proj_in: Conv2d,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
    channels: usize,
}

impl CrossAttention {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, channels: usize, context_dim: usize, heads: usize, groups: usize) -> Self {
        let heads = heads.clamp(1, channels);
        assert!(channels % heads == 0, "{channels} channels not divisible by {heads} heads");
        Self {
            norm: GroupNorm::new(&mut b.pp("norm"), norm_groups(groups, channels), channels),
            proj_in: Conv2d::new(&mut b.pp("proj_in"), channels, channels, 1, Conv2dSpec::default()),
            to_q: Linear::new(&mut b.pp("to_q"), channels, channels, false),
            to_k: Linear::new(&mut b.pp("to_k"), context_dim, channels, false),
            to_v: Linear::new(&mut b.pp("to_v"), context_dim, channels, false),
            to_out: Linear::new(&mut b.pp("to_out"), channels, channels, true),
            heads,
            channels,
        }
    }

    /// `x: (b, c, h, w)`, `context: (b, tokens, context_dim)`.
    pub fn forward<'t, F: Real>(&self, p: &Bound<'t, F>, x: Var<'t, F>, context: Var<'t, F>) -> Var<'t, F> {
        let s = x.shape();
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let cs = context.shape();
        let (tokens, cdim) = (cs[1], cs[2]);
        let (heads, dh) = (self.heads, self.channels / self.heads);
        let hw = h * w;

        let feats = self
            .proj_in
            .forward(p, self.norm.forward(p, x))
            .reshape(&[bsz, c, hw])
            .permute(&[0, 2, 1])
            .reshape(&[bsz * hw, c]);
        let split = |v: Var<'t, F>, n: usize| {
            v.reshape(&[bsz, n, heads, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[bsz * heads, n, dh])
        };
        let q = split(self.to_q.forward(p, feats), hw);
        let ctx = context.reshape(&[bsz * tokens, cdim]);
        let k = split(self.to_k.forward(p, ctx), tokens);
        let v = split(self.to_v.forward(p, ctx), tokens);
        let attn = q
            .matmul_t(k, false, true)
            .scale(F::of(1.0 / (dh as f64).sqrt()))
            .softmax_last();
        let o = attn
            .matmul(v)
            .reshape(&[bsz, heads, hw, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[bsz * hw, c]);
        let o = self
            .to_out
            .forward(p, o)
            .reshape(&[bsz, hw, c])
            .permute(&[0, 2, 1])
            .reshape(&[bsz, c, h, w]);
        x + o
    }
}

/// Sinusoidal embedding of diffusion step indices, `(n, dim)` with cosines
/// in the first half and sines in the second.
pub fn timestep_embedding<F: Real>(steps: &[f64], dim: usize) -> ArrayD<F> {
    assert!(dim >= 2 && dim % 2 == 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((steps.len(), dim));
    for (i, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out[[i, k]] = F::of((t * freq).cos());
            out[[i, half + k]] = F::of((t * freq).sin());
        }
    }
    out.into_dyn()
}
