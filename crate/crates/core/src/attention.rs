//! Channel attention, spatial attention, their combination into the dual
//! attention module, and multi-head self-attention for the transformer
//! layers.
//!
//! Channel and spatial attention use average- and max-pooled descriptors:
//! the channel map is `σ(MLP(avg) + MLP(max))` over spatial positions with
//! one shared two-layer MLP, the spatial map is `σ(conv_k([mean_c, max_c]))`
//! over channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Var};
use crate::nn::{Conv2d, Ctx, Linear};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    /// `reduction` is the MLP bottleneck ratio; the hidden width never drops
    /// below one.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            channels,
            hidden,
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
        }
    }

    fn mlp<'t>(&self, ctx: &Ctx<'t>, v: Var<'t>) -> autodiff::Result<Var<'t>> {
        let h = self.fc1.forward(ctx, v)?.relu()?;
        self.fc2.forward(ctx, h)
    }

    /// Channel map `C×1×1` with entries in (0, 1).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::Config(format!(
                "channel attention configured for {} channels, got {shape:?}",
                self.channels
            )));
        }
        let avg = x.mean(&[1, 2], false)?;
        let max = x.max(&[1, 2], false)?;
        let logits = self.mlp(ctx, avg)?.add(self.mlp(ctx, max)?)?;
        Ok(logits.sigmoid()?.reshape([self.channels, 1, 1])?)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.fc1.zero(store);
        self.fc2.zero(store);
    }
}

#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    /// `kernel` must be odd.
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "spatial attention kernel must be odd");
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), 2, 1, kernel, rng),
        }
    }

    /// Spatial map `1×H×W` with entries in (0, 1).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mean = x.mean(&[0], true)?;
        let max = x.max(&[0], true)?;
        let desc = Var::concat(&[mean, max], 0)?;
        Ok(self.conv.forward(ctx, desc)?.sigmoid()?)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.conv.zero(store);
    }
}

/// How the channel and spatial maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DamMode {
    /// Channel map first; the spatial map is computed from the
    /// channel-refined fusion and applied to the channel-refined features.
    #[default]
    Sequential,
    /// Both maps from the same fusion, applied as one product `Ms ⊗ Mc ⊗ F`.
    Product,
}

/// The channel map `Mc: C×1×1` and spatial map `Ms: 1×H×W` of one DAM pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps<'t> {
    pub channel: Var<'t>,
    pub spatial: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct DualAttention {
    pub channels: usize,
    pub mode: DamMode,
    /// 1×1 convolution reducing `concat(Fe, Fd)` from 2C to C channels.
    pub fusion: Conv2d,
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl DualAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        mode: DamMode,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            channels,
            mode,
            fusion: Conv2d::new(store, &format!("{name}.fusion"), 2 * channels, channels, 1, rng),
            channel: ChannelAttention::new(store, &format!("{name}.cam"), channels, reduction, rng),
            spatial: SpatialAttention::new(store, &format!("{name}.sam"), kernel, rng),
        }
    }

    /// Refines `f` with attention derived from encoder features `fe` and
    /// decoder features `fd`; all three share one `C×H×W` shape.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        f: Var<'t>,
        fe: Var<'t>,
        fd: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_maps(ctx, f, fe, fd)?.0)
    }

    pub fn forward_with_maps<'t>(
        &self,
        ctx: &Ctx<'t>,
        f: Var<'t>,
        fe: Var<'t>,
        fd: Var<'t>,
    ) -> Result<(Var<'t>, AttentionMaps<'t>)> {
        let shape = f.shape();
        if fe.shape() != shape || fd.shape() != shape {
            return Err(Error::Config(format!(
                "dual attention inputs disagree: F {shape:?}, Fe {:?}, Fd {:?}",
                fe.shape(),
                fd.shape()
            )));
        }
        let fused = self.fusion.forward(ctx, Var::concat(&[fe, fd], 0)?)?;
        let mc = self.channel.forward(ctx, fused)?;
        let (out, ms) = match self.mode {
            DamMode::Sequential => {
                let refined = mc.mul(f)?;
                let ms = self.spatial.forward(ctx, mc.mul(fused)?)?;
                (ms.mul(refined)?, ms)
            }
            DamMode::Product => {
                let ms = self.spatial.forward(ctx, fused)?;
                (ms.mul(mc)?.mul(f)?, ms)
            }
        };
        Ok((
            out,
            AttentionMaps {
                channel: mc,
                spatial: ms,
            },
        ))
    }

    /// Zeroes every sublayer, making both maps identically 0.5.
    pub fn zero(&self, store: &mut ParamStore) {
        self.fusion.zero(store);
        self.channel.zero(store);
        self.spatial.zero(store);
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `T×d` → `h×T×d_h`.
    fn split<'t>(&self, x: Var<'t>) -> autodiff::Result<Var<'t>> {
        let t = x.shape()[0];
        x.reshape([t, self.heads, self.head_dim()])?.permute(&[1, 0, 2])
    }

    fn check<'t>(&self, x: Var<'t>) -> Result<usize> {
        match x.shape().as_slice() {
            &[t, d] if d == self.dim && t >= 1 => Ok(t),
            s => Err(Error::Config(format!(
                "self-attention expects T×{}, got {s:?}",
                self.dim
            ))),
        }
    }

    /// Per-head attention weights `h×T×T`; each row sums to one.
    pub fn attention_weights<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check(x)?;
        let q = self.split(self.query.forward(ctx, x)?)?;
        let k = self.split(self.key.forward(ctx, x)?)?;
        let scores = q
            .matmul(k.permute(&[0, 2, 1])?)?
            .scale(1.0 / (self.head_dim() as f64).sqrt())?;
        Ok(scores.softmax(2)?)
    }

    /// Output projection of the concatenated heads; no residual added.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let t = self.check(x)?;
        let attn = self.attention_weights(ctx, x)?;
        let v = self.split(self.value.forward(ctx, x)?)?;
        let heads = attn.matmul(v)?.permute(&[1, 0, 2])?.reshape([t, self.dim])?;
        Ok(self.out.forward(ctx, heads)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cam_gives_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cam = ChannelAttention::new(&mut store, "cam", 8, 4, &mut rng);
        cam.zero(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(random_tensor(&[8, 5, 5], &mut rng));
        let m = cam.forward(&ctx, x).unwrap().value();
        assert_eq!(m.shape(), &[8, 1, 1]);
        assert!(m.data().iter().all(|&v| v == 0.5));
        let wrong = tape.constant(Tensor::ones([4, 5, 5]));
        assert!(cam.forward(&ctx, wrong).is_err());
    }

    #[test]
    fn zero_sam_gives_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sam = SpatialAttention::new(&mut store, "sam", 7, &mut rng);
        sam.zero(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(random_tensor(&[8, 16, 16], &mut rng));
        let m = sam.forward(&ctx, x).unwrap().value();
        assert_eq!(m.shape(), &[1, 16, 16]);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zeroed_dam_quarters_input_in_both_modes() {
        for mode in [DamMode::Sequential, DamMode::Product] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let dam = DualAttention::new(&mut store, "dam", 4, 4, 3, mode, &mut rng);
            dam.zero(&mut store);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let f = random_tensor(&[4, 6, 6], &mut rng);
            let fe = tape.constant(random_tensor(&[4, 6, 6], &mut rng));
            let fd = tape.constant(random_tensor(&[4, 6, 6], &mut rng));
            let out = dam.forward(&ctx, tape.constant(f.clone()), fe, fd).unwrap().value();
            assert_eq!(out, f.map(|v| 0.25 * v));
        }
    }

    #[test]
    fn dam_rejects_mismatched_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dam = DualAttention::new(&mut store, "dam", 4, 4, 3, DamMode::Sequential, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let a = tape.constant(Tensor::ones([4, 6, 6]));
        let b = tape.constant(Tensor::ones([4, 4, 4]));
        assert!(dam.forward(&ctx, a, a, b).is_err());
    }

    #[test]
    fn mhsa_single_token_and_divisibility() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(MultiHeadSelfAttention::new(&mut store, "bad", 10, 3, &mut rng).is_err());
        let mhsa = MultiHeadSelfAttention::new(&mut store, "m", 8, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(random_tensor(&[1, 8], &mut rng));
        let w = mhsa.attention_weights(&ctx, x).unwrap().value();
        assert_eq!(w.data(), &[1.0, 1.0]);
        let expected = mhsa
            .out
            .forward(&ctx, mhsa.value.forward(&ctx, x).unwrap())
            .unwrap()
            .value();
        let got = mhsa.forward(&ctx, x).unwrap().value();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_zero_output_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mhsa = MultiHeadSelfAttention::new(&mut store, "m", 8, 4, &mut rng).unwrap();
        mhsa.out.zero(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(random_tensor(&[5, 8], &mut rng));
        assert_eq!(mhsa.forward(&ctx, x).unwrap().value(), Tensor::zeros([5, 8]));
    }
}
