//! End-to-end segmentation network.
//!
//! ```text
//! image ─┬─ block₀ ─ e₀ ─ pool ─ block₁ ─ e₁ ─ pool ─ … ─ e_{D-1} ─ pool ─┐
//!        │                                                                 │
//!        │          bottleneck: block(concat(·, edge_D)) ⊕ EL(VTL-stack(·)) │
//!        │                                                                 │
//!        └ edges ─ decoder level i: up = conv3(upsample(state))            │
//!                  skip = DAM(F=eᵢ, Fe=eᵢ, Fd=up)                ◄─────────┘
//!                  state = block(concat(skip, up, edgeᵢ))
//!                  logits = conv1(state₀)
//! ```
//!
//! Every residual block computes `norm(conv2(relu(norm(conv1(x))))) ⊕ shortcut(x)`
//! with per-channel instance normalization, the shortcut being a 1×1
//! convolution when channel counts differ. Channel
//! width doubles per encoder level and halves per decoder level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DamMode, DualAttention};
use crate::autodiff::Var;
use crate::edge::{edge_pyramid, EdgeMap, EdgeMethod};
use crate::metrics::SegmentationMask;
use crate::nn::{Conv2d, Ctx, InstanceNorm};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vit::{tokens_to_map, PatchEmbedding, VitStack};
use crate::{Error, Result, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VitPlacement {
    /// One n-layer transformer stack after the convolutional encoder.
    #[default]
    Bottleneck,
    /// Additionally one transformer layer after every encoder block.
    Interleaved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeFusion {
    /// Edge map joins the skip path as one extra channel.
    #[default]
    Concat,
    /// Skip features are scaled by `1 + edge`.
    Multiply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Number of 2× down-samplings.
    pub depth: usize,
    pub base_channels: usize,
    pub classes: usize,
    /// Transformer layers in the bottleneck stack.
    pub vit_depth: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channel-attention MLP reduction ratio.
    pub reduction: usize,
    /// Spatial-attention kernel (odd).
    pub attention_kernel: usize,
    pub vit_placement: VitPlacement,
    pub dam_mode: DamMode,
    pub edge_fusion: EdgeFusion,
    pub edge_method: EdgeMethod,
    /// Applies a dual attention module (with `Fd := Fe`) after every encoder
    /// block as well as on the skip paths.
    pub encoder_dam: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            in_channels: 1,
            depth: 3,
            base_channels: 16,
            classes: 4,
            vit_depth: 4,
            embed_dim: 128,
            patch: 2,
            heads: 4,
            mlp_ratio: 4,
            reduction: 4,
            attention_kernel: 7,
            vit_placement: VitPlacement::Bottleneck,
            dam_mode: DamMode::Sequential,
            edge_fusion: EdgeFusion::Concat,
            edge_method: EdgeMethod::Sobel,
            encoder_dam: false,
        }
    }
}

impl NetworkConfig {
    /// 16×16 configuration small enough for exhaustive gradient checks.
    pub fn miniature() -> Self {
        Self {
            height: 16,
            width: 16,
            depth: 2,
            base_channels: 4,
            vit_depth: 1,
            embed_dim: 16,
            heads: 2,
            attention_kernel: 3,
            ..Self::default()
        }
    }

    /// 64×64 desk-scale configuration used for the phantom training runs.
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            vit_depth: 2,
            embed_dim: 64,
            ..Self::default()
        }
    }

    /// Channel width of encoder level `i` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return bad("extents and channel counts must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let div = 1usize << self.depth;
        if self.height % div != 0 || self.width % div != 0 {
            return bad(format!(
                "{}×{} input is not divisible by 2^{}",
                self.height, self.width, self.depth
            ));
        }
        if self.classes < 2 {
            return bad(format!("{} classes; need at least 2", self.classes));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.patch == 0 {
            return bad("patch size must be positive".into());
        }
        let (bh, bw) = (self.height / div, self.width / div);
        if bh % self.patch != 0 || bw % self.patch != 0 {
            return bad(format!(
                "bottleneck {bh}×{bw} is not divisible into {p}×{p} patches",
                p = self.patch
            ));
        }
        if self.attention_kernel % 2 == 0 {
            return bad(format!("attention kernel {} must be odd", self.attention_kernel));
        }
        if self.mlp_ratio == 0 || self.reduction == 0 {
            return bad("mlp_ratio and reduction must be positive".into());
        }
        Ok(())
    }
}

/// `norm2(conv2(relu(norm1(conv1(x))))) ⊕ shortcut(x)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
    /// 1×1 adaptation when input and output widths differ.
    pub shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, rng),
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), out_ch),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, rng),
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), out_ch),
            shortcut: (in_ch != out_ch)
                .then(|| Conv2d::new(store, &format!("{name}.shortcut"), in_ch, out_ch, 1, rng)),
        }
    }

    pub fn shortcut<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(match &self.shortcut {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu()?;
        let branch = self.norm2.forward(ctx, self.conv2.forward(ctx, h)?)?;
        Ok(branch.add(self.shortcut(ctx, x)?)?)
    }

    /// Zeroes the residual branch (both 3×3 convolutions and the final
    /// normalization's scale and shift).
    pub fn zero_branch(&self, store: &mut ParamStore) {
        self.conv1.zero(store);
        self.conv2.zero(store);
        self.norm2.zero(store);
    }
}

/// Tokens from `p×p` patches through transformer layers and back onto the
/// map grid, then a 1×1 embedded layer to the map's width.
#[derive(Debug, Clone)]
pub struct VitBridge {
    pub embed: PatchEmbedding,
    pub stack: VitStack,
    pub adapt: Conv2d,
}

impl VitBridge {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &NetworkConfig,
        channels: usize,
        extents: (usize, usize),
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            embed: PatchEmbedding::new(
                store,
                &format!("{name}.embed"),
                channels,
                extents,
                cfg.patch,
                cfg.embed_dim,
                rng,
            )?,
            stack: VitStack::new(
                store,
                &format!("{name}.vtl"),
                layers,
                cfg.embed_dim,
                cfg.heads,
                cfg.mlp_ratio,
                rng,
            )?,
            adapt: Conv2d::new(store, &format!("{name}.el"), cfg.embed_dim, channels, 1, rng),
        })
    }

    /// Transformer features as a `C×H×W` map (no residual added).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let tokens = self.stack.forward(ctx, self.embed.forward(ctx, x)?)?;
        let grid = tokens_to_map(tokens, self.embed.grid)?;
        let full = if self.embed.patch > 1 {
            grid.upsample(self.embed.patch)?
        } else {
            grid
        };
        Ok(self.adapt.forward(ctx, full)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub block: ResidualBlock,
    pub attention: Option<DualAttention>,
    pub vit: Option<VitBridge>,
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub block: ResidualBlock,
    pub vit: VitBridge,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub up: Conv2d,
    pub attention: DualAttention,
    pub block: ResidualBlock,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: Bottleneck,
    /// Index `i` works at encoder level `i`'s resolution.
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv2d,
}

fn check_finite(v: Var<'_>, layer: &str) -> Result<()> {
    v.value_rc()
        .check_finite(layer)
        .map_err(|_| Error::NonFinite {
            layer: layer.to_string(),
        })
}

impl Model {
    /// Builds the network with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dam = |store: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng| {
            DualAttention::new(store, name, ch, cfg.reduction, cfg.attention_kernel, cfg.dam_mode, rng)
        };

        let mut encoder = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let in_ch = if level == 0 { cfg.in_channels } else { cfg.channels(level - 1) };
            let ch = cfg.channels(level);
            let extents = (cfg.height >> level, cfg.width >> level);
            let name = format!("enc{level}");
            let block = ResidualBlock::new(&mut store, &format!("{name}.block"), in_ch, ch, &mut rng);
            let attention = cfg
                .encoder_dam
                .then(|| dam(&mut store, &format!("{name}.dam"), ch, &mut rng));
            let vit = match cfg.vit_placement {
                VitPlacement::Interleaved => Some(VitBridge::new(
                    &mut store,
                    &format!("{name}.vit"),
                    cfg,
                    ch,
                    extents,
                    1,
                    &mut rng,
                )?),
                VitPlacement::Bottleneck => None,
            };
            encoder.push(EncoderLevel {
                block,
                attention,
                vit,
            });
        }

        let d = cfg.depth;
        let bottom = cfg.channels(d);
        let bottleneck = Bottleneck {
            block: ResidualBlock::new(&mut store, "mid.block", cfg.channels(d - 1) + 1, bottom, &mut rng),
            vit: VitBridge::new(
                &mut store,
                "mid.vit",
                cfg,
                bottom,
                (cfg.height >> d, cfg.width >> d),
                cfg.vit_depth,
                &mut rng,
            )?,
        };

        let mut decoder = Vec::with_capacity(d);
        for level in 0..d {
            let ch = cfg.channels(level);
            let name = format!("dec{level}");
            let skip_in = match cfg.edge_fusion {
                EdgeFusion::Concat => 2 * ch + 1,
                EdgeFusion::Multiply => 2 * ch,
            };
            decoder.push(DecoderLevel {
                up: Conv2d::new(&mut store, &format!("{name}.up"), cfg.channels(level + 1), ch, 3, &mut rng),
                attention: dam(&mut store, &format!("{name}.dam"), ch, &mut rng),
                block: ResidualBlock::new(&mut store, &format!("{name}.block"), skip_in, ch, &mut rng),
            });
        }
        let head = Conv2d::new(&mut store, "head", cfg.channels(0), cfg.classes, 1, &mut rng);

        Ok(Self {
            config,
            params: store,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    /// Edge pyramid with one level per encoder resolution plus the
    /// bottleneck.
    pub fn edges(&self, image: &Tensor) -> Result<Vec<EdgeMap>> {
        edge_pyramid(image, self.config.depth + 1, self.config.edge_method)
    }

    fn check_input(&self, image: &[usize], edges: &[EdgeMap]) -> Result<()> {
        let c = &self.config;
        if image != [c.in_channels, c.height, c.width] {
            return Err(Error::Config(format!(
                "model expects {}×{}×{} input, got {image:?}",
                c.in_channels, c.height, c.width
            )));
        }
        if edges.len() != c.depth + 1 {
            return Err(Error::Config(format!(
                "expected {} edge levels, got {}",
                c.depth + 1,
                edges.len()
            )));
        }
        for (level, e) in edges.iter().enumerate() {
            if e.extents() != (c.height >> level, c.width >> level) {
                return Err(Error::Config(format!(
                    "edge level {level} has extents {:?}",
                    e.extents()
                )));
            }
        }
        Ok(())
    }

    /// Per-pixel class logits `classes×H×W` for a `1×H×W` image.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: Var<'t>, edges: &[EdgeMap]) -> Result<Var<'t>> {
        self.check_input(&image.shape(), edges)?;
        let tape = ctx.tape;
        let edge = |level: usize| tape.constant(edges[level].values.clone());

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for (level, enc) in self.encoder.iter().enumerate() {
            if level > 0 {
                x = x.maxpool2x2()?;
            }
            let mut e = enc.block.forward(ctx, x)?;
            if let Some(vit) = &enc.vit {
                e = e.add(vit.forward(ctx, e)?)?;
            }
            if let Some(dam) = &enc.attention {
                e = dam.forward(ctx, e, e, e)?;
            }
            check_finite(e, &format!("encoder level {level}"))?;
            skips.push(e);
            x = e;
        }

        let d = self.config.depth;
        let pooled = Var::concat(&[x.maxpool2x2()?, edge(d)], 0)?;
        let b = self.bottleneck.block.forward(ctx, pooled)?;
        let mut state = b.add(self.bottleneck.vit.forward(ctx, b)?)?;
        check_finite(state, "bottleneck")?;

        for (level, dec) in self.decoder.iter().enumerate().rev() {
            let up = dec.up.forward(ctx, state.upsample2x()?)?;
            let e = skips[level];
            let skip = dec.attention.forward(ctx, e, e, up)?;
            let joined = match self.config.edge_fusion {
                EdgeFusion::Concat => Var::concat(&[skip, up, edge(level)], 0)?,
                EdgeFusion::Multiply => {
                    let gain = edge(level).add_scalar(1.0)?;
                    Var::concat(&[skip.mul(gain)?, up], 0)?
                }
            };
            state = dec.block.forward(ctx, joined)?;
            check_finite(state, &format!("decoder level {level}"))?;
        }
        let logits = self.head.forward(ctx, state)?;
        check_finite(logits, "head")?;
        Ok(logits)
    }

    /// Forward pass on a private tape, returning the logits.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor> {
        let edges = self.edges(image)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params);
        let logits = self.forward(&ctx, tape.constant(image.clone()), &edges)?;
        Ok(logits.value())
    }

    pub fn predict(&self, image: &Tensor) -> Result<SegmentationMask> {
        predict_mask(&self.infer(image)?)
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.params)
    }

    /// Checkpoint container: parameters plus the JSON config as metadata.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        self.params.save(&meta, path)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        let mut buf = Vec::new();
        self.params.write_to(&meta, &mut buf).expect("in-memory write");
        buf
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the architecture from the embedded config and checks that
    /// every stored tensor matches it by name and shape.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (stored, meta) = ParamStore::read_from(&mut &bytes[..])?;
        let config: NetworkConfig = serde_json::from_str(&meta)
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, config implies {}",
                stored.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = stored
                .find(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            let value = stored.get(src);
            if value.shape() != model.params.get(id).shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {:?}, config shape {:?}",
                    value.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = value.clone();
        }
        Ok(model)
    }
}

/// Exact number of scalar parameters.
pub fn count_parameters(params: &ParamStore) -> usize {
    params.count()
}

/// Per-pixel argmax over classes; ties go to the lower class index.
pub fn predict_mask(logits: &Tensor) -> Result<SegmentationMask> {
    let [classes, h, w] = *logits.shape() else {
        return Err(Error::Config(format!(
            "logits must be classes×H×W, got {:?}",
            logits.shape()
        )));
    };
    let d = logits.data();
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMask::new(h, w, classes, labels)
}
