//! Patch embedding and the pre-norm transformer layers:
//!
//! ```text
//! X̄ = MHSA(LN(X)) + X
//! X' = MLP(LN(X̄)) + X̄
//! ```

use rand::Rng;

use crate::attention::MultiHeadSelfAttention;
use crate::autodiff::Var;
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Splits `C×H×W` maps into `p×p` patches, projects each flattened patch
/// (channel-major) to `d` and adds a learned positional embedding.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    pub projection: Linear,
    pub positions: ParamId,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        extents: (usize, usize),
        patch: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (h, w) = extents;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "{h}×{w} map is not divisible into {patch}×{patch} patches"
            )));
        }
        let grid = (h / patch, w / patch);
        let tokens = grid.0 * grid.1;
        let projection = Linear::new(
            store,
            &format!("{name}.proj"),
            channels * patch * patch,
            dim,
            rng,
        );
        // small random positions; zero would make every token position-blind
        let positions = store.add(
            format!("{name}.pos"),
            Tensor::new(
                [tokens, dim],
                (0..tokens * dim).map(|_| rng.gen_range(-0.02..0.02)).collect(),
            )?,
        );
        Ok(Self {
            patch,
            channels,
            dim,
            grid,
            projection,
            positions,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `C×H×W` → `T×d`, tokens in row-major grid order.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let patches = patchify(x, self.patch)?;
        if patches.shape() != [self.tokens(), self.channels * self.patch * self.patch] {
            return Err(Error::Config(format!(
                "patch embedding built for {}×{:?} grid of {} channels, input gives {:?}",
                self.tokens(),
                self.grid,
                self.channels,
                patches.shape()
            )));
        }
        let projected = self.projection.forward(ctx, patches)?;
        Ok(projected.add(ctx.param(self.positions))?)
    }
}

/// `C×H×W` → `T×(C·p·p)` with patches in row-major grid order and each
/// patch flattened channel-major.
pub fn patchify(x: Var<'_>, patch: usize) -> Result<Var<'_>> {
    let shape = x.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::Config(format!("patchify expects C×H×W, got {shape:?}")));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "{h}×{w} map is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(x
        .reshape([c, gh, patch, gw, patch])?
        .permute(&[1, 3, 0, 2, 4])?
        .reshape([gh * gw, c * patch * patch])?)
}

/// `T×d` → `d×gh×gw`, placing token `t` at row-major grid cell `t`.
pub fn tokens_to_map(x: Var<'_>, grid: (usize, usize)) -> Result<Var<'_>> {
    let shape = x.shape();
    let [t, d] = shape[..] else {
        return Err(Error::Config(format!("expected T×d tokens, got {shape:?}")));
    };
    if t != grid.0 * grid.1 {
        return Err(Error::Config(format!(
            "{t} tokens do not fill a {}×{} grid",
            grid.0, grid.1
        )));
    }
    Ok(x.transpose()?.reshape([d, grid.0, grid.1])?)
}

/// `d×gh×gw` → `T×d`; inverse of [`tokens_to_map`].
pub fn map_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let [d, gh, gw] = shape[..] else {
        return Err(Error::Config(format!("expected d×gh×gw map, got {shape:?}")));
    };
    Ok(x.reshape([d, gh * gw])?.transpose()?)
}

#[derive(Debug, Clone)]
pub struct VitLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VitLayer {
    /// MLP hidden width is `mlp_ratio · dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attention: MultiHeadSelfAttention::new(store, &format!("{name}.mhsa"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.mlp1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.mlp2"), dim * mlp_ratio, dim, rng),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let dim = self.attention.dim;
        match x.shape().as_slice() {
            &[_, d] if d == dim => {}
            s => return Err(Error::Config(format!("transformer layer expects T×{dim}, got {s:?}"))),
        }
        let attended = self.attention.forward(ctx, self.norm1.forward(ctx, x)?)?.add(x)?;
        let hidden = self.fc1.forward(ctx, self.norm2.forward(ctx, attended)?)?.relu()?;
        Ok(self.fc2.forward(ctx, hidden)?.add(attended)?)
    }

    /// Zeroes the attention output projection and the second MLP layer, so
    /// both residual branches contribute nothing.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.attention.out.zero(store);
        self.fc2.zero(store);
    }
}

/// `n` transformer layers applied in sequence.
#[derive(Debug, Clone, Default)]
pub struct VitStack {
    pub layers: Vec<VitLayer>,
}

impl VitStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| VitLayer::new(store, &format!("{name}.{i}"), dim, heads, mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
        }
        Ok(x)
    }

    pub fn zero_branches(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.zero_branches(store);
        }
    }
}
