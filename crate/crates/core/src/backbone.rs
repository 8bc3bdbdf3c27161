//! Staged pre-norm ViT feature extractor with optional bottleneck adapters.

use vpr_tensor::{AttentionVars, Var};

use crate::config::{BackboneConfig, NUM_STAGES};
use crate::error::{config, Error, Result};
use crate::params::{Ctx, Init, ParamBuilder, ParamStore};

/// Token sequences `[B, 1+P, dim]` after each of the four stages; the
/// class token sits at index 0.
#[derive(Debug, Clone, Copy)]
pub struct StageOutputs {
    pub stages: [Var; NUM_STAGES],
}

impl StageOutputs {
    pub fn last(&self) -> Var {
        self.stages[NUM_STAGES - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneInit {
    Random,
    /// Residual-branch output projections start at zero, making every
    /// block the identity.
    ZeroResidual,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    prefix: String,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    fn block(&self, i: usize, s: &str) -> String {
        format!("{}blocks.{i}.{s}", self.prefix)
    }

    /// Create the stem and block parameters. Adapters are added afterwards
    /// by [`Backbone::insert_adapters`] when enabled.
    pub fn init_params(&self, b: &mut ParamBuilder<'_>, init: BackboneInit) -> Result<()> {
        let c = &self.cfg;
        let d = c.embed_dim;
        b.linear(&self.name("patch_embed"), c.patch_dim(), d, Init::FanIn(c.patch_dim()))?;
        b.add(self.name("cls"), &[1, d], Init::Normal(0.02))?;
        b.add(self.name("pos"), &[c.num_tokens(), d], Init::Normal(0.02))?;
        let out_init = |fan_in| match init {
            BackboneInit::Random => Init::FanIn(fan_in),
            BackboneInit::ZeroResidual => Init::Zeros,
        };
        for i in 0..c.depth {
            b.layer_norm(&self.block(i, "ln1"), d)?;
            b.linear(&self.block(i, "attn.qkv"), d, 3 * d, Init::FanIn(d))?;
            b.linear(&self.block(i, "attn.proj"), d, d, out_init(d))?;
            b.layer_norm(&self.block(i, "ln2"), d)?;
            b.linear(&self.block(i, "mlp.fc1"), d, c.mlp_dim(), Init::FanIn(d))?;
            b.linear(&self.block(i, "mlp.fc2"), c.mlp_dim(), d, out_init(c.mlp_dim()))?;
        }
        Ok(())
    }

    /// One serial bottleneck per block (dim → rank → dim, GELU, residual)
    /// placed after the MLP. The up-projection starts at zero so insertion
    /// does not change the block outputs.
    pub fn insert_adapters(&self, b: &mut ParamBuilder<'_>) -> Result<()> {
        let c = &self.cfg;
        if c.adapter_rank == 0 {
            return Err(config("adapter rank must be positive"));
        }
        for i in 0..c.depth {
            b.linear(
                &self.block(i, "adapter.down"),
                c.embed_dim,
                c.adapter_rank,
                Init::FanIn(c.embed_dim),
            )?;
            b.linear(&self.block(i, "adapter.up"), c.adapter_rank, c.embed_dim, Init::Zeros)?;
        }
        Ok(())
    }

    fn has_adapters(&self, store: &ParamStore) -> bool {
        store.get(&self.block(0, "adapter.down.w")).is_some()
    }

    fn linear(&self, ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
        let w = ctx.p(&format!("{name}.w"))?;
        let b = ctx.p(&format!("{name}.b"))?;
        Ok(ctx.tape.linear(x, w, Some(b))?)
    }

    fn layer_norm(&self, ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
        let g = ctx.p(&format!("{name}.g"))?;
        let b = ctx.p(&format!("{name}.b"))?;
        Ok(ctx.tape.layer_norm(x, g, b, self.cfg.ln_eps)?)
    }

    /// Non-overlapping patch projection, class token and learned position
    /// embeddings: `[B,3,H,W] -> [B,1+P,dim]`.
    pub fn patch_embed(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        let c = &self.cfg;
        let s = ctx.tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != c.image_size || s[3] != c.image_size {
            return Err(config(format!(
                "image shape {s:?} does not match configured [B, 3, {0}, {0}]",
                c.image_size
            )));
        }
        let (b, g, ps) = (s[0], c.grid_side(), c.patch_size);
        let t = &mut ctx.tape;
        let x = t.reshape(image, &[b, 3, g, ps, g, ps])?;
        let x = t.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let patches = t.reshape(x, &[b, c.num_patches(), c.patch_dim()])?;
        let x = self.linear(ctx, patches, &self.name("patch_embed"))?;
        let cls = ctx.p(&self.name("cls"))?;
        let pos = ctx.p(&self.name("pos"))?;
        let t = &mut ctx.tape;
        let cls = t.expand_leading(cls, b)?;
        let x = t.concat(&[cls, x], 1)?;
        Ok(t.add_bcast(x, pos)?)
    }

    fn run_block(&self, ctx: &mut Ctx<'_>, x: Var, i: usize, adapters: bool) -> Result<Var> {
        let h = self.layer_norm(ctx, x, &self.block(i, "ln1"))?;
        let attn = AttentionVars {
            qkv_w: ctx.p(&self.block(i, "attn.qkv.w"))?,
            qkv_b: ctx.p(&self.block(i, "attn.qkv.b"))?,
            proj_w: ctx.p(&self.block(i, "attn.proj.w"))?,
            proj_b: ctx.p(&self.block(i, "attn.proj.b"))?,
        };
        let a = ctx.tape.mhsa(h, &attn, self.cfg.heads)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.layer_norm(ctx, x, &self.block(i, "ln2"))?;
        let h = self.linear(ctx, h, &self.block(i, "mlp.fc1"))?;
        let h = ctx.tape.gelu(h)?;
        let h = self.linear(ctx, h, &self.block(i, "mlp.fc2"))?;
        let mut x = ctx.tape.add(x, h)?;
        if adapters {
            let a = self.linear(ctx, x, &self.block(i, "adapter.down"))?;
            let a = ctx.tape.gelu(a)?;
            let a = self.linear(ctx, a, &self.block(i, "adapter.up"))?;
            x = ctx.tape.add(x, a)?;
        }
        Ok(x)
    }

    /// Output of the first `n` blocks.
    pub fn forward_blocks(&self, ctx: &mut Ctx<'_>, tokens: Var, n: usize) -> Result<Var> {
        if n > self.cfg.depth {
            return Err(config(format!("requested {n} blocks of {}", self.cfg.depth)));
        }
        let adapters = self.has_adapters(ctx.store());
        (0..n).try_fold(tokens, |x, i| self.run_block(ctx, x, i, adapters))
    }

    /// Run every block, recording the sequence after each stage.
    pub fn run_stages(&self, ctx: &mut Ctx<'_>, tokens: Var) -> Result<StageOutputs> {
        let adapters = self.has_adapters(ctx.store());
        let per = self.cfg.blocks_per_stage();
        let mut x = tokens;
        let mut stages = [tokens; NUM_STAGES];
        for i in 0..self.cfg.depth {
            x = self.run_block(ctx, x, i, adapters)?;
            if (i + 1) % per == 0 {
                stages[i / per] = x;
            }
        }
        Ok(StageOutputs { stages })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var) -> Result<StageOutputs> {
        let tokens = self.patch_embed(ctx, image)?;
        self.run_stages(ctx, tokens)
    }

    /// Number of leading blocks frozen by `fraction` of the depth.
    pub fn frozen_blocks(&self, fraction: f64) -> Result<usize> {
        let n = fraction * self.cfg.depth as f64;
        if !(0.0..=1.0).contains(&fraction) || (n - n.round()).abs() > 1e-9 {
            return Err(config(format!(
                "freeze fraction {fraction} must lie in [0,1] and cover whole blocks of {}",
                self.cfg.depth
            )));
        }
        Ok(n.round() as usize)
    }

    /// Suppress updates to the stem and the first `fraction·depth` blocks.
    /// Adapters inside frozen blocks stay trainable.
    pub fn freeze_prefix(&self, store: &mut ParamStore, fraction: f64) -> Result<usize> {
        let frozen = self.frozen_blocks(fraction)?;
        let prefix = self.prefix.clone();
        store.set_trainable(|n| n.starts_with(&prefix), true);
        if frozen == 0 {
            return Ok(0);
        }
        let stem: Vec<String> = ["patch_embed.w", "patch_embed.b", "cls", "pos"]
            .iter()
            .map(|s| self.name(s))
            .collect();
        let blocks: Vec<String> = (0..frozen).map(|i| self.block(i, "")).collect();
        store.set_trainable(
            |n| {
                stem.iter().any(|s| s == n)
                    || blocks
                        .iter()
                        .any(|b| n.starts_with(b.as_str()) && !n[b.len()..].starts_with("adapter."))
            },
            false,
        );
        Ok(frozen)
    }

    /// Every parameter name owned by block `i`.
    pub fn block_prefix(&self, i: usize) -> String {
        self.block(i, "")
    }
}

pub(crate) fn check_stage_shapes(ctx: &Ctx<'_>, stages: &StageOutputs) -> Result<Vec<usize>> {
    let s0 = ctx.tape.shape(stages.stages[0]).to_vec();
    for s in &stages.stages[1..] {
        if ctx.tape.shape(*s) != s0.as_slice() {
            return Err(Error::Dimension(format!(
                "stage outputs differ: {s0:?} vs {:?}",
                ctx.tape.shape(*s)
            )));
        }
    }
    Ok(s0)
}
