//! Encoder over visible patches, the pixel regressor and the feature
//! predictor, wired together by feature injection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, contract_err, Error, Result};
use crate::masking::{MaskPlan, PatchGrid};
use crate::nn::{self, BlockConfig, CrossAttentionConfig, INIT_STD};
use crate::params::{Bound, Init, ParamSet, ParamSpec, Scope};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Which encoder block output feeds a decoder's cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// First block.
    Low,
    /// Block `max(1, depth / 2)`.
    Mid,
    /// Last block.
    High,
}

impl Tap {
    /// Zero-based block index for an encoder of the given depth.
    pub fn block(self, depth: usize) -> usize {
        match self {
            Tap::Low => 0,
            Tap::Mid => (depth / 2).max(1) - 1,
            Tap::High => depth - 1,
        }
    }
}

impl FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Tap::Low),
            "mid" => Ok(Tap::Mid),
            "high" => Ok(Tap::High),
            _ => Err(config_err!("unknown tap {s:?} (expected low, mid or high)")),
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::Low => "low",
            Tap::Mid => "mid",
            Tap::High => "high",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub reg_dim: usize,
    pub reg_depth: usize,
    pub reg_heads: usize,
    pub pred_depth: usize,
    pub pred_heads: usize,
    pub mlp_ratio: usize,
    /// `None` removes cross-attention from the regressor entirely.
    pub reg_tap: Option<Tap>,
    pub pred_tap: Option<Tap>,
    pub xattn_prenorm: bool,
    pub xattn_out_proj: bool,
    /// Inject the normalized encoder output instead of the raw last block.
    pub normed_high_tap: bool,
}

impl ModelConfig {
    /// ViT-B/16 encoder on 224×224 RGB with 512-wide regressor.
    pub fn base() -> Self {
        Self {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch: 16,
            enc_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            reg_dim: 512,
            reg_depth: 2,
            reg_heads: 16,
            pred_depth: 2,
            pred_heads: 12,
            mlp_ratio: 4,
            reg_tap: Some(Tap::Low),
            pred_tap: Some(Tap::High),
            xattn_prenorm: true,
            xattn_out_proj: false,
            normed_high_tap: false,
        }
    }

    /// 16×16 RGB, 4×4 patches, 32-wide two-block encoder.
    pub fn toy() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch: 4,
            enc_dim: 32,
            enc_depth: 2,
            enc_heads: 4,
            reg_dim: 32,
            reg_depth: 2,
            reg_heads: 4,
            pred_depth: 2,
            pred_heads: 4,
            mlp_ratio: 4,
            ..Self::base()
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_h, self.image_w, self.channels, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        for (name, dim, heads, depth) in [
            ("encoder", self.enc_dim, self.enc_heads, self.enc_depth),
            ("regressor", self.reg_dim, self.reg_heads, self.reg_depth),
            ("predictor", self.enc_dim, self.pred_heads, self.pred_depth),
        ] {
            if depth == 0 || heads == 0 {
                return Err(config_err!("{name}: depth and heads must be positive"));
            }
            if dim % heads != 0 {
                return Err(config_err!("{name}: width {dim} not divisible by {heads} heads"));
            }
            if dim % 4 != 0 {
                return Err(config_err!("{name}: width {dim} must be a multiple of 4"));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(config_err!("mlp_ratio must be positive"));
        }
        Ok(())
    }

    fn cross(&self, tap: Option<Tap>) -> Option<CrossAttentionConfig> {
        tap.map(|_| CrossAttentionConfig {
            inject_dim: self.enc_dim,
            prenorm: self.xattn_prenorm,
            out_proj: self.xattn_out_proj,
        })
    }

    pub fn encoder_block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.enc_dim,
            heads: self.enc_heads,
            mlp_ratio: self.mlp_ratio,
            cross: None,
        }
    }

    pub fn regressor_block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.reg_dim,
            heads: self.reg_heads,
            mlp_ratio: self.mlp_ratio,
            cross: self.cross(self.reg_tap),
        }
    }

    pub fn predictor_block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.enc_dim,
            heads: self.pred_heads,
            mlp_ratio: self.mlp_ratio,
            cross: self.cross(self.pred_tap),
        }
    }

    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let d = self.enc_dim;
        let pd = self.patch * self.patch * self.channels;
        let mut v = vec![
            ParamSpec::new("enc.patch_embed.w", [pd, d], Init::TruncNormal(INIT_STD)),
            ParamSpec::new("enc.patch_embed.b", [d], Init::Zeros),
        ];
        let block = self.encoder_block();
        for i in 0..self.enc_depth {
            v.extend(block.param_specs(&format!("enc.blocks.{i}")));
        }
        v.extend(nn::norm_specs("enc.norm", d));
        v
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, r) = (self.enc_dim, self.reg_dim);
        let pd = self.patch * self.patch * self.channels;
        let mut v = self.encoder_specs();

        v.push(ParamSpec::new("reg.in_proj.w", [d, r], Init::TruncNormal(INIT_STD)));
        v.push(ParamSpec::new("reg.in_proj.b", [r], Init::Zeros));
        v.push(ParamSpec::new("reg.mask_token", [1, r], Init::TruncNormal(INIT_STD)));
        let block = self.regressor_block();
        for i in 0..self.reg_depth {
            v.extend(block.param_specs(&format!("reg.blocks.{i}")));
        }
        v.extend(nn::norm_specs("reg.norm", r));
        v.push(ParamSpec::new("reg.head.w", [r, pd], Init::TruncNormal(INIT_STD)));
        v.push(ParamSpec::new("reg.head.b", [pd], Init::Zeros));

        v.push(ParamSpec::new("pred.mask_token", [1, d], Init::TruncNormal(INIT_STD)));
        let block = self.predictor_block();
        for i in 0..self.pred_depth {
            v.extend(block.param_specs(&format!("pred.blocks.{i}")));
        }
        v.extend(nn::norm_specs("pred.norm", d));
        v.push(ParamSpec::new("pred.head.fc1.w", [d, d], Init::TruncNormal(INIT_STD)));
        v.push(ParamSpec::new("pred.head.fc1.b", [d], Init::Zeros));
        v.push(ParamSpec::new("pred.head.fc2.w", [d, d], Init::TruncNormal(INIT_STD)));
        v.push(ParamSpec::new("pred.head.fc2.b", [d], Init::Zeros));
        v
    }
}

/// Encoder outputs for one token subset.
#[derive(Debug, Clone)]
pub struct Encoded<'g, T> {
    /// Normalized final tokens.
    pub z_hat: Var<'g, T>,
    /// Output of every block, before the final norm.
    pub blocks: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Encoded<'g, T> {
    pub fn shallow(&self) -> Var<'g, T> {
        self.blocks[0]
    }

    pub fn deep(&self) -> Var<'g, T> {
        *self.blocks.last().expect("encoder has at least one block")
    }
}

#[derive(Debug, Clone)]
pub struct ForwardArtifacts<'g, T> {
    pub z_hat: Var<'g, T>,
    pub shallow: Var<'g, T>,
    pub deep: Var<'g, T>,
    /// Pixel predictions for every patch, `[N, P*P*C]`.
    pub x_bar: Var<'g, T>,
    /// Feature predictions for every patch, `[N, enc_dim]`.
    pub f_bar: Var<'g, T>,
}

/// A validated configuration with its fixed positional tables.
#[derive(Debug, Clone)]
pub struct BootMae<T> {
    config: ModelConfig,
    grid: PatchGrid,
    enc_pos: Tensor<T>,
    reg_pos: Tensor<T>,
}

impl<T: Real> BootMae<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let (gh, gw) = (grid.grid_h(), grid.grid_w());
        Ok(Self {
            enc_pos: nn::positional_embedding(gh, gw, config.enc_dim)?,
            reg_pos: nn::positional_embedding(gh, gw, config.reg_dim)?,
            config,
            grid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        ParamSet::init(&self.config.param_specs(), rng)
    }

    /// Runs the encoder on `patches`, whose rows sit at grid positions `indices`.
    pub fn encode_tokens<'g>(
        &self,
        bound: &Bound<'g, T>,
        patches: Var<'g, T>,
        indices: &[usize],
    ) -> Result<Encoded<'g, T>> {
        let g = patches.graph();
        if patches.shape()[0] != indices.len() {
            return Err(contract_err!(
                "encoder got {} tokens for {} positions",
                patches.shape()[0],
                indices.len()
            ));
        }
        if indices.is_empty() {
            return Err(contract_err!("encoder needs at least one visible patch"));
        }
        let enc = bound.scope("enc");
        let pos = g.constant(self.enc_pos.select_rows(indices)?);
        let mut x = nn::dense(patches, &enc.sub("patch_embed"))?.add(pos)?;
        let block = self.config.encoder_block();
        let mut blocks = Vec::with_capacity(self.config.enc_depth);
        for i in 0..self.config.enc_depth {
            x = block.forward_self(x, &enc.sub(&format!("blocks.{i}")))?;
            blocks.push(x);
        }
        let z_hat = nn::norm(x, &enc.sub("norm"))?;
        Ok(Encoded { z_hat, blocks })
    }

    /// Encoder on exactly the visible rows of a plan, in ascending grid order.
    pub fn encode<'g>(
        &self,
        bound: &Bound<'g, T>,
        visible_patches: Var<'g, T>,
        plan: &MaskPlan,
    ) -> Result<Encoded<'g, T>> {
        self.check_plan(plan)?;
        if visible_patches.shape()[0] != plan.n_visible() {
            return Err(contract_err!(
                "encoder got {} tokens, plan has {} visible",
                visible_patches.shape()[0],
                plan.n_visible()
            ));
        }
        self.encode_tokens(bound, visible_patches, &plan.visible())
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<()> {
        if plan.n() != self.grid.n() {
            return Err(contract_err!("plan covers {} patches, grid has {}", plan.n(), self.grid.n()));
        }
        Ok(())
    }

    fn check_visible(&self, z: Var<'_, T>, plan: &MaskPlan) -> Result<()> {
        self.check_plan(plan)?;
        if z.shape()[0] != plan.n_visible() {
            return Err(contract_err!(
                "decoder input has {} tokens, plan has {} visible",
                z.shape()[0],
                plan.n_visible()
            ));
        }
        Ok(())
    }

    /// The feature a decoder cross-attends to under the configured tap.
    pub fn injection<'g>(&self, enc: &Encoded<'g, T>, tap: Option<Tap>) -> Option<Var<'g, T>> {
        tap.map(|t| {
            let i = t.block(self.config.enc_depth);
            if self.config.normed_high_tap && i + 1 == self.config.enc_depth {
                enc.z_hat
            } else {
                enc.blocks[i]
            }
        })
    }

    fn run_decoder<'g>(
        &self,
        p: &Scope<'_, 'g, T>,
        visible: Var<'g, T>,
        inject: Option<Var<'g, T>>,
        plan: &MaskPlan,
        block: &BlockConfig,
        depth: usize,
        pos: &Tensor<T>,
    ) -> Result<Var<'g, T>> {
        let g = visible.graph();
        let seq = assemble_decoder_input(visible, p.get("mask_token")?, plan)?;
        let mut x = seq.add(g.constant(pos.clone()))?;
        for i in 0..depth {
            x = block.forward(x, &p.sub(&format!("blocks.{i}")), inject)?;
        }
        nn::norm(x, &p.sub("norm"))
    }

    /// Pixel predictions for all `N` patches.
    pub fn regress<'g>(
        &self,
        bound: &Bound<'g, T>,
        z_hat: Var<'g, T>,
        inject: Option<Var<'g, T>>,
        plan: &MaskPlan,
    ) -> Result<Var<'g, T>> {
        self.check_visible(z_hat, plan)?;
        let p = bound.scope("reg");
        let visible = nn::dense(z_hat, &p.sub("in_proj"))?;
        let block = self.config.regressor_block();
        let x = self.run_decoder(&p, visible, inject, plan, &block, self.config.reg_depth, &self.reg_pos)?;
        nn::dense(x, &p.sub("head"))
    }

    /// Feature predictions for all `N` patches.
    pub fn predict<'g>(
        &self,
        bound: &Bound<'g, T>,
        z_hat: Var<'g, T>,
        inject: Option<Var<'g, T>>,
        plan: &MaskPlan,
    ) -> Result<Var<'g, T>> {
        self.check_visible(z_hat, plan)?;
        let p = bound.scope("pred");
        let block = self.config.predictor_block();
        let x = self.run_decoder(&p, z_hat, inject, plan, &block, self.config.pred_depth, &self.enc_pos)?;
        let head = p.sub("head");
        nn::dense(nn::dense(x, &head.sub("fc1"))?.gelu(), &head.sub("fc2"))
    }

    /// Patchify, encode the visible rows, then run both decoders.
    pub fn forward<'g>(
        &self,
        bound: &Bound<'g, T>,
        graph: &'g Graph<T>,
        image: &Tensor<T>,
        plan: &MaskPlan,
    ) -> Result<ForwardArtifacts<'g, T>> {
        let patches = self.grid.patchify(image)?;
        self.forward_patches(bound, graph, &patches, plan)
    }

    pub fn forward_patches<'g>(
        &self,
        bound: &Bound<'g, T>,
        graph: &'g Graph<T>,
        patches: &Tensor<T>,
        plan: &MaskPlan,
    ) -> Result<ForwardArtifacts<'g, T>> {
        self.check_plan(plan)?;
        let visible = graph.constant(patches.select_rows(&plan.visible())?);
        let enc = self.encode(bound, visible, plan)?;
        let x_bar = self.regress(bound, enc.z_hat, self.injection(&enc, self.config.reg_tap), plan)?;
        let f_bar = self.predict(bound, enc.z_hat, self.injection(&enc, self.config.pred_tap), plan)?;
        Ok(ForwardArtifacts {
            z_hat: enc.z_hat,
            shallow: enc.shallow(),
            deep: enc.deep(),
            x_bar,
            f_bar,
        })
    }

    /// Mean of the normalized encoder tokens over the full, unmasked image.
    pub fn pooled_features<'g>(
        &self,
        bound: &Bound<'g, T>,
        graph: &'g Graph<T>,
        image: &Tensor<T>,
    ) -> Result<Var<'g, T>> {
        let patches = graph.constant(self.grid.patchify(image)?);
        let all: Vec<usize> = (0..self.grid.n()).collect();
        let enc = self.encode_tokens(bound, patches, &all)?;
        Ok(enc.z_hat.mean_axis(0)?)
    }
}

/// Visible tokens followed by one mask-token copy per masked patch,
/// reordered so row `i` belongs to grid position `i`.
pub fn assemble_decoder_input<'g, T: Real>(
    visible: Var<'g, T>,
    mask_token: Var<'g, T>,
    plan: &MaskPlan,
) -> Result<Var<'g, T>> {
    let g = visible.graph();
    if visible.shape()[0] != plan.n_visible() {
        return Err(contract_err!(
            "{} visible tokens for a plan with {} visible",
            visible.shape()[0],
            plan.n_visible()
        ));
    }
    let masks = mask_token.gather(&vec![0; plan.n_masked()])?;
    let seq = g.concat(&[visible, masks], 0)?;
    let mut order = vec![0; plan.n()];
    let (mut v, mut m) = (0, plan.n_visible());
    for (i, slot) in order.iter_mut().enumerate() {
        if plan.is_masked(i) {
            *slot = m;
            m += 1;
        } else {
            *slot = v;
            v += 1;
        }
    }
    Ok(seq.gather(&order)?)
}
