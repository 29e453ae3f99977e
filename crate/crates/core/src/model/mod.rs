//! The asymmetric encoder/decoder.
//!
//! A vanilla pre-norm ViT encoder runs on visible tokens only; a smaller
//! decoder processes the full token set (projected visible tokens plus a
//! shared learned mask token) and predicts the pixel values of one temporal
//! slice per masked tubelet. There is no class token; classification pools
//! the encoder's mean token.

mod forward;

pub use forward::{
    classify, decode, embed_visible, encode, forward_classify, forward_pretrain,
    forward_pretrain_dense, masked_mse, ClassifierHead, ClassifyPass, PretrainPass, TARGET_EPS,
};

use serde::{Deserialize, Serialize};

use crate::error::{MaeError, Result};
use crate::masking::{MaskSampler, TokenGrid};
use crate::rng::{rng_for, stream, truncated_normal};
use crate::tensor::{Scalar, Tape, TapeId, Tensor};
use crate::tokenizer::{PatchSpec, PositionalEmbedding};

/// Shared layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

/// Full architecture plus masking hyperparameters; the single source of
/// truth for a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub patch: PatchSpec,
    pub d_enc: usize,
    pub depth_enc: usize,
    pub heads_enc: usize,
    pub d_dec: usize,
    pub depth_dec: usize,
    pub heads_dec: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub sampler: MaskSampler,
    pub target_normalize: bool,
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.depth_enc == 0 || self.d_dec == 0 || self.depth_dec == 0 {
            return Err(MaeError::Config(
                "model dims and depths must be >= 1".to_string(),
            ));
        }
        if self.heads_enc == 0 || self.d_enc % self.heads_enc != 0 {
            return Err(MaeError::Config(format!(
                "encoder dim {} not divisible by heads {}",
                self.d_enc, self.heads_enc
            )));
        }
        if self.heads_dec == 0 || self.d_dec % self.heads_dec != 0 {
            return Err(MaeError::Config(format!(
                "decoder dim {} not divisible by heads {}",
                self.d_dec, self.heads_dec
            )));
        }
        if self.d_dec > self.d_enc {
            return Err(MaeError::Config(format!(
                "decoder dim {} exceeds encoder dim {}; the decoder must be the smaller tower",
                self.d_dec, self.d_enc
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(MaeError::Config("mlp_ratio must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(MaeError::Config(format!(
                "mask ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    /// ViT-L encoder with the default 512-d / 4-block decoder at the
    /// reference video geometry; the cost-model baseline.
    pub fn vit_large_reference() -> Self {
        MaeConfig {
            patch: PatchSpec {
                t_patch: 2,
                p: 16,
                in_channels: 3,
            },
            d_enc: 1024,
            depth_enc: 24,
            heads_enc: 16,
            d_dec: 512,
            depth_dec: 4,
            heads_dec: 16,
            mlp_ratio: 4,
            mask_ratio: 0.9,
            sampler: MaskSampler::Agnostic,
            target_normalize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::filled(vec![dim], S::one()).with_grad(),
            beta: Tensor::zeros(vec![dim]).with_grad(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    fn init<R: rand::Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            weight: truncated_normal::<S, _>(rng, vec![d_in, d_out], INIT_STD).with_grad(),
            bias: Tensor::zeros(vec![d_out]).with_grad(),
        }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams<S> {
    pub norm1: LayerNormParams<S>,
    pub q: LinearParams<S>,
    pub k: LinearParams<S>,
    pub v: LinearParams<S>,
    pub proj: LinearParams<S>,
    pub norm2: LayerNormParams<S>,
    pub mlp_in: LinearParams<S>,
    pub mlp_out: LinearParams<S>,
}

impl<S: Scalar> BlockParams<S> {
    fn init<R: rand::Rng>(rng: &mut R, dim: usize, mlp_ratio: usize) -> Self {
        BlockParams {
            norm1: LayerNormParams::identity(dim),
            q: LinearParams::init(rng, dim, dim),
            k: LinearParams::init(rng, dim, dim),
            v: LinearParams::init(rng, dim, dim),
            proj: LinearParams::init(rng, dim, dim),
            norm2: LayerNormParams::identity(dim),
            mlp_in: LinearParams::init(rng, dim, dim * mlp_ratio),
            mlp_out: LinearParams::init(rng, dim * mlp_ratio, dim),
        }
    }
}

/// All learned parameters of the autoencoder, bound to a token grid.
#[derive(Debug, Clone)]
pub struct MaeModel<S> {
    pub config: MaeConfig,
    pub grid: TokenGrid,
    /// `[t_patch*p*p*C, d_enc]`; the embed contract has no bias term.
    pub patch_embed: Tensor<S>,
    pub enc_pos: PositionalEmbedding<S>,
    pub enc_blocks: Vec<BlockParams<S>>,
    pub enc_norm: LayerNormParams<S>,
    pub enc_to_dec: LinearParams<S>,
    /// `[1, d_dec]`, shared across every masked position.
    pub mask_token: Tensor<S>,
    pub dec_pos: PositionalEmbedding<S>,
    pub dec_blocks: Vec<BlockParams<S>>,
    pub dec_norm: LayerNormParams<S>,
    /// `[d_dec, p*p*C]`: predicts one temporal slice per tubelet.
    pub head: LinearParams<S>,
}

impl<S: Scalar> MaeModel<S> {
    /// Fresh model with truncated-normal (std 0.02) projections, positional
    /// tables, and mask token; zero biases; identity layer norms.
    pub fn init(config: MaeConfig, grid: TokenGrid, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(&[seed, stream::INIT]);
        let row_len = config.patch.row_len();
        let mut pos_table = |rows: usize, dim: usize| -> Tensor<S> {
            truncated_normal::<S, _>(&mut rng, vec![rows, dim], INIT_STD).with_grad()
        };
        let enc_pos = PositionalEmbedding {
            time_table: pos_table(grid.t, config.d_enc),
            space_table: pos_table(grid.spatial_cells(), config.d_enc),
            learnable: true,
        };
        let dec_pos = PositionalEmbedding {
            time_table: pos_table(grid.t, config.d_dec),
            space_table: pos_table(grid.spatial_cells(), config.d_dec),
            learnable: true,
        };
        Ok(MaeModel {
            config,
            grid,
            patch_embed: truncated_normal::<S, _>(&mut rng, vec![row_len, config.d_enc], INIT_STD)
                .with_grad(),
            enc_pos,
            enc_blocks: (0..config.depth_enc)
                .map(|_| BlockParams::init(&mut rng, config.d_enc, config.mlp_ratio))
                .collect(),
            enc_norm: LayerNormParams::identity(config.d_enc),
            enc_to_dec: LinearParams::init(&mut rng, config.d_enc, config.d_dec),
            mask_token: truncated_normal::<S, _>(&mut rng, vec![1, config.d_dec], INIT_STD)
                .with_grad(),
            dec_pos,
            dec_blocks: (0..config.depth_dec)
                .map(|_| BlockParams::init(&mut rng, config.d_dec, config.mlp_ratio))
                .collect(),
            dec_norm: LayerNormParams::identity(config.d_dec),
            head: LinearParams::init(&mut rng, config.d_dec, config.patch.slice_len()),
        })
    }

    /// Visits every parameter in the canonical order with
    /// `(name, tensor, weight_decay_applies)`. Weight decay covers only
    /// projection matrices: positional tables, biases, norm parameters,
    /// and the mask token are excluded.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<S>, bool)) {
        f("patch_embed.weight".into(), &self.patch_embed, true);
        f("enc.pos_time".into(), &self.enc_pos.time_table, false);
        f("enc.pos_space".into(), &self.enc_pos.space_table, false);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            visit_block(&format!("enc.block{i}"), b, f);
        }
        visit_norm("enc.norm", &self.enc_norm, f);
        f("enc_to_dec.weight".into(), &self.enc_to_dec.weight, true);
        f("enc_to_dec.bias".into(), &self.enc_to_dec.bias, false);
        f("mask_token".into(), &self.mask_token, false);
        f("dec.pos_time".into(), &self.dec_pos.time_table, false);
        f("dec.pos_space".into(), &self.dec_pos.space_table, false);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            visit_block(&format!("dec.block{i}"), b, f);
        }
        visit_norm("dec.norm", &self.dec_norm, f);
        f("head.weight".into(), &self.head.weight, true);
        f("head.bias".into(), &self.head.bias, false);
    }

    /// Mutable variant of [`MaeModel::visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>, bool)) {
        for (name, tensor, decay) in self.flat_params_mut() {
            f(name, tensor, decay);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<S>, bool)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, tensor, decay| {
            out.push((name, tensor.clone(), decay));
        });
        out
    }

    /// Mutable references to every parameter, canonical order; what the
    /// optimizer walks.
    pub fn flat_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>, bool)> {
        let mut out: Vec<(String, &mut Tensor<S>, bool)> = Vec::new();
        out.push(("patch_embed.weight".into(), &mut self.patch_embed, true));
        out.push(("enc.pos_time".into(), &mut self.enc_pos.time_table, false));
        out.push(("enc.pos_space".into(), &mut self.enc_pos.space_table, false));
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            flat_block_mut(&format!("enc.block{i}"), b, &mut out);
        }
        out.push(("enc.norm.gamma".into(), &mut self.enc_norm.gamma, false));
        out.push(("enc.norm.beta".into(), &mut self.enc_norm.beta, false));
        out.push(("enc_to_dec.weight".into(), &mut self.enc_to_dec.weight, true));
        out.push(("enc_to_dec.bias".into(), &mut self.enc_to_dec.bias, false));
        out.push(("mask_token".into(), &mut self.mask_token, false));
        out.push(("dec.pos_time".into(), &mut self.dec_pos.time_table, false));
        out.push(("dec.pos_space".into(), &mut self.dec_pos.space_table, false));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            flat_block_mut(&format!("dec.block{i}"), b, &mut out);
        }
        out.push(("dec.norm.gamma".into(), &mut self.dec_norm.gamma, false));
        out.push(("dec.norm.beta".into(), &mut self.dec_norm.beta, false));
        out.push(("head.weight".into(), &mut self.head.weight, true));
        out.push(("head.bias".into(), &mut self.head.bias, false));
        out
    }

    /// Total scalar parameter count, from the actual allocations.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t, _| count += t.numel());
        count
    }

    /// Registers every parameter on a tape (canonical order) and returns
    /// the id handles used by the forward functions.
    pub(crate) fn register(&self, tape: &mut Tape<S>) -> TapeParams {
        let mut all = Vec::new();
        let mut leaf = |t: &Tensor<S>| {
            let id = tape.leaf(t.clone());
            all.push(id);
            id
        };
        let patch_embed = leaf(&self.patch_embed);
        let enc_pos_time = leaf(&self.enc_pos.time_table);
        let enc_pos_space = leaf(&self.enc_pos.space_table);
        let enc_blocks: Vec<TapeBlock> = self
            .enc_blocks
            .iter()
            .map(|b| register_block(b, &mut leaf))
            .collect();
        let enc_norm = (leaf(&self.enc_norm.gamma), leaf(&self.enc_norm.beta));
        let enc_to_dec = (leaf(&self.enc_to_dec.weight), leaf(&self.enc_to_dec.bias));
        let mask_token = leaf(&self.mask_token);
        let dec_pos_time = leaf(&self.dec_pos.time_table);
        let dec_pos_space = leaf(&self.dec_pos.space_table);
        let dec_blocks: Vec<TapeBlock> = self
            .dec_blocks
            .iter()
            .map(|b| register_block(b, &mut leaf))
            .collect();
        let dec_norm = (leaf(&self.dec_norm.gamma), leaf(&self.dec_norm.beta));
        let head = (leaf(&self.head.weight), leaf(&self.head.bias));
        TapeParams {
            all,
            patch_embed,
            enc_pos_time,
            enc_pos_space,
            enc_blocks,
            enc_norm,
            enc_to_dec,
            mask_token,
            dec_pos_time,
            dec_pos_space,
            dec_blocks,
            dec_norm,
            head,
        }
    }

    /// Casts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> MaeModel<T> {
        let cast_norm = |n: &LayerNormParams<S>| LayerNormParams {
            gamma: n.gamma.cast::<T>(),
            beta: n.beta.cast::<T>(),
        };
        let cast_linear = |l: &LinearParams<S>| LinearParams {
            weight: l.weight.cast::<T>(),
            bias: l.bias.cast::<T>(),
        };
        let cast_block = |b: &BlockParams<S>| BlockParams {
            norm1: cast_norm(&b.norm1),
            q: cast_linear(&b.q),
            k: cast_linear(&b.k),
            v: cast_linear(&b.v),
            proj: cast_linear(&b.proj),
            norm2: cast_norm(&b.norm2),
            mlp_in: cast_linear(&b.mlp_in),
            mlp_out: cast_linear(&b.mlp_out),
        };
        MaeModel {
            config: self.config,
            grid: self.grid,
            patch_embed: self.patch_embed.cast::<T>(),
            enc_pos: PositionalEmbedding {
                time_table: self.enc_pos.time_table.cast::<T>(),
                space_table: self.enc_pos.space_table.cast::<T>(),
                learnable: self.enc_pos.learnable,
            },
            enc_blocks: self.enc_blocks.iter().map(cast_block).collect(),
            enc_norm: cast_norm(&self.enc_norm),
            enc_to_dec: cast_linear(&self.enc_to_dec),
            mask_token: self.mask_token.cast::<T>(),
            dec_pos: PositionalEmbedding {
                time_table: self.dec_pos.time_table.cast::<T>(),
                space_table: self.dec_pos.space_table.cast::<T>(),
                learnable: self.dec_pos.learnable,
            },
            dec_blocks: self.dec_blocks.iter().map(cast_block).collect(),
            dec_norm: cast_norm(&self.dec_norm),
            head: cast_linear(&self.head),
        }
    }
}

fn visit_block<S: Scalar>(
    prefix: &str,
    b: &BlockParams<S>,
    f: &mut dyn FnMut(String, &Tensor<S>, bool),
) {
    f(format!("{prefix}.norm1.gamma"), &b.norm1.gamma, false);
    f(format!("{prefix}.norm1.beta"), &b.norm1.beta, false);
    for (tag, lin) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("proj", &b.proj)] {
        f(format!("{prefix}.{tag}.weight"), &lin.weight, true);
        f(format!("{prefix}.{tag}.bias"), &lin.bias, false);
    }
    f(format!("{prefix}.norm2.gamma"), &b.norm2.gamma, false);
    f(format!("{prefix}.norm2.beta"), &b.norm2.beta, false);
    for (tag, lin) in [("mlp_in", &b.mlp_in), ("mlp_out", &b.mlp_out)] {
        f(format!("{prefix}.{tag}.weight"), &lin.weight, true);
        f(format!("{prefix}.{tag}.bias"), &lin.bias, false);
    }
}

fn flat_block_mut<'a, S: Scalar>(
    prefix: &str,
    b: &'a mut BlockParams<S>,
    out: &mut Vec<(String, &'a mut Tensor<S>, bool)>,
) {
    out.push((format!("{prefix}.norm1.gamma"), &mut b.norm1.gamma, false));
    out.push((format!("{prefix}.norm1.beta"), &mut b.norm1.beta, false));
    for (tag, lin) in [
        ("q", &mut b.q),
        ("k", &mut b.k),
        ("v", &mut b.v),
        ("proj", &mut b.proj),
    ] {
        out.push((format!("{prefix}.{tag}.weight"), &mut lin.weight, true));
        out.push((format!("{prefix}.{tag}.bias"), &mut lin.bias, false));
    }
    out.push((format!("{prefix}.norm2.gamma"), &mut b.norm2.gamma, false));
    out.push((format!("{prefix}.norm2.beta"), &mut b.norm2.beta, false));
    for (tag, lin) in [("mlp_in", &mut b.mlp_in), ("mlp_out", &mut b.mlp_out)] {
        out.push((format!("{prefix}.{tag}.weight"), &mut lin.weight, true));
        out.push((format!("{prefix}.{tag}.bias"), &mut lin.bias, false));
    }
}

fn visit_norm<S: Scalar>(
    prefix: &str,
    n: &LayerNormParams<S>,
    f: &mut dyn FnMut(String, &Tensor<S>, bool),
) {
    f(format!("{prefix}.gamma"), &n.gamma, false);
    f(format!("{prefix}.beta"), &n.beta, false);
}

fn register_block<S: Scalar>(
    b: &BlockParams<S>,
    leaf: &mut impl FnMut(&Tensor<S>) -> TapeId,
) -> TapeBlock {
    TapeBlock {
        norm1: (leaf(&b.norm1.gamma), leaf(&b.norm1.beta)),
        q: (leaf(&b.q.weight), leaf(&b.q.bias)),
        k: (leaf(&b.k.weight), leaf(&b.k.bias)),
        v: (leaf(&b.v.weight), leaf(&b.v.bias)),
        proj: (leaf(&b.proj.weight), leaf(&b.proj.bias)),
        norm2: (leaf(&b.norm2.gamma), leaf(&b.norm2.beta)),
        mlp_in: (leaf(&b.mlp_in.weight), leaf(&b.mlp_in.bias)),
        mlp_out: (leaf(&b.mlp_out.weight), leaf(&b.mlp_out.bias)),
    }
}

pub(crate) struct TapeBlock {
    pub norm1: (TapeId, TapeId),
    pub q: (TapeId, TapeId),
    pub k: (TapeId, TapeId),
    pub v: (TapeId, TapeId),
    pub proj: (TapeId, TapeId),
    pub norm2: (TapeId, TapeId),
    pub mlp_in: (TapeId, TapeId),
    pub mlp_out: (TapeId, TapeId),
}

pub(crate) struct TapeParams {
    pub all: Vec<TapeId>,
    pub patch_embed: TapeId,
    pub enc_pos_time: TapeId,
    pub enc_pos_space: TapeId,
    pub enc_blocks: Vec<TapeBlock>,
    pub enc_norm: (TapeId, TapeId),
    pub enc_to_dec: (TapeId, TapeId),
    pub mask_token: TapeId,
    pub dec_pos_time: TapeId,
    pub dec_pos_space: TapeId,
    pub dec_blocks: Vec<TapeBlock>,
    pub dec_norm: (TapeId, TapeId),
    pub head: (TapeId, TapeId),
}

/// Closed-form parameter count for a config and grid; must match the
/// actual allocation exactly.
pub fn expected_param_count(config: &MaeConfig, grid: TokenGrid) -> usize {
    let block = |d: usize, m: usize| {
        // two norms + four projections (with bias) + two mlp layers
        4 * d + 4 * (d * d + d) + (d * m * d + m * d) + (m * d * d + d)
    };
    let pos = |d: usize| (grid.t + grid.spatial_cells()) * d;
    let row_len = config.patch.row_len();
    let slice_len = config.patch.slice_len();

    row_len * config.d_enc
        + pos(config.d_enc)
        + config.depth_enc * block(config.d_enc, config.mlp_ratio)
        + 2 * config.d_enc
        + (config.d_enc * config.d_dec + config.d_dec)
        + config.d_dec
        + pos(config.d_dec)
        + config.depth_dec * block(config.d_dec, config.mlp_ratio)
        + 2 * config.d_dec
        + (config.d_dec * slice_len + slice_len)
}

#[cfg(test)]
pub(crate) fn tiny_test_config() -> MaeConfig {
    MaeConfig {
        patch: PatchSpec {
            t_patch: 2,
            p: 8,
            in_channels: 1,
        },
        d_enc: 32,
        depth_enc: 2,
        heads_enc: 2,
        d_dec: 16,
        depth_dec: 1,
        heads_dec: 2,
        mlp_ratio: 2,
        mask_ratio: 0.75,
        sampler: MaskSampler::Agnostic,
        target_normalize: true,
    }
}
