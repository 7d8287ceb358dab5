//! Patch-transformer image encoder with a mixture-of-experts branch running
//! parallel to each block's MLP, a two-class label tower, and the training losses.
//!
//! All forward passes are batched: tokens travel as B×n×d tensors.

mod checkpoint;
mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use crate::moe::{self, MaskConfig, MoeLayerParams};
use crate::rng;
use crate::tensor::{contract, Tensor};

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{class_loss, clip_loss, total_loss, LossBundle, LossMode, LossValues};

/// Inverse temperature ceiling for the label similarities.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MoeMode {
    Off,
    Soft,
    #[default]
    Masked,
}

impl MoeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MoeMode::Off),
            "soft" => Ok(MoeMode::Soft),
            "masked" => Ok(MoeMode::Masked),
            other => Err(Error::Invalid(format!("unknown moe mode `{other}` (off, soft, masked)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MoeMode::Off => "off",
            MoeMode::Soft => "soft",
            MoeMode::Masked => "masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub moe: MoeMode,
    pub experts: usize,
    pub slots: usize,
    pub expert_hidden: usize,
    /// Per-expert mask rates, shared by every block.
    pub mask_rates: Vec<f64>,
    pub mask_seed: u64,
    /// Keep drawing masks in eval mode (off by default: eval uses all-ones masks).
    pub eval_masking: bool,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 32,
            patch_side: 8,
            dim: 64,
            blocks: 4,
            heads: 4,
            mlp_hidden: 128,
            moe: MoeMode::Masked,
            experts: 4,
            slots: 1,
            expert_hidden: 128,
            mask_rates: vec![0.0, 0.1, 0.1, 0.1],
            mask_seed: 0,
            eval_masking: false,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!("image side {} is not divisible by patch side {}", self.image_side, self.patch_side));
        }
        if self.blocks == 0 || self.dim == 0 || self.mlp_hidden == 0 {
            return bad("blocks, dim and mlp_hidden must be at least 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.moe != MoeMode::Off
            && (self.experts == 0 || self.slots == 0 || self.expert_hidden == 0) {
                return bad("experts, slots and expert_hidden must be at least 1".into());
            }
        if self.moe == MoeMode::Masked {
            if self.mask_rates.len() != self.experts {
                return bad(format!("{} mask rates for {} experts", self.mask_rates.len(), self.experts));
            }
            self.block_mask(0).validate()?;
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Mask configuration of block `k`; each block has its own stream.
    pub fn block_mask(&self, k: usize) -> MaskConfig {
        MaskConfig { rates: self.mask_rates.clone(), seed: rng::key(&[self.mask_seed, k as u64]) }
    }
}

/// Whether masks are drawn, and for which optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { step: u64 },
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: Attention,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub moe: Option<MoeLayerParams>,
}

/// Two class embeddings (row 0 real, row 1 fake) and a learnable log inverse temperature.
#[derive(Clone, Debug)]
pub struct LabelTower {
    pub embed: Tensor,
    pub log_scale: Tensor,
}

impl LabelTower {
    /// Row-normalized class embeddings, 2×d.
    pub fn classes(&self) -> Result<Tensor> {
        self.embed.l2_normalize()
    }

    /// `exp(log_scale)`, clamped to [`MAX_LOGIT_SCALE`].
    pub fn scale(&self) -> Result<Tensor> {
        self.log_scale.exp()?.clamp_max(MAX_LOGIT_SCALE)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: EncoderConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_post_gamma: Tensor,
    pub ln_post_beta: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub labels: LabelTower,
}

/// Batched encoder output.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// B×d, rows of unit norm.
    pub embeddings: Tensor,
    /// One [B] tensor of per-sample cosine distances per block.
    pub block_cosines: Vec<Tensor>,
}

fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
    Tensor::parameter(shape, data)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let n = shape.iter().product();
    param(shape, rng::uniform_vec(rng, n, 1.0 / (fan_in as f64).sqrt()))
}

fn zeros(shape: &[usize]) -> Result<Tensor> {
    param(shape, vec![0.0; shape.iter().product()])
}

fn ones(shape: &[usize]) -> Result<Tensor> {
    param(shape, vec![1.0; shape.iter().product()])
}

/// Repeats a length-k vector over the leading B×n axes.
fn spread(v: &Tensor, b: usize, n: usize) -> Result<Tensor> {
    contract("k,bn->bnk", &[v, &Tensor::ones(&[b, n])])
}

fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    contract("bnd,dk->bnk", &[x, w])?.add(&spread(bias, b, n)?)
}

fn affine_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    x.layer_norm()?.mul(&spread(gamma, b, n)?)?.add(&spread(beta, b, n)?)
}

/// Flattened p×p patches of an image in raster order, n×p² row-major.
pub fn patch_pixels(image: &GrayImage, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || !image.width.is_multiple_of(patch) || !image.height.is_multiple_of(patch) {
        return Err(Error::Invalid(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            image.width, image.height
        )));
    }
    let mut out = Vec::with_capacity(image.pixels.len());
    for py in 0..image.height / patch {
        for px in 0..image.width / patch {
            for y in 0..patch {
                let row = (py * patch + y) * image.width + px * patch;
                out.extend_from_slice(&image.pixels[row..row + patch]);
            }
        }
    }
    Ok(out)
}

impl Model {
    /// Fan-in scaled uniform weights from `config.init_seed`; layer-norm gains
    /// start at one, biases at zero.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, n, pl) = (c.dim, c.tokens(), c.patch_len());
        let mut r = rng::stream(c.init_seed, rng::key(&[0x1417]));
        let patch_weight = uniform(&mut r, &[pl, d], pl)?;
        let pos = uniform(&mut r, &[n, d], d)?;
        let mut blocks = Vec::with_capacity(c.blocks);
        for _ in 0..c.blocks {
            let attn = Attention {
                wq: uniform(&mut r, &[d, d], d)?,
                bq: zeros(&[d])?,
                wk: uniform(&mut r, &[d, d], d)?,
                bk: zeros(&[d])?,
                wv: uniform(&mut r, &[d, d], d)?,
                bv: zeros(&[d])?,
                wo: uniform(&mut r, &[d, d], d)?,
                bo: zeros(&[d])?,
            };
            let mlp_w1 = uniform(&mut r, &[d, c.mlp_hidden], d)?;
            let mlp_w2 = uniform(&mut r, &[c.mlp_hidden, d], c.mlp_hidden)?;
            let moe = match c.moe {
                MoeMode::Off => None,
                _ => Some(MoeLayerParams::init(d, c.experts, c.slots, c.expert_hidden, &mut r)?),
            };
            blocks.push(BlockParams {
                ln1_gamma: ones(&[d])?,
                ln1_beta: zeros(&[d])?,
                attn,
                ln2_gamma: ones(&[d])?,
                ln2_beta: zeros(&[d])?,
                mlp_w1,
                mlp_b1: zeros(&[c.mlp_hidden])?,
                mlp_w2,
                mlp_b2: zeros(&[d])?,
                moe,
            });
        }
        let proj_weight = uniform(&mut r, &[d, d], d)?;
        let embed = uniform(&mut r, &[2, d], d)?;
        Ok(Model {
            config: c.clone(),
            patch_weight,
            patch_bias: zeros(&[d])?,
            pos,
            blocks,
            ln_post_gamma: ones(&[d])?,
            ln_post_beta: zeros(&[d])?,
            proj_weight,
            proj_bias: zeros(&[d])?,
            labels: LabelTower { embed, log_scale: param(&[], vec![(1.0f64 / 0.07).ln()])? },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.weight".into(), &self.patch_weight),
            ("patch.bias".into(), &self.patch_bias),
            ("pos".into(), &self.pos),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{k}.{s}");
            let a = &b.attn;
            out.extend([
                (p("ln1.gamma"), &b.ln1_gamma),
                (p("ln1.beta"), &b.ln1_beta),
                (p("attn.wq"), &a.wq),
                (p("attn.bq"), &a.bq),
                (p("attn.wk"), &a.wk),
                (p("attn.bk"), &a.bk),
                (p("attn.wv"), &a.wv),
                (p("attn.bv"), &a.bv),
                (p("attn.wo"), &a.wo),
                (p("attn.bo"), &a.bo),
                (p("ln2.gamma"), &b.ln2_gamma),
                (p("ln2.beta"), &b.ln2_beta),
                (p("mlp.w1"), &b.mlp_w1),
                (p("mlp.b1"), &b.mlp_b1),
                (p("mlp.w2"), &b.mlp_w2),
                (p("mlp.b2"), &b.mlp_b2),
            ]);
            if let Some(m) = &b.moe {
                out.extend(m.tensors().into_iter().map(|(s, t)| (p(&format!("moe.{s}")), t)));
            }
        }
        out.extend([
            ("ln_post.gamma".into(), &self.ln_post_gamma),
            ("ln_post.beta".into(), &self.ln_post_beta),
            ("proj.weight".into(), &self.proj_weight),
            ("proj.bias".into(), &self.proj_bias),
            ("labels.embed".into(), &self.labels.embed),
            ("labels.log_scale".into(), &self.labels.log_scale),
        ]);
        out
    }

    /// Mutable view of the same list as [`Model::named_params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.pos];
        for b in &mut self.blocks {
            let a = &mut b.attn;
            out.extend([
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut a.wq,
                &mut a.bq,
                &mut a.wk,
                &mut a.bk,
                &mut a.wv,
                &mut a.bv,
                &mut a.wo,
                &mut a.bo,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
            ]);
            if let Some(m) = &mut b.moe {
                out.extend([&mut m.phi, &mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]);
            }
        }
        out.extend([
            &mut self.ln_post_gamma,
            &mut self.ln_post_beta,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.labels.embed,
            &mut self.labels.log_scale,
        ]);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replaces every parameter, in [`Model::named_params`] order.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Invalid(format!("{} tensors for {} parameters", values.len(), slots.len())));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape("set_params", format!("{:?} vs {:?}", slot.shape(), v.shape())));
            }
            **slot = v;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same values with no differentiation record; cheap forward-only copy.
    pub fn frozen(&self) -> Self {
        let mut m = self.clone();
        for t in m.params_mut() {
            *t = t.detach();
        }
        m
    }

    /// Stacks images into a constant B×n×p² patch tensor.
    pub fn patch_batch(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let c = &self.config;
        if images.is_empty() {
            return Err(Error::Invalid("empty image batch".into()));
        }
        let mut data = Vec::with_capacity(images.len() * c.tokens() * c.patch_len());
        for img in images {
            if img.width != c.image_side || img.height != c.image_side {
                return Err(Error::Invalid(format!(
                    "image is {}x{}, encoder expects {}x{}",
                    img.width, img.height, c.image_side, c.image_side
                )));
            }
            data.extend(patch_pixels(img, c.patch_side)?);
        }
        Tensor::new(&[images.len(), c.tokens(), c.patch_len()], data)
    }

    /// Tokens B×n×d: affine patch projection plus position vectors.
    pub fn patchify(&self, patches: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if patches.rank() != 3 || patches.shape()[1..] != [c.tokens(), c.patch_len()] {
            return Err(Error::shape("patchify", format!("patches {:?}", patches.shape())));
        }
        let b = patches.shape()[0];
        let pos = contract("nd,b->bnd", &[&self.pos, &Tensor::ones(&[b])])?;
        linear(patches, &self.patch_weight, &self.patch_bias)?.add(&pos)
    }

    fn attention(&self, a: &Attention, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h = self.config.heads;
        let dh = d / h;
        let split = |t: Tensor| t.reshape(&[b, n, h, dh]);
        let q = split(linear(x, &a.wq, &a.bq)?)?;
        let k = split(linear(x, &a.wk, &a.bk)?)?;
        let v = split(linear(x, &a.wv, &a.bv)?)?;
        let scores = contract("bnhk,bmhk->bhnm", &[&q, &k])?.scale(1.0 / (dh as f64).sqrt())?;
        let weights = scores.softmax(3)?;
        let ctx = contract("bhnm,bmhk->bnhk", &[&weights, &v])?.reshape(&[b, n, d])?;
        linear(&ctx, &a.wo, &a.bo)
    }

    /// One block over B×n×d tokens. Returns the new tokens and the per-sample
    /// cosine distance of the MoE branch (zeros when the branch is off).
    /// `mask` is B×n×(e·s) in dispatch layout; `None` means all ones.
    pub fn block_forward(&self, k: usize, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let blk = self.blocks.get(k).ok_or_else(|| Error::Invalid(format!("no block {k}")))?;
        if x.rank() != 3 || x.shape()[2] != self.config.dim {
            return Err(Error::shape("block", format!("tokens {:?}", x.shape())));
        }
        let b = x.shape()[0];
        let attended = x.add(&self.attention(&blk.attn, &affine_norm(x, &blk.ln1_gamma, &blk.ln1_beta)?)?)?;
        let h = affine_norm(&attended, &blk.ln2_gamma, &blk.ln2_beta)?;
        let mlp = linear(&linear(&h, &blk.mlp_w1, &blk.mlp_b1)?.gelu()?, &blk.mlp_w2, &blk.mlp_b2)?;
        let out = attended.add(&mlp)?;
        match &blk.moe {
            None => Ok((out, Tensor::zeros(&[b]))),
            Some(p) => {
                let r = moe::forward_batched(&h, p, mask)?;
                Ok((out.add(&r.output)?, r.cosine))
            }
        }
    }

    /// Mask for block `k`, B×n×(e·s), or `None` when this pass runs unmasked.
    /// Each sample's draw is keyed by (step, sample key) so it is independent
    /// of batch composition.
    pub fn block_masks(&self, k: usize, keys: &[u64], mode: Mode) -> Result<Option<Tensor>> {
        let c = &self.config;
        let step = match mode {
            Mode::Train { step } => step,
            Mode::Eval if c.eval_masking => u64::MAX,
            Mode::Eval => return Ok(None),
        };
        if c.moe != MoeMode::Masked {
            return Ok(None);
        }
        let cfg = c.block_mask(k);
        let n = c.tokens();
        let es = c.experts * c.slots;
        let mut data = Vec::with_capacity(keys.len() * n * es);
        for &key in keys {
            let m = moe::build_mask(n, c.experts, c.slots, &cfg, rng::key(&[step, key]))?;
            data.extend_from_slice(moe::mask_to_dispatch_layout(&m)?.data());
        }
        Ok(Some(Tensor::new(&[keys.len(), n, es], data)?))
    }

    /// Full forward from a B×n×p² patch batch. `keys` identifies each sample
    /// for mask drawing and must have length B.
    pub fn encode(&self, patches: &Tensor, keys: &[u64], mode: Mode) -> Result<Encoded> {
        if keys.len() != patches.shape()[0] {
            return Err(Error::Invalid(format!("{} sample keys for batch of {}", keys.len(), patches.shape()[0])));
        }
        let mut x = self.patchify(patches)?;
        let mut block_cosines = Vec::with_capacity(self.blocks.len());
        for k in 0..self.blocks.len() {
            let mask = self.block_masks(k, keys, mode)?;
            let (y, cos) = self.block_forward(k, &x, mask.as_ref())?;
            x = y;
            block_cosines.push(cos);
        }
        let n = x.shape()[1];
        let pool = Tensor::full(&[n], 1.0 / n as f64);
        let pooled = contract("bnd,n->bd", &[&x, &pool])?;
        let b = pooled.shape()[0];
        let pooled = pooled.reshape(&[b, 1, self.config.dim])?;
        let normed = affine_norm(&pooled, &self.ln_post_gamma, &self.ln_post_beta)?;
        let projected = linear(&normed, &self.proj_weight, &self.proj_bias)?.reshape(&[b, self.config.dim])?;
        Ok(Encoded { embeddings: projected.l2_normalize()?, block_cosines })
    }

    /// Single-image eval-mode encoding: unit embedding and per-block cosine distances.
    pub fn encode_image(&self, image: &GrayImage) -> Result<(Vec<f64>, Vec<f64>)> {
        let enc = self.frozen().encode(&self.patch_batch(&[image])?, &[0], Mode::Eval)?;
        let cos = enc.block_cosines.iter().map(|c| c.data()[0]).collect();
        Ok((enc.embeddings.to_vec(), cos))
    }

    /// B×2 scaled similarities of each embedding to the (real, fake) class embeddings.
    pub fn class_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        let sims = contract("bd,cd->bc", &[embeddings, &self.labels.classes()?])?;
        sims.mul(&self.labels.scale()?)
    }

    /// Bona fide probability for each image, eval mode.
    pub fn score_batch(&self, images: &[&GrayImage]) -> Result<Vec<f64>> {
        Ok(self.embed_and_score(images)?.1)
    }

    /// Eval-mode embeddings (B×d) and bona fide probabilities.
    pub fn embed_and_score(&self, images: &[&GrayImage]) -> Result<(Tensor, Vec<f64>)> {
        let frozen = self.frozen();
        let keys: Vec<u64> = (0..images.len() as u64).collect();
        let enc = frozen.encode(&frozen.patch_batch(images)?, &keys, Mode::Eval)?;
        let probs = frozen.class_logits(&enc.embeddings)?.softmax(1)?;
        Ok((enc.embeddings, probs.data().chunks_exact(2).map(|r| r[0]).collect()))
    }

    pub fn classify(&self, image: &GrayImage) -> Result<f64> {
        Ok(self.score_batch(&[image])?[0])
    }

    /// Loss bundle for one batch. Block cosine distances are averaged over the
    /// batch; with `cosine_loss` off they enter as zeros.
    pub fn batch_loss(
        &self,
        patches: &Tensor,
        labels: &[Label],
        keys: &[u64],
        mode: Mode,
        loss_mode: LossMode,
        cosine_loss: bool,
    ) -> Result<LossBundle> {
        if labels.len() != patches.shape()[0] {
            return Err(Error::Invalid(format!("{} labels for batch of {}", labels.len(), patches.shape()[0])));
        }
        let enc = self.encode(patches, keys, mode)?;
        let classes = self.labels.classes()?;
        let scale = self.labels.scale()?;
        let l_clip = match loss_mode {
            LossMode::PerClass => class_loss(&enc.embeddings, &classes, labels, &scale)?,
            LossMode::PerSample => {
                let one_hot = labels.iter().flat_map(|l| if l.index() == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
                let sel = Tensor::new(&[labels.len(), 2], one_hot.collect())?;
                let txt = contract("bc,cd->bd", &[&sel, &classes])?;
                clip_loss(&enc.embeddings, &txt, &scale)?
            }
        };
        let cosines = enc
            .block_cosines
            .iter()
            .map(|c| if cosine_loss { c.mean() } else { Ok(Tensor::zeros(&[])) })
            .collect::<Result<Vec<_>>>()?;
        total_loss(&l_clip, &cosines)
    }
}
