//! Tiny ViT backbone: patch embedding, pre-norm transformer blocks whose
//! attention can take extra prompt tokens as keys/values, parallel adapter
//! branches on the FFN, and a cosine classifier head.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{attention, Activation, AttentionLayout, Tape, Tensor, Var};
use crate::error::{Error, Result, TensorError};
use crate::params::{join, param_struct, MapLeaves, ParamTree};
use crate::rng::truncated_normal;

/// Norm floor used wherever a vector is L2-normalised.
pub const NORM_FLOOR: f64 = 1e-12;

/// Shape of the tiny ViT and of the adaptation modules attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of each block's FFN.
    pub mlp_dim: usize,
    pub image: usize,
    pub patch: usize,
    pub channels: usize,
    /// Prompt tokens per layer, for the shared prompt and for each group prompt.
    pub prompt_len: usize,
    /// Blocks that see only the shared prompt; group prompts enter blocks `K+1..=L`.
    pub shared_layers: usize,
    pub adapter_dim: usize,
    pub adapter_scale: f64,
    /// Cosine classifier temperature σ.
    pub classifier_scale: f64,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 32,
            heads: 2,
            mlp_dim: 64,
            image: 8,
            patch: 2,
            channels: 1,
            prompt_len: 10,
            shared_layers: 2,
            adapter_dim: 8,
            adapter_scale: 0.1,
            classifier_scale: 16.0,
            ln_eps: 1e-5,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.shared_layers > self.layers {
            return bad(format!(
                "shared layers K={} exceeds layer count {}",
                self.shared_layers, self.layers
            ));
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return bad(format!("image {} not divisible by patch {}", self.image, self.patch));
        }
        if self.layers == 0 || self.dim == 0 || self.mlp_dim == 0 || self.channels == 0 {
            return bad("layers, dim, mlp_dim and channels must be positive".into());
        }
        if !(self.adapter_scale > 0.0) || !(self.classifier_scale > 0.0) || !(self.ln_eps > 0.0) {
            return bad("adapter scale, classifier scale and ln eps must be positive".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let side = self.image / self.patch;
        side * side
    }

    /// Class token plus patch tokens.
    pub fn tokens(&self) -> usize {
        1 + self.patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image * self.image * self.channels
    }

    pub fn group_layers(&self) -> usize {
        self.layers - self.shared_layers
    }
}

param_struct! {
    /// Weights of one pre-norm transformer block.
    pub struct Block {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
    }
}

param_struct! {
    /// AdaptFormer branch: `s · up(relu(down(LN(x))))` added next to the FFN.
    pub struct AdapterLayer { down_w, down_b, up_w, up_b }
}

param_struct! {
    /// Cosine classifier rows θ_f, one per class.
    pub struct Classifier { weight }
}

param_struct! {
    /// Plain linear head used only while pretraining the backbone.
    pub struct LinearHead { weight, bias }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos: T,
    pub blocks: Vec<Block<T>>,
    pub norm_g: T,
    pub norm_b: T,
}

impl<T> ParamTree<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "patch_w"), &self.patch_w);
        f(join(prefix, "patch_b"), &self.patch_b);
        f(join(prefix, "cls"), &self.cls);
        f(join(prefix, "pos"), &self.pos);
        self.blocks.visit(&join(prefix, "blocks"), f);
        f(join(prefix, "norm_g"), &self.norm_g);
        f(join(prefix, "norm_b"), &self.norm_b);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(prefix, "patch_w"), &mut self.patch_w);
        f(join(prefix, "patch_b"), &mut self.patch_b);
        f(join(prefix, "cls"), &mut self.cls);
        f(join(prefix, "pos"), &mut self.pos);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        f(join(prefix, "norm_g"), &mut self.norm_g);
        f(join(prefix, "norm_b"), &mut self.norm_b);
    }
}

impl<T> MapLeaves<T> for Backbone<T> {
    type Mapped<U> = Backbone<U>;
    fn map_leaves<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Backbone<U> {
        Backbone {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            cls: f(&self.cls),
            pos: f(&self.pos),
            blocks: self.blocks.map_leaves(f),
            norm_g: f(&self.norm_g),
            norm_b: f(&self.norm_b),
        }
    }
}

pub type BackboneParams = Backbone<Tensor>;
pub type AdapterParams = Vec<AdapterLayer<Tensor>>;
pub type ClassifierParams = Classifier<Tensor>;

fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_vec(
        [fan_in, fan_out],
        (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
    )
}

impl BackboneParams {
    /// Random initialisation for pretraining from scratch.
    pub fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_g: Tensor::ones([d]),
                ln1_b: Tensor::zeros([d]),
                wq: xavier(rng, d, d),
                bq: Tensor::zeros([d]),
                wk: xavier(rng, d, d),
                bk: Tensor::zeros([d]),
                wv: xavier(rng, d, d),
                bv: Tensor::zeros([d]),
                wo: xavier(rng, d, d),
                bo: Tensor::zeros([d]),
                ln2_g: Tensor::ones([d]),
                ln2_b: Tensor::zeros([d]),
                w1: xavier(rng, d, cfg.mlp_dim),
                b1: Tensor::zeros([cfg.mlp_dim]),
                w2: xavier(rng, cfg.mlp_dim, d),
                b2: Tensor::zeros([d]),
            })
            .collect();
        Backbone {
            patch_w: xavier(rng, cfg.patch_dim(), d),
            patch_b: Tensor::zeros([d]),
            cls: truncated_normal(rng, [1, d], 0.02),
            pos: truncated_normal(rng, [cfg.tokens(), d], 0.02),
            blocks,
            norm_g: Tensor::ones([d]),
            norm_b: Tensor::zeros([d]),
        }
    }
}

/// Adapters with Kaiming-style down projections and zero up projections, so
/// every branch contributes exactly zero at initialisation.
pub fn init_adapters(cfg: &ViTConfig, rng: &mut impl Rng) -> AdapterParams {
    let (d, h) = (cfg.dim, cfg.adapter_dim);
    (0..cfg.layers)
        .map(|_| AdapterLayer {
            down_w: xavier(rng, d, h),
            down_b: Tensor::zeros([h]),
            up_w: Tensor::zeros([h, d]),
            up_b: Tensor::zeros([d]),
        })
        .collect()
}

pub fn init_linear_head(dim: usize, classes: usize, rng: &mut impl Rng) -> LinearHead<Tensor> {
    LinearHead {
        weight: xavier(rng, dim, classes),
        bias: Tensor::zeros([classes]),
    }
}

/// Cuts images (`H×W×ch`, row-major) into flattened patches, one row per patch,
/// patches in raster order and pixels inside a patch as (row, col, channel).
pub fn patchify(cfg: &ViTConfig, images: &[&[f32]]) -> Result<Tensor> {
    let (side, p, ch) = (cfg.image, cfg.patch, cfg.channels);
    if p == 0 || side % p != 0 {
        return Err(TensorError::Broadcast {
            lhs: vec![side, side, ch],
            rhs: vec![p, p],
        }
        .into());
    }
    let per_side = side / p;
    let mut data = Vec::with_capacity(images.len() * cfg.patches() * cfg.patch_dim());
    for img in images {
        if img.len() != cfg.pixels() {
            return Err(TensorError::DataLength {
                shape: vec![side, side, ch],
                len: img.len(),
            }
            .into());
        }
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (py * p + dy, px * p + dx);
                        for c in 0..ch {
                            data.push(img[(y * side + x) * ch + c] as f64);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(
        [images.len() * cfg.patches(), cfg.patch_dim()],
        data,
    ))
}

/// Patch tokens `z_0` of one image (without class token or positions).
pub fn patch_embed(cfg: &ViTConfig, image: &[f32], params: &BackboneParams) -> Result<Tensor> {
    let patches = patchify(cfg, &[image])?;
    Ok(crate::autodiff::linear(&patches, &params.patch_w, &params.patch_b)?)
}

/// Extra key/value tokens fed to one block's attention.
#[derive(Clone, Copy, Debug)]
pub enum ExtraTokens<'t> {
    None,
    /// `[P×d]` tokens shared by every sample in the batch.
    Shared(Var<'t>),
    /// `[B·P×d]` tokens, `P` consecutive rows per sample.
    PerSample { rows: usize, tokens: Var<'t> },
}

/// Backbone blocks and adaptation modules recorded on one tape.
pub struct BoundVit<'t, 'c> {
    pub cfg: &'c ViTConfig,
    pub backbone: Backbone<Var<'t>>,
    pub adapters: Option<Vec<AdapterLayer<Var<'t>>>>,
    pub shared: Option<Vec<Var<'t>>>,
}

impl<'t, 'c> BoundVit<'t, 'c> {
    /// `[B·T×d]` input tokens: class token then patch embeddings, plus positions.
    pub fn embed(&self, tape: &'t Tape, images: &[&[f32]]) -> Result<Var<'t>> {
        let b = images.len();
        let np = self.cfg.patches();
        let patches = tape.constant(patchify(self.cfg, images)?);
        let pe = patches.linear(self.backbone.patch_w, self.backbone.patch_b)?;
        let mut parts = Vec::with_capacity(2 * b);
        for i in 0..b {
            parts.push(self.backbone.cls);
            parts.push(pe.rows(i * np, (i + 1) * np)?);
        }
        let x = Var::concat_rows(&parts)?;
        let pos = Var::concat_rows(&vec![self.backbone.pos; b])?;
        Ok(x.add(pos)?)
    }

    /// Runs blocks `range` over `x`. `group` supplies per-sample group prompt
    /// tokens for the blocks at and after `shared_layers`.
    pub fn run_blocks(
        &self,
        x: Var<'t>,
        batch: usize,
        range: Range<usize>,
        group: Option<&GroupTokens<'t>>,
    ) -> Result<Var<'t>> {
        let mut x = x;
        for layer in range {
            let shared = self
                .shared
                .as_ref()
                .map(|u| u[layer])
                .filter(|u| u.value().rows() > 0);
            let extra = match group.and_then(|g| g.for_layer(layer, self.cfg.shared_layers)) {
                Some(per_sample) => {
                    let rows_g = per_sample.value().rows() / batch;
                    let mut parts = Vec::with_capacity(2 * batch);
                    for b in 0..batch {
                        if let Some(u) = shared {
                            parts.push(u);
                        }
                        parts.push(per_sample.rows(b * rows_g, (b + 1) * rows_g)?);
                    }
                    let tokens = Var::concat_rows(&parts)?;
                    let rows = tokens.value().rows() / batch;
                    if rows == 0 {
                        ExtraTokens::None
                    } else {
                        ExtraTokens::PerSample { rows, tokens }
                    }
                }
                None => match shared {
                    Some(u) => ExtraTokens::Shared(u),
                    None => ExtraTokens::None,
                },
            };
            let adapter = self.adapters.as_ref().map(|a| &a[layer]);
            x = block_forward(
                self.cfg,
                &self.backbone.blocks[layer],
                adapter,
                x,
                extra,
                batch,
            )?;
        }
        Ok(x)
    }

    /// Final-norm class tokens `[B×d]`.
    pub fn class_features(&self, x: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let t = self.cfg.tokens();
        let rows: Vec<Var<'t>> = (0..batch)
            .map(|b| x.rows(b * t, b * t + 1))
            .collect::<std::result::Result<_, _>>()?;
        let c = Var::concat_rows(&rows)?;
        Ok(c.layer_norm(self.backbone.norm_g, self.backbone.norm_b, self.cfg.ln_eps)?)
    }
}

/// Per-sample ensembled group prompts, one `[B·P×d]` matrix per group layer.
pub struct GroupTokens<'t> {
    pub layers: Vec<Var<'t>>,
}

impl<'t> GroupTokens<'t> {
    fn for_layer(&self, layer: usize, shared_layers: usize) -> Option<Var<'t>> {
        layer
            .checked_sub(shared_layers)
            .and_then(|i| self.layers.get(i).copied())
    }
}

/// One transformer block. Queries are `[c, z]`; keys and values are
/// `[c, z, extra]`, so prompt tokens never produce query rows.
pub fn block_forward<'t>(
    cfg: &ViTConfig,
    blk: &Block<Var<'t>>,
    adapter: Option<&AdapterLayer<Var<'t>>>,
    x: Var<'t>,
    extra: ExtraTokens<'t>,
    batch: usize,
) -> Result<Var<'t>> {
    let d = cfg.dim;
    if x.value().cols() != d {
        return Err(TensorError::Broadcast {
            lhs: x.shape(),
            rhs: vec![d],
        }
        .into());
    }
    let tokens = x.value().rows() / batch.max(1);
    let eps = cfg.ln_eps;
    let h = x.layer_norm(blk.ln1_g, blk.ln1_b, eps)?;
    let q = h.linear(blk.wq, blk.bq)?;
    let k = h.linear(blk.wk, blk.bk)?;
    let v = h.linear(blk.wv, blk.bv)?;
    let project = |p: Var<'t>| -> Result<(Var<'t>, Var<'t>)> {
        let hp = p.layer_norm(blk.ln1_g, blk.ln1_b, eps)?;
        Ok((hp.linear(blk.wk, blk.bk)?, hp.linear(blk.wv, blk.bv)?))
    };
    let (kv, extra_rows, shared) = match extra {
        ExtraTokens::None => (None, 0, true),
        ExtraTokens::Shared(p) => (Some(project(p)?), p.value().rows(), true),
        ExtraTokens::PerSample { rows, tokens } => (Some(project(tokens)?), rows, false),
    };
    let layout = AttentionLayout {
        batch,
        tokens,
        extra: extra_rows,
        extra_shared: shared,
        heads: cfg.heads,
    };
    let a = attention(q, k, v, kv, layout)?.linear(blk.wo, blk.bo)?;
    let x = x.add(a)?;
    let h2 = x.layer_norm(blk.ln2_g, blk.ln2_b, eps)?;
    let f = h2
        .linear(blk.w1, blk.b1)?
        .activation(Activation::Gelu)
        .linear(blk.w2, blk.b2)?;
    let y = x.add(f)?;
    match adapter {
        Some(ad) => {
            let branch = h2
                .linear(ad.down_w, ad.down_b)?
                .activation(Activation::Relu)
                .linear(ad.up_w, ad.up_b)?
                .scale(cfg.adapter_scale);
            Ok(y.add(branch)?)
        }
        None => Ok(y),
    }
}

/// Textbook pre-norm transformer block on plain tensors, one sample `[T×d]`,
/// with per-head `softmax(QKᵀ/√d_h)·V`. Reference for the taped block.
pub fn vanilla_block(cfg: &ViTConfig, blk: &Block<Tensor>, x: &Tensor) -> Result<Tensor> {
    use crate::autodiff::{activation, layer_norm, linear, matmul, softmax};
    let eps = cfg.ln_eps;
    let (t, d) = x.dims2()?;
    let dh = d / cfg.heads;
    let h = layer_norm(x, &blk.ln1_g, &blk.ln1_b, eps)?;
    let q = linear(&h, &blk.wq, &blk.bq)?;
    let k = linear(&h, &blk.wk, &blk.bk)?;
    let v = linear(&h, &blk.wv, &blk.bv)?;
    let cols = |m: &Tensor, c0: usize| -> Tensor {
        let mut out = Vec::with_capacity(t * dh);
        for r in 0..t {
            out.extend_from_slice(&m.row(r)[c0..c0 + dh]);
        }
        Tensor::from_vec([t, dh], out)
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = vec![0.0; t * d];
    for head in 0..cfg.heads {
        let (qh, kh, vh) = (cols(&q, head * dh), cols(&k, head * dh), cols(&v, head * dh));
        let scores = matmul(&qh, &kh.transpose()?)?.map(|s| s * scale);
        let probs = softmax(&scores, 1)?;
        let oh = matmul(&probs, &vh)?;
        for r in 0..t {
            heads_out[r * d + head * dh..r * d + (head + 1) * dh].copy_from_slice(oh.row(r));
        }
    }
    let a = linear(&Tensor::from_vec([t, d], heads_out), &blk.wo, &blk.bo)?;
    let x1 = Tensor::from_vec(
        [t, d],
        x.data().iter().zip(a.data()).map(|(p, q)| p + q).collect(),
    );
    let h2 = layer_norm(&x1, &blk.ln2_g, &blk.ln2_b, eps)?;
    let f = linear(
        &activation(&linear(&h2, &blk.w1, &blk.b1)?, Activation::Gelu),
        &blk.w2,
        &blk.b2,
    )?;
    Ok(Tensor::from_vec(
        [t, d],
        x1.data().iter().zip(f.data()).map(|(p, q)| p + q).collect(),
    ))
}

/// `σ · ⟨θ_i/‖θ_i‖, c/‖c‖⟩` for every class row, on the tape. `features` is `[B×d]`.
pub fn cosine_scores<'t>(features: Var<'t>, weight: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let f = features.normalize_rows(NORM_FLOOR);
    let w = weight.normalize_rows(NORM_FLOOR);
    Ok(f.matmul(w.transpose()?)?.scale(scale))
}

/// Plain-tensor cosine classification of one feature vector.
pub fn cosine_classify(feature: &[f64], cls: &ClassifierParams, scale: f64) -> Result<Vec<f64>> {
    let (c, d) = cls.weight.dims2()?;
    if feature.len() != d {
        return Err(TensorError::Broadcast {
            lhs: vec![feature.len()],
            rhs: vec![c, d],
        }
        .into());
    }
    let f = Tensor::from_vec([1, d], feature.to_vec());
    let fn_ = crate::autodiff::normalize_rows(&f, NORM_FLOOR);
    let wn = crate::autodiff::normalize_rows(&cls.weight, NORM_FLOOR);
    let s = crate::autodiff::matmul(&fn_, &wn.transpose()?)?;
    Ok(s.data().iter().map(|v| v * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ViTConfig {
        ViTConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            mlp_dim: 12,
            image: 4,
            patch: 2,
            prompt_len: 3,
            shared_layers: 1,
            adapter_dim: 3,
            ..ViTConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig {
            dim: 33,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            shared_layers: 5,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            image: 9,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_embed_shapes_and_zero_image() {
        let cfg = ViTConfig {
            image: 16,
            patch: 4,
            ..ViTConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = BackboneParams::init(&cfg, &mut rng);
        let zero = vec![0f32; cfg.pixels()];
        let z = patch_embed(&cfg, &zero, &p).unwrap();
        assert_eq!(z.shape(), &[16, cfg.dim]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        p.patch_b = Tensor::full([cfg.dim], 0.5);
        let z = patch_embed(&cfg, &zero, &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.5));
        let bad = vec![0f32; cfg.pixels() - 1];
        assert!(patch_embed(&cfg, &bad, &p).is_err());
    }

    #[test]
    fn single_white_patch_matches_direct_projection() {
        let cfg = ViTConfig {
            image: 16,
            patch: 4,
            ..ViTConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BackboneParams::init(&cfg, &mut rng);
        // Light up the patch at (row 1, col 2).
        let mut img = vec![0f32; cfg.pixels()];
        for y in 4..8 {
            for x in 8..12 {
                img[y * 16 + x] = 1.0;
            }
        }
        let z = patch_embed(&cfg, &img, &p).unwrap();
        let idx = 4 + 2;
        for c in 0..cfg.dim {
            let direct: f64 = (0..16).map(|r| p.patch_w.data()[r * cfg.dim + c]).sum();
            assert!((z.row(idx)[c] - direct).abs() < 1e-12);
        }
        for (i, row) in (0..16).map(|i| (i, z.row(i))) {
            if i != idx {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn block_without_extras_is_bitwise_vanilla() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = BackboneParams::init(&cfg, &mut rng);
        let x = truncated_normal(&mut rng, [cfg.tokens(), cfg.dim], 1.0);
        let tape = Tape::new();
        let blk = bind(&tape, &p.blocks[0], false);
        let xv = tape.constant(x.clone());
        let y = block_forward(&cfg, &blk, None, xv, ExtraTokens::None, 1).unwrap();
        let reference = vanilla_block(&cfg, &p.blocks[0], &x).unwrap();
        assert_eq!(y.value().data(), reference.data());
    }

    #[test]
    fn zero_adapter_is_exact_identity() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BackboneParams::init(&cfg, &mut rng);
        let ad = init_adapters(&cfg, &mut rng);
        let x = truncated_normal(&mut rng, [2 * cfg.tokens(), cfg.dim], 1.0);
        let u = truncated_normal(&mut rng, [cfg.prompt_len, cfg.dim], 0.5);
        let tape = Tape::new();
        let blk = bind(&tape, &p.blocks[1], false);
        let adv = bind(&tape, &ad[1], true);
        let xv = tape.constant(x);
        let uv = tape.constant(u);
        let with = block_forward(&cfg, &blk, Some(&adv), xv, ExtraTokens::Shared(uv), 2).unwrap();
        let without = block_forward(&cfg, &blk, None, xv, ExtraTokens::Shared(uv), 2).unwrap();
        assert_eq!(with.value().data(), without.value().data());
    }

    #[test]
    fn prompt_permutation_invariance() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BackboneParams::init(&cfg, &mut rng);
        let x = truncated_normal(&mut rng, [cfg.tokens(), cfg.dim], 1.0);
        let u = truncated_normal(&mut rng, [4, cfg.dim], 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &r in &perm {
            permuted.extend_from_slice(u.row(r));
        }
        let up = Tensor::from_vec([4, cfg.dim], permuted);
        let run = |prompt: Tensor| {
            let tape = Tape::new();
            let blk = bind(&tape, &p.blocks[0], false);
            let xv = tape.constant(x.clone());
            let uv = tape.constant(prompt);
            let out = block_forward(&cfg, &blk, None, xv, ExtraTokens::Shared(uv), 1).unwrap();
            (*out.value()).clone()
        };
        let a = run(u);
        let b = run(up);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn cosine_classifier_cases() {
        let w = Tensor::from_vec([2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let cls = Classifier { weight: w };
        let s = cosine_classify(&[3.0, 0.0, 0.0], &cls, 16.0).unwrap();
        assert_eq!(s, vec![16.0, 0.0]);
        let s = cosine_classify(&[0.0, 0.0, 5.0], &cls, 16.0).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        let s = cosine_classify(&[0.0, 0.0, 0.0], &cls, 16.0).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(cosine_classify(&[1.0], &cls, 16.0).is_err());
    }
}
