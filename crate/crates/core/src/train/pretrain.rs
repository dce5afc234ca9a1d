//! Supervised pretraining of the backbone on the source domain and
//! class-centric initialisation of the cosine classifier.

use crate::autodiff::{normalize_rows, Tape, Tensor};
use crate::backbone::{
    init_linear_head, BackboneParams, Classifier, ClassifierParams, LinearHead, ViTConfig,
    NORM_FLOOR,
};
use crate::data::{epoch_batches, LongTailDataset, SplitKind};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::params::{bind, zeros_like, ParamDigest};
use crate::prompts::PromptPool;
use crate::rng::stream;

use super::eval::extract_features;
use super::model::{AdaptState, Stage};
use super::{lr_at, sgd_update, Sgd};

const PURPOSE_INIT: u64 = 0x4242_4e45;
const PURPOSE_ORDER: u64 = 0x4242_4f52;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 0.05,
            warmup_epochs: 2,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// A pretrained backbone that can no longer be modified; its digest is fixed
/// at construction and re-checked by [`FrozenBackbone::verify`].
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    cfg: ViTConfig,
    params: BackboneParams,
    digest: ParamDigest,
}

impl FrozenBackbone {
    pub fn freeze(cfg: ViTConfig, params: BackboneParams) -> Self {
        let digest = ParamDigest::of(&params);
        Self {
            cfg,
            params,
            digest,
        }
    }

    pub fn cfg(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn digest(&self) -> ParamDigest {
        self.digest
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Recomputes the digest; errors if the parameters no longer match.
    pub fn verify(&self) -> Result<()> {
        let now = ParamDigest::of(&self.params);
        if now != self.digest {
            return Err(Error::DigestMismatch {
                expected: self.digest.hex(),
                found: now.hex(),
            });
        }
        Ok(())
    }
}

/// Per-epoch mean cross-entropy and final training accuracy of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Trains the backbone and a throwaway linear head with cross-entropy on the
/// (balanced) source domain, then freezes the backbone.
pub fn pretrain_backbone(
    vit: &ViTConfig,
    source: &LongTailDataset,
    cfg: &PretrainConfig,
) -> Result<(FrozenBackbone, PretrainReport)> {
    vit.validate()?;
    if source.pixels() != vit.pixels() {
        return Err(Error::Config(format!(
            "source images have {} values, backbone expects {}",
            source.pixels(),
            vit.pixels()
        )));
    }
    let mut init_rng = stream(cfg.seed, PURPOSE_INIT);
    let mut params = BackboneParams::init(vit, &mut init_rng);
    let mut head = init_linear_head(vit.dim, source.classes(), &mut init_rng);
    let mut m_params = zeros_like(&params);
    let mut m_head = zeros_like(&head);
    let sgd = Sgd {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let n = source.train().len();
    let steps_per_epoch = n.div_ceil(cfg.batch.max(1)).max(1);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut order_rng = stream(cfg.seed, PURPOSE_ORDER);
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(n, cfg.batch, &mut order_rng);
        for (it, idx) in batches.iter().enumerate() {
            let tape = Tape::new();
            let bb = bind(&tape, &params, true);
            let hd: LinearHead<_> = bind(&tape, &head, true);
            let vitb = crate::backbone::BoundVit {
                cfg: vit,
                backbone: bb,
                adapters: None,
                shared: None,
            };
            let images: Vec<&[f32]> = idx.iter().map(|&i| source.image(SplitKind::Train, i)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| source.label(SplitKind::Train, i)).collect();
            let x = vitb.embed(&tape, &images)?;
            let x = vitb.run_blocks(x, idx.len(), 0..vit.layers, None)?;
            let f = vitb.class_features(x, idx.len())?;
            let loss = cross_entropy(f.linear(hd.weight, hd.bias)?, &labels)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss {value} at epoch {epoch}, iteration {it}"
                )));
            }
            sum += value;
            let grads = tape.backward(loss)?;
            let lr = lr_at(step, cfg.lr, warmup, total);
            sgd_update(&mut params, &vitb.backbone, &grads, &mut m_params, lr, sgd)?;
            sgd_update(&mut head, &hd, &grads, &mut m_head, lr, sgd)?;
            step += 1;
        }
        let mean = sum / batches.len().max(1) as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let frozen = FrozenBackbone::freeze(vit.clone(), params);
    let train_accuracy = head_accuracy(&frozen, &head, source)?;
    Ok((
        frozen,
        PretrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}

fn head_accuracy(bb: &FrozenBackbone, head: &LinearHead<Tensor>, data: &LongTailDataset) -> Result<f64> {
    let feats = frozen_features(bb, data, SplitKind::Train)?;
    let logits = crate::autodiff::linear(&feats.features, &head.weight, &head.bias)?;
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == feats.labels[r])
        .count();
    Ok(100.0 * correct as f64 / logits.rows().max(1) as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Adaptation state with nothing in it, for frozen-backbone passes.
pub(crate) fn empty_state(vit: &ViTConfig, classes: usize) -> AdaptState<Tensor> {
    AdaptState {
        shared: crate::prompts::SharedPrompt { layers: Vec::new() },
        adapters: Vec::new(),
        pool: PromptPool {
            keys: Vec::new(),
            prompts: Vec::new(),
        },
        classifier: Classifier {
            weight: Tensor::zeros([classes, vit.dim]),
        },
    }
}

pub(crate) fn frozen_features(
    bb: &FrozenBackbone,
    data: &LongTailDataset,
    split: SplitKind,
) -> Result<super::eval::FeatureSet> {
    let state = empty_state(bb.cfg(), data.classes());
    extract_features(bb.cfg(), bb.params(), &state, Stage::Frozen, 1, data, split)
}

/// Per-class mean of `features` rows; errors listing every class without rows.
pub fn class_means(features: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} feature rows", labels.len())));
    }
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Config(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(r)) {
            *s += v;
        }
    }
    let missing: Vec<usize> = (0..classes).filter(|&c| counts[c] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    for c in 0..classes {
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= counts[c] as f64;
        }
    }
    Ok(Tensor::from_vec([classes, d], sums))
}

/// Classifier rows set to the L2-normalised mean frozen-backbone feature of
/// each class's training samples.
pub fn class_centric_init(bb: &FrozenBackbone, target: &LongTailDataset) -> Result<ClassifierParams> {
    let feats = frozen_features(bb, target, SplitKind::Train)?;
    let means = class_means(&feats.features, &feats.labels, target.classes())?;
    Ok(Classifier {
        weight: normalize_rows(&means, NORM_FLOOR),
    })
}
