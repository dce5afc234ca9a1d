//! Optimisation: the learning-rate schedule, SGD with momentum, backbone
//! pretraining, class-centric initialisation and the phase trainers.

mod cache;
mod checkpoint;
mod eval;
mod model;
mod phases;
mod pretrain;

pub use cache::{phase1_digest, CacheEntry, ForwardCache};
pub use checkpoint::{Checkpoint, PhaseTag, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{eval_threads, expert_scores, extract_features, FeatureSet};
pub use model::{truncate_pool, AdaptState, Bound, Forward, Stage, Trainable};
pub use phases::{EpochStats, PhaseKind, PhaseTrainer, METRICS_HEADER};
pub use pretrain::{
    class_centric_init, class_means, pretrain_backbone, FrozenBackbone, PretrainConfig,
    PretrainReport,
};

use crate::autodiff::{Gradients, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{leaves, leaves_mut, ParamTree};

/// Optimiser and schedule settings shared by every phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// Learning rate per 256 samples; the base rate is `lr_per_256 · B / 256`.
    pub lr_per_256: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Epochs per phase, E.
    pub epochs: usize,
    /// Initial weight η of the instance-balanced batch.
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr_per_256: 0.002,
            warmup_epochs: 5,
            weight_decay: 1e-2,
            momentum: 0.9,
            epochs: 40,
            eta: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr_per_256 > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.eta < 0.0 {
            return Err(Error::Config(
                "weight decay and eta must be nonnegative, momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.lr_per_256 * self.batch as f64 / 256.0
    }

    /// Iterations per epoch: one pass worth of samples, `⌈N / B⌉`.
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch).max(1)
    }
}

/// Linear warmup from 0 to `base_lr` over the warmup epochs, then half-cosine
/// decay reaching 0 at `total_steps` (the end of the phase).
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    let warmup_steps = warmup_steps.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return if step >= total_steps { 0.0 } else { base_lr };
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD hyper-parameters for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for Sgd {
    fn from(c: &TrainConfig) -> Self {
        Self {
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        }
    }
}

/// `m ← μ·m + g + wd·p; p ← p − lr·m` on one leaf.
fn sgd_leaf(p: &mut Tensor, g: &Tensor, m: &mut Tensor, lr: f64, cfg: Sgd) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != m.shape() {
        return Err(Error::Config(format!(
            "sgd shapes disagree: param {:?}, grad {:?}, momentum {:?}",
            p.shape(),
            g.shape(),
            m.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("non-finite gradient".into()));
    }
    for ((pv, gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
        *mv = cfg.momentum * *mv + gv + cfg.weight_decay * *pv;
        *pv -= lr * *mv;
    }
    Ok(())
}

/// One SGD step over whole trees; `grads` and `momenta` mirror `params`.
pub fn sgd_step<P: ParamTree<Tensor>>(
    params: &mut P,
    grads: &P,
    momenta: &mut P,
    lr: f64,
    cfg: Sgd,
) -> Result<()> {
    let gs = leaves(grads);
    let mut ms = leaves_mut(momenta);
    let mut ps = leaves_mut(params);
    if gs.len() != ps.len() || ms.len() != ps.len() {
        return Err(Error::Config("sgd trees have different layouts".into()));
    }
    for ((p, g), m) in ps.iter_mut().zip(&gs).zip(ms.iter_mut()) {
        sgd_leaf(p.1, g.1, m.1, lr, cfg)?;
    }
    Ok(())
}

/// SGD over a tree bound on a tape. Leaves that received no gradient in this
/// step (e.g. unmatched group prompts) are skipped entirely: neither their
/// momentum nor weight decay is applied.
pub fn sgd_update<'t, P, B>(
    params: &mut P,
    bound: &B,
    grads: &Gradients,
    momenta: &mut P,
    lr: f64,
    cfg: Sgd,
) -> Result<()>
where
    P: ParamTree<Tensor>,
    B: ParamTree<Var<'t>>,
{
    let vars = leaves(bound);
    let mut ms = leaves_mut(momenta);
    let mut ps = leaves_mut(params);
    if vars.len() != ps.len() || ms.len() != ps.len() {
        return Err(Error::Config("sgd trees have different layouts".into()));
    }
    for ((p, v), m) in ps.iter_mut().zip(&vars).zip(ms.iter_mut()) {
        if let Some(g) = grads.get(*v.1) {
            sgd_leaf(p.1, g, m.1, lr, cfg)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_junction() {
        let base = 0.1;
        assert_eq!(lr_at(0, base, 50, 400), 0.0);
        assert_eq!(lr_at(50, base, 50, 400), base);
        assert!(lr_at(400, base, 50, 400) < 1e-8 * base);
        let before = lr_at(49, base, 50, 400);
        let after = lr_at(51, base, 50, 400);
        assert!((before - base).abs() < 0.03 * base && (after - base).abs() < 1e-3 * base);
        for s in 0..=400 {
            let lr = lr_at(s, base, 50, 400);
            assert!((0.0..=base).contains(&lr));
        }
    }

    #[test]
    fn sgd_cases() {
        let cfg = Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = Tensor::from_vec([2], vec![1.0, -2.0]);
        let mut m = Tensor::zeros([2]);
        sgd_step(&mut p, &Tensor::zeros([2]), &mut m, 0.5, cfg).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let g = Tensor::from_vec([2], vec![0.5, 1.0]);
        sgd_step(&mut p, &g, &mut m, 0.1, cfg).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let cfg = Sgd {
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let (lr1, lr2, g1, g2) = (0.05, 0.03, 0.7, -0.4);
        let mut p = Tensor::from_vec([1], vec![2.0]);
        let mut m = Tensor::zeros([1]);
        sgd_step(&mut p, &Tensor::from_vec([1], vec![g1]), &mut m, lr1, cfg).unwrap();
        sgd_step(&mut p, &Tensor::from_vec([1], vec![g2]), &mut m, lr2, cfg).unwrap();
        let m1 = g1 + 0.01 * 2.0;
        let p1 = 2.0 - lr1 * m1;
        let m2 = 0.9 * m1 + g2 + 0.01 * p1;
        let p2 = p1 - lr2 * m2;
        assert!((p.data()[0] - p2).abs() < 1e-12);
        assert!((m.data()[0] - m2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::zeros([1]);
        let mut m = Tensor::zeros([1]);
        let g = Tensor::from_vec([1], vec![f64::NAN]);
        let cfg = Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(matches!(
            sgd_step(&mut p, &g, &mut m, 0.1, cfg),
            Err(Error::NonFinite(_))
        ));
    }
}
