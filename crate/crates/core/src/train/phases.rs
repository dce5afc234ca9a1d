//! Dual-sampling trainers for the linear probe, phase 1, phase 2 and joint
//! training. All four share one loop; they differ in what is trainable and in
//! how features are produced.
//!
//! Each iteration draws an instance-balanced and a class-balanced batch, runs
//! both through one forward pass, and takes a single optimiser step on
//! `β·L(ins) + L(bal)` (plus the key loss of each batch when group prompts are
//! active), with `β = η(E − e)/E`.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{dual_sample, LongTailDataset, SplitKind};
use crate::error::{Error, Result};
use crate::losses::{
    agcl_loss, beta_schedule, gcl_adjust_with, key_loss, BatchKind, ClassCounts, GclConfig,
    ScheduleState, EXPECTED_ABS_NORMAL,
};
use crate::params::{zeros_like, ParamDigest};
use crate::prompts::SharedPrompt;
use crate::rng::{stream, RngState, StreamRng};

use rand_distr::{Distribution, StandardNormal};

use super::cache::{phase1_digest, ForwardCache};
use super::checkpoint::{Checkpoint, PhaseTag};
use super::eval::expert_scores;
use super::model::{check_classifier, AdaptState, Bound, Stage, Trainable};
use super::pretrain::{frozen_features, FrozenBackbone};
use super::{lr_at, sgd_update, Sgd, TrainConfig};

pub const METRICS_HEADER: &str = "phase,epoch,loss_instance,loss_balanced,loss_key,loss_total,lr";

/// Samples per pass when filling the phase-2 cache.
const CACHE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseKind {
    /// Classifier only, on frozen features.
    Probe,
    /// Shared prompt, adapters and classifier.
    Phase1,
    /// Group prompts, keys and classifier over cached phase-1 features.
    Phase2,
    /// Everything at once, no cache.
    Joint,
}

impl PhaseKind {
    pub fn trainable(self) -> Trainable {
        match self {
            PhaseKind::Probe => Trainable {
                classifier: true,
                ..Trainable::NONE
            },
            PhaseKind::Phase1 => Trainable {
                shared: true,
                adapters: true,
                classifier: true,
                pool: false,
            },
            PhaseKind::Phase2 => Trainable {
                pool: true,
                classifier: true,
                ..Trainable::NONE
            },
            PhaseKind::Joint => Trainable {
                shared: true,
                adapters: true,
                pool: true,
                classifier: true,
            },
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            PhaseKind::Probe => Stage::Frozen,
            PhaseKind::Phase1 => Stage::Phase1,
            PhaseKind::Phase2 | PhaseKind::Joint => Stage::Phase2,
        }
    }

    pub fn tag(self) -> PhaseTag {
        match self {
            PhaseKind::Probe => PhaseTag::Probe,
            PhaseKind::Phase1 => PhaseTag::Phase1,
            PhaseKind::Phase2 => PhaseTag::Phase2,
            PhaseKind::Joint => PhaseTag::Joint,
        }
    }

    fn purpose(self) -> u64 {
        0x5452_0000 + self.tag() as u64
    }

    fn uses_keys(self) -> bool {
        matches!(self, PhaseKind::Phase2 | PhaseKind::Joint)
    }
}

/// Per-epoch mean losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_instance: f64,
    pub loss_balanced: f64,
    pub loss_key: f64,
    pub loss_total: f64,
    pub lr: f64,
}

/// Resumable trainer for one phase.
pub struct PhaseTrainer<'a> {
    kind: PhaseKind,
    backbone: &'a FrozenBackbone,
    data: &'a LongTailDataset,
    cfg: TrainConfig,
    gcl: GclConfig,
    ensemble: usize,
    counts: ClassCounts,
    state: AdaptState<Tensor>,
    momenta: AdaptState<Tensor>,
    epoch: usize,
    step: usize,
    rng: StreamRng,
    metrics: Vec<String>,
    history: Vec<EpochStats>,
    echo: String,
    cache: Option<(ForwardCache, ParamDigest)>,
    probe_features: Option<Tensor>,
}

impl<'a> PhaseTrainer<'a> {
    /// Starts a phase from `state` with fresh momenta.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: PhaseKind,
        backbone: &'a FrozenBackbone,
        data: &'a LongTailDataset,
        cfg: TrainConfig,
        gcl: GclConfig,
        ensemble: usize,
        state: AdaptState<Tensor>,
        echo: String,
    ) -> Result<Self> {
        cfg.validate()?;
        gcl.validate()?;
        let vit = backbone.cfg();
        if data.pixels() != vit.pixels() {
            return Err(Error::Config(format!(
                "dataset images have {} values, backbone expects {}",
                data.pixels(),
                vit.pixels()
            )));
        }
        check_classifier(&state.classifier, data.classes(), vit.dim)?;
        if kind.uses_keys() && (state.pool.is_empty() || ensemble == 0 || ensemble > state.pool.len()) {
            return Err(Error::Config(format!(
                "group prompts need 1 <= k={ensemble} <= m={}",
                state.pool.len()
            )));
        }
        let counts = data.class_counts()?;
        let momenta = zeros_like(&state);
        let mut trainer = Self {
            kind,
            backbone,
            data,
            cfg: cfg.clone(),
            gcl,
            ensemble,
            counts,
            state,
            momenta,
            epoch: 0,
            step: 0,
            rng: stream(cfg.seed, kind.purpose()),
            metrics: Vec::new(),
            history: Vec::new(),
            echo,
            cache: None,
            probe_features: None,
        };
        trainer.prepare()?;
        Ok(trainer)
    }

    /// Resumes from a checkpoint written by [`PhaseTrainer::checkpoint`].
    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        kind: PhaseKind,
        backbone: &'a FrozenBackbone,
        data: &'a LongTailDataset,
        cfg: TrainConfig,
        gcl: GclConfig,
        ensemble: usize,
        template: AdaptState<Tensor>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        if ckpt.phase != kind.tag() {
            return Err(Error::Dependency(format!(
                "checkpoint holds {} state, not {}",
                ckpt.phase,
                kind.tag()
            )));
        }
        if ckpt.backbone_digest != backbone.digest() {
            return Err(Error::DigestMismatch {
                expected: backbone.digest().hex(),
                found: ckpt.backbone_digest.hex(),
            });
        }
        let mut state = template;
        ckpt.get("state", &mut state)?;
        let mut trainer = Self::new(kind, backbone, data, cfg, gcl, ensemble, state, ckpt.config.clone())?;
        ckpt.get("momenta", &mut trainer.momenta)?;
        trainer.epoch = ckpt.epoch as usize;
        trainer.step = ckpt.step as usize;
        trainer.rng = ckpt
            .rng
            .ok_or_else(|| Error::Config("checkpoint has no rng state to resume from".into()))?
            .restore();
        trainer.metrics = ckpt
            .metrics
            .lines()
            .skip(1)
            .map(str::to_string)
            .collect();
        Ok(trainer)
    }

    fn prepare(&mut self) -> Result<()> {
        match self.kind {
            PhaseKind::Probe => {
                let f = frozen_features(self.backbone, self.data, SplitKind::Train)?;
                self.probe_features = Some(f.features);
            }
            PhaseKind::Phase2 => {
                let cache = ForwardCache::build(
                    self.backbone.cfg(),
                    self.backbone.params(),
                    &self.state,
                    self.data,
                    SplitKind::Train,
                    CACHE_CHUNK,
                )?;
                let digest = phase1_digest(self.backbone.params(), &self.state);
                self.cache = Some((cache, digest));
            }
            PhaseKind::Phase1 | PhaseKind::Joint => {}
        }
        Ok(())
    }

    pub fn kind(&self) -> PhaseKind {
        self.kind
    }

    pub fn state(&self) -> &AdaptState<Tensor> {
        &self.state
    }

    pub fn into_state(self) -> AdaptState<Tensor> {
        self.state
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Stats of the epochs run by this trainer instance (not restored on resume).
    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch(self.data.train().len())
    }

    fn lr(&self) -> f64 {
        let spe = self.steps_per_epoch();
        lr_at(
            self.step,
            self.cfg.base_lr(),
            self.cfg.warmup_epochs * spe,
            self.cfg.epochs * spe,
        )
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Runs epochs until `epoch` of them are complete (or the phase ends).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let spe = self.steps_per_epoch();
        let schedule = ScheduleState {
            eta: self.cfg.eta,
            epochs: self.cfg.epochs,
            epoch: self.epoch,
        };
        let beta = beta_schedule(&schedule, BatchKind::Instance);
        let mut sums = [0.0; 4];
        let mut lr = 0.0;
        for it in 0..spe {
            lr = self.lr();
            let parts = self.iteration(beta, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{} epoch {} iteration {it} (step {}, lr {lr:e}, beta {beta}): {m}",
                    self.kind.tag(),
                    self.epoch,
                    self.step
                )),
                other => other,
            })?;
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            self.step += 1;
        }
        let n = spe as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            loss_instance: sums[0] / n,
            loss_balanced: sums[1] / n,
            loss_key: sums[2] / n,
            loss_total: sums[3] / n,
            lr,
        };
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{},{},{},{},{},{}",
            self.kind.tag(),
            stats.epoch,
            stats.loss_instance,
            stats.loss_balanced,
            stats.loss_key,
            stats.loss_total,
            stats.lr
        );
        log::debug!("{row}");
        self.metrics.push(row);
        self.history.push(stats);
        self.epoch += 1;
        Ok(stats)
    }

    /// One optimiser step; returns `[L_ins, L_bal, L_key, total]`.
    fn iteration(&mut self, beta: f64, lr: f64) -> Result<[f64; 4]> {
        let b = self.cfg.batch;
        let pair = dual_sample(self.data, b, &mut self.rng)?;
        let idx: Vec<usize> = pair
            .instance
            .indices
            .iter()
            .chain(&pair.balanced.indices)
            .copied()
            .collect();
        let labels: Vec<usize> = idx
            .iter()
            .map(|&i| self.data.label(SplitKind::Train, i))
            .collect();
        let c = self.data.classes();
        let eps: Vec<f64> = if self.gcl.noise_enabled {
            (0..idx.len() * c)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z.abs()
                })
                .collect()
        } else {
            vec![EXPECTED_ABS_NORMAL; idx.len() * c]
        };
        let eps = Tensor::from_vec([idx.len(), c], eps);

        let vit = self.backbone.cfg();
        let tape = Tape::new();
        let trainable = self.kind.trainable();
        let bound = Bound::new(
            &tape,
            vit,
            self.backbone.params(),
            &self.state,
            self.kind.stage(),
            trainable,
            self.ensemble,
        );
        let (features, keyed) = match self.kind {
            PhaseKind::Probe => {
                let f = self.probe_features.as_ref().expect("probe features prepared");
                let d = f.cols();
                let mut rows = Vec::with_capacity(idx.len() * d);
                for &i in &idx {
                    rows.extend_from_slice(f.row(i));
                }
                (tape.constant(Tensor::from_vec([idx.len(), d], rows)), None)
            }
            PhaseKind::Phase1 => {
                let images: Vec<&[f32]> = idx.iter().map(|&i| self.data.image(SplitKind::Train, i)).collect();
                (bound.forward(&images)?.features, None)
            }
            PhaseKind::Phase2 => {
                let (cache, digest) = self.cache.as_ref().expect("cache prepared");
                let t = vit.tokens();
                let mut tokens = Vec::with_capacity(idx.len() * t * vit.dim);
                let mut queries = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let e = cache.get(SplitKind::Train, i, *digest)?;
                    tokens.extend_from_slice(e.tokens_k.data());
                    queries.push(e.query.clone());
                }
                let x_k = tape.constant(Tensor::from_vec([idx.len() * t, vit.dim], tokens));
                let matched = bound.match_queries(&queries)?;
                (bound.back_grouped(x_k, &matched)?, Some((queries, matched)))
            }
            PhaseKind::Joint => {
                let images: Vec<&[f32]> = idx.iter().map(|&i| self.data.image(SplitKind::Train, i)).collect();
                let out = bound.forward(&images)?;
                let keyed = out.queries.zip(out.matched);
                (out.features, keyed)
            }
        };
        let scores = bound.scores(features)?;
        let v = gcl_adjust_with(scores, &self.counts, &self.gcl, &eps)?;
        let l_ins = agcl_loss(v.rows(0, b)?, &labels[..b], &self.gcl)?;
        let l_bal = agcl_loss(v.rows(b, 2 * b)?, &labels[b..], &self.gcl)?;
        let mut total = l_ins.scale(beta).add(l_bal)?;
        let mut key_value = 0.0;
        if let Some((queries, matched)) = &keyed {
            let qs: Vec<Tensor> = queries
                .iter()
                .map(|q| Tensor::from_vec([q.len()], q.clone()))
                .collect();
            let k_ins = key_loss(&tape, &qs[..b], &matched[..b], &bound.pool.keys)?;
            let k_bal = key_loss(&tape, &qs[b..], &matched[b..], &bound.pool.keys)?;
            let keys: Var = k_ins.add(k_bal)?;
            key_value = keys.value().item();
            total = total.add(keys)?;
        }
        let parts = [
            l_ins.value().item(),
            l_bal.value().item(),
            key_value,
            total.value().item(),
        ];
        if !parts.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss parts [ins, bal, key, total] = {parts:?}"
            )));
        }
        let grads = tape.backward(total)?;
        let sgd = Sgd::from(&self.cfg);
        if trainable.shared {
            let bound_shared = SharedPrompt {
                layers: bound.vit.shared.clone().expect("shared prompt bound"),
            };
            sgd_update(&mut self.state.shared, &bound_shared, &grads, &mut self.momenta.shared, lr, sgd)?;
        }
        if trainable.adapters {
            let bound_adapters = bound.vit.adapters.as_ref().expect("adapters bound");
            sgd_update(&mut self.state.adapters, bound_adapters, &grads, &mut self.momenta.adapters, lr, sgd)?;
        }
        if trainable.pool {
            sgd_update(&mut self.state.pool, &bound.pool, &grads, &mut self.momenta.pool, lr, sgd)?;
        }
        if trainable.classifier {
            sgd_update(
                &mut self.state.classifier,
                &bound.classifier,
                &grads,
                &mut self.momenta.classifier,
                lr,
                sgd,
            )?;
        }
        Ok(parts)
    }

    /// Metrics CSV of every completed epoch, header included.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.metrics {
            out.push_str(row);
            out.push('\n');
        }
        out
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.kind.tag(), self.backbone.digest());
        c.epoch = self.epoch as u32;
        c.step = self.step as u64;
        c.rng = Some(RngState::capture(&self.rng));
        c.config = self.echo.clone();
        c.metrics = self.metrics_csv();
        c.put("state", &self.state);
        c.put("momenta", &self.momenta);
        c
    }

    /// Raw scores `[N×C]` of the current state on `split`.
    pub fn scores(&self, split: SplitKind) -> Result<Tensor> {
        expert_scores(
            self.backbone.cfg(),
            self.backbone.params(),
            &self.state,
            self.kind.stage(),
            self.ensemble,
            self.data,
            split,
        )
    }
}
