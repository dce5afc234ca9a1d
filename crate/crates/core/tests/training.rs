//! Trainer contracts on a tiny configuration: initial checkpoints, frozen
//! parameter groups, resume, determinism and the phase-2 forward cache.

use ltpeft_core::config::RunConfig;
use ltpeft_core::data::{LongTailDataset, SplitKind};
use ltpeft_core::params::ParamDigest;
use ltpeft_core::pipeline as pl;
use ltpeft_core::train::{
    phase1_digest, AdaptState, Bound, Checkpoint, ForwardCache, FrozenBackbone, PhaseKind, Stage, Trainable,
};
use ltpeft_core::{Error, Tape, Tensor};

fn tiny(extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "data.classes = 5
data.n_max = 12
data.imbalance = 6
data.val_per_class = 4
data.source_classes = 5
data.source_per_class = 8
data.source_val_per_class = 2
vit.layers = 2
vit.shared_layers = 1
vit.dim = 8
vit.mlp_dim = 16
vit.prompt_len = 2
vit.adapter_dim = 4
pool.size = 4
pretrain.epochs = 3
train.epochs = 3
train.warmup_epochs = 1
train.lr_per_256 = 0.4
",
    )
    .unwrap();
    for line in extra.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg
}

fn setup(cfg: &RunConfig) -> (FrozenBackbone, LongTailDataset, AdaptState<Tensor>) {
    let (source, target) = pl::generate(cfg).unwrap();
    let (bb, _) = pl::pretrain(cfg, &source).unwrap();
    let state = pl::initial_state(cfg, &bb, &target).unwrap();
    (bb, target, state)
}

#[test]
fn zero_epoch_phase_checkpoints_the_initialisation() {
    let cfg = tiny("");
    let (bb, target, state) = setup(&cfg);
    let trainer = pl::trainer(PhaseKind::Phase1, &cfg, &bb, &target, state.clone()).unwrap();
    let ckpt = trainer.checkpoint();
    assert_eq!(pl::state_from_checkpoint(&cfg, &ckpt).unwrap(), state);
    assert_eq!(ckpt.epoch, 0);
}

#[test]
fn phases_leave_frozen_groups_untouched() {
    let cfg = tiny("");
    let (bb, target, state) = setup(&cfg);
    let backbone_before = ParamDigest::of(bb.params());

    let mut p1 = pl::trainer(PhaseKind::Phase1, &cfg, &bb, &target, state.clone()).unwrap();
    let first = p1.run_epoch().unwrap();
    p1.run().unwrap();
    let last = *p1.history().last().unwrap();
    assert!(last.loss_total < first.loss_total, "{first:?} -> {last:?}");
    let s1 = p1.into_state();
    assert_ne!(ParamDigest::of(&s1.shared), ParamDigest::of(&state.shared));
    assert_ne!(ParamDigest::of(&s1.adapters), ParamDigest::of(&state.adapters));
    assert_eq!(ParamDigest::of(&s1.pool), ParamDigest::of(&state.pool));
    bb.verify().unwrap();

    let mut p2 = pl::trainer(PhaseKind::Phase2, &cfg, &bb, &target, s1.clone()).unwrap();
    p2.run().unwrap();
    let s2 = p2.into_state();
    assert_eq!(ParamDigest::of(&s2.shared), ParamDigest::of(&s1.shared));
    assert_eq!(ParamDigest::of(&s2.adapters), ParamDigest::of(&s1.adapters));
    assert_ne!(ParamDigest::of(&s2.pool), ParamDigest::of(&s1.pool));
    assert_ne!(ParamDigest::of(&s2.classifier), ParamDigest::of(&s1.classifier));

    let mut probe = pl::trainer(PhaseKind::Probe, &cfg, &bb, &target, state.clone()).unwrap();
    probe.run().unwrap();
    let sp = probe.into_state();
    assert_eq!(ParamDigest::of(&sp.shared), ParamDigest::of(&state.shared));
    assert_eq!(ParamDigest::of(&sp.adapters), ParamDigest::of(&state.adapters));
    assert_ne!(ParamDigest::of(&sp.classifier), ParamDigest::of(&state.classifier));

    assert_eq!(ParamDigest::of(bb.params()), backbone_before);
    bb.verify().unwrap();
}

#[test]
fn resume_equals_uninterrupted() {
    let cfg = tiny("");
    let (bb, target, state) = setup(&cfg);
    for kind in [PhaseKind::Phase1, PhaseKind::Joint] {
        let mut full = pl::trainer(kind, &cfg, &bb, &target, state.clone()).unwrap();
        full.run().unwrap();

        let mut part = pl::trainer(kind, &cfg, &bb, &target, state.clone()).unwrap();
        part.run_until(1).unwrap();
        let saved = Checkpoint::from_bytes(&part.checkpoint().to_bytes()).unwrap();
        drop(part);
        let mut resumed = pl::resume_trainer(kind, &cfg, &bb, &target, &saved).unwrap();
        resumed.run().unwrap();

        assert_eq!(resumed.metrics_csv(), full.metrics_csv());
        assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }
}

#[test]
fn identical_runs_are_identical() {
    let cfg = tiny("");
    let run = || {
        let (bb, target, state) = setup(&cfg);
        let mut t = pl::trainer(PhaseKind::Phase1, &cfg, &bb, &target, state).unwrap();
        t.run().unwrap();
        (bb.digest(), t.metrics_csv(), t.checkpoint().to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_refuses_foreign_backbone() {
    let cfg = tiny("");
    let (bb, target, state) = setup(&cfg);
    let t = pl::trainer(PhaseKind::Phase1, &cfg, &bb, &target, state).unwrap();
    let ckpt = t.checkpoint();
    let other_cfg = tiny("seed = 9");
    let (other, _) = pl::pretrain(&other_cfg, &pl::generate(&other_cfg).unwrap().0).unwrap();
    assert!(matches!(
        pl::resume_trainer(PhaseKind::Phase1, &cfg, &other, &target, &ckpt),
        Err(Error::DigestMismatch { .. })
    ));
    assert!(matches!(
        pl::resume_trainer(PhaseKind::Phase2, &cfg, &bb, &target, &ckpt),
        Err(Error::Dependency(_))
    ));
}

#[test]
fn cache_matches_uncached_forward() {
    let cfg = tiny("");
    let (bb, target, state) = setup(&cfg);
    let mut p1 = pl::trainer(PhaseKind::Phase1, &cfg, &bb, &target, state).unwrap();
    p1.run_until(1).unwrap();
    let s1 = p1.into_state();
    let mut cache = ForwardCache::build(bb.cfg(), bb.params(), &s1, &target, SplitKind::Train, 4).unwrap();
    let digest = phase1_digest(bb.params(), &s1);
    assert_eq!(cache.len(), target.train().len());

    for i in [0, 3, target.train().len() - 1] {
        let tape = Tape::new();
        let bound = Bound::new(&tape, bb.cfg(), bb.params(), &s1, Stage::Phase1, Trainable::NONE, 1);
        let x_k = bound.front(&[target.image(SplitKind::Train, i)]).unwrap();
        let q = bound.back_plain(x_k, 1).unwrap();
        let entry = cache.get(SplitKind::Train, i, digest).unwrap();
        assert!(entry.tokens_k.max_abs_diff(&x_k.value()) <= 1e-12);
        let q = q.value();
        let dq = q.data().iter().zip(&entry.query).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dq <= 1e-12);
    }

    assert!(matches!(cache.get(SplitKind::Val, 0, digest), Err(Error::CacheMiss)));
    let mut moved = s1.clone();
    moved.shared.layers[0].data_mut()[0] += 1e-3;
    assert!(matches!(
        cache.get(SplitKind::Train, 0, phase1_digest(bb.params(), &moved)),
        Err(Error::CacheMiss)
    ));
    cache.evict(2);
    assert!(matches!(cache.get(SplitKind::Train, 2, digest), Err(Error::CacheMiss)));
    assert!(cache.get(SplitKind::Train, 1, digest).is_ok());
}

#[test]
fn single_prompt_pool_still_trains() {
    let cfg = tiny("pool.size = 1\npool.ensemble = 1");
    let (bb, target, state) = setup(&cfg);
    let mut p2 = pl::trainer(PhaseKind::Phase2, &cfg, &bb, &target, state.clone()).unwrap();
    p2.run().unwrap();
    let s2 = p2.into_state();
    assert_ne!(s2.pool.prompts[0], state.pool.prompts[0]);
    assert_ne!(s2.pool.keys[0], state.pool.keys[0]);
}

#[test]
fn scores_are_finite_for_every_stage() {
    let cfg = tiny("");
    let (bb, target, state) = setup(&cfg);
    for stage in [Stage::Frozen, Stage::Phase1, Stage::Phase2] {
        let s = pl::scores(&cfg, &bb, &state, stage, &target, SplitKind::Val).unwrap();
        assert_eq!(s.shape(), [target.val().len(), 5]);
        assert!(s.is_finite());
    }
}
